//! Differentiable building blocks recorded on a [`Tape`].

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, StrafeError};
use crate::optim::{Bound, ParamStore};
use crate::tensor::{Mode, Real, Tensor};

/// `sin(t·ω) ∥ cos(t·ω)` with `ω` a geometric progression of `dim/2`
/// frequencies from 1e-5 to 1.
pub fn temporal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(StrafeError::Config(format!("temporal embedding dimension {dim} must be even")));
    }
    let half = dim / 2;
    let omega = |k: usize| {
        if half == 1 {
            1e-5
        } else {
            10f64.powf(-5.0 * (1.0 - k as f64 / (half - 1) as f64))
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| (t * omega(k)).sin()));
    out.extend((0..half).map(|k| (t * omega(k)).cos()));
    Ok(out)
}

pub(crate) fn init_attention<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{w}"), Tensor::glorot(&[d, d], d, d, rng));
    }
    store.insert(format!("{prefix}.bo"), Tensor::zeros(&[d]));
}

/// Output of one self-attention block.
pub struct AttentionOut {
    pub output: Var,
    /// One `n × n` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product self-attention with a residual connection:
/// `x + dropout(concat_h(softmax(Q_h K_hᵀ / √d_h) V_h) · W_o + b_o)`.
///
/// `key_mask[j] == false` hides position `j` from every query.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
    dropout: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<AttentionOut> {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let q = tape.matmul(x, bound.get(&format!("{prefix}.wq")))?;
    let k = tape.matmul(x, bound.get(&format!("{prefix}.wk")))?;
    let v = tape.matmul(x, bound.get(&format!("{prefix}.wv")))?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let a = tape.softmax_lastdim(logits, key_mask)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let projected = tape.matmul(joined, bound.get(&format!("{prefix}.wo")))?;
    let projected = tape.add_row(projected, bound.get(&format!("{prefix}.bo")))?;
    let projected = tape.dropout(projected, dropout, mode, rng)?;
    let output = tape.add(x, projected)?;
    Ok(AttentionOut { output, weights })
}

pub(crate) fn init_lstm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    store.insert(format!("{prefix}.w_ih"), Tensor::glorot(&[d, 4 * d], d, 4 * d, rng));
    store.insert(format!("{prefix}.w_hh"), Tensor::glorot(&[d, 4 * d], d, 4 * d, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[4 * d]));
}

/// Single-layer unidirectional LSTM with hidden size equal to the input
/// width. Gate order in the packed weights is input, forget, cell, output.
pub fn lstm<T: Real>(tape: &mut Tape<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let (steps, d) = tape.value(x).dims2("lstm")?;
    let w_ih = bound.get(&format!("{prefix}.w_ih"));
    let w_hh = bound.get(&format!("{prefix}.w_hh"));
    let b = bound.get(&format!("{prefix}.b"));
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = tape.gather_rows(x, &[t])?;
        let mut gates = tape.matmul(xt, w_ih)?;
        if let Some(h_prev) = h {
            let rec = tape.matmul(h_prev, w_hh)?;
            gates = tape.add(gates, rec)?;
        }
        let gates = tape.add_row(gates, b)?;
        let i = tape.slice_cols(gates, 0, d)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(gates, d, d)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(gates, 2 * d, d)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(gates, 3 * d, d)?;
        let o = tape.sigmoid(o)?;
        let ig = tape.mul(i, g)?;
        let c_new = match c {
            Some(c_prev) => {
                let kept = tape.mul(f, c_prev)?;
                tape.add(kept, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;
        outputs.push(h_new);
        h = Some(h_new);
        c = Some(c_new);
    }
    tape.concat_rows(&outputs)
}

pub(crate) fn init_mlp<T: Real>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_hidden: usize, rng: &mut ChaCha8Rng) {
    store.insert(format!("{prefix}.w1"), Tensor::glorot(&[d_in, d_hidden], d_in, d_hidden, rng));
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[d_hidden]));
    store.insert(format!("{prefix}.w2"), Tensor::glorot(&[d_hidden, 1], d_hidden, 1, rng));
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[1]));
}

/// Row-wise `sigmoid(tanh(x W1 + b1) W2 + b2)`.
pub fn mlp_probability<T: Real>(tape: &mut Tape<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, bound.get(&format!("{prefix}.w1")))?;
    let h = tape.add_row(h, bound.get(&format!("{prefix}.b1")))?;
    let h = tape.tanh(h)?;
    let o = tape.matmul(h, bound.get(&format!("{prefix}.w2")))?;
    let o = tape.add_row(o, bound.get(&format!("{prefix}.b2")))?;
    tape.sigmoid(o)
}
