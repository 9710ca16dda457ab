use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use strafe_core::checkpoint::{load_embeddings, load_model, model_to_bytes, save_model};
use strafe_core::model::{ModelConfig, StrafeModel, Variant};
use strafe_core::Tensor;
use tempfile::TempDir;

const MICRO: &str = r#"
seed = 5

[paths]
out_dir = "out"

[synthetic]
n_patients = 80
vocab_size = 30
t_max = 6
n_clusters = 3

[embeddings]
dim = 4
epochs = 2

[model]
d_e = 4
n_v = 8
heads = 2
blocks = 1
t_max = 6
dropout = 0.1

[train]
epochs = 3
batch_size = 16
lr = 0.01

[evaluate]
bootstrap_resamples = 40
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_strafe"));
        cmd.current_dir(self.dir.path()).args(args).args(["--config", "run.toml"]);
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn pipeline(&self, variant: &str) {
        if !self.path("out/cohort.jsonl").exists() {
            self.ok(&["simulate"]);
            self.ok(&["embed"]);
        }
        self.ok(&["train", "--variant", variant]);
    }

    fn bytes(&self, rel: &str) -> Vec<u8> {
        fs::read(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn micro_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_e: 4,
        n_v: 8,
        heads: 2,
        blocks: 1,
        t_max: 6,
        dropout: 0.1,
        variant,
        seed: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn simulate_writes_header_plus_one_line_per_patient() {
    let ws = Workspace::new("[paths]\nout_dir = \"out\"\n[synthetic]\nn_patients = 10\n");
    ws.ok(&["simulate"]);
    let text = fs::read_to_string(ws.path("out/cohort.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[0], r#"{"schema":"strafe-cohort-v1"}"#);
    assert!(ws.path("out/cohort.truth.json").is_file());
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let a = Workspace::new(MICRO);
    let b = Workspace::new(MICRO);
    a.ok(&["simulate"]);
    b.ok(&["simulate"]);
    assert_eq!(a.bytes("out/cohort.jsonl"), b.bytes("out/cohort.jsonl"));
    assert_eq!(a.bytes("out/cohort.truth.json"), b.bytes("out/cohort.truth.json"));
    b.ok(&["simulate", "--seed", "6"]);
    assert_ne!(a.bytes("out/cohort.jsonl"), b.bytes("out/cohort.jsonl"));
}

#[test]
fn simulate_reaches_a_low_prevalence_regime() {
    let ws = Workspace::new("[paths]\nout_dir = \"out\"\n[synthetic]\nbase_hazard_logit = -7.2\nweight_scale = 0.1\n");
    let stdout = ws.ok(&["simulate"]);
    let text = fs::read_to_string(ws.path("out/cohort.jsonl")).unwrap();
    let events = text.lines().skip(1).filter(|l| l.contains(r#""event":true"#)).count();
    let rate = events as f64 / 5000.0;
    assert!((rate - 0.066).abs() < 0.02, "rate {rate}: {stdout}");
}

#[test]
fn config_errors_exit_2() {
    let ws = Workspace::new("[model]\nbogus = 1\n");
    assert_eq!(code(&ws.run(&["simulate"])), 2);
    let ws = Workspace::new("[embeddings]\ndim = 5\n[model]\nd_e = 5\n");
    assert_eq!(code(&ws.run(&["embed"])), 2);
    let ws = Workspace::new("");
    assert_eq!(code(&ws.run(&["simulate", "--variant", "gru"])), 2);
    assert_eq!(code(&ws.run_env(&["simulate"], &[("STRAFE_THREADS", "zero")])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let ws = Workspace::new(MICRO);
    assert_eq!(code(&ws.run(&["embed"])), 3);
    ws.ok(&["simulate"]);
    assert_eq!(code(&ws.run(&["train"])), 3);
    ws.ok(&["embed"]);
    assert_eq!(code(&ws.run(&["evaluate"])), 3);
    let missing = Command::new(env!("CARGO_BIN_EXE_strafe"))
        .current_dir(ws.dir.path())
        .args(["simulate", "--config", "nope.toml"])
        .output()
        .unwrap();
    assert_eq!(code(&missing), 3);
}

#[test]
fn embed_on_a_tiny_cohort_is_fast_and_round_trips() {
    let ws = Workspace::new(&MICRO.replace("n_patients = 80", "n_patients = 20"));
    ws.ok(&["simulate"]);
    let start = std::time::Instant::now();
    ws.ok(&["embed"]);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let emb = load_embeddings(ws.path("out/embeddings.ckpt")).unwrap();
    assert_eq!(emb.dim, 4);
    let copy = ws.path("copy.ckpt");
    strafe_core::checkpoint::save_embeddings(&copy, &emb).unwrap();
    assert_eq!(fs::read(copy).unwrap(), ws.bytes("out/embeddings.ckpt"));
}

#[test]
fn train_writes_one_loss_row_per_epoch() {
    let ws = Workspace::new(MICRO);
    ws.pipeline("strafe-lstm");
    let csv = fs::read_to_string(ws.path("out/loss-strafe-lstm.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').nth(1).unwrap().parse::<f64>().unwrap().is_finite()));
    let model: StrafeModel<f32> = load_model(ws.path("out/model-strafe-lstm.ckpt")).unwrap();
    assert_eq!(model.config.variant, Variant::StrafeLstm);
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let ws = Workspace::new(&MICRO.replace("epochs = 3", "epochs = 0"));
    ws.pipeline("strafe");
    let init = StrafeModel::<f32>::new(micro_model_config(Variant::Strafe)).unwrap();
    assert_eq!(ws.bytes("out/model-strafe.ckpt"), model_to_bytes(&init).unwrap());
    let csv = fs::read_to_string(ws.path("out/loss-strafe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn divergence_exits_4() {
    let ws = Workspace::new(&MICRO.replace("lr = 0.01", "lr = 1e300"));
    ws.ok(&["simulate"]);
    ws.ok(&["embed"]);
    let out = ws.run(&["train"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn training_and_evaluation_are_deterministic_across_thread_counts() {
    let a = Workspace::new(MICRO);
    let b = Workspace::new(MICRO);
    a.pipeline("strafe");
    a.ok(&["evaluate"]);
    for step in [&["simulate"][..], &["embed"], &["train"], &["evaluate"]] {
        let out = b.run_env(step, &[("STRAFE_THREADS", "1")]);
        assert!(out.status.success());
    }
    for file in [
        "out/cohort.jsonl",
        "out/embeddings.ckpt",
        "out/model-strafe.ckpt",
        "out/loss-strafe.csv",
        "out/eval-strafe/metrics.json",
        "out/eval-strafe/decile_times.csv",
    ] {
        assert_eq!(a.bytes(file), b.bytes(file), "{file}");
    }
}

fn report(ws: &Workspace, variant: &str) -> serde_json::Value {
    serde_json::from_slice(&ws.bytes(&format!("out/eval-{variant}/metrics.json"))).unwrap()
}

fn metric<'a>(report: &'a serde_json::Value, name: &str) -> &'a serde_json::Value {
    report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == name)
        .unwrap_or_else(|| panic!("metric {name} missing"))
}

#[test]
fn evaluate_report_has_the_expected_shape() {
    let ws = Workspace::new(MICRO);
    ws.pipeline("strafe");
    ws.ok(&["evaluate"]);
    let r = report(&ws, "strafe");
    assert_eq!(r["variant"], "strafe");
    assert_eq!(r["n_test"], 16);
    // 6, 12 and 24 all clip to T_max = 6.
    assert_eq!(r["horizons"], serde_json::json!([6]));
    for name in ["c_index", "mae", "mae_constant_baseline", "auc_t6", "oracle_c_index", "oracle_mae"] {
        let m = metric(&r, name);
        assert!(m["value"].is_number() || m["note"].is_string(), "{name}: {m}");
    }
    let c = metric(&r, "c_index");
    if c["value"].is_number() {
        assert_eq!(c["resamples"], 40);
        assert!(c["ci_low"].as_f64().unwrap() <= c["ci_high"].as_f64().unwrap());
    }
    let fixed = &r["fixed_time"][0];
    assert_eq!(
        fixed["patients"].as_u64().unwrap() + fixed["excluded"].as_u64().unwrap(),
        16
    );
    assert!(ws.path("out/eval-strafe/decile_times.csv").is_file());
}

#[test]
fn oracle_predictions_reach_the_oracle_ceiling() {
    // A model whose curves equal S* is not constructible, so compare the
    // report's oracle entry with a direct computation instead.
    let ws = Workspace::new(MICRO);
    ws.pipeline("strafe");
    ws.ok(&["evaluate"]);
    let r = report(&ws, "strafe");
    let truth = strafe_core::cohort::SyntheticGroundTruth::load(ws.path("out/cohort.truth.json")).unwrap();
    let cohort = strafe_core::cohort::load_cohort(ws.path("out/cohort.jsonl"), 6).unwrap().strict().unwrap();
    let (_, test) = strafe_core::cohort::split_train_test(&cohort, 0.8, 5).unwrap();
    let times = test
        .patients
        .iter()
        .map(|p| strafe_core::survival::mean_survival_time(&strafe_core::cohort::oracle_survival(&truth, &p.id).unwrap()))
        .collect();
    let preds = strafe_core::metrics::PredictionSet::from_times(times, test.labels()).unwrap();
    match strafe_core::metrics::c_index(&preds, false) {
        Ok(c) => assert_eq!(metric(&r, "oracle_c_index")["value"].as_f64().unwrap(), c),
        Err(_) => assert!(metric(&r, "oracle_c_index")["value"].is_null()),
    }
}

#[test]
fn constant_predictions_are_reported_not_fatal() {
    let ws = Workspace::new(MICRO);
    ws.pipeline("strafe");
    let path = ws.path("out/model-strafe.ckpt");
    let mut model: StrafeModel<f32> = load_model(&path).unwrap();
    let heads: Vec<String> = model.params.names().filter(|n| n.starts_with("head.")).cloned().collect();
    for name in heads {
        let shape = model.params.value(&name).shape().to_vec();
        model.params.get_mut(&name).unwrap().value = Tensor::zeros(&shape);
    }
    save_model(&path, &model).unwrap();
    ws.ok(&["evaluate"]);
    let r = report(&ws, "strafe");
    let auc = metric(&r, "auc_t6");
    if auc["value"].is_number() {
        assert_eq!(auc["value"].as_f64().unwrap(), 0.5);
    }
    // Strict ties never count as concordant.
    let c = metric(&r, "c_index");
    assert!(c["value"].is_null() || c["value"].as_f64().unwrap() == 0.0, "{c}");
}

#[test]
fn every_variant_trains_and_evaluates() {
    let ws = Workspace::new(MICRO);
    for v in Variant::ALL {
        ws.pipeline(v.as_str());
        ws.ok(&["evaluate", "--variant", v.as_str()]);
        let r = report(&ws, v.as_str());
        assert_eq!(r["variant"], v.as_str());
    }
}

fn write_cohort_with_solo_patient(ws: &Workspace) -> String {
    let path = ws.path("out/cohort.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    let emb = load_embeddings(ws.path("out/embeddings.ckpt")).unwrap();
    let code = emb.vocab.code(0).to_string();
    text.push_str(&format!(
        r#"{{"id":"SOLO","age":50,"sex":"F","visits":[{{"days_before_index":30,"codes":["{code}"]}}],"label":{{"duration_months":2,"event":true}}}}"#
    ));
    text.push('\n');
    text.push_str(&format!(
        r#"{{"id":"DUO","age":61,"sex":"M","visits":[{{"days_before_index":90,"codes":["{code}"]}},{{"days_before_index":10,"codes":["{code}"]}}],"label":{{"duration_months":6,"event":false}}}}"#
    ));
    text.push('\n');
    fs::write(&path, text).unwrap();
    "SOLO".into()
}

fn multi_visit_patient(ws: &Workspace) -> String {
    let cohort = strafe_core::cohort::load_cohort(ws.path("out/cohort.jsonl"), 6).unwrap().strict().unwrap();
    cohort.patients.iter().find(|p| p.visits.len() >= 4).unwrap().id.clone()
}

fn curve_rows(path: &Path) -> Vec<(f64, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,S_original,S_counterfactual"));
    lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect()
}

#[test]
fn explain_exports_top_pair_counterfactual() {
    let ws = Workspace::new(MICRO);
    ws.pipeline("strafe");
    let id = multi_visit_patient(&ws);
    ws.ok(&["explain", "--patient", &id]);
    let dir = ws.path("out/explain-strafe");
    let heat = fs::read_to_string(dir.join(format!("{id}-heatmap.csv"))).unwrap();
    let n = heat.lines().count();
    assert!(n >= 4);
    assert!(heat.lines().all(|l| l.split(',').count() == n));
    let graph: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(format!("{id}-graph.json"))).unwrap()).unwrap();
    assert_eq!(graph["nodes"].as_array().unwrap().len(), n);
    let rows = curve_rows(&dir.join(format!("{id}-curves.csv")));
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().any(|(a, b)| a != b), "top-pair removal left the curve unchanged");
}

#[test]
fn explain_on_a_single_visit_patient() {
    let ws = Workspace::new(MICRO);
    ws.pipeline("strafe");
    let id = write_cohort_with_solo_patient(&ws);
    ws.ok(&["explain", "--patient", &id]);
    let dir = ws.path("out/explain-strafe");
    let heat = fs::read_to_string(dir.join("SOLO-heatmap.csv")).unwrap();
    assert_eq!(heat.trim(), "1");
    let graph: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("SOLO-graph.json")).unwrap()).unwrap();
    assert_eq!(graph["nodes"].as_array().unwrap().len(), 1);
    let rows = curve_rows(&dir.join("SOLO-curves.csv"));
    assert!(rows.iter().all(|(a, b)| a == b));

    // Two visits: removing the top pair would leave nothing, so nothing is removed.
    let stdout = ws.ok(&["explain", "--patient", "DUO"]);
    assert!(stdout.contains("removed []"), "{stdout}");

    let out = ws.run(&["explain", "--patient", &id, "--remove-visits", "0"]);
    assert_eq!(code(&out), 2);
    let out = ws.run(&["explain", "--patient", "NOBODY"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn explicit_removal_indices() {
    let ws = Workspace::new(MICRO);
    ws.pipeline("strafe-lstm");
    let id = multi_visit_patient(&ws);
    let stdout = ws.ok(&["explain", "--variant", "strafe-lstm", "--patient", &id, "--remove-visits", "0,2"]);
    assert!(stdout.contains("[0, 2]"), "{stdout}");
    assert_eq!(code(&ws.run(&["explain", "--variant", "strafe-lstm", "--patient", &id, "--remove-visits", "99"])), 2);
}

#[test]
fn uncontextualized_variants_refuse_explain() {
    let ws = Workspace::new(MICRO);
    for v in ["uncontextualized-strafe", "uncontextualized-lstm"] {
        ws.pipeline(v);
        let out = ws.run(&["explain", "--variant", v, "--patient", "P000000"]);
        assert_eq!(code(&out), 5, "{v}");
        assert!(String::from_utf8_lossy(&out.stderr).contains(v));
    }
}
