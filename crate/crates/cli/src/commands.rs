use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use strafe_core::checkpoint::{load_embeddings, load_model, save_embeddings, save_model};
use strafe_core::cohort::{
    filter_fixed_time_cohort, fixed_time_label, generate_synthetic_cohort, load_cohort, oracle_survival, save_cohort,
    split_train_test, Cohort, SyntheticGroundTruth,
};
use strafe_core::embeddings::{build_sentences, train_skipgram, EmbeddingMatrix};
use strafe_core::explain::{
    counterfactual_remove_visits, extract_attention, visit_graph_export, write_counterfactual_csv, write_graph_json,
    write_heatmap_csv,
};
use strafe_core::metrics::{
    auc_roc, bootstrap_metric, c_index, decile_ppv, decile_progression, mae, write_decile_ppv_csv,
    write_decile_times_csv, MetricEntry, PredictionSet,
};
use strafe_core::model::{train_strafe, StrafeModel};
use strafe_core::survival::{fixed_time_risk, mean_survival_time};
use strafe_core::StrafeError;

use crate::config::RunConfig;
use crate::Failure;

fn require(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::input(path, "no such file"))
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: Failure::GENERIC,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> strafe_core::Result<()>) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path).map_err(StrafeError::from)?);
    body(&mut w)?;
    w.flush().map_err(StrafeError::from)?;
    Ok(())
}

fn read_cohort(config: &RunConfig) -> Result<Cohort, Failure> {
    let path = config.cohort_path();
    require(&path)?;
    let loaded = load_cohort(&path, config.model.t_max)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded.strict()?)
}

fn read_split(config: &RunConfig) -> Result<(Cohort, Cohort), Failure> {
    let cohort = read_cohort(config)?;
    Ok(split_train_test(&cohort, config.data.train_fraction, config.data.split_seed)?)
}

fn read_embeddings(config: &RunConfig) -> Result<EmbeddingMatrix, Failure> {
    let path = config.embeddings_path();
    require(&path)?;
    Ok(load_embeddings(&path)?)
}

fn read_model(config: &RunConfig) -> Result<StrafeModel<f32>, Failure> {
    let path = config.model_path();
    require(&path)?;
    let model: StrafeModel<f32> = load_model(&path)?;
    if model.config.variant != config.model.variant {
        return Err(Failure::config(format!(
            "{} holds variant {}, configuration asks for {}",
            path.display(),
            model.config.variant,
            config.model.variant
        )));
    }
    Ok(model)
}

pub fn simulate(config: &RunConfig) -> Result<(), Failure> {
    let (cohort, truth) = generate_synthetic_cohort(&config.synthetic)?;
    let path = config.cohort_path();
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    save_cohort(&path, &cohort)?;
    truth.save(config.truth_path())?;
    println!(
        "wrote {} patients ({:.1}% events) to {}",
        cohort.len(),
        100.0 * cohort.event_rate(),
        path.display()
    );
    Ok(())
}

pub fn embed(config: &RunConfig) -> Result<(), Failure> {
    let (train, _) = read_split(config)?;
    let corpus = build_sentences(&train, config.embeddings.window_days)?;
    let out = train_skipgram(&corpus, &config.embeddings)?;
    create_dir(&config.paths.out_dir)?;
    save_embeddings(config.embeddings_path(), &out.embeddings)?;
    println!(
        "embedded {} concepts from {} sentences to {}",
        out.embeddings.vocab.len(),
        corpus.len(),
        config.embeddings_path().display()
    );
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<(), Failure> {
    let (train, _) = read_split(config)?;
    let emb = read_embeddings(config)?;
    let (model, report) = train_strafe(&train, &emb, config.model.clone(), &config.train)?;
    create_dir(&config.paths.out_dir)?;
    save_model(config.model_path(), &model)?;
    write_file(&config.loss_path(), |w| {
        writeln!(w, "epoch,loss")?;
        for (i, l) in report.epoch_loss.iter().enumerate() {
            writeln!(w, "{},{l}", i + 1)?;
        }
        Ok(())
    })?;
    match report.epoch_loss.last() {
        Some(l) => println!("trained {} for {} epochs, final loss {l:.5}", config.model.variant, report.epoch_loss.len()),
        None => println!("saved the initialization of {} (0 epochs)", config.model.variant),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FixedTimeSummary {
    horizon: u32,
    patients: usize,
    positives: usize,
    /// Censored before the horizon, so neither positive nor negative.
    excluded: usize,
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    variant: String,
    n_test: usize,
    n_events: usize,
    t_max: u32,
    horizons: Vec<u32>,
    metrics: Vec<MetricEntry>,
    fixed_time: Vec<FixedTimeSummary>,
    files: BTreeMap<String, String>,
    notes: Vec<String>,
}

fn with_ci(entry: MetricEntry, summary: strafe_core::Result<strafe_core::metrics::BootstrapSummary>) -> MetricEntry {
    match summary {
        Ok(b) if entry.value.is_some() => entry.with_bootstrap(&b),
        _ => entry,
    }
}

pub fn evaluate(config: &RunConfig) -> Result<(), Failure> {
    let (train, test) = read_split(config)?;
    let emb = read_embeddings(config)?;
    let model = read_model(config)?;
    let ev = &config.evaluate;
    let curves = model.survival_curves(&test.patients, &emb)?;
    let preds = PredictionSet::from_curves(curves.clone(), test.labels())?;

    let mut metrics = Vec::new();
    let mut notes = Vec::new();
    let mut files = BTreeMap::new();
    let n = preds.len();

    let point = MetricEntry::point("c_index", c_index(&preds, ev.harrell_ties));
    let boot = bootstrap_metric(n, |idx| c_index(&preds.select(idx), ev.harrell_ties), ev.bootstrap_resamples, ev.bootstrap_seed);
    metrics.push(with_ci(point, boot));
    let point = MetricEntry::point("mae", mae(&preds));
    let boot = bootstrap_metric(n, |idx| mae(&preds.select(idx)), ev.bootstrap_resamples, ev.bootstrap_seed);
    metrics.push(with_ci(point, boot));

    // Reference point: always predict the mean observed training event time.
    let observed: Vec<f64> = train
        .patients
        .iter()
        .filter(|p| p.label.event)
        .map(|p| p.label.duration_months as f64)
        .collect();
    let constant = if observed.is_empty() {
        Err(StrafeError::UndefinedMetric {
            metric: "mae",
            reason: "training split has no observed events".into(),
        })
    } else {
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        PredictionSet::from_times(vec![mean; n], test.labels()).and_then(|p| mae(&p))
    };
    metrics.push(MetricEntry::point("mae_constant_baseline", constant));

    let horizons = config.horizons();
    let mut fixed_time = Vec::new();
    let dir = config.evaluation_dir();
    create_dir(&dir)?;
    for &r in &horizons {
        let (fixed, labels) = filter_fixed_time_cohort(&test, r);
        let risks = test
            .patients
            .iter()
            .zip(&curves)
            .filter(|(p, _)| fixed_time_label(p.label, r).is_some())
            .map(|(_, s)| fixed_time_risk(s, r))
            .collect::<strafe_core::Result<Vec<f64>>>()?;
        fixed_time.push(FixedTimeSummary {
            horizon: r,
            patients: fixed.len(),
            positives: labels.iter().filter(|&&y| y).count(),
            excluded: test.len() - fixed.len(),
        });
        let name = format!("auc_t{r}");
        let point = MetricEntry::point(name, auc_roc(&risks, &labels));
        let boot = bootstrap_metric(
            risks.len(),
            |idx| {
                let s: Vec<f64> = idx.iter().map(|&i| risks[i]).collect();
                let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                auc_roc(&s, &y)
            },
            ev.bootstrap_resamples,
            ev.bootstrap_seed,
        );
        metrics.push(with_ci(point, boot));
        match decile_ppv(&risks, &labels, None) {
            Ok(table) => {
                let file = format!("decile_ppv_t{r}.csv");
                write_file(&dir.join(&file), |w| write_decile_ppv_csv(w, &table))?;
                files.insert(format!("decile_ppv_t{r}"), file);
            }
            Err(e) => notes.push(format!("decile PPV at {r} months skipped: {e}")),
        }
    }
    match decile_progression(&preds) {
        Ok(rows) => {
            let file = "decile_times.csv".to_string();
            write_file(&dir.join(&file), |w| write_decile_times_csv(w, &rows))?;
            files.insert("decile_times".into(), file);
        }
        Err(e) => notes.push(format!("decile progression skipped: {e}")),
    }

    let truth_path = config.truth_path();
    if truth_path.is_file() {
        let truth = SyntheticGroundTruth::load(&truth_path)?;
        let oracle = test
            .patients
            .iter()
            .map(|p| oracle_survival(&truth, &p.id))
            .collect::<strafe_core::Result<Vec<_>>>();
        match oracle {
            Ok(curves) => {
                let times = curves.iter().map(mean_survival_time).collect();
                let op = PredictionSet::from_times(times, test.labels())?;
                metrics.push(MetricEntry::point("oracle_c_index", c_index(&op, ev.harrell_ties)));
                metrics.push(MetricEntry::point("oracle_mae", mae(&op)));
            }
            Err(e) => notes.push(format!("ground truth does not match this cohort: {e}")),
        }
    }

    let report = EvaluationReport {
        variant: config.model.variant.to_string(),
        n_test: n,
        n_events: test.events(),
        t_max: config.model.t_max,
        horizons,
        metrics,
        fixed_time,
        files,
        notes,
    };
    let path = dir.join("metrics.json");
    write_file(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    for m in &report.metrics {
        match m.value {
            Some(v) => println!("{:<24} {v:.4}", m.name),
            None => println!("{:<24} undefined ({})", m.name, m.note.as_deref().unwrap_or("")),
        }
    }
    println!("report written to {}", path.display());
    Ok(())
}

pub fn explain(config: &RunConfig, patient_id: &str, remove: Option<&[usize]>) -> Result<(), Failure> {
    let variant = config.model.variant;
    if !variant.contextualized() {
        return Err(StrafeError::UnsupportedVariant(variant.to_string()).into());
    }
    let cohort = read_cohort(config)?;
    let patient = cohort
        .get(patient_id)
        .ok_or_else(|| StrafeError::UnknownPatient(patient_id.to_string()))?;
    let emb = read_embeddings(config)?;
    let model = read_model(config)?;

    let attn = extract_attention(patient, &model, &emb)?;
    let graph = visit_graph_export(&attn, patient, config.explain.edge_threshold)?;
    // By default drop the strongest pair, as long as some visit survives.
    let default_pair: Vec<usize> = match attn.top_pair() {
        Some((i, j, _)) if attn.len() > 2 => vec![i, j],
        _ => Vec::new(),
    };
    let remove = remove.unwrap_or(&default_pair);
    let cf = counterfactual_remove_visits(patient, remove, &model, &emb)?;

    let dir = config.explain_dir();
    create_dir(&dir)?;
    write_file(&dir.join(format!("{patient_id}-heatmap.csv")), |w| write_heatmap_csv(w, &attn.aggregate))?;
    write_file(&dir.join(format!("{patient_id}-graph.json")), |w| write_graph_json(w, &graph))?;
    write_file(&dir.join(format!("{patient_id}-curves.csv")), |w| write_counterfactual_csv(w, &cf))?;
    println!(
        "{patient_id}: {} visits, {} edges, removed {:?}, delta mu {:.6}; exports in {}",
        attn.len(),
        graph.edges.len(),
        remove,
        cf.delta_mu,
        dir.display()
    );
    Ok(())
}
