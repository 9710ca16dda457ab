use strafe_core::checkpoint::{load_embeddings, load_model, save_embeddings, save_model};
use strafe_core::cohort::{
    filter_fixed_time_cohort, generate_synthetic_cohort, load_cohort, oracle_survival, save_cohort, split_train_test,
    SyntheticConfig,
};
use strafe_core::embeddings::{build_sentences, train_skipgram, SkipGramConfig};
use strafe_core::explain::{extract_attention, visit_graph_export};
use strafe_core::metrics::{c_index, PredictionSet};
use strafe_core::model::{train_strafe, ModelConfig, StrafeModel, TrainParams, Variant};
use strafe_core::survival::kaplan_meier;

#[test]
fn kaplan_meier_tracks_population_survival() {
    let cfg = SyntheticConfig {
        n_patients: 20_000,
        seed: 77,
        ..SyntheticConfig::default()
    };
    let (cohort, truth) = generate_synthetic_cohort(&cfg).unwrap();
    let km = kaplan_meier(&cohort.labels(), cfg.t_max).unwrap();
    let n = cohort.len() as f64;
    let mut greenwood = 0.0;
    for t in 0..=cfg.t_max as usize {
        let population: f64 = cohort
            .patients
            .iter()
            .map(|p| oracle_survival(&truth, &p.id).unwrap().0[t])
            .sum::<f64>()
            / n;
        let (d, r) = (km.events[t] as f64, km.at_risk[t] as f64);
        if d > 0.0 {
            greenwood += d / (r * (r - d));
        }
        let s = km.survival.0[t];
        let half_width = 2.576 * s * greenwood.sqrt();
        assert!(
            (s - population).abs() <= half_width,
            "month {t}: KM {s:.4} vs population {population:.4} (±{half_width:.4})"
        );
    }
}

#[test]
fn cohort_files_round_trip_and_split_partitions() {
    let (cohort, _) = generate_synthetic_cohort(&SyntheticConfig {
        n_patients: 300,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    save_cohort(&path, &cohort).unwrap();
    let back = load_cohort(&path, 12).unwrap().strict().unwrap();
    assert_eq!(back, cohort);

    let (train, test) = split_train_test(&back, 0.8, 3).unwrap();
    let mut ids: Vec<&str> = train.patients.iter().chain(&test.patients).map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    let mut all: Vec<&str> = cohort.patients.iter().map(|p| p.id.as_str()).collect();
    all.sort_unstable();
    assert_eq!(ids, all);

    for t_r in 1..=12 {
        let (fixed, labels) = filter_fixed_time_cohort(&cohort, t_r);
        assert_eq!(fixed.len(), labels.len());
        assert!(fixed
            .patients
            .iter()
            .all(|p| p.label.event || p.label.duration_months >= t_r));
    }
}

#[test]
fn trained_model_survives_the_file_system() {
    let (cohort, _) = generate_synthetic_cohort(&SyntheticConfig {
        n_patients: 600,
        seed: 12,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let (train, test) = split_train_test(&cohort, 0.8, 12).unwrap();
    let sg = SkipGramConfig {
        dim: 8,
        epochs: 2,
        ..SkipGramConfig::default()
    };
    let emb = train_skipgram(&build_sentences(&train, sg.window_days).unwrap(), &sg).unwrap().embeddings;
    let config = ModelConfig {
        d_e: 8,
        n_v: 12,
        variant: Variant::Strafe,
        ..ModelConfig::default()
    };
    let tp = TrainParams {
        epochs: 8,
        lr: 1e-2,
        batch_size: 64,
    };
    let (model, report) = train_strafe(&train, &emb, config, &tp).unwrap();
    assert!(report.epoch_loss.last().unwrap() < report.epoch_loss.first().unwrap());

    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path().join("m.ckpt"), &model).unwrap();
    save_embeddings(dir.path().join("e.ckpt"), &emb).unwrap();
    let model2: StrafeModel<f32> = load_model(dir.path().join("m.ckpt")).unwrap();
    let emb2 = load_embeddings(dir.path().join("e.ckpt")).unwrap();
    let a = model.survival_curves(&test.patients, &emb).unwrap();
    let b = model2.survival_curves(&test.patients, &emb2).unwrap();
    assert_eq!(a, b);

    let preds = PredictionSet::from_curves(a, test.labels()).unwrap();
    assert!(c_index(&preds, false).unwrap() > 0.6);

    let p = test.patients.iter().find(|p| p.visits.len() >= 3).unwrap();
    let attn = extract_attention(p, &model2, &emb2).unwrap();
    for row in &attn.aggregate {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    let graph = visit_graph_export(&attn, p, 0.0).unwrap();
    assert_eq!(graph.nodes.len(), attn.len());
}
