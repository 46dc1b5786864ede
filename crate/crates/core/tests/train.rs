use xkt_core::data::synth::{generate, SynthConfig};
use xkt_core::data::{preprocess, Dataset, StudentSequence};
use xkt_core::eval::EvalOptions;
use xkt_core::model::{Model, ModelConfig, ModelKind};
use xkt_core::train::{fold_split, kfold_split, train, validate_one_step, TrainConfig, TrainStatus};

fn small_dataset(n_students: usize, seed: u64) -> Dataset {
    let (raw, _) = generate(&SynthConfig {
        n_students,
        n_concepts: 6,
        n_questions: 20,
        min_steps: 10,
        max_steps: 25,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    preprocess(&raw).unwrap()
}

fn small_model(ds: &Dataset, kind: ModelKind, seed: u64) -> Model {
    let cfg = ModelConfig::new(kind, 8, ds.vocab.num_questions(), ds.vocab.num_concepts());
    Model::new(&cfg, seed).unwrap()
}

fn quick(max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr: 0.01,
        max_epochs,
        patience,
        history_len: 30,
        ..TrainConfig::default()
    }
}

fn split(ds: &Dataset) -> (Vec<StudentSequence>, Vec<StudentSequence>) {
    let s = fold_split(ds.students.len(), 5, 0, 0.25, 7).unwrap();
    (ds.select(&s.train), ds.select(&s.val))
}

#[test]
fn folds_partition_students() {
    let folds = kfold_split(1708, 5, 12405).unwrap();
    assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![342, 342, 342, 341, 341]);
    let mut all = folds.concat();
    all.sort_unstable();
    assert_eq!(all, (0..1708).collect::<Vec<_>>());
    assert_eq!(kfold_split(1708, 5, 12405).unwrap(), folds);
    assert!(kfold_split(4, 5, 1).is_err());

    for fold in 0..5 {
        let s = fold_split(100, 5, fold, 0.1, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (72, 8, 20));
        let mut all = [s.train, s.val, s.test].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}

#[test]
fn constant_validation_auc_stops_after_patience_plus_one() {
    let ds = small_dataset(30, 1);
    let (tr, mut val) = split(&ds);
    // Every validation label is 1, so AUC is never defined and never improves.
    for s in &mut val {
        s.steps.iter_mut().for_each(|st| st.response = 1);
    }
    let mut model = small_model(&ds, ModelKind::Dkt2, 2);
    let report = train(&mut model, &tr, &val, &quick(20, 3), |_| {}).unwrap();
    assert_eq!(report.epochs.len(), 4);
    assert_eq!(report.status, TrainStatus::EarlyStopped);
    assert_eq!(report.best_epoch, Some(1));
    assert!(report.best_val_auc.is_none());
}

#[test]
fn frozen_ranking_stops_after_patience_plus_one() {
    let ds = small_dataset(30, 2);
    let (tr, val) = split(&ds);
    let mut model = small_model(&ds, ModelKind::Dkt2, 3);
    let cfg = TrainConfig {
        lr: 1e-300,
        ..quick(20, 4)
    };
    let report = train(&mut model, &tr, &val, &cfg, |_| {}).unwrap();
    assert_eq!(report.epochs.len(), 5);
    let aucs: Vec<_> = report.epochs.iter().map(|e| e.val.as_ref().unwrap().auc).collect();
    assert!(aucs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn best_epoch_parameters_are_restored() {
    let ds = small_dataset(40, 3);
    let (tr, val) = split(&ds);
    let mut model = small_model(&ds, ModelKind::Dkt2, 4);
    let cfg = quick(8, 8);
    let mut seen = Vec::new();
    let report = train(&mut model, &tr, &val, &cfg, |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, report.epochs);
    assert_eq!(report.status, TrainStatus::Completed);
    let best = report.best_epoch.unwrap();
    let aucs: Vec<f64> = report.epochs.iter().map(|e| e.val.as_ref().unwrap().auc.unwrap()).collect();
    let max = aucs.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(aucs[best - 1], max);
    assert_eq!(report.best_val_auc, Some(max));
    let opts = EvalOptions {
        history: cfg.history_len,
        batch_size: cfg.batch_size,
    };
    let now = validate_one_step(&model, &val, opts).unwrap().unwrap();
    assert_eq!(now.auc, Some(max));
    assert!(report.epochs.last().unwrap().train_loss < report.epochs[0].train_loss);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let ds = small_dataset(30, 4);
    let (tr, val) = split(&ds);
    for kind in [ModelKind::Dkt2, ModelKind::Dkt] {
        let run = || {
            let mut model = small_model(&ds, kind, 5);
            let report = train(&mut model, &tr, &val, &quick(3, 3), |_| {}).unwrap();
            (serde_json::to_string(&report).unwrap(), model.store().tensors())
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn numeric_blow_up_aborts_with_last_good_parameters() {
    let ds = small_dataset(30, 5);
    let (tr, val) = split(&ds);
    let mut model = small_model(&ds, ModelKind::Dkt2, 6);
    let initial = model.store().tensors();
    let cfg = TrainConfig {
        lr: 1e300,
        grad_clip: 0.0,
        ..quick(5, 5)
    };
    let report = train(&mut model, &tr, &val, &cfg, |_| {}).unwrap();
    assert!(matches!(report.status, TrainStatus::Aborted { .. }), "{:?}", report.status);
    assert!(model.store().tensors().iter().all(|t| t.is_finite()));
    if report.epochs.is_empty() {
        assert_eq!(model.store().tensors(), initial);
    }
}

#[test]
fn bad_configs_are_rejected() {
    let ds = small_dataset(30, 6);
    let (tr, val) = split(&ds);
    let mut model = small_model(&ds, ModelKind::Dkt2, 7);
    for cfg in [
        TrainConfig { patience: 0, ..quick(3, 3) },
        TrainConfig { patience: 4, ..quick(3, 3) },
        TrainConfig { history_len: 1, ..quick(3, 3) },
        TrainConfig { dropout: 1.0, ..quick(3, 3) },
    ] {
        assert!(train(&mut model, &tr, &val, &cfg, |_| {}).is_err());
    }
    assert!(train(&mut model, &tr, &[], &quick(3, 3), |_| {}).is_err());
}
