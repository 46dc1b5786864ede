//! End-to-end runs driven by a [`RunConfig`]: data loading, splitting,
//! training, protocol evaluation, prediction and the gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xkt_autograd::{finite_diff_entries, summarize, Bound, Real, Tape};

use crate::config::{HistoryMode, MaskSetting, Protocol, RunConfig};
use crate::data::{ingest_csv, preprocess, Dataset, RawData, SequenceBatch, Step, StudentSequence, Vocab};
use crate::error::{KtError, Result};
use crate::eval::{
    knowledge_trace, masked_all, multi_concept, multi_step, one_step, one_step_last, EvalOptions, Prediction,
    ProtocolResult, Scored,
};
use crate::model::{forward_next, Model};
use crate::train::{bce_loss, fold_split, train, EpochRecord, TrainReport};

pub const METRICS_FORMAT: &str = "xkt-metrics";

pub struct Splits {
    pub train: Vec<StudentSequence>,
    pub val: Vec<StudentSequence>,
    pub test: Vec<StudentSequence>,
}

/// The preprocessed dataset named by `paths.dataset`, else `paths.raw`
/// preprocessed on the fly.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(path) = &cfg.paths.dataset {
        return Dataset::load(path);
    }
    if let Some(path) = &cfg.paths.raw {
        return preprocess(&ingest_csv(path)?);
    }
    Err(KtError::Config {
        field: "paths".into(),
        msg: "set paths.dataset or paths.raw".into(),
    })
}

pub fn split_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<Splits> {
    let s = fold_split(ds.students.len(), cfg.folds, cfg.fold, cfg.val_fraction, cfg.seed)?;
    Ok(Splits {
        train: ds.select(&s.train),
        val: ds.select(&s.val),
        test: ds.select(&s.test),
    })
}

pub fn new_model(cfg: &RunConfig, vocab: &Vocab) -> Result<Model> {
    Model::new(&cfg.model_config(vocab.num_questions(), vocab.num_concepts()), cfg.seed)
}

/// A fresh model trained on the split's train and validation students.
pub fn train_model(
    cfg: &RunConfig,
    vocab: &Vocab,
    splits: &Splits,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainReport)> {
    let mut model = new_model(cfg, vocab)?;
    let report = train(&mut model, &splits.train, &splits.val, &cfg.train_config(), on_epoch)?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub test_students: usize,
    pub results: Vec<ProtocolResult>,
    /// The configuration with paths cleared.
    pub config: RunConfig,
}

impl MetricsReport {
    pub fn find(&self, protocol: &str, horizon: Option<usize>, history: Option<usize>) -> Option<&ProtocolResult> {
        self.results
            .iter()
            .find(|r| r.protocol == protocol && r.horizon == horizon && history.is_none_or(|h| r.history == h))
    }
}

/// One protocol run with its raw predictions.
pub struct ProtocolRun {
    pub result: ProtocolResult,
    pub predictions: Vec<Prediction>,
}

impl ProtocolRun {
    /// `protocol[_N][_hL]`, unique within a report.
    pub fn file_stem(&self) -> String {
        let mut s = self.result.protocol.clone();
        if let Some(n) = self.result.horizon {
            s.push_str(&format!("_{n}"));
        }
        s.push_str(&format!("_h{}", self.result.history));
        s
    }
}

enum Job {
    OneStep { name: &'static str, history: usize },
    Retrain { history: usize },
    MultiStep(usize),
    Mask(MaskSetting, usize),
    MultiConcept,
}

fn jobs(cfg: &RunConfig) -> Vec<Job> {
    let p = &cfg.protocol;
    let mut out = Vec::new();
    let mut seen = Vec::new();
    for &protocol in &p.protocols {
        if seen.contains(&protocol) {
            continue;
        }
        seen.push(protocol);
        match protocol {
            Protocol::OneStep => out.push(Job::OneStep {
                name: "one_step",
                history: cfg.history_len,
            }),
            Protocol::MultiStep => out.extend(p.steps.iter().map(|&n| Job::MultiStep(n))),
            Protocol::Masked => out.extend(p.mask_settings.iter().map(|&m| Job::Mask(m, p.mask_horizon))),
            Protocol::MultiConcept => out.push(Job::MultiConcept),
            Protocol::VaryingHistory => out.extend(p.history_grid.iter().map(|&history| match p.history_mode {
                HistoryMode::Shared => Job::OneStep {
                    name: "varying_history",
                    history,
                },
                HistoryMode::Retrain => Job::Retrain { history },
            })),
        }
    }
    out
}

fn scored(protocol: &str, horizon: Option<usize>, history: usize, s: Scored) -> Result<ProtocolRun> {
    Ok(ProtocolRun {
        result: ProtocolResult::from_predictions(protocol, horizon, history, &s.predictions, s.skipped)?,
        predictions: s.predictions,
    })
}

fn run_job(cfg: &RunConfig, model: &Model, vocab: &Vocab, splits: &Splits, job: &Job) -> Result<ProtocolRun> {
    let opts = |history| EvalOptions {
        history,
        batch_size: cfg.batch_size,
    };
    let base = opts(cfg.history_len);
    let test = &splits.test;
    match *job {
        Job::OneStep { name, history } => {
            let predictions = one_step(model, test, opts(history))?;
            Ok(ProtocolRun {
                result: ProtocolResult::from_predictions(name, None, history, &predictions, 0)?,
                predictions,
            })
        }
        Job::Retrain { history } => {
            let mut local = cfg.clone();
            local.history_len = history;
            let (fresh, _) = train_model(&local, vocab, splits, |_| {})?;
            let predictions = one_step(&fresh, test, opts(history))?;
            Ok(ProtocolRun {
                result: ProtocolResult::from_predictions("varying_history_retrain", None, history, &predictions, 0)?,
                predictions,
            })
        }
        Job::MultiStep(n) => scored("multi_step", Some(n), cfg.history_len, multi_step(model, test, base, n)?),
        Job::Mask(setting, n) => {
            let s = match setting {
                MaskSetting::AllMasked => masked_all(model, test, base, n)?,
                MaskSetting::ResponsesMasked => multi_step(model, test, base, n)?,
                MaskSetting::Unmasked => one_step_last(model, test, base, n)?,
            };
            scored(setting.label(), Some(n), cfg.history_len, s)
        }
        Job::MultiConcept => scored("multi_concept", None, cfg.history_len, multi_concept(model, test, base)?),
    }
}

/// Runs every configured protocol on the test split. Runs are independent
/// and may execute in parallel; results keep the configured order.
pub fn evaluate(cfg: &RunConfig, model: &Model, vocab: &Vocab, splits: &Splits) -> Result<(MetricsReport, Vec<ProtocolRun>)> {
    let jobs = jobs(cfg);
    let runs: Vec<ProtocolRun> = jobs
        .par_iter()
        .map(|job| run_job(cfg, model, vocab, splits, job))
        .collect::<Result<_>>()?;
    let mut echo = cfg.clone();
    echo.paths = Default::default();
    let report = MetricsReport {
        format: METRICS_FORMAT.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        test_students: splits.test.len(),
        results: runs.iter().map(|r| r.result.clone()).collect(),
        config: echo,
    };
    Ok((report, runs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentKnowledge {
    pub student: u64,
    pub steps: usize,
    /// Entry `i` predicts step `i + 1` from the steps before it; the last
    /// entry follows the final step.
    pub trace: Vec<Vec<f64>>,
}

/// Knowledge states for raw histories, using the checkpoint's vocabulary.
/// Interactions without a named concept are skipped.
pub fn predict(model: &Model, vocab: &Vocab, raw: &RawData, history: usize) -> Result<Vec<StudentKnowledge>> {
    let mut out = Vec::new();
    for (&student, list) in &raw.students {
        let mut steps = Vec::with_capacity(list.len());
        for it in list {
            if let Some(step) = vocab.encode(it)? {
                steps.push(step);
            }
        }
        if steps.is_empty() {
            return Err(KtError::contract(format!("student {student} has no interactions with a named concept")));
        }
        let seq = StudentSequence { student, steps };
        let trace = knowledge_trace(model, &seq, history)?;
        out.push(StudentKnowledge {
            student,
            steps: seq.steps.len(),
            trace,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    pub config_hash: String,
    pub seed: u64,
    pub checked: usize,
    pub loss: f64,
    pub max_rel_err: f64,
    pub worst: Option<String>,
    /// Central differences round the loss on both sides; discrepancies
    /// below this are indistinguishable from zero.
    pub rounding_floor: f64,
    /// Largest relative error among elements that differ by more than
    /// `rounding_floor`.
    pub max_rel_err_above_floor: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Random interactions for the gradient check micro-batch.
pub fn micro_batch(cfg: &RunConfig) -> Result<SequenceBatch> {
    let g = &cfg.gradcheck;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seqs: Vec<Vec<Step>> = (0..g.students)
        .map(|_| {
            (0..g.steps)
                .map(|t| Step {
                    question: rng.random_range(0..g.n_questions),
                    concept: rng.random_range(0..g.n_concepts),
                    response: rng.random_range(0..2),
                    timestamp: t as i64,
                })
                .collect()
        })
        .collect();
    let views: Vec<&[Step]> = seqs.iter().map(Vec::as_slice).collect();
    SequenceBatch::from_steps((0..g.students as u64).collect(), &views, g.steps)
}

/// End-to-end finite-difference check of the configured model on a random
/// micro-batch, dropout off.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckOutcome> {
    let g = &cfg.gradcheck;
    let mut mc = cfg.model_config(g.n_questions, g.n_concepts);
    mc.dim = g.dim;
    let mut model = Model::new(&mc, cfg.seed)?;
    if let Some(scale) = g.param_scale {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
        for t in model.store_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale) as Real);
        }
    }
    let batch = micro_batch(cfg)?;
    let params = model.store().tensors();
    let loss = {
        let tape = Tape::new();
        let p = Bound::new(params.iter().map(|t| tape.constant(t.clone())).collect());
        let next = forward_next(&model, &tape, &p, &batch, None)?;
        bce_loss(next.probs, &next.labels, &next.mask)?.mean.value().item()? as f64
    };
    let entries = finite_diff_entries::<KtError, _>(&params, g.eps as _, |tape, vars| {
        let p = Bound::new(vars.to_vec());
        let next = forward_next(&model, tape, &p, &batch, None)?;
        Ok(bce_loss(next.probs, &next.labels, &next.mask)?.mean)
    })?;
    let report = summarize(&entries);
    let floor = 64.0 * loss.abs() * f64::EPSILON / g.eps;
    let above = entries
        .iter()
        .filter(|e| ((e.analytic - e.numeric).abs() as f64) > floor)
        .map(|e| e.rel_err() as f64)
        .fold(0.0, f64::max);
    let worst = report.worst.map(|(p, i)| {
        let name = &model.store().iter().nth(p).expect("parameter index").name;
        format!("{name}[{i}]")
    });
    let max_rel_err = report.max_rel_err as f64;
    Ok(GradcheckOutcome {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checked: report.checked,
        loss,
        max_rel_err,
        worst,
        rounding_floor: floor,
        max_rel_err_above_floor: above,
        threshold: g.threshold,
        passed: max_rel_err < g.threshold,
    })
}
