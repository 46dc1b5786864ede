use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xkt_autograd::{ParamStore, Tape};
use xkt_core::data::{SequenceBatch, Step, StudentSequence};
use xkt_core::eval::{
    auc, compute_metrics, knowledge_trace, masked_all, multi_concept, multi_step, one_step, one_step_last,
    read_predictions, scores_and_labels, write_predictions, EvalOptions, Prediction, ProtocolResult,
};
use xkt_core::model::{MLstmForm, Model, ModelConfig, ModelKind, Query};

const NQ: usize = 9;
const NC: usize = 5;

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut credit = 0.0;
    for &p in &pos {
        for &n in &neg {
            credit += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(credit / (pos.len() * neg.len()) as f64)
}

fn student(rng: &mut ChaCha8Rng, id: u64, len: usize) -> StudentSequence {
    StudentSequence {
        student: id,
        steps: (0..len)
            .map(|t| Step {
                question: rng.random_range(0..NQ),
                concept: rng.random_range(0..NC),
                response: rng.random_range(0..2),
                timestamp: t as i64,
            })
            .collect(),
    }
}

fn cohort(seed: u64, lens: &[usize]) -> Vec<StudentSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lens.iter().enumerate().map(|(i, &l)| student(&mut rng, 100 + i as u64, l)).collect()
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
    }
}

fn model(kind: ModelKind, form: MLstmForm) -> Model {
    let mut cfg = ModelConfig::new(kind, 6, NQ, NC);
    cfg.mlstm_form = form;
    let mut m = Model::new(&cfg, 3).unwrap();
    randomize(m.store_mut(), 11);
    m
}

fn opts(history: usize, batch_size: usize) -> EvalOptions {
    EvalOptions { history, batch_size }
}

fn scores(preds: &[Prediction]) -> Vec<f64> {
    preds.iter().map(|p| p.score).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_matches_pair_counting(
        raw in prop::collection::vec((0u8..20, 0u8..2), 2..1000),
    ) {
        // Coarse scores force many ties.
        let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 19.0).collect();
        let labels: Vec<u8> = raw.iter().map(|(_, l)| *l).collect();
        match (auc(&scores, &labels), pair_count_auc(&scores, &labels)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

#[test]
fn metric_examples() {
    let m = compute_metrics(&[0.9, 0.1], &[1, 0]).unwrap();
    assert_eq!(m.auc, Some(1.0));
    assert_eq!(m.acc, 1.0);
    assert!((m.rmse - 0.1).abs() < 1e-12);
    assert_eq!(auc(&[0.2, 0.8, 0.5, 0.5], &[0, 1, 1, 0]), Some(0.875));
    assert_eq!(compute_metrics(&[1.0, 0.0], &[1, 0]).unwrap().rmse, 0.0);

    let flat = compute_metrics(&[0.3, 0.7], &[1, 1]).unwrap();
    assert!(flat.auc.is_none() && flat.auc_undefined);
    assert_eq!(flat.acc, 0.5);
    assert_eq!(compute_metrics(&[0.5], &[1]).unwrap().acc, 1.0);
    assert!(compute_metrics(&[], &[]).is_err());
    assert!(compute_metrics(&[0.5], &[1, 0]).is_err());
}

#[test]
fn one_step_scores_every_step_after_the_first_of_each_window() {
    let seqs = cohort(1, &[5, 9, 30, 2]);
    let m = model(ModelKind::Dkt2, MLstmForm::Parallel);
    let preds = one_step(&m, &seqs, opts(20, 3)).unwrap();
    assert_eq!(preds.len(), 4 + 8 + 19 + 1);
    let long: Vec<&Prediction> = preds.iter().filter(|p| p.student == 102).collect();
    let window = &seqs[2].steps[10..];
    for p in long {
        assert_eq!(p.label, window[p.step].response);
        assert_eq!(p.concept, window[p.step].concept);
    }
}

#[test]
fn one_step_is_independent_of_batch_composition() {
    let seqs = cohort(2, &[12, 7, 15, 5, 9]);
    for kind in [ModelKind::Dkt2, ModelKind::Dkt] {
        let m = model(kind, MLstmForm::Parallel);
        let together = one_step(&m, &seqs, opts(100, 5)).unwrap();
        let alone = one_step(&m, &seqs, opts(100, 1)).unwrap();
        let mut a = together.clone();
        let mut b = alone.clone();
        a.sort_by_key(|p| (p.student, p.step));
        b.sort_by_key(|p| (p.student, p.step));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x.score - y.score).abs() < 1e-12);
        }
    }
}

#[test]
fn horizon_five_on_six_steps_emits_five_predictions() {
    let seqs = cohort(3, &[6]);
    let m = model(ModelKind::Dkt2, MLstmForm::Parallel);
    let r = multi_step(&m, &seqs, opts(100, 4), 5).unwrap();
    assert_eq!(r.predictions.len(), 5);
    assert_eq!(r.skipped, 0);
    assert_eq!(r.predictions.iter().map(|p| p.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);

    let short = multi_step(&m, &cohort(3, &[5]), opts(100, 4), 5).unwrap();
    assert!(short.predictions.is_empty());
    assert_eq!(short.skipped, 1);
}

#[test]
fn multi_step_equals_one_step_on_the_truncated_history() {
    let seqs = cohort(4, &[14, 9, 25]);
    for form in [MLstmForm::Parallel, MLstmForm::Recurrent] {
        let m = model(ModelKind::Dkt2, form);
        let n = 5;
        let got = multi_step(&m, &seqs, opts(20, 2), n).unwrap().predictions;
        assert_eq!(got.len(), 3 * n);
        for p in &got {
            let s = seqs.iter().find(|s| s.student == p.student).unwrap();
            let w = &s.steps[s.steps.len().saturating_sub(20)..];
            let cut = w.len() - n;
            let mut probe = w[..cut].to_vec();
            probe.push(w[p.step]);
            let oracle = one_step(&m, &[StudentSequence { student: 0, steps: probe }], opts(100, 1)).unwrap();
            let last = oracle.last().unwrap();
            assert!((last.score - p.score).abs() < 1e-12, "{} vs {}", last.score, p.score);
            assert_eq!(last.label, p.label);
        }
    }
}

#[test]
fn multi_step_never_reads_horizon_responses() {
    let seqs = cohort(5, &[11, 16]);
    let m = model(ModelKind::Dkt2, MLstmForm::Parallel);
    let base = scores(&multi_step(&m, &seqs, opts(100, 2), 4).unwrap().predictions);
    let mut flipped = seqs.clone();
    for s in &mut flipped {
        let len = s.steps.len();
        s.steps[len - 4..].iter_mut().for_each(|st| st.response ^= 1);
    }
    assert_eq!(scores(&multi_step(&m, &flipped, opts(100, 2), 4).unwrap().predictions), base);
}

#[test]
fn one_step_last_keeps_the_final_steps() {
    let seqs = cohort(6, &[8, 5, 30]);
    let m = model(ModelKind::Dkt2, MLstmForm::Parallel);
    let r = one_step_last(&m, &seqs, opts(10, 2), 5).unwrap();
    assert_eq!(r.skipped, 1);
    assert_eq!(r.predictions.len(), 10);
    let all = one_step(&m, &seqs, opts(10, 2)).unwrap();
    for p in &r.predictions {
        let len = seqs.iter().find(|s| s.student == p.student).unwrap().steps.len().min(10);
        assert!(p.step >= len - 5);
        assert!(all.contains(p));
    }
}

fn masked_state(m: &Model, steps: &[Step]) -> Vec<f64> {
    let batch = SequenceBatch::from_steps(vec![0], &[steps], steps.len()).unwrap();
    let tape = Tape::new();
    let p = m.store().bind(&tape, false);
    let k = m.encode(&tape, &p, &batch, steps.len(), None).unwrap();
    let logits = m.readout(&tape, &p, k[steps.len() - 1], Query::Masked, None).unwrap();
    logits.sigmoid().unwrap().value().data().to_vec()
}

#[test]
fn masked_setting_ignores_the_masked_window() {
    let seqs = cohort(7, &[12, 8, 20]);
    let m = model(ModelKind::Dkt2, MLstmForm::Parallel);
    let n = 5;
    let base = masked_all(&m, &seqs, opts(100, 3), n).unwrap().predictions;
    assert_eq!(base.len(), 3 * n);

    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut mutated = seqs.clone();
    for s in &mut mutated {
        let len = s.steps.len();
        for st in &mut s.steps[len - n..] {
            st.question = rng.random_range(0..NQ);
            st.response = rng.random_range(0..2);
        }
    }
    let again = masked_all(&m, &mutated, opts(100, 3), n).unwrap().predictions;
    assert_eq!(scores(&again), scores(&base));

    // Concepts only choose which entry of the frozen state is read.
    for s in &mut mutated {
        let len = s.steps.len();
        s.steps[len - n..].iter_mut().for_each(|st| st.concept = rng.random_range(0..NC));
    }
    let moved = masked_all(&m, &mutated, opts(100, 3), n).unwrap().predictions;
    for p in &moved {
        let s = mutated.iter().find(|s| s.student == p.student).unwrap();
        let ks = masked_state(&m, &s.steps[..s.steps.len() - n]);
        assert_eq!(p.score, ks[p.concept]);
        assert_eq!(p.concept, s.steps[p.step].concept);
    }
}

#[test]
fn multi_concept_reads_one_state_from_the_middle() {
    let mut seqs = cohort(8, &[10, 7, 3]);
    for st in &mut seqs[0].steps[5..] {
        st.concept = 2;
    }
    let m = model(ModelKind::Dkt2, MLstmForm::Parallel);
    let r = multi_concept(&m, &seqs, opts(100, 2)).unwrap();
    assert_eq!(r.skipped, 1);
    let first: Vec<&Prediction> = r.predictions.iter().filter(|p| p.student == 100).collect();
    assert_eq!(first.len(), 5);
    assert!(first.iter().all(|p| p.score == first[0].score));
    assert_eq!(first.iter().map(|p| p.step).min(), Some(5));
    // The first target is scored exactly like a one-step prediction.
    let one = one_step(&m, &seqs[..1], opts(100, 1)).unwrap();
    let at_m = one.iter().find(|p| p.step == 5).unwrap();
    assert!((at_m.score - first[0].score).abs() < 1e-12);
    assert_eq!(r.predictions.iter().filter(|p| p.student == 101).count(), 4);
}

#[test]
fn constant_model_gives_tied_auc_and_base_rate_accuracy() {
    let seqs = cohort(9, &[20, 20, 20]);
    let mut m = model(ModelKind::Dkt2, MLstmForm::Parallel);
    for name in ["head.w2", "head.b2"] {
        let id = m.store().find(name).unwrap();
        m.store_mut().get_mut(id).data_mut().fill(0.0);
    }
    let preds = one_step(&m, &seqs, opts(100, 8)).unwrap();
    let (s, l) = scores_and_labels(&preds);
    assert!(s.iter().all(|&v| v == 0.5));
    let base_rate = |l: &[u8]| l.iter().filter(|&&v| v == 1).count() as f64 / l.len() as f64;
    let metrics = compute_metrics(&s, &l).unwrap();
    assert_eq!(metrics.auc, Some(0.5));
    assert_eq!(metrics.acc, base_rate(&l));
    let mc = multi_concept(&m, &seqs, opts(100, 8)).unwrap();
    let (s, l) = scores_and_labels(&mc.predictions);
    assert_eq!(compute_metrics(&s, &l).unwrap().acc, base_rate(&l));
}

#[test]
fn prediction_dump_round_trips_metrics() {
    let seqs = cohort(10, &[15, 22, 9]);
    let m = model(ModelKind::Dkt2, MLstmForm::Parallel);
    let preds = one_step(&m, &seqs, opts(100, 2)).unwrap();
    let mut buf = Vec::new();
    write_predictions(&preds, &mut buf).unwrap();
    let back = read_predictions(buf.as_slice()).unwrap();
    assert_eq!(back, preds);
    let a = ProtocolResult::from_predictions("one_step", None, 100, &preds, 0).unwrap();
    let b = ProtocolResult::from_predictions("one_step", None, 100, &back, 0).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn knowledge_trace_matches_one_step_scores() {
    let seqs = cohort(11, &[9]);
    let m = model(ModelKind::Dkt2, MLstmForm::Parallel);
    let trace = knowledge_trace(&m, &seqs[0], 100).unwrap();
    assert_eq!(trace.len(), 9);
    assert!(trace.iter().all(|ks| ks.len() == NC && ks.iter().all(|&v| v > 0.0 && v < 1.0)));
    let one = one_step(&m, &seqs, opts(100, 1)).unwrap();
    for p in &one {
        assert!((trace[p.step - 1][p.concept] - p.score).abs() < 1e-12);
    }
}

#[test]
fn dkt_baseline_runs_every_protocol() {
    let seqs = cohort(12, &[12, 6, 9]);
    let m = model(ModelKind::Dkt, MLstmForm::Parallel);
    let o = opts(100, 2);
    assert_eq!(one_step(&m, &seqs, o).unwrap().len(), 11 + 5 + 8);
    assert_eq!(multi_step(&m, &seqs, o, 5).unwrap().predictions.len(), 15);
    assert_eq!(masked_all(&m, &seqs, o, 5).unwrap().predictions.len(), 15);
    assert_eq!(multi_concept(&m, &seqs, o).unwrap().predictions.len(), 6 + 3 + 5);
    assert!(multi_step(&m, &seqs, o, 0).is_err());
}
