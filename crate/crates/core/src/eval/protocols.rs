use std::ops::Range;

use serde::{Deserialize, Serialize};
use xkt_autograd::{Real, Tape, Var};

use crate::data::{batches, window, SequenceBatch, Step, StudentSequence};
use crate::error::{KtError, Result};
use crate::model::{forward_next, Model, Query};

/// One scored step. `step` is the 0-based position inside the student's
/// evaluation window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub student: u64,
    pub step: usize,
    pub concept: usize,
    pub score: f64,
    pub label: u8,
}

/// Predictions from a protocol that needs a minimum sequence length, with
/// the number of students that were too short.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scored {
    pub predictions: Vec<Prediction>,
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub history: usize,
    pub batch_size: usize,
}

fn to_f64(v: Real) -> f64 {
    v as f64
}

/// Every valid step after the first, predicted from the true history.
pub fn one_step(model: &Model, seqs: &[StudentSequence], opts: EvalOptions) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for batch in batches(seqs, opts.history, opts.batch_size, None)? {
        let tape = Tape::new();
        let p = model.store().bind(&tape, false);
        let next = forward_next(model, &tape, &p, &batch, None)?;
        let probs = next.probs.value();
        for b in 0..batch.rows {
            for t in 0..batch.len - 1 {
                let k = t * batch.rows + b;
                if next.mask[k] {
                    out.push(Prediction {
                        student: batch.students[b],
                        step: t + 1,
                        concept: next.concepts[k],
                        score: to_f64(probs.data()[k]),
                        label: next.labels[k] as u8,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// One-step predictions restricted to the last `n` steps of each window.
/// Students whose window has `n` or fewer steps are skipped.
pub fn one_step_last(model: &Model, seqs: &[StudentSequence], opts: EvalOptions, n: usize) -> Result<Scored> {
    check_horizon(n)?;
    let (long, skipped) = split_by_length(seqs, opts.history, n + 1);
    let lengths: std::collections::HashMap<u64, usize> = long
        .iter()
        .map(|s| (s.student, window(&s.steps, opts.history).len()))
        .collect();
    let predictions = one_step(model, &long, opts)?
        .into_iter()
        .filter(|pr| pr.step >= lengths[&pr.student] - n)
        .collect();
    Ok(Scored { predictions, skipped })
}

/// Knowledge frozen after all but the last `n` steps; each of those steps is
/// scored from the frozen knowledge and its own question. No response from
/// the horizon is read. Needs at least `n + 1` steps.
pub fn multi_step(model: &Model, seqs: &[StudentSequence], opts: EvalOptions, n: usize) -> Result<Scored> {
    check_horizon(n)?;
    frozen_protocol(model, seqs, opts, n + 1, |len| Frozen {
        observed: len - n,
        targets: len - n..len,
        query: FrozenQuery::PerTarget,
    })
}

/// Like [`multi_step`], but the horizon's questions are hidden too: one
/// knowledge state is read with an all-zero question embedding and indexed
/// at each target's concept.
pub fn masked_all(model: &Model, seqs: &[StudentSequence], opts: EvalOptions, n: usize) -> Result<Scored> {
    check_horizon(n)?;
    frozen_protocol(model, seqs, opts, n + 1, |len| Frozen {
        observed: len - n,
        targets: len - n..len,
        query: FrozenQuery::Masked,
    })
}

/// Knowledge after the first `m = len / 2` steps, read once with question
/// `m`; every later step is scored at its concept from that single state.
/// Needs at least 4 steps.
pub fn multi_concept(model: &Model, seqs: &[StudentSequence], opts: EvalOptions) -> Result<Scored> {
    frozen_protocol(model, seqs, opts, 4, |len| {
        let m = len / 2;
        Frozen {
            observed: m,
            targets: m..len,
            query: FrozenQuery::Step(m),
        }
    })
}

/// Per-concept knowledge states along a sequence: entry `i - 1` holds the
/// state used to predict step `i` (1-based from the second step), and the
/// last entry is read after the final step with no question known.
pub fn knowledge_trace(model: &Model, seq: &StudentSequence, history: usize) -> Result<Vec<Vec<f64>>> {
    let steps = window(&seq.steps, history);
    if steps.is_empty() {
        return Err(KtError::contract(format!("student {} has no interactions", seq.student)));
    }
    let batch = SequenceBatch::from_steps(vec![seq.student], &[steps], steps.len())?;
    let tape = Tape::new();
    let p = model.store().bind(&tape, false);
    let knowledge = model.encode(&tape, &p, &batch, steps.len(), None)?;
    let mut out = Vec::with_capacity(steps.len());
    for t in 1..steps.len() {
        let logits = model.readout(
            &tape,
            &p,
            knowledge[t - 1],
            Query::Items {
                questions: &[steps[t].question],
                concepts: &[steps[t].concept],
            },
            None,
        )?;
        out.push(logits.sigmoid()?.value().data().iter().map(|&v| to_f64(v)).collect());
    }
    let last = model.readout(&tape, &p, knowledge[steps.len() - 1], Query::Masked, None)?;
    out.push(last.sigmoid()?.value().data().iter().map(|&v| to_f64(v)).collect());
    Ok(out)
}

fn check_horizon(n: usize) -> Result<()> {
    if n == 0 {
        return Err(KtError::contract("horizon must be at least 1"));
    }
    Ok(())
}

fn split_by_length(seqs: &[StudentSequence], history: usize, min_len: usize) -> (Vec<StudentSequence>, usize) {
    let mut long = Vec::new();
    let mut skipped = 0;
    for s in seqs {
        if window(&s.steps, history).len() >= min_len {
            long.push(s.clone());
        } else {
            skipped += 1;
        }
    }
    (long, skipped)
}

enum FrozenQuery {
    /// Each target is read with its own question.
    PerTarget,
    /// One state read with a zero question embedding.
    Masked,
    /// One state read with the question at this window position.
    Step(usize),
}

struct Frozen {
    observed: usize,
    targets: Range<usize>,
    query: FrozenQuery,
}

fn frozen_protocol(
    model: &Model,
    seqs: &[StudentSequence],
    opts: EvalOptions,
    min_len: usize,
    plan: impl Fn(usize) -> Frozen,
) -> Result<Scored> {
    if opts.batch_size == 0 {
        return Err(KtError::contract("batch size must be positive"));
    }
    let mut scored = Scored::default();
    let items: Vec<(u64, &[Step])> = seqs
        .iter()
        .filter_map(|s| {
            let w = window(&s.steps, opts.history);
            if w.len() >= min_len {
                Some((s.student, w))
            } else {
                scored.skipped += 1;
                None
            }
        })
        .collect();
    for chunk in items.chunks(opts.batch_size) {
        let plans: Vec<Frozen> = chunk.iter().map(|(_, w)| plan(w.len())).collect();
        frozen_chunk(model, chunk, &plans, &mut scored.predictions)?;
    }
    Ok(scored)
}

fn frozen_chunk(model: &Model, chunk: &[(u64, &[Step])], plans: &[Frozen], out: &mut Vec<Prediction>) -> Result<()> {
    let rows = chunk.len();
    let prefixes: Vec<&[Step]> = chunk.iter().zip(plans).map(|((_, w), f)| &w[..f.observed]).collect();
    let width = plans.iter().map(|f| f.observed).max().unwrap_or(0);
    let students = chunk.iter().map(|(s, _)| *s).collect();
    let batch = SequenceBatch::from_steps(students, &prefixes, width)?;

    let tape = Tape::new();
    let p = model.store().bind(&tape, false);
    let knowledge = model.encode(&tape, &p, &batch, width, None)?;
    let stacked = tape.concat_rows(&knowledge)?;
    let last_row = |b: usize| (plans[b].observed - 1) * rows + b;

    let mut emit = |b: usize, j: usize, score: Real| {
        let (student, w) = chunk[b];
        out.push(Prediction {
            student,
            step: j,
            concept: w[j].concept,
            score: to_f64(score),
            label: w[j].response,
        });
    };

    if plans.iter().all(|f| matches!(f.query, FrozenQuery::PerTarget)) {
        let mut idx = Vec::new();
        let mut questions = Vec::new();
        let mut concepts = Vec::new();
        for (b, f) in plans.iter().enumerate() {
            for j in f.targets.clone() {
                idx.push(last_row(b));
                questions.push(chunk[b].1[j].question);
                concepts.push(chunk[b].1[j].concept);
            }
        }
        let logits = model.readout(
            &tape,
            &p,
            stacked.gather_rows(&idx)?,
            Query::Items {
                questions: &questions,
                concepts: &concepts,
            },
            None,
        )?;
        let probs = logits.gather_cols(&concepts)?.sigmoid()?.value();
        let mut k = 0;
        for (b, f) in plans.iter().enumerate() {
            for j in f.targets.clone() {
                emit(b, j, probs.data()[k]);
                k += 1;
            }
        }
        return Ok(());
    }

    let idx: Vec<usize> = (0..rows).map(last_row).collect();
    let frozen: Var<'_> = stacked.gather_rows(&idx)?;
    let ks = if plans.iter().all(|f| matches!(f.query, FrozenQuery::Masked)) {
        model.readout(&tape, &p, frozen, Query::Masked, None)?
    } else {
        let mut questions = Vec::with_capacity(rows);
        let mut concepts = Vec::with_capacity(rows);
        for (b, f) in plans.iter().enumerate() {
            let FrozenQuery::Step(m) = f.query else {
                return Err(KtError::contract("mixed frozen query kinds in one batch"));
            };
            questions.push(chunk[b].1[m].question);
            concepts.push(chunk[b].1[m].concept);
        }
        model.readout(
            &tape,
            &p,
            frozen,
            Query::Items {
                questions: &questions,
                concepts: &concepts,
            },
            None,
        )?
    }
    .sigmoid()?
    .value();
    let n = ks.last_dim();
    for (b, f) in plans.iter().enumerate() {
        for j in f.targets.clone() {
            emit(b, j, ks.data()[b * n + chunk[b].1[j].concept]);
        }
    }
    Ok(())
}
