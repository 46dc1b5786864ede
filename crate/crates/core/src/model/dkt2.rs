use xkt_autograd::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

use super::rasch::RaschEmbedding;
use super::{maybe_dropout, Dropout, MLstmForm, ModelConfig, Query};
use crate::cells::{MLstmCell, SLstmCell};
use crate::data::SequenceBatch;
use crate::error::Result;
use crate::init::Initializer;

const LN_EPS: Real = 1e-5;

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(p.get(self.gain), p.get(self.bias), LN_EPS)?)
    }
}

/// Rasch embedding, a pre-norm residual sLSTM block followed by an mLSTM
/// block, difficulty-adjusted knowledge split by response, and a two-layer
/// read-out over all concepts.
pub struct Dkt2 {
    pub(crate) cfg: ModelConfig,
    pub(crate) store: ParamStore,
    embedding: RaschEmbedding,
    slstm: Option<(Norm, SLstmCell)>,
    mlstm: Option<(Norm, MLstmCell)>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Dkt2 {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let d = cfg.dim;
        let ab = cfg.ablation;
        let embedding = RaschEmbedding::new(&mut store, &mut init, cfg.n_questions, cfg.n_concepts, d, !ab.no_rasch);
        let slstm = (!ab.no_slstm).then(|| {
            let norm = Norm::new(&mut store, "ln1", d);
            let cell = SLstmCell::new(&mut store, "slstm", d, d, cfg.slstm_forget, &mut init);
            (norm, cell)
        });
        let mlstm = (!ab.no_mlstm).then(|| {
            let norm = Norm::new(&mut store, "ln2", d);
            let cell = MLstmCell::new(&mut store, "mlstm", d, d, cfg.mlstm_forget, &mut init);
            (norm, cell)
        });
        let x_width = if ab.no_ikf { 2 * d } else { 4 * d };
        let w1 = store.add("head.w1", init.fan_in(&[x_width, 2 * d], x_width));
        let b1 = store.add("head.b1", Tensor::zeros(&[1, 2 * d]));
        let w2 = store.add("head.w2", init.fan_in(&[2 * d, cfg.n_concepts], 2 * d));
        let b2 = store.add("head.b2", Tensor::zeros(&[1, cfg.n_concepts]));
        Self {
            cfg,
            store,
            embedding,
            slstm,
            mlstm,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn head_params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Ids of every recurrent-cell parameter.
    pub fn cell_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some((_, c)) = &self.slstm {
            ids.extend(c.params());
        }
        if let Some((_, c)) = &self.mlstm {
            ids.extend(c.params());
        }
        ids
    }

    /// `A` for the first `steps` columns: `u = S + sLSTM(LN(S))`, `A = u + mLSTM(LN(u))`.
    pub fn encode_sequence<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &SequenceBatch,
        steps: usize,
        dropout: Option<&Dropout>,
    ) -> Result<Vec<Var<'t>>> {
        let mut u = Vec::with_capacity(steps);
        let mut s_state = self.slstm.as_ref().map(|(_, c)| c.initial_state(tape, batch.rows));
        for t in 0..steps {
            let s = self.embedding.interaction(
                tape,
                p,
                &batch.question_column(t),
                &batch.concept_column(t),
                &batch.response_column(t),
            )?;
            let s = maybe_dropout(dropout, s)?;
            u.push(match (&self.slstm, s_state.as_mut()) {
                (Some((norm, cell)), Some(state)) => {
                    *state = cell.step(p, norm.apply(p, s)?, state)?;
                    s.add(state.h)?
                }
                _ => s,
            });
        }

        let Some((norm, cell)) = &self.mlstm else {
            return Ok(u);
        };
        match self.cfg.mlstm_form {
            MLstmForm::Recurrent => {
                let mut state = cell.initial_state(tape, batch.rows);
                u.into_iter()
                    .map(|ut| {
                        state = cell.step(p, norm.apply(p, ut)?, &state)?;
                        Ok(ut.add(state.h)?)
                    })
                    .collect()
            }
            MLstmForm::Parallel => {
                if steps == 0 {
                    return Ok(u);
                }
                let rows = batch.rows;
                let normed: Vec<Var<'t>> = u.iter().map(|&ut| norm.apply(p, ut)).collect::<Result<_>>()?;
                // Row t * B + b holds step t of sequence b.
                let by_step = tape.concat_rows(&normed)?;
                let mut per_row = Vec::with_capacity(rows);
                for b in 0..rows {
                    let valid = batch.lengths[b].min(steps);
                    let mut parts = Vec::with_capacity(2);
                    if valid > 0 {
                        let idx: Vec<usize> = (0..valid).map(|t| t * rows + b).collect();
                        parts.push(cell.parallel_forward(p, by_step.gather_rows(&idx)?)?);
                    }
                    if valid < steps {
                        parts.push(tape.constant(Tensor::zeros(&[steps - valid, self.cfg.dim])));
                    }
                    per_row.push(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? });
                }
                // Row b * steps + t holds step t of sequence b.
                let by_row = tape.concat_rows(&per_row)?;
                u.iter()
                    .enumerate()
                    .map(|(t, &ut)| {
                        let idx: Vec<usize> = (0..rows).map(|b| b * steps + t).collect();
                        Ok(ut.add(by_row.gather_rows(&idx)?)?)
                    })
                    .collect()
            }
        }
    }

    /// `K = A - d_q`, then `[K, r K, (1 - r) K]` (or `K` alone without fusion).
    pub(crate) fn encode<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &SequenceBatch,
        steps: usize,
        dropout: Option<&Dropout>,
    ) -> Result<Vec<Var<'t>>> {
        let a = self.encode_sequence(tape, p, batch, steps, dropout)?;
        a.into_iter()
            .enumerate()
            .map(|(t, at)| {
                let k = if self.cfg.ablation.no_irt || !self.embedding.has_difficulty() {
                    at
                } else {
                    at.sub(self.embedding.difficulty(tape, p, &batch.question_column(t))?)?
                };
                if self.cfg.ablation.no_ikf {
                    return Ok(k);
                }
                let r = RaschEmbedding::response_column(tape, &batch.response_column(t));
                let one_minus_r = r.neg()?.add_scalar(1.0)?;
                Ok(tape.concat(&[k, k.mul(r)?, k.mul(one_minus_r)?])?)
            })
            .collect()
    }

    /// `ReLU([Q, knowledge] W1 + b1) W2 + b2`.
    pub(crate) fn readout<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        knowledge: Var<'t>,
        query: Query<'_>,
        dropout: Option<&Dropout>,
    ) -> Result<Var<'t>> {
        let rows = knowledge.value().shape()[0];
        let q = match query {
            Query::Items { questions, concepts } => self.embedding.question(tape, p, questions, concepts)?,
            Query::Masked => tape.constant(Tensor::zeros(&[rows, self.cfg.dim])),
        };
        let x = tape.concat(&[q, knowledge])?;
        let hidden = x.matmul(p.get(self.w1))?.add(p.get(self.b1))?.relu()?;
        let hidden = maybe_dropout(dropout, hidden)?;
        Ok(hidden.matmul(p.get(self.w2))?.add(p.get(self.b2))?)
    }
}
