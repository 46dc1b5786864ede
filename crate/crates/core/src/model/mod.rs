//! Knowledge tracing networks: DKT2 and the LSTM baseline.
//!
//! Both models split into an encoder that turns interactions into one
//! knowledge vector per step, and a read-out that combines a knowledge
//! vector with the next question into logits over all concepts.

mod checkpoint;
mod dkt;
mod dkt2;
mod rasch;

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xkt_autograd::{Bound, ParamStore, Real, Tape, Tensor, Var};

use crate::cells::ForgetActivation;
use crate::data::SequenceBatch;
use crate::error::{KtError, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use dkt::Dkt;
pub use dkt2::Dkt2;
pub use rasch::RaschEmbedding;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Dkt2,
    Dkt,
}

/// Components switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Question difficulty fixed at zero.
    pub no_rasch: bool,
    /// Knowledge is the encoder output, without subtracting difficulty.
    pub no_irt: bool,
    /// Read-out sees only the question and knowledge, not the split by response.
    pub no_ikf: bool,
    pub no_slstm: bool,
    pub no_mlstm: bool,
}

/// How the mLSTM block runs over time inside the encoder. Both give the same
/// outputs; the parallel form keeps memory at `T x T` per sequence instead
/// of a `d x d` matrix per step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MLstmForm {
    #[default]
    Parallel,
    Recurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
    pub n_questions: usize,
    pub n_concepts: usize,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_slstm_forget")]
    pub slstm_forget: ForgetActivation,
    #[serde(default = "default_mlstm_forget")]
    pub mlstm_forget: ForgetActivation,
    #[serde(default)]
    pub mlstm_form: MLstmForm,
}

fn default_slstm_forget() -> ForgetActivation {
    ForgetActivation::Exp
}

fn default_mlstm_forget() -> ForgetActivation {
    ForgetActivation::Sigmoid
}

impl ModelConfig {
    pub fn new(kind: ModelKind, dim: usize, n_questions: usize, n_concepts: usize) -> Self {
        Self {
            kind,
            dim,
            n_questions,
            n_concepts,
            ablation: Ablation::default(),
            slstm_forget: default_slstm_forget(),
            mlstm_forget: default_mlstm_forget(),
            mlstm_form: MLstmForm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("dim", self.dim),
            ("n_questions", self.n_questions),
            ("n_concepts", self.n_concepts),
        ] {
            if v == 0 {
                return Err(KtError::Config {
                    field: field.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// Inverted dropout with its own seeded generator. Rate 0 is the identity.
pub struct Dropout {
    rate: Real,
    rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: Real, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(KtError::Config {
                field: "dropout".into(),
                msg: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        Ok(Self {
            rate,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = x.value().shape().to_vec();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<Real> = (0..shape.iter().product::<usize>())
            .map(|_| if rng.random::<f64>() < self.rate as f64 { 0.0 } else { 1.0 / keep })
            .collect();
        Ok(x.mul(x.tape().constant(Tensor::new(shape, mask)?))?)
    }
}

pub(crate) fn maybe_dropout<'t>(dropout: Option<&Dropout>, x: Var<'t>) -> Result<Var<'t>> {
    match dropout {
        Some(d) => d.apply(x),
        None => Ok(x),
    }
}

/// What the read-out is told about the step being predicted.
#[derive(Clone, Copy, Debug)]
pub enum Query<'a> {
    Items { questions: &'a [usize], concepts: &'a [usize] },
    /// Nothing is known: the question embedding is all zeros.
    Masked,
}

pub enum Model {
    Dkt2(Dkt2),
    Dkt(Dkt),
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            ModelKind::Dkt2 => Model::Dkt2(Dkt2::new(cfg.clone(), seed)),
            ModelKind::Dkt => Model::Dkt(Dkt::new(cfg.clone(), seed)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Dkt2(m) => &m.cfg,
            Model::Dkt(m) => &m.cfg,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Dkt2(m) => &m.store,
            Model::Dkt(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Dkt2(m) => &mut m.store,
            Model::Dkt(m) => &mut m.store,
        }
    }

    pub fn n_concepts(&self) -> usize {
        self.config().n_concepts
    }

    /// Knowledge after each of the first `steps` columns of `batch`, one
    /// `[B, k]` tensor per step. Columns at or beyond `steps` are never read.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &SequenceBatch,
        steps: usize,
        dropout: Option<&Dropout>,
    ) -> Result<Vec<Var<'t>>> {
        if steps > batch.len {
            return Err(KtError::contract(format!(
                "cannot encode {steps} steps of a batch with {} columns",
                batch.len
            )));
        }
        match self {
            Model::Dkt2(m) => m.encode(tape, p, batch, steps, dropout),
            Model::Dkt(m) => m.encode(tape, p, batch, steps, dropout),
        }
    }

    /// Logits over all concepts, `[M, n_concepts]`, for `M` knowledge rows.
    pub fn readout<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        knowledge: Var<'t>,
        query: Query<'_>,
        dropout: Option<&Dropout>,
    ) -> Result<Var<'t>> {
        match self {
            Model::Dkt2(m) => m.readout(tape, p, knowledge, query, dropout),
            Model::Dkt(m) => m.readout(p, knowledge, dropout),
        }
    }
}

/// Next-step predictions for every column after the first.
///
/// Row `t * B + b` of `probs` is the prediction for step `t + 1` of batch
/// row `b`, made from knowledge through step `t`.
pub struct NextStep<'t> {
    pub probs: Var<'t>,
    pub labels: Vec<Real>,
    pub mask: Vec<bool>,
    pub concepts: Vec<usize>,
}

pub fn forward_next<'t>(
    model: &Model,
    tape: &'t Tape,
    p: &Bound<'t>,
    batch: &SequenceBatch,
    dropout: Option<&Dropout>,
) -> Result<NextStep<'t>> {
    if batch.len < 2 {
        return Err(KtError::contract("next-step prediction needs at least two columns"));
    }
    let steps = batch.len - 1;
    let knowledge = model.encode(tape, p, batch, steps, dropout)?;
    let stacked = tape.concat_rows(&knowledge)?;

    let mut questions = Vec::with_capacity(steps * batch.rows);
    let mut concepts = Vec::with_capacity(steps * batch.rows);
    let mut labels = Vec::with_capacity(steps * batch.rows);
    let mut mask = Vec::with_capacity(steps * batch.rows);
    for t in 1..batch.len {
        questions.extend(batch.question_column(t));
        concepts.extend(batch.concept_column(t));
        labels.extend(batch.response_column(t).into_iter().map(Real::from));
        mask.extend((0..batch.rows).map(|b| batch.valid(b, t)));
    }
    let logits = model.readout(
        tape,
        p,
        stacked,
        Query::Items {
            questions: &questions,
            concepts: &concepts,
        },
        dropout,
    )?;
    let cols = rasch::lookup_ids(&concepts, model.n_concepts(), "concept")?;
    let probs = logits.gather_cols(&cols)?.sigmoid()?;
    Ok(NextStep {
        probs,
        labels,
        mask,
        concepts,
    })
}
