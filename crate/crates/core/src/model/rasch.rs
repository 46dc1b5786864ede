use xkt_autograd::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

use crate::data::PAD_ID;
use crate::error::{KtError, Result};
use crate::init::Initializer;

/// Concept and response embeddings shifted by a learned scalar difficulty
/// per question:
///
/// `Q = e_c + d_q * mu_c`, `S = e_c + e_r + d_q * g_r`.
///
/// Without difficulty the tables `mu_c`, `g_r` and `d_q` are not allocated
/// and `d_q` reads as zero.
#[derive(Clone, Debug)]
pub struct RaschEmbedding {
    pub n_questions: usize,
    pub n_concepts: usize,
    pub dim: usize,
    e_c: ParamId,
    e_r: ParamId,
    difficulty: Option<Difficulty>,
}

#[derive(Clone, Debug)]
struct Difficulty {
    mu_c: ParamId,
    g_r: ParamId,
    d_q: ParamId,
}

/// Replaces padding with row 0 and rejects ids outside the table.
pub(crate) fn lookup_ids(ids: &[usize], size: usize, kind: &'static str) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| match id {
            PAD_ID => Ok(0),
            id if id < size => Ok(id),
            id => Err(KtError::Vocabulary {
                kind,
                id: id.to_string(),
            }),
        })
        .collect()
}

impl RaschEmbedding {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        n_questions: usize,
        n_concepts: usize,
        dim: usize,
        with_difficulty: bool,
    ) -> Self {
        let e_c = store.add("rasch.e_c", init.fan_in(&[n_concepts, dim], dim));
        let e_r = store.add("rasch.e_r", init.fan_in(&[2, dim], dim));
        let difficulty = with_difficulty.then(|| Difficulty {
            mu_c: store.add("rasch.mu_c", init.fan_in(&[n_concepts, dim], dim)),
            g_r: store.add("rasch.g_r", init.fan_in(&[2, dim], dim)),
            d_q: store.add("rasch.d_q", Tensor::zeros(&[n_questions, 1])),
        });
        Self {
            n_questions,
            n_concepts,
            dim,
            e_c,
            e_r,
            difficulty,
        }
    }

    pub fn has_difficulty(&self) -> bool {
        self.difficulty.is_some()
    }

    /// `d_q` per row, `[B, 1]`.
    pub fn difficulty<'t>(&self, tape: &'t Tape, p: &Bound<'t>, questions: &[usize]) -> Result<Var<'t>> {
        let q = lookup_ids(questions, self.n_questions, "question")?;
        match &self.difficulty {
            Some(d) => Ok(p.get(d.d_q).gather_rows(&q)?),
            None => Ok(tape.constant(Tensor::zeros(&[q.len(), 1]))),
        }
    }

    /// Question embedding `Q`, `[B, dim]`.
    pub fn question<'t>(&self, tape: &'t Tape, p: &Bound<'t>, questions: &[usize], concepts: &[usize]) -> Result<Var<'t>> {
        let c = lookup_ids(concepts, self.n_concepts, "concept")?;
        let e_c = p.get(self.e_c).gather_rows(&c)?;
        match &self.difficulty {
            Some(d) => {
                let dq = self.difficulty(tape, p, questions)?;
                Ok(e_c.add(dq.mul(p.get(d.mu_c).gather_rows(&c)?)?)?)
            }
            None => Ok(e_c),
        }
    }

    /// Interaction embedding `S`, `[B, dim]`.
    pub fn interaction<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        questions: &[usize],
        concepts: &[usize],
        responses: &[u8],
    ) -> Result<Var<'t>> {
        let c = lookup_ids(concepts, self.n_concepts, "concept")?;
        let r: Vec<usize> = responses.iter().map(|&r| usize::from(r != 0)).collect();
        let base = p.get(self.e_c).gather_rows(&c)?.add(p.get(self.e_r).gather_rows(&r)?)?;
        match &self.difficulty {
            Some(d) => {
                let dq = self.difficulty(tape, p, questions)?;
                Ok(base.add(dq.mul(p.get(d.g_r).gather_rows(&r)?)?)?)
            }
            None => Ok(base),
        }
    }

    /// Response bits as a `[B, 1]` constant.
    pub fn response_column<'t>(tape: &'t Tape, responses: &[u8]) -> Var<'t> {
        tape.constant(Tensor::column(responses.iter().map(|&r| Real::from(r)).collect()))
    }
}
