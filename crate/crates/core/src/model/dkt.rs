use xkt_autograd::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

use super::rasch::lookup_ids;
use super::{maybe_dropout, Dropout, ModelConfig};
use crate::cells::LstmCell;
use crate::data::SequenceBatch;
use crate::error::Result;
use crate::init::Initializer;

/// One LSTM layer over embedded `(concept, response)` pairs with a linear
/// sigmoid read-out over all concepts. The next question is not an input.
pub struct Dkt {
    pub(crate) cfg: ModelConfig,
    pub(crate) store: ParamStore,
    embed: ParamId,
    lstm: LstmCell,
    w_out: ParamId,
    b_out: ParamId,
}

impl Dkt {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let (d, n) = (cfg.dim, cfg.n_concepts);
        // Row `c + n * r` embeds concept `c` answered with `r`.
        let embed = store.add("dkt.embed", init.fan_in(&[2 * n, d], d));
        let lstm = LstmCell::new(&mut store, "dkt.lstm", d, d, &mut init);
        let w_out = store.add("dkt.w_out", init.fan_in(&[d, n], d));
        let b_out = store.add("dkt.b_out", Tensor::zeros(&[1, n]));
        Self {
            cfg,
            store,
            embed,
            lstm,
            w_out,
            b_out,
        }
    }

    pub fn output_params(&self) -> [ParamId; 2] {
        [self.w_out, self.b_out]
    }

    pub(crate) fn encode<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &SequenceBatch,
        steps: usize,
        dropout: Option<&Dropout>,
    ) -> Result<Vec<Var<'t>>> {
        let n = self.cfg.n_concepts;
        let mut state = self.lstm.initial_state(tape, batch.rows);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let concepts = lookup_ids(&batch.concept_column(t), n, "concept")?;
            let rows: Vec<usize> = concepts
                .iter()
                .zip(batch.response_column(t))
                .map(|(&c, r)| c + n * usize::from(r != 0))
                .collect();
            let x = maybe_dropout(dropout, p.get(self.embed).gather_rows(&rows)?)?;
            state = self.lstm.step(p, x, &state)?;
            out.push(state.h);
        }
        Ok(out)
    }

    pub(crate) fn readout<'t>(&self, p: &Bound<'t>, knowledge: Var<'t>, dropout: Option<&Dropout>) -> Result<Var<'t>> {
        let h = maybe_dropout(dropout, knowledge)?;
        Ok(h.matmul(p.get(self.w_out))?.add(p.get(self.b_out))?)
    }
}
