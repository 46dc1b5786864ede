use xkt_autograd::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

use super::gate_preactivations;
use crate::error::Result;
use crate::init::Initializer;

/// Standard LSTM cell with sigmoid gates and tanh cell input/output.
///
/// Column blocks of `w`, `r` and `b` are ordered forget, input, cell input, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    w: ParamId,
    r: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState<'t> {
    pub c: Var<'t>,
    pub h: Var<'t>,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        init: &mut Initializer,
    ) -> Self {
        let d = hidden_size;
        let w = store.add(format!("{prefix}.w"), init.fan_in(&[input_size, 4 * d], input_size));
        let r = store.add(format!("{prefix}.r"), init.fan_in(&[d, 4 * d], d));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[1, 4 * d]));
        Self {
            input_size,
            hidden_size,
            w,
            r,
            b,
        }
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.w, self.r, self.b]
    }

    pub fn initial_state<'t>(&self, tape: &'t Tape, batch: usize) -> LstmState<'t> {
        let zeros = tape.constant(Tensor::zeros(&[batch, self.hidden_size]));
        LstmState { c: zeros, h: zeros }
    }

    pub fn step<'t>(&self, p: &Bound<'t>, x: Var<'t>, prev: &LstmState<'t>) -> Result<LstmState<'t>> {
        let d = self.hidden_size;
        let pre = gate_preactivations(p, (self.w, self.r, self.b), x, prev.h)?;
        let f = pre.slice_last(0, d)?.sigmoid()?;
        let i = pre.slice_last(d, d)?.sigmoid()?;
        let z = pre.slice_last(2 * d, d)?.tanh()?;
        let o = pre.slice_last(3 * d, d)?.sigmoid()?;
        let c = f.mul(prev.c)?.add(i.mul(z)?)?;
        let h = o.mul(c.tanh()?)?;
        Ok(LstmState { c, h })
    }
}
