use xkt_autograd::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

use super::{gate_preactivations, ForgetActivation};
use crate::error::Result;
use crate::init::Initializer;

/// Scalar-memory cell with an exponential input gate and a normalizer state.
///
/// Column blocks of `w`, `r` and `b` are ordered forget, input, cell input, output.
#[derive(Clone, Debug)]
pub struct SLstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub forget: ForgetActivation,
    w: ParamId,
    r: ParamId,
    b: ParamId,
}

/// Per-unit recurrent state. `m` is the log-domain stabilizer; it carries no
/// gradient because the hidden output does not depend on it.
#[derive(Clone, Debug)]
pub struct SLstmState<'t> {
    pub c: Var<'t>,
    pub n: Var<'t>,
    pub h: Var<'t>,
    pub m: Tensor,
}

impl SLstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        forget: ForgetActivation,
        init: &mut Initializer,
    ) -> Self {
        let d = hidden_size;
        let w = store.add(format!("{prefix}.w"), init.fan_in(&[input_size, 4 * d], input_size));
        let r = store.add(format!("{prefix}.r"), init.fan_in(&[d, 4 * d], d));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[1, 4 * d]));
        Self {
            input_size,
            hidden_size,
            forget,
            w,
            r,
            b,
        }
    }

    pub fn params(&self) -> [ParamId; 3] {
        [self.w, self.r, self.b]
    }

    /// `c = n = h = 0`, `m = 0`.
    pub fn initial_state<'t>(&self, tape: &'t Tape, batch: usize) -> SLstmState<'t> {
        let shape = [batch, self.hidden_size];
        let zeros = tape.constant(Tensor::zeros(&shape));
        SLstmState {
            c: zeros,
            n: zeros,
            h: zeros,
            m: Tensor::zeros(&shape),
        }
    }

    pub fn step<'t>(&self, p: &Bound<'t>, x: Var<'t>, prev: &SLstmState<'t>) -> Result<SLstmState<'t>> {
        let tape = x.tape();
        let d = self.hidden_size;
        let pre = gate_preactivations(p, (self.w, self.r, self.b), x, prev.h)?;
        let f_pre = pre.slice_last(0, d)?;
        let i_pre = pre.slice_last(d, d)?;
        let z = pre.slice_last(2 * d, d)?.tanh()?;
        let o = pre.slice_last(3 * d, d)?.sigmoid()?;

        let log_f = match self.forget {
            ForgetActivation::Exp => f_pre,
            ForgetActivation::Sigmoid => f_pre.log_sigmoid()?,
        };
        let (m, shift) = stabilize(&log_f.value(), &i_pre.value(), &prev.m);
        let i = i_pre.sub(tape.constant(m.clone()))?.exp()?;
        let f = log_f.add(tape.constant(shift))?.exp()?;

        let c = f.mul(prev.c)?.add(i.mul(z)?)?;
        let n = f.mul(prev.n)?.add(i)?;
        let h = o.mul(c.div(n)?)?;
        Ok(SLstmState { c, n, h, m })
    }
}

/// New stabilizer `m' = max(log_f + m, i_pre)` and the forget-gate shift `m - m'`.
pub(crate) fn stabilize(log_f: &Tensor, i_pre: &Tensor, m_prev: &Tensor) -> (Tensor, Tensor) {
    let len = log_f.len();
    let mut m = Vec::with_capacity(len);
    let mut shift = Vec::with_capacity(len);
    for k in 0..len {
        let next: Real = (log_f.data()[k] + m_prev.data()[k]).max(i_pre.data()[k]);
        m.push(next);
        shift.push(m_prev.data()[k] - next);
    }
    let shape = log_f.shape().to_vec();
    (
        Tensor::new(shape.clone(), m).expect("same shape"),
        Tensor::new(shape, shift).expect("same shape"),
    )
}
