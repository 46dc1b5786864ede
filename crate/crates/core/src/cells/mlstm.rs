use xkt_autograd::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

use super::slstm::stabilize;
use super::ForgetActivation;
use crate::error::Result;
use crate::init::Initializer;

/// Initial forget-gate bias, so memory starts out mostly retained.
const FORGET_BIAS_INIT: Real = 3.0;

/// Matrix-memory cell with scalar gates per step and a key/value/query read-out.
///
/// `w_gates` has two columns (forget, input). `w_proj` and `b_proj` hold four
/// column blocks: key, value, query, output gate.
#[derive(Clone, Debug)]
pub struct MLstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub forget: ForgetActivation,
    w_gates: ParamId,
    b_gates: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

/// Recurrent state for a batch. `c` holds each row's `d x d` memory flattened
/// row-major; `m` is the per-row stabilizer (`[B, 1]`, no gradient).
///
/// `c` and `n` are stored scaled by `exp(-m)`; the read-out clamps the
/// normalizer at `exp(-m)`, which is the unit lower bound in unscaled terms.
#[derive(Clone, Debug)]
pub struct MLstmState<'t> {
    pub c: Var<'t>,
    pub n: Var<'t>,
    pub h: Var<'t>,
    pub m: Tensor,
}

/// Per-step quantities that do not depend on the recurrent state.
struct Projections<'t> {
    log_f: Var<'t>,
    i_pre: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    q: Var<'t>,
    o: Var<'t>,
}

impl MLstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        forget: ForgetActivation,
        init: &mut Initializer,
    ) -> Self {
        let d = hidden_size;
        let w_gates = store.add(
            format!("{prefix}.w_gates"),
            init.fan_in(&[input_size, 2], input_size),
        );
        let b_gates = store.add(
            format!("{prefix}.b_gates"),
            Tensor::row(vec![FORGET_BIAS_INIT, 0.0]),
        );
        let w_proj = store.add(
            format!("{prefix}.w_proj"),
            init.fan_in(&[input_size, 4 * d], input_size),
        );
        let b_proj = store.add(format!("{prefix}.b_proj"), Tensor::zeros(&[1, 4 * d]));
        Self {
            input_size,
            hidden_size,
            forget,
            w_gates,
            b_gates,
            w_proj,
            b_proj,
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w_gates, self.b_gates, self.w_proj, self.b_proj]
    }

    /// `C = 0`, `n = h = 0`, `m = 0`.
    pub fn initial_state<'t>(&self, tape: &'t Tape, batch: usize) -> MLstmState<'t> {
        let d = self.hidden_size;
        let vec_zeros = tape.constant(Tensor::zeros(&[batch, d]));
        MLstmState {
            c: tape.constant(Tensor::zeros(&[batch, d * d])),
            n: vec_zeros,
            h: vec_zeros,
            m: Tensor::zeros(&[batch, 1]),
        }
    }

    fn project<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Projections<'t>> {
        let d = self.hidden_size;
        let gates = x.matmul(p.get(self.w_gates))?.add(p.get(self.b_gates))?;
        let f_pre = gates.slice_last(0, 1)?;
        let i_pre = gates.slice_last(1, 1)?;
        let log_f = match self.forget {
            ForgetActivation::Exp => f_pre,
            ForgetActivation::Sigmoid => f_pre.log_sigmoid()?,
        };

        let proj = x.matmul(p.get(self.w_proj))?;
        let bias = p.get(self.b_proj);
        let block = |j: usize| -> Result<(Var<'t>, Var<'t>)> {
            Ok((proj.slice_last(j * d, d)?, bias.slice_last(j * d, d)?))
        };
        let (wk, bk) = block(0)?;
        let k = wk.scale(1.0 / (d as Real).sqrt())?.add(bk)?;
        let (wv, bv) = block(1)?;
        let (wq, bq) = block(2)?;
        let (wo, bo) = block(3)?;
        Ok(Projections {
            log_f,
            i_pre,
            k,
            v: wv.add(bv)?,
            q: wq.add(bq)?,
            o: wo.add(bo)?.sigmoid()?,
        })
    }

    pub fn step<'t>(&self, p: &Bound<'t>, x: Var<'t>, prev: &MLstmState<'t>) -> Result<MLstmState<'t>> {
        let tape = x.tape();
        let pr = self.project(p, x)?;
        let (m, shift) = stabilize(&pr.log_f.value(), &pr.i_pre.value(), &prev.m);
        let i = pr.i_pre.sub(tape.constant(m.clone()))?.exp()?;
        let f = pr.log_f.add(tape.constant(shift))?.exp()?;

        let c = f.mul(prev.c)?.add(i.mul(pr.v.outer(pr.k)?)?)?;
        let n = f.mul(prev.n)?.add(i.mul(pr.k)?)?;
        let floor = tape.constant(m.map(|v| (-v).exp()));
        let denom = n.mul(pr.q)?.sum_last()?.abs()?.maximum(floor)?;
        let h = pr.o.mul(c.batch_matvec(pr.q)?.div(denom)?)?;
        Ok(MLstmState { c, n, h, m })
    }

    /// Runs the whole sequence `xs` (`[T, input_size]`, one sequence) in the
    /// closed form that touches every step at once:
    ///
    /// `h_t = o_t * sum_s w_ts (k_s . q_t) v_s / max(|sum_s w_ts (k_s . q_t)|, exp(-m_t))`
    ///
    /// with `log w_ts = F_t - F_s + i_s - m_t` for `s <= t`, `F` the running
    /// sum of log forget gates and `m_t` the same stabilizer the step form
    /// produces from a zero initial state. Returns `[T, hidden_size]`.
    pub fn parallel_forward<'t>(&self, p: &Bound<'t>, xs: Var<'t>) -> Result<Var<'t>> {
        let tape = xs.tape();
        let t_len = xs.value().shape()[0];
        if t_len == 0 {
            return Err(crate::error::KtError::contract(
                "parallel mLSTM needs at least one step",
            ));
        }
        let pr = self.project(p, xs)?;

        // F_t = sum_{u <= t} log f_u via a lower-triangular ones matrix.
        let mut lower = vec![0.0; t_len * t_len];
        for t in 0..t_len {
            for s in 0..=t {
                lower[t * t_len + s] = 1.0;
            }
        }
        let lower = tape.constant(Tensor::matrix(t_len, t_len, lower)?);
        let cum = lower.matmul(pr.log_f)?; // [T, 1]
        // (F_t - F_s) + i_s; the difference is exactly zero on the diagonal.
        let log_w = cum.sub(cum.transpose()?)?.add(pr.i_pre.transpose()?)?; // [T, T]

        let lw = log_w.value();
        let cv = cum.value();
        let mut m = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let row_max = (0..=t).map(|s| lw.at(t, s)).fold(cv.data()[t], Real::max);
            m.push(row_max);
        }
        let m = Tensor::column(m);
        let weights = log_w
            .sub(tape.constant(m.clone()))?
            .mul(lower)?
            .exp()?
            .mul(lower)?;

        let scores = pr.q.matmul(pr.k.transpose()?)?; // [T, T], entry (t, s) = q_t . k_s
        let mixed = weights.mul(scores)?;
        let numer = mixed.matmul(pr.v)?;
        let floor = tape.constant(m.map(|v| (-v).exp()));
        let denom = mixed.sum_last()?.abs()?.maximum(floor)?;
        Ok(pr.o.mul(numer.div(denom)?)?)
    }
}
