//! Recurrent cells: the classic LSTM, the exponentially gated sLSTM and the
//! matrix-memory mLSTM.
//!
//! All cells operate on a batch: inputs are `[B, input_size]` and every state
//! component carries the batch as its leading dimension. Gate weights are
//! stored fused, one column block per gate.

mod lstm;
mod mlstm;
mod slstm;

use serde::{Deserialize, Serialize};
use xkt_autograd::{Bound, ParamId, Var};

use crate::error::Result;

pub use lstm::{LstmCell, LstmState};
pub use mlstm::{MLstmCell, MLstmState};
pub use slstm::{SLstmCell, SLstmState};

/// Activation for the forget gate of the exponentially gated cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetActivation {
    Sigmoid,
    Exp,
}

/// `x W + h R + b`, one column block per gate.
fn gate_preactivations<'t>(
    p: &Bound<'t>,
    (w, r, b): (ParamId, ParamId, ParamId),
    x: Var<'t>,
    h: Var<'t>,
) -> Result<Var<'t>> {
    Ok(x.matmul(p.get(w))?.add(h.matmul(p.get(r))?)?.add(p.get(b))?)
}
