use xkt_autograd::{Real, Tensor, Var};

use crate::error::{KtError, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: Real = 1e-7;

pub struct Bce<'t> {
    /// Loss per valid step; what the optimizer minimizes.
    pub mean: Var<'t>,
    pub sum: Real,
    pub count: usize,
}

/// Binary cross-entropy over the entries where `mask` is set.
///
/// `probs` is `[M, 1]`; masked-out entries contribute exactly zero whatever
/// their label.
pub fn bce_loss<'t>(probs: Var<'t>, labels: &[Real], mask: &[bool]) -> Result<Bce<'t>> {
    let m = probs.value().len();
    if labels.len() != m || mask.len() != m {
        return Err(KtError::contract(format!(
            "bce over {m} predictions with {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(KtError::contract("bce over an empty mask"));
    }
    let tape = probs.tape();
    let col = |v: Vec<Real>| tape.constant(Tensor::column(v));
    let weight: Vec<Real> = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let pos: Vec<Real> = labels.iter().zip(&weight).map(|(y, w)| y * w).collect();
    let neg: Vec<Real> = labels.iter().zip(&weight).map(|(y, w)| (1.0 - y) * w).collect();

    let p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = p.ln()?;
    let log_q = p.neg()?.add_scalar(1.0)?.ln()?;
    let total = log_p.mul(col(pos))?.add(log_q.mul(col(neg))?)?.sum()?.neg()?;
    let sum = total.value().item()?;
    let mean = total.scale(1.0 / count as Real)?;
    Ok(Bce { mean, sum, count })
}
