//! Central finite-difference verification of analytic gradients.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Real;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: Real,
    /// `(parameter, element)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// One perturbed scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: Real,
    pub numeric: Real,
}

impl GradEntry {
    pub fn rel_err(&self) -> Real {
        relative_error(self.analytic, self.numeric)
    }
}

/// Analytic and central-difference gradients for every scalar of every
/// parameter.
///
/// `objective` receives the parameters bound as tape leaves (in the same
/// order as `params`) and must return a scalar. The objective must be
/// deterministic.
pub fn finite_diff_entries<E, F>(params: &[Tensor], eps: Real, objective: F) -> Result<Vec<GradEntry>, E>
where
    E: From<TensorError>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    if eps <= 0.0 {
        return Err(TensorError::Contract("finite difference eps must be positive".into()).into());
    }

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = objective(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(grads);

    let evaluate = |values: &[Tensor], param: usize, index: usize| -> Result<Real, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|p| tape.constant(p.clone())).collect();
        let value = match objective(&tape, &vars) {
            Ok(v) => v.value().item()?,
            Err(_) => Real::NAN,
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(TensorError::NonFiniteObjective { param, index }.into())
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::new();
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let original = work[p].data()[i];
            work[p].data_mut()[i] = original + eps;
            let plus = evaluate(&work, p, i)?;
            work[p].data_mut()[i] = original - eps;
            let minus = evaluate(&work, p, i)?;
            work[p].data_mut()[i] = original;
            out.push(GradEntry {
                param: p,
                index: i,
                analytic: analytic[p].data()[i],
                numeric: (plus - minus) / (2.0 * eps),
            });
        }
    }
    Ok(out)
}

/// The largest [`relative_error`] over [`finite_diff_entries`].
pub fn finite_diff_check<E, F>(params: &[Tensor], eps: Real, objective: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    Ok(summarize(&finite_diff_entries(params, eps, objective)?))
}

pub fn summarize(entries: &[GradEntry]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: entries.len(),
    };
    for e in entries {
        let err = e.rel_err();
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((e.param, e.index));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let report = finite_diff_check::<TensorError, _>(&[Tensor::scalar(3.0)], 1e-6, |_, v| {
            v[0].mul(v[0])?.sum()
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let report = finite_diff_check::<TensorError, _>(&[Tensor::scalar(3.0)], 1e-6, |t, _| {
            Ok(t.constant(Tensor::scalar(2.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_objective_names_parameter() {
        // log(x) at x = 0 +/- eps is non-finite on the minus side.
        let err = finite_diff_check::<TensorError, _>(
            &[Tensor::row(vec![1.0, 1e-9])],
            1e-6,
            |_, v| v[0].ln()?.sum(),
        )
        .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteObjective { param: 0, index: 1 });
    }
}
