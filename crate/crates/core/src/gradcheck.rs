//! Central-difference verification of analytic gradients.

use crate::rng::SeededRng;
use crate::tensor::{ParamId, ParamStore, Real, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst sample.
    pub worst: Option<(String, usize)>,
    pub samples: usize,
}

/// Compares analytic gradients with `(f(x+eps) - f(x-eps)) / (2 eps)` on
/// `samples` randomly chosen scalars (parameter tensor first, then an index
/// inside it, both uniform).
///
/// `loss_fn(params, with_grad)` must return the scalar loss and, when
/// `with_grad` is set, leave the analytic gradient in the store's grad
/// buffers (zeroing them first is the callee's job).
pub fn finite_diff_check<F, L>(
    mut loss_fn: L,
    params: &mut ParamStore<F>,
    eps: F,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<GradCheckReport, TensorError>
where
    F: Real,
    L: FnMut(&mut ParamStore<F>, bool) -> Result<F, TensorError>,
{
    let base = loss_fn(params, true)?;
    check_finite(base)?;
    let candidates: Vec<ParamId> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.value.is_empty())
        .map(|(i, _)| ParamId(i))
        .collect();
    let analytic_grads: Vec<Vec<F>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        samples,
    };
    if candidates.is_empty() {
        return Ok(report);
    }
    for _ in 0..samples {
        let id = candidates[rng.below(candidates.len())];
        let idx = rng.below(params.value(id).len());
        let original = params.value(id).data()[idx];

        params.value_mut(id).data_mut()[idx] = original + eps;
        let plus = loss_fn(params, false)?;
        params.value_mut(id).data_mut()[idx] = original - eps;
        let minus = loss_fn(params, false)?;
        params.value_mut(id).data_mut()[idx] = original;
        check_finite(plus)?;
        check_finite(minus)?;

        let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * eps.as_f64());
        let analytic = analytic_grads[id.0][idx].as_f64();
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = rel;
            report.worst = Some((params.iter().nth(id.0).unwrap().name.clone(), idx));
        }
    }
    Ok(report)
}

fn check_finite<F: Real>(x: F) -> Result<(), TensorError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFiniteLoss { value: x.as_f64() })
    }
}
