use super::{AutodiffError, Tensor};

/// Central-difference gradient of `loss_fn` with respect to every element of `params`.
///
/// `params` is perturbed in place and restored afterwards. The loss is
/// evaluated twice at the unperturbed point first; any mismatch is reported
/// as non-determinism.
pub fn finite_difference_grad<F>(mut loss_fn: F, params: &mut [Tensor], h: f64) -> Result<Vec<Vec<f64>>, AutodiffError>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(AutodiffError::Invalid(format!("step size must be positive, got {h}")));
    }
    let first = loss_fn(params);
    let second = loss_fn(params);
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = params[p].values()[i];
            params[p].values_mut()[i] = orig + h;
            let up = loss_fn(params);
            params[p].values_mut()[i] = orig - h;
            let down = loss_fn(params);
            params[p].values_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// `|a - n| / max(1, |a|)`, the comparison used by the gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}
