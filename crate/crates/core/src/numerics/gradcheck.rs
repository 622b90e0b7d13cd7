use crate::error::{Error, Result};
use crate::numerics::tensor::{Gradients, ParamStore};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest `|analytic − numeric|` over all coordinates.
    pub max_absolute_error: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients with central differences over every
/// coordinate of every trainable parameter.
///
/// `loss_fn` must be deterministic. It returns the loss and, when asked
/// (`true`), the reverse-mode gradients.
pub fn finite_difference_check<F>(params: &mut ParamStore<f64>, epsilon: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, bool) -> Result<(f64, Option<Gradients<f64>>)>,
{
    let (base, grads) = loss_fn(params, true)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is {base}")));
    }
    let grads = grads.ok_or_else(|| Error::Contract("loss_fn returned no gradients".into()))?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        max_absolute_error: 0.0,
        coordinates: 0,
    };
    for id in params.ids().collect::<Vec<_>>() {
        if !params.get(id).requires_grad {
            continue;
        }
        for i in 0..params.get(id).len() {
            let original = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = original + epsilon;
            let (plus, _) = loss_fn(params, false)?;
            params.get_mut(id).data_mut()[i] = original - epsilon;
            let (minus, _) = loss_fn(params, false)?;
            params.get_mut(id).data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is non-finite when perturbing {}[{i}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            report.max_absolute_error = report.max_absolute_error.max((analytic - numeric).abs());
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst = Some((params.name(id).to_string(), i));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(1e-8)
}
