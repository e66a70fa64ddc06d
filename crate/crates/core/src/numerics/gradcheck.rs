use crate::error::{Error, Result};

pub const DEFAULT_GRAD_CHECK_STEP: f64 = 1e-5;

/// Compare an analytic gradient against central finite differences.
///
/// `f` maps a flat parameter vector to `(value, analytic_gradient)`. The
/// analytic gradient is taken at `params`; every coordinate is then perturbed
/// by `±eps` and only the returned values are used. The result is
/// `max_i |g_i - fd_i| / max(1, |g_i|, |fd_i|)`.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::input(format!("finite-difference step {eps} must be positive")));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::input("parameters must be finite"));
    }
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(Error::input(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("analytic gradient is not finite"));
    }

    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (plus, _) = f(&probe)?;
        probe[i] = params[i] - eps;
        let (minus, _) = f(&probe)?;
        probe[i] = params[i];

        let fd = (plus - minus) / (2.0 * eps);
        if !fd.is_finite() {
            return Err(Error::numeric(format!("finite difference for parameter {i} is not finite")));
        }
        let g = analytic[i];
        let rel = (g - fd).abs() / 1f64.max(g.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
