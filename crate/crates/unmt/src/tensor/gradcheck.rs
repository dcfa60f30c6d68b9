//! Central finite-difference validation of the analytic gradients.

use super::graph::{Graph, TensorId};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Result of a gradient check: the worst coordinate and its relative error.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a unit floor so near-zero gradients compare absolutely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks d f / d point against central differences (f(x+h) - f(x-h)) / 2h.
///
/// `build` must deterministically construct the loss from a leaf holding the
/// flattened `point`; it is called once per perturbed coordinate.
pub fn grad_check<T, F>(build: F, point: &[T], h: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, TensorId) -> Result<TensorId>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("grad_check: step h = {h}")));
    }
    // Analytic pass.
    let mut g = Graph::new();
    let x = g.leaf(point.len(), 1, point.to_vec(), true);
    let loss = build(&mut g, x)?;
    if g.shape(loss) != (1, 1) {
        return Err(Error::InvalidArgument("grad_check: loss must be scalar".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<f64> = g
        .grad(x)
        .map(|gr| gr.iter().map(|v| v.as_f64()).collect())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |pt: &[T]| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(pt.len(), 1, pt.to_vec(), false);
        let loss = build(&mut g, x)?;
        let v = g.scalar_value(loss).as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check loss = {v}")));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut pt = point.to_vec();
    for i in 0..point.len() {
        let x0 = point[i].as_f64();
        let hi = h * x0.abs().max(1.0);
        pt[i] = T::from_f64(x0 + hi);
        let fp = eval(&pt)?;
        pt[i] = T::from_f64(x0 - hi);
        let fm = eval(&pt)?;
        pt[i] = point[i];
        let numeric = (fp - fm) / (2.0 * hi);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check: non-finite difference at coordinate {i}"
            )));
        }
        let err = rel_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}
