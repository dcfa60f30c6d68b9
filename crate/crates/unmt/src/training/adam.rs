//! Adam with bias correction and global-norm gradient clipping.
//!
//! Moments are stored at parameter precision so a checkpoint round trip is
//! bit-exact; the update arithmetic runs in f64.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Scalar;

pub const GRAD_CLIP: f64 = 5.0;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// First/second moments, one buffer per parameter tensor.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Update count (for bias correction).
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Result<Adam<T>> {
        if lr <= 0.0 || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config(format!(
                "bad optimizer settings: lr={lr} beta1={beta1} beta2={beta2}"
            )));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            m: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            t: 0,
        })
    }

    /// Global L2 norm over all gradient buffers, in f64.
    pub fn global_norm(grads: &[Vec<T>]) -> f64 {
        grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// One update. Gradients are validated (finite) and clipped to
    /// `GRAD_CLIP` global norm before any state is touched, so a rejected
    /// step leaves parameters and moments unchanged. Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<f64> {
        if grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                details: format!("{} gradient buffers for {} parameters", grads.len(), self.m.len()),
            });
        }
        let norm = Self::global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, g) in grads.iter().enumerate() {
            let p = params.at_mut(pi);
            if g.len() != p.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    details: format!("gradient {} has {} values, parameter has {}", p.name, g.len(), p.data.len()),
                });
            }
            for (i, gv) in g.iter().enumerate() {
                let gi = gv.as_f64() * scale;
                let m = self.beta1 * self.m[pi][i].as_f64() + (1.0 - self.beta1) * gi;
                let v = self.beta2 * self.v[pi][i].as_f64() + (1.0 - self.beta2) * gi * gi;
                self.m[pi][i] = T::from_f64(m);
                self.v[pi][i] = T::from_f64(v);
                let update = self.lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
                p.data[i] = T::from_f64(p.data[i].as_f64() - update);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let n = values.len();
        p.add("x", 1, n, values);
        p
    }

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = sum x_i^2, gradient 2x
        let mut params = store(vec![3.0, -2.0, 0.5]);
        let mut adam = Adam::new(&params, 0.05, 0.9, 0.98).unwrap();
        for _ in 0..500 {
            let g: Vec<f64> = params.at(0).data.iter().map(|&x| 2.0 * x).collect();
            adam.step(&mut params, &[g]).unwrap();
        }
        for &x in &params.at(0).data {
            assert!(x.abs() < 1e-3, "{x}");
        }
    }

    #[test]
    fn first_step_size_is_about_lr_regardless_of_scale() {
        for &g0 in &[1e-6, 1.0] {
            let mut params = store(vec![0.0]);
            let mut adam = Adam::new(&params, 0.01, 0.9, 0.98).unwrap();
            adam.step(&mut params, &[vec![g0]]).unwrap();
            let moved = params.at(0).data[0].abs();
            assert!((moved - 0.01).abs() < 1e-4, "g0={g0} moved {moved}");
        }
    }

    #[test]
    fn clips_to_global_norm() {
        let mut params = store(vec![0.0, 0.0]);
        let mut adam = Adam::new(&params, 0.1, 0.9, 0.98).unwrap();
        let huge = vec![3000.0, 4000.0];
        let norm = adam.step(&mut params, &[huge]).unwrap();
        assert_eq!(norm, 5000.0);
        // first moment holds (1 - beta1) times the clipped gradient, whose
        // norm is GRAD_CLIP and whose direction is preserved
        let m = &adam.m[0];
        let m_norm = (m[0] * m[0] + m[1] * m[1]).sqrt() / (1.0 - adam.beta1);
        assert!((m_norm - GRAD_CLIP).abs() < 1e-9, "{m_norm}");
        assert!((m[0] / m[1] - 0.75).abs() < 1e-9, "{m:?}");
    }

    #[test]
    fn non_finite_gradients_leave_state_untouched() {
        let mut params = store(vec![1.0]);
        let mut adam = Adam::new(&params, 0.1, 0.9, 0.98).unwrap();
        let err = adam.step(&mut params, &[vec![f64::NAN]]).unwrap_err();
        assert_eq!(err.category(), "non-finite");
        assert_eq!(params.at(0).data[0], 1.0);
        assert_eq!(adam.t, 0);
        assert_eq!(adam.m[0][0], 0.0);
    }

    #[test]
    fn rejects_bad_settings() {
        let params = store(vec![0.0]);
        assert!(Adam::new(&params, 0.0, 0.9, 0.98).is_err());
        assert!(Adam::new(&params, 0.1, 1.0, 0.98).is_err());
        assert!(Adam::new(&params, 0.1, 0.9, -0.1).is_err());
    }
}
