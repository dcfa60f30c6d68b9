//! Minimal dense-array engine with reverse-mode automatic differentiation.
//!
//! The primitive set is exactly what the transformer needs: matrix multiply,
//! adds, row-wise affine, relu, dropout, masked softmax, layer norm,
//! embedding gather, slicing/concatenation and cross-entropy.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod scalar;

pub use gradcheck::{grad_check, rel_error, GradCheckReport};
pub use graph::{Graph, TensorId};
pub use scalar::Scalar;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(2, 3, vec![1.0; 6]);
        let b = g.constant(3, 4, vec![1.0; 12]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), (2, 4));
        assert!(g.value(c).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(2, 3, vec![0.0; 6]);
        let b = g.constant(4, 2, vec![0.0; 8]);
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("2x3"));
    }

    #[test]
    fn softmax_all_equal_is_uniform() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(1, 5, vec![2.5; 5]);
        let s = g.softmax_rows(a, None).unwrap();
        for &v in g.value(s) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(1, 3, vec![1.0, 2.0, 3.0]);
        let s = g.softmax_rows(a, Some(vec![true; 3])).unwrap();
        assert!(g.value(s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_of_confident_match_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        // Logits so peaked the softmax is 1 at the target up to rounding.
        let a = g.constant(1, 3, vec![100.0, 0.0, 0.0]);
        let l = g.cross_entropy(a, &[Some(0)]).unwrap();
        assert!(g.scalar_value(l).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(3, 1, vec![1.0, 2.0, 3.0], true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.grad(s).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_of_dot_is_2x() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(1, 2, vec![1.0, 2.0], true);
        let d = g.matmul_nt(x, x).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.scalar_value(d), 5.0);
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut g: Graph<f64> = Graph::new();
        assert!(g.backward(TensorId(0)).is_err());
        let x = g.leaf(2, 2, vec![0.0; 4], true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradient_accumulation_is_additive() {
        // backward over (loss1 + loss2) equals separate backwards summed
        let xv = vec![0.3, -0.7, 1.2];
        let single = |which: u8| -> Vec<f64> {
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(1, 3, xv.clone(), true);
            let loss = match which {
                0 => g.sum_all(x),
                _ => g.matmul_nt(x, x).unwrap(),
            };
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(1, 3, xv.clone(), true);
        let l1 = g.sum_all(x);
        let l2 = g.matmul_nt(x, x).unwrap();
        let total = g.add(l1, l2).unwrap();
        g.backward(total).unwrap();
        let combined = g.grad(x).unwrap().to_vec();
        let (a, b) = (single(0), single(1));
        for i in 0..3 {
            assert!((combined[i] - (a[i] + b[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_identity_sum_is_exact() {
        let rep = grad_check(
            |g, x| Ok(g.sum_all(x)),
            &[0.5f64, -1.5, 2.0],
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-9, "err {}", rep.max_rel_error);
    }

    #[test]
    fn grad_check_rejects_zero_step() {
        let err = grad_check(|g, x| Ok(g.sum_all(x)), &[1.0f64], 0.0).unwrap_err();
        assert!(err.to_string().contains("step"));
    }

    /// Every primitive against finite differences on randomized shapes.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0usize;
        for trial in 0..100 {
            let m = rng.gen_range(1..5usize);
            let k = rng.gen_range(1..5usize);
            let n = rng.gen_range(1..5usize);
            let which = trial % 10;
            let aux = rand_vec(&mut rng, 64);
            let mask: Vec<bool> = (0..25).map(|_| rng.gen_bool(0.3)).collect();
            let drop_mask: Vec<f64> = (0..64)
                .map(|_| if rng.gen_bool(0.2) { 0.0 } else { 1.25 })
                .collect();
            let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(0..m)).collect();
            let dims = (m, k, n);
            let build = move |g: &mut Graph<f64>, x: graph::TensorId| {
                let (m, k, n) = dims;
                match which {
                    0 => {
                        // matmul: x reshaped (m,k) times constant (k,n)
                        let xr = g.slice(x, 0, m * k, 0, 1)?;
                        let xr = reshape(g, xr, m, k)?;
                        let b = g.constant(k, n, aux[..k * n].to_vec());
                        let y = g.matmul(xr, b)?;
                        Ok(g.sum_all(y))
                    }
                    1 => {
                        let xr = reshape_prefix(g, x, m, k)?;
                        let b = g.constant(n, k, aux[..n * k].to_vec());
                        let y = g.matmul_nt(xr, b)?;
                        let y2 = quadratic(g, y);
                        Ok(y2)
                    }
                    2 => {
                        let xr = reshape_prefix(g, x, m, n)?;
                        let b = g.constant(m, n, aux[..m * n].to_vec());
                        let y = g.add(xr, b)?;
                        Ok(quadratic(g, y))
                    }
                    3 => {
                        let xr = reshape_prefix(g, x, m, n)?;
                        let bias = g.constant(1, n, aux[..n].to_vec());
                        let y = g.add_row(xr, bias)?;
                        Ok(quadratic(g, y))
                    }
                    4 => {
                        let xr = reshape_prefix(g, x, m, n)?;
                        let gain = g.constant(1, n, aux[..n].to_vec());
                        let y = g.mul_row(xr, gain)?;
                        Ok(quadratic(g, y))
                    }
                    5 => {
                        let xr = reshape_prefix(g, x, m, n)?;
                        let y = g.scale(xr, 1.7);
                        let y = g.relu(y);
                        let y = g.dropout(y, drop_mask[..m * n].to_vec())?;
                        Ok(quadratic(g, y))
                    }
                    6 => {
                        let xr = reshape_prefix(g, x, 5, 5)?;
                        let y = g.softmax_rows(xr, Some(mask.clone()))?;
                        Ok(quadratic(g, y))
                    }
                    7 => {
                        let xr = reshape_prefix(g, x, m, 7)?;
                        let y = g.layernorm_rows(xr);
                        Ok(quadratic(g, y))
                    }
                    8 => {
                        let xr = reshape_prefix(g, x, m, n)?;
                        let y = g.gather(xr, &ids)?;
                        Ok(quadratic(g, y))
                    }
                    _ => {
                        let xr = reshape_prefix(g, x, 3, 4)?;
                        let t = vec![Some(1), None, Some(3)];
                        g.cross_entropy(xr, &t)
                    }
                }
            };
            let len = match which {
                0 | 1 => m * k,
                6 => 25,
                7 => m * 7,
                9 => 12,
                _ => m * n,
            };
            let point = rand_vec(&mut rng, len);
            let rep = grad_check(build, &point, 1e-6).unwrap();
            assert!(
                rep.max_rel_error < 1e-7,
                "primitive {which} trial {trial}: err {} at {}",
                rep.max_rel_error,
                rep.worst_coord
            );
            checked += 1;
        }
        assert_eq!(checked, 100);
    }

    // Column vector (len,1) -> (rows, cols) view by slicing rows then
    // concatenating; exercises slice/concat in the same sweep.
    fn reshape(g: &mut Graph<f64>, x: TensorId, rows: usize, cols: usize) -> crate::error::Result<TensorId> {
        let mut parts = Vec::new();
        for r in 0..rows {
            let s = g.slice(x, r * cols, cols, 0, 1)?;
            // (cols,1) -> (1,cols) via gather trickery is overkill; use slice
            // of a transposed layout instead: emulate with concat_cols of
            // 1x1 slices.
            let mut cells = Vec::new();
            for c in 0..cols {
                cells.push(g.slice(s, c, 1, 0, 1)?);
            }
            parts.push(g.concat_cols(&cells)?);
        }
        g.concat_rows(&parts)
    }

    fn reshape_prefix(
        g: &mut Graph<f64>,
        x: TensorId,
        rows: usize,
        cols: usize,
    ) -> crate::error::Result<TensorId> {
        reshape(g, x, rows, cols)
    }

    // sum of squares via matmul_nt against itself after flattening rows
    fn quadratic(g: &mut Graph<f64>, y: TensorId) -> TensorId {
        let (m, _) = g.shape(y);
        let mut acc = None;
        for r in 0..m {
            let row = g.slice(y, r, 1, 0, g.shape(y).1).unwrap();
            let sq = g.matmul_nt(row, row).unwrap();
            acc = Some(match acc {
                None => sq,
                Some(a) => g.add(a, sq).unwrap(),
            });
        }
        acc.unwrap()
    }

    #[test]
    fn determinism_same_inputs_same_values() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(4, 4, rand_vec(&mut rng, 16), true);
            let w = g.leaf(4, 4, rand_vec(&mut rng, 16), true);
            let y = g.matmul(x, w).unwrap();
            let y = g.layernorm_rows(y);
            let y = g.softmax_rows(y, None).unwrap();
            let l = g.cross_entropy(y, &[Some(0), Some(1), None, Some(3)]).unwrap();
            g.scalar_value(l).to_bits()
        };
        assert_eq!(run(), run());
    }
}
