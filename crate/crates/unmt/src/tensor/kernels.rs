//! Raw dense matrix kernels shared by the tape ops and the no-grad
//! inference path. All matrices are row-major contiguous slices.

use super::scalar::Scalar;

/// c (m,n) += a (m,k) * b (k,n)
pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c (m,n) += a (m,k) * b(n,k)^T
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// c (k,n) += a (m,k)^T * b (m,n)
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Dot product with four accumulators; deterministic and vectorizer-friendly.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let base = i * 4;
        for l in 0..4 {
            acc[l] = acc[l] + a[base + l] * b[base + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Per-row softmax in place; `mask[i*n+j] == true` excludes an entry.
/// Fully-masked rows become all zeros.
pub fn softmax_rows_masked<T: Scalar>(x: &mut [T], rows: usize, n: usize, mask: Option<&[bool]>) {
    for i in 0..rows {
        let row = &mut x[i * n..(i + 1) * n];
        let row_mask = mask.map(|m| &m[i * n..(i + 1) * n]);
        let mut max = T::neg_infinity();
        for j in 0..n {
            let masked = row_mask.is_some_and(|m| m[j]);
            if !masked && row[j] > max {
                max = row[j];
            }
        }
        if max == T::neg_infinity() {
            for v in row.iter_mut() {
                *v = T::zero();
            }
            continue;
        }
        let mut sum = T::zero();
        for j in 0..n {
            let masked = row_mask.is_some_and(|m| m[j]);
            row[j] = if masked { T::zero() } else { (row[j] - max).exp() };
            sum = sum + row[j];
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Per-row layer normalization (no affine). Returns cached (mean, rstd) pairs.
pub fn layernorm_rows<T: Scalar>(x: &[T], out: &mut [T], rows: usize, n: usize, eps: T) -> Vec<(T, T)> {
    let mut stats = Vec::with_capacity(rows);
    let inv_n = T::one() / T::from_usize(n);
    for i in 0..rows {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        let orow = &mut out[i * n..(i + 1) * n];
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        stats.push((mean, rstd));
    }
    stats
}
