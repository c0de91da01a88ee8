//! Cyclic Jacobi eigensolver for small dense symmetric matrices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
///
/// Ties keep the original diagonal order. Every eigenvector is scaled so that
/// its largest-magnitude entry (first one, on ties) is positive.
#[derive(Clone, Debug)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    /// `vectors[i]` is the unit eigenvector for `values[i]`.
    pub vectors: Vec<Vec<T>>,
}

/// Diagonalises the row-major symmetric `n × n` matrix `a` by cyclic Jacobi
/// rotations, sweeping pairs `(p, q)` in fixed row order until the
/// off-diagonal mass drops below machine precision.
pub fn symmetric_eigen<T: Scalar>(a: &[T], n: usize) -> Result<SymmetricEigen<T>> {
    if n == 0 || a.len() != n * n {
        return Err(Error::invalid(format!("expected a non-empty {n}x{n} matrix")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let mut m = a.to_vec();
    // Rotations accumulate into the rows of `vt`, the transposed eigenvector
    // matrix, so every update touches contiguous memory.
    let mut vt = vec![T::zero(); n * n];
    for i in 0..n {
        vt[i * n + i] = T::one();
    }

    let frob: T = m.iter().map(|&x| x * x).sum::<T>();
    let tol = T::epsilon() * T::epsilon() * frob;
    let mut converged = false;
    let mut row_p = vec![T::zero(); n];
    let mut row_q = vec![T::zero(); n];
    for _ in 0..MAX_SWEEPS {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off <= tol || off == T::zero() {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let two = T::lit(2.0);
                let tau = (aqq - app) / (two * apq);
                let t = if tau >= T::zero() {
                    T::one() / (tau + (T::one() + tau * tau).sqrt())
                } else {
                    -T::one() / (-tau + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                // The matrix stays symmetric: rotate rows p and q, then
                // mirror them into columns p and q.
                row_p.copy_from_slice(&m[p * n..(p + 1) * n]);
                row_q.copy_from_slice(&m[q * n..(q + 1) * n]);
                for k in 0..n {
                    let (mpk, mqk) = (row_p[k], row_q[k]);
                    row_p[k] = c * mpk - s * mqk;
                    row_q[k] = s * mpk + c * mqk;
                }
                row_p[p] = app - t * apq;
                row_q[q] = aqq + t * apq;
                row_p[q] = T::zero();
                row_q[p] = T::zero();
                m[p * n..(p + 1) * n].copy_from_slice(&row_p);
                m[q * n..(q + 1) * n].copy_from_slice(&row_q);
                for k in 0..n {
                    m[k * n + p] = row_p[k];
                    m[k * n + q] = row_q[k];
                }
                let (lo, hi) = vt.split_at_mut(q * n);
                let (vp, vq) = (&mut lo[p * n..(p + 1) * n], &mut hi[..n]);
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let diag: Vec<T> = (0..n).map(|i| m[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).expect("finite eigenvalues"));

    let values = order.iter().map(|&i| diag[i]).collect();
    let vectors = order
        .iter()
        .map(|&col| {
            let mut vec: Vec<T> = vt[col * n..(col + 1) * n].to_vec();
            canonical_sign(&mut vec);
            vec
        })
        .collect();
    Ok(SymmetricEigen { values, vectors })
}

/// Flips `v` so its largest-magnitude entry is positive.
pub(crate) fn canonical_sign<T: Scalar>(v: &mut [T]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < T::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reconstruct(e: &SymmetricEigen<f64>, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for (lam, vec) in e.values.iter().zip(&e.vectors) {
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] += lam * vec[i] * vec[j];
                }
            }
        }
        out
    }

    #[test]
    fn two_by_two_closed_form() {
        // [[2,1],[1,2]] has eigenpairs 3:(1,1)/√2 and 1:(1,-1)/√2.
        let e = symmetric_eigen(&[2.0f64, 1.0, 1.0, 2.0], 2).unwrap();
        let r = 0.5f64.sqrt();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        assert!((e.vectors[0][0] - r).abs() < 1e-14 && (e.vectors[0][1] - r).abs() < 1e-14);
        // Sign rule: the first of the two equal-magnitude entries is positive.
        assert!((e.vectors[1][0] - r).abs() < 1e-14 && (e.vectors[1][1] + r).abs() < 1e-14);
    }

    #[test]
    fn diagonal_ties_keep_index_order() {
        let e = symmetric_eigen(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3).unwrap();
        assert_eq!(e.vectors[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(e.vectors[1], vec![0.0, 1.0, 0.0]);
        assert_eq!(e.vectors[2], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(symmetric_eigen::<f64>(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(matches!(
            symmetric_eigen(&[f64::NAN], 1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn works_in_f32() {
        let e = symmetric_eigen(&[4.0f32, 1.0, 1.0, 3.0], 2).unwrap();
        let expected = 3.5 + 1.25f32.sqrt();
        assert!((e.values[0] - expected).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn reconstructs_random_symmetric(n in 1usize..12, seed in proptest::collection::vec(-5.0f64..5.0, 144)) {
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    a[i * n + j] = seed[i * 12 + j];
                    a[j * n + i] = seed[i * 12 + j];
                }
            }
            let e = symmetric_eigen(&a, n).unwrap();
            let r = reconstruct(&e, n);
            for (x, y) in a.iter().zip(&r) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = (0..n).map(|k| e.vectors[i][k] * e.vectors[j][k]).sum();
                    let target = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - target).abs() < 1e-12);
                }
            }
            prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
