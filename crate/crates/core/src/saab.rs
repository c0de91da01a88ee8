//! Saab transform: one constant (DC) anchor, `F − 1` principal-component
//! (AC) anchors and a single shared bias that keeps every response on the
//! fitting data non-negative.
//!
//! For an input vector `x` of dimension `D`:
//!
//! ```text
//! f_0 = a_0 · x + b                a_0 = (1, …, 1) / √D
//! f_c = a_c · (x − μ) + b          c = 1 … F − 1
//! ```
//!
//! where `μ` is the mean of the DC-removed fitting rows and `b = d·√F`.

use rayon::prelude::*;

use crate::eigen::{canonical_sign, symmetric_eigen};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, PatchMatrix};

const COV_BLOCK_ROWS: usize = 8192;

/// Fitted anchors of one SSL unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SaabKernelBank<T> {
    input_dim: usize,
    num_kernels: usize,
    dc_anchor: Vec<T>,
    /// `(F − 1) × input_dim`, row-major.
    ac_anchors: Vec<T>,
    mean: Vec<T>,
    bias: T,
    /// Variance captured by each AC anchor on the fitting data.
    energies: Vec<T>,
}

impl<T: Scalar> SaabKernelBank<T> {
    /// Assembles a bank from stored parameters. The DC anchor is implied by
    /// `input_dim`.
    pub fn from_parts(
        input_dim: usize,
        num_kernels: usize,
        ac_anchors: Vec<T>,
        mean: Vec<T>,
        bias: T,
        energies: Vec<T>,
    ) -> Result<Self> {
        if num_kernels < 2 || num_kernels > input_dim {
            return Err(Error::invalid(format!(
                "bank needs 2 <= F <= input_dim, got F={num_kernels}, input_dim={input_dim}"
            )));
        }
        if ac_anchors.len() != (num_kernels - 1) * input_dim
            || mean.len() != input_dim
            || energies.len() != num_kernels - 1
        {
            return Err(Error::invalid("bank parameter lengths do not match its dimensions"));
        }
        if !bias.is_finite() || bias < T::zero() {
            return Err(Error::invalid(format!("bias must be finite and non-negative, got {bias}")));
        }
        if ac_anchors.iter().chain(&mean).chain(&energies).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("bank parameters contain non-finite values".into()));
        }
        Ok(Self {
            input_dim,
            num_kernels,
            dc_anchor: dc_anchor(input_dim),
            ac_anchors,
            mean,
            bias,
            energies,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_kernels(&self) -> usize {
        self.num_kernels
    }

    pub fn dc_anchor(&self) -> &[T] {
        &self.dc_anchor
    }

    pub fn ac_anchor(&self, c: usize) -> &[T] {
        &self.ac_anchors[c * self.input_dim..(c + 1) * self.input_dim]
    }

    pub fn ac_anchors(&self) -> &[T] {
        &self.ac_anchors
    }

    /// Anchor `c` with the DC anchor at index 0.
    pub fn anchor(&self, c: usize) -> &[T] {
        if c == 0 {
            &self.dc_anchor
        } else {
            self.ac_anchor(c - 1)
        }
    }

    pub fn mean_vector(&self) -> &[T] {
        &self.mean
    }

    /// Shared bias `b_c`, identical for every kernel.
    pub fn bias(&self) -> T {
        self.bias
    }

    /// The scale `d` with `b_c = d·√F`.
    pub fn bias_scale(&self) -> T {
        self.bias / T::lit(self.num_kernels as f64).sqrt()
    }

    pub fn energies(&self) -> &[T] {
        &self.energies
    }

    /// Number of trainable values: `F × input_dim` anchor weights plus `F` biases.
    pub fn param_count(&self) -> usize {
        self.num_kernels * self.input_dim + self.num_kernels
    }

    /// Largest `|a_c · x|` (with mean removal on AC anchors) over all rows,
    /// before bias.
    pub fn max_abs_response(&self, patches: &PatchMatrix<T>) -> Result<T> {
        self.check_dim(patches)?;
        let mut buf = vec![T::zero(); self.num_kernels];
        let mut best = T::zero();
        for row in patches.iter_rows() {
            self.project_into(row, &mut buf);
            for &v in &buf {
                best = best.max(v.abs());
            }
        }
        Ok(best)
    }

    /// Replaces the bias.
    pub fn with_bias(mut self, bias: T) -> Result<Self> {
        if !bias.is_finite() || bias < T::zero() {
            return Err(Error::invalid(format!("bias must be finite and non-negative, got {bias}")));
        }
        self.bias = bias;
        Ok(self)
    }

    /// Rounds AC anchors, mean and energies to `f32` precision. The bias is
    /// rounded upwards so it never shrinks.
    pub fn rounded_to_f32(mut self) -> Self {
        self.ac_anchors.iter_mut().for_each(|v| *v = v.round_f32());
        self.mean.iter_mut().for_each(|v| *v = v.round_f32());
        self.energies.iter_mut().for_each(|v| *v = v.round_f32());
        self.bias = round_up_f32(self.bias);
        self
    }

    fn check_dim(&self, patches: &PatchMatrix<T>) -> Result<()> {
        if patches.cols() != self.input_dim {
            return Err(Error::invalid(format!(
                "patch width {} does not match bank input_dim {}",
                patches.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Unbiased responses of one row.
    #[inline]
    fn project_into(&self, row: &[T], out: &mut [T]) {
        out[0] = dot(&self.dc_anchor, row);
        for (c, anchor) in self.ac_anchors.chunks_exact(self.input_dim).enumerate() {
            let mut acc = T::zero();
            for ((&a, &x), &m) in anchor.iter().zip(row).zip(&self.mean) {
                acc += a * (x - m);
            }
            out[c + 1] = acc;
        }
    }
}

fn dc_anchor<T: Scalar>(dim: usize) -> Vec<T> {
    vec![T::one() / T::lit(dim as f64).sqrt(); dim]
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn round_up_f32<T: Scalar>(v: T) -> T {
    let x = v.as_f64();
    let mut r = x as f32;
    if (r as f64) < x {
        r = r.next_up();
    }
    T::lit(r as f64)
}

/// Fits a bank of `num_kernels` anchors on the rows of `patches`.
///
/// AC anchors are the leading eigenvectors of the covariance of the
/// DC-removed, mean-centred rows. The DC direction is shifted to the bottom
/// of the spectrum before diagonalisation so that AC anchors stay orthogonal
/// to it even when the residual covariance is rank deficient.
pub fn fit_saab<T: Scalar>(patches: &PatchMatrix<T>, num_kernels: usize) -> Result<SaabKernelBank<T>> {
    let dim = patches.cols();
    let n = patches.rows();
    if num_kernels < 2 {
        return Err(Error::invalid(format!("need at least 2 kernels, got {num_kernels}")));
    }
    if num_kernels > dim {
        return Err(Error::invalid(format!(
            "{num_kernels} kernels exceed input dimension {dim}"
        )));
    }
    if n < num_kernels {
        return Err(Error::invalid(format!(
            "{n} rows are not enough to fit {num_kernels} kernels"
        )));
    }
    if patches.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("patches contain non-finite values".into()));
    }

    let dc: Vec<T> = dc_anchor(dim);
    let inv_n = T::one() / T::lit(n as f64);

    let mean_sum = block_reduce(patches, dim, |row, acc| {
        let proj = dot(&dc, row);
        for ((a, &x), &d) in acc.iter_mut().zip(row).zip(&dc) {
            *a += x - proj * d;
        }
    });
    let mean: Vec<T> = mean_sum.into_iter().map(|s| s * inv_n).collect();

    // With fewer rows than dimensions the residual covariance is rank
    // deficient; its leading eigenpairs come more cheaply from the row Gram
    // matrix.
    let gram = if n < dim {
        gram_components(patches, &dc, &mean, num_kernels - 1)?
    } else {
        None
    };
    let (ac_anchors, energies) = match gram {
        Some(parts) => parts,
        None => covariance_components(patches, &dc, &mean, num_kernels - 1)?,
    };

    let bank = SaabKernelBank {
        input_dim: dim,
        num_kernels,
        dc_anchor: dc,
        ac_anchors,
        mean,
        bias: T::zero(),
        energies,
    };
    let bias = bank.max_abs_response(patches)?;
    bank.with_bias(bias)
}

/// Leading AC anchors and energies from the explicit `D × D` covariance of
/// the DC-removed, mean-centred rows.
fn covariance_components<T: Scalar>(
    patches: &PatchMatrix<T>,
    dc: &[T],
    mean: &[T],
    count: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let dim = patches.cols();
    let inv_n = T::one() / T::lit(patches.rows() as f64);
    let cov_sum = block_reduce(patches, dim * dim, |row, acc| {
        let proj = dot(dc, row);
        let centered: Vec<T> = row
            .iter()
            .zip(dc)
            .zip(mean)
            .map(|((&x, &d), &m)| x - proj * d - m)
            .collect();
        for i in 0..dim {
            let ci = centered[i];
            let acc_row = &mut acc[i * dim..];
            for j in i..dim {
                acc_row[j] += ci * centered[j];
            }
        }
    });
    let mut cov = vec![T::zero(); dim * dim];
    for i in 0..dim {
        for j in i..dim {
            let v = cov_sum[i * dim + j] * inv_n;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("covariance has non-finite entries".into()));
    }

    let trace: T = (0..dim).map(|i| cov[i * dim + i]).sum();
    let shift = T::one() + trace;
    for i in 0..dim {
        for j in 0..dim {
            cov[i * dim + j] -= shift * dc[i] * dc[j];
        }
    }
    let eig = symmetric_eigen(&cov, dim)?;

    // The last eigenpair is the shifted DC direction; the rest must be PSD.
    let psd_tol = T::epsilon().sqrt() * shift;
    if let Some(&lowest) = eig.values[..dim - 1].last() {
        if lowest < -psd_tol {
            return Err(Error::Numeric(format!(
                "residual covariance is not positive semi-definite (eigenvalue {lowest})"
            )));
        }
    }

    let mut ac_anchors = Vec::with_capacity(count * dim);
    for v in &eig.vectors[..count] {
        ac_anchors.extend_from_slice(v);
    }
    let energies = eig.values[..count].iter().map(|&v| v.max(T::zero())).collect();
    Ok((ac_anchors, energies))
}

/// Leading AC anchors from the `N × N` Gram matrix of the residual rows,
/// mapped back through the rows. Returns `None` if a requested component
/// has no energy to normalise by.
fn gram_components<T: Scalar>(
    patches: &PatchMatrix<T>,
    dc: &[T],
    mean: &[T],
    count: usize,
) -> Result<Option<(Vec<T>, Vec<T>)>> {
    let (n, dim) = (patches.rows(), patches.cols());
    let inv_n = T::one() / T::lit(n as f64);
    let residual: Vec<Vec<T>> = (0..n)
        .map(|r| {
            let row = patches.row(r);
            let proj = dot(dc, row);
            row.iter()
                .zip(dc)
                .zip(mean)
                .map(|((&x, &d), &m)| x - proj * d - m)
                .collect()
        })
        .collect();
    let mut gram = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&residual[i], &residual[j]) * inv_n;
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let eig = symmetric_eigen(&gram, n)?;
    let trace: T = (0..n).map(|i| gram[i * n + i]).sum();
    let floor = T::epsilon().sqrt() * (T::one() + trace);
    if count > n || eig.values[count - 1] <= floor {
        return Ok(None);
    }

    let mut anchors: Vec<Vec<T>> = Vec::with_capacity(count);
    for (u, &lambda) in eig.vectors.iter().zip(&eig.values).take(count) {
        let mut v = vec![T::zero(); dim];
        for (&w, row) in u.iter().zip(&residual) {
            for (a, &x) in v.iter_mut().zip(row) {
                *a += w * x;
            }
        }
        let scale = T::one() / (T::lit(n as f64) * lambda).sqrt();
        v.iter_mut().for_each(|a| *a *= scale);
        // One Gram-Schmidt pass against the earlier anchors and the DC
        // direction removes the rounding left by the back-projection.
        for prev in anchors.iter().map(Vec::as_slice).chain(std::iter::once(dc)) {
            let d = dot(prev, &v);
            v.iter_mut().zip(prev).for_each(|(a, &p)| *a -= d * p);
        }
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        canonical_sign(&mut v);
        anchors.push(v);
    }
    let energies = eig.values[..count].to_vec();
    Ok(Some((anchors.concat(), energies)))
}

/// Sums a per-row contribution over fixed-size row blocks, then folds the
/// block partials in block order so the result does not depend on threading.
fn block_reduce<T: Scalar>(
    patches: &PatchMatrix<T>,
    len: usize,
    f: impl Fn(&[T], &mut [T]) + Sync,
) -> Vec<T> {
    let cols = patches.cols();
    let partials: Vec<Vec<T>> = patches
        .data()
        .par_chunks(COV_BLOCK_ROWS * cols)
        .map(|block| {
            let mut acc = vec![T::zero(); len];
            for row in block.chunks_exact(cols) {
                f(row, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![T::zero(); len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Applies the bank to every row, reshaping to `H × W × F` using the
/// patches' source shape.
pub fn apply_saab<T: Scalar>(bank: &SaabKernelBank<T>, patches: &PatchMatrix<T>) -> Result<FeatureMap<T>> {
    bank.check_dim(patches)?;
    let f = bank.num_kernels;
    let mut out = vec![T::zero(); patches.rows() * f];
    out.par_chunks_mut(f * 256)
        .zip(patches.data().par_chunks(patches.cols() * 256))
        .for_each(|(dst, src)| {
            for (o, row) in dst.chunks_exact_mut(f).zip(src.chunks_exact(patches.cols())) {
                bank.project_into(row, o);
                o.iter_mut().for_each(|v| *v += bank.bias);
            }
        });
    let (h, w, _) = patches.source_shape();
    FeatureMap::new(h, w, f, out)
}

/// Total parameter count over a cascade of banks.
pub fn count_params<T: Scalar>(banks: &[SaabKernelBank<T>]) -> usize {
    banks.iter().map(SaabKernelBank::param_count).sum()
}
