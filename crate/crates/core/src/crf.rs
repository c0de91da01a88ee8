//! Mean-field inference on a grid CRF with Potts compatibility.
//!
//! Unaries are `−ln p` of the classifier output. Two Gaussian pairwise
//! kernels couple pixels: a spatial one (exact, separable, truncated at
//! `3σ`) and an appearance one over position and intensity. The appearance
//! kernel is wide, so it is evaluated on a bilateral grid sampled at a
//! quarter of each sigma. Messages are normalised by the kernel mass
//! around each pixel (self excluded), which keeps the pairwise weights on
//! the same scale as the unaries regardless of neighbourhood size.
//!
//! Updates are synchronous and damped:
//!
//! ```text
//! Q ← (1 − δ)·Q + δ·softmax(−U + w_s·S(Q) + w_a·B(Q)),   δ = 0.5
//! ```

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, LabelMap};
use crate::NUM_CLASSES;

pub const DAMPING: f64 = 0.5;
pub const UNARY_CLAMP: f64 = 1e-10;
/// Bilateral grid spacing, as a fraction of the corresponding sigma.
const GRID_SAMPLING: f64 = 0.25;
const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CrfConfig {
    pub iterations: usize,
    pub spatial_weight: f64,
    pub appearance_weight: f64,
    pub spatial_sigma: f64,
    pub appearance_sigma_xy: f64,
    /// In units of the per-slice min–max intensity range.
    pub appearance_sigma_intensity: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            spatial_weight: 3.0,
            appearance_weight: 5.0,
            spatial_sigma: 3.0,
            appearance_sigma_xy: 30.0,
            appearance_sigma_intensity: 0.1,
        }
    }
}

impl CrfConfig {
    /// A configuration that leaves the classifier output untouched.
    pub fn disabled() -> Self {
        Self {
            iterations: 0,
            spatial_weight: 0.0,
            appearance_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.iterations == 0 || (self.spatial_weight == 0.0 && self.appearance_weight == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.spatial_weight, self.appearance_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("CRF weights must be finite and non-negative"));
        }
        let sigmas = [
            self.spatial_sigma,
            self.appearance_sigma_xy,
            self.appearance_sigma_intensity,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("CRF sigmas must be finite and positive"));
        }
        Ok(())
    }
}

/// Per-pixel argmax, ties to the lowest class index.
pub fn argmax_labels<T: Scalar>(probs: &FeatureMap<T>) -> LabelMap {
    let data = probs.data().chunks_exact(probs.channels()).map(argmax).collect();
    LabelMap::new(probs.height(), probs.width(), data).expect("argmax stays in class range")
}

fn argmax<T: Scalar>(p: &[T]) -> u8 {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best as u8
}

fn check_inputs<T: Scalar>(probs: &FeatureMap<T>, image: &FeatureMap<T>) -> Result<()> {
    let (h, w, c) = probs.shape();
    if c != NUM_CLASSES {
        return Err(Error::invalid(format!("expected {NUM_CLASSES} probability channels, got {c}")));
    }
    if image.shape() != (h, w, 1) {
        return Err(Error::invalid(format!(
            "image shape {:?} does not match probabilities {h}x{w}",
            image.shape()
        )));
    }
    for (i, px) in probs.data().chunks_exact(c).enumerate() {
        let sum: f64 = px.iter().map(|v| v.as_f64()).sum();
        if px.iter().any(|v| *v < T::zero()) || (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!(
                "pixel {i} is not a probability distribution (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Refined label map.
pub fn mean_field_refine<T: Scalar>(probs: &FeatureMap<T>, image: &FeatureMap<T>, config: &CrfConfig) -> Result<LabelMap> {
    config.validate()?;
    check_inputs(probs, image)?;
    if config.is_identity() {
        return Ok(argmax_labels(probs));
    }
    let q = run_mean_field(probs, image, config);
    Ok(argmax_labels(&q))
}

/// Marginals after `config.iterations` updates.
pub fn mean_field_marginals<T: Scalar>(
    probs: &FeatureMap<T>,
    image: &FeatureMap<T>,
    config: &CrfConfig,
) -> Result<FeatureMap<f64>> {
    config.validate()?;
    check_inputs(probs, image)?;
    Ok(run_mean_field(probs, image, config))
}

fn run_mean_field<T: Scalar>(probs: &FeatureMap<T>, image: &FeatureMap<T>, config: &CrfConfig) -> FeatureMap<f64> {
    let (h, w, _) = probs.shape();
    let n = h * w;
    let neg_unary: Vec<f64> = probs
        .data()
        .iter()
        .map(|v| v.as_f64().max(UNARY_CLAMP).ln())
        .collect();
    let mut q: Vec<f64> = neg_unary
        .chunks_exact(NUM_CLASSES)
        .flat_map(softmax)
        .collect();

    let spatial = (config.spatial_weight > 0.0).then(|| SpatialFilter::new(h, w, config.spatial_sigma));
    let bilateral = (config.appearance_weight > 0.0).then(|| {
        BilateralGrid::new(
            &normalized_intensity(image),
            h,
            w,
            config.appearance_sigma_xy,
            config.appearance_sigma_intensity,
        )
    });

    for _ in 0..config.iterations {
        let planes: Vec<Vec<f64>> = (0..NUM_CLASSES)
            .map(|l| q.iter().skip(l).step_by(NUM_CLASSES).copied().collect())
            .collect();
        let s_msg: Option<Vec<Vec<f64>>> = spatial
            .as_ref()
            .map(|f| planes.par_iter().map(|p| f.message(p)).collect());
        let b_msg: Option<Vec<Vec<f64>>> = bilateral
            .as_ref()
            .map(|g| planes.par_iter().map(|p| g.message(p)).collect());
        let mut next = vec![0.0; n * NUM_CLASSES];
        next.par_chunks_mut(NUM_CLASSES).enumerate().for_each(|(i, out)| {
            let mut logits = [0.0; NUM_CLASSES];
            for l in 0..NUM_CLASSES {
                let mut v = neg_unary[i * NUM_CLASSES + l];
                if let Some(s) = &s_msg {
                    v += config.spatial_weight * s[l][i];
                }
                if let Some(b) = &b_msg {
                    v += config.appearance_weight * b[l][i];
                }
                logits[l] = v;
            }
            let target = softmax(&logits);
            for l in 0..NUM_CLASSES {
                out[l] = (1.0 - DAMPING) * q[i * NUM_CLASSES + l] + DAMPING * target[l];
            }
        });
        q = next;
    }
    FeatureMap::new(h, w, NUM_CLASSES, q).expect("marginals stay finite")
}

fn softmax(logits: &[f64]) -> [f64; NUM_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Rescales intensities to `[0, 1]` by the slice's min and max.
fn normalized_intensity<T: Scalar>(image: &FeatureMap<T>) -> Vec<f64> {
    let vals: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        vals.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; vals.len()]
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// 1-D correlation of `len` samples spaced by `stride` starting at `base`,
/// zero outside.
fn convolve_line(src: &[f64], dst: &mut [f64], base: usize, stride: usize, len: usize, taps: &[f64]) {
    let r = (taps.len() / 2) as isize;
    for i in 0..len as isize {
        let mut acc = 0.0;
        let lo = (i - r).max(0);
        let hi = (i + r).min(len as isize - 1);
        for j in lo..=hi {
            acc += taps[(j - i + r) as usize] * src[base + j as usize * stride];
        }
        dst[base + i as usize * stride] = acc;
    }
}

/// Exact separable Gaussian over the pixel grid.
struct SpatialFilter {
    h: usize,
    w: usize,
    taps: Vec<f64>,
    /// Kernel mass around each pixel excluding the pixel itself.
    mass: Vec<f64>,
}

impl SpatialFilter {
    fn new(h: usize, w: usize, sigma: f64) -> Self {
        let taps = gaussian_taps(sigma);
        let mut f = Self {
            h,
            w,
            taps,
            mass: Vec::new(),
        };
        f.mass = f.blur(&vec![1.0; h * w]).into_iter().map(|v| v - 1.0).collect();
        f
    }

    fn blur(&self, plane: &[f64]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            convolve_line(plane, &mut tmp, y * w, 1, w, &self.taps);
        }
        let mut out = vec![0.0; h * w];
        for x in 0..w {
            convolve_line(&tmp, &mut out, x, w, h, &self.taps);
        }
        out
    }

    /// Kernel-weighted neighbour average of `plane`, self excluded.
    fn message(&self, plane: &[f64]) -> Vec<f64> {
        self.blur(plane)
            .into_iter()
            .zip(plane)
            .zip(&self.mass)
            .map(|((b, &own), &m)| if m > 1e-12 { (b - own) / m } else { 0.0 })
            .collect()
    }
}

/// Trilinear splat/blur/slice approximation of the bilateral kernel
/// `exp(−|Δp|²/2σ_xy² − ΔI²/2σ_I²)`.
struct BilateralGrid {
    dims: [usize; 3],
    taps: [Vec<f64>; 3],
    /// Eight `(cell, weight)` pairs per pixel.
    corners: Vec<[(usize, f64); 8]>,
    self_weight: Vec<f64>,
    mass: Vec<f64>,
}

impl BilateralGrid {
    fn new(intensity: &[f64], h: usize, w: usize, sigma_xy: f64, sigma_i: f64) -> Self {
        let step_xy = (sigma_xy * GRID_SAMPLING).max(1.0);
        let step_i = sigma_i * GRID_SAMPLING;
        let ny = ((h - 1) as f64 / step_xy).floor() as usize + 2;
        let nx = ((w - 1) as f64 / step_xy).floor() as usize + 2;
        let nz = (1.0 / step_i).floor() as usize + 2;
        let dims = [ny, nx, nz];
        let cell_sigma_xy = sigma_xy / step_xy;
        let cell_sigma_i = sigma_i / step_i;
        let taps = [
            gaussian_taps(cell_sigma_xy),
            gaussian_taps(cell_sigma_xy),
            gaussian_taps(cell_sigma_i),
        ];

        let corners: Vec<[(usize, f64); 8]> = (0..h * w)
            .map(|p| {
                let coords = [
                    (p / w) as f64 / step_xy,
                    (p % w) as f64 / step_xy,
                    intensity[p] / step_i,
                ];
                let base: Vec<usize> = coords.iter().map(|c| c.floor() as usize).collect();
                let frac: Vec<f64> = coords.iter().zip(&base).map(|(c, &b)| c - b as f64).collect();
                let mut out = [(0usize, 0.0f64); 8];
                for (k, slot) in out.iter_mut().enumerate() {
                    let mut idx = [0usize; 3];
                    let mut weight = 1.0;
                    for d in 0..3 {
                        let bit = (k >> d) & 1;
                        idx[d] = (base[d] + bit).min(dims[d] - 1);
                        weight *= if bit == 1 { frac[d] } else { 1.0 - frac[d] };
                    }
                    *slot = ((idx[0] * nx + idx[1]) * nz + idx[2], weight);
                }
                out
            })
            .collect();

        let cell_kernel = |a: usize, b: usize| -> f64 {
            let (ay, ax, az) = (a / (nx * nz), (a / nz) % nx, a % nz);
            let (by, bx, bz) = (b / (nx * nz), (b / nz) % nx, b % nz);
            let tap = |t: &Vec<f64>, d: isize| {
                let r = (t.len() / 2) as isize;
                if d.abs() > r {
                    0.0
                } else {
                    t[(d + r) as usize]
                }
            };
            tap(&taps[0], ay as isize - by as isize)
                * tap(&taps[1], ax as isize - bx as isize)
                * tap(&taps[2], az as isize - bz as isize)
        };
        let self_weight = corners
            .iter()
            .map(|c| {
                let mut s = 0.0;
                for &(a, wa) in c {
                    for &(b, wb) in c {
                        s += wa * wb * cell_kernel(a, b);
                    }
                }
                s
            })
            .collect();

        let mut grid = Self {
            dims,
            taps,
            corners,
            self_weight,
            mass: Vec::new(),
        };
        let ones = vec![1.0; h * w];
        grid.mass = grid
            .filter(&ones)
            .into_iter()
            .zip(&grid.self_weight)
            .map(|(v, s)| v - s)
            .collect();
        grid
    }

    fn filter(&self, plane: &[f64]) -> Vec<f64> {
        let [ny, nx, nz] = self.dims;
        let mut cells = vec![0.0; ny * nx * nz];
        for (c, &v) in self.corners.iter().zip(plane) {
            for &(idx, wt) in c {
                cells[idx] += wt * v;
            }
        }
        let mut tmp = vec![0.0; cells.len()];
        for y in 0..ny {
            for x in 0..nx {
                convolve_line(&cells, &mut tmp, (y * nx + x) * nz, 1, nz, &self.taps[2]);
            }
        }
        for y in 0..ny {
            for z in 0..nz {
                convolve_line(&tmp, &mut cells, y * nx * nz + z, nz, nx, &self.taps[1]);
            }
        }
        for x in 0..nx {
            for z in 0..nz {
                convolve_line(&cells, &mut tmp, x * nz + z, nx * nz, ny, &self.taps[0]);
            }
        }
        self.corners
            .iter()
            .map(|c| c.iter().map(|&(idx, wt)| wt * tmp[idx]).sum())
            .collect()
    }

    fn message(&self, plane: &[f64]) -> Vec<f64> {
        self.filter(plane)
            .into_iter()
            .zip(plane)
            .zip(self.self_weight.iter().zip(&self.mass))
            .map(|((b, &own), (&s, &m))| if m > 1e-12 { (b - s * own) / m } else { 0.0 })
            .collect()
    }
}
