//! A stack of SSL units: `3 × 3` neighbourhood construction followed by a
//! Saab transform, with 2×2 max pooling between consecutive units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result, StageExt};
use crate::saab::{apply_saab, count_params, fit_saab, SaabKernelBank};
use crate::scalar::Scalar;
use crate::tensor::{extract_patches, max_pool, FeatureMap, PatchMatrix};

pub const DEFAULT_KERNELS: [usize; 4] = [5, 10, 30, 100];
pub const DEFAULT_MAX_FIT_ROWS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    /// `F_1 … F_I`; the number of units is the length.
    pub kernels_per_unit: Vec<usize>,
    pub window: usize,
    /// Upper bound on patch rows used to fit one bank.
    pub max_fit_rows: usize,
    /// Hold fitted parameters at `f32` precision.
    pub f32_params: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            kernels_per_unit: DEFAULT_KERNELS.to_vec(),
            window: 3,
            max_fit_rows: DEFAULT_MAX_FIT_ROWS,
            f32_params: true,
        }
    }
}

impl CascadeConfig {
    /// Default kernel counts for `units` SSL units. Units past the fourth
    /// reuse the last default width.
    pub fn with_units(units: usize) -> Self {
        let kernels = (0..units)
            .map(|i| DEFAULT_KERNELS[i.min(DEFAULT_KERNELS.len() - 1)])
            .collect();
        Self {
            kernels_per_unit: kernels,
            ..Self::default()
        }
    }

    pub fn num_units(&self) -> usize {
        self.kernels_per_unit.len()
    }

    /// Patch dimension seen by each unit.
    pub fn input_dims(&self) -> Vec<usize> {
        let k2 = self.window * self.window;
        let mut prev = 1;
        self.kernels_per_unit
            .iter()
            .map(|&f| {
                let d = k2 * prev;
                prev = f;
                d
            })
            .collect()
    }

    pub fn total_channels(&self) -> usize {
        self.kernels_per_unit.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels_per_unit.is_empty() {
            return Err(Error::invalid("cascade needs at least one unit"));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!("window must be odd, got {}", self.window)));
        }
        if self.max_fit_rows == 0 {
            return Err(Error::invalid("max_fit_rows must be positive"));
        }
        for (i, (&f, d)) in self.kernels_per_unit.iter().zip(self.input_dims()).enumerate() {
            if f < 2 || f > d {
                return Err(Error::invalid(format!(
                    "unit {} has {f} kernels but patch dimension {d} (need 2 <= F <= {d})",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Checks that an `h × w` input survives `I − 1` halvings and stays at
    /// least one window wide.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        let halvings = self.num_units() - 1;
        let div = 1usize << halvings;
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "{h}x{w} input is not divisible by 2^{halvings} for {} units",
                self.num_units()
            )));
        }
        if h / div < self.window || w / div < self.window {
            return Err(Error::invalid(format!(
                "{h}x{w} input shrinks below the {0}x{0} window after {halvings} poolings",
                self.window
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel<T> {
    pub config: CascadeConfig,
    pub banks: Vec<SaabKernelBank<T>>,
    /// Training image size `(H, W)`.
    pub input_shape: (usize, usize),
}

impl<T: Scalar> CascadeModel<T> {
    pub fn param_count(&self) -> usize {
        count_params(&self.banks)
    }

    /// Output shape `(H, W, C)` of every unit.
    pub fn output_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (h, w) = self.input_shape;
        self.banks
            .iter()
            .enumerate()
            .map(|(i, b)| (h >> i, w >> i, b.num_kernels()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.config.validate_input(self.input_shape.0, self.input_shape.1)?;
        if self.banks.len() != self.config.num_units() {
            return Err(Error::invalid("bank count does not match unit count"));
        }
        for ((bank, &f), d) in self
            .banks
            .iter()
            .zip(&self.config.kernels_per_unit)
            .zip(self.config.input_dims())
        {
            if bank.num_kernels() != f || bank.input_dim() != d {
                return Err(Error::invalid(format!(
                    "bank shape F={} D={} does not match config F={f} D={d}",
                    bank.num_kernels(),
                    bank.input_dim()
                )));
            }
        }
        Ok(())
    }
}

fn gather_rows<T: Scalar>(all: &[PatchMatrix<T>], keep: &[usize]) -> Result<PatchMatrix<T>> {
    let cols = all[0].cols();
    let mut offsets = Vec::with_capacity(all.len());
    let mut total = 0;
    for p in all {
        offsets.push(total);
        total += p.rows();
    }
    let mut data = Vec::with_capacity(keep.len() * cols);
    let mut img = 0;
    for &g in keep {
        while img + 1 < all.len() && offsets[img + 1] <= g {
            img += 1;
        }
        data.extend_from_slice(all[img].row(g - offsets[img]));
    }
    PatchMatrix::new(keep.len(), cols, data, (keep.len(), 1, cols))
}

fn concat_rows<T: Scalar>(all: &[PatchMatrix<T>]) -> Result<PatchMatrix<T>> {
    let cols = all[0].cols();
    let rows: usize = all.iter().map(PatchMatrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in all {
        data.extend_from_slice(p.data());
    }
    PatchMatrix::new(rows, cols, data, (rows, 1, cols))
}

/// Fits every unit in turn on the outputs of the previous units across all
/// training images.
pub fn fit_cascade<T: Scalar>(images: &[FeatureMap<T>], config: &CascadeConfig, seed: u64) -> Result<CascadeModel<T>> {
    config.validate()?;
    let first = images.first().ok_or_else(|| Error::invalid("no training images"))?;
    let (h, w, c) = first.shape();
    if c != 1 {
        return Err(Error::invalid(format!("cascade input must be single-channel, got {c}")));
    }
    if let Some(img) = images.iter().find(|m| m.shape() != (h, w, 1)) {
        return Err(Error::invalid(format!(
            "training images differ in shape: {:?} vs {:?}",
            img.shape(),
            (h, w, 1)
        )));
    }
    config.validate_input(h, w)?;

    let mut banks = Vec::with_capacity(config.num_units());
    let mut current: Vec<FeatureMap<T>> = images.to_vec();
    for (unit, &kernels) in config.kernels_per_unit.iter().enumerate() {
        if unit > 0 {
            current = current.par_iter().map(max_pool).collect::<Result<_>>()?;
        }
        let patches: Vec<PatchMatrix<T>> = current
            .par_iter()
            .map(|m| extract_patches(m, config.window))
            .collect::<Result<_>>()?;
        let total: usize = patches.iter().map(PatchMatrix::rows).sum();
        let fit_rows = if total > config.max_fit_rows {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(unit as u64));
            let mut keep = rand::seq::index::sample(&mut rng, total, config.max_fit_rows).into_vec();
            keep.sort_unstable();
            gather_rows(&patches, &keep)?
        } else {
            concat_rows(&patches)?
        };
        let mut bank = fit_saab(&fit_rows, kernels).stage("fit saab unit")?;
        drop(fit_rows);
        if config.f32_params {
            bank = bank.rounded_to_f32();
        }
        // Recalibrate against every training row, not just the fitting sample.
        let bias = patches
            .par_iter()
            .map(|p| bank.max_abs_response(p))
            .collect::<Result<Vec<T>>>()?
            .into_iter()
            .fold(T::zero(), T::max);
        bank = bank.with_bias(bias)?;
        if config.f32_params {
            bank = bank.rounded_to_f32();
        }
        current = patches.par_iter().map(|p| apply_saab(&bank, p)).collect::<Result<_>>()?;
        banks.push(bank);
    }
    Ok(CascadeModel {
        config: config.clone(),
        banks,
        input_shape: (h, w),
    })
}

/// Runs one image through the cascade, returning `[f_1, …, f_I]`.
pub fn transform_cascade<T: Scalar>(model: &CascadeModel<T>, image: &FeatureMap<T>) -> Result<Vec<FeatureMap<T>>> {
    let (h, w) = model.input_shape;
    if image.shape() != (h, w, 1) {
        return Err(Error::invalid(format!(
            "image shape {:?} does not match cascade input {:?}",
            image.shape(),
            (h, w, 1)
        )));
    }
    let mut outputs: Vec<FeatureMap<T>> = Vec::with_capacity(model.banks.len());
    for (unit, bank) in model.banks.iter().enumerate() {
        let input = match outputs.last() {
            None => image.clone(),
            Some(prev) => max_pool(prev)?,
        };
        debug_assert!(unit == 0 || input.height() == h >> unit);
        let patches = extract_patches(&input, model.config.window)?;
        outputs.push(apply_saab(bank, &patches)?);
    }
    Ok(outputs)
}
