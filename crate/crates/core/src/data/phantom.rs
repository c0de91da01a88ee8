//! Synthetic short-axis cardiac phantoms with exact labels.
//!
//! Each phantom has an elliptical LV cavity, a myocardial ring around it,
//! and an RV crescent hugging the left side of the ring. Class-mean
//! intensities receive i.i.d. Gaussian noise; labels are noise-free.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use std::path::Path;

use crate::data::manifest::{split_manifest, DatasetManifest, SliceRecord, Split};
use crate::data::{pgm, raw};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, LabelMap};
use crate::NUM_CLASSES;

/// Margin kept free of anatomy at every image border.
const BORDER: f64 = 4.0;
/// Per-axis stretch range of the LV/MYO ellipses.
const AXIS_STRETCH: (f64, f64) = (0.9, 1.1);
/// RV disc radius and left offset as multiples of the outer MYO radius.
const RV_RADIUS: (f64, f64) = (0.8, 1.1);
const RV_OFFSET: (f64, f64) = (0.55, 0.8);

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub lv_radius: (f64, f64),
    pub myo_thickness: (f64, f64),
    /// Background, RV, MYO, LV.
    pub class_means: [f64; NUM_CLASSES],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 224,
            noise_sigma: 0.08,
            lv_radius: (12.0, 30.0),
            myo_thickness: (5.0, 12.0),
            class_means: [0.2, 0.55, 0.4, 0.75],
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Largest horizontal and vertical extents the geometry can need.
    fn max_extent(&self) -> (f64, f64) {
        let outer = (self.lv_radius.1 + self.myo_thickness.1) * AXIS_STRETCH.1;
        let left = outer * (RV_OFFSET.1 + RV_RADIUS.1);
        (left + outer, 2.0 * outer.max(outer * RV_RADIUS.1))
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.lv_radius, self.myo_thickness];
        if ranges.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi)) {
            return Err(Error::invalid("phantom geometry ranges must satisfy 0 < min <= max"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be finite and non-negative"));
        }
        if self.class_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("class means must be finite"));
        }
        let (wx, wy) = self.max_extent();
        let room = self.image_size as f64 - 2.0 * BORDER;
        if wx > room || wy > room {
            return Err(Error::invalid(format!(
                "phantom geometry needs {wx:.0}x{wy:.0} px but a {}-px image leaves {room:.0}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Specs for a reproducible set of `count` phantoms; phantom `i` draws
/// from its own seed derived from `seed` and `i`.
pub fn phantom_specs(count: usize, seed: u64, noise_sigma: f64) -> Vec<PhantomSpec> {
    (0..count as u64)
        .map(|i| PhantomSpec {
            noise_sigma,
            ..PhantomSpec::with_seed(crate::pipeline::derive_seed(seed, i))
        })
        .collect()
}

/// Image (`H×W×1`) and labels for one phantom.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(FeatureMap<f64>, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..=hi) } else { lo };

    let r_lv = uniform(&mut rng, spec.lv_radius);
    let thick = uniform(&mut rng, spec.myo_thickness);
    let r_out = r_lv + thick;
    let (sy, sx) = (uniform(&mut rng, AXIS_STRETCH), uniform(&mut rng, AXIS_STRETCH));
    let rv_r = r_out * uniform(&mut rng, RV_RADIUS);
    let rv_off = r_out * uniform(&mut rng, RV_OFFSET);
    let rv_dy = r_out * uniform(&mut rng, (-0.15, 0.15));

    // Centre so that the RV on the left and the ring on the right both fit.
    let size = spec.image_size as f64;
    let ext_x = r_out * sx;
    let ext_y = r_out * sy.max(RV_RADIUS.1);
    let left_need = (rv_off + rv_r).max(ext_x);
    let cx = uniform(&mut rng, (BORDER + left_need, size - BORDER - ext_x));
    let cy = uniform(&mut rng, (BORDER + ext_y + rv_dy.abs(), size - BORDER - ext_y - rv_dy.abs()));

    let n = spec.image_size;
    let mut labels = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let dy = (y as f64 + 0.5 - cy) / sy;
            let dx = (x as f64 + 0.5 - cx) / sx;
            let d = (dy * dy + dx * dx).sqrt();
            labels[y * n + x] = if d <= r_lv {
                3
            } else if d <= r_out {
                2
            } else {
                let ry = y as f64 + 0.5 - (cy + rv_dy);
                let rx = x as f64 + 0.5 - (cx - rv_off);
                if (ry * ry + rx * rx).sqrt() <= rv_r {
                    1
                } else {
                    0
                }
            };
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let image: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let v = spec.class_means[l as usize];
            if spec.noise_sigma > 0.0 {
                v + noise.sample(&mut rng)
            } else {
                v
            }
        })
        .collect();

    let labels = LabelMap::new(n, n, labels)?;
    if labels.class_counts().contains(&0) {
        return Err(Error::invalid("phantom geometry produced an empty class"));
    }
    Ok((FeatureMap::new(n, n, 1, image)?, labels))
}

/// Default `(train, val, test)` subject counts for `count` phantoms:
/// a quarter for testing, an eighth for validation, the rest for training.
pub fn default_split_counts(count: usize) -> (usize, usize, usize) {
    let test = count / 4;
    let val = count / 8;
    (count - test - val, val, test)
}

/// Writes `count` phantoms into `dir` as `phantom_NNNN.raw` images and
/// `phantom_NNNN_labels.pgm` label maps, one subject each, plus a
/// `manifest.tsv` split by subject with `seed`.
pub fn write_phantom_set(
    dir: &Path,
    count: usize,
    seed: u64,
    noise_sigma: f64,
    counts: (usize, usize, usize),
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let specs = phantom_specs(count, seed, noise_sigma);
    let records = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let (image, labels) = generate_phantom(spec)?;
            let image_path = dir.join(format!("phantom_{i:04}.raw"));
            let label_path = dir.join(format!("phantom_{i:04}_labels.pgm"));
            raw::write_raw(&image_path, &image)?;
            pgm::write_pgm_labels(&label_path, &labels)?;
            Ok(SliceRecord {
                subject_id: format!("phantom_{i:04}"),
                image_path,
                label_path: Some(label_path),
                split: Split::Train,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = split_manifest(&records, seed, counts)?;
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}
