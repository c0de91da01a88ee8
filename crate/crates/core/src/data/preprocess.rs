//! Slice preprocessing: bilinear resize and per-slice standardisation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, LabelMap};

pub const TARGET_SIZE: usize = 224;
pub const MIN_INPUT_SIZE: usize = 16;

/// Source coordinate of output index `i` under half-pixel alignment.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

/// Bilinear resize with half-pixel centres and edge clamping. Resizing to
/// the same size returns the input unchanged.
pub fn resize_bilinear<T: Scalar>(map: &FeatureMap<T>, height: usize, width: usize) -> Result<FeatureMap<T>> {
    let (h, w, c) = map.shape();
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if (h, w) == (height, width) {
        return Ok(map.clone());
    }
    let cols: Vec<(usize, usize, T)> = (0..width)
        .map(|x| {
            let s = source_coord(x, w, width);
            let x0 = s.floor() as usize;
            (x0, (x0 + 1).min(w - 1), T::lit(s - x0 as f64))
        })
        .collect();
    let mut data = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let s = source_coord(y, h, height);
        let y0 = s.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = T::lit(s - y0 as f64);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = map.get(y0, x0, ch) * (T::one() - fx) + map.get(y0, x1, ch) * fx;
                let bottom = map.get(y1, x0, ch) * (T::one() - fx) + map.get(y1, x1, ch) * fx;
                data.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    FeatureMap::new(height, width, c, data)
}

/// Nearest-neighbour resize; class ids are never interpolated.
pub fn resize_labels(labels: &LabelMap, height: usize, width: usize) -> Result<LabelMap> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    let (h, w) = (labels.height(), labels.width());
    let pick = |i: usize, src: usize, dst: usize| ((i * 2 + 1) * src / (dst * 2)).min(src - 1);
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = pick(y, h, height);
        for x in 0..width {
            data.push(labels.get(sy, pick(x, w, width)));
        }
    }
    LabelMap::new(height, width, data)
}

/// Zero mean and unit variance per slice. Constant slices become all zeros.
pub fn standardize<T: Scalar>(map: &FeatureMap<T>) -> FeatureMap<T> {
    let n = map.data().len() as f64;
    let mean = map.data().iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = map.data().iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return map.map(|_| T::zero());
    }
    map.map(|v| T::lit((v.as_f64() - mean) / std))
}

/// Preprocessing settings stored with a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreprocessSpec {
    pub target_size: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            target_size: TARGET_SIZE,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_size < MIN_INPUT_SIZE {
            return Err(Error::invalid(format!(
                "target size {} is below the minimum {MIN_INPUT_SIZE}",
                self.target_size
            )));
        }
        Ok(())
    }

    /// Resize to the target size, then standardise.
    pub fn image<T: Scalar>(&self, image: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.validate()?;
        let (h, w, c) = image.shape();
        if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(Error::invalid(format!(
                "slice {h}x{w} is smaller than {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
            )));
        }
        if c != 1 {
            return Err(Error::invalid(format!("expected a single-channel slice, got {c} channels")));
        }
        Ok(standardize(&resize_bilinear(image, self.target_size, self.target_size)?))
    }

    pub fn labels(&self, labels: &LabelMap) -> Result<LabelMap> {
        resize_labels(labels, self.target_size, self.target_size)
    }
}

/// Default preprocessing to 224×224.
pub fn preprocess<T: Scalar>(image: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    PreprocessSpec::default().image(image)
}

pub fn preprocess_labels(labels: &LabelMap) -> Result<LabelMap> {
    PreprocessSpec::default().labels(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::new(h, w, 1, (0..h * w).map(|i| ((i * 37) % 101) as f64).collect()).unwrap()
    }

    #[test]
    fn resizes_to_target() {
        let out = preprocess(&ramp(256, 256)).unwrap();
        assert_eq!(out.shape(), (224, 224, 1));
        let out = preprocess(&ramp(16, 40)).unwrap();
        assert_eq!(out.shape(), (224, 224, 1));
    }

    #[test]
    fn standardisation_is_idempotent() {
        let once = preprocess(&ramp(224, 224)).unwrap();
        let twice = preprocess(&once).unwrap();
        let n = twice.data().len() as f64;
        let mean = twice.data().iter().sum::<f64>() / n;
        let var = twice.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_slice_is_zero() {
        let out = preprocess(&FeatureMap::filled(30, 30, 1, 7.5f64)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_sizes_rejected() {
        assert!(preprocess(&ramp(15, 64)).is_err());
        assert!(PreprocessSpec { target_size: 8 }.image(&ramp(32, 32)).is_err());
    }

    #[test]
    fn bilinear_matches_linear_ramp() {
        // A linear function is reproduced exactly away from the clamped border.
        let src = FeatureMap::new(8, 8, 1, (0..64).map(|i| (i % 8) as f64).collect()).unwrap();
        let up = resize_bilinear(&src, 16, 16).unwrap();
        for x in 1..15 {
            let expected = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 7.0);
            assert!((up.get(5, x, 0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn label_resizes() {
        let l = LabelMap::new(3, 3, vec![0, 1, 2, 3, 0, 1, 2, 3, 0]).unwrap();
        assert_eq!(resize_labels(&l, 3, 3).unwrap(), l);
        let uniform = LabelMap::filled(8, 8, 2);
        assert_eq!(resize_labels(&uniform, 4, 4).unwrap(), LabelMap::filled(4, 4, 2));
        let checker = LabelMap::new(8, 8, (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 0 } else { 3 }).collect()).unwrap();
        let down = resize_labels(&checker, 4, 4).unwrap();
        assert!(down.data().iter().all(|&v| v == 0 || v == 3));
    }

    proptest! {
        #[test]
        fn preprocessing_is_deterministic(h in 16usize..40, w in 16usize..40, seed in any::<u64>()) {
            let m = FeatureMap::new(h, w, 1, (0..h * w).map(|i| ((seed >> (i % 48)) & 0xff) as f64).collect()).unwrap();
            let spec = PreprocessSpec { target_size: 32 };
            prop_assert_eq!(spec.image(&m).unwrap(), spec.image(&m).unwrap());
        }

        #[test]
        fn nearest_preserves_value_set(h in 1usize..20, w in 1usize..20, th in 1usize..30, tw in 1usize..30) {
            let l = LabelMap::new(h, w, (0..h * w).map(|i| if i % 3 == 0 { 1 } else { 2 }).collect()).unwrap();
            let r = resize_labels(&l, th, tw).unwrap();
            prop_assert!(r.data().iter().all(|&v| v == 1 || v == 2));
        }
    }
}
