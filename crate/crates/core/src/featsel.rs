//! Class-wise entropy scoring and channel selection.
//!
//! For every channel and class, the channel's values at pixels of that class
//! are histogrammed over the channel's training range and the Shannon
//! entropy of the histogram is taken. Channels whose summed entropy is low
//! respond consistently within each class and are kept.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, LabelMap};
use crate::NUM_CLASSES;

pub const ENTROPY_BINS: usize = 32;
pub const DEFAULT_KEEP_RATIO: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEntropy {
    pub unit_index: usize,
    pub channel_index: usize,
    pub per_class_entropy: [f64; NUM_CLASSES],
    pub total: f64,
    /// Training `(min, max)` the histogram spans.
    pub range: (f64, f64),
}

/// Histogram bin of `v` within `range`; out-of-range values clamp to the
/// edge bins and a degenerate range maps everything to bin 0.
#[inline]
pub fn histogram_bin(v: f64, range: (f64, f64)) -> usize {
    let (lo, hi) = range;
    if hi <= lo {
        return 0;
    }
    let pos = (v - lo) / (hi - lo) * ENTROPY_BINS as f64;
    if pos <= 0.0 {
        0
    } else {
        (pos as usize).min(ENTROPY_BINS - 1)
    }
}

/// `−Σ p ln p` of a count histogram, with `0 ln 0 = 0`. Empty histograms
/// have zero entropy.
pub fn histogram_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Splits a flat channel index into `(unit, channel)` given per-unit widths.
fn locate(unit_channels: &[usize], flat: usize) -> (usize, usize) {
    let mut rest = flat;
    for (u, &c) in unit_channels.iter().enumerate() {
        if rest < c {
            return (u, rest);
        }
        rest -= c;
    }
    unreachable!("flat channel index out of range")
}

/// Streaming per-class histogram accumulation over full-resolution maps.
#[derive(Clone, Debug)]
pub struct EntropyAccumulator {
    unit_channels: Vec<usize>,
    ranges: Vec<(f64, f64)>,
    /// `[channel][class][bin]`, flattened.
    counts: Vec<u64>,
}

impl EntropyAccumulator {
    pub fn new(unit_channels: &[usize], ranges: Vec<(f64, f64)>) -> Result<Self> {
        let total: usize = unit_channels.iter().sum();
        if total == 0 || unit_channels.contains(&0) {
            return Err(Error::invalid("every unit needs at least one channel"));
        }
        if ranges.len() != total {
            return Err(Error::invalid(format!(
                "{} ranges for {total} channels",
                ranges.len()
            )));
        }
        Ok(Self {
            unit_channels: unit_channels.to_vec(),
            ranges,
            counts: vec![0; total * NUM_CLASSES * ENTROPY_BINS],
        })
    }

    pub fn channels(&self) -> usize {
        self.ranges.len()
    }

    /// Adds one image: `features` holds all channels at label resolution.
    pub fn add<T: Scalar>(&mut self, features: &FeatureMap<T>, labels: &LabelMap) -> Result<()> {
        let c = self.channels();
        if features.height() != labels.height() || features.width() != labels.width() {
            return Err(Error::invalid(format!(
                "features {}x{} do not match labels {}x{}",
                features.height(),
                features.width(),
                labels.height(),
                labels.width()
            )));
        }
        if features.channels() != c {
            return Err(Error::invalid(format!(
                "expected {c} channels, got {}",
                features.channels()
            )));
        }
        for (px, &class) in features.data().chunks_exact(c).zip(labels.data()) {
            let class = class as usize;
            for (ch, &v) in px.iter().enumerate() {
                let bin = histogram_bin(v.as_f64(), self.ranges[ch]);
                self.counts[(ch * NUM_CLASSES + class) * ENTROPY_BINS + bin] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Vec<ChannelEntropy> {
        (0..self.channels())
            .map(|ch| {
                let mut per_class = [0.0; NUM_CLASSES];
                for (j, h) in per_class.iter_mut().enumerate() {
                    let start = (ch * NUM_CLASSES + j) * ENTROPY_BINS;
                    *h = histogram_entropy(&self.counts[start..start + ENTROPY_BINS]);
                }
                let (unit_index, channel_index) = locate(&self.unit_channels, ch);
                ChannelEntropy {
                    unit_index,
                    channel_index,
                    per_class_entropy: per_class,
                    total: per_class.iter().sum(),
                    range: self.ranges[ch],
                }
            })
            .collect()
    }
}

/// Merges per-channel `(min, max)` over several maps with equal channel counts.
pub fn merge_ranges<T: Scalar>(maps: &[FeatureMap<T>]) -> Result<Vec<(f64, f64)>> {
    let first = maps.first().ok_or_else(|| Error::invalid("no feature maps"))?;
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); first.channels()];
    for m in maps {
        if m.channels() != ranges.len() {
            return Err(Error::invalid("feature maps differ in channel count"));
        }
        for (r, (lo, hi)) in ranges.iter_mut().zip(m.channel_ranges()) {
            r.0 = r.0.min(lo.as_f64());
            r.1 = r.1.max(hi.as_f64());
        }
    }
    Ok(ranges)
}

/// Class-wise entropy of every channel.
///
/// `features[i]` is image `i`'s feature stack at label resolution; its
/// channels are grouped into units of the given widths, in order.
pub fn class_entropy<T: Scalar>(
    features: &[FeatureMap<T>],
    labels: &[LabelMap],
    unit_channels: &[usize],
) -> Result<Vec<ChannelEntropy>> {
    if features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature maps but {} label maps",
            features.len(),
            labels.len()
        )));
    }
    let ranges = merge_ranges(features)?;
    let mut acc = EntropyAccumulator::new(unit_channels, ranges)?;
    for (f, l) in features.iter().zip(labels) {
        acc.add(f, l)?;
    }
    Ok(acc.finish())
}

/// Which channels of which unit survive selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    pub unit_channels: Vec<usize>,
    /// One flag per channel, units concatenated in order.
    pub keep: Vec<bool>,
    pub keep_ratio: f64,
    /// The scored entropies, kept for inspection and reproducibility.
    pub entropies: Vec<ChannelEntropy>,
}

impl SelectionMask {
    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn total_channels(&self) -> usize {
        self.keep.len()
    }

    /// Kept channel indices of one unit.
    pub fn kept_in_unit(&self, unit: usize) -> Vec<usize> {
        let start: usize = self.unit_channels[..unit].iter().sum();
        (0..self.unit_channels[unit])
            .filter(|&c| self.keep[start + c])
            .collect()
    }

    /// `(unit, channel)` pairs of every kept channel, in concatenation order.
    pub fn kept_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.unit_channels.len())
            .flat_map(|u| self.kept_in_unit(u).into_iter().map(move |c| (u, c)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.unit_channels.iter().sum();
        if self.keep.len() != total || self.entropies.len() != total {
            return Err(Error::invalid("selection mask lengths disagree with unit widths"));
        }
        if self.kept_count() == 0 {
            return Err(Error::invalid("selection mask keeps no channels"));
        }
        Ok(())
    }
}

/// Number of channels kept from `total` at `ratio`.
pub fn kept_count(total: usize, ratio: f64) -> usize {
    // Guard against 0.8·145 landing a hair under 116.
    (((ratio * total as f64) + 1e-9).floor() as usize).clamp(1, total)
}

/// Keeps the lowest-entropy `max(1, ⌊ratio·C⌋)` channels across all units.
/// Ties go to the lower `(unit, channel)` index.
pub fn select_channels(entropies: &[ChannelEntropy], keep_ratio: f64) -> Result<SelectionMask> {
    if entropies.is_empty() {
        return Err(Error::invalid("no channel entropies to select from"));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!("keep_ratio must lie in (0, 1], got {keep_ratio}")));
    }
    let mut unit_channels: Vec<usize> = Vec::new();
    for (flat, e) in entropies.iter().enumerate() {
        let expected = if unit_channels.len() == e.unit_index + 1 {
            unit_channels[e.unit_index]
        } else if unit_channels.len() == e.unit_index {
            unit_channels.push(0);
            0
        } else {
            return Err(Error::invalid(format!("entropy {flat} breaks unit ordering")));
        };
        if e.channel_index != expected {
            return Err(Error::invalid(format!("entropy {flat} breaks channel ordering")));
        }
        unit_channels[e.unit_index] += 1;
    }

    let k = kept_count(entropies.len(), keep_ratio);
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| {
        entropies[a]
            .total
            .partial_cmp(&entropies[b].total)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; entropies.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    Ok(SelectionMask {
        unit_channels,
        keep,
        keep_ratio,
        entropies: entropies.to_vec(),
    })
}

/// Mask that keeps every channel, carrying the given entropies.
pub fn keep_all(entropies: &[ChannelEntropy]) -> Result<SelectionMask> {
    select_channels(entropies, 1.0)
}

/// Restricts each unit's map to its kept channels. Units with no kept
/// channel are dropped from the output.
pub fn apply_selection<T: Scalar>(mask: &SelectionMask, features: &[FeatureMap<T>]) -> Result<Vec<FeatureMap<T>>> {
    if features.len() != mask.unit_channels.len() {
        return Err(Error::invalid(format!(
            "mask covers {} units, got {} maps",
            mask.unit_channels.len(),
            features.len()
        )));
    }
    let mut out = Vec::with_capacity(features.len());
    for (u, f) in features.iter().enumerate() {
        if f.channels() != mask.unit_channels[u] {
            return Err(Error::invalid(format!(
                "unit {u} has {} channels, mask expects {}",
                f.channels(),
                mask.unit_channels[u]
            )));
        }
        let kept = mask.kept_in_unit(u);
        if kept.is_empty() {
            continue;
        }
        if kept.len() == f.channels() {
            out.push(f.clone());
        } else {
            out.push(f.select_channels(&kept)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two classes, channel A constant per class, channel B uniform noise.
    fn toy() -> (Vec<FeatureMap<f64>>, Vec<LabelMap>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, w) = (16, 16);
        let mut labels = Vec::new();
        let mut maps = Vec::new();
        for _ in 0..3 {
            let lab: Vec<u8> = (0..h * w).map(|i| if i % w < w / 2 { 0 } else { 3 }).collect();
            let mut data = Vec::new();
            for &l in &lab {
                data.push(if l == 0 { 1.0 } else { 5.0 });
                data.push(rng.random::<f64>());
            }
            maps.push(FeatureMap::new(h, w, 2, data).unwrap());
            labels.push(LabelMap::new(h, w, lab).unwrap());
        }
        (maps, labels)
    }

    #[test]
    fn constant_channel_beats_noise() {
        let (maps, labels) = toy();
        let e = class_entropy(&maps, &labels, &[2]).unwrap();
        assert_eq!(e[0].per_class_entropy, [0.0; 4]);
        assert!(e[0].total < e[1].total);
        let mask = select_channels(&e, 0.5).unwrap();
        assert_eq!(mask.keep, vec![true, false]);
    }

    #[test]
    fn uniform_histogram_is_ln32() {
        let counts = [7u64; ENTROPY_BINS];
        assert!((histogram_entropy(&counts) - 32f64.ln()).abs() < 1e-12);
        // Through the full path: one value at each bin centre of [0, 32).
        let mut data: Vec<f64> = (0..32).map(|b| b as f64 + 0.5).collect();
        data[0] = 0.0;
        data[31] = 32.0;
        let map = FeatureMap::new(1, 32, 1, data).unwrap();
        let lab = LabelMap::new(1, 32, vec![2; 32]).unwrap();
        let e = class_entropy(&[map], &[lab], &[1]).unwrap();
        assert!((e[0].per_class_entropy[2] - 32f64.ln()).abs() < 1e-9);
        assert_eq!(e[0].range, (0.0, 32.0));
    }

    #[test]
    fn absent_classes_contribute_zero() {
        let (maps, labels) = toy();
        let e = class_entropy(&maps, &labels, &[2]).unwrap();
        assert_eq!(e[1].per_class_entropy[1], 0.0);
        assert_eq!(e[1].per_class_entropy[2], 0.0);
        assert!(e[1].per_class_entropy[0] > 0.0);
        assert!((e[1].total - e[1].per_class_entropy.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn bin_clamping() {
        assert_eq!(histogram_bin(-1.0, (0.0, 1.0)), 0);
        assert_eq!(histogram_bin(1.0, (0.0, 1.0)), ENTROPY_BINS - 1);
        assert_eq!(histogram_bin(9.0, (0.0, 1.0)), ENTROPY_BINS - 1);
        assert_eq!(histogram_bin(0.5, (2.0, 2.0)), 0);
    }

    #[test]
    fn keep_counts() {
        assert_eq!(kept_count(10, 0.8), 8);
        assert_eq!(kept_count(145, 0.8), 116);
        assert_eq!(kept_count(3, 0.1), 1);
        assert_eq!(kept_count(7, 1.0), 7);
    }

    fn fake_entropies(widths: &[usize], seed: u64) -> Vec<ChannelEntropy> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for (u, &w) in widths.iter().enumerate() {
            for c in 0..w {
                let t = rng.random::<f64>() * 10.0;
                out.push(ChannelEntropy {
                    unit_index: u,
                    channel_index: c,
                    per_class_entropy: [t, 0.0, 0.0, 0.0],
                    total: t,
                    range: (0.0, 1.0),
                });
            }
        }
        out
    }

    #[test]
    fn select_default_width() {
        let e = fake_entropies(&[5, 10, 30, 100], 2);
        let mask = select_channels(&e, 0.8).unwrap();
        assert_eq!(mask.kept_count(), 116);
        assert_eq!(mask.unit_channels, vec![5, 10, 30, 100]);
        let maps: Vec<FeatureMap<f64>> = [5, 10, 30, 100]
            .iter()
            .map(|&c| FeatureMap::filled(2, 2, c, 1.0))
            .collect();
        let sel = apply_selection(&mask, &maps).unwrap();
        assert_eq!(sel.iter().map(FeatureMap::channels).sum::<usize>(), 116);
        let all = keep_all(&e).unwrap();
        assert_eq!(apply_selection(&all, &maps).unwrap(), maps);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let mut e = fake_entropies(&[2, 2], 3);
        for x in &mut e {
            x.total = 1.0;
        }
        let mask = select_channels(&e, 0.5).unwrap();
        assert_eq!(mask.keep, vec![true, true, false, false]);
    }

    #[test]
    fn selection_errors() {
        assert!(select_channels(&[], 0.8).is_err());
        let e = fake_entropies(&[3], 4);
        assert!(select_channels(&e, 0.0).is_err());
        assert!(select_channels(&e, 1.5).is_err());
        let mask = select_channels(&e, 0.5).unwrap();
        assert!(apply_selection(&mask, &[FeatureMap::<f64>::zeros(2, 2, 4)]).is_err());
    }

    #[test]
    fn single_channel_slice() {
        let e = fake_entropies(&[3], 5);
        let mut mask = select_channels(&e, 1.0).unwrap();
        mask.keep = vec![true, false, false];
        let m = FeatureMap::new(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = apply_selection(&mask, std::slice::from_ref(&m)).unwrap();
        assert_eq!(out[0], m.channel(0));
    }

    #[test]
    fn duplicate_image_keeps_entropies() {
        let (mut maps, mut labels) = toy();
        let before = class_entropy(&maps, &labels, &[2]).unwrap();
        maps.push(maps[0].clone());
        labels.push(labels[0].clone());
        let after = class_entropy(&maps, &labels, &[2]).unwrap();
        // Duplicating every image doubles all counts exactly.
        let (m2, l2): (Vec<_>, Vec<_>) = (
            maps[..3].iter().chain(&maps[..3]).cloned().collect(),
            labels[..3].iter().chain(&labels[..3]).cloned().collect(),
        );
        let doubled = class_entropy(&m2, &l2, &[2]).unwrap();
        assert_eq!(before, doubled);
        assert_eq!(after[0].total, 0.0);
    }

    proptest! {
        #[test]
        fn entropy_ignores_bin_order(mut counts in proptest::collection::vec(0u64..50, ENTROPY_BINS), seed in 0u64..1000) {
            let h1 = histogram_entropy(&counts);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            counts.shuffle(&mut rng);
            let h2 = histogram_entropy(&counts);
            prop_assert!((h1 - h2).abs() < 1e-12);
            prop_assert!(h1 >= 0.0 && h1 <= (ENTROPY_BINS as f64).ln() + 1e-12);
        }

        #[test]
        fn selection_is_idempotent(seed in 0u64..500, ratio in 0.05f64..1.0) {
            let e = fake_entropies(&[4, 7], seed);
            let a = select_channels(&e, ratio).unwrap();
            let b = select_channels(&a.entropies, ratio).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.kept_count(), kept_count(11, ratio));
        }
    }
}
