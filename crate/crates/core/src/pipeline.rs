//! End-to-end training, prediction, evaluation and unit-count sweeps.
//!
//! Training runs preprocess → cascade → class-wise entropy on upsampled
//! features → channel selection → per-pixel sampling → boosting. The CRF
//! configuration is stored verbatim; nothing about it is learned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bundle::ModelBundle;
use crate::cascade::{fit_cascade, transform_cascade, CascadeConfig, CascadeModel};
use crate::crf::{argmax_labels, mean_field_refine, CrfConfig};
use crate::data::{load_slice, split_manifest, DatasetManifest, PreprocessSpec, SliceRecord, Split};
use crate::error::{Error, Result, StageExt};
use crate::featsel::{apply_selection, merge_ranges, select_channels, EntropyAccumulator, SelectionMask};
use crate::gbdt::{fit_gbdt_traced, predict_proba, GbdtConfig};
use crate::metrics::{evaluate_slices, DiceReport, Pooling};
use crate::tensor::{concat_channels, upsample_nearest, FeatureMap, LabelMap};
use crate::NUM_CLASSES;

pub const DEFAULT_BACKGROUND_FACTOR: f64 = 2.0;
pub const DEFAULT_MAX_PIXELS_PER_SLICE: usize = 4096;

/// Which training pixels reach the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    /// Background pixels per slice are capped at this multiple of the
    /// largest foreground class.
    pub background_factor: f64,
    /// Cap on sampled pixels per slice after balancing; 0 disables it.
    pub max_pixels_per_slice: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            background_factor: DEFAULT_BACKGROUND_FACTOR,
            max_pixels_per_slice: DEFAULT_MAX_PIXELS_PER_SLICE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preprocess: PreprocessSpec,
    pub cascade: CascadeConfig,
    /// When false every channel is kept.
    pub feature_selection: bool,
    pub keep_ratio: f64,
    pub gbdt: GbdtConfig,
    pub crf: CrfConfig,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessSpec::default(),
            cascade: CascadeConfig::default(),
            feature_selection: true,
            keep_ratio: crate::featsel::DEFAULT_KEEP_RATIO,
            gbdt: GbdtConfig::default(),
            crf: CrfConfig::default(),
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

/// Independent seed for one consumer of the training seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const CASCADE_STREAM: u64 = 1;
const GBDT_STREAM: u64 = 2;
const SAMPLING_STREAM: u64 = 3;

/// Pixel indices of one slice used for training, sorted. All foreground
/// pixels are kept, background is subsampled to the balance cap, and the
/// result is thinned uniformly to the per-slice cap.
pub fn sample_pixels(labels: &LabelMap, config: &SamplingConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, &l) in labels.data().iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let fg_max = by_class[1..].iter().map(Vec::len).max().unwrap_or(0);
    let bg_cap = if fg_max == 0 {
        by_class[0].len()
    } else {
        ((config.background_factor * fg_max as f64).floor() as usize).min(by_class[0].len())
    };
    let mut chosen: Vec<usize> = by_class[1..].concat();
    if bg_cap < by_class[0].len() {
        chosen.extend(
            rand::seq::index::sample(rng, by_class[0].len(), bg_cap)
                .into_iter()
                .map(|k| by_class[0][k]),
        );
    } else {
        chosen.extend_from_slice(&by_class[0]);
    }
    chosen.sort_unstable();
    let cap = config.max_pixels_per_slice;
    if cap > 0 && chosen.len() > cap {
        let mut keep: Vec<usize> = rand::seq::index::sample(rng, chosen.len(), cap)
            .into_iter()
            .map(|k| chosen[k])
            .collect();
        keep.sort_unstable();
        chosen = keep;
    }
    chosen
}

/// Upsamples every map to `h × w` and stacks the channels.
pub fn upsample_concat(maps: &[FeatureMap<f64>], h: usize, w: usize) -> Result<FeatureMap<f64>> {
    let full = maps
        .iter()
        .map(|m| {
            if (m.height(), m.width()) == (h, w) {
                Ok(m.clone())
            } else {
                upsample_nearest(m, h, w)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    concat_channels(&full)
}

/// Kept, upsampled channels of one preprocessed image; the classifier input.
pub fn pixel_features(
    cascade: &CascadeModel<f64>,
    selection: &SelectionMask,
    image: &FeatureMap<f64>,
) -> Result<FeatureMap<f64>> {
    let maps = transform_cascade(cascade, image)?;
    let kept = apply_selection(selection, &maps)?;
    upsample_concat(&kept, image.height(), image.width())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub slices: usize,
    pub sampled_pixels: usize,
    pub class_counts: [usize; NUM_CLASSES],
    /// Mean training log-loss before the first round and after each round.
    pub losses: Vec<f64>,
}

/// Trains on in-memory `(image, labels)` pairs at their native resolution.
pub fn train_from_slices(slices: &[(FeatureMap<f64>, LabelMap)], config: &TrainConfig) -> Result<(ModelBundle, TrainSummary)> {
    if slices.is_empty() {
        return Err(Error::invalid("no training slices"));
    }
    config.crf.validate().stage("configuration")?;
    let (images, labels): (Vec<FeatureMap<f64>>, Vec<LabelMap>) = slices
        .par_iter()
        .map(|(img, lab)| {
            if (img.height(), img.width()) != (lab.height(), lab.width()) {
                return Err(Error::invalid("image and labels differ in size"));
            }
            Ok((config.preprocess.image(img)?, config.preprocess.labels(lab)?))
        })
        .collect::<Result<Vec<_>>>()
        .stage("preprocess")?
        .into_iter()
        .unzip();
    let size = config.preprocess.target_size;

    let cascade = fit_cascade(&images, &config.cascade, derive_seed(config.seed, CASCADE_STREAM)).stage("cascade")?;
    let features: Vec<Vec<FeatureMap<f64>>> = images
        .par_iter()
        .map(|img| transform_cascade(&cascade, img))
        .collect::<Result<_>>()
        .stage("cascade transform")?;

    let unit_channels = config.cascade.kernels_per_unit.clone();
    let selection = {
        let mut ranges = Vec::new();
        for u in 0..unit_channels.len() {
            let unit_maps: Vec<FeatureMap<f64>> = features.iter().map(|f| f[u].clone()).collect();
            ranges.extend(merge_ranges(&unit_maps).stage("entropy")?);
        }
        let mut acc = EntropyAccumulator::new(&unit_channels, ranges).stage("entropy")?;
        for (f, l) in features.iter().zip(&labels) {
            let full = upsample_concat(f, size, size).stage("entropy")?;
            acc.add(&full, l).stage("entropy")?;
        }
        let entropies = acc.finish();
        let ratio = if config.feature_selection { config.keep_ratio } else { 1.0 };
        select_channels(&entropies, ratio).stage("selection")?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SAMPLING_STREAM));
    let picks: Vec<Vec<usize>> = labels.iter().map(|l| sample_pixels(l, &config.sampling, &mut rng)).collect();
    let width = selection.kept_count();
    let rows: Vec<(Vec<f64>, Vec<u8>)> = features
        .par_iter()
        .zip(&labels)
        .zip(&picks)
        .map(|((f, l), pick)| {
            let kept = apply_selection(&selection, f)?;
            let full = upsample_concat(&kept, size, size)?;
            let mut x = Vec::with_capacity(pick.len() * width);
            for &p in pick {
                x.extend_from_slice(&full.data()[p * width..(p + 1) * width]);
            }
            let y = pick.iter().map(|&p| l.data()[p]).collect();
            Ok((x, y))
        })
        .collect::<Result<_>>()
        .stage("sampling")?;
    drop(features);
    let (x, y): (Vec<f64>, Vec<u8>) = rows.into_iter().fold((Vec::new(), Vec::new()), |(mut x, mut y), (rx, ry)| {
        x.extend(rx);
        y.extend(ry);
        (x, y)
    });

    let gbdt_config = GbdtConfig {
        seed: derive_seed(config.seed, GBDT_STREAM),
        ..config.gbdt.clone()
    };
    let (ensemble, losses) = fit_gbdt_traced(&x, width, &y, &gbdt_config).stage("gbdt")?;

    let mut class_counts = [0; NUM_CLASSES];
    for &c in &y {
        class_counts[c as usize] += 1;
    }
    let bundle = ModelBundle {
        preprocess: config.preprocess,
        cascade,
        selection,
        ensemble,
        crf: config.crf.clone(),
        seed: config.seed,
    };
    bundle.validate()?;
    Ok((
        bundle,
        TrainSummary {
            slices: slices.len(),
            sampled_pixels: y.len(),
            class_counts,
            losses,
        },
    ))
}

/// Loads every record of `split`; labels are required.
pub fn load_labelled(records: &[&SliceRecord]) -> Result<Vec<(FeatureMap<f64>, LabelMap)>> {
    records
        .par_iter()
        .map(|r| {
            let (img, lab) = load_slice(r)?;
            let lab = lab.ok_or_else(|| {
                Error::invalid(format!("slice {} of subject {} has no labels", r.image_path.display(), r.subject_id))
            })?;
            Ok((img, lab))
        })
        .collect()
}

/// Trains on the manifest's `train` split.
pub fn train_pipeline(manifest: &DatasetManifest, config: &TrainConfig) -> Result<(ModelBundle, TrainSummary)> {
    let records = manifest.split(Split::Train);
    if records.is_empty() {
        return Err(Error::invalid("manifest has no training slices"));
    }
    let slices = load_labelled(&records).stage("load")?;
    train_from_slices(&slices, config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// The preprocessed image the model saw.
    pub image: FeatureMap<f64>,
    pub probs: FeatureMap<f64>,
    /// Per-pixel argmax before refinement.
    pub raw_labels: LabelMap,
    /// After the CRF.
    pub labels: LabelMap,
}

/// Segments one slice at the model's working resolution.
pub fn predict(bundle: &ModelBundle, image: &FeatureMap<f64>) -> Result<Prediction> {
    predict_with_crf(bundle, image, &bundle.crf)
}

/// As [`predict`] with a different CRF configuration.
pub fn predict_with_crf(bundle: &ModelBundle, image: &FeatureMap<f64>, crf: &CrfConfig) -> Result<Prediction> {
    let pre = bundle.preprocess.image(image).stage("preprocess")?;
    let feats = pixel_features(&bundle.cascade, &bundle.selection, &pre).stage("features")?;
    let (h, w, k) = feats.shape();
    let probs = predict_proba(&bundle.ensemble, feats.data(), k).stage("classify")?;
    let probs = FeatureMap::new(h, w, NUM_CLASSES, probs.into_iter().flatten().collect())?;
    let raw_labels = argmax_labels(&probs);
    let labels = mean_field_refine(&probs, &pre, crf).stage("crf")?;
    Ok(Prediction {
        image: pre,
        probs,
        raw_labels,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceOutcome {
    pub subject_id: String,
    pub raw_dice: [f64; 3],
    pub dice: [f64; 3],
    pub raw_isolated: usize,
    pub isolated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// After the CRF.
    pub report: DiceReport,
    /// Plain classifier output.
    pub raw_report: DiceReport,
    pub slices: Vec<SliceOutcome>,
}

/// Scores predictions against labels resized to the model resolution.
pub fn evaluate_records(bundle: &ModelBundle, records: &[&SliceRecord], pooling: Pooling) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::invalid("no slices to evaluate"));
    }
    let slices = load_labelled(records).stage("load")?;
    let scored: Vec<(LabelMap, LabelMap, LabelMap)> = slices
        .par_iter()
        .map(|(img, lab)| {
            let p = predict(bundle, img)?;
            Ok((p.raw_labels, p.labels, bundle.preprocess.labels(lab)?))
        })
        .collect::<Result<_>>()?;
    let ids: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    let post: Vec<_> = scored.iter().zip(&ids).map(|((_, p, t), s)| (*s, p, t)).collect();
    let raw: Vec<_> = scored.iter().zip(&ids).map(|((r, _, t), s)| (*s, r, t)).collect();
    let outcomes = scored
        .iter()
        .zip(&ids)
        .map(|((r, p, t), s)| {
            Ok(SliceOutcome {
                subject_id: s.to_string(),
                raw_dice: crate::metrics::slice_dice(r, t)?,
                dice: crate::metrics::slice_dice(p, t)?,
                raw_isolated: r.isolated_pixels(),
                isolated: p.isolated_pixels(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        report: evaluate_slices(&post, pooling)?,
        raw_report: evaluate_slices(&raw, pooling)?,
        slices: outcomes,
    })
}

pub fn evaluate_manifest(bundle: &ModelBundle, manifest: &DatasetManifest, split: Split, pooling: Pooling) -> Result<DiceReport> {
    Ok(evaluate_records(bundle, &manifest.split(split), pooling)?.report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub units: usize,
    pub mean: f64,
    /// Population standard deviation over split seeds.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// Cascade config with `units` units: a prefix of `base`'s kernel counts
/// when it is long enough, otherwise the defaults.
pub fn cascade_with_units(base: &CascadeConfig, units: usize) -> CascadeConfig {
    let kernels = if base.kernels_per_unit.len() >= units {
        base.kernels_per_unit[..units].to_vec()
    } else {
        CascadeConfig::with_units(units).kernels_per_unit
    };
    CascadeConfig {
        kernels_per_unit: kernels,
        ..base.clone()
    }
}

/// For every unit count and every split seed `0..seeds`, redraws the
/// train/validation subjects from the manifest's train ∪ val pool (keeping
/// their sizes), trains, and scores average Dice on the validation slices.
pub fn sweep_units(manifest: &DatasetManifest, unit_counts: &[usize], base: &TrainConfig, seeds: usize) -> Result<Vec<SweepRow>> {
    if unit_counts.is_empty() || seeds == 0 {
        return Err(Error::invalid("sweep needs at least one unit count and one seed"));
    }
    for &u in unit_counts {
        let cfg = cascade_with_units(&base.cascade, u);
        cfg.validate()?;
        cfg.validate_input(base.preprocess.target_size, base.preprocess.target_size)?;
    }
    let counts = manifest.subject_counts();
    let (n_train, n_val) = (
        counts.get(&Split::Train).copied().unwrap_or(0),
        counts.get(&Split::Val).copied().unwrap_or(0),
    );
    if n_train == 0 || n_val == 0 {
        return Err(Error::invalid("sweep needs subjects in both the train and val splits"));
    }
    let pool: Vec<SliceRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split != Split::Test)
        .cloned()
        .collect();

    let splits: Vec<DatasetManifest> = (0..seeds)
        .map(|s| split_manifest(&pool, s as u64, (n_train, n_val, 0)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(unit_counts.len());
    for &units in unit_counts {
        let config = TrainConfig {
            cascade: cascade_with_units(&base.cascade, units),
            ..base.clone()
        };
        let mut per_seed = Vec::with_capacity(seeds);
        for split in &splits {
            let (bundle, _) = train_pipeline(split, &config)?;
            per_seed.push(evaluate_manifest(&bundle, split, Split::Val, Pooling::Slice)?.average);
        }
        let mean = per_seed.iter().sum::<f64>() / seeds as f64;
        let var = per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / seeds as f64;
        rows.push(SweepRow {
            units,
            mean,
            std: var.sqrt(),
            per_seed,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig {
            preprocess: PreprocessSpec { target_size: 32 },
            cascade: CascadeConfig {
                kernels_per_unit: vec![5, 10],
                ..CascadeConfig::default()
            },
            ..TrainConfig::default()
        };
        c.gbdt.num_rounds = 5;
        c.gbdt.max_depth = 3;
        c
    }

    fn small_phantoms(n: u64) -> Vec<(FeatureMap<f64>, LabelMap)> {
        (0..n)
            .map(|s| {
                let spec = PhantomSpec {
                    image_size: 64,
                    lv_radius: (4.0, 7.0),
                    myo_thickness: (2.0, 4.0),
                    ..PhantomSpec::with_seed(s)
                };
                generate_phantom(&spec).unwrap()
            })
            .collect()
    }

    #[test]
    fn sampling_balances_background() {
        let mut data = vec![0u8; 100];
        data[..5].fill(1);
        data[5..8].fill(3);
        let l = LabelMap::new(10, 10, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplingConfig {
            background_factor: 2.0,
            max_pixels_per_slice: 0,
        };
        let pick = sample_pixels(&l, &cfg, &mut rng);
        let bg = pick.iter().filter(|&&p| l.data()[p] == 0).count();
        assert_eq!(bg, 10);
        assert_eq!(pick.len(), 18);
        assert!(pick.windows(2).all(|w| w[0] < w[1]));
        let capped = sample_pixels(&l, &SamplingConfig { max_pixels_per_slice: 7, ..cfg }, &mut rng);
        assert_eq!(capped.len(), 7);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }

    #[test]
    fn small_pipeline_is_deterministic_and_consistent() {
        let data = small_phantoms(4);
        let cfg = small_config();
        let (a, summary) = train_from_slices(&data, &cfg).unwrap();
        let (b, _) = train_from_slices(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selection.kept_count(), 12); // ⌊0.8·15⌋
        assert_eq!(a.ensemble.num_features, 12);
        assert_eq!(a.ensemble.trees.len(), 5 * NUM_CLASSES);
        assert_eq!(summary.losses.len(), 6);
        assert!(summary.losses.windows(2).all(|w| w[1] <= w[0] + 1e-9));

        let p = predict(&a, &data[0].0).unwrap();
        assert_eq!(p.probs.shape(), (32, 32, 4));
        for px in p.probs.data().chunks(4) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let plain = predict_with_crf(&a, &data[0].0, &CrfConfig::disabled()).unwrap();
        assert_eq!(plain.labels, plain.raw_labels);
        assert_eq!(plain.raw_labels, p.raw_labels);
    }

    #[test]
    fn no_selection_keeps_everything() {
        let cfg = TrainConfig {
            feature_selection: false,
            ..small_config()
        };
        let (b, _) = train_from_slices(&small_phantoms(3), &cfg).unwrap();
        assert_eq!(b.selection.kept_count(), 15);
    }

    #[test]
    fn errors_carry_stage_labels() {
        let mut cfg = small_config();
        cfg.cascade.kernels_per_unit = vec![5, 50];
        let err = train_from_slices(&small_phantoms(2), &cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "cascade", .. }), "{err}");
        assert!(train_from_slices(&[], &cfg).is_err());
    }

    #[test]
    fn cascade_prefix_for_sweeps() {
        let base = CascadeConfig::default();
        assert_eq!(cascade_with_units(&base, 2).kernels_per_unit, vec![5, 10]);
        assert_eq!(cascade_with_units(&base, 5).kernels_per_unit, vec![5, 10, 30, 100, 100]);
    }
}
