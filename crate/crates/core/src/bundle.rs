//! Trained-model bundles and their binary format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "SSLB"  u32 version
//! block*  := tag[4]  u64 payload_len  payload
//! ```
//!
//! Blocks appear in the order `META CASC FSEL GBDT CRFC`. Saab anchors,
//! means and energies are embedded as `SST1` raw `f32` tensors; the DC
//! anchor is implied by the input dimension. The selection mask is a
//! bitset, and trees are pre-order node lists.

use std::path::Path;

use crate::cascade::{CascadeConfig, CascadeModel};
use crate::crf::CrfConfig;
use crate::data::preprocess::PreprocessSpec;
use crate::data::raw::{decode_raw_prefix, encode_raw};
use crate::error::{Error, Result};
use crate::featsel::{ChannelEntropy, SelectionMask};
use crate::gbdt::{Node, Tree, TreeEnsemble};
use crate::saab::SaabKernelBank;
use crate::tensor::FeatureMap;
use crate::NUM_CLASSES;

pub const BUNDLE_MAGIC: [u8; 4] = *b"SSLB";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub preprocess: PreprocessSpec,
    pub cascade: CascadeModel<f64>,
    pub selection: SelectionMask,
    pub ensemble: TreeEnsemble<f64>,
    pub crf: CrfConfig,
    pub seed: u64,
}

impl ModelBundle {
    pub fn format_version(&self) -> u32 {
        BUNDLE_VERSION
    }

    /// Cross-stage invariants; violations are reported as consistency errors.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Consistency(e.to_string());
        self.preprocess.validate().map_err(wrap)?;
        self.cascade.validate().map_err(wrap)?;
        self.selection.validate().map_err(wrap)?;
        self.ensemble.validate().map_err(wrap)?;
        self.crf.validate().map_err(wrap)?;
        let size = self.preprocess.target_size;
        if self.cascade.input_shape != (size, size) {
            return Err(Error::Consistency(format!(
                "cascade trained on {:?} but preprocessing targets {size}x{size}",
                self.cascade.input_shape
            )));
        }
        if self.selection.unit_channels != self.cascade.config.kernels_per_unit {
            return Err(Error::Consistency(format!(
                "selection covers unit widths {:?} but the cascade has {:?}",
                self.selection.unit_channels, self.cascade.config.kernels_per_unit
            )));
        }
        if self.ensemble.num_features != self.selection.kept_count() {
            return Err(Error::Consistency(format!(
                "ensemble expects {} features but selection keeps {}",
                self.ensemble.num_features,
                self.selection.kept_count()
            )));
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, h: usize, w: usize, data: &[f64]) {
        let map = FeatureMap::new(h, w, 1, data.to_vec()).expect("bank parameters are finite");
        self.buf.extend(encode_raw(&map));
    }
    fn block(&mut self, tag: &[u8; 4], payload: Writer) {
        self.buf.extend_from_slice(tag);
        self.u64(payload.buf.len() as u64);
        self.buf.extend(payload.buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], context: &'static str) -> Self {
        Self { buf, pos: 0, context }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(self.context));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self, h: usize, w: usize) -> Result<Vec<f64>> {
        let (map, used) = decode_raw_prefix(&self.buf[self.pos..]).map_err(|e| match e {
            Error::Truncated(_) => Error::Truncated(self.context),
            other => Error::Consistency(format!("{}: {other}", self.context)),
        })?;
        self.pos += used;
        if map.shape() != (h, w, 1) {
            return Err(Error::Consistency(format!(
                "{}: tensor shape {:?}, expected ({h}, {w}, 1)",
                self.context,
                map.shape()
            )));
        }
        Ok(map.data().iter().map(|&v| f64::from(v)).collect())
    }
    fn block(&mut self, tag: &[u8; 4], context: &'static str) -> Result<Reader<'a>> {
        self.context = context;
        let found = self.take(4)?;
        if found != tag {
            return Err(Error::Consistency(format!(
                "expected block {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = usize::try_from(self.u64()?).map_err(|_| Error::Truncated(context))?;
        Ok(Reader::new(self.take(len)?, context))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Consistency(format!(
                "{}: {} unexpected trailing bytes",
                self.context,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn encode_cascade(m: &CascadeModel<f64>) -> Result<Writer> {
    if !m.config.f32_params {
        return Err(Error::invalid("only cascades with f32 parameters can be saved"));
    }
    let mut w = Writer::new();
    w.u32(m.config.window);
    w.u64(m.config.max_fit_rows as u64);
    w.u32(m.input_shape.0);
    w.u32(m.input_shape.1);
    w.u32(m.banks.len());
    for b in &m.banks {
        let (f, d) = (b.num_kernels(), b.input_dim());
        w.u32(f);
        w.u32(d);
        w.f64(b.bias());
        w.tensor(f - 1, d, b.ac_anchors());
        w.tensor(1, d, b.mean_vector());
        w.tensor(1, f - 1, b.energies());
    }
    Ok(w)
}

fn decode_cascade(r: &mut Reader) -> Result<CascadeModel<f64>> {
    let window = r.u32()?;
    let max_fit_rows = r.u64()? as usize;
    let input_shape = (r.u32()?, r.u32()?);
    let units = r.u32()?;
    let mut banks = Vec::with_capacity(units.min(64));
    let mut kernels = Vec::with_capacity(units.min(64));
    for _ in 0..units {
        let (f, d) = (r.u32()?, r.u32()?);
        if f < 2 || f > d {
            return Err(Error::Consistency(format!("bank with F={f}, D={d}")));
        }
        let bias = r.f64()?;
        let ac = r.tensor(f - 1, d)?;
        let mean = r.tensor(1, d)?;
        let energies = r.tensor(1, f - 1)?;
        let bank = SaabKernelBank::from_parts(d, f, ac, mean, bias, energies)
            .map_err(|e| Error::Consistency(e.to_string()))?;
        kernels.push(f);
        banks.push(bank);
    }
    Ok(CascadeModel {
        config: CascadeConfig {
            kernels_per_unit: kernels,
            window,
            max_fit_rows,
            f32_params: true,
        },
        banks,
        input_shape,
    })
}

fn encode_selection(s: &SelectionMask) -> Writer {
    let mut w = Writer::new();
    w.u32(s.unit_channels.len());
    for &c in &s.unit_channels {
        w.u32(c);
    }
    w.f64(s.keep_ratio);
    let mut bits = vec![0u8; s.keep.len().div_ceil(8)];
    for (i, _) in s.keep.iter().enumerate().filter(|(_, &k)| k) {
        bits[i / 8] |= 1 << (i % 8);
    }
    w.buf.extend(bits);
    for e in &s.entropies {
        for v in e.per_class_entropy {
            w.f64(v);
        }
        w.f64(e.total);
        w.f64(e.range.0);
        w.f64(e.range.1);
    }
    w
}

fn decode_selection(r: &mut Reader) -> Result<SelectionMask> {
    let units = r.u32()?;
    let mut unit_channels = Vec::with_capacity(units.min(64));
    for _ in 0..units {
        unit_channels.push(r.u32()?);
    }
    let total: usize = unit_channels.iter().sum();
    let keep_ratio = r.f64()?;
    let bits = r.take(total.div_ceil(8))?;
    let keep = (0..total).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    let mut entropies = Vec::with_capacity(total);
    for (u, &c) in unit_channels.iter().enumerate() {
        for ch in 0..c {
            let mut per_class = [0.0; NUM_CLASSES];
            for v in &mut per_class {
                *v = r.f64()?;
            }
            let total = r.f64()?;
            let range = (r.f64()?, r.f64()?);
            entropies.push(ChannelEntropy {
                unit_index: u,
                channel_index: ch,
                per_class_entropy: per_class,
                total,
                range,
            });
        }
    }
    Ok(SelectionMask {
        unit_channels,
        keep,
        keep_ratio,
        entropies,
    })
}

const LEAF_TAG: u8 = 0;
const SPLIT_TAG: u8 = 1;

fn encode_ensemble(e: &TreeEnsemble<f64>) -> Writer {
    let mut w = Writer::new();
    w.u32(e.num_classes);
    w.u32(e.num_features);
    w.f64(e.learning_rate);
    w.u32(e.trees.len());
    for t in &e.trees {
        w.u32(t.node_count());
        for n in t.nodes() {
            match n {
                Node::Leaf { weight } => {
                    w.u8(LEAF_TAG);
                    w.f64(*weight);
                }
                Node::Split {
                    feature,
                    threshold,
                    right,
                } => {
                    w.u8(SPLIT_TAG);
                    w.u32(*feature as usize);
                    w.f64(*threshold);
                    w.u32(*right as usize);
                }
            }
        }
    }
    w
}

fn decode_ensemble(r: &mut Reader) -> Result<TreeEnsemble<f64>> {
    let num_classes = r.u32()?;
    let num_features = r.u32()?;
    let learning_rate = r.f64()?;
    let count = r.u32()?;
    let mut trees = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()?;
        let mut nodes = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            nodes.push(match r.u8()? {
                LEAF_TAG => Node::Leaf { weight: r.f64()? },
                SPLIT_TAG => Node::Split {
                    feature: r.u32()? as u32,
                    threshold: r.f64()?,
                    right: r.u32()? as u32,
                },
                other => return Err(Error::Consistency(format!("unknown tree node tag {other}"))),
            });
        }
        trees.push(Tree::from_nodes(nodes).map_err(|e| Error::Consistency(e.to_string()))?);
    }
    Ok(TreeEnsemble {
        num_classes,
        num_features,
        learning_rate,
        trees,
    })
}

fn encode_crf(c: &CrfConfig) -> Writer {
    let mut w = Writer::new();
    w.u32(c.iterations);
    for v in [
        c.spatial_weight,
        c.appearance_weight,
        c.spatial_sigma,
        c.appearance_sigma_xy,
        c.appearance_sigma_intensity,
    ] {
        w.f64(v);
    }
    w
}

fn decode_crf(r: &mut Reader) -> Result<CrfConfig> {
    Ok(CrfConfig {
        iterations: r.u32()?,
        spatial_weight: r.f64()?,
        appearance_weight: r.f64()?,
        spatial_sigma: r.f64()?,
        appearance_sigma_xy: r.f64()?,
        appearance_sigma_intensity: r.f64()?,
    })
}

pub fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut w = Writer::new();
    w.buf.extend_from_slice(&BUNDLE_MAGIC);
    w.u32(BUNDLE_VERSION as usize);
    let mut meta = Writer::new();
    meta.u64(bundle.seed);
    meta.u32(bundle.preprocess.target_size);
    w.block(b"META", meta);
    w.block(b"CASC", encode_cascade(&bundle.cascade)?);
    w.block(b"FSEL", encode_selection(&bundle.selection));
    w.block(b"GBDT", encode_ensemble(&bundle.ensemble));
    w.block(b"CRFC", encode_crf(&bundle.crf));
    Ok(w.buf)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader::new(bytes, "bundle header");
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != BUNDLE_MAGIC {
        return Err(Error::BadMagic {
            expected: BUNDLE_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()? as u32;
    if version != BUNDLE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    let mut meta = r.block(b"META", "metadata block")?;
    let seed = meta.u64()?;
    let preprocess = PreprocessSpec {
        target_size: meta.u32()?,
    };
    meta.finish()?;
    let mut casc = r.block(b"CASC", "cascade block")?;
    let cascade = decode_cascade(&mut casc)?;
    casc.finish()?;
    let mut fsel = r.block(b"FSEL", "selection block")?;
    let selection = decode_selection(&mut fsel)?;
    fsel.finish()?;
    let mut gbdt = r.block(b"GBDT", "tree block")?;
    let ensemble = decode_ensemble(&mut gbdt)?;
    gbdt.finish()?;
    let mut crfc = r.block(b"CRFC", "CRF block")?;
    let crf = decode_crf(&mut crfc)?;
    crfc.finish()?;
    r.context = "bundle";
    r.finish()?;
    let bundle = ModelBundle {
        preprocess,
        cascade,
        selection,
        ensemble,
        crf,
        seed,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    std::fs::write(path, encode_bundle(bundle)?)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    decode_bundle(&std::fs::read(path)?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cascade::fit_cascade;
    use crate::featsel::select_channels;

    /// A small but complete bundle built from real fitted stages.
    pub(crate) fn toy_bundle() -> ModelBundle {
        let images: Vec<FeatureMap<f64>> = (0..2)
            .map(|s| FeatureMap::new(16, 16, 1, (0..256).map(|i| ((i * 7 + s * 13) % 29) as f64 / 29.0).collect()).unwrap())
            .collect();
        let cfg = CascadeConfig {
            kernels_per_unit: vec![4, 6],
            ..CascadeConfig::default()
        };
        let cascade = fit_cascade(&images, &cfg, 1).unwrap();
        let entropies: Vec<ChannelEntropy> = (0..10)
            .map(|i| ChannelEntropy {
                unit_index: usize::from(i >= 4),
                channel_index: if i >= 4 { i - 4 } else { i },
                per_class_entropy: [0.1 * i as f64, 0.2, 0.3, 0.4],
                total: 0.1 * i as f64 + 0.9,
                range: (-(i as f64), i as f64 + 0.5),
            })
            .collect();
        let selection = select_channels(&entropies, 0.5).unwrap();
        let tree = Tree::from_nodes(vec![
            Node::Split {
                feature: 2,
                threshold: 0.375,
                right: 2,
            },
            Node::Leaf { weight: -0.5 },
            Node::Leaf { weight: 1.25 },
        ])
        .unwrap();
        let ensemble = TreeEnsemble {
            num_classes: 4,
            num_features: 5,
            learning_rate: 0.3,
            trees: vec![tree.clone(), Tree::leaf(0.1), tree, Tree::leaf(-0.2)],
        };
        ModelBundle {
            preprocess: PreprocessSpec { target_size: 16 },
            cascade,
            selection,
            ensemble,
            crf: CrfConfig::default(),
            seed: 77,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let b = toy_bundle();
        let bytes = encode_bundle(&b).unwrap();
        let back = decode_bundle(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(encode_bundle(&back).unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = encode_bundle(&toy_bundle()).unwrap();
        for cut in (0..bytes.len()).step_by(7) {
            match decode_bundle(&bytes[..cut]) {
                Err(Error::Truncated(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = encode_bundle(&toy_bundle()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bundle(&bad), Err(Error::BadMagic { .. })));
        bytes[4] = 9;
        assert!(matches!(decode_bundle(&bytes), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn mismatched_widths_are_inconsistent() {
        let mut b = toy_bundle();
        b.ensemble.num_features = 6;
        assert!(matches!(encode_bundle(&b), Err(Error::Consistency(_))));

        // Forge a file whose selection covers different unit widths.
        let good = toy_bundle();
        let mut forged = good.clone();
        forged.selection.unit_channels = vec![5, 5];
        let mut w = Writer::new();
        w.buf.extend_from_slice(&BUNDLE_MAGIC);
        w.u32(BUNDLE_VERSION as usize);
        let mut meta = Writer::new();
        meta.u64(good.seed);
        meta.u32(good.preprocess.target_size);
        w.block(b"META", meta);
        w.block(b"CASC", encode_cascade(&good.cascade).unwrap());
        w.block(b"FSEL", encode_selection(&forged.selection));
        w.block(b"GBDT", encode_ensemble(&good.ensemble));
        w.block(b"CRFC", encode_crf(&good.crf));
        assert!(matches!(decode_bundle(&w.buf), Err(Error::Consistency(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sslb");
        let b = toy_bundle();
        save_bundle(&b, &p).unwrap();
        assert_eq!(load_bundle(&p).unwrap(), b);
    }
}
