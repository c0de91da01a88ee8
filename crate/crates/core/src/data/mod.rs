//! Slice loading, preprocessing, manifests and synthetic phantoms.

pub mod manifest;
pub mod pgm;
pub mod phantom;
pub mod preprocess;
pub mod raw;

use std::path::Path;

pub use manifest::{split_manifest, DatasetManifest, SliceRecord, Split};
pub use phantom::{default_split_counts, generate_phantom, phantom_specs, write_phantom_set, PhantomSpec};
pub use preprocess::{preprocess, preprocess_labels, PreprocessSpec};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, LabelMap};

/// Loads an image from a `P5` PGM or an `SST1` raw tensor, chosen by the
/// file's magic bytes.
pub fn load_image(path: &Path) -> Result<FeatureMap<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"P5") {
        pgm::read_pgm_image(path)
    } else if bytes.starts_with(&raw::RAW_MAGIC) {
        let map = raw::decode_raw(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(map.map(f64::from))
    } else {
        let head: Vec<u8> = bytes.iter().take(4).copied().collect();
        Err(Error::format(path, format!("unknown magic bytes {head:?}")))
    }
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    pgm::read_pgm_labels(path)
}

/// Image and, when the record has one, its label map.
pub fn load_slice(record: &SliceRecord) -> Result<(FeatureMap<f64>, Option<LabelMap>)> {
    let image = load_image(&record.image_path)?;
    if image.channels() != 1 {
        return Err(Error::format(
            &record.image_path,
            format!("expected a single-channel image, got {} channels", image.channels()),
        ));
    }
    let labels = match &record.label_path {
        Some(p) => {
            let l = load_labels(p)?;
            if (l.height(), l.width()) != (image.height(), image.width()) {
                return Err(Error::format(
                    p,
                    format!(
                        "labels are {}x{} but the image is {}x{}",
                        l.height(),
                        l.width(),
                        image.height(),
                        image.width()
                    ),
                ));
            }
            Some(l)
        }
        None => None,
    };
    Ok((image, labels))
}
