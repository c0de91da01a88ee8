//! Dataset manifests: one slice per line, tab-separated
//! `subject_id  image_path  label_path|-  split`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceRecord {
    pub subject_id: String,
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<SliceRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<SliceRecord>) -> Self {
        Self { records }
    }

    /// Parses manifest text. Relative paths are resolved against `base`.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [subject, image, label, split] = fields[..] else {
                return Err(Error::invalid(format!(
                    "manifest line {}: expected 4 tab-separated fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            };
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            records.push(SliceRecord {
                subject_id: subject.to_string(),
                image_path: resolve(image),
                label_path: (label != "-").then(|| resolve(label)),
                split: split
                    .parse()
                    .map_err(|e| Error::invalid(format!("manifest line {}: {e}", lineno + 1)))?,
            });
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Serialises with paths made relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let show = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::new();
        for r in &self.records {
            let label = r.label_path.as_deref().map_or_else(|| "-".to_string(), show);
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.subject_id, show(&r.image_path), label, r.split));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::write(path, self.to_text(base))?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&SliceRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Distinct subject ids, sorted.
    pub fn subjects(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.subject_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Number of distinct subjects per split.
    pub fn subject_counts(&self) -> BTreeMap<Split, usize> {
        let mut sets: BTreeMap<Split, Vec<&str>> = BTreeMap::new();
        for r in &self.records {
            sets.entry(r.split).or_default().push(&r.subject_id);
        }
        sets.into_iter()
            .map(|(s, mut ids)| {
                ids.sort_unstable();
                ids.dedup();
                (s, ids.len())
            })
            .collect()
    }
}

/// Reassigns splits at the subject level. Subjects are sorted, shuffled
/// with `seed`, and dealt out as `counts = (train, val, test)`; subjects
/// beyond the total are dropped together with their slices.
pub fn split_manifest(records: &[SliceRecord], seed: u64, counts: (usize, usize, usize)) -> Result<DatasetManifest> {
    let mut subjects: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let (train, val, test) = counts;
    let needed = train + val + test;
    if needed > subjects.len() {
        return Err(Error::invalid(format!(
            "split needs {needed} subjects but only {} are available",
            subjects.len()
        )));
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment: HashMap<&str, Split> = subjects
        .iter()
        .take(needed)
        .enumerate()
        .map(|(i, &s)| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (s, split)
        })
        .collect();
    let records = records
        .iter()
        .filter_map(|r| {
            assignment.get(r.subject_id.as_str()).map(|&split| SliceRecord {
                split,
                ..r.clone()
            })
        })
        .collect();
    Ok(DatasetManifest { records })
}
