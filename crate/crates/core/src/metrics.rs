//! Dice overlap and model-size reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::tensor::LabelMap;
use crate::NUM_CLASSES;

pub const FOREGROUND: [&str; 3] = ["RV", "MYO", "LV"];

/// `2|P∩T| / (|P| + |T|)`, or 1 when both masks are empty.
pub fn dice_per_class(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<f64> {
    let counts = overlap_counts(pred, truth)?;
    Ok(dice_from_counts(counts[class as usize]))
}

/// `(|P∩T|, |P|, |T|)` for every class.
pub fn overlap_counts(pred: &LabelMap, truth: &LabelMap) -> Result<[(u64, u64, u64); NUM_CLASSES]> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::invalid(format!(
            "prediction {}x{} and truth {}x{} differ in shape",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut out = [(0u64, 0u64, 0u64); NUM_CLASSES];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        out[p as usize].1 += 1;
        out[t as usize].2 += 1;
        if p == t {
            out[p as usize].0 += 1;
        }
    }
    Ok(out)
}

fn dice_from_counts((inter, p, t): (u64, u64, u64)) -> f64 {
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

/// How per-slice results are pooled into one report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Dice per slice, averaged over slices.
    #[default]
    Slice,
    /// Overlap counts summed per subject, Dice per subject, averaged over
    /// subjects.
    Subject,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// RV, MYO, LV.
    pub per_class: [f64; 3],
    pub average: f64,
    pub num_slices: usize,
}

impl DiceReport {
    pub fn from_scores(scores: &[[f64; 3]], num_slices: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("no slices to evaluate"));
        }
        let mut per_class = [0.0; 3];
        for s in scores {
            for (acc, v) in per_class.iter_mut().zip(s) {
                *acc += v;
            }
        }
        per_class.iter_mut().for_each(|v| *v /= scores.len() as f64);
        Ok(Self {
            per_class,
            average: per_class.iter().sum::<f64>() / 3.0,
            num_slices,
        })
    }

    /// Header line plus one row, tab-separated.
    pub fn to_tsv(&self) -> String {
        format!(
            "RV\tMYO\tLV\tAverage\tslices\n{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            self.per_class[0], self.per_class[1], self.per_class[2], self.average, self.num_slices
        )
    }

    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (name, v) in FOREGROUND.iter().zip(self.per_class) {
            writeln!(out, "dice_{}={v}", name.to_lowercase()).unwrap();
        }
        writeln!(out, "dice_average={}", self.average).unwrap();
        writeln!(out, "num_slices={}", self.num_slices).unwrap();
        out
    }
}

/// Foreground Dice of one slice.
pub fn slice_dice(pred: &LabelMap, truth: &LabelMap) -> Result<[f64; 3]> {
    let c = overlap_counts(pred, truth)?;
    Ok([dice_from_counts(c[1]), dice_from_counts(c[2]), dice_from_counts(c[3])])
}

/// Report over `(subject, prediction, truth)` triples.
pub fn evaluate_slices(slices: &[(&str, &LabelMap, &LabelMap)], pooling: Pooling) -> Result<DiceReport> {
    match pooling {
        Pooling::Slice => {
            let scores = slices
                .iter()
                .map(|(_, p, t)| slice_dice(p, t))
                .collect::<Result<Vec<_>>>()?;
            DiceReport::from_scores(&scores, slices.len())
        }
        Pooling::Subject => {
            let mut pooled: BTreeMap<&str, [(u64, u64, u64); NUM_CLASSES]> = BTreeMap::new();
            for &(s, p, t) in slices {
                let c = overlap_counts(p, t)?;
                let acc = pooled.entry(s).or_default();
                for (a, v) in acc.iter_mut().zip(c) {
                    a.0 += v.0;
                    a.1 += v.1;
                    a.2 += v.2;
                }
            }
            let scores: Vec<[f64; 3]> = pooled
                .values()
                .map(|c| [dice_from_counts(c[1]), dice_from_counts(c[2]), dice_from_counts(c[3])])
                .collect();
            DiceReport::from_scores(&scores, slices.len())
        }
    }
}

/// Parameter and size counts of a trained bundle. The cascade count is
/// the feature extractor alone; tree nodes are reported separately.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub per_unit: Vec<usize>,
    pub cascade: usize,
    pub kept_channels: usize,
    pub total_channels: usize,
    pub trees: usize,
    pub tree_nodes: usize,
    pub tree_leaves: usize,
}

pub fn report_params(bundle: &ModelBundle) -> ParamReport {
    let e = &bundle.ensemble;
    ParamReport {
        per_unit: bundle.cascade.banks.iter().map(|b| b.param_count()).collect(),
        cascade: bundle.cascade.param_count(),
        kept_channels: bundle.selection.kept_count(),
        total_channels: bundle.selection.total_channels(),
        trees: e.trees.len(),
        tree_nodes: e.node_count(),
        tree_leaves: e.trees.iter().map(|t| t.leaf_count()).sum(),
    }
}

impl ParamReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("stage\tparameters\n");
        for (i, p) in self.per_unit.iter().enumerate() {
            writeln!(out, "unit{}\t{p}", i + 1).unwrap();
        }
        writeln!(out, "cascade_total\t{}", self.cascade).unwrap();
        writeln!(out, "kept_channels\t{}/{}", self.kept_channels, self.total_channels).unwrap();
        writeln!(out, "trees\t{}", self.trees).unwrap();
        writeln!(out, "tree_nodes\t{}", self.tree_nodes).unwrap();
        writeln!(out, "tree_leaves\t{}", self.tree_leaves).unwrap();
        out
    }
}
