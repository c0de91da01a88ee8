//! Multiclass gradient-boosted regression trees with a softmax
//! cross-entropy objective and second-order split gains.
//!
//! Each round fits one tree per class to the gradients `p − y` and
//! hessians `p(1 − p)` of the current softmax margins. Splits maximise
//!
//! ```text
//! G_L²/(H_L + λ) + G_R²/(H_R + λ) − G²/(H + λ)
//! ```
//!
//! and leaves take the Newton step `−G/(H + λ)`, scaled by the learning rate
//! when added to the margins. A round whose step would raise the training
//! loss has its leaf weights halved until it no longer does.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::NUM_CLASSES;

/// Splits must improve the objective by more than this.
pub const MIN_SPLIT_GAIN: f64 = 1e-10;
const MIN_HESSIAN: f64 = 1e-16;
const MAX_HALVINGS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSearch {
    /// Quantile histograms with `histogram_bins` bins per feature.
    Histogram,
    /// Every midpoint between consecutive distinct values.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GbdtConfig {
    pub num_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub min_child_weight: f64,
    pub histogram_bins: usize,
    pub row_subsample: f64,
    pub seed: u64,
    pub split_search: SplitSearch,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            num_rounds: 100,
            max_depth: 6,
            learning_rate: 0.3,
            l2_reg: 1.0,
            min_child_weight: 1.0,
            histogram_bins: 64,
            row_subsample: 0.8,
            seed: 0,
            split_search: SplitSearch::Histogram,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.row_subsample > 0.0 && self.row_subsample <= 1.0) {
            return Err(Error::invalid("row_subsample must lie in (0, 1]"));
        }
        if !(self.l2_reg >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(Error::invalid("l2_reg and min_child_weight must be non-negative"));
        }
        if self.split_search == SplitSearch::Histogram && !(2..=u16::MAX as usize).contains(&self.histogram_bins) {
            return Err(Error::invalid("histogram_bins must lie in 2..=65535"));
        }
        Ok(())
    }
}

/// Pre-order tree node. The left child of a split is the next node.
#[derive(Clone, Debug, PartialEq)]
pub enum Node<T> {
    Leaf { weight: f64 },
    Split { feature: u32, threshold: T, right: u32 },
}

/// A regression tree; rows with `x[feature] <= threshold` go left.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tree<T> {
    pub fn leaf(weight: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { weight }],
        }
    }

    /// Builds a tree from a pre-order node list, checking its structure.
    pub fn from_nodes(nodes: Vec<Node<T>>) -> Result<Self> {
        fn walk<T>(nodes: &[Node<T>], i: usize) -> Result<usize> {
            match nodes.get(i) {
                None => Err(Error::invalid("tree node list ends early")),
                Some(Node::Leaf { .. }) => Ok(i + 1),
                Some(Node::Split { right, .. }) => {
                    let end_left = walk(nodes, i + 1)?;
                    if *right as usize != end_left {
                        return Err(Error::invalid("tree right-child offset is not pre-order"));
                    }
                    walk(nodes, end_left)
                }
            }
        }
        if walk(&nodes, 0)? != nodes.len() {
            return Err(Error::invalid("tree node list has trailing nodes"));
        }
        Ok(Self { nodes })
    }

    fn scale_leaves(&mut self, scale: f64) {
        for node in &mut self.nodes {
            if let Node::Leaf { weight } = node {
                *weight *= scale;
            }
        }
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn go<T>(nodes: &[Node<T>], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { right, .. } => 1 + go(nodes, i + 1).max(go(nodes, *right as usize)),
            }
        }
        go(&self.nodes, 0)
    }

    #[inline]
    pub fn predict(&self, row: &[T]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    right,
                } => {
                    i = if row[*feature as usize] <= *threshold {
                        i + 1
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    fn max_feature(&self) -> Option<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }
}

/// Boosted trees, stored round-major: tree `i` contributes to class
/// `i % num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeEnsemble<T> {
    pub num_classes: usize,
    pub num_features: usize,
    pub learning_rate: f64,
    pub trees: Vec<Tree<T>>,
}

impl<T: Scalar> TreeEnsemble<T> {
    pub fn empty(num_features: usize, learning_rate: f64) -> Self {
        Self {
            num_classes: NUM_CLASSES,
            num_features,
            learning_rate,
            trees: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(Tree::node_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::invalid(format!(
                "ensemble has {} classes, expected {NUM_CLASSES}",
                self.num_classes
            )));
        }
        if self.num_features == 0 {
            return Err(Error::invalid("ensemble has zero features"));
        }
        if let Some(f) = self.trees.iter().filter_map(Tree::max_feature).max() {
            if f as usize >= self.num_features {
                return Err(Error::invalid(format!(
                    "tree splits on feature {f} but ensemble width is {}",
                    self.num_features
                )));
            }
        }
        Ok(())
    }

    /// Raw class margins of one row.
    pub fn margins(&self, row: &[T]) -> [f64; NUM_CLASSES] {
        let mut m = [0.0; NUM_CLASSES];
        for (i, tree) in self.trees.iter().enumerate() {
            m[i % self.num_classes] += self.learning_rate * tree.predict(row);
        }
        m
    }
}

fn softmax(m: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (pi, &mi) in p.iter_mut().zip(m) {
        *pi = (mi - max).exp();
        sum += *pi;
    }
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Class probabilities for every row of a row-major `N × cols` matrix.
pub fn predict_proba<T: Scalar>(ensemble: &TreeEnsemble<T>, features: &[T], cols: usize) -> Result<Vec<[f64; NUM_CLASSES]>> {
    if cols != ensemble.num_features {
        return Err(Error::invalid(format!(
            "feature width {cols} does not match ensemble width {}",
            ensemble.num_features
        )));
    }
    if !features.len().is_multiple_of(cols) {
        return Err(Error::invalid("feature buffer is not a whole number of rows"));
    }
    Ok(features
        .par_chunks(cols)
        .map(|row| softmax(&ensemble.margins(row)))
        .collect())
}

/// Per-feature split candidates and the binned training matrix.
struct Binned<T> {
    rows: usize,
    /// Candidate thresholds per feature; bin `k` holds values in
    /// `(t[k−1], t[k]]`.
    thresholds: Vec<Vec<T>>,
    /// Column-major bin indices.
    bins: Vec<u16>,
    /// Histogram offset of each feature.
    offsets: Vec<usize>,
    total_bins: usize,
    /// Distinct values per feature in exhaustive mode, one per bin.
    values: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> Binned<T> {
    fn new(features: &[T], rows: usize, cols: usize, search: SplitSearch, max_bins: usize) -> Result<Self> {
        let per_feature: Vec<(Vec<T>, Vec<u16>)> = (0..cols)
            .into_par_iter()
            .map(|f| {
                let column: Vec<T> = (0..rows).map(|r| features[r * cols + f]).collect();
                let mut sorted = column.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
                let limit = match search {
                    SplitSearch::Histogram => Some(max_bins),
                    SplitSearch::Exhaustive => None,
                };
                let t = candidate_thresholds(&sorted, limit);
                if t.len() >= u16::MAX as usize {
                    return Err(Error::invalid("too many distinct values for exhaustive split search"));
                }
                let bins = column
                    .iter()
                    .map(|&v| t.partition_point(|&th| th < v) as u16)
                    .collect();
                Ok((t, bins))
            })
            .collect::<Result<_>>()?;
        let mut thresholds = Vec::with_capacity(cols);
        let mut bins = Vec::with_capacity(rows * cols);
        let mut offsets = Vec::with_capacity(cols);
        let mut total_bins = 0;
        let values = (search == SplitSearch::Exhaustive).then(|| {
            (0..cols)
                .map(|f| {
                    let mut v: Vec<T> = (0..rows).map(|r| features[r * cols + f]).collect();
                    v.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
                    v.dedup();
                    v
                })
                .collect()
        });
        for (t, b) in per_feature {
            offsets.push(total_bins);
            total_bins += t.len() + 1;
            thresholds.push(t);
            bins.extend(b);
        }
        Ok(Self {
            rows,
            thresholds,
            bins,
            offsets,
            total_bins,
            values,
        })
    }

    #[inline]
    fn bin(&self, feature: usize, row: usize) -> u16 {
        self.bins[feature * self.rows + row]
    }
}

fn midpoint<T: Scalar>(a: T, b: T) -> T {
    a + (b - a) / T::lit(2.0)
}

/// Thresholds between consecutive distinct values of a sorted column.
/// With a bin limit, only boundaries at the `k/limit` quantiles are kept.
fn candidate_thresholds<T: Scalar>(sorted: &[T], limit: Option<usize>) -> Vec<T> {
    let mut distinct: Vec<T> = Vec::new();
    let mut cum: Vec<usize> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if distinct.last() != Some(&v) {
            distinct.push(v);
            cum.push(0);
        }
        *cum.last_mut().unwrap() = i + 1;
    }
    let m = distinct.len();
    let boundaries: Vec<usize> = match limit {
        Some(b) if m > b => {
            let n = sorted.len();
            let mut out: Vec<usize> = Vec::with_capacity(b);
            for k in 1..b {
                let rank = (k * n).div_ceil(b);
                let j = cum.partition_point(|&c| c < rank);
                if j + 1 < m && out.last() != Some(&j) {
                    out.push(j);
                }
            }
            out
        }
        _ => (0..m.saturating_sub(1)).collect(),
    };
    boundaries
        .into_iter()
        .map(|j| midpoint(distinct[j], distinct[j + 1]))
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct GradPair {
    g: f64,
    h: f64,
}

struct BestSplit {
    feature: usize,
    bin: usize,
    gain: f64,
    left: GradPair,
}

struct Grower<'a, T> {
    binned: &'a Binned<T>,
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a GbdtConfig,
    nodes: Vec<Node<T>>,
    /// Split bin per node, for evaluating training rows without thresholds.
    node_bins: Vec<u16>,
}

impl<T: Scalar> Grower<'_, T> {
    fn histogram(&self, rows: &[u32]) -> Vec<GradPair> {
        let mut hist = vec![GradPair::default(); self.binned.total_bins];
        for (f, &off) in self.binned.offsets.iter().enumerate() {
            let col = &self.binned.bins[f * self.binned.rows..(f + 1) * self.binned.rows];
            for &r in rows {
                let r = r as usize;
                let e = &mut hist[off + col[r] as usize];
                e.g += self.grad[r];
                e.h += self.hess[r];
            }
        }
        hist
    }

    fn score(&self, s: GradPair) -> f64 {
        s.g * s.g / (s.h + self.config.l2_reg)
    }

    fn best_split(&self, hist: &[GradPair], total: GradPair) -> Option<BestSplit> {
        let parent = self.score(total);
        let mut best: Option<BestSplit> = None;
        let mut best_gain = MIN_SPLIT_GAIN;
        for (f, t) in self.binned.thresholds.iter().enumerate() {
            let off = self.binned.offsets[f];
            let mut left = GradPair::default();
            for k in 0..t.len() {
                left.g += hist[off + k].g;
                left.h += hist[off + k].h;
                let right = GradPair {
                    g: total.g - left.g,
                    h: total.h - left.h,
                };
                if left.h < self.config.min_child_weight || right.h < self.config.min_child_weight {
                    continue;
                }
                let gain = self.score(left) + self.score(right) - parent;
                if gain > best_gain {
                    best_gain = gain;
                    best = Some(BestSplit {
                        feature: f,
                        bin: k,
                        gain,
                        left,
                    });
                }
            }
        }
        best
    }

    fn leaf_weight(&self, s: GradPair) -> f64 {
        let denom = s.h + self.config.l2_reg;
        if denom <= 0.0 {
            0.0
        } else {
            -s.g / denom
        }
    }

    fn grow(&mut self, rows: &mut [u32], hist: Vec<GradPair>, total: GradPair, depth: usize) {
        let split = if depth < self.config.max_depth && rows.len() >= 2 {
            self.best_split(&hist, total)
        } else {
            None
        };
        let Some(split) = split else {
            self.nodes.push(Node::Leaf {
                weight: self.leaf_weight(total),
            });
            self.node_bins.push(0);
            return;
        };
        debug_assert!(split.gain > 0.0);

        let f = split.feature;
        let mut left_rows = Vec::with_capacity(rows.len());
        let mut right_rows = Vec::with_capacity(rows.len());
        for &r in rows.iter() {
            if self.binned.bin(f, r as usize) as usize <= split.bin {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        // Exhaustive mode places the threshold midway between the values
        // actually present at this node.
        let (threshold, cutoff) = match &self.binned.values {
            Some(values) => {
                let lo = left_rows.iter().map(|&r| self.binned.bin(f, r as usize)).max().unwrap_or(0);
                let hi = right_rows.iter().map(|&r| self.binned.bin(f, r as usize)).min().unwrap_or(0);
                let t = midpoint(values[f][lo as usize], values[f][hi as usize]);
                (t, values[f].partition_point(|&v| v <= t) - 1)
            }
            None => (self.binned.thresholds[f][split.bin], split.bin),
        };
        let n_left = left_rows.len();
        rows[..n_left].copy_from_slice(&left_rows);
        rows[n_left..].copy_from_slice(&right_rows);
        drop((left_rows, right_rows));

        let right_total = GradPair {
            g: total.g - split.left.g,
            h: total.h - split.left.h,
        };
        let (left_slice, right_slice) = rows.split_at_mut(n_left);
        // Build the smaller child's histogram directly, derive the other.
        let (left_hist, right_hist) = if left_slice.len() <= right_slice.len() {
            let lh = self.histogram(left_slice);
            let rh = subtract(&hist, &lh);
            (lh, rh)
        } else {
            let rh = self.histogram(right_slice);
            let lh = subtract(&hist, &rh);
            (lh, rh)
        };
        drop(hist);

        let idx = self.nodes.len();
        self.nodes.push(Node::Split {
            feature: f as u32,
            threshold,
            right: 0,
        });
        self.node_bins.push(cutoff as u16);
        self.grow(left_slice, left_hist, split.left, depth + 1);
        let right_idx = self.nodes.len() as u32;
        if let Node::Split { right, .. } = &mut self.nodes[idx] {
            *right = right_idx;
        }
        self.grow(right_slice, right_hist, right_total, depth + 1);
    }

    fn predict_binned(&self, row: usize) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { weight } => return *weight,
                Node::Split { feature, right, .. } => {
                    let f = *feature as usize;
                    i = if self.binned.bin(f, row) <= self.node_bins[i] {
                        i + 1
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

fn subtract(a: &[GradPair], b: &[GradPair]) -> Vec<GradPair> {
    a.iter()
        .zip(b)
        .map(|(x, y)| GradPair {
            g: x.g - y.g,
            h: x.h - y.h,
        })
        .collect()
}

/// Grows one tree on `rows` given per-row gradients and hessians. Returns
/// the tree and its output on every training row.
fn grow_tree<T: Scalar>(
    binned: &Binned<T>,
    grad: &[f64],
    hess: &[f64],
    rows: &[u32],
    config: &GbdtConfig,
) -> (Tree<T>, Vec<f64>) {
    let mut grower = Grower {
        binned,
        grad,
        hess,
        config,
        nodes: Vec::new(),
        node_bins: Vec::new(),
    };
    let mut rows = rows.to_vec();
    let hist = grower.histogram(&rows);
    let mut total = GradPair::default();
    for &r in &rows {
        total.g += grad[r as usize];
        total.h += hess[r as usize];
    }
    grower.grow(&mut rows, hist, total, 0);
    let outputs = (0..binned.rows).map(|r| grower.predict_binned(r)).collect();
    (Tree { nodes: grower.nodes }, outputs)
}

fn check_inputs<T: Scalar>(features: &[T], cols: usize, labels: &[u8]) -> Result<usize> {
    if cols == 0 {
        return Err(Error::invalid("need at least one feature column"));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::invalid("no training rows"));
    }
    if features.len() != n * cols {
        return Err(Error::invalid(format!(
            "feature buffer has {} values, expected {n}x{cols}",
            features.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::invalid(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features contain non-finite values"));
    }
    Ok(n)
}

fn mean_log_loss(margins: &[[f64; NUM_CLASSES]], labels: &[u8]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(m, &y)| {
            let max = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + m.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - m[y as usize]
        })
        .sum();
    total / labels.len() as f64
}

/// Trains an ensemble on a row-major `N × cols` matrix.
pub fn fit_gbdt<T: Scalar>(features: &[T], cols: usize, labels: &[u8], config: &GbdtConfig) -> Result<TreeEnsemble<T>> {
    fit_gbdt_traced(features, cols, labels, config).map(|(e, _)| e)
}

/// Like [`fit_gbdt`], also returning the mean training log-loss before the
/// first round and after every round.
pub fn fit_gbdt_traced<T: Scalar>(
    features: &[T],
    cols: usize,
    labels: &[u8],
    config: &GbdtConfig,
) -> Result<(TreeEnsemble<T>, Vec<f64>)> {
    config.validate()?;
    let n = check_inputs(features, cols, labels)?;
    let binned = Binned::new(features, n, cols, config.split_search, config.histogram_bins)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut margins = vec![[0.0f64; NUM_CLASSES]; n];
    let mut losses = vec![mean_log_loss(&margins, labels)];
    let mut ensemble = TreeEnsemble::empty(cols, config.learning_rate);
    let all_rows: Vec<u32> = (0..n as u32).collect();

    for _ in 0..config.num_rounds {
        let rows: Vec<u32> = if config.row_subsample < 1.0 {
            let k = ((config.row_subsample * n as f64).round() as usize).clamp(1, n);
            let mut idx: Vec<u32> = rand::seq::index::sample(&mut rng, n, k)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            idx.sort_unstable();
            idx
        } else {
            all_rows.clone()
        };
        let probs: Vec<[f64; NUM_CLASSES]> = margins.iter().map(softmax).collect();

        let grown: Vec<(Tree<T>, Vec<f64>)> = (0..NUM_CLASSES)
            .into_par_iter()
            .map(|class| {
                let mut grad = vec![0.0; n];
                let mut hess = vec![0.0; n];
                for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
                    let target = if y as usize == class { 1.0 } else { 0.0 };
                    grad[i] = p[class] - target;
                    hess[i] = (p[class] * (1.0 - p[class])).max(MIN_HESSIAN);
                }
                grow_tree(&binned, &grad, &hess, &rows, config)
            })
            .collect();

        // Halve the round's step until the training loss does not rise; a
        // zero step is the fallback.
        let previous = *losses.last().expect("initial loss");
        let mut scale = 1.0;
        let mut halvings = 0;
        let (next, loss) = loop {
            let mut next = margins.clone();
            for (class, (_, outputs)) in grown.iter().enumerate() {
                for (m, w) in next.iter_mut().zip(outputs) {
                    m[class] += config.learning_rate * scale * w;
                }
            }
            let loss = mean_log_loss(&next, labels);
            if loss <= previous || scale == 0.0 {
                break (next, loss);
            }
            halvings += 1;
            scale = if halvings < MAX_HALVINGS { scale * 0.5 } else { 0.0 };
        };
        margins = next;
        for (mut tree, _) in grown {
            if scale != 1.0 {
                tree.scale_leaves(scale);
            }
            ensemble.trees.push(tree);
        }
        losses.push(loss);
    }
    Ok((ensemble, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_rounds_is_uniform() {
        let x = vec![0.0f64, 1.0, 2.0];
        let e = fit_gbdt(&x, 1, &[0, 1, 2], &GbdtConfig { num_rounds: 0, ..Default::default() }).unwrap();
        assert!(e.trees.is_empty());
        for p in predict_proba(&e, &x, 1).unwrap() {
            assert_eq!(p, [0.25; 4]);
        }
    }

    #[test]
    fn single_leaf_closed_form() {
        let w = 1.7;
        let mut e = TreeEnsemble::<f64>::empty(2, 0.3);
        e.trees.push(Tree::leaf(w));
        let p = predict_proba(&e, &[5.0, -1.0], 2).unwrap()[0];
        let z = (0.3f64 * w).exp() + 3.0;
        assert!((p[0] - (0.3f64 * w).exp() / z).abs() < 1e-15);
        assert!((p[1] - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn constant_labels_follow_single_leaf_recursion() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..n * 2).map(|_| rng.random()).collect();
        let labels = vec![2u8; n];
        let cfg = GbdtConfig {
            num_rounds: 20,
            row_subsample: 1.0,
            ..Default::default()
        };
        let e = fit_gbdt(&x, 2, &labels, &cfg).unwrap();
        assert!(e.trees.iter().all(|t| t.node_count() == 1));

        // Closed-form oracle: every row shares the same margins, so each
        // class tree is a single leaf −n·g/(n·h + λ).
        let mut m = [0.0f64; 4];
        for _ in 0..20 {
            let p = softmax(&m);
            let mut step = [0.0; 4];
            for c in 0..4 {
                let g = p[c] - if c == 2 { 1.0 } else { 0.0 };
                let h = p[c] * (1.0 - p[c]);
                step[c] = -(n as f64 * g) / (n as f64 * h + 1.0);
            }
            for c in 0..4 {
                m[c] += 0.3 * step[c];
            }
        }
        let expected = softmax(&m);
        let probs = predict_proba(&e, &x, 2).unwrap();
        for p in &probs {
            for c in 0..4 {
                assert!((p[c] - expected[c]).abs() < 1e-9);
            }
            assert!(p[2] >= 0.99);
        }
    }

    #[test]
    fn separable_threshold_at_zero() {
        let x: Vec<f64> = (-10..10).map(|i| if i < 0 { i as f64 } else { i as f64 + 1.0 }).collect();
        let labels: Vec<u8> = x.iter().map(|&v| if v < 0.0 { 1 } else { 3 }).collect();
        let cfg = GbdtConfig {
            num_rounds: 10,
            max_depth: 1,
            row_subsample: 1.0,
            min_child_weight: 0.0,
            split_search: SplitSearch::Exhaustive,
            ..Default::default()
        };
        let e = fit_gbdt(&x, 1, &labels, &cfg).unwrap();
        for class in [1, 3] {
            match &e.trees[class].nodes()[0] {
                Node::Split { feature, threshold, .. } => {
                    assert_eq!(*feature, 0);
                    assert_eq!(*threshold, 0.0);
                }
                Node::Leaf { .. } => panic!("class {class} tree did not split"),
            }
        }
        let probs = predict_proba(&e, &x, 1).unwrap();
        for (p, &y) in probs.iter().zip(&labels) {
            let arg = (0..4).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(b.cmp(&a))).unwrap();
            assert_eq!(arg as u8, y);
        }
    }

    #[test]
    fn quantile_thresholds_sit_between_values() {
        let sorted: Vec<f64> = (0..1000).map(|i| (i / 3) as f64).collect();
        let t = candidate_thresholds(&sorted, Some(64));
        assert!(t.len() <= 63 && t.len() > 50);
        for &th in &t {
            assert!(th.fract() == 0.5, "threshold {th} is not a midpoint");
        }
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        let few = candidate_thresholds(&[1.0, 1.0, 2.0, 4.0], Some(64));
        assert_eq!(few, vec![1.5, 3.0]);
        assert!(candidate_thresholds(&[3.0f64; 10], Some(64)).is_empty());
    }

    #[test]
    fn oversized_steps_are_shortened() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 200;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let cfg = GbdtConfig {
            num_rounds: 30,
            learning_rate: 8.0,
            ..GbdtConfig::default()
        };
        let (e, losses) = fit_gbdt_traced(&x, 2, &labels, &cfg).unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
        // The stored trees reproduce the traced training loss.
        let probs = predict_proba(&e, &x, 2).unwrap();
        let loss: f64 = probs.iter().zip(&labels).map(|(p, &y)| -p[y as usize].ln()).sum::<f64>() / n as f64;
        assert!((loss - losses.last().unwrap()).abs() < 1e-9, "{loss} vs {:?}", losses.last());
    }

    #[test]
    fn loss_decreases_and_trees_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 300;
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let labels: Vec<u8> = (0..n)
            .map(|i| {
                let s = x[i * 3] + 0.5 * x[i * 3 + 1];
                if s < -1.0 { 0 } else if s < 0.0 { 1 } else if s < 1.0 { 2 } else { 3 }
            })
            .collect();
        let cfg = GbdtConfig {
            num_rounds: 30,
            max_depth: 3,
            seed: 1,
            ..Default::default()
        };
        let (e, losses) = fit_gbdt_traced(&x, 3, &labels, &cfg).unwrap();
        assert_eq!(e.trees.len(), 120);
        assert!(e.trees.iter().all(|t| t.depth() <= 3));
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss rose {} -> {}", w[0], w[1]);
        }
        let probs = predict_proba(&e, &x, 3).unwrap();
        for p in &probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
        let again = fit_gbdt(&x, 3, &labels, &cfg).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn input_errors() {
        let cfg = GbdtConfig::default();
        assert!(fit_gbdt::<f64>(&[], 1, &[], &cfg).is_err());
        assert!(fit_gbdt(&[1.0f64], 1, &[4], &cfg).is_err());
        assert!(fit_gbdt(&[1.0f64, 2.0], 1, &[0], &cfg).is_err());
        let e = TreeEnsemble::<f64>::empty(2, 0.3);
        assert!(predict_proba(&e, &[1.0, 2.0, 3.0], 3).is_err());
        let bad = GbdtConfig { row_subsample: 0.0, ..Default::default() };
        assert!(fit_gbdt(&[1.0f64], 1, &[0], &bad).is_err());
    }

    #[test]
    fn tree_structure_validation() {
        let nodes = vec![
            Node::Split { feature: 0, threshold: 0.5f64, right: 2 },
            Node::Leaf { weight: -1.0 },
            Node::Leaf { weight: 1.0 },
        ];
        let t = Tree::from_nodes(nodes.clone()).unwrap();
        assert_eq!(t.predict(&[0.2]), -1.0);
        assert_eq!(t.predict(&[0.5]), -1.0);
        assert_eq!(t.predict(&[0.7]), 1.0);
        assert_eq!(t.depth(), 1);
        let mut broken = nodes.clone();
        broken[0] = Node::Split { feature: 0, threshold: 0.5, right: 1 };
        assert!(Tree::from_nodes(broken).is_err());
        assert!(Tree::from_nodes(nodes[..2].to_vec()).is_err());
    }

    #[test]
    fn f32_features() {
        let x: Vec<f32> = (0..40).map(|i| i as f32).collect();
        let labels: Vec<u8> = (0..40).map(|i| if i < 20 { 0 } else { 1 }).collect();
        let e = fit_gbdt(&x, 1, &labels, &GbdtConfig { num_rounds: 5, ..Default::default() }).unwrap();
        let p = predict_proba(&e, &x, 1).unwrap();
        assert!(p[0][0] > p[0][1] && p[39][1] > p[39][0]);
    }
}
