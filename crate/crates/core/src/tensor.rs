//! Dense tensor plumbing: feature maps, patch matrices, label maps and the
//! spatial operations shared by the rest of the pipeline.
//!
//! Everything is stored row-major in `(H, W, C)` order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::NUM_CLASSES;

/// An `H × W × C` response tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "feature map data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a single-channel map from rows of values.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(height, width, 1, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// All channel values of one pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Copies one channel out as a single-channel map.
    pub fn channel(&self, c: usize) -> FeatureMap<T> {
        assert!(c < self.channels);
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Keeps the listed channels, in the order given.
    pub fn select_channels(&self, keep: &[usize]) -> Result<FeatureMap<T>> {
        if keep.is_empty() {
            return Err(Error::invalid("cannot select zero channels"));
        }
        if let Some(&c) = keep.iter().find(|&&c| c >= self.channels) {
            return Err(Error::invalid(format!(
                "channel {c} out of range for {}-channel map",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.height * self.width * keep.len());
        for px in self.data.chunks_exact(self.channels) {
            data.extend(keep.iter().map(|&c| px[c]));
        }
        Ok(FeatureMap {
            height: self.height,
            width: self.width,
            channels: keep.len(),
            data,
        })
    }

    /// Per-channel `(min, max)`.
    pub fn channel_ranges(&self) -> Vec<(T, T)> {
        let mut ranges = vec![(T::infinity(), T::neg_infinity()); self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (r, &v) in ranges.iter_mut().zip(px) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        ranges
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// One flattened `k × k × C` neighbourhood per source pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    source_shape: (usize, usize, usize),
}

impl<T: Scalar> PatchMatrix<T> {
    /// Wraps raw rows. `source_shape` is `(H, W, C)` with `H·W = rows`.
    pub fn new(rows: usize, cols: usize, data: Vec<T>, source_shape: (usize, usize, usize)) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "patch data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if source_shape.0 * source_shape.1 != rows {
            return Err(Error::invalid(format!(
                "source shape {source_shape:?} does not have {rows} pixels"
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            source_shape,
        })
    }

    /// Rows without a spatial layout (shape `rows × 1 × cols`).
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if n == 0 || cols == 0 {
            return Err(Error::invalid("patch matrix needs at least one row and column"));
        }
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged patch rows"));
        }
        Self::new(n, cols, rows.concat(), (n, 1, cols))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn source_shape(&self) -> (usize, usize, usize) {
        self.source_shape
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.cols)
    }
}

/// Per-pixel class labels in `0..NUM_CLASSES`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(format!(
                "label data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label value {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        assert!((class as usize) < NUM_CLASSES);
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        assert!((class as usize) < NUM_CLASSES);
        self.data[y * self.width + x] = class;
    }

    /// Pixel counts per class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }

    /// Number of 4-connected components consisting of exactly one pixel.
    pub fn isolated_pixels(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut count = 0;
        for y in 0..h {
            for x in 0..w {
                let v = self.get(y, x);
                let same = (y > 0 && self.get(y - 1, x) == v)
                    || (y + 1 < h && self.get(y + 1, x) == v)
                    || (x > 0 && self.get(y, x - 1) == v)
                    || (x + 1 < w && self.get(y, x + 1) == v);
                if !same {
                    count += 1;
                }
            }
        }
        count
    }
}

/// Flattens the zero-padded `k × k` neighbourhood of every pixel, channel
/// fastest, so column `(dy·k + dx)·C + c` holds channel `c` at offset
/// `(dy − k/2, dx − k/2)`.
pub fn extract_patches<T: Scalar>(t: &FeatureMap<T>, window: usize) -> Result<PatchMatrix<T>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window must be odd and positive, got {window}")));
    }
    let (h, w, c) = t.shape();
    let half = (window / 2) as isize;
    let cols = window * window * c;
    let mut data = vec![T::zero(); h * w * cols];
    for (r, row) in data.chunks_exact_mut(cols).enumerate() {
        let (y, x) = ((r / w) as isize, (r % w) as isize);
        for dy in 0..window {
            let sy = y + dy as isize - half;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for dx in 0..window {
                let sx = x + dx as isize - half;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let dst = (dy * window + dx) * c;
                row[dst..dst + c].copy_from_slice(t.pixel(sy as usize, sx as usize));
            }
        }
    }
    PatchMatrix::new(h * w, cols, data, (h, w, c))
}

/// 2×2 max pooling with stride 2.
pub fn max_pool<T: Scalar>(t: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let (h, w, c) = t.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("max_pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let a = t.pixel(2 * y, 2 * x);
            let b = t.pixel(2 * y, 2 * x + 1);
            let d = t.pixel(2 * y + 1, 2 * x);
            let e = t.pixel(2 * y + 1, 2 * x + 1);
            out.extend((0..c).map(|k| a[k].max(b[k]).max(d[k].max(e[k]))));
        }
    }
    Ok(FeatureMap {
        height: oh,
        width: ow,
        channels: c,
        data: out,
    })
}

/// Nearest-neighbour block replication to an integer multiple of the source size.
pub fn upsample_nearest<T: Scalar>(t: &FeatureMap<T>, target_h: usize, target_w: usize) -> Result<FeatureMap<T>> {
    let (h, w, c) = t.shape();
    if target_h == 0 || target_w == 0 || !target_h.is_multiple_of(h) || !target_w.is_multiple_of(w) {
        return Err(Error::invalid(format!(
            "cannot upsample {h}x{w} to {target_h}x{target_w}: scale must be a positive integer"
        )));
    }
    let (sy, sx) = (target_h / h, target_w / w);
    let mut out = Vec::with_capacity(target_h * target_w * c);
    for y in 0..target_h {
        for x in 0..target_w {
            out.extend_from_slice(t.pixel(y / sy, x / sx));
        }
    }
    Ok(FeatureMap {
        height: target_h,
        width: target_w,
        channels: c,
        data: out,
    })
}

/// Stacks maps along the channel axis, in list order.
pub fn concat_channels<T: Scalar>(maps: &[FeatureMap<T>]) -> Result<FeatureMap<T>> {
    let first = maps.first().ok_or_else(|| Error::invalid("concat_channels of empty list"))?;
    let (h, w) = (first.height, first.width);
    if let Some(m) = maps.iter().find(|m| m.height != h || m.width != w) {
        return Err(Error::invalid(format!(
            "spatial mismatch in concat: {}x{} vs {h}x{w}",
            m.height, m.width
        )));
    }
    let channels: usize = maps.iter().map(|m| m.channels).sum();
    let mut data = Vec::with_capacity(h * w * channels);
    for p in 0..h * w {
        for m in maps {
            data.extend_from_slice(&m.data[p * m.channels..(p + 1) * m.channels]);
        }
    }
    Ok(FeatureMap {
        height: h,
        width: w,
        channels,
        data,
    })
}
