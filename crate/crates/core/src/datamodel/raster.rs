use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::labels::LabelSpec;

/// Row-major H×W raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster dimensions must be at least 1"));
        }
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} raster needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Nearest-neighbour resampling with half-pixel centres. Only values
    /// already present in the raster can appear in the result.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Grid<T> {
        let xs: Vec<usize> = (0..width).map(|x| nearest_src(x, width, self.width)).collect();
        let ys: Vec<usize> = (0..height).map(|y| nearest_src(y, height, self.height)).collect();
        Grid::from_fn(width, height, |x, y| self.get(xs[x], ys[y]).clone())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Grid<T> {
        Grid::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y).clone())
    }
}

#[inline]
fn nearest_src(dst: usize, dst_len: usize, src_len: usize) -> usize {
    // floor((dst + 0.5) * src / dst_len) in integer arithmetic
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// RGB image with channel values in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pixels: Tensor,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            pixels: Tensor::zeros(3, height, width),
        }
    }

    /// Wrap a 3-channel tensor; values must lie in `[0, 1]`.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::shape(format!("image needs 3 channels, got {}", t.channels())));
        }
        if t.height() == 0 || t.width() == 0 {
            return Err(Error::invalid("image dimensions must be at least 1"));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels: t })
    }

    /// Build from a tensor, clamping every value into `[0, 1]`.
    pub fn from_tensor_clamped(mut t: Tensor) -> Result<Self> {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image tensor".into()));
        }
        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::from_tensor(t)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let p = f(x, y);
                img.set(x, y, [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)]);
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        [
            self.pixels.get(0, y, x),
            self.pixels.get(1, y, x),
            self.pixels.get(2, y, x),
        ]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            debug_assert!((0.0..=1.0).contains(&v));
            self.pixels.set(c, y, x, v);
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Grid<f64> {
        Grid::from_fn(self.width(), self.height(), |x, y| {
            let [r, g, b] = self.get(x, y);
            0.299 * r + 0.587 * g + 0.114 * b
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> ImageRgb {
        ImageRgb {
            pixels: self.pixels.crop(y0, x0, height, width),
        }
    }

    /// Largest per-channel absolute difference to another image of equal size.
    pub fn linf_distance(&self, other: &ImageRgb) -> f64 {
        self.pixels
            .data()
            .iter()
            .zip(other.pixels.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &ImageRgb) -> f64 {
        let n = self.pixels.data().len() as f64;
        self.pixels
            .data()
            .iter()
            .zip(other.pixels.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// Bilinear resampling with half-pixel centres (edge-clamped).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> ImageRgb {
        let (sw, sh) = (self.width(), self.height());
        let axis = |dst: usize, dst_len: usize, src_len: usize| -> (usize, usize, f64) {
            let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        };
        let xs: Vec<_> = (0..width).map(|x| axis(x, width, sw)).collect();
        let ys: Vec<_> = (0..height).map(|y| axis(y, height, sh)).collect();
        let mut out = Tensor::zeros(3, height, width);
        for c in 0..3 {
            let src = self.pixels.plane(c);
            let dst = out.plane_mut(c);
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
                    let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
                    dst[y * width + x] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
                }
            }
        }
        ImageRgb { pixels: out }
    }
}

/// Per-pixel class ids (train ids or the void id).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap(Grid<u8>);

impl SemanticMap {
    /// Wrap a label raster, checking every value against `spec`.
    pub fn new(labels: Grid<u8>, spec: &LabelSpec) -> Result<Self> {
        if let Some(&v) = labels.as_slice().iter().find(|&&v| !spec.is_valid(v)) {
            return Err(Error::UndeclaredLabel { value: v as u32 });
        }
        Ok(Self(labels))
    }

    /// Wrap without validation; callers guarantee the label invariant.
    pub fn from_grid_unchecked(labels: Grid<u8>) -> Self {
        Self(labels)
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        Self(Grid::filled(width, height, label))
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<u8> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        *self.0.get(x, y)
    }

    pub fn labels(&self) -> &[u8] {
        self.0.as_slice()
    }
}

/// Per-pixel instance ids; 0 means "no instance".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap(Grid<u32>);

impl InstanceMap {
    pub fn new(ids: Grid<u32>) -> Self {
        Self(ids)
    }

    pub fn grid(&self) -> &Grid<u32> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn ids(&self) -> &[u32] {
        self.0.as_slice()
    }

    /// Check that every nonzero id carries a single semantic label.
    pub fn check_consistent(&self, sem: &SemanticMap) -> Result<()> {
        if self.dims() != sem.dims() {
            return Err(Error::shape("instance and semantic maps differ in size"));
        }
        let mut seen: std::collections::HashMap<u32, u8> = std::collections::HashMap::new();
        for (&id, &lab) in self.ids().iter().zip(sem.labels()) {
            if id == 0 {
                continue;
            }
            let prev = *seen.entry(id).or_insert(lab);
            if prev != lab {
                return Err(Error::data(format!("instance {id} spans labels {prev} and {lab}")));
            }
        }
        Ok(())
    }
}

/// Ternary ground truth: normal, anomaly or ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnomalyMask(Grid<u8>);

impl AnomalyMask {
    pub const NORMAL: u8 = 0;
    pub const ANOMALY: u8 = 1;
    pub const IGNORE: u8 = 255;

    pub fn new(values: Grid<u8>) -> Result<Self> {
        if let Some(v) = values
            .as_slice()
            .iter()
            .find(|&&v| v != Self::NORMAL && v != Self::ANOMALY && v != Self::IGNORE)
        {
            return Err(Error::invalid(format!("anomaly mask value {v} is not 0, 1 or 255")));
        }
        Ok(Self(values))
    }

    pub fn all_normal(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, Self::NORMAL))
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn values(&self) -> &[u8] {
        self.0.as_slice()
    }

    pub fn count(&self, value: u8) -> usize {
        self.values().iter().filter(|&&v| v == value).count()
    }
}

/// Per-pixel anomaly score; higher means more anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap(Grid<f64>);

impl ScoreMap {
    pub fn new(scores: Grid<f64>) -> Result<Self> {
        if scores.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score map".into()));
        }
        Ok(Self(scores))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn scores(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn mean(&self) -> f64 {
        self.scores().iter().sum::<f64>() / self.scores().len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.scores()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Evaluation region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask(Grid<bool>);

impl RoiMask {
    pub fn new(valid: Grid<bool>) -> Self {
        Self(valid)
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, true))
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn values(&self) -> &[bool] {
        self.0.as_slice()
    }

    pub fn count(&self) -> usize {
        self.values().iter().filter(|&&v| v).count()
    }

    pub fn intersect(&self, other: &RoiMask) -> Result<RoiMask> {
        if self.dims() != other.dims() {
            return Err(Error::shape("roi masks differ in size"));
        }
        let (w, h) = self.dims();
        let data = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(RoiMask(Grid::from_vec(w, h, data)?))
    }
}
