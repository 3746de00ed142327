//! Single-channel rasters and per-pixel class distributions.

use onh_tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Unit-normalized relative depth.
pub type DepthMap = Grid<f64>;
/// Per-pixel class index: 0 background, 1 disc rim, 2 cup.
pub type LabelMap = Grid<u8>;
pub type BinaryMask = Grid<bool>;

pub const BACKGROUND: u8 = 0;
pub const DISC_RIM: u8 = 1;
pub const CUP: u8 = 2;
pub const NUM_CLASSES: usize = 3;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn flip_horizontal(&self) -> Self {
        Grid::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x).clone())
    }

    pub fn flip_vertical(&self) -> Self {
        Grid::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x).clone())
    }
}

impl Grid<f64> {
    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.data.clone()).expect("grid shape")
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Affine rescale to `[0, 1]`; a constant grid maps to 0.5.
    pub fn rescaled_unit(&self) -> Self {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        if span <= f64::EPSILON * hi.abs().max(1.0) {
            return self.map(|_| 0.5);
        }
        self.map(|v| (v - lo) / span)
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel distribution over `classes` labels, stored class-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn from_planar(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * classes {
            return Err(CoreError::Shape(format!(
                "probability map {height}x{width}x{classes} got {} values",
                data.len()
            )));
        }
        Ok(ProbabilityMap {
            height,
            width,
            classes,
            data,
        })
    }

    /// Takes batch item `n` of a `[N, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Self {
        let s = t.shape();
        ProbabilityMap {
            height: s.h(),
            width: s.w(),
            classes: s.c(),
            data: t.item_slice(n).to_vec(),
        }
    }

    /// One-hot distribution of a label map.
    pub fn one_hot(labels: &LabelMap, classes: usize) -> Self {
        let plane = labels.len();
        let mut data = vec![0.0; plane * classes];
        for (i, &l) in labels.data().iter().enumerate() {
            data[l as usize * plane + i] = 1.0;
        }
        ProbabilityMap {
            height: labels.height(),
            width: labels.width(),
            classes,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn prob(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    pub fn class_plane(&self, class: usize) -> Grid<f64> {
        let plane = self.height * self.width;
        Grid {
            height: self.height,
            width: self.width,
            data: self.data[class * plane..(class + 1) * plane].to_vec(),
        }
    }

    pub fn argmax(&self) -> LabelMap {
        Grid::from_fn(self.height, self.width, |y, x| {
            let mut best = 0;
            for c in 1..self.classes {
                if self.prob(c, y, x) > self.prob(best, y, x) {
                    best = c;
                }
            }
            best as u8
        })
    }

    /// Largest deviation of a per-pixel sum from one, or a negative entry.
    pub fn normalization_error(&self) -> f64 {
        let plane = self.height * self.width;
        let mut worst: f64 = 0.0;
        for i in 0..plane {
            let mut s = 0.0;
            for c in 0..self.classes {
                let p = self.data[c * plane + i];
                if p < 0.0 {
                    worst = worst.max(-p);
                }
                s += p;
            }
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }
}
