//! Fundus image ingestion: ROI cropping, canonical normalization,
//! augmentation and dataset splits.

mod augment;
pub mod dataset;
pub mod io;
pub mod manifest;
pub mod resample;
mod splits;

pub use augment::{augment, augment_all, AugmentPolicy, Sample, Target};
pub use splits::{make_splits, SplitMode, SplitSpec};

use onh_tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::raster::Grid;
use crate::{CoreError, Result};

/// Color fundus image stored channel-planar (R, G, B).
#[derive(Clone, Debug, PartialEq)]
pub struct FundusImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    normalized: bool,
    source_id: String,
}

impl FundusImage {
    /// Raw image with values in `[0, 1]`, laid out `[channel][y][x]`.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if pixels.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(CoreError::Shape(format!(
                "RGB image {height}x{width} needs {} values, got {}",
                3 * height * width,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::Config(format!("raw pixel value {v} outside [0, 1]")));
        }
        Ok(FundusImage {
            height,
            width,
            pixels,
            normalized: false,
            source_id: source_id.into(),
        })
    }

    /// Builds an image from three equally sized channel grids.
    pub fn from_channels(channels: [&Grid<f64>; 3], source_id: impl Into<String>) -> Result<Self> {
        let (h, w) = channels[0].dims();
        if channels.iter().any(|c| c.dims() != (h, w)) {
            return Err(CoreError::Shape("channel grids differ in size".into()));
        }
        let pixels = channels.iter().flat_map(|c| c.data().iter().copied()).collect();
        FundusImage::new(h, w, pixels, source_id)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn channel(&self, c: usize) -> Grid<f64> {
        let plane = self.height * self.width;
        Grid::from_vec(self.height, self.width, self.pixels[c * plane..(c + 1) * plane].to_vec())
            .expect("channel plane")
    }

    pub fn green(&self) -> Grid<f64> {
        self.channel(1)
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), self.pixels.clone()).expect("image shape")
    }

    /// Replace every channel through `f`, keeping metadata.
    pub(crate) fn map_channels(&self, mut f: impl FnMut(Grid<f64>) -> Grid<f64>) -> FundusImage {
        let channels: Vec<Grid<f64>> = (0..3).map(|c| f(self.channel(c))).collect();
        let (height, width) = channels[0].dims();
        FundusImage {
            height,
            width,
            pixels: channels.into_iter().flat_map(Grid::into_vec).collect(),
            normalized: self.normalized,
            source_id: self.source_id.clone(),
        }
    }

    pub(crate) fn with_pixels(&self, pixels: Vec<f64>) -> FundusImage {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        FundusImage {
            pixels,
            ..self.clone()
        }
    }

    /// Clears the normalization flag, e.g. to re-apply canonical stats.
    pub fn mark_raw(mut self) -> Self {
        self.normalized = false;
        self
    }

    /// Per-channel population mean and standard deviation.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let plane = (self.height * self.width) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let ch = self.channel(c);
            let m = ch.data().iter().sum::<f64>() / plane;
            let v = ch.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / plane;
            mean[c] = m;
            std[c] = v.sqrt();
        }
        (mean, std)
    }
}

/// Square region of interest around the optic nerve head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub center_x: i64,
    pub center_y: i64,
    pub side: i64,
}

impl RoiBox {
    pub fn new(center_x: i64, center_y: i64, side: i64) -> Self {
        RoiBox {
            center_x,
            center_y,
            side,
        }
    }

    /// Top-left corner; the box spans `[x0, x0 + side)`.
    pub fn origin(&self) -> (i64, i64) {
        (self.center_x - self.side / 2, self.center_y - self.side / 2)
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        let (x0, y0) = self.origin();
        let inside = self.side > 0
            && x0 >= 0
            && y0 >= 0
            && x0 + self.side <= width as i64
            && y0 + self.side <= height as i64;
        if inside {
            Ok(())
        } else {
            Err(CoreError::RoiOutOfBounds {
                cx: self.center_x,
                cy: self.center_y,
                side: self.side,
                width,
                height,
            })
        }
    }

    pub fn crop_grid<T: Clone>(&self, grid: &Grid<T>) -> Result<Grid<T>> {
        self.check_within(grid.width(), grid.height())?;
        let (x0, y0) = self.origin();
        let s = self.side as usize;
        Ok(Grid::from_fn(s, s, |y, x| {
            grid.get(y0 as usize + y, x0 as usize + x).clone()
        }))
    }
}

/// Exact sub-array extraction of the ROI, optionally resized to `resize_to`.
pub fn crop_roi(image: &FundusImage, roi: RoiBox, resize_to: Option<usize>) -> Result<FundusImage> {
    roi.check_within(image.width, image.height)?;
    let cropped = image.map_channels(|c| roi.crop_grid(&c).expect("bounds checked"));
    Ok(match resize_to {
        Some(r) if r != roi.side as usize => resize_image(&cropped, r, r),
        _ => cropped,
    })
}

/// Bilinear resize of every channel.
pub fn resize_image(image: &FundusImage, height: usize, width: usize) -> FundusImage {
    image.map_channels(|c| resample::resize_bilinear(&c, height, width))
}

/// Target per-channel moments every image is mapped onto.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl CanonicalStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(CoreError::ZeroVariance { channel: c });
        }
        Ok(CanonicalStats { mean, std })
    }

    /// Moments of a reference (canonical) image.
    pub fn from_image(image: &FundusImage) -> Result<Self> {
        let (mean, std) = image.channel_stats();
        CanonicalStats::new(mean, std)
    }
}

/// Standardize each channel, then map it onto the canonical mean/std.
pub fn normalize_to_canonical(image: &FundusImage, stats: &CanonicalStats) -> Result<FundusImage> {
    if image.normalized {
        return Err(CoreError::AlreadyNormalized(image.source_id.clone()));
    }
    let (mean, std) = image.channel_stats();
    if let Some(c) = std.iter().position(|&s| s <= 1e-12) {
        return Err(CoreError::ZeroVariance { channel: c });
    }
    let plane = image.height * image.width;
    let mut pixels = image.pixels.clone();
    for c in 0..3 {
        for v in &mut pixels[c * plane..(c + 1) * plane] {
            *v = (*v - mean[c]) / std[c] * stats.std[c] + stats.mean[c];
        }
    }
    let mut out = image.with_pixels(pixels);
    out.normalized = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(h: usize, w: usize) -> FundusImage {
        let plane = h * w;
        let pixels = (0..3 * plane)
            .map(|i| {
                let c = i / plane;
                let p = i % plane;
                ((p * (c + 3)) % 97) as f64 / 96.0
            })
            .collect();
        FundusImage::new(h, w, pixels, "ramp").unwrap()
    }

    #[test]
    fn crop_is_exact_subarray() {
        let img = ramp_image(512, 512);
        let crop = crop_roi(&img, RoiBox::new(256, 256, 256), None).unwrap();
        assert_eq!((crop.height(), crop.width()), (256, 256));
        for c in 0..3 {
            for (y, x) in [(0, 0), (17, 200), (255, 255)] {
                assert_eq!(crop.pixel(c, y, x), img.pixel(c, y + 128, x + 128));
            }
        }
    }

    #[test]
    fn crop_outside_bounds_reports_coordinates() {
        let img = ramp_image(64, 64);
        let err = crop_roi(&img, RoiBox::new(60, 32, 16), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("60,32") && msg.contains("16"), "{msg}");
        assert!(crop_roi(&img, RoiBox::new(32, 32, 0), None).is_err());
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let img = FundusImage::new(32, 32, vec![0.3; 3 * 32 * 32], "c").unwrap();
        let crop = crop_roi(&img, RoiBox::new(16, 16, 8), Some(16)).unwrap();
        assert!(crop.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn normalization_hits_canonical_moments() {
        // Channel with mean 0.4 and std 0.1 maps onto (0.5, 0.2).
        let plane = 64;
        let base: Vec<f64> = (0..plane).map(|i| if i % 2 == 0 { 0.3 } else { 0.5 }).collect();
        let mut pixels = base.clone();
        pixels.extend(base.iter().map(|v| v * 0.5 + 0.2));
        pixels.extend(base.iter().map(|v| 1.0 - v));
        let img = FundusImage::new(8, 8, pixels, "two-level").unwrap();
        let (m, s) = img.channel_stats();
        assert!((m[0] - 0.4).abs() < 1e-12 && (s[0] - 0.1).abs() < 1e-12);
        let stats = CanonicalStats::new([0.5, 0.45, 0.3], [0.2, 0.1, 0.05]).unwrap();
        let out = normalize_to_canonical(&img, &stats).unwrap();
        let (m, s) = out.channel_stats();
        for c in 0..3 {
            assert!((m[c] - stats.mean[c]).abs() < 1e-12);
            assert!((s[c] - stats.std[c]).abs() < 1e-12);
        }
        assert!(out.is_normalized());
        assert!(normalize_to_canonical(&out, &stats).is_err());
    }

    #[test]
    fn normalization_fixed_point_and_zero_variance() {
        let img = ramp_image(16, 16);
        let stats = CanonicalStats::from_image(&img).unwrap();
        let out = normalize_to_canonical(&img, &stats).unwrap();
        assert!(out.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() < 1e-6));

        let mut pixels = img.pixels().to_vec();
        pixels[256..512].fill(0.7);
        let flat = FundusImage::new(16, 16, pixels, "flat-green").unwrap();
        match normalize_to_canonical(&flat, &stats) {
            Err(CoreError::ZeroVariance { channel: 1 }) => {}
            other => panic!("expected zero-variance error on channel 1, got {other:?}"),
        }
    }

    #[test]
    fn raw_pixels_must_be_unit_range() {
        assert!(FundusImage::new(1, 1, vec![0.0, 1.2, 0.5], "bad").is_err());
    }
}
