//! Manifest rows loaded into ROI crops at the working resolution.

use super::io::{load_depth, load_labels, load_rgb};
use super::manifest::{Manifest, ManifestRow};
use super::resample::{resize_bilinear, resize_nearest};
use super::{crop_roi, resize_image, CanonicalStats, FundusImage};
use crate::raster::{DepthMap, Grid, LabelMap};
use crate::{CoreError, Result};

/// One manifest row cropped to its ROI and resized to `resolution²`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    /// Raw (unnormalized) RGB in `[0, 1]`.
    pub image: FundusImage,
    /// Depth in the manifest's physical units.
    pub depth: Option<DepthMap>,
    pub labels: Option<LabelMap>,
    /// Guide map in `[0, 1]`.
    pub guide: Option<DepthMap>,
    pub glaucoma: Option<bool>,
}

/// Crops a full-frame raster to the ROI, then resizes it.
fn fit<T: Clone>(
    grid: Grid<T>,
    frame: (usize, usize),
    row: &ManifestRow,
    resolution: usize,
    resize: impl Fn(&Grid<T>, usize, usize) -> Grid<T>,
) -> Result<Grid<T>> {
    let g = match row.roi()? {
        Some(roi) if grid.dims() == frame => roi.crop_grid(&grid)?,
        _ => grid,
    };
    Ok(if g.dims() == (resolution, resolution) {
        g
    } else {
        resize(&g, resolution, resolution)
    })
}

/// Loads one row. Rasters with the full image size are cropped to the ROI;
/// rasters of any other size are taken to be ROI crops already.
pub fn load_sample(manifest: &Manifest, row: &ManifestRow, resolution: usize) -> Result<LoadedSample> {
    if resolution == 0 {
        return Err(CoreError::Config("resolution must be positive".into()));
    }
    let full = load_rgb(&manifest.resolve(&row.image), &row.id)?.mark_raw();
    let frame = (full.height(), full.width());
    let image = match row.roi()? {
        Some(roi) => crop_roi(&full, roi, Some(resolution))?,
        None if frame == (resolution, resolution) => full,
        None => resize_image(&full, resolution, resolution),
    };
    let depth = match &row.depth {
        Some(p) => Some(fit(
            load_depth(&manifest.resolve(p), row.depth_range())?,
            frame,
            row,
            resolution,
            resize_bilinear,
        )?),
        None => None,
    };
    let labels = match &row.label {
        Some(p) => Some(fit(load_labels(&manifest.resolve(p))?, frame, row, resolution, resize_nearest)?),
        None => None,
    };
    let guide = match &row.guide {
        Some(p) => Some(fit(load_depth(&manifest.resolve(p), None)?, frame, row, resolution, resize_bilinear)?),
        None => None,
    };
    Ok(LoadedSample {
        id: row.id.clone(),
        image,
        depth,
        labels,
        guide,
        glaucoma: row.glaucoma,
    })
}

pub fn load_all(manifest: &Manifest, resolution: usize) -> Result<Vec<LoadedSample>> {
    manifest.rows.iter().map(|r| load_sample(manifest, r, resolution)).collect()
}

/// Moments of the canonical image: `canonical_id` if given, otherwise the
/// lexicographically first id.
pub fn canonical_stats(samples: &[LoadedSample], canonical_id: Option<&str>) -> Result<CanonicalStats> {
    let chosen = match canonical_id {
        Some(id) => samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CoreError::Config(format!("canonical image {id} is not in the training set")))?,
        None => samples.iter().min_by(|a, b| a.id.cmp(&b.id)).ok_or(CoreError::Empty("training set"))?,
    };
    CanonicalStats::from_image(&chosen.image)
}

/// Range of every depth value in the set.
pub fn depth_scaling(samples: &[LoadedSample]) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in samples {
        let d = s
            .depth
            .as_ref()
            .ok_or_else(|| CoreError::Config(format!("sample {} has no depth map", s.id)))?;
        for &v in d.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi > lo) {
        return Err(CoreError::Undefined("depth scaling of a constant depth set"));
    }
    Ok((lo, hi))
}

/// Maps depth onto `[0, 1]` with a dataset-level range, clamping outliers.
pub fn scale_depth(depth: &DepthMap, (lo, hi): (f64, f64)) -> DepthMap {
    depth.map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}
