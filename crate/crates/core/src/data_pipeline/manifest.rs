//! Dataset manifests: one CSV row per sample.
//!
//! ```text
//! id,image,depth,label,guide,roi_cx,roi_cy,roi_side,glaucoma,depth_min,depth_max
//! s01,img/s01.png,depth/s01.png,,,256,240,256,,0.0,1.2
//! ```
//!
//! Empty cells mean "absent". Relative paths resolve against the manifest's
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RoiBox;
use crate::{CoreError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub image: PathBuf,
    #[serde(default)]
    pub depth: Option<PathBuf>,
    #[serde(default)]
    pub label: Option<PathBuf>,
    /// Depth or pseudo-depth map for the guide branch.
    #[serde(default)]
    pub guide: Option<PathBuf>,
    #[serde(default)]
    pub roi_cx: Option<i64>,
    #[serde(default)]
    pub roi_cy: Option<i64>,
    #[serde(default)]
    pub roi_side: Option<i64>,
    /// Clinical glaucoma label, used for ROC analysis.
    #[serde(default)]
    pub glaucoma: Option<bool>,
    /// Physical range encoded by a quantized depth PNG.
    #[serde(default)]
    pub depth_min: Option<f64>,
    #[serde(default)]
    pub depth_max: Option<f64>,
}

impl ManifestRow {
    pub fn new(id: impl Into<String>, image: impl Into<PathBuf>) -> Self {
        ManifestRow {
            id: id.into(),
            image: image.into(),
            ..ManifestRow::default()
        }
    }

    pub fn roi(&self) -> Result<Option<RoiBox>> {
        match (self.roi_cx, self.roi_cy, self.roi_side) {
            (Some(cx), Some(cy), Some(side)) => Ok(Some(RoiBox::new(cx, cy, side))),
            (None, None, None) => Ok(None),
            _ => Err(CoreError::Config(format!("row {}: partial ROI columns", self.id))),
        }
    }

    pub fn depth_range(&self) -> Option<(f64, f64)> {
        self.depth_min.zip(self.depth_max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let rows = reader.deserialize().collect::<Result<Vec<ManifestRow>, _>>()?;
        if rows.is_empty() {
            return Err(CoreError::Format {
                path: path.to_path_buf(),
                message: "manifest has no rows".into(),
            });
        }
        let mut ids: Vec<&str> = rows.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(CoreError::Format {
                path: path.to_path_buf(),
                message: format!("duplicate id {}", w[0]),
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { root, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.id.clone()).collect()
    }

    pub fn row(&self, id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.id == id)
    }
}
