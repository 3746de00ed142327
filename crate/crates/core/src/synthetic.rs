//! Procedural fundus-like corpus with known depth, disc/cup labels and vessels.
//!
//! Each eye is a square frame with the optic nerve head near its centre. The
//! depth field is a flat background plus a smooth bowl under the cup; the
//! green channel darkens linearly with depth and carries thin dark vessels.
//! Labels are nested ellipses, so the vertical cup-to-disc ratio is known.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_pipeline::io::{save_depth_png16, save_labels_png, save_rgb_png};
use crate::data_pipeline::manifest::{Manifest, ManifestRow};
use crate::data_pipeline::{FundusImage, RoiBox};
use crate::evaluation::GLAUCOMA_CDR_THRESHOLD;
use crate::raster::{BinaryMask, DepthMap, Grid, LabelMap, BACKGROUND, CUP, DISC_RIM};
use crate::Result;

pub const DEFAULT_SIZE: usize = 64;
/// Physical depth encoded by the written 16-bit depth PNGs.
pub const DEPTH_RANGE: (f64, f64) = (0.0, 0.8);

#[derive(Clone, Debug)]
pub struct SyntheticEye {
    pub id: String,
    /// Full frame; the ROI holds the optic nerve head.
    pub image: FundusImage,
    pub depth: DepthMap,
    pub labels: LabelMap,
    pub vessels: BinaryMask,
    pub roi: RoiBox,
    /// Vertical cup-to-disc ratio of the generating ellipses.
    pub cdr: f64,
    pub glaucoma: bool,
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// One eye whose ROI side is `size`; the frame is half again as large.
pub fn synthetic_eye(seed: u64, index: usize, size: usize) -> SyntheticEye {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let s = size as f64;
    let frame = size + size / 2;
    let f = frame as f64;

    let cx = f / 2.0 + rng.random_range(-s / 10.0..s / 10.0);
    let cy = f / 2.0 + rng.random_range(-s / 10.0..s / 10.0);
    let disc_rx = s * rng.random_range(0.24..0.30);
    let disc_ry = disc_rx * rng.random_range(1.0..1.12);
    let cdr = rng.random_range(0.3..0.8);
    let cup_ry = cdr * disc_ry;
    let cup_rx = (cdr * disc_rx * rng.random_range(0.9..1.05)).min(0.95 * disc_rx);
    let bowl_depth = rng.random_range(0.5..0.7);
    let tilt = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));

    let ellipse_r = |x: f64, y: f64, rx: f64, ry: f64| (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();

    let depth = Grid::from_fn(frame, frame, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let base = 0.15 + tilt.0 * (px / f - 0.5) + tilt.1 * (py / f - 0.5);
        // Bowl reaches slightly past the cup rim so the wall is smooth.
        let r = ellipse_r(px, py, cup_rx * 1.25, cup_ry * 1.25);
        let bowl = if r < 1.0 { (1.0 - r * r).powi(2) } else { 0.0 };
        base + bowl_depth * bowl
    });

    let labels = Grid::from_fn(frame, frame, |y, x| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if ellipse_r(px, py, cup_rx, cup_ry) <= 1.0 {
            CUP
        } else if ellipse_r(px, py, disc_rx, disc_ry) <= 1.0 {
            DISC_RIM
        } else {
            BACKGROUND
        }
    });

    // Vessel trees leave the disc centre as gently bending polylines.
    let n_vessels = rng.random_range(4..7);
    let mut vessels: Vec<(Vec<(f64, f64)>, f64, f64)> = Vec::new();
    for v in 0..n_vessels {
        let mut angle = v as f64 / n_vessels as f64 * std::f64::consts::TAU + rng.random_range(-0.4..0.4);
        let mut p = (cx + rng.random_range(-2.0..2.0), cy + rng.random_range(-2.0..2.0));
        let mut pts = vec![p];
        let step = s / 12.0;
        while p.0 > -step && p.0 < f + step && p.1 > -step && p.1 < f + step {
            angle += rng.random_range(-0.25..0.25);
            p = (p.0 + step * angle.cos(), p.1 + step * angle.sin());
            pts.push(p);
        }
        let width = rng.random_range(1.0..3.0);
        let darkness = rng.random_range(0.12..0.22);
        vessels.push((pts, width, darkness));
    }
    let mut darken = Grid::filled(frame, frame, 0.0f64);
    for y in 0..frame {
        for x in 0..frame {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            for (pts, width, darkness) in &vessels {
                let d = pts.windows(2).map(|w| dist_to_segment(p, w[0], w[1])).fold(f64::INFINITY, f64::min);
                if d <= width / 2.0 {
                    darken.set(y, x, darken.get(y, x).max(*darkness));
                }
            }
        }
    }
    let vessel_mask = darken.map(|&d| d > 0.0);

    let plane = frame * frame;
    let mut pixels = vec![0.0; 3 * plane];
    for i in 0..plane {
        let d = depth.data()[i];
        let dk = darken.data()[i];
        let pallor = 1.0 - d;
        pixels[i] = (0.35 + 0.45 * pallor - 0.5 * dk + rng.random_range(-0.01..0.01)).clamp(0.0, 1.0);
        pixels[plane + i] = (0.1 + 0.7 * pallor - dk).clamp(0.0, 1.0);
        pixels[2 * plane + i] = (0.08 + 0.3 * pallor - 0.3 * dk + rng.random_range(-0.01..0.01)).clamp(0.0, 1.0);
    }
    let id = format!("syn{index:04}");
    let image = FundusImage::new(frame, frame, pixels, id.clone()).expect("matching sizes").mark_raw();
    let roi = RoiBox::new(cx.round() as i64, cy.round() as i64, size as i64);

    SyntheticEye {
        id,
        image,
        depth,
        labels,
        vessels: vessel_mask,
        roi,
        cdr,
        glaucoma: cdr > GLAUCOMA_CDR_THRESHOLD,
    }
}

pub fn synthetic_corpus(n: usize, size: usize, seed: u64) -> Vec<SyntheticEye> {
    (0..n).map(|i| synthetic_eye(seed, i, size)).collect()
}

/// Writes `image/`, `depth/`, `label/` PNGs and `manifest.csv` under `dir`.
pub fn write_corpus(dir: &Path, eyes: &[SyntheticEye]) -> Result<Manifest> {
    for sub in ["image", "depth", "label"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let (lo, hi) = DEPTH_RANGE;
    let mut rows = Vec::with_capacity(eyes.len());
    for eye in eyes {
        let image = format!("image/{}.png", eye.id);
        let depth = format!("depth/{}.png", eye.id);
        let label = format!("label/{}.png", eye.id);
        save_rgb_png(&eye.image, &dir.join(&image))?;
        let unit = eye.depth.map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0));
        save_depth_png16(&unit, &dir.join(&depth))?;
        save_labels_png(&eye.labels, &dir.join(&label))?;
        rows.push(ManifestRow {
            depth: Some(depth.into()),
            label: Some(label.into()),
            roi_cx: Some(eye.roi.center_x),
            roi_cy: Some(eye.roi.center_y),
            roi_side: Some(eye.roi.side),
            glaucoma: Some(eye.glaucoma),
            depth_min: Some(lo),
            depth_max: Some(hi),
            ..ManifestRow::new(eye.id.clone(), image)
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        rows,
    };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
