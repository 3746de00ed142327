//! Raster file I/O: RGB fundus images, 16-bit depth PNGs, label PNGs and
//! `.npy` float containers.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use npyz::WriterBuilder;

use super::FundusImage;
use crate::raster::{BinaryMask, DepthMap, Grid, LabelMap, ProbabilityMap, BACKGROUND, CUP, DISC_RIM};
use crate::{CoreError, Result};

fn format_err(path: &Path, message: impl Into<String>) -> CoreError {
    CoreError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn is_sixteen_bit(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    )
}

/// Loads an 8- or 16-bit RGB image with values scaled to `[0, 1]`.
pub fn load_rgb(path: &Path, source_id: &str) -> Result<FundusImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut pixels = vec![0.0; 3 * plane];
    if is_sixteen_bit(&img) {
        let rgb = img.into_rgb16();
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                pixels[c * plane + i] = p.0[c] as f64 / 65535.0;
            }
        }
    } else {
        let rgb = img.into_rgb8();
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                pixels[c * plane + i] = p.0[c] as f64 / 255.0;
            }
        }
    }
    FundusImage::new(h, w, pixels, source_id)
}

pub fn save_rgb_png(image: &FundusImage, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (image.pixel(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    buf.save(path)?;
    Ok(())
}

/// Single-channel image scaled to `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Grid<f64>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_sixteen_bit(&img) {
        img.into_luma16().pixels().map(|p| p.0[0] as f64 / 65535.0).collect()
    } else {
        img.into_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect()
    };
    Grid::from_vec(h, w, data)
}

/// Loads a depth map. PNGs are dequantized into `range` (default `[0, 1]`);
/// `.npy` files are read as stored.
pub fn load_depth(path: &Path, range: Option<(f64, f64)>) -> Result<DepthMap> {
    if path.extension().is_some_and(|e| e == "npy") {
        let (shape, data) = read_npy(path)?;
        let (h, w) = match shape.as_slice() {
            [h, w] | [1, h, w] => (*h, *w),
            _ => return Err(format_err(path, format!("expected a 2-D depth array, got {shape:?}"))),
        };
        return Grid::from_vec(h, w, data);
    }
    let unit = load_gray(path)?;
    let (lo, hi) = range.unwrap_or((0.0, 1.0));
    Ok(unit.map(|v| lo + v * (hi - lo)))
}

/// 16-bit PNG of a map clamped to `[0, 1]`.
pub fn save_depth_png16(depth: &DepthMap, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(depth.width() as u32, depth.height() as u32, |x, y| {
        Luma([(depth.get(y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path)?;
    Ok(())
}

/// Label PNG: raw values `{0, 1, 2}` are taken as class indices; otherwise
/// grey levels snap to the nearest of 0 (background), 128 (rim), 255 (cup).
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
    let data = if raw.iter().all(|&v| v <= 2) {
        raw
    } else {
        raw.iter()
            .map(|&v| match v {
                0..=63 => BACKGROUND,
                64..=191 => DISC_RIM,
                _ => CUP,
            })
            .collect()
    };
    Grid::from_vec(h, w, data)
}

/// Writes labels as grey levels 0 / 128 / 255.
pub fn save_labels_png(labels: &LabelMap, path: &Path) -> Result<()> {
    let buf = GrayImage::from_fn(labels.width() as u32, labels.height() as u32, |x, y| {
        Luma([match *labels.get(y as usize, x as usize) {
            BACKGROUND => 0,
            DISC_RIM => 128,
            _ => 255,
        }])
    });
    buf.save(path)?;
    Ok(())
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let buf = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if *mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    buf.save(path)?;
    Ok(())
}

/// Reads a C-order `f64` or `f32` array.
pub fn read_npy(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let npy = npyz::NpyFile::new(&bytes[..])?;
    if npy.order() != npyz::Order::C {
        return Err(format_err(path, "only C-order arrays are supported"));
    }
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let data = match npy.dtype() {
        npyz::DType::Plain(ts) if ts.size_field() == 4 => npy.into_vec::<f32>()?.into_iter().map(f64::from).collect(),
        _ => npy.into_vec::<f64>()?,
    };
    Ok((shape, data))
}

pub fn write_npy(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    let shape: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
    let mut writer = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&shape)
        .writer(file)
        .begin_nd()?;
    writer.extend(data.iter().copied())?;
    writer.finish()?;
    Ok(())
}

/// Probability maps are stored as `[classes, height, width]` arrays.
pub fn save_probabilities(prob: &ProbabilityMap, path: &Path) -> Result<()> {
    write_npy(path, &[prob.classes(), prob.height(), prob.width()], prob.data())
}

pub fn load_probabilities(path: &Path) -> Result<ProbabilityMap> {
    let (shape, data) = read_npy(path)?;
    match shape.as_slice() {
        [c, h, w] => ProbabilityMap::from_planar(*h, *w, *c, data),
        _ => Err(format_err(path, format!("expected [classes, h, w], got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let d = Grid::from_fn(5, 7, |y, x| (y * 7 + x) as f64 / 34.0);
        save_depth_png16(&d, &path).unwrap();
        let back = load_depth(&path, None).unwrap();
        assert!(back.data().iter().zip(d.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 65535.0 + 1e-12));
        let scaled = load_depth(&path, Some((2.0, 4.0))).unwrap();
        assert!((scaled.get(4, 6) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let l = Grid::from_fn(6, 6, |y, x| ((y + 2 * x) % 3) as u8);
        save_labels_png(&l, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), l);
    }

    #[test]
    fn npy_probabilities_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.npy");
        let p = ProbabilityMap::one_hot(&Grid::from_fn(3, 4, |y, x| ((y + x) % 3) as u8), 3);
        save_probabilities(&p, &path).unwrap();
        assert_eq!(load_probabilities(&path).unwrap(), p);
    }

    #[test]
    fn rgb_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        let pixels = (0..3 * 20).map(|i| (i % 11) as f64 / 10.0).collect();
        let img = FundusImage::new(4, 5, pixels, "x").unwrap();
        save_rgb_png(&img, &path).unwrap();
        let back = load_rgb(&path, "x").unwrap();
        assert!(back.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }
}
