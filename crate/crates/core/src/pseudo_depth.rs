//! Pseudo-depth targets: the inverted green channel with vessels inpainted.

use image::{GrayImage, Luma};
use imageproc::contrast::otsu_level;
use imageproc::morphology::{grayscale_close, Mask};

use crate::data_pipeline::FundusImage;
use crate::raster::{BinaryMask, Grid};
use crate::{CoreError, Result};

/// Disk radius of the closing element at a 256-pixel working resolution.
pub const VESSEL_RADIUS_AT_256: f64 = 7.0;
/// Minimum top-hat response, in unit intensity, for a pixel to count as vessel.
pub const MIN_VESSEL_CONTRAST: f64 = 4.0 / 255.0;
pub const INPAINT_TOLERANCE: f64 = 1e-4;
pub const INPAINT_MAX_ITERS: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDepthMap {
    pub values: Grid<f64>,
    /// Pixels whose values were inpainted.
    pub vessel_mask: BinaryMask,
}

fn to_gray8(g: &Grid<f64>) -> GrayImage {
    GrayImage::from_fn(g.width() as u32, g.height() as u32, |x, y| {
        Luma([(g.get(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Dark, thin structures of the green channel: black top-hat with a disk
/// element followed by an Otsu threshold on the response.
pub fn segment_vessels(image: &FundusImage) -> BinaryMask {
    let green = image.green().rescaled_unit();
    let (h, w) = green.dims();
    let radius = (VESSEL_RADIUS_AT_256 * h.min(w) as f64 / 256.0).round().clamp(1.0, 255.0) as u8;
    let g8 = to_gray8(&green);
    let closed = grayscale_close(&g8, &Mask::disk(radius));
    let tophat = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([closed.get_pixel(x, y)[0].saturating_sub(g8.get_pixel(x, y)[0])])
    });
    let level = otsu_level(&tophat);
    let floor = (MIN_VESSEL_CONTRAST * 255.0).round() as u8;
    Grid::from_fn(h, w, |y, x| {
        let v = tophat.get_pixel(x as u32, y as u32)[0];
        v > level && v >= floor
    })
}

/// Fills masked pixels from their unmasked surroundings.
///
/// Pixels are first seeded layer by layer from already known 4-neighbours,
/// then relaxed by Gauss-Seidel neighbour averaging until the largest change
/// drops below [`INPAINT_TOLERANCE`] or [`INPAINT_MAX_ITERS`] sweeps.
pub fn inpaint(channel: &Grid<f64>, mask: &BinaryMask) -> Result<Grid<f64>> {
    if !channel.same_dims(mask) {
        return Err(CoreError::Shape(format!(
            "inpaint mask {:?} vs channel {:?}",
            mask.dims(),
            channel.dims()
        )));
    }
    let holes = mask.count();
    if holes == 0 {
        return Ok(channel.clone());
    }
    if holes == mask.len() {
        return Err(CoreError::FullMask);
    }
    let (h, w) = channel.dims();
    let mut out = channel.clone();
    let neighbours = |y: usize, x: usize| {
        [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)]
            .into_iter()
            .filter(move |&(ny, nx)| ny < h && nx < w)
    };

    let mut known = mask.map(|m| !m);
    let mut pending: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| *mask.get(y, x))
        .collect();
    while !pending.is_empty() {
        let mut layer = Vec::new();
        let mut rest = Vec::new();
        for &(y, x) in &pending {
            let (sum, n) = neighbours(y, x)
                .filter(|&(ny, nx)| *known.get(ny, nx))
                .fold((0.0, 0), |(s, n), (ny, nx)| (s + out.get(ny, nx), n + 1));
            if n > 0 {
                layer.push((y, x, sum / n as f64));
            } else {
                rest.push((y, x));
            }
        }
        for (y, x, v) in layer {
            out.set(y, x, v);
            known.set(y, x, true);
        }
        pending = rest;
    }

    let holes: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| *mask.get(y, x))
        .collect();
    for _ in 0..INPAINT_MAX_ITERS {
        let mut change: f64 = 0.0;
        for &(y, x) in &holes {
            let (sum, n) = neighbours(y, x).fold((0.0, 0), |(s, n), (ny, nx)| (s + out.get(ny, nx), n + 1));
            let v = sum / n as f64;
            change = change.max((v - out.get(y, x)).abs());
            out.set(y, x, v);
        }
        if change < INPAINT_TOLERANCE {
            break;
        }
    }
    Ok(out)
}

/// Pseudo-depth with vessels detected by [`segment_vessels`].
pub fn make_pseudo_depth(image: &FundusImage) -> Result<PseudoDepthMap> {
    let mask = segment_vessels(image);
    make_pseudo_depth_with_mask(image, mask)
}

/// `inpaint(1 - rescale(green), mask)`.
pub fn make_pseudo_depth_with_mask(image: &FundusImage, mask: BinaryMask) -> Result<PseudoDepthMap> {
    let inverted = image.green().rescaled_unit().map(|g| 1.0 - g);
    let values = inpaint(&inverted, &mask)?.map(|v| v.clamp(0.0, 1.0));
    Ok(PseudoDepthMap {
        values,
        vessel_mask: mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_image(green: &Grid<f64>) -> FundusImage {
        let red = green.map(|g| (0.8 * g + 0.1).clamp(0.0, 1.0));
        let blue = green.map(|g| 0.5 * g);
        FundusImage::from_channels([&red, green, &blue], "synthetic").unwrap()
    }

    #[test]
    fn dark_line_is_detected_and_bright_line_is_not() {
        let dark = Grid::from_fn(64, 64, |y, _| if (30..33).contains(&y) { 0.3 } else { 0.8 });
        let mask = segment_vessels(&gray_image(&dark));
        let line = (30..33).flat_map(|y| (0..64).map(move |x| (y, x)));
        let hit = line.clone().filter(|&(y, x)| *mask.get(y, x)).count();
        assert!(hit as f64 >= 0.9 * 192.0, "recall {hit}/192");
        assert!(mask.count() <= hit + 8);

        let bright = dark.map(|v| 1.1 - v);
        assert!(segment_vessels(&gray_image(&bright)).count() <= 4);
    }

    #[test]
    fn constant_image_has_no_vessels() {
        let flat = Grid::filled(32, 32, 0.5);
        assert_eq!(segment_vessels(&gray_image(&flat)).count(), 0);
    }

    #[test]
    fn inpaint_basics() {
        let ramp = Grid::from_fn(20, 20, |y, x| 0.01 * x as f64 + 0.02 * y as f64);
        let empty = Grid::filled(20, 20, false);
        assert_eq!(inpaint(&ramp, &empty).unwrap(), ramp);

        let mut constant = Grid::filled(5, 5, 0.7);
        constant.set(2, 2, 0.0);
        let mut one = Grid::filled(5, 5, false);
        one.set(2, 2, true);
        assert!((inpaint(&constant, &one).unwrap().get(2, 2) - 0.7).abs() < 1e-12);

        let stripe = Grid::from_fn(20, 20, |y, _| (8..12).contains(&y));
        let mut damaged = ramp.clone();
        for (i, m) in stripe.data().iter().enumerate() {
            if *m {
                damaged.data_mut()[i] = 0.0;
            }
        }
        let fixed = inpaint(&damaged, &stripe).unwrap();
        let err = fixed.data().iter().zip(ramp.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.02, "{err}");

        assert!(matches!(inpaint(&ramp, &Grid::filled(20, 20, true)), Err(CoreError::FullMask)));
    }

    #[test]
    fn inverted_green_recovers_depth() {
        let d = Grid::from_fn(64, 64, |y, x| {
            let r2 = ((y as f64 - 32.0).powi(2) + (x as f64 - 32.0).powi(2)) / 400.0;
            (-r2).exp()
        });
        let d = d.rescaled_unit();
        let img = gray_image(&d.map(|v| 1.0 - v));
        let pd = make_pseudo_depth(&img).unwrap();
        assert_eq!(pd.vessel_mask.count(), 0);
        let err = pd.values.data().iter().zip(d.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6);
    }
}
