//! Bilinear and nearest-neighbour resampling with edge clamping.

use crate::raster::Grid;

fn bilinear_at(g: &Grid<f64>, sy: f64, sx: f64) -> f64 {
    let (h, w) = g.dims();
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let top = g.get(y0, x0) * (1.0 - fx) + g.get(y0, x1) * fx;
    let bottom = g.get(y1, x0) * (1.0 - fx) + g.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn nearest_at<T: Clone>(g: &Grid<T>, sy: f64, sx: f64) -> T {
    let (h, w) = g.dims();
    let y = sy.round().clamp(0.0, (h - 1) as f64) as usize;
    let x = sx.round().clamp(0.0, (w - 1) as f64) as usize;
    g.get(y, x).clone()
}

/// Pixel-centre aligned source coordinate for a resize.
fn source(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

pub fn resize_bilinear(g: &Grid<f64>, height: usize, width: usize) -> Grid<f64> {
    if g.dims() == (height, width) {
        return g.clone();
    }
    Grid::from_fn(height, width, |y, x| {
        bilinear_at(g, source(y, g.height(), height), source(x, g.width(), width))
    })
}

pub fn resize_nearest<T: Clone>(g: &Grid<T>, height: usize, width: usize) -> Grid<T> {
    if g.dims() == (height, width) {
        return g.clone();
    }
    Grid::from_fn(height, width, |y, x| {
        nearest_at(g, source(y, g.height(), height), source(x, g.width(), width))
    })
}

/// Source coordinate of a zoom by `scale` about the grid centre.
fn zoom_source(p: usize, len: usize, scale: f64) -> f64 {
    let c = (len as f64 - 1.0) / 2.0;
    c + (p as f64 - c) / scale
}

/// Zoom about the centre, keeping the resolution (scale > 1 magnifies).
pub fn zoom_bilinear(g: &Grid<f64>, scale: f64) -> Grid<f64> {
    let (h, w) = g.dims();
    Grid::from_fn(h, w, |y, x| bilinear_at(g, zoom_source(y, h, scale), zoom_source(x, w, scale)))
}

pub fn zoom_nearest<T: Clone>(g: &Grid<T>, scale: f64) -> Grid<T> {
    let (h, w) = g.dims();
    Grid::from_fn(h, w, |y, x| nearest_at(g, zoom_source(y, h, scale), zoom_source(x, w, scale)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_zoom_is_identity() {
        let g = Grid::from_fn(9, 7, |y, x| (y * 7 + x) as f64 * 0.1);
        let z = zoom_bilinear(&g, 1.0);
        assert!(z.data().iter().zip(g.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        let l = Grid::from_fn(9, 7, |y, x| ((y + x) % 3) as u8);
        assert_eq!(zoom_nearest(&l, 1.0), l);
    }

    #[test]
    fn resize_preserves_linear_ramps_in_the_interior() {
        let g = Grid::from_fn(8, 8, |_, x| x as f64);
        let r = resize_bilinear(&g, 16, 16);
        // Interior samples follow x_src = (x + 0.5)/2 - 0.5.
        for x in 1..15 {
            let expected = (x as f64 + 0.5) / 2.0 - 0.5;
            assert!((r.get(5, x) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_resize_keeps_label_values() {
        let l = Grid::from_fn(4, 4, |y, _| (y % 3) as u8);
        let r = resize_nearest(&l, 9, 9);
        assert!(r.data().iter().all(|&v| v <= 2));
    }
}
