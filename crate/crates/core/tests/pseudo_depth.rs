use onh_core::data_pipeline::FundusImage;
use onh_core::pseudo_depth::*;
use onh_core::raster::Grid;
use onh_core::CoreError;
use proptest::prelude::*;

fn image(h: usize, w: usize, r: &[f64], g: &[f64], b: &[f64]) -> FundusImage {
    let pixels = [r, g, b].concat();
    FundusImage::new(h, w, pixels, "p").unwrap().mark_raw()
}

fn plane(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unmasked_pixels_are_anti_tone_in_green(g in plane(64), r in plane(64), b in plane(64), holes in prop::collection::vec(any::<bool>(), 64)) {
        let img = image(8, 8, &r, &g, &b);
        let pd = make_pseudo_depth_with_mask(&img, Grid::filled(8, 8, false)).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                if g[i] > g[j] {
                    prop_assert!(pd.values.data()[i] < pd.values.data()[j]);
                }
            }
        }
        // Partial masks keep the ordering of the pixels they leave alone.
        if holes.iter().any(|&h| !h) && holes.iter().any(|&h| h) {
            let mask = Grid::from_vec(8, 8, holes.clone()).unwrap();
            let pd = make_pseudo_depth_with_mask(&img, mask).unwrap();
            for i in (0..64).filter(|&i| !holes[i]) {
                for j in (0..64).filter(|&j| !holes[j]) {
                    if g[i] > g[j] {
                        prop_assert!(pd.values.data()[i] < pd.values.data()[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn red_and_blue_channels_are_ignored(g in plane(256), r1 in plane(256), r2 in plane(256), b1 in plane(256), b2 in plane(256)) {
        let a = make_pseudo_depth(&image(16, 16, &r1, &g, &b1)).unwrap();
        let b = make_pseudo_depth(&image(16, 16, &r2, &g, &b2)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn values_stay_in_unit_range(g in plane(256), holes in prop::collection::vec(prop::bool::weighted(0.3), 256)) {
        let img = image(16, 16, &g, &g, &g);
        for pd in [make_pseudo_depth(&img), make_pseudo_depth_with_mask(&img, Grid::from_vec(16, 16, holes.clone()).unwrap())] {
            match pd {
                Ok(pd) => prop_assert!(pd.values.data().iter().all(|v| (0.0..=1.0).contains(v))),
                Err(CoreError::FullMask) => prop_assert!(holes.iter().all(|&h| h)),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    #[test]
    fn green_affine_changes_do_not_matter(g in plane(256), gain in 0.2f64..0.9, offset in 0.0f64..0.1) {
        let base = make_pseudo_depth_with_mask(&image(16, 16, &g, &g, &g), Grid::filled(16, 16, false)).unwrap();
        let g2: Vec<f64> = g.iter().map(|v| v * gain + offset).collect();
        let moved = make_pseudo_depth_with_mask(&image(16, 16, &g2, &g2, &g2), Grid::filled(16, 16, false)).unwrap();
        for (a, b) in base.values.data().iter().zip(moved.values.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn inpainting_recovers_a_linear_ramp() {
    let ramp = Grid::from_fn(20, 20, |y, x| 0.02 * x as f64 + 0.01 * y as f64);
    let mask = Grid::from_fn(20, 20, |y, x| (5..12).contains(&y) && (7..10).contains(&x));
    let mut holed = ramp.clone();
    for y in 5..12 {
        for x in 7..10 {
            holed.set(y, x, 0.0);
        }
    }
    let filled = inpaint(&holed, &mask).unwrap();
    for (a, b) in filled.data().iter().zip(ramp.data()) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn full_mask_is_rejected() {
    let g = Grid::filled(4, 4, 0.5);
    assert!(matches!(inpaint(&g, &Grid::filled(4, 4, true)), Err(CoreError::FullMask)));
}

#[test]
fn thin_dark_lines_are_found_as_vessels() {
    let (h, w) = (64, 64);
    let g: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let bg = 0.6 + 0.2 * (x as f64 / w as f64);
            if x == 30 || x == 31 || y == 20 { bg - 0.25 } else { bg }
        })
        .collect();
    let img = image(h, w, &g, &g, &g);
    let mask = segment_vessels(&img);
    assert!(*mask.get(40, 30) && *mask.get(40, 31) && *mask.get(20, 50));
    assert!(!*mask.get(50, 10));
    let pd = make_pseudo_depth(&img).unwrap();
    // Inpainting removes the vessel: its pseudo-depth matches the neighbours.
    assert!((pd.values.get(40, 30) - pd.values.get(40, 28)).abs() < 0.05);
}
