use onh_core::evaluation::*;
use onh_core::raster::{BinaryMask, DepthMap, Grid, ProbabilityMap};
use onh_core::CoreError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask(rows: &[&str]) -> BinaryMask {
    let h = rows.len();
    let w = rows[0].len();
    Grid::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
}

fn ellipse(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> BinaryMask {
    Grid::from_fn(h, w, |y, x| ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0)
}

#[test]
fn rmse_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: DepthMap = Grid::from_fn(9, 7, |_, _| rng.random::<f64>());
    assert_eq!(rmse(&x, &x).unwrap(), 0.0);
    assert!((rmse(&x, &x.map(|v| v + 0.1)).unwrap() - 0.1).abs() < 1e-12);
    let y: DepthMap = Grid::from_fn(9, 7, |_, _| rng.random::<f64>());
    // Independent route: accumulate row by row in the opposite order.
    let mut acc = 0.0;
    for r in (0..9).rev() {
        for c in (0..7).rev() {
            acc += (x.get(r, c) - y.get(r, c)).powi(2);
        }
    }
    assert!((rmse(&x, &y).unwrap() - (acc / 63.0).sqrt()).abs() < 1e-12);
    assert!(matches!(rmse(&x, &Grid::filled(7, 9, 0.0)), Err(CoreError::Shape(_))));
}

#[test]
fn pearson_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: DepthMap = Grid::from_fn(8, 8, |_, _| rng.random::<f64>());
    assert!((pearson_corr(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson_corr(&x, &x.map(|v| -v)).unwrap() + 1.0).abs() < 1e-12);
    assert!((pearson_corr(&x, &x.map(|v| 2.0 * v + 3.0)).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(
        pearson_corr(&x, &Grid::filled(8, 8, 0.3)),
        Err(CoreError::ZeroVariance { .. })
    ));
}

#[test]
fn overlap_examples() {
    let g = mask(&["##..", "##..", "....", "...."]);
    assert_eq!(overlap_error(&g, &g).unwrap(), 0.0);
    let s = mask(&["....", "....", "..##", "..##"]);
    assert_eq!(overlap_error(&s, &g).unwrap(), 1.0);
    let half = mask(&[".##.", ".##.", "....", "...."]);
    assert!((overlap_error(&half, &g).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!(matches!(overlap_error(&g, &Grid::filled(4, 4, false)), Err(CoreError::Empty(_))));
}

#[test]
fn balanced_accuracy_examples() {
    let g = mask(&["###.", "###.", "....", "...."]);
    let r = balanced_accuracy(&g, &g).unwrap();
    assert_eq!(r.accuracy, 1.0);
    let not_g = g.map(|v| !v);
    assert_eq!(balanced_accuracy(&not_g, &g).unwrap().accuracy, 0.0);
    // TP=4, FN=2, FP=2, TN=8.
    let s = mask(&["##..", "##.#", "...#", "...."]);
    let r = balanced_accuracy(&s, &g).unwrap();
    assert!((r.sensitivity - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.specificity - 0.8).abs() < 1e-12);
    assert!((r.accuracy - 0.733_333_333_333_333_3).abs() < 1e-12);
    assert!(balanced_accuracy(&g, &Grid::filled(4, 4, true)).is_err());
}

#[test]
fn dice_examples() {
    let g = mask(&["##..", "##..", "....", "...."]);
    assert_eq!(dice(&g, &g).unwrap(), 1.0);
    assert_eq!(dice(&g.map(|v| !v), &g).unwrap(), 0.0);
    let s = mask(&[".##.", ".##.", "....", "...."]);
    assert!((dice(&s, &g).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn hull_keeps_ellipse_and_fills_crescent() {
    let e = ellipse(64, 64, 31.3, 30.7, 20.0, 13.0);
    assert_eq!(convex_hull_fill(&e), e);
    let inner = ellipse(64, 64, 31.3, 38.0, 17.0, 11.0);
    let crescent = Grid::from_fn(64, 64, |y, x| *e.get(y, x) && !*inner.get(y, x));
    let hull = convex_hull_fill(&crescent);
    assert!(hull.count() > crescent.count());
    assert!(crescent.data().iter().zip(hull.data()).all(|(&c, &h)| !c || h));
}

fn probs_from_masks(disc: &BinaryMask, cup: &BinaryMask) -> ProbabilityMap {
    let (h, w) = disc.dims();
    let plane = h * w;
    let mut d = vec![0.0; 3 * plane];
    for i in 0..plane {
        let (bg, rim, c) = match (disc.data()[i], cup.data()[i]) {
            (_, true) => (0.05, 0.15, 0.8),
            (true, false) => (0.1, 0.8, 0.1),
            _ => (0.9, 0.05, 0.05),
        };
        d[i] = bg;
        d[plane + i] = rim;
        d[2 * plane + i] = c;
    }
    ProbabilityMap::from_planar(h, w, 3, d).unwrap()
}

#[test]
fn postprocess_clips_cup_and_flags_empty_disc() {
    let disc = ellipse(48, 48, 24.0, 24.0, 12.0, 12.0);
    // Cup sticking out of the disc on purpose.
    let cup = ellipse(48, 48, 24.0, 33.0, 6.0, 6.0);
    let pp = postprocess(&probs_from_masks(&disc, &cup), DEFAULT_TAU).unwrap();
    assert!(!pp.disc_empty);
    assert!(pp.cup.data().iter().zip(pp.disc.data()).all(|(&c, &d)| !c || d));
    let empty = Grid::filled(48, 48, false);
    let pp = postprocess(&probs_from_masks(&empty, &empty), DEFAULT_TAU).unwrap();
    assert!(pp.disc_empty);
    assert!(vertical_cdr(&pp.disc, &pp.cup).is_err());
}

#[test]
fn cdr_examples() {
    let disc = ellipse(160, 160, 80.0, 80.0, 60.0, 55.0);
    let cup = ellipse(160, 160, 80.0, 80.0, 30.0, 25.0);
    let cdr = vertical_cdr(&disc, &cup).unwrap();
    assert!((cdr - 0.5).abs() <= 1.0 / 120.0, "{cdr}");
    assert_eq!(vertical_cdr(&disc, &disc).unwrap(), 1.0);
    assert_eq!(vertical_cdr(&disc, &Grid::filled(160, 160, false)).unwrap(), 0.0);
    assert!(classify_glaucoma(0.7));
    assert!(!classify_glaucoma(0.5));
    assert!(!classify_glaucoma(0.6));
    assert_eq!(delta_e(0.4, 0.55), 0.15000000000000002);
}

#[test]
fn auc_examples() {
    let scores = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
    let labels = [false, false, false, true, true, true];
    assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    assert!(matches!(roc_auc(&scores, &[true; 6]), Err(CoreError::Undefined(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let l: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.5)).collect();
    assert!((roc_auc(&s, &l).unwrap() - 0.5).abs() < 0.02);
    // Ties between classes count one half.
    let auc = roc_auc(&[0.5, 0.5, 0.1, 0.9], &[true, false, false, true]).unwrap();
    assert!((auc - 0.875).abs() < 1e-12);
}

#[test]
fn aggregate_reports_mean_std_and_auc() {
    let rows: Vec<MetricsReport> = [(0.8, true), (0.3, false), (0.65, true), (0.5, false)]
        .iter()
        .enumerate()
        .map(|(i, &(cdr, g))| MetricsReport {
            id: format!("s{i}"),
            cdr_output: Some(cdr),
            glaucoma_gt: Some(g),
            rmse: Some(0.1 * (i + 1) as f64),
            ..Default::default()
        })
        .collect();
    let agg = aggregate(&rows, DEFAULT_TAU);
    assert_eq!(agg.samples, 4);
    assert_eq!(agg.auc, Some(1.0));
    let r = agg.metrics["rmse"];
    assert!((r.mean - 0.25).abs() < 1e-12);
    assert!((r.std - (0.05f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!(!agg.metrics.contains_key("e_disc"));
}

#[test]
fn roc_plot_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roc.png");
    let curve = roc_curve(&[0.2, 0.4, 0.6, 0.9], &[false, true, false, true]).unwrap();
    render_roc_plot(&[("model".into(), curve)], &path).unwrap();
    let img = image::open(&path).unwrap();
    assert_eq!((img.width(), img.height()), (420, 420));
}

fn mask_strategy() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(any::<bool>(), h * w),
            proptest::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(a, b)| (Grid::from_vec(h, w, a).unwrap(), Grid::from_vec(h, w, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn iou_dice_identity((s, g) in mask_strategy()) {
        prop_assume!(g.count() > 0);
        let e = overlap_error(&s, &g).unwrap();
        let d = dice(&s, &g).unwrap();
        prop_assert!((e - (1.0 - d / (2.0 - d))).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&e) && (0.0..=1.0).contains(&d));
    }

    #[test]
    fn metrics_invariant_under_joint_flip((s, g) in mask_strategy()) {
        prop_assume!(g.count() > 0 && g.count() < g.len());
        for (fs, fg) in [(s.flip_horizontal(), g.flip_horizontal()), (s.flip_vertical(), g.flip_vertical())] {
            prop_assert_eq!(overlap_error(&s, &g).unwrap(), overlap_error(&fs, &fg).unwrap());
            prop_assert_eq!(dice(&s, &g).unwrap(), dice(&fs, &fg).unwrap());
            prop_assert_eq!(balanced_accuracy(&s, &g).unwrap(), balanced_accuracy(&fs, &fg).unwrap());
        }
    }

    #[test]
    fn postprocess_cup_inside_disc(seed in any::<u64>(), h in 4usize..20, w in 4usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = h * w;
        let mut d: Vec<f64> = (0..3 * plane).map(|_| rng.random_range(0.0..1.0)).collect();
        for i in 0..plane {
            let z = d[i] + d[plane + i] + d[2 * plane + i];
            for c in 0..3 { d[c * plane + i] /= z; }
        }
        let pp = postprocess(&ProbabilityMap::from_planar(h, w, 3, d).unwrap(), DEFAULT_TAU).unwrap();
        prop_assert!(pp.cup.data().iter().zip(pp.disc.data()).all(|(&c, &dd)| !c || dd));
    }

    #[test]
    fn auc_routes_agree_and_negation_complements(
        data in proptest::collection::vec((0u8..6, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = roc_auc(&scores, &labels).unwrap();
        let b = auc_mann_whitney(&scores, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn hull_is_idempotent_superset((m, _) in mask_strategy()) {
        let h = convex_hull_fill(&m);
        prop_assert!(m.data().iter().zip(h.data()).all(|(&a, &b)| !a || b));
        prop_assert_eq!(convex_hull_fill(&h), h);
    }
}
