use onh_core::data_pipeline::manifest::Manifest;
use onh_core::data_pipeline::crop_roi;
use onh_core::evaluation::{pearson_corr, vertical_cdr, disc_mask, cup_mask};
use onh_core::pseudo_depth::make_pseudo_depth;
use onh_core::synthetic::{synthetic_corpus, synthetic_eye, write_corpus};

#[test]
fn pseudo_depth_recovers_synthetic_depth() {
    let eyes = synthetic_corpus(20, 64, 7);
    let mut worst = f64::INFINITY;
    for eye in &eyes {
        let image = crop_roi(&eye.image, eye.roi, None).unwrap();
        let depth = eye.roi.crop_grid(&eye.depth).unwrap();
        let pd = make_pseudo_depth(&image).unwrap();
        let corr = pearson_corr(&pd.values, &depth).unwrap();
        worst = worst.min(corr);
    }
    println!("worst corr {worst}");
    assert!(worst > 0.95, "worst corr {worst}");
}

#[test]
fn generator_is_deterministic_and_labels_match_cdr() {
    let a = synthetic_eye(3, 5, 64);
    let b = synthetic_eye(3, 5, 64);
    assert_eq!(a.image, b.image);
    assert_eq!(a.labels, b.labels);
    let c = synthetic_eye(3, 6, 64);
    assert_ne!(a.image, c.image);
    for eye in synthetic_corpus(10, 64, 1) {
        let cdr = vertical_cdr(&disc_mask(&eye.labels), &cup_mask(&eye.labels)).unwrap();
        assert!((cdr - eye.cdr).abs() < 0.06, "{} vs {}", cdr, eye.cdr);
        assert_eq!(eye.glaucoma, eye.cdr > 0.6);
        assert!(eye.vessels.data().iter().any(|&v| v));
    }
}

#[test]
fn written_corpus_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let eyes = synthetic_corpus(3, 32, 2);
    write_corpus(dir.path(), &eyes).unwrap();
    let m = Manifest::load(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(m.ids(), vec!["syn0000", "syn0001", "syn0002"]);
    let row = m.row("syn0001").unwrap();
    assert_eq!(row.roi().unwrap(), Some(eyes[1].roi));
    assert_eq!(row.glaucoma, Some(eyes[1].glaucoma));
    let depth = onh_core::data_pipeline::io::load_depth(&m.resolve(row.depth.as_ref().unwrap()), row.depth_range()).unwrap();
    let err = depth.data().iter().zip(eyes[1].depth.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-4, "{err}");
    let labels = onh_core::data_pipeline::io::load_labels(&m.resolve(row.label.as_ref().unwrap())).unwrap();
    assert_eq!(labels, eyes[1].labels);
}
