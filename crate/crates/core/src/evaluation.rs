//! Depth and segmentation metrics, post-processing, cup-to-disc ratio,
//! glaucoma screening and ROC analysis.

use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::geometry::convex_hull;
use imageproc::point::Point;
use imageproc::rect::Rect;
use serde::{Deserialize, Serialize};

use crate::raster::{BinaryMask, DepthMap, Grid, LabelMap, ProbabilityMap, CUP, DISC_RIM};
use crate::{CoreError, Result};

/// Default probability threshold for post-processing.
pub const DEFAULT_TAU: f64 = 0.5;
/// Vertical CDR above which an eye is screened as glaucomatous.
pub const GLAUCOMA_CDR_THRESHOLD: f64 = 0.6;

fn same_dims<T: Clone, U: Clone>(a: &Grid<T>, b: &Grid<U>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(CoreError::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `sqrt(mean((x - y)²))`.
pub fn rmse(x: &DepthMap, y: &DepthMap) -> Result<f64> {
    same_dims(x, y, "rmse")?;
    if x.is_empty() {
        return Err(CoreError::Empty("depth map"));
    }
    let sum: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sum / x.len() as f64).sqrt())
}

/// Pearson correlation of two maps.
pub fn pearson_corr(x: &DepthMap, y: &DepthMap) -> Result<f64> {
    same_dims(x, y, "pearson_corr")?;
    if x.is_empty() {
        return Err(CoreError::Empty("depth map"));
    }
    for (k, m) in [x, y].into_iter().enumerate() {
        let (lo, hi) = m.min_max();
        if lo == hi {
            return Err(CoreError::ZeroVariance { channel: k });
        }
    }
    let n = x.len() as f64;
    let mx = x.data().iter().sum::<f64>() / n;
    let my = y.data().iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.data().iter().zip(y.data()) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// RMSE and correlation after min-max scaling both maps to `[0, 1]`.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<(f64, f64)> {
    let (p, g) = (pred.rescaled_unit(), gt.rescaled_unit());
    Ok((rmse(&p, &g)?, pearson_corr(&p, &g)?))
}

/// Pixel counts of a binary segmentation against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn new(s: &BinaryMask, g: &BinaryMask) -> Result<Self> {
        same_dims(s, g, "confusion")?;
        let mut c = Confusion::default();
        for (&a, &b) in s.data().iter().zip(g.data()) {
            match (a, b) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }
}

/// `1 - |S∩G| / |S∪G|`.
pub fn overlap_error(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    let c = Confusion::new(s, g)?;
    if c.tp + c.fn_ == 0 {
        return Err(CoreError::Empty("ground-truth region"));
    }
    Ok(1.0 - c.tp as f64 / (c.tp + c.fp + c.fn_) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(s: &BinaryMask, g: &BinaryMask) -> Result<BalancedAccuracy> {
    let c = Confusion::new(s, g)?;
    if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
        return Err(CoreError::Undefined("balanced accuracy of a single-class ground truth"));
    }
    let sensitivity = c.tp as f64 / (c.tp + c.fn_) as f64;
    let specificity = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok(BalancedAccuracy {
        sensitivity,
        specificity,
        accuracy: 0.5 * (sensitivity + specificity),
    })
}

/// `2|S∩G| / (|S| + |G|)`.
pub fn dice(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    let c = Confusion::new(s, g)?;
    let total = 2 * c.tp + c.fp + c.fn_;
    if total == 0 {
        return Err(CoreError::Empty("both regions"));
    }
    Ok(2.0 * c.tp as f64 / total as f64)
}

/// Disc region: rim and cup together.
pub fn disc_mask(labels: &LabelMap) -> BinaryMask {
    labels.map(|&l| l == DISC_RIM || l == CUP)
}

pub fn cup_mask(labels: &LabelMap) -> BinaryMask {
    labels.map(|&l| l == CUP)
}

/// Fills the convex hull of the pixel centres of `mask`.
pub fn convex_hull_fill(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    // Row extremes carry the whole hull.
    let mut pts = Vec::new();
    for y in 0..h {
        let row = &mask.data()[y * w..(y + 1) * w];
        if let (Some(a), Some(b)) = (row.iter().position(|&v| v), row.iter().rposition(|&v| v)) {
            pts.push(Point::new(a as i64, y as i64));
            if b != a {
                pts.push(Point::new(b as i64, y as i64));
            }
        }
    }
    let mut out = Grid::filled(h, w, false);
    if pts.is_empty() {
        return out;
    }
    let hull = convex_hull(pts);
    let (x0, x1) = (hull.iter().map(|p| p.x).min().unwrap(), hull.iter().map(|p| p.x).max().unwrap());
    let (y0, y1) = (hull.iter().map(|p| p.y).min().unwrap(), hull.iter().map(|p| p.y).max().unwrap());
    let k = hull.len();
    let cross = |a: Point<i64>, b: Point<i64>, x: i64, y: i64| (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
    let area2: i64 = (0..k).map(|i| cross(hull[0], hull[i], hull[(i + 1) % k].x, hull[(i + 1) % k].y)).sum();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let inside = if area2 == 0 {
                // Degenerate hull: a point or a segment.
                let (a, b) = (hull[0], hull[k - 1]);
                let ends = hull.iter().fold((a, b), |(lo, hi), &p| {
                    (if (p.x, p.y) < (lo.x, lo.y) { p } else { lo }, if (p.x, p.y) > (hi.x, hi.y) { p } else { hi })
                });
                cross(ends.0, ends.1, x, y) == 0
            } else {
                (0..k).all(|i| {
                    let c = cross(hull[i], hull[(i + 1) % k], x, y);
                    if area2 > 0 {
                        c >= 0
                    } else {
                        c <= 0
                    }
                })
            };
            if inside {
                out.set(y as usize, x as usize, true);
            }
        }
    }
    out
}

/// Thresholded and hull-filled disc and cup regions.
#[derive(Clone, Debug, PartialEq)]
pub struct PostProcessed {
    pub disc: BinaryMask,
    pub cup: BinaryMask,
    /// No disc pixel survived thresholding; CDR is undefined.
    pub disc_empty: bool,
}

/// Disc from `P(rim) + P(cup) ≥ τ`, cup from `P(cup) ≥ τ`, both hull-filled,
/// cup clipped to the disc.
pub fn postprocess(prob: &ProbabilityMap, tau: f64) -> Result<PostProcessed> {
    if prob.classes() <= CUP as usize {
        return Err(CoreError::Shape(format!("need 3 classes, got {}", prob.classes())));
    }
    let (h, w) = (prob.height(), prob.width());
    let rim = prob.class_plane(DISC_RIM as usize);
    let cupp = prob.class_plane(CUP as usize);
    let disc_raw = Grid::from_fn(h, w, |y, x| rim.get(y, x) + cupp.get(y, x) >= tau);
    let cup_raw = cupp.map(|&p| p >= tau);
    let disc = convex_hull_fill(&disc_raw);
    let cup_hull = convex_hull_fill(&cup_raw);
    let cup = Grid::from_fn(h, w, |y, x| *cup_hull.get(y, x) && *disc.get(y, x));
    let disc_empty = disc.count() == 0;
    Ok(PostProcessed { disc, cup, disc_empty })
}

fn row_extent(mask: &BinaryMask) -> Option<usize> {
    let w = mask.width();
    let rows: Vec<usize> = (0..mask.height())
        .filter(|&y| mask.data()[y * w..(y + 1) * w].iter().any(|&v| v))
        .collect();
    Some(rows.last()? - rows.first()? + 1)
}

/// Ratio of inclusive vertical extents; 0 for an empty cup.
pub fn vertical_cdr(disc: &BinaryMask, cup: &BinaryMask) -> Result<f64> {
    same_dims(disc, cup, "vertical_cdr")?;
    let d = row_extent(disc).ok_or(CoreError::Undefined("cup-to-disc ratio of an empty disc"))?;
    Ok(row_extent(cup).map_or(0.0, |c| c as f64 / d as f64))
}

/// Absolute CDR error.
pub fn delta_e(cdr_gt: f64, cdr_output: f64) -> f64 {
    (cdr_gt - cdr_output).abs()
}

pub fn classify_glaucoma(cdr: f64) -> bool {
    cdr > GLAUCOMA_CDR_THRESHOLD
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(CoreError::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CoreError::Config("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CoreError::Undefined("ROC of single-class labels"));
    }
    Ok((pos, neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Operating points of `score ≥ threshold` over every distinct score, from
/// `(0, 0)` to `(1, 1)`. Tied scores move both rates in one step.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under the ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = roc_curve(scores, labels)?;
    Ok(pts
        .windows(2)
        .map(|p| (p[1].fpr - p[0].fpr) * 0.5 * (p[1].tpr + p[0].tpr))
        .sum())
}

/// AUC as the Mann-Whitney statistic with mid-ranks for ties.
pub fn auc_mann_whitney(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut e = k;
        while e < order.len() && scores[order[e]] == scores[order[k]] {
            e += 1;
        }
        let mid = (k + 1 + e) as f64 / 2.0;
        rank_sum += mid * order[k..e].iter().filter(|&&i| labels[i]).count() as f64;
        k = e;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Segmentation scores of one sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub e_disc: Option<f64>,
    pub e_cup: Option<f64>,
    pub a_disc: Option<f64>,
    pub a_cup: Option<f64>,
    pub sen_disc: Option<f64>,
    pub spe_disc: Option<f64>,
    pub sen_cup: Option<f64>,
    pub spe_cup: Option<f64>,
    pub d_disc: Option<f64>,
    pub d_cup: Option<f64>,
    pub cdr_output: Option<f64>,
    pub cdr_gt: Option<f64>,
    pub delta_e: Option<f64>,
    pub disc_empty: bool,
}

/// Post-processes `prob` and scores it against `gt`. Metrics undefined for
/// this sample are left empty.
pub fn score_segmentation(prob: &ProbabilityMap, gt: &LabelMap, tau: f64) -> Result<SegmentationScores> {
    if (prob.height(), prob.width()) != gt.dims() {
        return Err(CoreError::Shape(format!(
            "prediction {}x{} vs ground truth {:?}",
            prob.height(),
            prob.width(),
            gt.dims()
        )));
    }
    let pp = postprocess(prob, tau)?;
    let (gd, gc) = (disc_mask(gt), cup_mask(gt));
    let ba_d = balanced_accuracy(&pp.disc, &gd).ok();
    let ba_c = balanced_accuracy(&pp.cup, &gc).ok();
    let cdr_output = vertical_cdr(&pp.disc, &pp.cup).ok();
    let cdr_gt = vertical_cdr(&gd, &gc).ok();
    Ok(SegmentationScores {
        e_disc: overlap_error(&pp.disc, &gd).ok(),
        e_cup: overlap_error(&pp.cup, &gc).ok(),
        a_disc: ba_d.map(|b| b.accuracy),
        a_cup: ba_c.map(|b| b.accuracy),
        sen_disc: ba_d.map(|b| b.sensitivity),
        spe_disc: ba_d.map(|b| b.specificity),
        sen_cup: ba_c.map(|b| b.sensitivity),
        spe_cup: ba_c.map(|b| b.specificity),
        d_disc: dice(&pp.disc, &gd).ok(),
        d_cup: dice(&pp.cup, &gc).ok(),
        delta_e: cdr_output.zip(cdr_gt).map(|(o, g)| delta_e(g, o)),
        cdr_output,
        cdr_gt,
        disc_empty: pp.disc_empty,
    })
}

/// One row of the per-sample report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub rmse: Option<f64>,
    pub corr: Option<f64>,
    pub e_disc: Option<f64>,
    pub e_cup: Option<f64>,
    pub a_disc: Option<f64>,
    pub a_cup: Option<f64>,
    pub d_disc: Option<f64>,
    pub d_cup: Option<f64>,
    pub cdr_output: Option<f64>,
    pub cdr_gt: Option<f64>,
    pub delta_e: Option<f64>,
    pub glaucoma_pred: Option<bool>,
    pub glaucoma_gt: Option<bool>,
    pub disc_empty: bool,
}

impl MetricsReport {
    pub fn with_segmentation(mut self, s: &SegmentationScores) -> Self {
        self.e_disc = s.e_disc;
        self.e_cup = s.e_cup;
        self.a_disc = s.a_disc;
        self.a_cup = s.a_cup;
        self.d_disc = s.d_disc;
        self.d_cup = s.d_cup;
        self.cdr_output = s.cdr_output;
        self.cdr_gt = s.cdr_gt;
        self.delta_e = s.delta_e;
        self.glaucoma_pred = s.cdr_output.map(classify_glaucoma);
        self.disc_empty = s.disc_empty;
        self
    }

    /// Metric columns in report order.
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 11] {
        [
            ("rmse", self.rmse),
            ("corr", self.corr),
            ("e_disc", self.e_disc),
            ("e_cup", self.e_cup),
            ("a_disc", self.a_disc),
            ("a_cup", self.a_cup),
            ("d_disc", self.d_disc),
            ("d_cup", self.d_cup),
            ("cdr_output", self.cdr_output),
            ("cdr_gt", self.cdr_gt),
            ("delta_e", self.delta_e),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        mean,
        std,
        count: values.len(),
    })
}

/// Dataset-level report: per-metric summaries and screening AUC.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub samples: usize,
    pub metrics: std::collections::BTreeMap<String, Summary>,
    pub disc_empty: usize,
    pub auc: Option<f64>,
    pub rmse_normalization: String,
    pub tau: f64,
}

pub fn aggregate(rows: &[MetricsReport], tau: f64) -> AggregateReport {
    let mut metrics = std::collections::BTreeMap::new();
    if let Some(first) = rows.first() {
        for (k, (name, _)) in first.metrics().iter().enumerate() {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.metrics()[k].1).collect();
            if let Some(s) = summarize(&vals) {
                metrics.insert(name.to_string(), s);
            }
        }
    }
    let (scores, labels): (Vec<f64>, Vec<bool>) = rows
        .iter()
        .filter_map(|r| Some((r.cdr_output?, r.glaucoma_gt?)))
        .unzip();
    AggregateReport {
        samples: rows.len(),
        metrics,
        disc_empty: rows.iter().filter(|r| r.disc_empty).count(),
        auc: roc_auc(&scores, &labels).ok(),
        rmse_normalization: "mean over pixels after min-max scaling to [0, 1]".into(),
        tau,
    }
}

/// Renders ROC curves (one colour each) over the chance diagonal.
pub fn render_roc_plot(curves: &[(String, Vec<RocPoint>)], path: &Path) -> Result<()> {
    const SIZE: u32 = 420;
    const MARGIN: f32 = 30.0;
    let span = SIZE as f32 - 2.0 * MARGIN;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let to_px = |fpr: f64, tpr: f64| (MARGIN + fpr as f32 * span, SIZE as f32 - MARGIN - tpr as f32 * span);
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(MARGIN as i32, MARGIN as i32).of_size(span as u32 + 1, span as u32 + 1),
        Rgb([0, 0, 0]),
    );
    for t in 1..10 {
        let v = t as f64 / 10.0;
        let (x, _) = to_px(v, 0.0);
        let (_, y) = to_px(0.0, v);
        draw_line_segment_mut(&mut img, (x, SIZE as f32 - MARGIN), (x, SIZE as f32 - MARGIN + 5.0), Rgb([0, 0, 0]));
        draw_line_segment_mut(&mut img, (MARGIN - 5.0, y), (MARGIN, y), Rgb([0, 0, 0]));
    }
    draw_line_segment_mut(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), Rgb([170, 170, 170]));
    let palette = [
        Rgb([31, 119, 180]),
        Rgb([214, 39, 40]),
        Rgb([44, 160, 44]),
        Rgb([255, 127, 14]),
        Rgb([148, 103, 189]),
    ];
    for (k, (_, pts)) in curves.iter().enumerate() {
        let colour = palette[k % palette.len()];
        for p in pts.windows(2) {
            let (a, b) = (to_px(p[0].fpr, p[0].tpr), to_px(p[1].fpr, p[1].tpr));
            draw_line_segment_mut(&mut img, a, b, colour);
            draw_line_segment_mut(&mut img, (a.0 + 1.0, a.1), (b.0 + 1.0, b.1), colour);
        }
    }
    img.save(path)?;
    Ok(())
}
