//! Fully connected CRF over segmentation probabilities with appearance,
//! depth and smoothness kernels, solved by mean-field inference.
//!
//! The pairwise kernel between pixels `i` and `j` is
//!
//! ```text
//! k(i, j) = w1 exp(-|pi-pj|²/2θα² - |Ii-Ij|²/2θβ²)
//!         + w2 exp(-|pi-pj|²/2θα² - |di-dj|²/2θγ²)
//!         + w3 exp(-|pi-pj|²/2θs²)
//! ```
//!
//! with `θs = θα` unless decoupled. Intensities are on a 0-255 scale and
//! depth in `[0, 1]`. Compatibility is Potts.
//!
//! Message passing has two paths. The exact path sums every pair. The fast
//! path evaluates the smoothness term by separable Gaussian filtering, the
//! depth term on a lattice of depth slices (exact separable filtering in
//! position, cubic interpolation along depth), and the appearance term as
//! a pair sum restricted to a 5σ neighbourhood in feature space.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data_pipeline::FundusImage;
use crate::raster::{DepthMap, LabelMap, ProbabilityMap};
use crate::{CoreError, Result};

pub const PROB_FLOOR: f64 = 1e-8;
/// Largest instance (in pixels) accepted by [`gibbs_energy`].
pub const EXACT_ENERGY_CAP: usize = 64 * 64;
/// Feature-space radius, in bandwidth units, of the appearance pair sum.
pub const FEATURE_CUTOFF: f64 = 5.0;
/// Depth lattice spacing in units of θγ.
const DEPTH_SPACING: f64 = 1.0 / 3.0;
/// Beyond this many depth slices the depth term uses the pair sum instead.
const MAX_DEPTH_SLICES: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
    /// Separate position bandwidth for the smoothness kernel.
    pub smoothness_theta: Option<f64>,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w1: 5.0,
            w2: 5.0,
            w3: 3.0,
            theta_alpha: 30.0,
            theta_beta: 10.0,
            theta_gamma: 0.1,
            iterations: 10,
            smoothness_theta: None,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(CoreError::Config(format!("{name} must be finite and nonnegative, got {w}")));
            }
        }
        let thetas = [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
            ("smoothness_theta", self.smoothness_theta.unwrap_or(1.0)),
        ];
        for (name, t) in thetas {
            if !(t > 0.0) {
                return Err(CoreError::Config(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn theta_smooth(&self) -> f64 {
        self.smoothness_theta.unwrap_or(self.theta_alpha)
    }
}

/// Negative log-probabilities, class-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryField {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl UnaryField {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    /// `softmax(-U)` per pixel, i.e. the clamped input distribution.
    pub fn softmax(&self) -> ProbabilityMap {
        let plane = self.height * self.width;
        let mut q = vec![0.0; self.data.len()];
        for i in 0..plane {
            let min = (0..self.classes).map(|c| self.data[c * plane + i]).fold(f64::INFINITY, f64::min);
            let mut z = 0.0;
            for c in 0..self.classes {
                let e = (min - self.data[c * plane + i]).exp();
                q[c * plane + i] = e;
                z += e;
            }
            for c in 0..self.classes {
                q[c * plane + i] /= z;
            }
        }
        ProbabilityMap::from_planar(self.height, self.width, self.classes, q).expect("unary layout")
    }
}

/// `-ln(clamp(p, 1e-8, 1))`.
pub fn compute_unary(prob: &ProbabilityMap) -> UnaryField {
    UnaryField {
        height: prob.height(),
        width: prob.width(),
        classes: prob.classes(),
        data: prob.data().iter().map(|&p| -p.clamp(PROB_FLOOR, 1.0).ln()).collect(),
    }
}

/// Per-pixel features the kernels read.
#[derive(Clone, Debug)]
pub struct CrfFeatures {
    height: usize,
    width: usize,
    rgb: Vec<[f64; 3]>,
    depth: Option<Vec<f64>>,
}

impl CrfFeatures {
    /// Image intensities are scaled to 0-255.
    pub fn new(image: &FundusImage, depth: Option<&DepthMap>) -> Result<Self> {
        let (h, w) = (image.height(), image.width());
        if let Some(d) = depth {
            if d.dims() != (h, w) {
                return Err(CoreError::Shape(format!("depth {:?} vs image {h}x{w}", d.dims())));
            }
        }
        let rgb = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                std::array::from_fn(|c| 255.0 * image.pixel(c, y, x))
            })
            .collect();
        Ok(CrfFeatures {
            height: h,
            width: w,
            rgb,
            depth: depth.map(|d| d.data().to_vec()),
        })
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    fn pos(&self, i: usize) -> (f64, f64) {
        ((i / self.width) as f64, (i % self.width) as f64)
    }
}

fn gauss(sq: f64, theta: f64) -> f64 {
    (-sq / (2.0 * theta * theta)).exp()
}

fn kernel_ij(f: &CrfFeatures, i: usize, j: usize, p: &CrfParams) -> f64 {
    let (yi, xi) = f.pos(i);
    let (yj, xj) = f.pos(j);
    let dp = (yi - yj).powi(2) + (xi - xj).powi(2);
    let di: f64 = (0..3).map(|c| (f.rgb[i][c] - f.rgb[j][c]).powi(2)).sum();
    let mut k = p.w1 * (-dp / (2.0 * p.theta_alpha.powi(2)) - di / (2.0 * p.theta_beta.powi(2))).exp();
    if let Some(d) = &f.depth {
        let dd = (d[i] - d[j]).powi(2);
        k += p.w2 * (-dp / (2.0 * p.theta_alpha.powi(2)) - dd / (2.0 * p.theta_gamma.powi(2))).exp();
    }
    k + p.w3 * gauss(dp, p.theta_smooth())
}

/// Kernel value between pixels `i = (y, x)` and `j`. Without depth the
/// depth term is absent (equivalent to `w2 = 0`).
pub fn pairwise_kernel(
    i: (usize, usize),
    j: (usize, usize),
    image: &FundusImage,
    depth: Option<&DepthMap>,
    params: &CrfParams,
) -> f64 {
    let w = image.width();
    let rgb = |(y, x): (usize, usize)| -> [f64; 3] { std::array::from_fn(|c| 255.0 * image.pixel(c, y, x)) };
    let dp = (i.0 as f64 - j.0 as f64).powi(2) + (i.1 as f64 - j.1 as f64).powi(2);
    let (ci, cj) = (rgb(i), rgb(j));
    let di: f64 = (0..3).map(|c| (ci[c] - cj[c]).powi(2)).sum();
    let mut k = params.w1 * (-dp / (2.0 * params.theta_alpha.powi(2)) - di / (2.0 * params.theta_beta.powi(2))).exp();
    if let Some(d) = depth {
        let dd = (d.data()[i.0 * w + i.1] - d.data()[j.0 * w + j.1]).powi(2);
        k += params.w2 * (-dp / (2.0 * params.theta_alpha.powi(2)) - dd / (2.0 * params.theta_gamma.powi(2))).exp();
    }
    k + params.w3 * gauss(dp, params.theta_smooth())
}

fn check_q(q: &ProbabilityMap, f: &CrfFeatures) -> Result<()> {
    if (q.height(), q.width()) != (f.height, f.width) {
        return Err(CoreError::Shape(format!(
            "distribution {}x{} vs features {}x{}",
            q.height(),
            q.width(),
            f.height,
            f.width
        )));
    }
    Ok(())
}

/// `m_i(l) = Σ_{j≠i} k(i, j) Q_j(l)` by summing every pair. Class-planar.
pub fn exact_message_pass(q: &ProbabilityMap, f: &CrfFeatures, params: &CrfParams) -> Result<Vec<f64>> {
    check_q(q, f)?;
    let n = f.len();
    let c = q.classes();
    let qd = q.data();
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = kernel_ij(f, i, j, params);
            for l in 0..c {
                out[l * n + i] += k * qd[l * n + j];
            }
        }
    }
    Ok(out)
}

/// Same messages as [`exact_message_pass`] at a fraction of the cost.
pub fn fast_message_pass(q: &ProbabilityMap, f: &CrfFeatures, params: &CrfParams) -> Result<Vec<f64>> {
    check_q(q, f)?;
    let n = f.len();
    let c = q.classes();
    let mut out = vec![0.0; c * n];
    if params.w3 > 0.0 {
        let blurred = blur_planes(q.data(), c, f.height, f.width, params.theta_smooth());
        for ((o, b), v) in out.iter_mut().zip(&blurred).zip(q.data()) {
            *o += params.w3 * (b - v);
        }
    }
    if params.w1 > 0.0 {
        let range: Vec<f64> = f.rgb.iter().flat_map(|px| px.map(|v| v / params.theta_beta)).collect();
        cutoff_pair_sum(f, &range, 3, params.theta_alpha, q.data(), c, params.w1, &mut out);
    }
    if let (Some(depth), true) = (&f.depth, params.w2 > 0.0) {
        depth_lattice_pass(q.data(), c, f, depth, params, &mut out);
    }
    Ok(out)
}

/// Exact Gaussian filtering of `count` planes along x then y.
fn blur_planes(data: &[f64], count: usize, h: usize, w: usize, theta: f64) -> Vec<f64> {
    let gx: Vec<f64> = (0..w).map(|d| gauss((d * d) as f64, theta)).collect();
    let gy: Vec<f64> = (0..h).map(|d| gauss((d * d) as f64, theta)).collect();
    let mut tmp = vec![0.0; data.len()];
    for p in 0..count {
        for y in 0..h {
            let row = &data[(p * h + y) * w..(p * h + y + 1) * w];
            let dst = &mut tmp[(p * h + y) * w..(p * h + y + 1) * w];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = row.iter().enumerate().map(|(x2, v)| gx[x.abs_diff(x2)] * v).sum();
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for p in 0..count {
        for y in 0..h {
            for y2 in 0..h {
                let g = gy[y.abs_diff(y2)];
                let src = (p * h + y2) * w;
                let dst = (p * h + y) * w;
                for x in 0..w {
                    out[dst + x] += g * tmp[src + x];
                }
            }
        }
    }
    out
}

/// Adds `weight Σ_{j≠i} exp(-|pi-pj|²/2θ² - |ri-rj|²/2) Q_j` over pairs
/// closer than the cutoff. `range` holds the non-position features already
/// divided by their bandwidths, `dims` values per pixel. Pixels are bucketed
/// by range cell and every symmetric pair is visited once.
#[allow(clippy::too_many_arguments)]
fn cutoff_pair_sum(
    f: &CrfFeatures,
    range: &[f64],
    dims: usize,
    theta_pos: f64,
    q: &[f64],
    classes: usize,
    weight: f64,
    out: &mut [f64],
) {
    let n = f.len();
    let cut2 = FEATURE_CUTOFF * FEATURE_CUTOFF;
    let inv2 = 1.0 / (theta_pos * theta_pos);
    let span = f.height.max(f.width);
    let gpos: Vec<f64> = (0..span).map(|d| (-0.5 * (d * d) as f64 * inv2).exp()).collect();

    let key_of = |i: usize| -> Vec<i64> {
        range[i * dims..(i + 1) * dims]
            .iter()
            .map(|v| (v / FEATURE_CUTOFF).floor() as i64)
            .collect()
    };
    let mut order: Vec<(Vec<i64>, usize)> = (0..n).map(|i| (key_of(i), i)).collect();
    order.sort();
    let mut cells: HashMap<Vec<i64>, (usize, usize)> = HashMap::new();
    let mut start = 0;
    for k in 1..=n {
        if k == n || order[k].0 != order[start].0 {
            cells.insert(order[start].0.clone(), (start, k));
            start = k;
        }
    }
    // Pixel data in bucket order for locality.
    let idx: Vec<usize> = order.iter().map(|(_, i)| *i).collect();
    let feat: Vec<f64> = idx.iter().flat_map(|&i| range[i * dims..(i + 1) * dims].iter().copied()).collect();
    let pos: Vec<(usize, usize)> = idx.iter().map(|&i| (i / f.width, i % f.width)).collect();
    let qs: Vec<f64> = idx
        .iter()
        .flat_map(|&i| (0..classes).map(move |l| q[l * n + i]))
        .collect();
    let mut acc = vec![0.0; n * classes];

    let offsets: Vec<Vec<i64>> = (0..3usize.pow(dims as u32))
        .map(|mut k| {
            (0..dims)
                .map(|_| {
                    let o = (k % 3) as i64 - 1;
                    k /= 3;
                    o
                })
                .collect()
        })
        .collect();
    let mut key = vec![0i64; dims];
    for (home, &(a0, a1)) in &cells {
        for off in &offsets {
            for d in 0..dims {
                key[d] = home[d] + off[d];
            }
            if key.as_slice() < home.as_slice() {
                continue;
            }
            let Some(&(b0, b1)) = cells.get(&key) else { continue };
            let same = key.as_slice() == home.as_slice();
            for a in a0..a1 {
                let fa = &feat[a * dims..(a + 1) * dims];
                let (ya, xa) = pos[a];
                let from = if same { a + 1 } else { b0 };
                for b in from..b1 {
                    let fb = &feat[b * dims..(b + 1) * dims];
                    let mut dc = 0.0;
                    for d in 0..dims {
                        let t = fa[d] - fb[d];
                        dc += t * t;
                    }
                    if dc >= cut2 {
                        continue;
                    }
                    let (yb, xb) = pos[b];
                    let (dy, dx) = (ya.abs_diff(yb), xa.abs_diff(xb));
                    if dc + ((dy * dy + dx * dx) as f64) * inv2 >= cut2 {
                        continue;
                    }
                    let k = weight * (-0.5 * dc).exp() * gpos[dy] * gpos[dx];
                    for l in 0..classes {
                        acc[a * classes + l] += k * qs[b * classes + l];
                        acc[b * classes + l] += k * qs[a * classes + l];
                    }
                }
            }
        }
    }
    for (s, &i) in idx.iter().enumerate() {
        for l in 0..classes {
            out[l * n + i] += acc[s * classes + l];
        }
    }
}

/// Keys cubic interpolation weight.
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

fn depth_lattice_pass(q: &[f64], classes: usize, f: &CrfFeatures, depth: &[f64], p: &CrfParams, out: &mut [f64]) {
    let n = f.len();
    let coord: Vec<f64> = depth.iter().map(|d| d / p.theta_gamma / DEPTH_SPACING).collect();
    let lo = coord.iter().fold(f64::INFINITY, |a, &b| a.min(b.floor())) as i64 - 1;
    let hi = coord.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.floor())) as i64 + 2;
    let slices = (hi - lo + 1) as usize;
    if slices > MAX_DEPTH_SLICES {
        let range: Vec<f64> = depth.iter().map(|d| d / p.theta_gamma).collect();
        cutoff_pair_sum(f, &range, 1, p.theta_alpha, q, classes, p.w2, out);
        return;
    }
    // Interpolation stencil of every pixel: four slices and their weights.
    let stencil: Vec<[(usize, f64); 4]> = coord
        .iter()
        .map(|&g| {
            let base = g.floor();
            let fr = g - base;
            std::array::from_fn(|k| {
                let off = k as i64 - 1;
                ((base as i64 + off - lo) as usize, cubic(fr - off as f64))
            })
        })
        .collect();
    let mut splat = vec![0.0; slices * classes * n];
    for (i, st) in stencil.iter().enumerate() {
        for &(s, w) in st {
            for l in 0..classes {
                splat[(s * classes + l) * n + i] += w * q[l * n + i];
            }
        }
    }
    let blurred = blur_planes(&splat, slices * classes, f.height, f.width, p.theta_alpha);
    let g: Vec<f64> = (0..slices).map(|d| (-0.5 * (d as f64 * DEPTH_SPACING).powi(2)).exp()).collect();
    for (i, st) in stencil.iter().enumerate() {
        let mut self_k = 0.0;
        for &(s, ws) in st {
            for &(u, wu) in st {
                self_k += ws * wu * g[s.abs_diff(u)];
            }
        }
        for l in 0..classes {
            let mut m = 0.0;
            for &(s, ws) in st {
                if ws == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for u in 0..slices {
                    acc += g[s.abs_diff(u)] * blurred[(u * classes + l) * n + i];
                }
                m += ws * acc;
            }
            out[l * n + i] += p.w2 * (m - self_k * q[l * n + i]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageMethod {
    Exact,
    Fast,
}

/// Mean-field refinement; returns the final distribution and its argmax.
pub fn mean_field_refine(
    unary: &UnaryField,
    image: &FundusImage,
    depth: Option<&DepthMap>,
    params: &CrfParams,
) -> Result<(ProbabilityMap, LabelMap)> {
    mean_field_with(unary, image, depth, params, MessageMethod::Fast, |_, _| {})
}

/// Mean-field refinement with an explicit message path and a callback
/// receiving `(iteration, Q)` after every synchronous update.
pub fn mean_field_with(
    unary: &UnaryField,
    image: &FundusImage,
    depth: Option<&DepthMap>,
    params: &CrfParams,
    method: MessageMethod,
    mut observe: impl FnMut(usize, &ProbabilityMap),
) -> Result<(ProbabilityMap, LabelMap)> {
    params.validate()?;
    let features = CrfFeatures::new(image, depth)?;
    if (unary.height, unary.width) != (features.height, features.width) {
        return Err(CoreError::Shape(format!(
            "unary {}x{} vs image {}x{}",
            unary.height, unary.width, features.height, features.width
        )));
    }
    let mut q = unary.softmax();
    let n = features.len();
    let c = unary.classes;
    for it in 0..params.iterations {
        let m = match method {
            MessageMethod::Exact => exact_message_pass(&q, &features, params)?,
            MessageMethod::Fast => fast_message_pass(&q, &features, params)?,
        };
        let mut energy = unary.data.clone();
        for i in 0..n {
            let total: f64 = (0..c).map(|l| m[l * n + i]).sum();
            for l in 0..c {
                energy[l * n + i] += total - m[l * n + i];
            }
        }
        q = UnaryField {
            data: energy,
            ..unary.clone()
        }
        .softmax();
        observe(it, &q);
    }
    let labels = q.argmax();
    Ok((q, labels))
}

/// `Σ_i U_i(x_i) + Σ_{i<j} k(i, j) [x_i ≠ x_j]`, summed exactly.
pub fn gibbs_energy(
    labels: &LabelMap,
    unary: &UnaryField,
    image: &FundusImage,
    depth: Option<&DepthMap>,
    params: &CrfParams,
) -> Result<f64> {
    let f = CrfFeatures::new(image, depth)?;
    let n = f.len();
    if n > EXACT_ENERGY_CAP {
        return Err(CoreError::TooLarge {
            pixels: n,
            cap: EXACT_ENERGY_CAP,
        });
    }
    if labels.dims() != (f.height, f.width) || (unary.height, unary.width) != (f.height, f.width) {
        return Err(CoreError::Shape("labels, unary and image must share dimensions".into()));
    }
    let x = labels.data();
    let mut e = 0.0;
    for (i, &l) in x.iter().enumerate() {
        if l as usize >= unary.classes {
            return Err(CoreError::LabelRange {
                label: l as usize,
                classes: unary.classes,
            });
        }
        e += unary.data[l as usize * n + i];
    }
    for i in 0..n {
        for j in i + 1..n {
            if x[i] != x[j] {
                e += kernel_ij(&f, i, j, params);
            }
        }
    }
    Ok(e)
}

/// Convenience: refine a probability map directly.
pub fn refine(
    prob: &ProbabilityMap,
    image: &FundusImage,
    depth: Option<&DepthMap>,
    params: &CrfParams,
) -> Result<(ProbabilityMap, LabelMap)> {
    mean_field_refine(&compute_unary(prob), image, depth, params)
}

