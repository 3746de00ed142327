//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values are held
//! behind `Arc` so parameters enter the tape without copying. Calling
//! [`Graph::backward`] walks the tape once in reverse.

use std::sync::Arc;

use crate::conv::{self, ConvGeom};
use crate::{Shape, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable parameter in the caller's parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Batch statistics produced by a training-mode normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (falls back to the biased one for a single element).
    pub var: Vec<f64>,
}

/// Normalization mode.
#[derive(Clone, Debug)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch: bool,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Softmax {
        x: Var,
    },
    Dot {
        x: Var,
        weights: Tensor,
    },
    Residual {
        pred: Var,
        kind: ResidualLoss,
        residual: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug)]
enum ResidualLoss {
    L2 { norm: f64 },
    L1,
    BerHu { c: f64 },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients in tape order. A parameter used twice appears
    /// twice; callers accumulate.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (no gradient is propagated further).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var, TensorError> {
        let y = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, geom }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var, TensorError> {
        let y = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, geom }))
    }

    /// Per-channel normalization followed by a learned affine map.
    ///
    /// In [`NormMode::Batch`] the batch statistics are returned so the caller
    /// can update its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>), TensorError> {
        let xv = self.value(x);
        let s = xv.shape();
        let c = s.c();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: s,
                right: self.value(gamma).shape(),
            });
        }
        let plane = s.plane();
        let count = (s.n() * plane) as f64;
        let (mean, var_biased, stats) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut sum = 0.0;
                    for n in 0..s.n() {
                        let off = (n * c + ch) * plane;
                        sum += xv.data()[off..off + plane].iter().sum::<f64>();
                    }
                    *m = sum / count;
                    let mut sq = 0.0;
                    for n in 0..s.n() {
                        let off = (n * c + ch) * plane;
                        sq += xv.data()[off..off + plane]
                            .iter()
                            .map(|v| (v - *m) * (v - *m))
                            .sum::<f64>();
                    }
                    *v = sq / count;
                }
                let unbiased = if count > 1.0 {
                    var.iter().map(|v| v * count / (count - 1.0)).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::ShapeMismatch {
                        op: "batch_norm running stats",
                        left: s,
                        right: Shape::new(1, mean.len(), 1, 1),
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(s);
        let mut y = Tensor::zeros(s);
        for n in 0..s.n() {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = h;
                    y.data_mut()[i] = g[ch] * h + b[ch];
                }
            }
        }
        let batch = stats.is_some();
        let v = self.push(
            y,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
        );
        Ok((v, stats))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(y, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(y, Op::Tanh { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let y = Tensor::concat_channels(&values)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }

    /// Elementwise multiplication by a fixed mask (used for dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(TensorError::DataLength {
                shape: xv.shape(),
                len: mask.len(),
            });
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(y, Op::Mask { x, mask }))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push(y, Op::Affine { x, scale })
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_channels(self.value(x));
        self.push(y, Op::Softmax { x })
    }

    /// Scalar `Σ weights ⊙ x`; used to project outputs for gradient checks.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                left: xv.shape(),
                right: weights.shape(),
            });
        }
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }))
    }

    fn residual(&mut self, pred: Var, target: &Tensor, op: &'static str) -> Result<Vec<f64>, TensorError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: p.shape(),
                right: target.shape(),
            });
        }
        Ok(p.data().iter().zip(target.data()).map(|(a, b)| a - b).collect())
    }

    /// Euclidean norm of the residual over the whole batch.
    pub fn l2_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var, TensorError> {
        let residual = self.residual(pred, target, "l2_loss")?;
        let norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
        let kind = ResidualLoss::L2 { norm };
        Ok(self.push(Tensor::scalar(norm), Op::Residual { pred, kind, residual }))
    }

    /// Sum of absolute residuals.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var, TensorError> {
        let residual = self.residual(pred, target, "l1_loss")?;
        let loss = residual.iter().map(|r| r.abs()).sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Residual {
                pred,
                kind: ResidualLoss::L1,
                residual,
            },
        ))
    }

    /// Reverse Huber loss summed over elements. The knee `c` is
    /// `c_fraction * max|residual|` over the whole batch and is treated as a
    /// constant during differentiation.
    pub fn berhu_loss(&mut self, pred: Var, target: &Tensor, c_fraction: f64) -> Result<Var, TensorError> {
        let residual = self.residual(pred, target, "berhu_loss")?;
        let max = residual.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        let c = c_fraction * max;
        let loss = residual.iter().map(|&r| berhu(r, c)).sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Residual {
                pred,
                kind: ResidualLoss::BerHu { c },
                residual,
            },
        ))
    }

    /// Mean over pixels of the negative log-softmax at the true class.
    /// `labels` is laid out `[n][y][x]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let s = lv.shape();
        let pixels = s.n() * s.plane();
        if labels.len() != pixels {
            return Err(TensorError::DataLength {
                shape: Shape::new(s.n(), 1, s.h(), s.w()),
                len: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s.c()) {
            return Err(TensorError::LabelRange {
                label: bad,
                classes: s.c(),
            });
        }
        let probs = softmax_channels(lv);
        let plane = s.plane();
        let mut total = 0.0;
        for n in 0..s.n() {
            for i in 0..plane {
                let l = labels[n * plane + i];
                let logit = |c: usize| lv.data()[(n * s.c() + c) * plane + i];
                let max = (0..s.c()).map(logit).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..s.c()).map(|c| (logit(c) - max).exp()).sum::<f64>().ln();
                total += lse - logit(l);
            }
        }
        let loss = total / pixels as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        let mut params = Vec::new();

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g).expect("gradient shape"),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((*id, Var(idx))),
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = conv::conv2d_backward(self.value(*x), self.value(*w), &dy, *geom);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let db = Tensor::from_vec(self.shape(*b), db.into_vec()).expect("bias shape");
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let (dx, dw, db) = conv::conv_transpose2d_backward(self.value(*x), self.value(*w), &dy, *geom);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let db = Tensor::from_vec(self.shape(*b), db.into_vec()).expect("bias shape");
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let s = xhat.shape();
                    let c = s.c();
                    let plane = s.plane();
                    let count = (s.n() * plane) as f64;
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for n in 0..s.n() {
                        for ch in 0..c {
                            let off = (n * c + ch) * plane;
                            for i in off..off + plane {
                                dgamma[ch] += dy.data()[i] * xhat.data()[i];
                                dbeta[ch] += dy.data()[i];
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.n() {
                        for ch in 0..c {
                            let off = (n * c + ch) * plane;
                            for i in off..off + plane {
                                let dxhat = dy.data()[i] * g[ch];
                                dx.data_mut()[i] = if *batch {
                                    // dxhat - mean(dxhat) - xhat * mean(dxhat * xhat), scaled
                                    inv_std[ch]
                                        * (dxhat
                                            - g[ch] * dbeta[ch] / count
                                            - xhat.data()[i] * g[ch] * dgamma[ch] / count)
                                } else {
                                    inv_std[ch] * dxhat
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    let gs = self.shape(*gamma);
                    accumulate(&mut grads, *gamma, Tensor::from_vec(gs, dgamma).expect("gamma"));
                    let bs = self.shape(*beta);
                    accumulate(&mut grads, *beta, Tensor::from_vec(bs, dbeta).expect("beta"));
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &d)| if v > 0.0 { d } else { slope * d })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), data).expect("shape"));
                }
                Op::Tanh { x } => {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&t, &d)| d * (1.0 - t * t))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(dy.shape(), data).expect("shape"));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.clone());
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.shape(*p).c();
                        accumulate(&mut grads, *p, dy.channels(start, c));
                        start += c;
                    }
                }
                Op::Mask { x, mask } => {
                    let data = dy.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(dy.shape(), data).expect("shape"));
                }
                Op::Affine { x, scale } => {
                    accumulate(&mut grads, *x, dy.map(|d| d * scale));
                }
                Op::Softmax { x } => {
                    let p = &node.value;
                    let s = p.shape();
                    let plane = s.plane();
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.n() {
                        for i in 0..plane {
                            let idx = |c: usize| (n * s.c() + c) * plane + i;
                            let inner: f64 = (0..s.c()).map(|c| p.data()[idx(c)] * dy.data()[idx(c)]).sum();
                            for c in 0..s.c() {
                                dx.data_mut()[idx(c)] = p.data()[idx(c)] * (dy.data()[idx(c)] - inner);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dot { x, weights } => {
                    let d = dy.item();
                    accumulate(&mut grads, *x, weights.map(|w| w * d));
                }
                Op::Residual { pred, kind, residual } => {
                    let d = dy.item();
                    let data = residual
                        .iter()
                        .map(|&r| {
                            d * match *kind {
                                ResidualLoss::L2 { norm } => {
                                    if norm > 0.0 {
                                        r / norm
                                    } else {
                                        0.0
                                    }
                                }
                                ResidualLoss::L1 => sign(r),
                                ResidualLoss::BerHu { c } => berhu_grad(r, c),
                            }
                        })
                        .collect();
                    let s = self.shape(*pred);
                    accumulate(&mut grads, *pred, Tensor::from_vec(s, data).expect("shape"));
                }
                Op::CrossEntropy { logits, probs, labels } => {
                    let s = probs.shape();
                    let plane = s.plane();
                    let scale = dy.item() / (s.n() * plane) as f64;
                    let mut dx = probs.clone();
                    for n in 0..s.n() {
                        for i in 0..plane {
                            let l = labels[n * plane + i];
                            dx.data_mut()[(n * s.c() + l) * plane + i] -= 1.0;
                        }
                    }
                    dx.data_mut().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, dx);
                }
            }
            grads[idx] = Some(dy);
        }
        Gradients { grads, params }
    }
}

/// Reverse Huber penalty for one residual with knee `c`.
pub fn berhu(r: f64, c: f64) -> f64 {
    let a = r.abs();
    if a <= c {
        a
    } else {
        (r * r + c * c) / (2.0 * c)
    }
}

fn berhu_grad(r: f64, c: f64) -> f64 {
    if r.abs() <= c {
        sign(r)
    } else {
        r / c
    }
}

/// Numerically stable softmax over the channel axis.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.plane();
    let mut y = Tensor::zeros(s);
    for n in 0..s.n() {
        for i in 0..plane {
            let idx = |c: usize| (n * s.c() + c) * plane + i;
            let max = (0..s.c()).map(|c| x.data()[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s.c() {
                let e = (x.data()[idx(c)] - max).exp();
                y.data_mut()[idx(c)] = e;
                z += e;
            }
            for c in 0..s.c() {
                y.data_mut()[idx(c)] /= z;
            }
        }
    }
    y
}
