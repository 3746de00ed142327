//! Closed-form loss values on plain tensors. The differentiable versions
//! live on the tape in `onh-tensor`; these are used for reporting.

use onh_tensor::{berhu, Tensor};
use serde::{Deserialize, Serialize};

use crate::raster::{LabelMap, ProbabilityMap};
use crate::{CoreError, Result};

/// Fraction of the largest absolute residual used as the berHu knee.
pub const BERHU_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L2,
    L1,
    Berhu,
    MulticlassCe,
}

impl std::str::FromStr for LossKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "l1" => Ok(LossKind::L1),
            "berhu" => Ok(LossKind::Berhu),
            "ce" | "multiclass_ce" => Ok(LossKind::MulticlassCe),
            other => Err(CoreError::Config(format!("unknown loss {other:?}"))),
        }
    }
}

fn residuals(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(CoreError::Shape(format!("prediction {} vs target {}", pred.shape(), gt.shape())));
    }
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| a - b).collect())
}

/// `‖pred − gt‖₂`.
pub fn loss_l2(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(residuals(pred, gt)?.iter().map(|r| r * r).sum::<f64>().sqrt())
}

/// `‖pred − gt‖₁`.
pub fn loss_l1(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(residuals(pred, gt)?.iter().map(|r| r.abs()).sum())
}

/// Knee of the berHu penalty for a batch.
pub fn berhu_threshold(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let r = residuals(pred, gt)?;
    if r.is_empty() {
        return Err(CoreError::Empty("berHu batch"));
    }
    Ok(BERHU_FRACTION * r.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Summed reverse Huber penalty with the batch knee.
pub fn loss_berhu(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let c = berhu_threshold(pred, gt)?;
    Ok(residuals(pred, gt)?.iter().map(|&r| berhu(r, c)).sum())
}

/// Mean negative log-probability of the true class.
pub fn loss_multiclass_ce(prob: &ProbabilityMap, labels: &LabelMap) -> Result<f64> {
    if (prob.height(), prob.width()) != labels.dims() {
        return Err(CoreError::Shape(format!(
            "probabilities {}x{} vs labels {:?}",
            prob.height(),
            prob.width(),
            labels.dims()
        )));
    }
    if labels.is_empty() {
        return Err(CoreError::Empty("label map"));
    }
    let mut total = 0.0;
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            let l = *labels.get(y, x) as usize;
            if l >= prob.classes() {
                return Err(CoreError::LabelRange {
                    label: l,
                    classes: prob.classes(),
                });
            }
            total -= prob.prob(l, y, x).max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(total / labels.len() as f64)
}
