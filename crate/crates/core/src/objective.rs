//! Losses on saliency logits: binary cross-entropy, soft IoU and their sum.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Smoothing constant of the soft IoU loss.
pub const IOU_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// BCE only.
    #[default]
    Bce,
    /// BCE + soft IoU.
    Structure,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bce: f64,
    pub iou: f64,
    pub edge_bce: Option<f64>,
    pub total: f64,
}

fn check(logits: &[f64], gt: &[f64]) -> Result<()> {
    if logits.len() != gt.len() {
        return Err(Error::Shape(format!("logits {} vs gt {}", logits.len(), gt.len())));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("loss over zero pixels"));
    }
    if let Some(v) = gt.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::NonBinaryMask(*v));
    }
    Ok(())
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with logits.
pub fn bce(logits: &[f64], gt: &[f64]) -> Result<f64> {
    check(logits, gt)?;
    let s: f64 = logits.iter().zip(gt).map(|(x, g)| softplus(*x) - g * x).sum();
    Ok(s / logits.len() as f64)
}

/// Gradient of [`bce`] with respect to the logits.
pub fn bce_grad(logits: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    check(logits, gt)?;
    let n = logits.len() as f64;
    Ok(logits.iter().zip(gt).map(|(x, g)| (sigmoid(*x) - g) / n).collect())
}

fn iou_terms(logits: &[f64], gt: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (x, g) in logits.iter().zip(gt) {
        let p = sigmoid(*x);
        inter += p * g;
        sp += p;
        sg += g;
    }
    (inter, sp + sg - inter)
}

/// `1 − (Σp·g + 1) / (Σp + Σg − Σp·g + 1)` with `p = σ(logits)`.
pub fn iou_loss(logits: &[f64], gt: &[f64]) -> Result<f64> {
    check(logits, gt)?;
    let (i, u) = iou_terms(logits, gt);
    Ok(1.0 - (i + IOU_SMOOTH) / (u + IOU_SMOOTH))
}

/// Gradient of [`iou_loss`] with respect to the logits.
pub fn iou_grad(logits: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    check(logits, gt)?;
    let (i, u) = iou_terms(logits, gt);
    let (num, den) = (i + IOU_SMOOTH, u + IOU_SMOOTH);
    Ok(logits
        .iter()
        .zip(gt)
        .map(|(x, g)| {
            let p = sigmoid(*x);
            let dp = -(g * den - num * (1.0 - g)) / (den * den);
            dp * p * (1.0 - p)
        })
        .collect())
}

/// BCE + IoU, plus edge BCE when enabled.
pub fn structure_loss(
    logits: &[f64],
    gt: &[f64],
    edge: Option<(&[f64], &[f64])>,
    edge_enabled: bool,
) -> Result<LossReport> {
    let b = bce(logits, gt)?;
    let i = iou_loss(logits, gt)?;
    let edge_bce = match (edge_enabled, edge) {
        (false, _) => None,
        (true, Some((el, eg))) => Some(bce(el, eg)?),
        (true, None) => {
            return Err(Error::InvalidArgument(
                "edge loss enabled but no edge logits/labels supplied".into(),
            ))
        }
    };
    Ok(LossReport {
        bce: b,
        iou: i,
        edge_bce,
        total: b + i + edge_bce.unwrap_or(0.0),
    })
}

/// Batch loss and gradients for training.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub report: LossReport,
    pub grad_logits: Tensor,
    pub grad_edge: Option<Tensor>,
}

/// Per-sample losses averaged over the batch. In [`LossMode::Bce`] the IoU
/// term is reported but excluded from `total` and from the gradient.
pub fn batch_loss(
    logits: &Tensor,
    gt: &Tensor,
    mode: LossMode,
    edge: Option<(&Tensor, &Tensor)>,
) -> Result<BatchLoss> {
    if logits.shape() != gt.shape() {
        return Err(Error::Shape(format!("logits {:?} vs gt {:?}", logits.shape(), gt.shape())));
    }
    let n = logits.n();
    let inv = 1.0 / n as f64;
    let mut grad = Vec::with_capacity(logits.len());
    let mut grad_edge = edge.map(|(e, _)| Vec::with_capacity(e.len()));
    let (mut sb, mut si, mut se) = (0.0, 0.0, 0.0);
    for s in 0..n {
        let (x, g) = (logits.sample(s), gt.sample(s));
        sb += bce(x, g)?;
        si += iou_loss(x, g)?;
        let gb = bce_grad(x, g)?;
        match mode {
            LossMode::Bce => grad.extend(gb.iter().map(|v| v * inv)),
            LossMode::Structure => {
                let gi = iou_grad(x, g)?;
                grad.extend(gb.iter().zip(&gi).map(|(a, b)| (a + b) * inv));
            }
        }
        if let (Some((el, eg)), Some(acc)) = (edge, grad_edge.as_mut()) {
            let (ex, egs) = (el.sample(s), eg.sample(s));
            se += bce(ex, egs)?;
            acc.extend(bce_grad(ex, egs)?.iter().map(|v| v * inv));
        }
    }
    let (b, i) = (sb * inv, si * inv);
    let edge_bce = edge.map(|_| se * inv);
    let total = match mode {
        LossMode::Bce => b,
        LossMode::Structure => b + i,
    } + edge_bce.unwrap_or(0.0);
    Ok(BatchLoss {
        report: LossReport {
            bce: b,
            iou: i,
            edge_bce,
            total,
        },
        grad_logits: Tensor::from_vec(logits.shape(), grad),
        grad_edge: grad_edge.zip(edge).map(|(g, (e, _))| Tensor::from_vec(e.shape(), g)),
    })
}
