//! Base classification and box losses, and the selective / associative
//! combinations used to train two-leaf decision heads.
//!
//! Base losses return per-sample columns `[n, 1]`. The combinations reduce
//! them to scalars: a mean over the batch for classification and a mean over
//! foreground samples for box regression (0 when the batch has none).
//!
//! With node losses `L_l`, `L_r`, sampled weights `g_l`, `g_r` and routing
//! probabilities `p`, `q`:
//!
//! ```text
//! selective   = mean(g_l * L(c_l) + g_r * L(c_r))
//! associative = mean(L(p_l * c_l + p_r * c_r))
//! total       = lambda * (Ls_cls + Ls_bbox) + (1 - lambda) * (La_cls + La_bbox)
//! ```
//!
//! Only the associative terms see the routing probabilities, so they are the
//! sole supervision of the routing branch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::taskgen::BBox;

/// Largest selective/associative balance permitted in training.
pub const MAX_LAMBDA: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLossKind {
    CrossEntropy,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BboxLossKind {
    SmoothL1,
    Iou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls_kind: ClsLossKind,
    pub bbox_kind: BboxLossKind,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub smooth_l1_beta: f64,
    /// Floor applied to IoU before the log.
    pub iou_floor: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_kind: ClsLossKind::CrossEntropy,
            bbox_kind: BboxLossKind::SmoothL1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            smooth_l1_beta: 1.0,
            iou_floor: 1e-6,
            lambda: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::config("loss.focal_gamma", "must be nonnegative"));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha.is_finite()) {
            return Err(Error::config("loss.focal_alpha", "must be positive"));
        }
        if !(self.smooth_l1_beta > 0.0 && self.smooth_l1_beta.is_finite()) {
            return Err(Error::config("loss.smooth_l1_beta", "must be positive"));
        }
        if !(self.iou_floor > 0.0 && self.iou_floor < 1.0) {
            return Err(Error::config("loss.iou_floor", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=MAX_LAMBDA).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config("loss.lambda", format!("must lie in [0, {MAX_LAMBDA}], got {lambda}")))
    }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    let k = logits.cols();
    if logits.shape().len() != 2 || labels.len() != logits.rows() {
        return Err(Error::Length {
            what: "labels vs logits rows",
            left: labels.len(),
            right: logits.rows(),
        });
    }
    match labels.iter().find(|&&y| y >= k) {
        Some(&y) => Err(Error::LabelOutOfRange { label: y, classes: k }),
        None => Ok(()),
    }
}

/// `-log softmax(logits)[y]` per sample.
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check_labels(logits, labels)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(&logp, labels)?;
    tape.scalar_mul(&picked, -1.0)
}

/// `alpha * (1 - p_t)^gamma * -log p_t` per sample.
pub fn focal(tape: &mut Tape, logits: &Tensor, labels: &[usize], gamma: f64, alpha: f64) -> Result<Tensor> {
    check_labels(logits, labels)?;
    let logp = tape.log_softmax(logits)?;
    let logp_t = tape.pick(&logp, labels)?;
    let p_t = tape.exp(&logp_t)?;
    let neg = tape.scalar_mul(&p_t, -1.0)?;
    let one_minus = tape.add_scalar(&neg, 1.0)?;
    let modulating = tape.powf(&one_minus, gamma)?;
    let ce = tape.scalar_mul(&logp_t, -alpha)?;
    tape.mul(&modulating, &ce)
}

/// Smooth-L1 summed over the four coordinates, per sample.
pub fn smooth_l1(tape: &mut Tape, pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    let residual = tape.sub(pred, target)?;
    let per_coord = tape.huber(&residual, beta)?;
    tape.sum_last_axis(&per_coord)
}

struct Decoded {
    x1: Tensor,
    y1: Tensor,
    x2: Tensor,
    y2: Tensor,
}

/// Differentiable inverse of the box-delta encoding against constant proposals.
fn decode_on_tape(tape: &mut Tape, deltas: &Tensor, proposals: &[BBox]) -> Result<Decoded> {
    if deltas.shape() != [proposals.len(), 4] {
        return Err(Error::Shape {
            op: "iou_loss",
            lhs: deltas.shape().to_vec(),
            rhs: vec![proposals.len(), 4],
        });
    }
    for p in proposals {
        p.validate()?;
    }
    let col = |f: fn(&BBox) -> f64| Tensor::column(proposals.iter().map(f).collect());
    let pw = col(BBox::width);
    let ph = col(BBox::height);
    let pcx = col(|b| b.center().0);
    let pcy = col(|b| b.center().1);

    let dx = tape.columns(deltas, 0, 1)?;
    let dy = tape.columns(deltas, 1, 2)?;
    let dw = tape.columns(deltas, 2, 3)?;
    let dh = tape.columns(deltas, 3, 4)?;

    let sx = tape.mul(&dx, &pw)?;
    let cx = tape.add(&sx, &pcx)?;
    let sy = tape.mul(&dy, &ph)?;
    let cy = tape.add(&sy, &pcy)?;
    let ew = tape.exp(&dw)?;
    let w = tape.mul(&ew, &pw)?;
    let eh = tape.exp(&dh)?;
    let h = tape.mul(&eh, &ph)?;
    let half_w = tape.scalar_mul(&w, 0.5)?;
    let half_h = tape.scalar_mul(&h, 0.5)?;
    Ok(Decoded {
        x1: tape.sub(&cx, &half_w)?,
        y1: tape.sub(&cy, &half_h)?,
        x2: tape.add(&cx, &half_w)?,
        y2: tape.add(&cy, &half_h)?,
    })
}

fn max2(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = tape.sub(b, a)?;
    let r = tape.relu(&d)?;
    tape.add(a, &r)
}

fn min2(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = tape.sub(a, b)?;
    let r = tape.relu(&d)?;
    tape.sub(a, &r)
}

/// `-log(max(IoU, floor))` between the boxes decoded from `pred` and `target`.
pub fn iou_loss(tape: &mut Tape, pred: &Tensor, target: &Tensor, proposals: &[BBox], floor: f64) -> Result<Tensor> {
    let a = decode_on_tape(tape, pred, proposals)?;
    let b = decode_on_tape(tape, target, proposals)?;

    let ix1 = max2(tape, &a.x1, &b.x1)?;
    let ix2 = min2(tape, &a.x2, &b.x2)?;
    let iy1 = max2(tape, &a.y1, &b.y1)?;
    let iy2 = min2(tape, &a.y2, &b.y2)?;
    let iw_raw = tape.sub(&ix2, &ix1)?;
    let iw = tape.relu(&iw_raw)?;
    let ih_raw = tape.sub(&iy2, &iy1)?;
    let ih = tape.relu(&ih_raw)?;
    let inter = tape.mul(&iw, &ih)?;

    let area = |tape: &mut Tape, d: &Decoded| -> Result<Tensor> {
        let w = tape.sub(&d.x2, &d.x1)?;
        let h = tape.sub(&d.y2, &d.y1)?;
        tape.mul(&w, &h)
    };
    let area_a = area(tape, &a)?;
    let area_b = area(tape, &b)?;
    let both = tape.add(&area_a, &area_b)?;
    let union = tape.sub(&both, &inter)?;
    let iou = tape.div(&inter, &union)?;
    let floored = tape.clamp_min(&iou, floor)?;
    let log_iou = tape.log(&floored)?;
    tape.scalar_mul(&log_iou, -1.0)
}

/// Per-sample classification loss of the configured kind.
pub fn cls_loss(tape: &mut Tape, logits: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<Tensor> {
    match cfg.cls_kind {
        ClsLossKind::CrossEntropy => cross_entropy(tape, logits, labels),
        ClsLossKind::Focal => focal(tape, logits, labels, cfg.focal_gamma, cfg.focal_alpha),
    }
}

/// Per-sample box loss of the configured kind (computed for every row;
/// background rows are masked out by the reductions).
pub fn bbox_loss(tape: &mut Tape, pred: &Tensor, target: &Tensor, proposals: &[BBox], cfg: &LossConfig) -> Result<Tensor> {
    match cfg.bbox_kind {
        BboxLossKind::SmoothL1 => smooth_l1(tape, pred, target, cfg.smooth_l1_beta),
        BboxLossKind::Iou => iou_loss(tape, pred, target, proposals, cfg.iou_floor),
    }
}

fn check_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Length { what, left: a, right: b })
    }
}

fn weighted_pair(tape: &mut Tape, l_left: &Tensor, l_right: &Tensor, g_left: &[f64], g_right: &[f64]) -> Result<Tensor> {
    let n = l_left.len();
    check_len("selective node losses", n, l_right.len())?;
    check_len("selective weights (left)", n, g_left.len())?;
    check_len("selective weights (right)", n, g_right.len())?;
    let gl = Tensor::new(l_left.shape().to_vec(), g_left.to_vec())?;
    let gr = Tensor::new(l_right.shape().to_vec(), g_right.to_vec())?;
    let a = tape.mul(&gl, l_left)?;
    let b = tape.mul(&gr, l_right)?;
    tape.add(&a, &b)
}

/// Mean over rows where `mask` is set; a constant 0 when none is.
pub fn masked_mean(tape: &mut Tape, per_sample: &Tensor, mask: &[bool]) -> Result<Tensor> {
    check_len("foreground mask", per_sample.len(), mask.len())?;
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let weights = Tensor::new(
        per_sample.shape().to_vec(),
        mask.iter().map(|&m| f64::from(u8::from(m))).collect(),
    )?;
    let masked = tape.mul(&weights, per_sample)?;
    let total = tape.sum(&masked)?;
    tape.scalar_mul(&total, 1.0 / count as f64)
}

/// Selective classification loss: `mean(g_l * L_l + g_r * L_r)`.
///
/// The weights are constants; they never receive gradient.
pub fn selective_cls(tape: &mut Tape, l_left: &Tensor, l_right: &Tensor, g_left: &[f64], g_right: &[f64]) -> Result<Tensor> {
    let pair = weighted_pair(tape, l_left, l_right, g_left, g_right)?;
    tape.mean(&pair)
}

/// Selective box loss, averaged over foreground samples only.
pub fn selective_bbox(
    tape: &mut Tape,
    l_left: &Tensor,
    l_right: &Tensor,
    g_left: &[f64],
    g_right: &[f64],
    foreground: &[bool],
) -> Result<Tensor> {
    let pair = weighted_pair(tape, l_left, l_right, g_left, g_right)?;
    masked_mean(tape, &pair, foreground)
}

/// `w_l * left + w_r * right`, with `[n, 1]` weights broadcast over columns.
pub fn fuse(tape: &mut Tape, left: &Tensor, right: &Tensor, w_left: &Tensor, w_right: &Tensor) -> Result<Tensor> {
    let a = tape.broadcast_mul(left, w_left)?;
    let b = tape.broadcast_mul(right, w_right)?;
    tape.add(&a, &b)
}

/// Base classification loss on the fused logits, averaged over the batch.
pub fn associative_cls(
    tape: &mut Tape,
    c_left: &Tensor,
    c_right: &Tensor,
    p_left: &Tensor,
    p_right: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Tensor> {
    let c = fuse(tape, c_left, c_right, p_left, p_right)?;
    let per_sample = cls_loss(tape, &c, labels, cfg)?;
    tape.mean(&per_sample)
}

/// Base box loss on the fused deltas, averaged over foreground samples.
#[allow(clippy::too_many_arguments)]
pub fn associative_bbox(
    tape: &mut Tape,
    b_left: &Tensor,
    b_right: &Tensor,
    q_left: &Tensor,
    q_right: &Tensor,
    targets: &Tensor,
    proposals: &[BBox],
    foreground: &[bool],
    cfg: &LossConfig,
) -> Result<Tensor> {
    let b = fuse(tape, b_left, b_right, q_left, q_right)?;
    let per_sample = bbox_loss(tape, &b, targets, proposals, cfg)?;
    masked_mean(tape, &per_sample, foreground)
}

/// `lambda * (sel_cls + sel_bbox) + (1 - lambda) * (assoc_cls + assoc_bbox)` for any `lambda` in `[0, 1]`.
///
/// Training goes through [`total_loss`], which also enforces the upper bound.
pub fn combine(
    tape: &mut Tape,
    sel_cls: &Tensor,
    sel_bbox: &Tensor,
    assoc_cls: &Tensor,
    assoc_bbox: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("loss.lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    let sel = tape.add(sel_cls, sel_bbox)?;
    let assoc = tape.add(assoc_cls, assoc_bbox)?;
    let a = tape.scalar_mul(&sel, lambda)?;
    let b = tape.scalar_mul(&assoc, 1.0 - lambda)?;
    tape.add(&a, &b)
}

/// The training objective; rejects `lambda` above [`MAX_LAMBDA`].
pub fn total_loss(
    tape: &mut Tape,
    sel_cls: &Tensor,
    sel_bbox: &Tensor,
    assoc_cls: &Tensor,
    assoc_bbox: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    combine(tape, sel_cls, sel_bbox, assoc_cls, assoc_bbox, lambda)
}

/// Every loss term of one training step.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub sel_cls: Tensor,
    pub sel_bbox: Tensor,
    pub assoc_cls: Tensor,
    pub assoc_bbox: Tensor,
    /// Backward root.
    pub total: Tensor,
    /// Detached per-sample node losses: classification left/right, box left/right.
    pub node_cls: (Vec<f64>, Vec<f64>),
    pub node_bbox: (Vec<f64>, Vec<f64>),
}

impl LossBundle {
    /// Scalar values `(sel_cls, sel_bbox, assoc_cls, assoc_bbox, total)`.
    pub fn values(&self) -> [f64; 5] {
        [&self.sel_cls, &self.sel_bbox, &self.assoc_cls, &self.assoc_bbox, &self.total]
            .map(|t| t.item().expect("scalar loss"))
    }
}
