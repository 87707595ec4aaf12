//! Assembles the training objective from head outputs and a batch.

use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use crate::heads::TreeHeadOutput;
use crate::losses::{
    associative_bbox, associative_cls, bbox_loss, cls_loss, masked_mean, selective_bbox, selective_cls, total_loss,
    LossBundle, LossConfig,
};
use crate::routing::{route_step, RoutingRng, SelectiveWeights};
use crate::taskgen::RegionBatch;

/// Per-sample base losses of each leaf, `[n, 1]`, still on the tape.
#[derive(Debug, Clone)]
pub struct NodeLosses {
    pub cls_left: Tensor,
    pub cls_right: Tensor,
    pub bbox_left: Tensor,
    pub bbox_right: Tensor,
}

pub fn node_losses(tape: &mut Tape, out: &TreeHeadOutput, batch: &RegionBatch, cfg: &LossConfig) -> Result<NodeLosses> {
    Ok(NodeLosses {
        cls_left: cls_loss(tape, &out.c_left, &batch.labels, cfg)?,
        cls_right: cls_loss(tape, &out.c_right, &batch.labels, cfg)?,
        bbox_left: bbox_loss(tape, &out.b_left, &batch.targets, &batch.proposals, cfg)?,
        bbox_right: bbox_loss(tape, &out.b_right, &batch.targets, &batch.proposals, cfg)?,
    })
}

/// Samples selective weights from detached node losses and regression routing probabilities.
pub fn select_weights(out: &TreeHeadOutput, nodes: &NodeLosses, rng: &mut RoutingRng) -> Result<SelectiveWeights> {
    route_step(
        nodes.cls_left.values(),
        nodes.cls_right.values(),
        out.q_left.values(),
        out.q_right.values(),
        rng,
    )
}

/// Selective, associative and total losses for a tree head.
pub fn tree_bundle(
    tape: &mut Tape,
    out: &TreeHeadOutput,
    nodes: &NodeLosses,
    weights: &SelectiveWeights,
    batch: &RegionBatch,
    cfg: &LossConfig,
) -> Result<LossBundle> {
    let sel_cls = selective_cls(tape, &nodes.cls_left, &nodes.cls_right, &weights.cls_left, &weights.cls_right)?;
    let sel_bbox = selective_bbox(
        tape,
        &nodes.bbox_left,
        &nodes.bbox_right,
        &weights.bbox_left,
        &weights.bbox_right,
        &batch.foreground,
    )?;
    let assoc_cls = associative_cls(tape, &out.c_left, &out.c_right, &out.p_left, &out.p_right, &batch.labels, cfg)?;
    let assoc_bbox = associative_bbox(
        tape,
        &out.b_left,
        &out.b_right,
        &out.q_left,
        &out.q_right,
        &batch.targets,
        &batch.proposals,
        &batch.foreground,
        cfg,
    )?;
    let total = total_loss(tape, &sel_cls, &sel_bbox, &assoc_cls, &assoc_bbox, cfg.lambda)?;
    Ok(LossBundle {
        sel_cls,
        sel_bbox,
        assoc_cls,
        assoc_bbox,
        total,
        node_cls: (nodes.cls_left.values().to_vec(), nodes.cls_right.values().to_vec()),
        node_bbox: (nodes.bbox_left.values().to_vec(), nodes.bbox_right.values().to_vec()),
    })
}

/// Plain detection loss for the single head: `cls + bbox`, whatever `lambda` is.
///
/// The selective terms are reported as zero; the associative slots hold the
/// base losses so metric files share one layout across variants.
pub fn single_bundle(tape: &mut Tape, c: &Tensor, b: &Tensor, batch: &RegionBatch, cfg: &LossConfig) -> Result<LossBundle> {
    let per_cls = cls_loss(tape, c, &batch.labels, cfg)?;
    let per_bbox = bbox_loss(tape, b, &batch.targets, &batch.proposals, cfg)?;
    let assoc_cls = tape.mean(&per_cls)?;
    let assoc_bbox = masked_mean(tape, &per_bbox, &batch.foreground)?;
    let total = tape.add(&assoc_cls, &assoc_bbox)?;
    Ok(LossBundle {
        sel_cls: Tensor::scalar(0.0),
        sel_bbox: Tensor::scalar(0.0),
        assoc_cls,
        assoc_bbox,
        total,
        node_cls: (per_cls.values().to_vec(), Vec::new()),
        node_bbox: (per_bbox.values().to_vec(), Vec::new()),
    })
}
