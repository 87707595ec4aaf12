use serde::{Deserialize, Serialize};

use super::config::{HeadConfig, Variant};
use crate::error::Result;

/// Trainable scalars per block of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trunk: usize,
    /// Task-specific last feature layers (`T` only).
    pub task_branches: usize,
    pub node_predictors: usize,
    pub routing_branch: usize,
    pub mask_branch: usize,
    pub total: usize,
    /// Floating point operations per sample for the dense layers (2 per multiply-add).
    /// The mask branch runs once per batch and is left out.
    pub flops_per_sample: usize,
}

fn affine(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

pub fn count_params(cfg: &HeadConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let k = cfg.num_classes;
    let widths = &cfg.trunk.widths;
    let h = *widths.last().unwrap();
    let ins: Vec<usize> = std::iter::once(d).chain(widths.iter().copied()).collect();

    let mut trunk: usize = (0..widths.len()).map(|i| affine(ins[i], widths[i])).sum();
    let mut trunk_macs: usize = (0..widths.len()).map(|i| ins[i] * widths[i]).sum();
    let mut task_branches = 0;
    let mut task_macs = 0;
    if cfg.variant == Variant::T {
        let last = widths.len() - 1;
        trunk -= affine(ins[last], h);
        trunk_macs -= ins[last] * h;
        task_branches = 2 * affine(ins[last], h);
        task_macs = 2 * ins[last] * h;
    }

    let leaves = if cfg.variant.is_tree() { 2 } else { 1 };
    let node_predictors = leaves * (affine(h, k) + affine(h, 4));
    let node_macs = leaves * h * (k + 4);

    let (routing_branch, routing_macs) = if cfg.variant.is_tree() {
        let w = cfg.routing_width();
        let depth = cfg.routing_depth();
        let hidden = affine(d, w) + (depth - 1) * affine(w, w);
        (hidden + affine(w, 4), d * w + (depth - 1) * w * w + w * 4)
    } else {
        (0, 0)
    };

    let mask_branch = if cfg.variant.has_masks() { 2 * affine(d, h) } else { 0 };

    Ok(ParamCount {
        trunk,
        task_branches,
        node_predictors,
        routing_branch,
        mask_branch,
        total: trunk + task_branches + node_predictors + routing_branch + mask_branch,
        flops_per_sample: 2 * (trunk_macs + task_macs + node_macs + routing_macs),
    })
}
