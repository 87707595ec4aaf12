//! Randomized decision routing: which leaf learns fast, and by how much.
//!
//! For classification the leaf with the lower per-sample loss is selected;
//! for box regression the leaf with the higher regression routing
//! probability `q` is selected. The selected leaf's weight is drawn from
//! `U(0.9, 1.1)` and the other leaf's from `U(0.1, 0.3)`, independently per
//! sample, per task, every step. Inputs are plain `f64` slices, so nothing
//! the policy reads can carry gradient.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{ks_uniform, KsResult};

pub const LOW_RANGE: (f64, f64) = (0.1, 0.3);
pub const HIGH_RANGE: (f64, f64) = (0.9, 1.1);
/// Differences below this count as ties and go to a coin flip.
pub const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Left,
    Right,
}

impl Node {
    pub fn name(self) -> &'static str {
        match self {
            Node::Left => "left",
            Node::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Cls,
    Bbox,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Bbox => "bbox",
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    ClsSelect = 0,
    BboxSelect = 1,
    ClsWeights = 2,
    BboxWeights = 3,
}

/// Seeded generator with one independent counter-based stream per concern
/// (classification coin, box coin, classification weights, box weights).
#[derive(Debug, Clone)]
pub struct RoutingRng {
    seed: u64,
    streams: [ChaCha8Rng; 4],
}

impl RoutingRng {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, [0; 4])
    }

    /// Resumes at the given stream positions (see [`RoutingRng::positions`]).
    pub fn at(seed: u64, positions: [u128; 4]) -> Self {
        let streams = std::array::from_fn(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64);
            r.set_word_pos(positions[i]);
            r
        });
        Self { seed, streams }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn positions(&self) -> [u128; 4] {
        std::array::from_fn(|i| self.streams[i].get_word_pos())
    }

    fn stream(&mut self, s: Stream) -> &mut ChaCha8Rng {
        &mut self.streams[s as usize]
    }
}

/// Sampled selective weights for one batch; constants by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveWeights {
    pub cls_selected: Vec<Node>,
    pub cls_left: Vec<f64>,
    pub cls_right: Vec<f64>,
    pub bbox_selected: Vec<Node>,
    pub bbox_left: Vec<f64>,
    pub bbox_right: Vec<f64>,
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NotFinite(what.into()))
    }
}

fn check_pair(what: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Length { what, left: a.len(), right: b.len() });
    }
    check_finite(what, a)?;
    check_finite(what, b)
}

/// `prefer_left` decides non-ties; ties flip a fair coin from `rng`.
fn select(a: &[f64], b: &[f64], rng: &mut ChaCha8Rng, prefer_left: impl Fn(f64, f64) -> bool) -> Vec<Node> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let left = if (x - y).abs() < TIE_EPS {
                rng.random_bool(0.5)
            } else {
                prefer_left(x, y)
            };
            if left {
                Node::Left
            } else {
                Node::Right
            }
        })
        .collect()
}

/// The leaf with the lower classification loss is selected.
pub fn select_node_cls(loss_left: &[f64], loss_right: &[f64], rng: &mut RoutingRng) -> Result<Vec<Node>> {
    check_pair("classification node losses", loss_left, loss_right)?;
    Ok(select(loss_left, loss_right, rng.stream(Stream::ClsSelect), |l, r| l < r))
}

/// The leaf with the higher regression routing probability is selected.
pub fn select_node_bbox(q_left: &[f64], q_right: &[f64], rng: &mut RoutingRng) -> Result<Vec<Node>> {
    check_pair("regression routing probabilities", q_left, q_right)?;
    if let Some((l, r)) = q_left.iter().zip(q_right).find(|(l, r)| (*l + *r - 1.0).abs() > 1e-6) {
        return Err(Error::config("q", format!("routing probabilities {l} + {r} do not sum to 1")));
    }
    Ok(select(q_left, q_right, rng.stream(Stream::BboxSelect), |l, r| l > r))
}

/// Draws `(left, right)` weights: the selected leaf from the high range, the other from the low range.
///
/// Each sample consumes one high draw and then one low draw, whichever side
/// is selected, so mirrored selections receive mirrored weights.
pub fn sample_weights(selection: &[Node], task: Task, rng: &mut RoutingRng) -> (Vec<f64>, Vec<f64>) {
    let stream = rng.stream(match task {
        Task::Cls => Stream::ClsWeights,
        Task::Bbox => Stream::BboxWeights,
    });
    let mut left = Vec::with_capacity(selection.len());
    let mut right = Vec::with_capacity(selection.len());
    for node in selection {
        let high = stream.random_range(HIGH_RANGE.0..=HIGH_RANGE.1);
        let low = stream.random_range(LOW_RANGE.0..=LOW_RANGE.1);
        debug_assert!((HIGH_RANGE.0..=HIGH_RANGE.1).contains(&high));
        debug_assert!((LOW_RANGE.0..=LOW_RANGE.1).contains(&low));
        let (l, r) = match node {
            Node::Left => (high, low),
            Node::Right => (low, high),
        };
        left.push(l);
        right.push(r);
    }
    (left, right)
}

/// One training step's routing: classification keyed on node losses, regression keyed on `q`.
pub fn route_step(
    cls_loss_left: &[f64],
    cls_loss_right: &[f64],
    q_left: &[f64],
    q_right: &[f64],
    rng: &mut RoutingRng,
) -> Result<SelectiveWeights> {
    if cls_loss_left.len() != q_left.len() {
        return Err(Error::Length {
            what: "routing inputs",
            left: cls_loss_left.len(),
            right: q_left.len(),
        });
    }
    let cls_selected = select_node_cls(cls_loss_left, cls_loss_right, rng)?;
    let bbox_selected = select_node_bbox(q_left, q_right, rng)?;
    let (cls_left, cls_right) = sample_weights(&cls_selected, Task::Cls, rng);
    let (bbox_left, bbox_right) = sample_weights(&bbox_selected, Task::Bbox, rng);
    Ok(SelectiveWeights {
        cls_selected,
        cls_left,
        cls_right,
        bbox_selected,
        bbox_left,
        bbox_right,
    })
}

/// Appends `step,sample,task,selected,gamma_left,gamma_right` rows.
pub fn write_audit_rows<W: Write>(out: &mut W, step: usize, w: &SelectiveWeights) -> Result<()> {
    let tasks = [
        (Task::Cls, &w.cls_selected, &w.cls_left, &w.cls_right),
        (Task::Bbox, &w.bbox_selected, &w.bbox_left, &w.bbox_right),
    ];
    for i in 0..w.cls_selected.len() {
        for (task, sel, l, r) in tasks {
            writeln!(out, "{step},{i},{},{},{:.16e},{:.16e}", task.name(), sel[i].name(), l[i], r[i])?;
        }
    }
    Ok(())
}

pub const AUDIT_HEADER: &str = "step,sample,task,selected,gamma_left,gamma_right";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub all_within: bool,
    pub ks: KsResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerAudit {
    pub draws: usize,
    pub seed: u64,
    pub low: RangeReport,
    pub high: RangeReport,
}

fn range_report(xs: &[f64], (lo, hi): (f64, f64)) -> RangeReport {
    RangeReport {
        lo,
        hi,
        mean: xs.iter().sum::<f64>() / xs.len() as f64,
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        all_within: xs.iter().all(|x| (lo..=hi).contains(x)),
        ks: ks_uniform(xs, lo, hi),
    }
}

/// Draws `draws` weight pairs and summarizes both ranges.
pub fn audit_sampler(draws: usize, seed: u64) -> Result<SamplerAudit> {
    if draws < 1000 {
        return Err(Error::config("draws", "need at least 1000 draws"));
    }
    let mut rng = RoutingRng::new(seed);
    let (high, low) = sample_weights(&vec![Node::Left; draws], Task::Cls, &mut rng);
    Ok(SamplerAudit {
        draws,
        seed,
        low: range_report(&low, LOW_RANGE),
        high: range_report(&high, HIGH_RANGE),
    })
}
