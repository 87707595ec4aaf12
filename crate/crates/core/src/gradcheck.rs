//! Finite-difference verification of every differentiable op and loss.
//!
//! Each check builds a small graph from random inputs, projects its output
//! onto a random constant direction to get a scalar, and compares the tape's
//! gradient with central differences. The error measure is
//! `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)` per element,
//! and a check reports the maximum over all elements and trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OpKind, Tape, Tensor};
use crate::error::{Error, Result};
use crate::heads::{Bound, Head, HeadConfig, TrunkConfig, TrunkLayout, Variant};
use crate::losses::{self, BboxLossKind, ClsLossKind, LossConfig};
use crate::objective::{node_losses, single_bundle, tree_bundle};
use crate::routing::{Node, SelectiveWeights};
use crate::taskgen::{BBox, RegionBatch};

/// Denominator floor of the relative error, so gradients near zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;
/// Inputs are redrawn until every kink (`relu`, `abs`, `clamp_min`) is at least this far away.
pub const KINK_MARGIN: f64 = 1e-3;

const N: usize = 3;
const K: usize = 4;
const D: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect()
    }
}

/// Side data shared by all checks in one trial.
struct Ctx {
    labels: Vec<usize>,
    targets: Tensor,
    proposals: Vec<BBox>,
    foreground: Vec<bool>,
    gammas: [Vec<f64>; 4],
    lambda: f64,
    features: Tensor,
}

impl Ctx {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut foreground: Vec<bool> = (0..N).map(|_| rng.random_bool(0.6)).collect();
        foreground[0] = true;
        let labels = foreground
            .iter()
            .map(|&fg| if fg { rng.random_range(1..K) } else { 0 })
            .collect();
        let proposals = (0..N)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
                BBox::new(x, y, x + rng.random_range(2.0..6.0), y + rng.random_range(2.0..6.0)).unwrap()
            })
            .collect();
        let mut gamma = |node_left: bool| -> Vec<f64> {
            (0..N)
                .map(|_| if node_left { rng.random_range(0.9..1.1) } else { rng.random_range(0.1..0.3) })
                .collect()
        };
        let gammas = [gamma(true), gamma(false), gamma(false), gamma(true)];
        Self {
            labels,
            targets: uniform(rng, &[N, 4], -0.5, 0.5),
            proposals,
            foreground,
            gammas,
            lambda: rng.random_range(0.0..0.95),
            features: uniform(rng, &[N, D], -2.0, 2.0),
        }
    }

    fn weights(&self) -> SelectiveWeights {
        SelectiveWeights {
            cls_selected: vec![Node::Left; N],
            cls_left: self.gammas[0].clone(),
            cls_right: self.gammas[1].clone(),
            bbox_selected: vec![Node::Right; N],
            bbox_left: self.gammas[2].clone(),
            bbox_right: self.gammas[3].clone(),
        }
    }

    fn batch(&self) -> RegionBatch {
        RegionBatch {
            features: self.features.clone(),
            labels: self.labels.clone(),
            proposals: self.proposals.clone(),
            targets: self.targets.clone(),
            foreground: self.foreground.clone(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

struct Input {
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
}

fn input(shape: &[usize]) -> Input {
    Input { shape: shape.to_vec(), lo: -2.0, hi: 2.0 }
}

fn ranged(shape: &[usize], lo: f64, hi: f64) -> Input {
    Input { shape: shape.to_vec(), lo, hi }
}

type Build = Box<dyn Fn(&mut Tape, &[Tensor], &Ctx) -> Result<Tensor>>;

struct Check {
    name: String,
    inputs: Vec<Input>,
    build: Build,
}

fn check(
    name: &str,
    inputs: Vec<Input>,
    build: impl Fn(&mut Tape, &[Tensor], &Ctx) -> Result<Tensor> + 'static,
) -> Check {
    Check {
        name: name.to_string(),
        inputs,
        build: Box::new(build),
    }
}

fn loss_cfg(cls: ClsLossKind, bbox: BboxLossKind) -> LossConfig {
    LossConfig {
        cls_kind: cls,
        bbox_kind: bbox,
        ..Default::default()
    }
}

/// Two-way softmax of `[n, 2]` logits split into `[n, 1]` columns.
fn route(tape: &mut Tape, logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let p = tape.softmax(logits)?;
    Ok((tape.columns(&p, 0, 1)?, tape.columns(&p, 1, 2)?))
}

fn small_head(variant: Variant) -> HeadConfig {
    HeadConfig {
        variant,
        input_dim: D,
        trunk: TrunkConfig { layout: TrunkLayout::TwoFc, widths: vec![8, 8] },
        num_classes: K,
        routing_branch_depth: None,
        routing_branch_width: Some(5),
    }
}

fn head_check(variant: Variant, cfg: LossConfig) -> Check {
    let head_cfg = small_head(variant);
    let template = Head::build(&head_cfg, 0).expect("valid head");
    let inputs = (0..template.params().len())
        .map(|i| ranged(template.params().shape(i), -0.5, 0.5))
        .collect();
    // parameters stay small so predicted boxes mostly overlap their targets
    check(&format!("head_total_{}", variant.name()), inputs, move |tape, xs, ctx| {
        // bind the given tensors directly so gradients reach them
        let bound = Bound::from_tensors(template.params(), xs.to_vec())?;
        let batch = ctx.batch();
        let cfg = LossConfig { lambda: ctx.lambda, ..cfg.clone() };
        if variant.is_tree() {
            let out = template.forward_tree(tape, &bound, &batch.features)?;
            let nodes = node_losses(tape, &out, &batch, &cfg)?;
            Ok(tree_bundle(tape, &out, &nodes, &ctx.weights(), &batch, &cfg)?.total)
        } else {
            let (c, b) = template.forward_single(tape, &bound, &batch.features)?;
            Ok(single_bundle(tape, &c, &b, &batch, &cfg)?.total)
        }
    })
}

fn registry() -> Vec<Check> {
    use ClsLossKind::*;
    let nk = [N, K];
    let n4 = [N, 4];
    let mut checks = vec![
        check("matmul", vec![input(&[N, 4]), input(&[4, 2])], |t, x, _| t.matmul(&x[0], &x[1])),
        check("add", vec![input(&nk), input(&nk)], |t, x, _| t.add(&x[0], &x[1])),
        check("sub", vec![input(&nk), input(&nk)], |t, x, _| t.sub(&x[0], &x[1])),
        check("mul", vec![input(&nk), input(&nk)], |t, x, _| t.mul(&x[0], &x[1])),
        check("div", vec![input(&nk), ranged(&nk, 0.5, 2.0)], |t, x, _| t.div(&x[0], &x[1])),
        check("scalar_mul", vec![input(&nk)], |t, x, _| t.scalar_mul(&x[0], -1.7)),
        check("add_scalar", vec![input(&nk)], |t, x, _| t.add_scalar(&x[0], 0.3)),
        check("broadcast_add", vec![input(&nk), input(&[1, K])], |t, x, _| t.broadcast_add(&x[0], &x[1])),
        check("broadcast_mul", vec![input(&nk), input(&[N, 1])], |t, x, _| t.broadcast_mul(&x[0], &x[1])),
        check("relu", vec![input(&nk)], |t, x, _| t.relu(&x[0])),
        check("sigmoid", vec![input(&nk)], |t, x, _| t.sigmoid(&x[0])),
        check("exp", vec![input(&nk)], |t, x, _| t.exp(&x[0])),
        check("log", vec![ranged(&nk, 0.1, 2.0)], |t, x, _| t.log(&x[0])),
        check("abs", vec![input(&nk)], |t, x, _| t.abs(&x[0])),
        check("powf", vec![ranged(&nk, 0.1, 2.0)], |t, x, _| t.powf(&x[0], 2.5)),
        check("huber", vec![input(&nk)], |t, x, _| t.huber(&x[0], 0.7)),
        check("clamp_min", vec![input(&nk)], |t, x, _| t.clamp_min(&x[0], 0.2)),
        check("softmax", vec![input(&nk)], |t, x, _| t.softmax(&x[0])),
        check("log_softmax", vec![input(&nk)], |t, x, _| t.log_softmax(&x[0])),
        check("sum", vec![input(&nk)], |t, x, _| t.sum(&x[0])),
        check("mean", vec![input(&nk)], |t, x, _| t.mean(&x[0])),
        check("sum_last_axis", vec![input(&nk)], |t, x, _| t.sum_last_axis(&x[0])),
        check("mean_first_axis", vec![input(&nk)], |t, x, _| t.mean_first_axis(&x[0])),
        check("concat", vec![input(&[N, 2]), input(&[N, 3])], |t, x, _| t.concat(&[&x[0], &x[1]])),
        check("columns", vec![input(&nk)], |t, x, _| t.columns(&x[0], 1, 3)),
        check("pick", vec![input(&nk)], |t, x, c| t.pick(&x[0], &c.labels)),
        check("cross_entropy", vec![input(&nk)], |t, x, c| losses::cross_entropy(t, &x[0], &c.labels)),
        check("focal", vec![input(&nk)], |t, x, c| losses::focal(t, &x[0], &c.labels, 2.0, 0.25)),
        check("smooth_l1", vec![input(&n4)], |t, x, c| losses::smooth_l1(t, &x[0], &c.targets, 1.0)),
        check("iou_loss", vec![ranged(&n4, -0.5, 0.5)], |t, x, c| {
            losses::iou_loss(t, &x[0], &c.targets, &c.proposals, 1e-6)
        }),
        check("masked_mean", vec![input(&[N, 1])], |t, x, c| losses::masked_mean(t, &x[0], &c.foreground)),
        check("fuse", vec![input(&nk), input(&nk), input(&[N, 2])], |t, x, _| {
            let (pl, pr) = route(t, &x[2])?;
            losses::fuse(t, &x[0], &x[1], &pl, &pr)
        }),
        check("selective_cls", vec![input(&nk), input(&nk)], |t, x, c| {
            let l = losses::cross_entropy(t, &x[0], &c.labels)?;
            let r = losses::cross_entropy(t, &x[1], &c.labels)?;
            losses::selective_cls(t, &l, &r, &c.gammas[0], &c.gammas[1])
        }),
        check("selective_bbox", vec![input(&n4), input(&n4)], |t, x, c| {
            let l = losses::smooth_l1(t, &x[0], &c.targets, 1.0)?;
            let r = losses::smooth_l1(t, &x[1], &c.targets, 1.0)?;
            losses::selective_bbox(t, &l, &r, &c.gammas[2], &c.gammas[3], &c.foreground)
        }),
    ];
    for cls in [CrossEntropy, Focal] {
        let name = format!("associative_cls_{}", if cls == CrossEntropy { "cross_entropy" } else { "focal" });
        checks.push(check(&name, vec![input(&nk), input(&nk), input(&[N, 2])], move |t, x, c| {
            let (pl, pr) = route(t, &x[2])?;
            let cfg = loss_cfg(cls, BboxLossKind::SmoothL1);
            losses::associative_cls(t, &x[0], &x[1], &pl, &pr, &c.labels, &cfg)
        }));
    }
    for (bbox, lo, hi) in [(BboxLossKind::SmoothL1, -2.0, 2.0), (BboxLossKind::Iou, -0.5, 0.5)] {
        let name = format!("associative_bbox_{}", if bbox == BboxLossKind::Iou { "iou" } else { "smooth_l1" });
        checks.push(check(
            &name,
            vec![ranged(&n4, lo, hi), ranged(&n4, lo, hi), input(&[N, 2])],
            move |t, x, c| {
                let (ql, qr) = route(t, &x[2])?;
                let cfg = loss_cfg(CrossEntropy, bbox);
                losses::associative_bbox(t, &x[0], &x[1], &ql, &qr, &c.targets, &c.proposals, &c.foreground, &cfg)
            },
        ));
    }
    checks.push(check(
        "total_loss",
        vec![input(&nk), input(&nk), input(&[N, 2]), input(&n4), input(&n4), input(&[N, 2])],
        |t, x, c| {
            let cfg = LossConfig { lambda: c.lambda, ..Default::default() };
            let (pl, pr) = route(t, &x[2])?;
            let (ql, qr) = route(t, &x[5])?;
            let lc = losses::cross_entropy(t, &x[0], &c.labels)?;
            let rc = losses::cross_entropy(t, &x[1], &c.labels)?;
            let lb = losses::smooth_l1(t, &x[3], &c.targets, 1.0)?;
            let rb = losses::smooth_l1(t, &x[4], &c.targets, 1.0)?;
            let sc = losses::selective_cls(t, &lc, &rc, &c.gammas[0], &c.gammas[1])?;
            let sb = losses::selective_bbox(t, &lb, &rb, &c.gammas[2], &c.gammas[3], &c.foreground)?;
            let ac = losses::associative_cls(t, &x[0], &x[1], &pl, &pr, &c.labels, &cfg)?;
            let ab = losses::associative_bbox(t, &x[3], &x[4], &ql, &qr, &c.targets, &c.proposals, &c.foreground, &cfg)?;
            losses::total_loss(t, &sc, &sb, &ac, &ab, cfg.lambda)
        },
    ));
    checks.push(head_check(Variant::Single, loss_cfg(CrossEntropy, BboxLossKind::SmoothL1)));
    checks.push(head_check(Variant::B, loss_cfg(CrossEntropy, BboxLossKind::SmoothL1)));
    checks.push(head_check(Variant::M, loss_cfg(Focal, BboxLossKind::Iou)));
    checks.push(head_check(Variant::T, loss_cfg(CrossEntropy, BboxLossKind::Iou)));
    checks.push(head_check(Variant::Lite, loss_cfg(Focal, BboxLossKind::SmoothL1)));
    checks
}

/// Names of every registered check, in run order.
pub fn check_names() -> Vec<String> {
    registry().into_iter().map(|c| c.name).collect()
}

fn project(out: &Tensor, dir: &Tensor) -> f64 {
    out.values().iter().zip(dir.values()).map(|(a, b)| a * b).sum()
}

fn run_one(c: &Check, index: usize, cfg: &GradcheckConfig, fault: Option<OpKind>) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < cfg.trials {
        attempts += 1;
        if attempts > 20 * cfg.trials + 100 {
            return Err(Error::config("gradcheck", format!("{}: could not draw inputs away from kinks", c.name)));
        }
        let ctx = Ctx::draw(&mut rng);
        let xs: Vec<Tensor> = c.inputs.iter().map(|i| uniform(&mut rng, &i.shape, i.lo, i.hi)).collect();

        let mut tape = Tape::new();
        if let Some(kind) = fault {
            tape.inject_fault(kind);
        }
        let vars: Vec<Tensor> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = (c.build)(&mut tape, &vars, &ctx)?;
        if tape.kink_distance() < KINK_MARGIN {
            continue;
        }
        let dir = uniform(&mut rng, out.shape(), -1.0, 1.0);
        let weighted = tape.mul(&out, &dir)?;
        let root = tape.sum(&weighted)?;
        let grads = tape.backward(&root)?;

        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.get(var).ok_or(Error::StaleTensor)?;
            for j in 0..xs[i].len() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut moved = xs.clone();
                    let mut v = moved[i].values().to_vec();
                    v[j] += delta;
                    moved[i] = Tensor::new(moved[i].shape().to_vec(), v)?;
                    let out = (c.build)(&mut Tape::new(), &moved, &ctx)?;
                    Ok(project(&out, &dir))
                };
                let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
                let a = analytic[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            }
        }
        done += 1;
    }
    Ok(CheckResult {
        name: c.name.clone(),
        trials: done,
        max_rel_err: worst,
        passed: worst <= cfg.tolerance,
    })
}

/// Runs the checks whose names satisfy `filter`; `fault` negates one op kind's backward pass.
pub fn run_gradcheck_filtered(
    cfg: &GradcheckConfig,
    fault: Option<OpKind>,
    filter: impl Fn(&str) -> bool,
) -> Result<GradcheckReport> {
    let results = registry()
        .iter()
        .enumerate()
        .filter(|(_, c)| filter(&c.name))
        .map(|(i, c)| run_one(c, i, cfg, fault))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        results,
    })
}

pub fn run_gradcheck(cfg: &GradcheckConfig, fault: Option<OpKind>) -> Result<GradcheckReport> {
    run_gradcheck_filtered(cfg, fault, |_| true)
}
