//! Prediction heads over region features.
//!
//! A head is a fully connected trunk followed by predictors for class logits
//! (`K` wide) and class-agnostic box deltas (4 wide). Tree variants replace
//! each predictor with a left and a right leaf, and fuse them with routing
//! probabilities from a separate narrow branch on the input features:
//!
//! ```text
//! c = p_l * c_l + p_r * c_r        b = q_l * b_l + q_r * b_r
//! ```
//!
//! where `(p_l, p_r)` and `(q_l, q_r)` are two-way softmaxes. Variants `M` and
//! `T` additionally gate the leaf inputs with sigmoid masks computed from the
//! batch-mean feature vector; `T` gives each task its own last feature layer
//! and masks each task's features.

mod config;
mod count;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{HeadConfig, TrunkConfig, TrunkLayout, Variant};
pub use count::{count_params, ParamCount};
pub use params::{Bound, ParamSet};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::fuse;

/// Logit used to pin a routing decision; `softmax(30, -30)` rounds to `(1, 0)` at the first component.
pub const PIN_LOGIT: f64 = 30.0;

/// Everything a tree head produces for one batch. Probabilities are `[n, 1]` columns.
#[derive(Debug, Clone)]
pub struct TreeHeadOutput {
    pub c_left: Tensor,
    pub c_right: Tensor,
    pub b_left: Tensor,
    pub b_right: Tensor,
    pub p_left: Tensor,
    pub p_right: Tensor,
    pub q_left: Tensor,
    pub q_right: Tensor,
    /// Fused logits `[n, K]`.
    pub c: Tensor,
    /// Fused deltas `[n, 4]`.
    pub b: Tensor,
    pub masks: Option<RoutingMasks>,
}

/// Per-route gates over the predictor input width, shape `[1, H]`, shared by the whole batch.
#[derive(Debug, Clone)]
pub struct RoutingMasks {
    pub left: Tensor,
    pub right: Tensor,
}

/// Class probabilities `[n, K]` and box deltas `[n, 4]`.
#[derive(Debug, Clone)]
pub struct Inference {
    pub probs: Tensor,
    pub deltas: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    cfg: HeadConfig,
    params: ParamSet,
}

struct Layer {
    name: String,
    fan_in: usize,
    fan_out: usize,
}

fn layer(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Layer {
    Layer {
        name: name.into(),
        fan_in,
        fan_out,
    }
}

fn shared_trunk_depth(cfg: &HeadConfig) -> usize {
    let depth = cfg.trunk.widths.len();
    if cfg.variant == Variant::T {
        depth - 1
    } else {
        depth
    }
}

fn trunk_in(cfg: &HeadConfig, i: usize) -> usize {
    if i == 0 {
        cfg.input_dim
    } else {
        cfg.trunk.widths[i - 1]
    }
}

/// Every linear layer of a head, in registration order.
fn layers(cfg: &HeadConfig) -> Vec<Layer> {
    let k = cfg.num_classes;
    let h = cfg.feature_width();
    let mut out = Vec::new();
    for i in 0..shared_trunk_depth(cfg) {
        out.push(layer(format!("trunk.{i}"), trunk_in(cfg, i), cfg.trunk.widths[i]));
    }
    if cfg.variant == Variant::T {
        let last = cfg.trunk.widths.len() - 1;
        out.push(layer("task_cls", trunk_in(cfg, last), h));
        out.push(layer("task_bbox", trunk_in(cfg, last), h));
    }
    if cfg.variant.is_tree() {
        out.push(layer("cls_left", h, k));
        out.push(layer("cls_right", h, k));
        out.push(layer("bbox_left", h, 4));
        out.push(layer("bbox_right", h, 4));
        let w = cfg.routing_width();
        for i in 0..cfg.routing_depth() {
            out.push(layer(format!("route.{i}"), if i == 0 { cfg.input_dim } else { w }, w));
        }
        out.push(layer("route.out", w, 4));
    } else {
        out.push(layer("cls", h, k));
        out.push(layer("bbox", h, 4));
    }
    if cfg.variant.has_masks() {
        out.push(layer("mask_left", cfg.input_dim, h));
        out.push(layer("mask_right", cfg.input_dim, h));
    }
    out
}

fn linear(tape: &mut Tape, bound: &Bound, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = bound.get(&format!("{name}.weight"))?;
    let b = bound.get(&format!("{name}.bias"))?;
    let xw = tape.matmul(x, w)?;
    tape.broadcast_add(&xw, b)
}

/// `relu(linear(x))`, plus `x` itself on four-layer trunks when widths agree.
fn trunk_layer(tape: &mut Tape, bound: &Bound, cfg: &HeadConfig, name: &str, i: usize, x: &Tensor) -> Result<Tensor> {
    let z = linear(tape, bound, name, x)?;
    let a = tape.relu(&z)?;
    let residual = cfg.trunk.layout == TrunkLayout::FourFc && i > 0 && trunk_in(cfg, i) == cfg.trunk.widths[i];
    if residual {
        tape.add(&a, x)
    } else {
        Ok(a)
    }
}

impl Head {
    /// Builds a head with uniform He-style weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))` and zero biases.
    pub fn build(cfg: &HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for l in layers(cfg) {
            let bound = (6.0 / l.fan_in as f64).sqrt();
            let w = (0..l.fan_in * l.fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(format!("{}.weight", l.name), vec![l.fan_in, l.fan_out], w)?;
            params.push(format!("{}.bias", l.name), vec![1, l.fan_out], vec![0.0; l.fan_out])?;
        }
        Ok(Self { cfg: cfg.clone(), params })
    }

    /// Reassembles a head from stored blocks, checking names and shapes against `cfg`.
    pub fn from_params(cfg: &HeadConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::build(cfg, 0)?;
        if reference.params.names() != params.names()
            || (0..params.len()).any(|i| reference.params.shape(i) != params.shape(i))
        {
            return Err(Error::Checkpoint("parameter blocks do not match the head config".into()));
        }
        Ok(Self { cfg: cfg.clone(), params })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.shape().len() != 2 || features.cols() != self.cfg.input_dim {
            return Err(Error::Shape {
                op: "head input",
                lhs: features.shape().to_vec(),
                rhs: vec![features.rows(), self.cfg.input_dim],
            });
        }
        Ok(())
    }

    fn shared_trunk(&self, tape: &mut Tape, bound: &Bound, features: &Tensor) -> Result<Tensor> {
        let mut h = features.clone();
        for i in 0..shared_trunk_depth(&self.cfg) {
            h = trunk_layer(tape, bound, &self.cfg, &format!("trunk.{i}"), i, &h)?;
        }
        Ok(h)
    }

    /// Conventional head: `(c [n, K], b [n, 4])`.
    pub fn forward_single(&self, tape: &mut Tape, bound: &Bound, features: &Tensor) -> Result<(Tensor, Tensor)> {
        if self.cfg.variant != Variant::Single {
            return Err(Error::config("head.variant", "forward_single needs the single variant"));
        }
        self.check_features(features)?;
        let h = self.shared_trunk(tape, bound, features)?;
        let c = linear(tape, bound, "cls", &h)?;
        let b = linear(tape, bound, "bbox", &h)?;
        Ok((c, b))
    }

    /// Batch-context gates: `sigmoid(affine(mean over rows of features))`, one affine per route.
    pub fn compute_routing_masks(&self, tape: &mut Tape, bound: &Bound, features: &Tensor) -> Result<RoutingMasks> {
        if !self.cfg.variant.has_masks() {
            return Err(Error::config("head.variant", "only M and T carry routing masks"));
        }
        self.check_features(features)?;
        if features.rows() == 0 {
            return Err(Error::EmptyAxis { op: "compute_routing_masks" });
        }
        let context = tape.mean_first_axis(features)?;
        let zl = linear(tape, bound, "mask_left", &context)?;
        let zr = linear(tape, bound, "mask_right", &context)?;
        Ok(RoutingMasks {
            left: tape.sigmoid(&zl)?,
            right: tape.sigmoid(&zr)?,
        })
    }

    /// Routing probabilities `(p_l, p_r, q_l, q_r)`, each `[n, 1]`.
    fn routing(&self, tape: &mut Tape, bound: &Bound, features: &Tensor) -> Result<[Tensor; 4]> {
        let mut r = features.clone();
        for i in 0..self.cfg.routing_depth() {
            let z = linear(tape, bound, &format!("route.{i}"), &r)?;
            r = tape.relu(&z)?;
        }
        let logits = linear(tape, bound, "route.out", &r)?;
        let cls = tape.columns(&logits, 0, 2)?;
        let bbox = tape.columns(&logits, 2, 4)?;
        let p = tape.softmax(&cls)?;
        let q = tape.softmax(&bbox)?;
        Ok([
            tape.columns(&p, 0, 1)?,
            tape.columns(&p, 1, 2)?,
            tape.columns(&q, 0, 1)?,
            tape.columns(&q, 1, 2)?,
        ])
    }

    /// Two-leaf tree head for variants `B`, `M`, `T` and `Lite`.
    pub fn forward_tree(&self, tape: &mut Tape, bound: &Bound, features: &Tensor) -> Result<TreeHeadOutput> {
        if !self.cfg.variant.is_tree() {
            return Err(Error::config("head.variant", "forward_tree needs a tree variant"));
        }
        self.check_features(features)?;
        let shared = self.shared_trunk(tape, bound, features)?;
        let (cls_feat, bbox_feat) = if self.cfg.variant == Variant::T {
            let last = self.cfg.trunk.widths.len() - 1;
            let hc = trunk_layer(tape, bound, &self.cfg, "task_cls", last, &shared)?;
            let hb = trunk_layer(tape, bound, &self.cfg, "task_bbox", last, &shared)?;
            (hc, hb)
        } else {
            (shared.clone(), shared)
        };

        let masks = if self.cfg.variant.has_masks() {
            Some(self.compute_routing_masks(tape, bound, features)?)
        } else {
            None
        };
        let gate = |tape: &mut Tape, x: &Tensor, m: Option<&Tensor>| match m {
            Some(m) => tape.broadcast_mul(x, m),
            None => Ok(x.clone()),
        };
        let (ml, mr) = (masks.as_ref().map(|m| &m.left), masks.as_ref().map(|m| &m.right));
        let cls_l_in = gate(tape, &cls_feat, ml)?;
        let cls_r_in = gate(tape, &cls_feat, mr)?;
        let bbox_l_in = gate(tape, &bbox_feat, ml)?;
        let bbox_r_in = gate(tape, &bbox_feat, mr)?;

        let c_left = linear(tape, bound, "cls_left", &cls_l_in)?;
        let c_right = linear(tape, bound, "cls_right", &cls_r_in)?;
        let b_left = linear(tape, bound, "bbox_left", &bbox_l_in)?;
        let b_right = linear(tape, bound, "bbox_right", &bbox_r_in)?;

        let [p_left, p_right, q_left, q_right] = self.routing(tape, bound, features)?;
        let c = fuse(tape, &c_left, &c_right, &p_left, &p_right)?;
        let b = fuse(tape, &b_left, &b_right, &q_left, &q_right)?;
        Ok(TreeHeadOutput {
            c_left,
            c_right,
            b_left,
            b_right,
            p_left,
            p_right,
            q_left,
            q_right,
            c,
            b,
            masks,
        })
    }

    /// Fused logits and deltas for any variant.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, features: &Tensor) -> Result<(Tensor, Tensor)> {
        if self.cfg.variant.is_tree() {
            let out = self.forward_tree(tape, bound, features)?;
            Ok((out.c, out.b))
        } else {
            self.forward_single(tape, bound, features)
        }
    }

    /// Deterministic prediction: `softmax(c)` and `b` from the fused outputs.
    ///
    /// Nothing is sampled. For `M` and `T` the mask context is the mean over
    /// the rows passed in, so callers should keep batch composition fixed.
    pub fn infer(&self, features: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.params.constants();
        let (c, b) = self.forward(&mut tape, &bound, features)?;
        let probs = tape.softmax(&c)?;
        Ok(Inference { probs, deltas: b })
    }

    /// Forces both routing decisions toward one leaf by zeroing the routing
    /// output weights and setting its biases to `±PIN_LOGIT`.
    pub fn pin_routing(&mut self, toward_left: bool) -> Result<()> {
        if !self.cfg.variant.is_tree() {
            return Err(Error::config("head.variant", "only tree heads route"));
        }
        let s = if toward_left { PIN_LOGIT } else { -PIN_LOGIT };
        self.params
            .get_mut("route.out.weight")
            .expect("tree heads have a routing output")
            .fill(0.0);
        self.params
            .get_mut("route.out.bias")
            .expect("tree heads have a routing output")
            .copy_from_slice(&[s, -s, s, -s]);
        Ok(())
    }

    /// Copies trunk and predictor weights of a single head into this tree's
    /// shared trunk and left leaves.
    pub fn copy_from_single(&mut self, single: &Head) -> Result<()> {
        if single.variant() != Variant::Single || !matches!(self.variant(), Variant::B | Variant::Lite) {
            return Err(Error::config("head.variant", "copy needs a single head and a B or Lite tree"));
        }
        let pairs = (0..shared_trunk_depth(&self.cfg))
            .map(|i| (format!("trunk.{i}"), format!("trunk.{i}")))
            .chain([("cls".to_string(), "cls_left".to_string()), ("bbox".into(), "bbox_left".into())]);
        for (src, dst) in pairs {
            for part in ["weight", "bias"] {
                let from = single
                    .params
                    .get(&format!("{src}.{part}"))
                    .ok_or_else(|| Error::config(src.clone(), "missing in source"))?
                    .to_vec();
                let to = self
                    .params
                    .get_mut(&format!("{dst}.{part}"))
                    .ok_or_else(|| Error::config(dst.clone(), "missing in target"))?;
                if to.len() != from.len() {
                    return Err(Error::config(dst.clone(), "shape differs between heads"));
                }
                to.copy_from_slice(&from);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(variant: Variant) -> HeadConfig {
        HeadConfig {
            variant,
            input_dim: 6,
            trunk: TrunkConfig { layout: TrunkLayout::TwoFc, widths: vec![8, 8] },
            num_classes: 3,
            routing_branch_depth: None,
            routing_branch_width: Some(5),
        }
    }

    fn features(rows: &[[f64; 6]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn some_features() -> Tensor {
        features(&[
            [0.5, -1.0, 2.0, 0.0, 0.3, -0.7],
            [1.5, 0.2, -0.4, 1.1, -2.0, 0.9],
            [-0.3, 0.8, 0.1, -1.2, 0.6, 0.0],
        ])
    }

    #[test]
    fn same_seed_same_parameters() {
        for v in Variant::ALL {
            assert_eq!(Head::build(&small(v), 4).unwrap(), Head::build(&small(v), 4).unwrap());
            assert_ne!(Head::build(&small(v), 4).unwrap(), Head::build(&small(v), 5).unwrap());
        }
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let mut head = Head::build(&small(Variant::Single), 1).unwrap();
        for v in head.params_mut().values_mut() {
            v.fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape);
        let (c, b) = head.forward_single(&mut tape, &bound, &some_features()).unwrap();
        assert!(c.values().iter().chain(b.values()).all(|v| *v == 0.0));
    }

    #[test]
    fn identical_rows_identical_outputs_and_shapes() {
        let head = Head::build(&small(Variant::Single), 2).unwrap();
        for n in [1, 4, 9] {
            let rows = vec![[0.1, 0.2, -0.3, 0.4, 0.0, 1.0]; n];
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape);
            let (c, b) = head.forward_single(&mut tape, &bound, &features(&rows)).unwrap();
            assert_eq!(c.shape(), &[n, 3]);
            assert_eq!(b.shape(), &[n, 4]);
            for i in 1..n {
                assert_eq!(c.row(i), c.row(0));
                assert_eq!(b.row(i), b.row(0));
            }
        }
    }

    #[test]
    fn input_width_checked() {
        let head = Head::build(&small(Variant::B), 2).unwrap();
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape);
        let bad = Tensor::zeros(vec![2, 5]);
        assert!(matches!(head.forward_tree(&mut tape, &bound, &bad), Err(Error::Shape { .. })));
        assert!(head.forward_single(&mut tape, &bound, &some_features()).is_err());
        let single = Head::build(&small(Variant::Single), 2).unwrap();
        assert!(single.forward_tree(&mut tape, &bound, &some_features()).is_err());
    }

    #[test]
    fn pinned_routing_selects_left_leaf() {
        let mut head = Head::build(&small(Variant::B), 3).unwrap();
        head.pin_routing(true).unwrap();
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape);
        let out = head.forward_tree(&mut tape, &bound, &some_features()).unwrap();
        assert!(out.p_left.values().iter().all(|&p| p == 1.0));
        assert!(out.q_right.values().iter().all(|&q| q < 1e-25));
        for (c, cl) in out.c.values().iter().zip(out.c_left.values()) {
            assert!((c - cl).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_value_for_fixed_routing() {
        // p = (0.3, 0.7), c_l = [1, 0], c_r = [0, 1]
        let mut tape = Tape::new();
        let c = fuse(
            &mut tape,
            &Tensor::from_rows(&[[1.0, 0.0]]).unwrap(),
            &Tensor::from_rows(&[[0.0, 1.0]]).unwrap(),
            &Tensor::column(vec![0.3]),
            &Tensor::column(vec![0.7]),
        )
        .unwrap();
        assert_eq!(c.values(), &[0.3, 0.7]);
    }

    #[test]
    fn masks_from_single_row_and_zero_affine() {
        let mut head = Head::build(&small(Variant::M), 3).unwrap();
        let one = features(&[[0.5, -1.0, 2.0, 0.0, 0.3, -0.7]]);
        let mut tape = Tape::new();
        let bound = head.bind(&mut tape);
        let m = head.compute_routing_masks(&mut tape, &bound, &one).unwrap();
        assert!(m.left.values().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(m.left.shape(), &[1, 8]);

        // context of one sample is the sample itself
        let ctx = tape.mean_first_axis(&one).unwrap();
        assert_eq!(ctx.values(), one.values());

        for name in ["mask_left.weight", "mask_left.bias"] {
            head.params_mut().get_mut(name).unwrap().fill(0.0);
        }
        let bound = head.params().constants();
        let m = head.compute_routing_masks(&mut tape, &bound, &some_features()).unwrap();
        assert!(m.left.values().iter().all(|v| *v == 0.5));
        assert!(head.compute_routing_masks(&mut tape, &bound, &Tensor::zeros(vec![0, 6])).is_err());
    }

    #[test]
    fn zeroed_right_mask_zeroes_right_leaf_input() {
        let mut head = Head::build(&small(Variant::M), 8).unwrap();
        // sigmoid(-800) underflows to exactly 0
        head.params_mut().get_mut("mask_right.weight").unwrap().fill(0.0);
        head.params_mut().get_mut("mask_right.bias").unwrap().fill(-800.0);
        let mut tape = Tape::new();
        let bound = head.params().constants();
        let out = head.forward_tree(&mut tape, &bound, &some_features()).unwrap();
        assert!(out.masks.as_ref().unwrap().right.values().iter().all(|v| *v == 0.0));
        // with zero input the right leaves emit their biases (zero at init)
        assert!(out.c_right.values().iter().all(|v| *v == 0.0));
        assert!(out.b_right.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn infer_is_repeatable_and_normalized() {
        for v in Variant::ALL {
            let head = Head::build(&small(v), 6).unwrap();
            let a = head.infer(&some_features()).unwrap();
            let b = head.infer(&some_features()).unwrap();
            assert_eq!(a.probs, b.probs);
            assert_eq!(a.deltas, b.deltas);
            for i in 0..3 {
                assert!((a.probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_and_pinned_tree_agree() {
        let single = Head::build(&small(Variant::Single), 10).unwrap();
        let mut tree = Head::build(&small(Variant::B), 11).unwrap();
        tree.copy_from_single(&single).unwrap();
        tree.pin_routing(true).unwrap();
        let a = single.infer(&some_features()).unwrap();
        let b = tree.infer(&some_features()).unwrap();
        for (x, y) in a.probs.values().iter().zip(b.probs.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in a.deltas.values().iter().zip(b.deltas.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn four_fc_trunk_builds_and_runs() {
        let cfg = HeadConfig {
            trunk: TrunkConfig { layout: TrunkLayout::FourFc, widths: vec![8, 8, 8, 8] },
            ..small(Variant::T)
        };
        let head = Head::build(&cfg, 1).unwrap();
        let out = head.infer(&some_features()).unwrap();
        assert_eq!(out.probs.shape(), &[3, 3]);
        assert_eq!(head.params().num_values(), count_params(&cfg).unwrap().total);
    }

    proptest! {
        #[test]
        fn tree_output_invariants(
            vals in proptest::collection::vec(-3.0..3.0f64, 18),
            seed in 0u64..500,
            which in 0usize..4,
        ) {
            let variant = [Variant::B, Variant::M, Variant::T, Variant::Lite][which];
            let head = Head::build(&small(variant), seed).unwrap();
            let x = Tensor::new(vec![3, 6], vals).unwrap();
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape);
            let out = head.forward_tree(&mut tape, &bound, &x).unwrap();
            for i in 0..3 {
                let (pl, pr) = (out.p_left.values()[i], out.p_right.values()[i]);
                let (ql, qr) = (out.q_left.values()[i], out.q_right.values()[i]);
                prop_assert!((pl + pr - 1.0).abs() <= 1e-9 && (ql + qr - 1.0).abs() <= 1e-9);
                prop_assert!([pl, pr, ql, qr].iter().all(|v| (0.0..=1.0).contains(v)));
                for j in 0..3 {
                    let want = pl * out.c_left.row(i)[j] + pr * out.c_right.row(i)[j];
                    prop_assert!((out.c.row(i)[j] - want).abs() <= 1e-12);
                }
                for j in 0..4 {
                    let want = ql * out.b_left.row(i)[j] + qr * out.b_right.row(i)[j];
                    prop_assert!((out.b.row(i)[j] - want).abs() <= 1e-12);
                }
            }
        }
    }
}
