//! The training loop, evaluation and the lambda sweep.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Sgd, Tape, Tensor};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::{count_params, Head};
use crate::losses::{LossBundle, MAX_LAMBDA};
use crate::objective::{node_losses, select_weights, single_bundle, tree_bundle};
use crate::routing::{write_audit_rows, RoutingRng, AUDIT_HEADER};
use crate::taskgen::{evaluate, generate_dataset, write_dataset_csv, Dataset, EvalMetrics, RegionBatch, RegionSample, FG_IOU};

const SHUFFLE_STREAM: u64 = 16;

/// Seed for head initialization, kept apart from the routing and shuffle streams of `seed`.
pub fn init_seed(seed: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub sel_cls: f64,
    pub sel_bbox: f64,
    pub assoc_cls: f64,
    pub assoc_bbox: f64,
    pub total: f64,
    pub val_accuracy: f64,
    pub val_mean_iou: f64,
    pub val_ap50: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,sel_cls,sel_bbox,assoc_cls,assoc_bbox,total,val_accuracy,val_mean_iou,val_ap50";

impl EpochRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.sel_cls,
            self.sel_bbox,
            self.assoc_cls,
            self.assoc_bbox,
            self.total,
            self.val_accuracy,
            self.val_mean_iou,
            self.val_ap50
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: String,
    pub seed: u64,
    pub lambda: f64,
    pub epochs: usize,
    pub steps: usize,
    pub parameters: usize,
    pub first_epoch_total: f64,
    pub final_total: f64,
    pub final_metrics: EvalMetrics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: Head,
    pub rows: Vec<EpochRow>,
    /// Total loss of every step, in order.
    pub step_totals: Vec<f64>,
    pub summary: Summary,
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Verify each epoch that selective terms send no gradient to the routing branch.
    pub debug_asserts: bool,
    /// Stop after this many optimizer steps (the epoch in progress is still reported).
    pub max_steps: Option<usize>,
    /// Skip validation after each epoch (metrics are computed once at the end).
    pub skip_epoch_eval: bool,
}

/// Runs inference in fixed consecutive chunks of `batch_size` and scores the result.
///
/// Chunking matters for `M` and `T`, whose masks depend on the batch mean.
pub fn evaluate_head(head: &Head, samples: &[RegionSample], batch_size: usize) -> Result<EvalMetrics> {
    let (probs, deltas) = predict(head, samples, batch_size)?;
    evaluate(&probs, &deltas, samples, FG_IOU)
}

/// Class probabilities and deltas for every sample, chunked as in [`evaluate_head`].
pub fn predict(head: &Head, samples: &[RegionSample], batch_size: usize) -> Result<(Tensor, Tensor)> {
    let k = head.config().num_classes;
    let mut probs = Vec::with_capacity(samples.len() * k);
    let mut deltas = Vec::with_capacity(samples.len() * 4);
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = RegionBatch::new(&chunk.iter().collect::<Vec<_>>())?;
        let out = head.infer(&batch.features)?;
        probs.extend_from_slice(out.probs.values());
        deltas.extend_from_slice(out.deltas.values());
    }
    Ok((
        Tensor::new(vec![samples.len(), k], probs)?,
        Tensor::new(vec![samples.len(), 4], deltas)?,
    ))
}

fn isolation_check(tape: &Tape, bundle: &LossBundle, head: &Head, bound: &crate::heads::Bound, step: usize) -> Result<()> {
    let sel = [&bundle.sel_cls, &bundle.sel_bbox];
    for term in sel {
        if !term.requires_grad() {
            continue;
        }
        let grads = tape.backward(term)?;
        for (name, g) in head.params().names().iter().zip(bound.grads(&grads)?) {
            if name.starts_with("route.") && g.iter().any(|v| *v != 0.0) {
                return Err(Error::Invariant(format!(
                    "selective loss reached routing parameter {name} at step {step}"
                )));
            }
        }
    }
    Ok(())
}

/// Trains `head` on `data.train` under `cfg`; writes nothing to disk.
pub fn train_head(cfg: &RunConfig, mut head: Head, data: &Dataset, opts: TrainOptions) -> Result<TrainOutcome> {
    let (rows, step_totals, wall_clock) = train_loop(cfg, &mut head, data, opts, None::<&mut Vec<u8>>)?;
    finish(cfg, head, data, rows, step_totals, wall_clock)
}

fn finish(
    cfg: &RunConfig,
    head: Head,
    data: &Dataset,
    rows: Vec<EpochRow>,
    step_totals: Vec<f64>,
    wall_clock: Duration,
) -> Result<TrainOutcome> {
    let summary = Summary {
        variant: head.variant().name().to_string(),
        seed: cfg.seed,
        lambda: cfg.loss.lambda,
        epochs: rows.len(),
        steps: step_totals.len(),
        parameters: count_params(head.config())?.total,
        first_epoch_total: rows.first().map_or(f64::NAN, |r| r.total),
        final_total: rows.last().map_or(f64::NAN, |r| r.total),
        final_metrics: evaluate_head(&head, &data.val, cfg.batch_size)?,
    };
    Ok(TrainOutcome {
        head,
        rows,
        step_totals,
        summary,
        wall_clock,
    })
}

type LoopResult = (Vec<EpochRow>, Vec<f64>, Duration);

fn train_loop<W: Write>(
    cfg: &RunConfig,
    head: &mut Head,
    data: &Dataset,
    opts: TrainOptions,
    mut audit: Option<&mut W>,
) -> Result<LoopResult> {
    cfg.validate()?;
    if head.config().input_dim != cfg.data.feature_dim || head.config().num_classes != cfg.data.num_classes {
        return Err(Error::config("head", "head dimensions do not match the dataset"));
    }
    let start = Instant::now();
    let opt = &cfg.optimizer;
    let mut sgd = Sgd::new(opt.lr, opt.momentum, opt.weight_decay)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    let mut routing = RoutingRng::new(cfg.seed);
    let tree = head.variant().is_tree();

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut step_totals = Vec::new();
    let mut tape = Tape::new();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        sgd.set_lr(opt.lr_at(epoch))?;
        let mut sums = [0.0; 5];
        let mut steps_this_epoch = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if opts.max_steps.is_some_and(|m| step_totals.len() >= m) {
                break;
            }
            let step = step_totals.len();
            let samples: Vec<&RegionSample> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = RegionBatch::new(&samples)?;

            tape.clear();
            let bound = head.bind(&mut tape);
            let at_step = |e: Error| match e {
                Error::NotFinite(what) => Error::NotFinite(format!("{what} at epoch {epoch}, step {step}")),
                e => e,
            };
            let bundle = if tree {
                let out = head.forward_tree(&mut tape, &bound, &batch.features)?;
                let nodes = node_losses(&mut tape, &out, &batch, &cfg.loss)?;
                let weights = select_weights(&out, &nodes, &mut routing).map_err(at_step)?;
                if let Some(w) = audit.as_deref_mut() {
                    write_audit_rows(w, step, &weights)?;
                }
                tree_bundle(&mut tape, &out, &nodes, &weights, &batch, &cfg.loss)?
            } else {
                let (c, b) = head.forward_single(&mut tape, &bound, &batch.features)?;
                single_bundle(&mut tape, &c, &b, &batch, &cfg.loss)?
            };
            let values = bundle.values();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(at_step(Error::NotFinite("loss".into())));
            }
            if opts.debug_asserts && tree && b == 0 {
                isolation_check(&tape, &bundle, head, &bound, step)?;
            }
            let grads = tape.backward(&bundle.total)?;
            let grads = bound.grads(&grads)?;
            sgd.step(head.params_mut().values_mut(), &grads)?;

            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            step_totals.push(values[4]);
            steps_this_epoch += 1;
        }
        if steps_this_epoch == 0 {
            break 'epochs;
        }
        if head.params().values().iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NotFinite(format!("parameters after epoch {epoch}")));
        }
        let mean = sums.map(|s| s / steps_this_epoch as f64);
        let metrics = if opts.skip_epoch_eval {
            EvalMetrics { accuracy: f64::NAN, mean_iou_fg: f64::NAN, ap50: f64::NAN }
        } else {
            evaluate_head(head, &data.val, cfg.batch_size)?
        };
        rows.push(EpochRow {
            epoch,
            sel_cls: mean[0],
            sel_bbox: mean[1],
            assoc_cls: mean[2],
            assoc_bbox: mean[3],
            total: mean[4],
            val_accuracy: metrics.accuracy,
            val_mean_iou: metrics.mean_iou_fg,
            val_ap50: metrics.ap50,
        });
    }
    Ok((rows, step_totals, start.elapsed()))
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[EpochRow]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Timing {
    wall_clock_seconds: f64,
}

/// Full run: generate data, build the head, train, and write
/// `metrics.csv`, `summary.json`, `checkpoint.bin` and `timing.json` into `cfg.output_dir`.
///
/// Everything but `timing.json` is a pure function of the config.
pub fn run(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.data)?;
    let mut head = Head::build(&cfg.head, init_seed(cfg.seed))?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json()?)?;
    if cfg.dump_dataset {
        write_dataset_csv(BufWriter::new(File::create(dir.join("train.csv"))?), &data.train)?;
        write_dataset_csv(BufWriter::new(File::create(dir.join("val.csv"))?), &data.val)?;
    }
    let (rows, step_totals, wall_clock) = if cfg.write_routing_audit {
        let mut audit = BufWriter::new(File::create(dir.join("routing_audit.csv"))?);
        writeln!(audit, "{AUDIT_HEADER}")?;
        let r = train_loop(cfg, &mut head, &data, opts, Some(&mut audit))?;
        audit.flush()?;
        r
    } else {
        train_loop(cfg, &mut head, &data, opts, None::<&mut Vec<u8>>)?
    };
    let out = finish(cfg, head, &data, rows, step_totals, wall_clock)?;
    write_metrics_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), &out.rows)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)?)?;
    save_checkpoint(&dir.join("checkpoint.bin"), &out.head, Some(&cfg.data))?;
    fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&Timing { wall_clock_seconds: out.wall_clock.as_secs_f64() })?,
    )?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub final_total: f64,
    pub val_accuracy: f64,
    pub val_mean_iou: f64,
    pub val_ap50: f64,
}

pub const SWEEP_HEADER: &str = "lambda,seed,final_total,val_accuracy,val_mean_iou,val_ap50";

/// One run per `(lambda, seed)`, in that nesting order. Every lambda is checked before any run starts.
///
/// Each run writes its files under `output_dir/lambda_<lambda>_seed_<seed>`;
/// the combined table goes to `output_dir/sweep.csv`.
pub fn sweep_lambda(base: &RunConfig, lambdas: &[f64], seeds: &[u64], opts: TrainOptions) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep", "need at least one lambda and one seed"));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=MAX_LAMBDA).contains(*l)) {
        return Err(Error::config("loss.lambda", format!("{bad} outside [0, {MAX_LAMBDA}]")));
    }
    base.validate()?;
    let mut rows = Vec::new();
    for &lambda in lambdas {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.loss.lambda = lambda;
            cfg.seed = seed;
            cfg.output_dir = base.output_dir.join(format!("lambda_{lambda}_seed_{seed}"));
            let out = run(&cfg, opts)?;
            let m = out.summary.final_metrics;
            rows.push(SweepRow {
                lambda,
                seed,
                final_total: out.summary.final_total,
                val_accuracy: m.accuracy,
                val_mean_iou: m.mean_iou_fg,
                val_ap50: m.ap50,
            });
        }
    }
    fs::create_dir_all(&base.output_dir)?;
    write_sweep_csv(BufWriter::new(File::create(base.output_dir.join("sweep.csv"))?), &rows)?;
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.lambda, r.seed, r.final_total, r.val_accuracy, r.val_mean_iou, r.val_ap50
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Evaluates a stored head on the val split of `data_cfg`.
pub fn eval_checkpoint(path: &Path, data_cfg: Option<&crate::taskgen::DatasetConfig>, batch_size: usize) -> Result<EvalMetrics> {
    let ckpt = crate::checkpoint::load_checkpoint(path)?;
    let data_cfg = data_cfg
        .or(ckpt.data.as_ref())
        .ok_or_else(|| Error::config("data", "checkpoint has no dataset config; pass one"))?;
    let data = generate_dataset(data_cfg)?;
    evaluate_head(&ckpt.head, &data.val, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{TrunkConfig, TrunkLayout, Variant};
    use crate::taskgen::DatasetConfig;

    fn tiny(variant: Variant) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data = DatasetConfig {
            feature_dim: 24,
            distractor_dims: 4,
            n_train: 256,
            n_val: 64,
            ..Default::default()
        };
        cfg.head.variant = variant;
        cfg.head.input_dim = 24;
        cfg.head.trunk = TrunkConfig { layout: TrunkLayout::TwoFc, widths: vec![32, 32] };
        cfg.epochs = 3;
        cfg.batch_size = 32;
        cfg
    }

    #[test]
    fn every_variant_trains_and_loss_drops() {
        for v in Variant::ALL {
            let cfg = tiny(v);
            let data = generate_dataset(&cfg.data).unwrap();
            let head = Head::build(&cfg.head, init_seed(cfg.seed)).unwrap();
            let out = train_head(&cfg, head, &data, TrainOptions { debug_asserts: true, ..Default::default() }).unwrap();
            assert_eq!(out.rows.len(), 3);
            assert_eq!(out.step_totals.len(), 3 * 8);
            assert!(out.rows[2].total < out.rows[0].total, "{}", v.name());
        }
    }

    #[test]
    fn same_config_same_metrics() {
        let cfg = tiny(Variant::M);
        let data = generate_dataset(&cfg.data).unwrap();
        let go = || {
            let head = Head::build(&cfg.head, init_seed(cfg.seed)).unwrap();
            let out = train_head(&cfg, head, &data, TrainOptions::default()).unwrap();
            let mut csv = Vec::new();
            write_metrics_csv(&mut csv, &out.rows).unwrap();
            csv
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn divergence_names_the_step() {
        let mut cfg = tiny(Variant::B);
        cfg.optimizer.lr = 1e6;
        let data = generate_dataset(&cfg.data).unwrap();
        let head = Head::build(&cfg.head, 0).unwrap();
        match train_head(&cfg, head, &data, TrainOptions::default()) {
            Err(Error::NotFinite(msg)) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn max_steps_truncates() {
        let cfg = tiny(Variant::Single);
        let data = generate_dataset(&cfg.data).unwrap();
        let head = Head::build(&cfg.head, 0).unwrap();
        let out = train_head(&cfg, head, &data, TrainOptions { max_steps: Some(10), ..Default::default() }).unwrap();
        assert_eq!(out.step_totals.len(), 10);
        assert_eq!(out.rows.len(), 2);
    }

    #[test]
    fn sweep_rejects_bad_lambda_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Variant::B);
        cfg.output_dir = dir.path().to_path_buf();
        assert!(sweep_lambda(&cfg, &[0.5, 0.96], &[1], TrainOptions::default()).is_err());
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn run_writes_artifacts_and_eval_reads_them() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Variant::T);
        cfg.epochs = 1;
        cfg.output_dir = dir.path().join("run");
        cfg.write_routing_audit = true;
        cfg.dump_dataset = true;
        let out = run(&cfg, TrainOptions::default()).unwrap();
        for f in ["metrics.csv", "summary.json", "checkpoint.bin", "timing.json", "routing_audit.csv", "train.csv", "val.csv"] {
            assert!(cfg.output_dir.join(f).exists(), "{f}");
        }
        let audit = fs::read_to_string(cfg.output_dir.join("routing_audit.csv")).unwrap();
        // header + 256 samples * 2 tasks
        assert_eq!(audit.lines().count(), 1 + 256 * 2);
        let m = eval_checkpoint(&cfg.output_dir.join("checkpoint.bin"), None, cfg.batch_size).unwrap();
        assert_eq!(m, out.summary.final_metrics);
    }
}
