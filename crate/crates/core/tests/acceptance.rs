//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rdroute::autodiff::{Tape, Tensor};
use rdroute::config::RunConfig;
use rdroute::gradcheck::{run_gradcheck, GradcheckConfig};
use rdroute::heads::{count_params, Head, HeadConfig, Variant};
use rdroute::losses::{cross_entropy, focal, iou_loss, smooth_l1, total_loss, LossConfig};
use rdroute::objective::{node_losses, select_weights, tree_bundle};
use rdroute::routing::{audit_sampler, RoutingRng};
use rdroute::taskgen::{generate_dataset, BBox, Dataset, RegionBatch};
use rdroute::train::{init_seed, run, sweep_lambda, train_head, TrainOptions};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

const TREES: [Variant; 4] = [Variant::B, Variant::M, Variant::T, Variant::Lite];

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::default(), None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = report
        .results
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    ensure(report.passed(), || format!("failing checks: {:?}", report.failures()))?;
    ensure(report.results.iter().all(|r| r.trials == 100), || "fewer than 100 trials".into())?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks x 100 trials, worst {} at {:.2e}, {:.1}s",
        report.results.len(),
        worst.name,
        worst.max_rel_err,
        elapsed.as_secs_f64()
    ))
}

fn routing_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_norm, mut worst_fuse) = (0.0f64, 0.0f64);
    for variant in TREES {
        for pass in 0..1000u64 {
            let head = Head::build(&HeadConfig::default().with_variant(variant), pass).unwrap();
            let n = rng.random_range(1..9);
            let x = normal(&mut rng, &[n, 64], 2.0);
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape);
            let out = head.forward_tree(&mut tape, &bound, &x).unwrap();
            for i in 0..n {
                let (pl, pr) = (out.p_left.values()[i], out.p_right.values()[i]);
                let (ql, qr) = (out.q_left.values()[i], out.q_right.values()[i]);
                worst_norm = worst_norm.max((pl + pr - 1.0).abs()).max((ql + qr - 1.0).abs());
                for j in 0..4 {
                    let c = pl * out.c_left.row(i)[j] + pr * out.c_right.row(i)[j];
                    let b = ql * out.b_left.row(i)[j] + qr * out.b_right.row(i)[j];
                    worst_fuse = worst_fuse.max((out.c.row(i)[j] - c).abs()).max((out.b.row(i)[j] - b).abs());
                }
            }
        }
    }
    ensure(worst_norm <= 1e-9, || format!("normalization error {worst_norm:e}"))?;
    ensure(worst_fuse <= 1e-12, || format!("fusion error {worst_fuse:e}"))?;
    Ok(format!("4000 passes, max |sum-1| {worst_norm:.1e}, max fusion error {worst_fuse:.1e}"))
}

fn pinned_copy(single: &Head) -> Head {
    let mut tree = Head::build(&HeadConfig::default().with_variant(Variant::B), 99).unwrap();
    tree.copy_from_single(single).unwrap();
    tree.pin_routing(true).unwrap();
    tree
}

fn oracle_equivalence(data: &Dataset) -> Outcome {
    let single = Head::build(&HeadConfig::default().with_variant(Variant::Single), 5).unwrap();
    let tree = pinned_copy(&single);
    let batch = RegionBatch::new(&data.val[..256].iter().collect::<Vec<_>>()).unwrap();
    let a = single.infer(&batch.features).unwrap();
    let b = tree.infer(&batch.features).unwrap();
    let out_err = a
        .probs
        .values()
        .iter()
        .zip(b.probs.values())
        .chain(a.deltas.values().iter().zip(b.deltas.values()))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    ensure(out_err <= 1e-12, || format!("output difference {out_err:e}"))?;

    let mut cfg = RunConfig::default();
    cfg.loss.lambda = 0.0;
    let opts = TrainOptions { max_steps: Some(100), skip_epoch_eval: true, ..Default::default() };
    cfg.head.variant = Variant::Single;
    let s = train_head(&cfg, single.clone(), data, opts).map_err(|e| e.to_string())?;
    cfg.head.variant = Variant::B;
    let t = train_head(&cfg, tree, data, opts).map_err(|e| e.to_string())?;
    ensure(s.step_totals.len() == 100 && t.step_totals.len() == 100, || "did not run 100 steps".into())?;
    let traj_err = s
        .step_totals
        .iter()
        .zip(&t.step_totals)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    ensure(traj_err <= 1e-9, || format!("trajectory difference {traj_err:e}"))?;
    Ok(format!("outputs within {out_err:.1e}, 100-step loss trajectory within {traj_err:.1e}"))
}

fn sampler_statistics() -> Outcome {
    let start = Instant::now();
    let audit = audit_sampler(10_000, 4).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(audit.low.all_within && audit.high.all_within, || "draw outside its interval".into())?;
    ensure(audit.low.min >= 0.1 && audit.low.max <= 0.3, || "low bounds".into())?;
    ensure(audit.high.min >= 0.9 && audit.high.max <= 1.1, || "high bounds".into())?;
    ensure((audit.low.mean - 0.2).abs() <= 0.01, || format!("low mean {}", audit.low.mean))?;
    ensure((audit.high.mean - 1.0).abs() <= 0.01, || format!("high mean {}", audit.high.mean))?;
    ensure(audit.low.ks.p_value > 0.01 && audit.high.ks.p_value > 0.01, || {
        format!("KS p-values {} / {}", audit.low.ks.p_value, audit.high.ks.p_value)
    })?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "low mean {:.4} (KS p {:.3}), high mean {:.4} (KS p {:.3}), {:.2}s",
        audit.low.mean,
        audit.low.ks.p_value,
        audit.high.mean,
        audit.high.ks.p_value,
        elapsed.as_secs_f64()
    ))
}

fn gradient_isolation(data: &Dataset) -> Outcome {
    let batch = RegionBatch::new(&data.train[..64].iter().collect::<Vec<_>>()).unwrap();
    let mut worst = 0.0f64;
    let mut largest = 0.0f64;
    for variant in TREES {
        let head = Head::build(&HeadConfig::default().with_variant(variant), 3).unwrap();
        for lambda in [0.1, 0.5, 0.9] {
            let cfg = LossConfig { lambda, ..Default::default() };
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape);
            let out = head.forward_tree(&mut tape, &bound, &batch.features).unwrap();
            let nodes = node_losses(&mut tape, &out, &batch, &cfg).unwrap();
            let w = select_weights(&out, &nodes, &mut RoutingRng::new(8)).unwrap();
            let bundle = tree_bundle(&mut tape, &out, &nodes, &w, &batch, &cfg).unwrap();
            let assoc = tape.add(&bundle.assoc_cls, &bundle.assoc_bbox).unwrap();
            let g_total = tape.backward(&bundle.total).unwrap();
            let g_assoc = tape.backward(&assoc).unwrap();
            let total = bound.grads(&g_total).unwrap();
            let assoc = bound.grads(&g_assoc).unwrap();
            for (i, name) in head.params().names().iter().enumerate() {
                if !name.starts_with("route.") {
                    continue;
                }
                for (a, b) in total[i].iter().zip(assoc[i]) {
                    worst = worst.max((a - (1.0 - lambda) * b).abs());
                    largest = largest.max(b.abs());
                }
            }
        }
    }
    ensure(largest > 0.0, || "routing gradients are all zero".into())?;
    ensure(worst <= 1e-10, || format!("difference {worst:e}"))?;
    Ok(format!("4 variants x 3 lambdas, max difference {worst:.1e} (largest gradient {largest:.1e})"))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_focal = 0.0f64;
    for _ in 0..1000 {
        let logits = normal(&mut rng, &[8, 4], 3.0);
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..4)).collect();
        let ce = cross_entropy(&mut Tape::new(), &logits, &labels).unwrap();
        let fl = focal(&mut Tape::new(), &logits, &labels, 0.0, 1.0).unwrap();
        for (a, b) in ce.values().iter().zip(fl.values()) {
            worst_focal = worst_focal.max((a - b).abs());
        }
    }
    ensure(worst_focal <= 1e-9, || format!("focal vs cross entropy {worst_focal:e}"))?;

    let proposals: Vec<BBox> = (0..200)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            BBox::new(x, y, x + rng.random_range(4.0..40.0), y + rng.random_range(4.0..40.0)).unwrap()
        })
        .collect();
    let d = normal(&mut rng, &[200, 4], 0.3);
    let same = iou_loss(&mut Tape::new(), &d, &d, &proposals, 1e-6).unwrap();
    ensure(same.values().iter().all(|v| *v == 0.0), || "coincident boxes give nonzero loss".into())?;
    let other = normal(&mut rng, &[200, 4], 0.3);
    let diff = iou_loss(&mut Tape::new(), &d, &other, &proposals, 1e-6).unwrap();
    ensure(diff.values().iter().all(|v| *v > 0.0), || "distinct boxes give zero loss".into())?;

    let target = Tensor::zeros(vec![1, 4]);
    for (x, want) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)] {
        let pred = Tensor::new(vec![1, 4], vec![x, 0.0, 0.0, 0.0]).unwrap();
        let got = smooth_l1(&mut Tape::new(), &pred, &target, 1.0).unwrap().values()[0];
        ensure(got == want, || format!("smooth_l1({x}) = {got}, expected {want}"))?;
    }

    let (sc, sb, ac, ab) = (Tensor::scalar(0.7), Tensor::scalar(1.9), Tensor::scalar(0.4), Tensor::scalar(2.3));
    let t0 = total_loss(&mut Tape::new(), &sc, &sb, &ac, &ab, 0.0).unwrap().item().unwrap();
    ensure(t0 == 0.4 + 2.3, || format!("lambda 0 gives {t0}"))?;
    Ok(format!("focal/CE max diff {worst_focal:.1e}; IoU zero iff coincident; smooth-L1 0, 0.125, 1.5; lambda=0 exact"))
}

struct RunStats {
    accuracy: f64,
    iou: f64,
}

fn desk_scale_training(data: &Dataset) -> Outcome {
    let seeds = [1u64, 2, 3, 4, 5];
    let variants = [Variant::Single, Variant::B, Variant::M, Variant::T];
    let mut stats: Vec<Vec<RunStats>> = Vec::new();
    let mut slowest = Duration::ZERO;
    let mut problems = Vec::new();
    for variant in variants {
        let mut per_seed = Vec::new();
        for seed in seeds {
            let mut cfg = RunConfig::default();
            cfg.head.variant = variant;
            cfg.seed = seed;
            let head = Head::build(&cfg.head, init_seed(seed)).unwrap();
            let out = train_head(&cfg, head, data, TrainOptions::default()).map_err(|e| e.to_string())?;
            let m = out.summary.final_metrics;
            slowest = slowest.max(out.wall_clock);
            let tag = format!("{} seed {seed}", variant.name());
            if m.accuracy <= 0.9 {
                problems.push(format!("{tag}: accuracy {:.4}", m.accuracy));
            }
            if m.mean_iou_fg <= 0.8 {
                problems.push(format!("{tag}: IoU {:.4}", m.mean_iou_fg));
            }
            if out.summary.final_total >= 0.25 * out.summary.first_epoch_total {
                problems.push(format!(
                    "{tag}: loss {:.4} vs epoch 1 {:.4}",
                    out.summary.final_total, out.summary.first_epoch_total
                ));
            }
            if out.wall_clock >= Duration::from_secs(300) {
                problems.push(format!("{tag}: took {:?}", out.wall_clock));
            }
            per_seed.push(RunStats { accuracy: m.accuracy, iou: m.mean_iou_fg });
        }
        stats.push(per_seed);
    }
    let mean = |xs: &[RunStats], f: fn(&RunStats) -> f64| xs.iter().map(f).sum::<f64>() / xs.len() as f64;
    let base_acc = mean(&stats[0], |s| s.accuracy);
    let base_iou = mean(&stats[0], |s| s.iou);
    let mut table = format!("single acc {base_acc:.4} IoU {base_iou:.4}");
    for (v, s) in variants.iter().zip(&stats).skip(1) {
        let (acc, iou) = (mean(s, |r| r.accuracy), mean(s, |r| r.iou));
        table.push_str(&format!("; {} acc {acc:.4} IoU {iou:.4}", v.name()));
        if acc < base_acc - 0.005 {
            problems.push(format!("{}: mean accuracy {acc:.4} vs baseline {base_acc:.4}", v.name()));
        }
        if iou < base_iou - 0.005 {
            problems.push(format!("{}: mean IoU {iou:.4} vs baseline {base_iou:.4}", v.name()));
        }
    }
    ensure(problems.is_empty(), || format!("{} ({table})", problems.join("; ")))?;
    Ok(format!("5 seeds, slowest run {:.1}s; means: {table}", slowest.as_secs_f64()))
}

fn lambda_sweep() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.path().to_path_buf();
    let lambdas = [0.001, 0.1, 0.5, 0.9, 0.95];
    let rows = sweep_lambda(&cfg, &lambdas, &[1], TrainOptions::default()).map_err(|e| e.to_string())?;
    ensure(rows.len() == 5, || format!("{} rows", rows.len()))?;
    ensure(rows.iter().all(|r| r.final_total.is_finite()), || "non-finite final loss".into())?;
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    ensure(csv.lines().count() == 6, || "sweep.csv row count".into())?;
    let best = rows.iter().max_by(|a, b| a.val_ap50.total_cmp(&b.val_ap50)).unwrap();
    let ap: Vec<String> = rows.iter().map(|r| format!("{}:{:.4}", r.lambda, r.val_ap50)).collect();
    Ok(format!("all finite; AP50 by lambda {}; best lambda {}", ap.join(" "), best.lambda))
}

fn complexity_ordering() -> Outcome {
    let total = |v| count_params(&HeadConfig::default().with_variant(v)).unwrap().total;
    let (s, b, m, t, l) = (
        total(Variant::Single),
        total(Variant::B),
        total(Variant::M),
        total(Variant::T),
        total(Variant::Lite),
    );
    ensure(s < b && l < b && b < m && m < t, || format!("ordering violated: {s} {b} {m} {t} {l}"))?;
    for v in Variant::ALL {
        let registered = Head::build(&HeadConfig::default().with_variant(v), 0).unwrap().params().num_values();
        ensure(registered == total(v), || format!("{}: {registered} registered vs {}", v.name(), total(v)))?;
    }
    Ok(format!("single {s} < B {b}, Lite {l} < B, B < M {m} < T {t}; all equal registered counts"))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut cfg = RunConfig::default();
        cfg.head.variant = Variant::M;
        cfg.epochs = 4;
        cfg.seed = 11;
        cfg.write_routing_audit = true;
        cfg.output_dir = d.path().to_path_buf();
        run(&cfg, TrainOptions { debug_asserts: true, ..Default::default() }).map_err(|e| e.to_string())?;
    }
    // config.json is left out: it records the differing output directories
    for f in ["metrics.csv", "summary.json", "checkpoint.bin", "routing_audit.csv"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    let audit = |seed| serde_json::to_vec(&audit_sampler(5000, seed).unwrap()).unwrap();
    ensure(audit(3) == audit(3), || "sampler audit differs".into())?;
    let quick = GradcheckConfig { trials: 2, ..Default::default() };
    let gc = || serde_json::to_vec(&run_gradcheck(&quick, None).unwrap()).unwrap();
    ensure(gc() == gc(), || "gradcheck report differs".into())?;
    Ok("train artifacts, sampler audit and gradcheck report byte-identical on repeat".into())
}

#[test]
fn acceptance() {
    let data = generate_dataset(&RunConfig::default().data).unwrap();
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("routing normalization", Box::new(routing_normalization)),
        ("oracle equivalence", Box::new(|| oracle_equivalence(&data))),
        ("sampler statistics", Box::new(sampler_statistics)),
        ("gradient isolation", Box::new(|| gradient_isolation(&data))),
        ("loss identities", Box::new(loss_identities)),
        ("desk-scale training", Box::new(|| desk_scale_training(&data))),
        ("lambda sweep stability", Box::new(lambda_sweep)),
        ("complexity ordering", Box::new(complexity_ordering)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout).unwrap();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let line = match check() {
            Ok(detail) => format!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed.push(i + 1);
                format!("criterion {:>2} FAIL  {name}: {detail}", i + 1)
            }
        };
        // bypass the harness's capture so the lines always show
        writeln!(stdout, "{line}").unwrap();
        stdout.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
