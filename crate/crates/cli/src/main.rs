use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rdroute::autodiff::OpKind;
use rdroute::config::RunConfig;
use rdroute::gradcheck::{run_gradcheck, GradcheckConfig};
use rdroute::heads::{count_params, Head, Variant};
use rdroute::routing::audit_sampler;
use rdroute::train::{eval_checkpoint, run, sweep_lambda, TrainOptions};
use rdroute::Error;

#[derive(Parser)]
#[command(name = "rdroute", version, about = "Train and inspect soft decision-tree heads with randomized routing")]
struct Cli {
    /// Run config (JSON). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Check each epoch that selective losses leave the routing branch untouched.
    #[arg(long, global = true)]
    debug_asserts: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one head; writes metrics.csv, summary.json and checkpoint.bin.
    Train,
    /// Evaluate a checkpoint on the val split and print metrics as JSON.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset seed; defaults to the one stored in the checkpoint.
        #[arg(long, value_name = "N")]
        data_seed: Option<u64>,
    },
    /// One training run per (lambda, seed); writes sweep.csv.
    SweepLambda {
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.1,0.5,0.9,0.95")]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Compare every op and loss gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Negate one op's backward pass (checks the checker).
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Summarize sampled selective weights.
    AuditSampler {
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
    },
    /// Parameter and FLOP counts per head variant.
    Count,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig { .. } | Error::Json(_) => 2,
        Error::NotFinite(_) => 3,
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(dir: Option<&Path>, name: &str, text: &str) -> Result<(), Error> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), text)?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<u8, Error> {
    let opts = TrainOptions {
        debug_asserts: cli.debug_asserts,
        ..Default::default()
    };
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let out = run(&cfg, opts)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
            eprintln!("wrote {} ({:.1}s)", cfg.output_dir.display(), out.wall_clock.as_secs_f64());
        }
        Command::Eval { checkpoint, data_seed } => {
            let cfg = cli.config.as_ref().map(|_| load_config(cli)).transpose()?;
            let mut data = match &cfg {
                Some(c) => Some(c.data.clone()),
                None => rdroute::checkpoint::load_checkpoint(checkpoint)?.data,
            };
            if let (Some(d), Some(seed)) = (data.as_mut(), data_seed) {
                d.seed = *seed;
            }
            let batch = cfg.as_ref().map_or(RunConfig::default().batch_size, |c| c.batch_size);
            let metrics = eval_checkpoint(checkpoint, data.as_ref(), batch)?;
            let json = serde_json::to_string_pretty(&metrics)?;
            println!("{json}");
            write_out(cli.out.as_deref(), "eval.json", &json)?;
        }
        Command::SweepLambda { lambdas, seeds } => {
            let cfg = load_config(cli)?;
            let rows = sweep_lambda(&cfg, lambdas, seeds, opts)?;
            for r in &rows {
                println!(
                    "lambda {:<6} seed {:<3} loss {:.5} acc {:.4} iou {:.4} ap50 {:.4}",
                    r.lambda, r.seed, r.final_total, r.val_accuracy, r.val_mean_iou, r.val_ap50
                );
            }
            eprintln!("wrote {}", cfg.output_dir.join("sweep.csv").display());
        }
        Command::Gradcheck { trials, inject_fault } => {
            let fault = match inject_fault {
                Some(name) => Some(
                    OpKind::from_name(name).ok_or_else(|| Error::InvalidConfig {
                        field: "inject-fault".into(),
                        reason: format!("unknown op {name}"),
                    })?,
                ),
                None => None,
            };
            let cfg = GradcheckConfig {
                trials: *trials,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let report = run_gradcheck(&cfg, fault)?;
            for r in &report.results {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!("{:<32} {:>10.3e}  {status}", r.name, r.max_rel_err);
            }
            write_out(cli.out.as_deref(), "gradcheck.json", &serde_json::to_string_pretty(&report)?)?;
            if !report.passed() {
                eprintln!("failed: {}", report.failures().join(", "));
                return Ok(1);
            }
            println!("all {} checks within {:e}", report.results.len(), report.tolerance);
        }
        Command::AuditSampler { draws } => {
            let audit = audit_sampler(*draws, cli.seed.unwrap_or(0))?;
            let json = serde_json::to_string_pretty(&audit)?;
            println!("{json}");
            write_out(cli.out.as_deref(), "sampler_audit.json", &json)?;
            if !(audit.low.all_within && audit.high.all_within) {
                return Ok(1);
            }
        }
        Command::Count => {
            let base = load_config(cli)?.head;
            let mut table = String::from("variant,trunk,task_branches,node_predictors,routing_branch,mask_branch,total,flops_per_sample\n");
            let mut totals = Vec::new();
            for v in Variant::ALL {
                let cfg = base.with_variant(v);
                let c = count_params(&cfg)?;
                let registered = Head::build(&cfg, 0)?.params().num_values();
                if registered != c.total {
                    eprintln!("{}: counted {} but registered {registered}", v.name(), c.total);
                    return Ok(1);
                }
                table.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    v.name(),
                    c.trunk,
                    c.task_branches,
                    c.node_predictors,
                    c.routing_branch,
                    c.mask_branch,
                    c.total,
                    c.flops_per_sample
                ));
                totals.push(c.total);
            }
            print!("{table}");
            write_out(cli.out.as_deref(), "count.csv", &table)?;
            let [single, b, m, t, lite] = totals[..] else { unreachable!() };
            if !(single < b && lite < b && b < m && m < t) {
                eprintln!("ordering single < B, Lite < B, B < M < T does not hold for this config");
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
