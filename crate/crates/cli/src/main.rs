//! `chase` command-line front end.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 config error, 3 verification
//! failure, 4 I/O error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chase_core::bench::{measure_throughput, ThroughputSettings};
use chase_core::compact::load_compact;
use chase_core::experiment::{
    bench_input, compact_and_verify, desk_presets, find_preset, layer_rows, layerwise_csv,
    load_checkpoint, run_experiment, seed_dirs, BenchReport, ExperimentConfig, HYPER_PRESETS,
};
use chase_core::Error;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

const OUTPUT_ROOT_ENV: &str = "CHASE_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "chase", version, about = "Channel-aware dynamic sparse training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config file or a preset name.
    Run {
        config: String,
        /// Override the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Skip throughput measurement.
        #[arg(long)]
        no_throughput: bool,
    },
    /// Time a compact model against itself on random input.
    Bench {
        model: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-compact and verify every seed checkpoint of a run directory.
    Compact {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Collect plot data (CSV and JSON) from a run directory.
    Report { run_dir: PathBuf },
    /// List presets, or print one as a config.
    Presets { name: Option<String> },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Dataset(_) | Error::LabelOutOfRange { .. } => 2,
        Error::Verification(_) => 3,
        Error::Io { .. } | Error::Format(_) => 4,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        3 => "verification",
        4 => "io",
        _ => "runtime",
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn load_config(arg: &str) -> chase_core::Result<ExperimentConfig> {
    let path = Path::new(arg);
    if path.exists() {
        return ExperimentConfig::load(path);
    }
    find_preset(arg).ok_or_else(|| Error::Config(format!("{arg} is neither a config file nor a preset")))
}

fn print_json(v: &impl serde::Serialize) -> chase_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_run(config: &str, seeds: Option<Vec<u64>>, no_throughput: bool) -> chase_core::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if no_throughput {
        cfg.bench.throughput = false;
    }
    let reports = run_experiment(&cfg, &output_root())?;
    for r in &reports {
        let speedup = r
            .throughput
            .as_ref()
            .and_then(|t| t.speedup)
            .map_or("-".to_string(), |s| format!("{s:.2}x"));
        eprintln!(
            "{}: accuracy {:.4} +- {:.4}, throughput speedup {speedup}",
            r.name, r.accuracy_mean, r.accuracy_std
        );
    }
    if let Some(bad) = reports.iter().find(|r| !r.verification_passed) {
        let worst = bad
            .seeds
            .iter()
            .filter_map(|s| s.equivalence)
            .filter(|e| !e.pass)
            .map(|e| format!("deviation {:.3e} on input seed {}", e.max_abs_deviation, e.worst_seed))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Verification(format!("{}: {worst}", bad.name)));
    }
    Ok(())
}

fn cmd_bench(model: &Path, batch: usize, reps: usize, warmup: usize, seed: u64) -> chase_core::Result<()> {
    let m = load_compact(model)?;
    let settings = ThroughputSettings {
        batch,
        warmup,
        reps,
        ..Default::default()
    };
    let x = bench_input(&m.arch.input_shape, batch, seed)?;
    let r = measure_throughput(&m, &x, &settings)?;
    print_json(&r)
}

fn cmd_compact(run_dir: &Path, samples: usize, tol: f64) -> chase_core::Result<()> {
    if !(tol >= 0.0) || samples == 0 {
        return Err(Error::Config(format!("need samples >= 1 and tol >= 0 (got {samples}, {tol})")));
    }
    let dirs = seed_dirs(run_dir)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("{} has no seed-* directories", run_dir.display())));
    }
    let mut failures = Vec::new();
    let mut out = Vec::new();
    for dir in dirs {
        let model = load_checkpoint(&dir.join("checkpoint.json"))?;
        let (c, eq) = compact_and_verify(&model, samples, tol, 0, &dir)?;
        let csv = layerwise_csv(&layer_rows(&model, Some(&c)));
        let path = dir.join("layerwise.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        if !eq.pass {
            failures.push(format!(
                "{}: deviation {:.3e} on input seed {}",
                dir.display(),
                eq.max_abs_deviation,
                eq.worst_seed
            ));
        }
        out.push(json!({"dir": dir, "equivalence": eq, "compact_weights": c.weight_count()}));
    }
    print_json(&out)?;
    if !failures.is_empty() {
        return Err(Error::Verification(failures.join("; ")));
    }
    Ok(())
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) -> chase_core::Result<()> {
    let report = dir.join("report.json");
    if report.exists() {
        out.push(report);
        return Ok(());
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subs.sort();
    for s in subs {
        find_reports(&s, out)?;
    }
    Ok(())
}

fn read(path: &Path) -> chase_core::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn cmd_report(run_dir: &Path) -> chase_core::Result<()> {
    let mut paths = Vec::new();
    find_reports(run_dir, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Config(format!("no report.json under {}", run_dir.display())));
    }
    let mut summary = String::from(
        "name,method,seed,accuracy,param_sparsity,channel_sparsity,train_flops_ratio,test_flops_ratio,dense_equivalent_test_flops_ratio,compact_params,dense_params\n",
    );
    let mut curves = String::from("name,seed,iteration,loss,param_sparsity,channel_sparsity\n");
    let mut plot = Vec::new();
    for path in &paths {
        let report: BenchReport = serde_json::from_str(&read(path)?)?;
        let dir = path.parent().expect("report has a parent");
        for s in &report.seeds {
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{},{},{},{},{},{}",
                report.name,
                report.method,
                s.seed,
                s.accuracy,
                s.param_sparsity,
                s.channel_sparsity,
                s.train_flops_ratio,
                s.test_flops_ratio,
                s.dense_equivalent_test_flops_ratio,
                s.compact_params,
                s.dense_params
            );
            let metrics = dir.join(format!("seed-{}", s.seed)).join("metrics.jsonl");
            if metrics.exists() {
                for line in read(&metrics)?.lines() {
                    let v: Value = serde_json::from_str(line)?;
                    let _ = writeln!(
                        curves,
                        "{},{},{},{},{},{}",
                        report.name, s.seed, v["iteration"], v["loss"], v["param_sparsity"], v["channel_sparsity"]
                    );
                }
            }
        }
        plot.push(report);
    }
    for (name, body) in [("summary.csv", &summary), ("curves.csv", &curves)] {
        let p = run_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    let p = run_dir.join("plot_data.json");
    fs::write(&p, serde_json::to_string_pretty(&plot)?).map_err(|e| Error::io(&p, e))?;
    print!("{summary}");
    Ok(())
}

fn cmd_presets(name: Option<String>) -> chase_core::Result<()> {
    match name {
        None => {
            println!("runnable presets:");
            for p in desk_presets() {
                println!("  {}", p.name);
            }
            println!("published hyperparameter sets:");
            for h in &HYPER_PRESETS {
                println!("  {} ({}, {} epochs)", h.name, h.model, h.epochs);
            }
            Ok(())
        }
        Some(n) => {
            if let Some(cfg) = find_preset(&n) {
                return print_json(&cfg);
            }
            match HYPER_PRESETS.iter().find(|h| h.name == n) {
                Some(h) => print_json(h),
                None => Err(Error::Config(format!("unknown preset {n}"))),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seeds,
            no_throughput,
        } => cmd_run(&config, seeds, no_throughput),
        Command::Bench {
            model,
            batch,
            reps,
            warmup,
            seed,
        } => cmd_bench(&model, batch, reps, warmup, seed),
        Command::Compact { run_dir, samples, tol } => cmd_compact(&run_dir, samples, tol),
        Command::Report { run_dir } => cmd_report(&run_dir),
        Command::Presets { name } => cmd_presets(name),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = json!({"error": error_kind(&e), "message": e.to_string()});
            eprintln!("{err}");
            ExitCode::from(exit_code(&e))
        }
    }
}
