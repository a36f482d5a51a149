//! Command-line front end: dataset generation, training, evaluation, sweeps,
//! index benchmarks and diagnostics.
//!
//! Exit codes: 0 on success, 1 when a run fails at runtime, 2 on usage or
//! configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use prdc::config::RunConfig;
use prdc::diagnostics::{self, SweepAxis, TRACE_BETA};
use prdc::error::{Error, Result};
use prdc::lineworld::{self, DatasetSpec, Variant};
use prdc::neighbors::{self, NeighborIndex};
use prdc::nn::Head;
use prdc::run::{self, MANIFEST_FILE};
use serde_json::json;

#[derive(Parser)]
#[command(name = "prdc", version, about = "Offline RL with a nearest-neighbour dataset constraint")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a lineworld dataset file.
    Gen {
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        samples_per_state: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run; extra `--key value` pairs override config entries.
    Train(TrainArgs),
    /// Evaluate a policy checkpoint over several seeds.
    Eval {
        /// Actor checkpoint inside a run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = lineworld::ACCOMPLISH_EPISODES)]
        episodes: usize,
        #[arg(long, default_value_t = lineworld::ACCOMPLISH_SEEDS)]
        seeds: usize,
        #[arg(long, default_value_t = run::EVAL_SEED_OFFSET)]
        seed_base: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per (value, seed) along a beta or k axis.
    Sweep(SweepArgs),
    /// Time KD-tree against linear-scan nearest-neighbour queries.
    BenchIndex {
        /// Comma-separated dataset sizes, at least two.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Value probes and a distance trace for a checkpoint.
    Diag {
        /// Actor checkpoint inside a run directory; the other networks are
        /// read from the same directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        probes: usize,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run the exact configuration recorded in a run manifest.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Config overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

/// Splits `--key value` and `--key=value` tokens into pairs.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got {tok:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                pairs.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(pairs)
}

fn resolve_config(config: Option<&Path>, manifest: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match manifest {
        Some(m) => run::config_from_manifest(m)?,
        None => RunConfig::default(),
    };
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env()?;
    let pairs = parse_overrides(overrides)?;
    cfg.apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text + "\n")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_gen(variant: Variant, seed: u64, samples_per_state: usize, out: &Path) -> Result<()> {
    if samples_per_state == 0 {
        return Err(Error::Config("samples_per_state must be positive".into()));
    }
    let ds = lineworld::generate_dataset(&DatasetSpec {
        variant,
        samples_per_state,
        seed,
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ds.save(out)?;
    println!("wrote {} transitions of {} to {}", ds.len(), ds.env_id(), out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), args.manifest.as_deref(), &args.overrides)?;
    let summary = run::run_to_dir(&cfg)?;
    println!(
        "{} on {} seed {}: {}/{} successes, mean return {:.2}; outputs in {}",
        summary.algorithm,
        summary.env_id,
        summary.seed,
        summary.final_successes,
        summary.final_episodes,
        summary.final_mean_return,
        cfg.out.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, episodes: usize, seeds: usize, seed_base: u64, out: Option<&Path>) -> Result<()> {
    if episodes == 0 || seeds == 0 {
        return Err(Error::Config("episodes and seeds must be at least 1".into()));
    }
    let (actor, normalizer, cfg) = run::load_policy(checkpoint)?;
    let head = Head::Tanh {
        bound: cfg.agent.td3.action_bound,
    };
    let policy = |s: f64| actor.forward_one(&normalizer.normalize(&[s]), head).expect("actor takes one state")[0];
    let reports = (0..seeds as u64)
        .map(|i| lineworld::evaluate_policy(&policy, episodes, seed_base + i))
        .collect::<Result<Vec<_>>>()?;
    let successes: usize = reports.iter().map(|r| r.successes).sum();
    let verdict = successes == episodes * seeds;
    let protocol = seeds == lineworld::ACCOMPLISH_SEEDS && episodes == lineworld::ACCOMPLISH_EPISODES;
    write_json(
        out,
        &json!({
            "checkpoint": checkpoint.display().to_string(),
            "reports": reports,
            "successes": successes,
            "episodes": episodes * seeds,
            "accomplished": verdict,
            "standard_protocol": protocol,
        }),
    )?;
    eprintln!("{successes}/{} successes, accomplished: {verdict}", episodes * seeds);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let axis: SweepAxis = args.axis.parse()?;
    if args.values.is_empty() {
        return Err(Error::Config("--values needs at least one value".into()));
    }
    let base = resolve_config(args.config.as_deref(), None, &args.overrides)?;
    let result = diagnostics::run_sweep(&base, axis, &args.values, &args.seeds, args.jobs)?;
    fs::create_dir_all(&base.out)?;
    let path = base.out.join(format!("sweep_{axis}.json"));
    fs::write(&path, serde_json::to_string_pretty(&result)?)?;
    for cell in &result.summary {
        let score = match (cell.mean_return, cell.std_return) {
            (Some(m), Some(s)) => format!("{m:.2} +/- {s:.2}"),
            _ => "failed".to_string(),
        };
        println!(
            "{axis}={:<8} return {score:<18} successes {}/{} failed runs {}",
            cell.value, cell.successes, cell.episodes, cell.failed
        );
    }
    println!("summary written to {}", path.display());
    Ok(())
}

fn cmd_bench(sizes: &[usize], dim: usize, queries: usize, beta: f64, seed: u64, out: Option<&Path>) -> Result<bool> {
    if sizes.len() < 2 {
        return Err(Error::Config("--sizes needs at least two values".into()));
    }
    let rows = neighbors::bench_index(sizes, dim, queries, beta, seed)?;
    println!("{:>10} {:>12} {:>14} {:>14} {:>9}", "size", "build_s", "kd_query_s", "brute_query_s", "identical");
    for r in &rows {
        println!(
            "{:>10} {:>12.6} {:>14.3e} {:>14.3e} {:>9}",
            r.size, r.build_seconds, r.kd_query_seconds, r.brute_query_seconds, r.identical
        );
    }
    if let Some(path) = out {
        write_json(Some(path), &serde_json::to_value(&rows)?)?;
    }
    Ok(rows.iter().all(|r| r.identical))
}

fn cmd_diag(checkpoint: &Path, probes: usize, episodes: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let (agent, normalizer, cfg) = run::load_agent(dir)?;
    let ds = run::prepare_dataset(&cfg)?.normalize_states()?;
    if ds.normalizer() != &normalizer {
        return Err(Error::Config(format!(
            "dataset statistics differ from {}",
            dir.join(MANIFEST_FILE).display()
        )));
    }
    let states = diagnostics::probe_states(probes.max(1), seed.wrapping_add(run::PROBE_SEED_OFFSET));
    let probe = diagnostics::value_probe(&agent, &normalizer, &states, cfg.agent.td3.gamma, agent.step)?;
    let report = lineworld::evaluate_policy(&agent.policy(&normalizer), episodes, seed.wrapping_add(run::EVAL_SEED_OFFSET))?;
    let index = NeighborIndex::build(&ds, TRACE_BETA)?;
    let distance = diagnostics::visited_distance(&index, &normalizer, &report.visited)?;
    info!("probe estimate {:.3}, true {:.3}", probe.estimated_q, probe.true_q);
    write_json(
        out,
        &json!({
            "checkpoint": checkpoint.display().to_string(),
            "probe": probe,
            "exceeds_bound": probe.estimated_q > lineworld::VALUE_BOUND,
            "value_bound": lineworld::VALUE_BOUND,
            "eval_mean_return": report.mean_return,
            "eval_successes": report.successes,
            "mean_distance": distance,
            "distance_beta": TRACE_BETA,
        }),
    )
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_usage() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen {
            variant,
            seed,
            samples_per_state,
            out,
        } => cmd_gen(*variant, *seed, *samples_per_state, out),
        Command::Train(args) => cmd_train(args),
        Command::Eval {
            checkpoint,
            episodes,
            seeds,
            seed_base,
            out,
        } => cmd_eval(checkpoint, *episodes, *seeds, *seed_base, out.as_deref()),
        Command::Sweep(args) => cmd_sweep(args),
        Command::BenchIndex {
            sizes,
            dim,
            queries,
            beta,
            seed,
            out,
        } => match cmd_bench(sizes, *dim, *queries, *beta, *seed, out.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: KD-tree and linear scan disagree");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Command::Diag {
            checkpoint,
            probes,
            episodes,
            seed,
            out,
        } => cmd_diag(checkpoint, *probes, *episodes, *seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
