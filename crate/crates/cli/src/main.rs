//! `xmodnet`: train, evaluate, ablate and inspect cross-modulation few-shot
//! networks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error
//! (including unreadable checkpoints).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use xmodnet::analysis::{
    ablate_with_noise, export_report, generator_norm_decomposition, postmultiplier_stats, AblationRow, Format,
    NoiseSpec, Report,
};
use xmodnet::config::{synthetic_split, RunConfig};
use xmodnet::data::{write_split, SplitName, SyntheticMode};
use xmodnet::gradcheck::{run_suite, SuiteReport};
use xmodnet::model::Network;
use xmodnet::training::{evaluate, train, EvalConfig, ModelClassifier, TrainOptions};
use xmodnet::{Error, Result};

const SEED_ENV: &str = "XMODNET_SEED";

#[derive(Parser)]
#[command(name = "xmodnet", version, about = "Cross-modulation networks for few-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic training; writes checkpoints, optimizer state, log and resolved config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from last.ckpt and optimizer.state in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy with a 95% interval over seeded test episodes.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        target: EvalTarget,
    },
    /// Evaluation with N(mean, std²) noise on the post-multipliers of selected blocks.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        target: EvalTarget,
        /// Blocks to perturb, e.g. `2,3,4`.
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4])]
        blocks: Vec<usize>,
        #[arg(long, default_value_t = 0.3)]
        noise_std: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_mean: f64,
        /// Seed of the noise draws (defaults to the run seed).
        #[arg(long)]
        noise_seed: Option<u64>,
    },
    /// Generator weight-norm split and post-multiplier distributions.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "analysis")]
        output_dir: PathBuf,
    },
    /// Finite-difference check of every op and of the full episode loss.
    Gradcheck {
        #[arg(long, default_value = "64", value_parser = ["32", "64"])]
        precision: String,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a synthetic dataset (train/val/test) as PNG files plus manifests.
    SynthData {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value = "separable")]
        mode: String,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
    },
}

/// Configuration sources shared by the run commands: defaults, then the
/// config file, then `--set key=value`, then the dedicated flags.
#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    /// Queries per class (training for `train`, evaluation otherwise).
    #[arg(long)]
    queries_per_class: Option<usize>,
    /// Run seed; falls back to the config file, then $XMODNET_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset_kind: Option<String>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Seed of generated (in-memory synthetic) data.
    #[arg(long)]
    dataset_seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Evaluation batch-norm statistics: `running` or `batch`.
    #[arg(long)]
    bn_mode: Option<String>,
    /// Parallel evaluation workers (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    max_episodes: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    val_episodes: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l1: Option<f64>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct EvalTarget {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report path (default: <output_dir>/eval_report.json or ablation.csv).
    #[arg(long)]
    output: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self, training: bool) -> Result<RunConfig> {
        let (mut config, file_keys) = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => (RunConfig::default(), Vec::new()),
        };
        let mut seed_set = file_keys.iter().any(|k| k == "seed");
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            config.set(k.trim(), v)?;
            seed_set |= k.trim() == "seed";
        }
        let queries_key = if training { "queries_per_class" } else { "eval.queries_per_class" };
        let flags: [(&str, Option<String>); 19] = [
            ("model", self.model.clone()),
            ("way", self.way.map(|v| v.to_string())),
            ("shot", self.shot.map(|v| v.to_string())),
            (queries_key, self.queries_per_class.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("dataset.kind", self.dataset_kind.clone()),
            ("dataset.root", self.dataset_root.as_ref().map(|p| p.display().to_string())),
            ("dataset.resolution", self.resolution.map(|v| v.to_string())),
            ("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string())),
            ("bn_mode", self.bn_mode.clone()),
            ("workers", self.workers.map(|v| v.to_string())),
            ("width", self.width.map(|v| v.to_string())),
            ("max_episodes", self.max_episodes.map(|v| v.to_string())),
            ("eval_every", self.eval_every.map(|v| v.to_string())),
            ("val_episodes", self.val_episodes.map(|v| v.to_string())),
            ("lr_initial", self.lr.map(|v| v.to_string())),
            ("l1_factor", self.l1.map(|v| v.to_string())),
            ("eval.episodes", self.episodes.map(|v| v.to_string())),
            ("dataset.seed", self.dataset_seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                config.set(k, &v)?;
                seed_set |= k == "seed";
            }
        }
        if !seed_set {
            if let Ok(v) = std::env::var(SEED_ENV) {
                config
                    .set("seed", &v)
                    .map_err(|_| Error::Config(format!("${SEED_ENV} must be an integer, got {v:?}")))?;
            }
        }
        Ok(config)
    }
}

fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    Network::load(path)
}

fn eval_config(config: &RunConfig) -> EvalConfig {
    EvalConfig {
        episodes: config.eval_episodes,
        spec: xmodnet::data::EpisodeSpec {
            way: config.way,
            shot: config.shot,
            queries_per_class: config.eval_queries_per_class,
        },
        seed: config.seed,
        workers: config.workers,
    }
}

fn cmd_train(run: &RunArgs, resume: bool) -> Result<()> {
    let config = run.resolve(true)?;
    let train_config = config.train_config();
    train_config.validate()?;
    let train_split = config.load_dataset(SplitName::Train)?;
    let val_split = match config.load_dataset(SplitName::Val) {
        Ok(s) => Some(s),
        Err(Error::ManifestNotFound(p)) => {
            eprintln!("no validation manifest at {}; best checkpoint = last", p.display());
            None
        }
        Err(e) => return Err(e),
    };
    if let Some(val) = &val_split {
        train_split.check_disjoint(val)?;
    }
    let dir = config.output_dir.clone();
    config.write_resolved(&dir)?;
    eprintln!(
        "training {} ({}-way {}-shot, {} queries/class) for {} episodes -> {}",
        train_config.model_kind,
        train_config.way,
        train_config.shot,
        train_config.queries_per_class,
        train_config.max_episodes,
        dir.display()
    );
    let started = Instant::now();
    let outcome = train(
        &train_config,
        &train_split,
        val_split.as_ref(),
        &TrainOptions {
            output_dir: Some(dir.clone()),
            resume,
        },
    )?;
    let tail = outcome.losses.len().min(100);
    let recent = outcome.losses[outcome.losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64;
    println!(
        "trained {} episodes in {:.1}s; mean loss over last {tail}: {recent:.4}",
        outcome.episodes_run,
        started.elapsed().as_secs_f64()
    );
    if let Some(best) = &outcome.best_val {
        println!("best validation accuracy: {}", best.summary());
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<SplitName> {
    s.parse()
}

fn cmd_eval(run: &RunArgs, target: &EvalTarget) -> Result<()> {
    let config = run.resolve(false)?;
    let net = load_checkpoint(&target.checkpoint)?;
    let split = config.load_dataset(parse_split(&target.split)?)?;
    config.write_resolved(&config.output_dir)?;
    let report = evaluate(
        &ModelClassifier {
            net: &net,
            bn: config.bn_mode,
        },
        &split,
        eval_config(&config),
    )?;
    let path = target
        .output
        .clone()
        .unwrap_or_else(|| config.output_dir.join("eval_report.json"));
    export_report(&Report::Eval(report.clone()), &path, Format::Json)?;
    println!(
        "{:.4} ± {:.4}  ({} episodes, {} model)",
        report.mean_accuracy,
        report.ci95_halfwidth,
        report.episode_count,
        net.kind()
    );
    Ok(())
}

fn cmd_ablate(
    run: &RunArgs,
    target: &EvalTarget,
    blocks: &[usize],
    noise_std: f64,
    noise_mean: f64,
    noise_seed: Option<u64>,
) -> Result<()> {
    let config = run.resolve(false)?;
    let net = load_checkpoint(&target.checkpoint)?;
    let split = config.load_dataset(parse_split(&target.split)?)?;
    let spec = NoiseSpec {
        target_blocks: blocks.to_vec(),
        mean: noise_mean,
        stddev: noise_std,
        seed: noise_seed.unwrap_or(config.seed),
    };
    spec.validate()?;
    config.write_resolved(&config.output_dir)?;
    let eval = eval_config(&config);
    let clean = evaluate(
        &ModelClassifier {
            net: &net,
            bn: config.bn_mode,
        },
        &split,
        eval,
    )?;
    let noisy = ablate_with_noise(&net, &split, &spec, eval, config.bn_mode)?;
    let rows = vec![AblationRow::new(&[], &clean), AblationRow::new(blocks, &noisy)];
    let path = target
        .output
        .clone()
        .unwrap_or_else(|| config.output_dir.join("ablation.csv"));
    export_report(&Report::Ablation(rows.clone()), &path, Format::Csv)?;
    for r in &rows {
        println!("blocks {:<8} {:.4} ± {:.4}", r.blocks_noised, r.mean_acc, r.ci95);
    }
    Ok(())
}

fn cmd_analyze(checkpoint: &Path, output_dir: &Path) -> Result<()> {
    let net = load_checkpoint(checkpoint)?;
    let norms = generator_norm_decomposition(&net)?;
    let stats = postmultiplier_stats(&net)?;
    for format in [Format::Csv, Format::Json] {
        let ext = if format == Format::Csv { "csv" } else { "json" };
        export_report(&Report::Norms(norms.clone()), &output_dir.join(format!("norms.{ext}")), format)?;
        export_report(
            &Report::PostMultipliers(stats.clone()),
            &output_dir.join(format!("postmultipliers.{ext}")),
            format,
        )?;
    }
    println!("block  self_norm  cross_norm");
    for b in &norms.blocks {
        println!("{:>5}  {:>9.4}  {:>10.4}", b.block, b.self_norm_mean, b.cross_norm_mean);
    }
    println!("block  param   median |.|  mean |.|");
    for s in &stats {
        println!("{:>5}  {:<6}  {:>10.4}  {:>8.4}", s.block, s.param, s.summary.median, s.summary.mean);
    }
    println!("wrote {}", output_dir.display());
    Ok(())
}

fn print_suite(report: &SuiteReport) {
    for c in &report.checks {
        let mark = if c.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        println!("{:<32} {:.3e}  {mark}", c.name, c.max_rel_error);
    }
    println!(
        "max relative error ({}): {:.3e} (tolerance {:.0e})",
        report.precision,
        report.max_rel_error(),
        report.tolerance
    );
}

fn cmd_gradcheck(precision: &str, seed: u64) -> Result<bool> {
    let report = if precision == "32" {
        run_suite::<f32>(seed)?
    } else {
        run_suite::<f64>(seed)?
    };
    print_suite(&report);
    Ok(report.passed())
}

fn cmd_synth(output: &Path, classes: usize, per_class: usize, resolution: usize, mode: &str, seed: u64) -> Result<()> {
    let mode: SyntheticMode = mode.parse()?;
    for split in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let data = synthetic_split(classes, per_class, resolution, mode, seed, split)?;
        write_split(output, &data)?;
    }
    println!(
        "wrote {} synthetic {resolution}x{resolution} dataset ({classes} classes x {per_class} per split) to {}",
        mode.as_str(),
        output.display()
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ManifestNotFound(_) | Error::Checkpoint(_) | Error::Unsupported(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { run, resume } => cmd_train(run, *resume).map(|_| true),
        Command::Eval { run, target } => cmd_eval(run, target).map(|_| true),
        Command::Ablate {
            run,
            target,
            blocks,
            noise_std,
            noise_mean,
            noise_seed,
        } => cmd_ablate(run, target, blocks, *noise_std, *noise_mean, *noise_seed).map(|_| true),
        Command::Analyze { checkpoint, output_dir } => cmd_analyze(checkpoint, output_dir).map(|_| true),
        Command::Gradcheck { precision, seed } => cmd_gradcheck(precision, *seed),
        Command::SynthData {
            output,
            classes,
            per_class,
            resolution,
            mode,
            seed,
        } => cmd_synth(output, *classes, *per_class, *resolution, mode, *seed).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn bad_config_maps_to_usage_exit_code() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Checkpoint("bad magic".into())), 2);
        assert_eq!(exit_code(&Error::NanGradient("gen2.W".into())), 1);
    }
}
