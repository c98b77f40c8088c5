//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines come out in order; exits non-zero if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodnet::analysis::{ablate_with_noise, mean_abs_gamma0, NoiseSpec};
use xmodnet::autodiff::Tape;
use xmodnet::config::synthetic_split;
use xmodnet::data::{DatasetSplit, Episode, EpisodeSpec, SplitName, SyntheticMode};
use xmodnet::gradcheck::run_suite;
use xmodnet::model::{classify_episode, BnMode, Forward, ModelKind, Network, RunningStats};
use xmodnet::training::{
    episode_at, evaluate, train, train_step, AdamState, EpisodeClassifier, EvalConfig, EvalReport, ModelClassifier,
    TrainConfig, TrainOptions,
};
use xmodnet::{Result, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn five_way(queries_per_class: usize) -> EpisodeSpec {
    EpisodeSpec {
        way: 5,
        shot: 1,
        queries_per_class,
    }
}

fn eval_config(episodes: usize, spec: EpisodeSpec, seed: u64) -> EvalConfig {
    EvalConfig {
        episodes,
        spec,
        seed,
        workers: 0,
    }
}

// 1 ------------------------------------------------------------------------

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let f64_report = run_suite::<f64>(0)?;
    let f32_report = run_suite::<f32>(0)?;
    let elapsed = start.elapsed();
    let (e64, e32) = (f64_report.max_rel_error(), f32_report.max_rel_error());
    let checks = f64_report.checks.len() + f32_report.checks.len();
    Ok(outcome(
        e64 < 1e-4 && e32 < 1e-2 && elapsed < Duration::from_secs(120),
        format!(
            "{checks} checks; max rel err f64 {e64:.2e} (< 1e-4), f32 {e32:.2e} (< 1e-2); {:.1}s (< 120s)",
            elapsed.as_secs_f64()
        ),
    ))
}

// 2 ------------------------------------------------------------------------

/// Matching probabilities from baseline embeddings with plain loops:
/// `sum_i exp(c_i) [y_i = k] / sum_i exp(c_i)`, `c_i = <q, s_i> / |q|`.
fn brute_force_probabilities(net: &Network<f64>, ep: &Episode) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false, None)?;
    let s = tape.constant(ep.support_batch::<f64>());
    let q = tape.constant(ep.query_batch::<f64>());
    let mut fwd = Forward::new(net, &bound, BnMode::Eval);
    let es = fwd.embed_baseline(&mut tape, s)?;
    let eq = fwd.embed_baseline(&mut tape, q)?;
    let d = tape.shape(es)[1];
    let (es, eq) = (tape.value(es).data().to_vec(), tape.value(eq).data().to_vec());
    let labels = ep.support_labels();
    let mut out = Vec::new();
    for qrow in eq.chunks(d) {
        let norm = qrow.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        let c: Vec<f64> = es
            .chunks(d)
            .map(|srow| srow.iter().zip(qrow).map(|(a, b)| a * b).sum::<f64>() / norm)
            .collect();
        let z: f64 = c.iter().map(|v| v.exp()).sum();
        for k in 0..ep.way {
            let num: f64 = c.iter().zip(&labels).filter(|(_, &y)| y == k).map(|(v, _)| v.exp()).sum();
            out.push(num / z);
        }
    }
    Ok(out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gate_equivalence() -> Result<Outcome> {
    let split = synthetic_split(10, 6, 16, SyntheticMode::Separable, 21, SplitName::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (mut gate_err, mut oracle_err) = (0.0f64, 0.0f64);
    for i in 0..100u64 {
        let mut net = Network::<f64>::new(ModelKind::CrossMod, 6, 1000 + i);
        // Random running statistics so non-transductive evaluation is exercised too.
        for b in net.blocks_mut() {
            let w = b.bn_gamma.numel();
            b.running = Some(RunningStats {
                mean: (0..w).map(|_| rng.random_range(-0.5..0.5)).collect(),
                var: (0..w).map(|_| rng.random_range(0.5..2.0)).collect(),
            });
        }
        let gated = net.with_modulation_gated_off();
        let baseline = net.baseline_part();
        let spec = EpisodeSpec {
            way: rng.random_range(2..=5),
            shot: rng.random_range(1..=2),
            queries_per_class: rng.random_range(1..=3),
        };
        let ep = episode_at(&split, spec, 23, i)?;
        for bn in [BnMode::Eval, BnMode::Transductive] {
            let a = classify_episode(&gated, &ep, bn, None)?;
            let b = classify_episode(&baseline, &ep, bn, None)?;
            gate_err = gate_err.max(max_abs_diff(a.data(), b.data()));
        }
        let model = classify_episode(&baseline, &ep, BnMode::Eval, None)?;
        oracle_err = oracle_err.max(max_abs_diff(model.data(), &brute_force_probabilities(&baseline, &ep)?));
    }
    Ok(outcome(
        gate_err <= 1e-6 && oracle_err <= 1e-6,
        format!("100 episodes; gated vs baseline max |dp| {gate_err:.2e}, vs brute force {oracle_err:.2e} (<= 1e-6)"),
    ))
}

// 3 ------------------------------------------------------------------------

/// Trains on one synthetic class set and evaluates on disjoint, never-seen
/// classes from the same generator.
fn train_and_test(kind: ModelKind, train_split: &DatasetSplit, test_split: &DatasetSplit, episodes: u64) -> Result<(EvalReport, Duration)> {
    let start = Instant::now();
    let config = TrainConfig {
        max_episodes: episodes,
        eval_every: episodes,
        val_episodes: 0,
        seed: 3,
        ..TrainConfig::new(kind)
    };
    let outcome = train(&config, train_split, None, &TrainOptions::default())?;
    let report = evaluate(
        &ModelClassifier {
            net: &outcome.network,
            bn: BnMode::Eval,
        },
        test_split,
        eval_config(200, five_way(15), 4),
    )?;
    Ok((report, start.elapsed()))
}

fn desk_learning() -> Result<Outcome> {
    let train_split = synthetic_split(10, 20, 32, SyntheticMode::Separable, 31, SplitName::Train)?;
    let test_split = synthetic_split(10, 20, 32, SyntheticMode::Separable, 31, SplitName::Test)?;
    // Well inside the 2000-episode allowance; separable data is learned fast.
    const EPISODES: u64 = 300;
    let (base, t_base) = train_and_test(ModelKind::Baseline, &train_split, &test_split, EPISODES)?;
    let (cross, t_cross) = train_and_test(ModelKind::CrossMod, &train_split, &test_split, EPISODES)?;
    let limit = Duration::from_secs(600);
    Ok(outcome(
        base.mean_accuracy >= 0.90 && cross.mean_accuracy >= 0.85 && t_base < limit && t_cross < limit,
        format!(
            "{EPISODES} episodes, 200 held-out: baseline {} (>= 90%) in {:.0}s, crossmod {} (>= 85%) in {:.0}s",
            base.summary(),
            t_base.as_secs_f64(),
            cross.summary(),
            t_cross.as_secs_f64()
        ),
    ))
}

// 4 ------------------------------------------------------------------------

fn ablation_direction() -> Result<Outcome> {
    let train_split = synthetic_split(10, 20, 16, SyntheticMode::Pairwise, 41, SplitName::Train)?;
    let test_split = synthetic_split(10, 20, 16, SyntheticMode::Pairwise, 41, SplitName::Test)?;
    let config = TrainConfig {
        seed: 4,
        width: 32,
        ..TrainConfig::new(ModelKind::CrossMod)
    };
    const GAMMA_TARGET: f64 = 0.05;
    const MAX_EPISODES: u64 = 3000;
    let mut net = Network::<f32>::new(ModelKind::CrossMod, config.width, config.seed);
    let mut state = AdamState::new(&net.params());
    let mut episodes = 0;
    while episodes < MAX_EPISODES && (episodes < 200 || mean_abs_gamma0(&net) <= GAMMA_TARGET) {
        let ep = episode_at(&train_split, config.episode_spec(), config.seed, episodes)?;
        train_step(&mut net, &mut state, &ep, config.l1_factor, config.lr_initial)?;
        episodes += 1;
    }
    let gamma = mean_abs_gamma0(&net);

    let eval = eval_config(500, five_way(15), 5);
    let clean = evaluate(&ModelClassifier { net: &net, bn: BnMode::Eval }, &test_split, eval)?;
    let noised = ablate_with_noise(&net, &test_split, &NoiseSpec::new(vec![2, 3, 4], 0.3, 6)?, eval, BnMode::Eval)?;
    let zero = ablate_with_noise(&net, &test_split, &NoiseSpec::new(vec![2, 3, 4], 0.0, 6)?, eval, BnMode::Eval)?;
    let identical = zero.per_episode_accuracies == clean.per_episode_accuracies && zero.mean_accuracy == clean.mean_accuracy;
    Ok(outcome(
        gamma > GAMMA_TARGET
            && noised.mean_accuracy <= clean.mean_accuracy + clean.ci95_halfwidth
            && identical,
        format!(
            "mean |gamma0| {gamma:.4} after {episodes} episodes; clean {}, N(1, 0.3) on 2,3,4 {}, std 0 identical: {identical}",
            clean.summary(),
            noised.summary()
        ),
    ))
}

// 5 ------------------------------------------------------------------------

/// Uniformly random one-hot predictions, seeded per episode.
struct RandomGuess {
    seed: u64,
}

impl EpisodeClassifier for RandomGuess {
    fn classify(&self, episode: &Episode, index: u64) -> Result<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let (t, way) = (episode.query.len(), episode.way);
        let mut data = vec![0.0; t * way];
        for row in data.chunks_mut(way) {
            row[rng.random_range(0..way)] = 1.0;
        }
        Tensor::new([t, way], data)
    }
}

fn evaluation_statistics() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut hw_err = 0.0f64;
    for n in [1usize, 2, 3, 10, 57, 1000] {
        let accs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mean = accs.iter().sum::<f64>() / n as f64;
        let expected = if n < 2 {
            0.0
        } else {
            let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        let report = EvalReport::from_accuracies(accs, 0);
        hw_err = hw_err.max((report.ci95_halfwidth - expected).abs());
    }
    let split = synthetic_split(10, 20, 16, SyntheticMode::Separable, 52, SplitName::Test)?;
    let r = evaluate(&RandomGuess { seed: 53 }, &split, eval_config(1000, five_way(15), 54))?;
    let within = (r.mean_accuracy - 0.2).abs() <= 3.0 * r.ci95_halfwidth;
    Ok(outcome(
        hw_err <= 1e-12 && within && r.episode_count == 1000,
        format!("halfwidth max err {hw_err:.1e} (<= 1e-12); random 5-way guess {} (20% +- 3 hw)", r.summary()),
    ))
}

// 6 ------------------------------------------------------------------------

fn determinism() -> Result<Outcome> {
    let train_split = synthetic_split(8, 20, 16, SyntheticMode::Pairwise, 61, SplitName::Train)?;
    let val_split = synthetic_split(5, 20, 16, SyntheticMode::Pairwise, 61, SplitName::Val)?;
    let dir = tempfile::tempdir()?;
    let config = TrainConfig {
        width: 16,
        max_episodes: 100,
        eval_every: 50,
        val_episodes: 20,
        seed: 62,
        ..TrainConfig::new(ModelKind::CrossMod)
    };
    let mut logs = Vec::new();
    let mut nets = Vec::new();
    for run in ["a", "b"] {
        let options = TrainOptions {
            output_dir: Some(dir.path().join(run)),
            resume: false,
        };
        let out = train(&config, &train_split, Some(&val_split), &options)?;
        logs.push(fs::read(dir.path().join(run).join("train_log.jsonl"))?);
        nets.push(out.network);
    }
    let logs_equal = logs[0] == logs[1] && !logs[0].is_empty();
    let lines = String::from_utf8_lossy(&logs[0]).lines().count();

    let mut reports = Vec::new();
    for workers in [1, 4] {
        let eval = EvalConfig {
            workers,
            ..eval_config(50, five_way(5), 63)
        };
        reports.push(serde_json::to_vec(&evaluate(
            &ModelClassifier {
                net: &nets[0],
                bn: BnMode::Eval,
            },
            &val_split,
            eval,
        )?)?);
    }
    reports.push(serde_json::to_vec(&evaluate(
        &ModelClassifier {
            net: &nets[1],
            bn: BnMode::Eval,
        },
        &val_split,
        eval_config(50, five_way(5), 63),
    )?)?);
    let reports_equal = reports.windows(2).all(|w| w[0] == w[1]);
    Ok(outcome(
        logs_equal && lines == 100 && reports_equal,
        format!("{lines}-line logs byte-identical: {logs_equal}; eval reports identical across runs and worker counts: {reports_equal}"),
    ))
}

// 7 ------------------------------------------------------------------------

fn long_run_documented() -> Result<Outcome> {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = fs::read_to_string(&readme).unwrap_or_default();
    let documented = text.contains("## Long-run miniImageNet recipe") && text.contains("xmodnet train");
    Ok(outcome(
        documented,
        "full-scale miniImageNet accuracies are not gated; long-run miniImageNet recipe documented in README (optional)".into(),
    ))
}

type Criterion = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 7] = [
        ("gradient correctness", gradients),
        ("gate/oracle equivalence", gate_equivalence),
        ("desk-scale learning", desk_learning),
        ("ablation direction", ablation_direction),
        ("evaluation statistics", evaluation_statistics),
        ("determinism", determinism),
        ("full-scale recipe (non-gating)", long_run_documented),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let (passed, detail) = match check() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!("criterion {n} [{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
