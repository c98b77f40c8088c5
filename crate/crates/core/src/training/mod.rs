//! Episodic training: L1-regularized episode loss, Adam with a step-halving
//! learning rate, periodic validation, checkpoints and resumption.

mod adam;
mod eval;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{DatasetSplit, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::{read_container, write_container, BnMode, BnObservations, Bound, Forward, ModelKind, Network, DEFAULT_WIDTH};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use eval::{accuracy, episode_at, evaluate, EpisodeClassifier, EvalConfig, EvalReport, ModelClassifier, Z95};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const OPTIMIZER_STATE: &str = "optimizer.state";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Mixed into the seed for validation episodes so they never coincide with
/// training episodes.
const VAL_SEED_SALT: u64 = 0x7661_6c69_6461_7465;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub lr_initial: f64,
    pub lr_halving_period: u64,
    pub l1_factor: f64,
    pub max_episodes: u64,
    pub eval_every: u64,
    pub val_episodes: usize,
    pub val_queries_per_class: usize,
    pub seed: u64,
    pub width: usize,
    /// Batch-norm mode for validation.
    pub bn_mode: BnMode,
    pub workers: usize,
}

impl TrainConfig {
    /// Defaults for `kind`; cross-modulation trains with 5 queries per
    /// class, the baseline with 15.
    pub fn new(model_kind: ModelKind) -> Self {
        Self {
            model_kind,
            way: 5,
            shot: 1,
            queries_per_class: default_train_queries(model_kind),
            lr_initial: 0.001,
            lr_halving_period: 100_000,
            l1_factor: 0.001,
            max_episodes: 300_000,
            eval_every: 5000,
            val_episodes: 200,
            val_queries_per_class: 15,
            seed: 0,
            width: DEFAULT_WIDTH,
            bn_mode: BnMode::Eval,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("way", self.way as u64),
            ("shot", self.shot as u64),
            ("queries_per_class", self.queries_per_class as u64),
            ("lr_halving_period", self.lr_halving_period),
            ("max_episodes", self.max_episodes),
            ("eval_every", self.eval_every),
            ("width", self.width as u64),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::Config("lr_initial must be positive".into()));
        }
        if !(self.l1_factor >= 0.0 && self.l1_factor.is_finite()) {
            return Err(Error::Config("l1_factor must be non-negative".into()));
        }
        if self.bn_mode == BnMode::Train {
            return Err(Error::Config("validation batch-norm mode must be running or batch".into()));
        }
        Ok(())
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            way: self.way,
            shot: self.shot,
            queries_per_class: self.queries_per_class,
        }
    }

    pub fn val_config(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.val_episodes,
            spec: EpisodeSpec {
                way: self.way,
                shot: self.shot,
                queries_per_class: self.val_queries_per_class,
            },
            seed: self.seed ^ VAL_SEED_SALT,
            workers: self.workers,
        }
    }
}

pub fn default_train_queries(kind: ModelKind) -> usize {
    match kind {
        ModelKind::Baseline => 15,
        ModelKind::CrossMod => 5,
    }
}

/// `lr_initial * 0.5^floor(episode / lr_halving_period)`.
pub fn lr_schedule(episode: u64, config: &TrainConfig) -> f64 {
    let halvings = episode / config.lr_halving_period.max(1);
    config.lr_initial * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

/// Records the episode loss on `tape`: mean query NLL of the matching
/// distribution plus `l1 * Σ(|γ0| + |β0|)` over all generators.
pub fn episode_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Network<T>,
    bound: &Bound,
    episode: &Episode,
    l1: f64,
    bn: BnMode,
) -> Result<(Var, BnObservations)> {
    let s = tape.constant(episode.support_batch());
    let q = tape.constant(episode.query_batch());
    let mut fwd = Forward::new(net, bound, bn);
    let probs = fwd.classify(tape, s, q, &episode.support_labels(), episode.way)?;
    let mut loss = tape.nll(probs, &episode.query_labels())?;
    if !bound.generators.is_empty() && l1 != 0.0 {
        let mut penalty: Option<Var> = None;
        for g in &bound.generators {
            for v in [g.gamma0, g.beta0] {
                let a = tape.abs_sum(v)?;
                penalty = Some(match penalty {
                    Some(p) => tape.add(p, a)?,
                    None => a,
                });
            }
        }
        if let Some(p) = penalty {
            let p = tape.scale(p, T::of(l1))?;
            loss = tape.add(loss, p)?;
        }
    }
    Ok((loss, fwd.observations))
}

/// Loss value of one episode with batch statistics (training mode) and no
/// gradient bookkeeping.
pub fn episode_loss<T: Scalar>(net: &Network<T>, episode: &Episode, l1: f64) -> Result<T> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false, None)?;
    let (loss, _) = episode_loss_on_tape(&mut tape, net, &bound, episode, l1, BnMode::Train)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug)]
pub struct LossAndGradients<T> {
    pub loss: T,
    /// In [`Network::param_names`] order.
    pub gradients: Vec<Tensor<T>>,
    pub observations: BnObservations,
}

pub fn loss_and_gradients<T: Scalar>(net: &Network<T>, episode: &Episode, l1: f64) -> Result<LossAndGradients<T>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true, None)?;
    let (loss, observations) = episode_loss_on_tape(&mut tape, net, &bound, episode, l1, BnMode::Train)?;
    tape.backward(loss)?;
    Ok(LossAndGradients {
        loss: tape.value(loss).item(),
        gradients: bound.gradients(&tape),
        observations,
    })
}

/// One training step: loss, backward, Adam, running-stat update.
pub fn train_step(
    net: &mut Network<f32>,
    state: &mut AdamState<f32>,
    episode: &Episode,
    l1: f64,
    lr: f64,
) -> Result<f32> {
    let LossAndGradients {
        loss,
        mut gradients,
        observations,
    } = loss_and_gradients(net, episode, l1)?;
    let names = net.param_names();
    adam_step(net.params_mut(), &names, &mut gradients, state, lr)?;
    net.update_running_stats(&observations);
    Ok(loss)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub episodes_run: u64,
    pub best_val: Option<EvalReport>,
    pub last_val: Option<EvalReport>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints, optimizer state and the log go. Nothing is written
    /// when `None`.
    pub output_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` + `optimizer.state` in `output_dir`.
    pub resume: bool,
}

fn save_optimizer(path: &Path, state: &AdamState<f32>, names: &[String], episode: u64, best: f64) -> Result<()> {
    let mut records = Vec::with_capacity(2 * names.len() + 3);
    for (name, m) in names.iter().zip(&state.m) {
        records.push((format!("adam.m.{name}"), m.clone()));
    }
    for (name, v) in names.iter().zip(&state.v) {
        records.push((format!("adam.v.{name}"), v.clone()));
    }
    // Counters are stored as two 24-bit halves each so f32 carries them exactly.
    let split = |x: u64| vec![(x >> 24) as f32, (x & 0xff_ffff) as f32];
    records.push(("adam.t".into(), Tensor::new([2], split(state.t))?));
    records.push(("train.episode".into(), Tensor::new([2], split(episode))?));
    records.push(("train.best_val_acc".into(), Tensor::new([1], vec![best as f32])?));
    write_container(path, &records)
}

fn load_optimizer(path: &Path, names: &[String]) -> Result<(AdamState<f32>, u64, f64)> {
    let mut records: std::collections::BTreeMap<String, Tensor<f32>> = read_container(path)?.into_iter().collect();
    let mut take = |name: String| {
        records
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {name}")))
    };
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for name in names {
        m.push(take(format!("adam.m.{name}"))?);
    }
    for name in names {
        v.push(take(format!("adam.v.{name}"))?);
    }
    let join = |t: Tensor<f32>| -> Result<u64> {
        match t.data() {
            [hi, lo] => Ok(((*hi as u64) << 24) | *lo as u64),
            _ => Err(Error::Checkpoint("malformed counter".into())),
        }
    };
    let t = join(take("adam.t".into())?)?;
    let episode = join(take("train.episode".into())?)?;
    let best = take("train.best_val_acc".into())?.data().first().copied().unwrap_or(-1.0) as f64;
    Ok((AdamState { m, v, t }, episode, best))
}

/// Log lines from before `episode`, dropping anything written after the last
/// saved state.
fn truncate_log(path: &Path, episode: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let rec: LogRecord = serde_json::from_str(&line)?;
        if rec.episode < episode {
            kept.push(line);
        }
    }
    let mut out = String::new();
    for line in kept {
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Runs (or resumes) episodic training. Episode `e` is drawn from its own
/// seeded random stream, so a run is a pure function of the config and data
/// and a resumed run continues exactly where the saved one stopped.
pub fn train(
    config: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: Option<&DatasetSplit>,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let names;
    let mut net;
    let mut state;
    let mut start = 0;
    let mut best_acc = -1.0;
    let dir = options.output_dir.as_deref();
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    match dir.filter(|_| options.resume) {
        Some(dir) => {
            net = Network::<f32>::load(&dir.join(LAST_CHECKPOINT))?;
            if net.kind() != config.model_kind {
                return Err(Error::Config(format!(
                    "cannot resume a {} run as {}",
                    net.kind(),
                    config.model_kind
                )));
            }
            names = net.param_names();
            (state, start, best_acc) = load_optimizer(&dir.join(OPTIMIZER_STATE), &names)?;
            truncate_log(&dir.join(TRAIN_LOG), start)?;
        }
        None => {
            net = Network::<f32>::new(config.model_kind, config.width, config.seed);
            names = net.param_names();
            state = AdamState::new(&net.params());
            if let Some(dir) = dir {
                File::create(dir.join(TRAIN_LOG))?;
            }
        }
    }

    let mut log = match dir {
        Some(dir) => Some(BufWriter::new(OpenOptions::new().append(true).create(true).open(dir.join(TRAIN_LOG))?)),
        None => None,
    };
    let spec = config.episode_spec();
    let mut losses = Vec::new();
    let mut best_val = None;
    let mut last_val = None;

    for episode in start..config.max_episodes {
        let ep = episode_at(train_split, spec, config.seed, episode)?;
        let lr = lr_schedule(episode, config);
        let loss = train_step(&mut net, &mut state, &ep, config.l1_factor, lr)? as f64;
        losses.push(loss);

        let done = episode + 1;
        let checkpoint_now = done % config.eval_every == 0 || done == config.max_episodes;
        let mut val_acc = None;
        if checkpoint_now {
            if let Some(val) = val_split.filter(|_| config.val_episodes > 0) {
                let report = evaluate(
                    &ModelClassifier {
                        net: &net,
                        bn: config.bn_mode,
                    },
                    val,
                    config.val_config(),
                )?;
                val_acc = Some(report.mean_accuracy);
                if report.mean_accuracy > best_acc {
                    best_acc = report.mean_accuracy;
                    best_val = Some(report.clone());
                    if let Some(dir) = dir {
                        net.save(&dir.join(BEST_CHECKPOINT))?;
                    }
                }
                last_val = Some(report);
            }
        }
        if let Some(log) = log.as_mut() {
            let rec = LogRecord {
                episode,
                loss,
                lr,
                val_acc,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        }
        if checkpoint_now {
            if let (Some(dir), Some(log)) = (dir, log.as_mut()) {
                log.flush()?;
                net.save(&dir.join(LAST_CHECKPOINT))?;
                save_optimizer(&dir.join(OPTIMIZER_STATE), &state, &names, done, best_acc)?;
                if val_split.is_none() || config.val_episodes == 0 {
                    net.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
    }
    if let Some(mut log) = log {
        log.flush()?;
    }
    Ok(TrainOutcome {
        network: net,
        episodes_run: config.max_episodes.saturating_sub(start),
        best_val,
        last_val,
        losses,
    })
}

#[cfg(test)]
mod tests;
