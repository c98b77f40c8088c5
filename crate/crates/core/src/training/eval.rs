use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, DatasetSplit, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::{classify_episode, BnMode, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mean")]
    pub mean_accuracy: f64,
    #[serde(rename = "ci95")]
    pub ci95_halfwidth: f64,
    #[serde(rename = "n")]
    pub episode_count: usize,
    #[serde(rename = "per_episode")]
    pub per_episode_accuracies: Vec<f64>,
    pub seed: u64,
}

impl EvalReport {
    /// Mean and `1.96 * s / sqrt(n)`, with `s` the sample (n - 1) standard
    /// deviation; a single episode has halfwidth 0.
    pub fn from_accuracies(accuracies: Vec<f64>, seed: u64) -> Self {
        let n = accuracies.len();
        let mean = if n == 0 { 0.0 } else { accuracies.iter().sum::<f64>() / n as f64 };
        let halfwidth = if n < 2 {
            0.0
        } else {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Z95 * var.sqrt() / (n as f64).sqrt()
        };
        Self {
            mean_accuracy: mean,
            ci95_halfwidth: halfwidth,
            episode_count: n,
            per_episode_accuracies: accuracies,
            seed,
        }
    }

    /// `mean ± ci95` in percent.
    pub fn summary(&self) -> String {
        format!(
            "{:.2}% ± {:.2}% (n={})",
            100.0 * self.mean_accuracy,
            100.0 * self.ci95_halfwidth,
            self.episode_count
        )
    }
}

/// Anything that produces per-query class distributions `[T, way]` for an
/// episode. `index` is the episode's position in the evaluation run, for
/// classifiers that draw randomness per episode.
pub trait EpisodeClassifier: Sync {
    fn classify(&self, episode: &Episode, index: u64) -> Result<Tensor<f32>>;
}

/// Plain network evaluation under a fixed batch-norm mode.
pub struct ModelClassifier<'a, T> {
    pub net: &'a Network<T>,
    pub bn: BnMode,
}

impl<T: Scalar> EpisodeClassifier for ModelClassifier<'_, T> {
    fn classify(&self, episode: &Episode, _index: u64) -> Result<Tensor<f32>> {
        Ok(classify_episode(self.net, episode, self.bn, None)?.cast())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub spec: EpisodeSpec,
    pub seed: u64,
    /// Parallel episode workers; 0 uses rayon's default.
    pub workers: usize,
}

/// The `index`-th episode of a seeded run: an independent ChaCha stream per
/// episode, so episodes do not depend on evaluation order.
pub fn episode_at(split: &DatasetSplit, spec: EpisodeSpec, seed: u64, index: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    sample_episode(split, spec, &mut rng)
}

/// Fraction of rows whose argmax (first index on ties) equals the label.
pub fn accuracy(probs: &Tensor<f32>, labels: &[usize]) -> f64 {
    let way = probs.shape().get(1).copied().unwrap_or(0);
    if labels.is_empty() || way == 0 {
        return 0.0;
    }
    let correct = probs
        .data()
        .chunks(way)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            best == label
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Accuracy over `config.episodes` seeded episodes. Episodes run in
/// parallel; results are gathered in episode order, so the report does not
/// depend on the worker count.
pub fn evaluate<C: EpisodeClassifier + ?Sized>(classifier: &C, split: &DatasetSplit, config: EvalConfig) -> Result<EvalReport> {
    let run = || -> Result<Vec<f64>> {
        (0..config.episodes as u64)
            .into_par_iter()
            .map(|i| {
                let ep = episode_at(split, config.spec, config.seed, i)?;
                let probs = classifier.classify(&ep, i)?;
                Ok(accuracy(&probs, &ep.query_labels()))
            })
            .collect()
    };
    let accuracies = if config.workers == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.workers)))?
            .install(run)?
    };
    Ok(EvalReport::from_accuracies(accuracies, config.seed))
}
