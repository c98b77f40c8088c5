//! Post-hoc analyses of a trained cross-modulation network: noise ablation
//! of the post-multipliers, their magnitude distribution, and the
//! self/cross split of generator weight norms.

mod export;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Episode};
use crate::error::{Error, Result};
use crate::model::{classify_episode, BnMode, ModelKind, Network, PostMultiplierNoise, FIRST_MODULATED_BLOCK, NUM_BLOCKS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{evaluate, EpisodeClassifier, EvalConfig, EvalReport};

pub use export::{
    ablation_csv, export_report, parse_ablation_csv, parse_norm_csv, parse_stats_csv, AblationRow, Format, Report,
};

/// Multiplicative `N(mean, stddev²)` noise on `γ0`/`β0` of the targeted
/// (1-based) blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub target_blocks: Vec<usize>,
    pub mean: f64,
    pub stddev: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(target_blocks: Vec<usize>, stddev: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            target_blocks,
            mean: 1.0,
            stddev,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stddev >= 0.0 && self.stddev.is_finite()) || !self.mean.is_finite() {
            return Err(Error::Config(format!("invalid noise N({}, {}²)", self.mean, self.stddev)));
        }
        if let Some(b) = self
            .target_blocks
            .iter()
            .find(|&&b| !(FIRST_MODULATED_BLOCK..=NUM_BLOCKS).contains(&b))
        {
            return Err(Error::Config(format!(
                "block {b} carries no modulation (expected {FIRST_MODULATED_BLOCK}..={NUM_BLOCKS})"
            )));
        }
        Ok(())
    }

    /// Fresh per-channel factors for one episode's forward pass. Draws come
    /// from a stream of their own, so they never disturb episode sampling.
    pub fn draw<T: Scalar>(&self, width: usize, episode_index: u64) -> Result<PostMultiplierNoise<T>> {
        let normal = Normal::new(self.mean, self.stddev)
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(episode_index);
        let mut factors = Vec::new();
        for block in FIRST_MODULATED_BLOCK..=NUM_BLOCKS {
            if self.target_blocks.contains(&block) {
                let mut draw = || {
                    let data = (0..width).map(|_| T::of(normal.sample(&mut rng))).collect();
                    Tensor::new([width], data)
                };
                let gamma = draw()?;
                let beta = draw()?;
                factors.push(Some((gamma, beta)));
            } else {
                factors.push(None);
            }
        }
        Ok(PostMultiplierNoise { factors })
    }
}

struct NoisyClassifier<'a, T> {
    net: &'a Network<T>,
    bn: BnMode,
    noise: &'a NoiseSpec,
}

impl<T: Scalar> EpisodeClassifier for NoisyClassifier<'_, T> {
    fn classify(&self, episode: &Episode, index: u64) -> Result<Tensor<f32>> {
        let noise = self.noise.draw::<T>(self.net.width(), index)?;
        Ok(classify_episode(self.net, episode, self.bn, Some(&noise))?.cast())
    }
}

/// Evaluation with the post-multipliers of the targeted blocks scaled by
/// per-episode noise. The network itself is never modified.
pub fn ablate_with_noise<T: Scalar>(
    net: &Network<T>,
    split: &DatasetSplit,
    spec: &NoiseSpec,
    config: EvalConfig,
    bn: BnMode,
) -> Result<EvalReport> {
    if net.kind() != ModelKind::CrossMod {
        return Err(Error::Unsupported("no modulation to perturb: model is a baseline".into()));
    }
    spec.validate()?;
    evaluate(&NoisyClassifier { net, bn, noise: spec }, split, config)
}

/// Five-number summary plus mean of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    /// Quartiles by linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                min: 0.0,
                q1: 0.0,
                median: 0.0,
                q3: 0.0,
                max: 0.0,
                mean: 0.0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStats {
    pub block: usize,
    /// `gamma0` or `beta0`.
    pub param: String,
    #[serde(flatten)]
    pub summary: Summary,
    /// Absolute values per channel.
    pub values: Vec<f64>,
}

/// `|γ0|` and `|β0|` distributions per modulated block.
pub fn postmultiplier_stats<T: Scalar>(net: &Network<T>) -> Result<Vec<ParamStats>> {
    if net.kind() != ModelKind::CrossMod {
        return Err(Error::Unsupported("baseline has no post-multipliers".into()));
    }
    let mut out = Vec::new();
    for (i, g) in net.generators().iter().enumerate() {
        for (param, t) in [("gamma0", &g.gamma0), ("beta0", &g.beta0)] {
            let values: Vec<f64> = t.data().iter().map(|v| v.as_f64().abs()).collect();
            out.push(ParamStats {
                block: i + FIRST_MODULATED_BLOCK,
                param: param.to_string(),
                summary: Summary::of(&values),
                values,
            });
        }
    }
    Ok(out)
}

/// Mean `|γ0|` over every modulated block and channel.
pub fn mean_abs_gamma0<T: Scalar>(net: &Network<T>) -> f64 {
    let all: Vec<f64> = net
        .generators()
        .iter()
        .flat_map(|g| g.gamma0.data().iter().map(|v| v.as_f64().abs()))
        .collect();
    if all.is_empty() {
        0.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNorms {
    pub block: usize,
    pub self_norm_mean: f64,
    pub cross_norm_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub blocks: Vec<BlockNorms>,
}

/// Mean L2 norm of the outgoing weight rows of the first `c` inputs (the
/// block's own features) and of the last `c` (the paired example's).
pub fn weight_norm_split<T: Scalar>(w: &Tensor<T>) -> Result<(f64, f64)> {
    let [rows, cols] = match *w.shape() {
        [r, c] if r == c && r % 2 == 0 && r > 0 => [r, c],
        ref s => return Err(Error::Shape(format!("generator weight must be [2C, 2C], got {s:?}"))),
    };
    let c = rows / 2;
    let norms: Vec<f64> = w
        .data()
        .chunks(cols)
        .map(|row| row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok((mean(&norms[..c]), mean(&norms[c..])))
}

pub fn generator_norm_decomposition<T: Scalar>(net: &Network<T>) -> Result<NormReport> {
    if net.kind() != ModelKind::CrossMod {
        return Err(Error::Unsupported("baseline has no FiLM generators".into()));
    }
    let blocks = net
        .generators()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let (self_norm_mean, cross_norm_mean) = weight_norm_split(&g.w)?;
            Ok(BlockNorms {
                block: i + FIRST_MODULATED_BLOCK,
                self_norm_mean,
                cross_norm_mean,
            })
        })
        .collect::<Result<_>>()?;
    Ok(NormReport { blocks })
}
