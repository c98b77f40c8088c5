//! Four-block convolutional embedding shared by the Matching Networks
//! baseline and the cross-modulated variant, plus the FiLM generators of
//! blocks 2-4.

mod checkpoint;
mod forward;
mod head;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{decode_container, encode_container, read_container, write_container, FORMAT_VERSION, MAGIC};
pub use forward::{classify_episode, film_generate, Forward, PairLayout};
pub use head::{cosine_u, matching_probabilities, CosineU};

pub const NUM_BLOCKS: usize = 4;
/// Blocks 2..=4 (1-based) carry a FiLM generator; block 1 never does.
pub const FIRST_MODULATED_BLOCK: usize = 2;
pub const DEFAULT_WIDTH: usize = 64;
pub const BN_MOMENTUM: f64 = 0.9;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Baseline,
    CrossMod,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::CrossMod => "crossmod",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "matching" => Ok(ModelKind::Baseline),
            "crossmod" => Ok(ModelKind::CrossMod),
            other => Err(Error::Config(format!("unknown model {other:?} (expected baseline or crossmod)"))),
        }
    }
}

/// How batch norm is driven during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; observed statistics are reported for running-average updates.
    Train,
    /// Running statistics accumulated during training.
    Eval,
    /// Batch statistics of the episode itself, without updating anything.
    Transductive,
}

impl FromStr for BnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(BnMode::Train),
            "eval" | "running" => Ok(BnMode::Eval),
            "batch" | "transductive" => Ok(BnMode::Transductive),
            other => Err(Error::Config(format!(
                "unknown batch-norm mode {other:?} (expected running or batch)"
            ))),
        }
    }
}

impl BnMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BnMode::Train => "train",
            BnMode::Eval => "running",
            BnMode::Transductive => "batch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<T> {
    pub kernels: Tensor<T>,
    pub conv_bias: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    /// `None` until the first training-mode forward pass.
    pub running: Option<RunningStats<T>>,
}

impl<T: Scalar> ConvBlockParams<T> {
    fn init(rng: &mut ChaCha8Rng, cin: usize, width: usize) -> Self {
        let bound = (6.0 / (9 * cin) as f64).sqrt();
        Self {
            kernels: uniform(rng, &[3, 3, cin, width], bound),
            conv_bias: Tensor::zeros([width]),
            bn_gamma: Tensor::full([width], T::one()),
            bn_beta: Tensor::zeros([width]),
            running: None,
        }
    }
}

/// `G(self, other) = relu(gap([self, other])) · W + b`, and the per-channel
/// post-multipliers gating the resulting modulation.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmGeneratorParams<T> {
    /// `[2C, 2C]`; input rows `0..C` read the modulated branch itself,
    /// rows `C..2C` the paired example.
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub gamma0: Tensor<T>,
    pub beta0: Tensor<T>,
}

impl<T: Scalar> FilmGeneratorParams<T> {
    fn init(rng: &mut ChaCha8Rng, width: usize) -> Self {
        let bound = 1.0 / ((2 * width) as f64).sqrt();
        Self {
            w: uniform(rng, &[2 * width, 2 * width], bound),
            b: uniform(rng, &[2 * width], bound),
            gamma0: Tensor::zeros([width]),
            beta0: Tensor::zeros([width]),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma0.numel()
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Network parameters. A baseline has no generators; a cross-modulation
/// network has one per block from [`FIRST_MODULATED_BLOCK`] on, shared by the
/// support and query branches.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    blocks: Vec<ConvBlockParams<T>>,
    generators: Vec<FilmGeneratorParams<T>>,
}

/// Parameter leaves of one forward pass.
#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub kernels: Var,
    pub conv_bias: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
}

#[derive(Clone, Debug)]
pub struct BoundGenerator {
    pub w: Var,
    pub b: Var,
    pub gamma0: Var,
    pub beta0: Var,
}

#[derive(Clone, Debug)]
pub struct Bound {
    pub blocks: Vec<BoundBlock>,
    pub generators: Vec<BoundGenerator>,
    /// Leaves in [`Network::param_names`] order.
    leaves: Vec<Var>,
}

impl Bound {
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    /// Accumulated leaf gradients in parameter order; zero where the
    /// backward pass did not reach a parameter.
    pub fn gradients<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.leaves
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
            })
            .collect()
    }
}

/// Multiplicative per-channel factors applied to `gamma0`/`beta0` of
/// selected generators for one forward pass. Index 0 is block 2.
#[derive(Clone, Debug, Default)]
pub struct PostMultiplierNoise<T> {
    pub factors: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

/// Batch statistics observed in training mode, in the order they occurred.
#[derive(Clone, Debug, Default)]
pub struct BnObservations {
    pub entries: Vec<(usize, BatchStats)>,
}

impl<T: Scalar> Network<T> {
    pub fn new(kind: ModelKind, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..NUM_BLOCKS)
            .map(|i| ConvBlockParams::init(&mut rng, if i == 0 { IMAGE_CHANNELS } else { width }, width))
            .collect();
        let generators = match kind {
            ModelKind::Baseline => Vec::new(),
            ModelKind::CrossMod => (FIRST_MODULATED_BLOCK..=NUM_BLOCKS)
                .map(|_| FilmGeneratorParams::init(&mut rng, width))
                .collect(),
        };
        Self { blocks, generators }
    }

    pub fn from_parts(blocks: Vec<ConvBlockParams<T>>, generators: Vec<FilmGeneratorParams<T>>) -> Result<Self> {
        if blocks.len() != NUM_BLOCKS {
            return Err(Error::Shape(format!("network needs {NUM_BLOCKS} blocks, got {}", blocks.len())));
        }
        if !generators.is_empty() && generators.len() != NUM_BLOCKS - FIRST_MODULATED_BLOCK + 1 {
            return Err(Error::Shape(format!(
                "cross-modulation needs {} generators, got {}",
                NUM_BLOCKS - FIRST_MODULATED_BLOCK + 1,
                generators.len()
            )));
        }
        let width = blocks[0].kernels.shape()[3];
        for (i, b) in blocks.iter().enumerate() {
            let cin = if i == 0 { IMAGE_CHANNELS } else { width };
            if b.kernels.shape() != [3, 3, cin, width] {
                return Err(Error::Shape(format!(
                    "block{} kernels must be [3,3,{cin},{width}], got {:?}",
                    i + 1,
                    b.kernels.shape()
                )));
            }
            for (name, t) in [("conv_bias", &b.conv_bias), ("bn_gamma", &b.bn_gamma), ("bn_beta", &b.bn_beta)] {
                if t.shape() != [width] {
                    return Err(Error::Shape(format!("block{}.{name} must be [{width}]", i + 1)));
                }
            }
        }
        for (i, g) in generators.iter().enumerate() {
            let ok = g.w.shape() == [2 * width, 2 * width]
                && g.b.shape() == [2 * width]
                && g.gamma0.shape() == [width]
                && g.beta0.shape() == [width];
            if !ok {
                return Err(Error::Shape(format!(
                    "gen{} shapes do not match width {width}",
                    i + FIRST_MODULATED_BLOCK
                )));
            }
        }
        Ok(Self { blocks, generators })
    }

    pub fn kind(&self) -> ModelKind {
        if self.generators.is_empty() {
            ModelKind::Baseline
        } else {
            ModelKind::CrossMod
        }
    }

    pub fn width(&self) -> usize {
        self.blocks[0].kernels.shape()[3]
    }

    pub fn blocks(&self) -> &[ConvBlockParams<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ConvBlockParams<T>] {
        &mut self.blocks
    }

    /// Generators for blocks 2, 3 and 4 (empty for the baseline).
    pub fn generators(&self) -> &[FilmGeneratorParams<T>] {
        &self.generators
    }

    pub fn generators_mut(&mut self) -> &mut [FilmGeneratorParams<T>] {
        &mut self.generators
    }

    /// Generator of a 1-based block number, if that block is modulated.
    pub fn generator(&self, block: usize) -> Option<&FilmGeneratorParams<T>> {
        block
            .checked_sub(FIRST_MODULATED_BLOCK)
            .and_then(|i| self.generators.get(i))
    }

    /// Embedding length for square inputs of side `resolution`.
    pub fn embedding_dim(&self, resolution: usize) -> usize {
        let side = (0..NUM_BLOCKS).fold(resolution, |s, _| s / 2);
        side * side * self.width()
    }

    /// Same network with every post-multiplier zeroed, i.e. the baseline
    /// computation carried out by the cross-modulation machinery.
    pub fn with_modulation_gated_off(&self) -> Self {
        let mut out = self.clone();
        for g in &mut out.generators {
            g.gamma0.fill(T::zero());
            g.beta0.fill(T::zero());
        }
        out
    }

    /// The convolutional blocks alone, as a baseline network.
    pub fn baseline_part(&self) -> Self {
        Self {
            blocks: self.blocks.clone(),
            generators: Vec::new(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=NUM_BLOCKS {
            for p in ["kernels", "conv_bias", "bn_gamma", "bn_beta"] {
                names.push(format!("block{i}.{p}"));
            }
        }
        for i in 0..self.generators.len() {
            for p in ["W", "b", "gamma0", "beta0"] {
                names.push(format!("gen{}.{p}", i + FIRST_MODULATED_BLOCK));
            }
        }
        names
    }

    /// Trainable tensors in [`Self::param_names`] order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.kernels, &b.conv_bias, &b.bn_gamma, &b.bn_beta]);
        }
        for g in &self.generators {
            out.extend([&g.w, &g.b, &g.gamma0, &g.beta0]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.kernels, &mut b.conv_bias, &mut b.bn_gamma, &mut b.bn_beta]);
        }
        for g in &mut self.generators {
            out.extend([&mut g.w, &mut g.b, &mut g.gamma0, &mut g.beta0]);
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        let idx = self.param_names().iter().position(|n| n == name)?;
        Some(self.params()[idx])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let idx = self.param_names().iter().position(|n| n == name)?;
        Some(self.params_mut().swap_remove(idx))
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Records the parameters as tape leaves. Noise factors, when given,
    /// scale `gamma0`/`beta0` of the selected generators for this pass only.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, noise: Option<&PostMultiplierNoise<T>>) -> Result<Bound> {
        let mut leaves = Vec::new();
        let mut leaf = |tape: &mut Tape<T>, t: &Tensor<T>| {
            let v = tape.leaf(t.clone(), trainable);
            leaves.push(v);
            v
        };
        let blocks: Vec<BoundBlock> = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                kernels: leaf(tape, &b.kernels),
                conv_bias: leaf(tape, &b.conv_bias),
                bn_gamma: leaf(tape, &b.bn_gamma),
                bn_beta: leaf(tape, &b.bn_beta),
            })
            .collect();
        let mut generators = Vec::with_capacity(self.generators.len());
        for (i, g) in self.generators.iter().enumerate() {
            let w = leaf(tape, &g.w);
            let b = leaf(tape, &g.b);
            let mut gamma0 = leaf(tape, &g.gamma0);
            let mut beta0 = leaf(tape, &g.beta0);
            if let Some(Some((gn, bn))) = noise.map(|n| n.factors.get(i).cloned().flatten()) {
                gamma0 = tape.mul_const(gamma0, &gn)?;
                beta0 = tape.mul_const(beta0, &bn)?;
            }
            generators.push(BoundGenerator { w, b, gamma0, beta0 });
        }
        Ok(Bound {
            blocks,
            generators,
            leaves,
        })
    }

    /// Folds training-mode batch statistics into the running averages with
    /// momentum [`BN_MOMENTUM`]. Never-updated statistics start at mean 0,
    /// variance 1.
    pub fn update_running_stats(&mut self, observations: &BnObservations) {
        for (block, stats) in &observations.entries {
            let b = &mut self.blocks[*block];
            let width = stats.mean.len();
            let running = b.running.get_or_insert_with(|| RunningStats {
                mean: vec![T::zero(); width],
                var: vec![T::one(); width],
            });
            for c in 0..width {
                running.mean[c] = T::of(BN_MOMENTUM * running.mean[c].as_f64() + (1.0 - BN_MOMENTUM) * stats.mean[c]);
                running.var[c] = T::of(BN_MOMENTUM * running.var[c].as_f64() + (1.0 - BN_MOMENTUM) * stats.var[c]);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlockParams {
                    kernels: b.kernels.cast(),
                    conv_bias: b.conv_bias.cast(),
                    bn_gamma: b.bn_gamma.cast(),
                    bn_beta: b.bn_beta.cast(),
                    running: b.running.as_ref().map(|r| RunningStats {
                        mean: r.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                        var: r.var.iter().map(|v| U::of(v.as_f64())).collect(),
                    }),
                })
                .collect(),
            generators: self
                .generators
                .iter()
                .map(|g| FilmGeneratorParams {
                    w: g.w.cast(),
                    b: g.b.cast(),
                    gamma0: g.gamma0.cast(),
                    beta0: g.beta0.cast(),
                })
                .collect(),
        }
    }

    /// Order-sensitive FNV-1a digest of every stored value, for detecting
    /// accidental mutation.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: f64| {
            for byte in x.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for t in self.params() {
            t.data().iter().for_each(|v| feed(v.as_f64()));
        }
        for b in &self.blocks {
            if let Some(r) = &b.running {
                r.mean.iter().chain(&r.var).for_each(|v| feed(v.as_f64()));
            }
        }
        h
    }
}
