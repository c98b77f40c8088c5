//! Procedurally generated datasets for desk-scale experiments.
//!
//! Templates are piecewise-constant on an 8x8 grid of cells so that they
//! survive four rounds of 2x2 pooling.

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassData, DatasetSplit, EpisodeTransform, Image, SplitName};
use crate::error::{Error, Result};

const GRID: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticMode {
    /// Each class is one fixed RGB template plus per-example pixel noise.
    Separable,
    /// Each class is a single-channel pattern stored in the first colour
    /// channel; the other two carry fresh distractor patterns from the same
    /// distribution. Episodes rotate the channels of all their images by one
    /// random shift, so the informative channel changes from episode to
    /// episode and can only be told by comparing images.
    Pairwise,
}

impl FromStr for SyntheticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(SyntheticMode::Separable),
            "pairwise" => Ok(SyntheticMode::Pairwise),
            other => Err(Error::Config(format!(
                "unknown synthetic mode {other:?} (expected separable or pairwise)"
            ))),
        }
    }
}

impl SyntheticMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticMode::Separable => "separable",
            SyntheticMode::Pairwise => "pairwise",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub resolution: usize,
    pub mode: SyntheticMode,
    pub seed: u64,
    pub noise_std: f64,
    /// Class ids (and labels) start here, so differently seeded splits can be
    /// kept disjoint.
    pub first_class_id: usize,
    pub split: SplitName,
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, per_class: usize, resolution: usize, mode: SyntheticMode, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            resolution,
            mode,
            seed,
            noise_std: 0.1,
            first_class_id: 0,
            split: SplitName::Train,
        }
    }

    pub fn with_split(mut self, split: SplitName, first_class_id: usize) -> Self {
        self.split = split;
        self.first_class_id = first_class_id;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!(
                "synthetic resolution must be a positive multiple of 16, got {}",
                self.resolution
            )));
        }
        if self.num_classes == 0 || self.per_class == 0 {
            return Err(Error::Config("synthetic dataset needs at least one class and example".into()));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Per-class noiseless templates, HWC values in `[0, 1]`. For pairwise
    /// mode these are single-channel `H*W` patterns.
    pub fn templates(&self) -> Result<Vec<Vec<f32>>> {
        self.validate()?;
        let mut rng = self.rng();
        Ok(self.draw_templates(&mut rng))
    }

    fn draw_templates(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        let channels = match self.mode {
            SyntheticMode::Separable => 3,
            SyntheticMode::Pairwise => 1,
        };
        (0..self.num_classes)
            .map(|_| grid_pattern(rng, self.resolution, channels))
            .collect()
    }

    pub fn generate(&self) -> Result<DatasetSplit> {
        self.validate()?;
        let mut rng = self.rng();
        let templates = self.draw_templates(&mut rng);
        let noise = Normal::new(0.0, self.noise_std).expect("validated std");
        let res = self.resolution;
        let mut classes = Vec::with_capacity(self.num_classes);
        for (c, template) in templates.iter().enumerate() {
            let mut images = Vec::with_capacity(self.per_class);
            for _ in 0..self.per_class {
                let clean = match self.mode {
                    SyntheticMode::Separable => template.clone(),
                    SyntheticMode::Pairwise => {
                        let d1 = grid_pattern(&mut rng, res, 1);
                        let d2 = grid_pattern(&mut rng, res, 1);
                        (0..res * res).flat_map(|i| [template[i], d1[i], d2[i]]).collect()
                    }
                };
                let noisy: Vec<f32> = clean
                    .iter()
                    .map(|&v| v + noise.sample(&mut rng) as f32)
                    .collect();
                images.push(Arc::new(Image::from_unit(res, res, &noisy)?));
            }
            let id = self.first_class_id + c;
            classes.push(ClassData {
                id,
                label: format!("syn{id:04}"),
                images,
            });
        }
        let transform = match self.mode {
            SyntheticMode::Separable => EpisodeTransform::None,
            SyntheticMode::Pairwise => EpisodeTransform::RotateChannels,
        };
        Ok(DatasetSplit::new(self.split, res, classes)?.with_transform(transform))
    }
}

/// Random piecewise-constant pattern on a GRID x GRID lattice, values in
/// `[0.1, 0.9]`, laid out HWC with `channels` channels.
fn grid_pattern(rng: &mut ChaCha8Rng, res: usize, channels: usize) -> Vec<f32> {
    let cells: Vec<f32> = (0..GRID * GRID * channels)
        .map(|_| rng.random_range(0.1f32..0.9))
        .collect();
    let cell = res / GRID;
    let mut out = Vec::with_capacity(res * res * channels);
    for y in 0..res {
        for x in 0..res {
            let base = ((y / cell) * GRID + x / cell) * channels;
            out.extend_from_slice(&cells[base..base + channels]);
        }
    }
    out
}

pub fn synthetic_dataset(
    num_classes: usize,
    per_class: usize,
    resolution: usize,
    mode: SyntheticMode,
    seed: u64,
) -> Result<DatasetSplit> {
    SyntheticConfig::new(num_classes, per_class, resolution, mode, seed).generate()
}
