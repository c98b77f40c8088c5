//! Datasets, images, and N-way K-shot episode sampling.

mod disk;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use disk::{load_miniimagenet, load_split, write_split, MINIIMAGENET_RESOLUTION};
pub use synthetic::{synthetic_dataset, SyntheticConfig, SyntheticMode};

/// 8-bit RGB image, row-major HWC.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    /// Quantizes `[0, 1]` values (clamped) to 8 bits.
    pub fn from_unit(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn unit_values<T: Scalar>(&self) -> impl Iterator<Item = T> + '_ {
        self.pixels.iter().map(|&p| T::of(p as f64 / 255.0))
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new([self.height, self.width, 3], self.unit_values().collect())
            .expect("image buffer matches its extents")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassData {
    pub id: usize,
    pub label: String,
    pub images: Vec<Arc<Image>>,
}

/// Applied to all images of an episode once it has been sampled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EpisodeTransform {
    #[default]
    None,
    /// One random cyclic rotation of the colour channels per episode, shared
    /// by every support and query image.
    RotateChannels,
}

impl EpisodeTransform {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeTransform::None => "none",
            EpisodeTransform::RotateChannels => "rotate-channels",
        }
    }
}

impl FromStr for EpisodeTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EpisodeTransform::None),
            "rotate-channels" => Ok(EpisodeTransform::RotateChannels),
            other => Err(Error::Config(format!("unknown episode transform {other:?}"))),
        }
    }
}

/// One split of a dataset: a set of classes and their images, all at the
/// same square resolution.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    name: SplitName,
    resolution: usize,
    classes: Vec<ClassData>,
    transform: EpisodeTransform,
}

impl DatasetSplit {
    pub fn new(name: SplitName, resolution: usize, classes: Vec<ClassData>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for class in &classes {
            if !ids.insert(class.id) {
                return Err(Error::InsufficientData(format!("duplicate class id {}", class.id)));
            }
            if let Some(bad) = class
                .images
                .iter()
                .find(|img| img.height() != resolution || img.width() != resolution)
            {
                return Err(Error::Shape(format!(
                    "class {} has a {}x{} image in a {resolution}x{resolution} split",
                    class.label,
                    bad.height(),
                    bad.width()
                )));
            }
        }
        Ok(Self {
            name,
            resolution,
            classes,
            transform: EpisodeTransform::None,
        })
    }

    pub fn with_transform(mut self, transform: EpisodeTransform) -> Self {
        self.transform = transform;
        self
    }

    pub fn transform(&self) -> EpisodeTransform {
        self.transform
    }

    pub fn name(&self) -> SplitName {
        self.name
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn classes(&self) -> &[ClassData] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_examples(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    /// Fails if the two splits share a class label.
    pub fn check_disjoint(&self, other: &DatasetSplit) -> Result<()> {
        let mine: BTreeSet<&str> = self.classes.iter().map(|c| c.label.as_str()).collect();
        if let Some(shared) = other.classes.iter().find(|c| mine.contains(c.label.as_str())) {
            return Err(Error::InsufficientData(format!(
                "class {} appears in both {} and {}",
                shared.label, self.name, other.name
            )));
        }
        Ok(())
    }
}

/// One image and its class, plus its position in the class list so
/// instance identity can be compared.
#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub class_id: usize,
    pub index: usize,
    pub image: Arc<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
}

/// A support set of `way * shot` examples and a query set of
/// `way * queries_per_class`, both ordered class by class.
#[derive(Clone, Debug)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub support: Vec<LabeledExample>,
    pub query: Vec<LabeledExample>,
    /// Original class id to episode-local label.
    pub episode_labels: BTreeMap<usize, usize>,
}

impl Episode {
    fn local(&self, ex: &LabeledExample) -> usize {
        self.episode_labels[&ex.class_id]
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|e| self.local(e)).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|e| self.local(e)).collect()
    }

    pub fn support_batch<T: Scalar>(&self) -> Tensor<T> {
        batch_of(&self.support)
    }

    pub fn query_batch<T: Scalar>(&self) -> Tensor<T> {
        batch_of(&self.query)
    }

    pub fn resolution(&self) -> usize {
        self.support.first().map(|e| e.image.height()).unwrap_or(0)
    }
}

/// Stacks example images into a `[B, H, W, 3]` tensor with values in `[0, 1]`.
pub fn batch_of<T: Scalar>(examples: &[LabeledExample]) -> Tensor<T> {
    let (h, w) = examples
        .first()
        .map(|e| (e.image.height(), e.image.width()))
        .unwrap_or((0, 0));
    let mut data = Vec::with_capacity(examples.len() * h * w * 3);
    for e in examples {
        data.extend(e.image.unit_values::<T>());
    }
    Tensor::new([examples.len(), h, w, 3], data).expect("split images share one resolution")
}

/// Draws `way` classes uniformly without replacement, then `shot +
/// queries_per_class` distinct examples of each; the first `shot` go to the
/// support set and the rest to the query set.
pub fn sample_episode<R: Rng + ?Sized>(split: &DatasetSplit, spec: EpisodeSpec, rng: &mut R) -> Result<Episode> {
    let EpisodeSpec {
        way,
        shot,
        queries_per_class,
    } = spec;
    if way == 0 || shot == 0 {
        return Err(Error::Config("episodes need way >= 1 and shot >= 1".into()));
    }
    if split.num_classes() < way {
        return Err(Error::InsufficientData(format!(
            "split {} has {} classes, a {way}-way episode needs {way}",
            split.name,
            split.num_classes()
        )));
    }
    let per_class = shot + queries_per_class;
    let chosen = index::sample(rng, split.num_classes(), way);
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries_per_class);
    let mut episode_labels = BTreeMap::new();
    for (local, class_pos) in chosen.iter().enumerate() {
        let class = &split.classes[class_pos];
        if class.images.len() < per_class {
            return Err(Error::InsufficientData(format!(
                "class {} (id {}) has {} examples, the episode needs {per_class}",
                class.label,
                class.id,
                class.images.len()
            )));
        }
        episode_labels.insert(class.id, local);
        let picks = index::sample(rng, class.images.len(), per_class);
        for (n, idx) in picks.iter().enumerate() {
            let example = LabeledExample {
                class_id: class.id,
                index: idx,
                image: Arc::clone(&class.images[idx]),
            };
            if n < shot {
                support.push(example);
            } else {
                query.push(example);
            }
        }
    }
    // Class-major order within each set.
    let order = |v: &mut Vec<LabeledExample>| v.sort_by_key(|e| episode_labels[&e.class_id]);
    order(&mut support);
    order(&mut query);
    if split.transform == EpisodeTransform::RotateChannels {
        let shift = rng.random_range(0..3);
        for e in support.iter_mut().chain(query.iter_mut()) {
            e.image = Arc::new(rotate_channels(&e.image, shift));
        }
    }
    Ok(Episode {
        way,
        shot,
        support,
        query,
        episode_labels,
    })
}

/// Moves channel `c` to `(c + shift) % 3`.
fn rotate_channels(img: &Image, shift: usize) -> Image {
    if shift % 3 == 0 {
        return img.clone();
    }
    let mut out = vec![0u8; img.pixels().len()];
    for (src, dst) in img.pixels().chunks_exact(3).zip(out.chunks_exact_mut(3)) {
        for c in 0..3 {
            dst[(c + shift) % 3] = src[c];
        }
    }
    Image::new(img.height(), img.width(), out).expect("same extents")
}
