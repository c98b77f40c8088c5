//! Flat `key = value` run configuration. Keys may carry dotted sections
//! (`dataset.root = data/`); a `[section]` header prefixes the keys below it,
//! so simple TOML files parse too. Later assignments override earlier ones.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_miniimagenet, load_split, DatasetSplit, SplitName, SyntheticConfig, SyntheticMode};
use crate::error::{Error, Result};
use crate::model::{BnMode, ModelKind};
use crate::training::{default_train_queries, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    MiniImageNet,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "miniimagenet" => Ok(DatasetKind::MiniImageNet),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!("unknown dataset kind {other:?} (miniimagenet or synthetic)"))),
        }
    }
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::MiniImageNet => "miniimagenet",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub way: usize,
    pub shot: usize,
    /// Training queries per class; `None` means the per-model default.
    pub queries_per_class: Option<usize>,
    pub lr_initial: f64,
    pub lr_halving_period: u64,
    pub l1_factor: f64,
    pub max_episodes: u64,
    pub eval_every: u64,
    pub val_episodes: usize,
    pub seed: u64,
    pub width: usize,
    pub bn_mode: BnMode,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub dataset_kind: DatasetKind,
    pub dataset_root: Option<PathBuf>,
    /// Image side; miniImageNet is always 84.
    pub resolution: usize,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_mode: SyntheticMode,
    /// Seed of generated data, independent of the run seed.
    pub dataset_seed: u64,
    pub eval_episodes: usize,
    pub eval_queries_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::new(ModelKind::Baseline);
        Self {
            model: ModelKind::Baseline,
            way: t.way,
            shot: t.shot,
            queries_per_class: None,
            lr_initial: t.lr_initial,
            lr_halving_period: t.lr_halving_period,
            l1_factor: t.l1_factor,
            max_episodes: t.max_episodes,
            eval_every: t.eval_every,
            val_episodes: t.val_episodes,
            seed: 0,
            width: t.width,
            bn_mode: BnMode::Eval,
            workers: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset_kind: DatasetKind::MiniImageNet,
            dataset_root: None,
            resolution: 84,
            synthetic_classes: 20,
            synthetic_per_class: 20,
            synthetic_mode: SyntheticMode::Separable,
            dataset_seed: 0,
            eval_episodes: 1000,
            eval_queries_per_class: 15,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl RunConfig {
    /// Every key accepted by [`Self::set`].
    pub const KEYS: &'static [&'static str] = &[
        "model",
        "way",
        "shot",
        "queries_per_class",
        "lr_initial",
        "lr_halving_period",
        "l1_factor",
        "max_episodes",
        "eval_every",
        "val_episodes",
        "seed",
        "width",
        "bn_mode",
        "workers",
        "output_dir",
        "dataset.kind",
        "dataset.root",
        "dataset.resolution",
        "dataset.classes",
        "dataset.per_class",
        "dataset.mode",
        "dataset.seed",
        "eval.episodes",
        "eval.queries_per_class",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = unquote(value);
        match key {
            "model" => self.model = v.parse()?,
            "way" => self.way = parse(key, v)?,
            "shot" => self.shot = parse(key, v)?,
            "queries_per_class" => self.queries_per_class = Some(parse(key, v)?),
            "lr_initial" => self.lr_initial = parse(key, v)?,
            "lr_halving_period" => self.lr_halving_period = parse(key, v)?,
            "l1_factor" => self.l1_factor = parse(key, v)?,
            "max_episodes" => self.max_episodes = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "val_episodes" => self.val_episodes = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "bn_mode" => self.bn_mode = v.parse()?,
            "workers" => self.workers = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "dataset.kind" => self.dataset_kind = v.parse()?,
            "dataset.root" => self.dataset_root = Some(PathBuf::from(v)),
            "dataset.resolution" => self.resolution = parse(key, v)?,
            "dataset.classes" => self.synthetic_classes = parse(key, v)?,
            "dataset.per_class" => self.synthetic_per_class = parse(key, v)?,
            "dataset.mode" => self.synthetic_mode = v.parse()?,
            "dataset.seed" => self.dataset_seed = parse(key, v)?,
            "eval.episodes" => self.eval_episodes = parse(key, v)?,
            "eval.queries_per_class" => self.eval_queries_per_class = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`, returning the keys it assigned.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut assigned = Vec::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = format!("{}.", name.trim());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let key = format!("{section}{}", k.trim());
            self.set(&key, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
            assigned.push(key);
        }
        Ok(assigned)
    }

    /// Defaults overlaid with a config file; also returns the keys the file set.
    pub fn from_file(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::default();
        let keys = c.apply_text(&text)?;
        Ok((c, keys))
    }

    /// The requested split: read from `dataset.root` when set, otherwise
    /// (synthetic only) generated in memory. Generated splits use disjoint
    /// class ids and their own template seeds.
    pub fn load_dataset(&self, split: SplitName) -> Result<DatasetSplit> {
        match (&self.dataset_root, self.dataset_kind) {
            (Some(root), kind) => {
                if !root.is_dir() {
                    return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
                }
                match kind {
                    DatasetKind::MiniImageNet => load_miniimagenet(root, split),
                    DatasetKind::Synthetic => load_split(root, split, self.resolution, None),
                }
            }
            (None, DatasetKind::Synthetic) => synthetic_split(
                self.synthetic_classes,
                self.synthetic_per_class,
                self.resolution,
                self.synthetic_mode,
                self.dataset_seed,
                split,
            ),
            (None, DatasetKind::MiniImageNet) => Err(Error::Config(
                "dataset.root is required for miniimagenet".into(),
            )),
        }
    }

    pub fn train_queries(&self) -> usize {
        self.queries_per_class.unwrap_or_else(|| default_train_queries(self.model))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model_kind: self.model,
            way: self.way,
            shot: self.shot,
            queries_per_class: self.train_queries(),
            lr_initial: self.lr_initial,
            lr_halving_period: self.lr_halving_period,
            l1_factor: self.l1_factor,
            max_episodes: self.max_episodes,
            eval_every: self.eval_every,
            val_episodes: self.val_episodes,
            val_queries_per_class: self.eval_queries_per_class,
            seed: self.seed,
            width: self.width,
            bn_mode: self.bn_mode,
            workers: self.workers,
        }
    }

    /// Every key with its effective value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let path = |p: &Path| format!("\"{}\"", p.display());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model", format!("\"{}\"", self.model));
        kv("way", self.way.to_string());
        kv("shot", self.shot.to_string());
        kv("queries_per_class", self.train_queries().to_string());
        kv("lr_initial", self.lr_initial.to_string());
        kv("lr_halving_period", self.lr_halving_period.to_string());
        kv("l1_factor", self.l1_factor.to_string());
        kv("max_episodes", self.max_episodes.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("val_episodes", self.val_episodes.to_string());
        kv("seed", self.seed.to_string());
        kv("width", self.width.to_string());
        kv("bn_mode", format!("\"{}\"", self.bn_mode.as_str()));
        kv("workers", self.workers.to_string());
        kv("output_dir", path(&self.output_dir));
        kv("dataset.kind", format!("\"{}\"", self.dataset_kind.as_str()));
        if let Some(root) = &self.dataset_root {
            kv("dataset.root", path(root));
        }
        kv("dataset.resolution", self.resolution.to_string());
        kv("dataset.classes", self.synthetic_classes.to_string());
        kv("dataset.per_class", self.synthetic_per_class.to_string());
        kv("dataset.mode", format!("\"{}\"", self.synthetic_mode.as_str()));
        kv("dataset.seed", self.dataset_seed.to_string());
        kv("eval.episodes", self.eval_episodes.to_string());
        kv("eval.queries_per_class", self.eval_queries_per_class.to_string());
        s
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

fn split_index(split: SplitName) -> usize {
    match split {
        SplitName::Train => 0,
        SplitName::Val => 1,
        SplitName::Test => 2,
    }
}

/// One split of a generated dataset family: class ids start at
/// `index * classes` and templates come from a split-specific seed.
pub fn synthetic_split(
    classes: usize,
    per_class: usize,
    resolution: usize,
    mode: SyntheticMode,
    seed: u64,
    split: SplitName,
) -> Result<DatasetSplit> {
    let i = split_index(split);
    SyntheticConfig::new(
        classes,
        per_class,
        resolution,
        mode,
        seed.wrapping_add((i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
    )
    .with_split(split, i * classes)
    .generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_training_setup() {
        let c = RunConfig::default();
        assert_eq!(c.train_queries(), 15);
        assert_eq!((c.eval_episodes, c.eval_queries_per_class), (1000, 15));
        let mut x = c.clone();
        x.set("model", "crossmod").unwrap();
        assert_eq!(x.train_queries(), 5);
        x.set("queries_per_class", "15").unwrap();
        assert_eq!(x.train_queries(), 15);
    }

    #[test]
    fn parses_dotted_keys_sections_comments_and_quotes() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# run\nmodel = \"crossmod\"\nway=5\n\ndataset.kind = synthetic # inline\n[eval]\nepisodes = 40\n",
        )
        .unwrap();
        assert_eq!(c.model, ModelKind::CrossMod);
        assert_eq!(c.dataset_kind, DatasetKind::Synthetic);
        assert_eq!(c.eval_episodes, 40);
    }

    #[test]
    fn errors_name_line_and_key() {
        let mut c = RunConfig::default();
        let e = c.apply_text("way = 5\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        let e = c.apply_text("way = five").unwrap_err().to_string();
        assert!(e.contains("way"), "{e}");
        assert!(c.apply_text("no equals sign").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("model = crossmod\ndataset.root = /tmp/data dir\nlr_initial = 0.0003\nseed = 7").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back.train_config(), c.train_config());
        assert_eq!(back.dataset_root, c.dataset_root);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn generated_splits_are_disjoint() {
        let mut c = RunConfig::default();
        c.apply_text("dataset.kind = synthetic\ndataset.classes = 4\ndataset.per_class = 2\ndataset.resolution = 16").unwrap();
        let train = c.load_dataset(SplitName::Train).unwrap();
        let test = c.load_dataset(SplitName::Test).unwrap();
        train.check_disjoint(&test).unwrap();
        assert_eq!(test.classes()[0].id, 8);
    }

    #[test]
    fn missing_root_is_a_config_error_naming_the_path() {
        let mut c = RunConfig::default();
        c.set("dataset.root", "/nonexistent/xmod").unwrap();
        let e = c.load_dataset(SplitName::Train).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("/nonexistent/xmod"));
    }
}
