//! Run configuration: defaults, `key=value` files and overrides.
//!
//! Values are layered as defaults, then a config file, then command-line
//! flags. [`RunConfig::to_key_values`] renders the effective result so every
//! report can echo it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{AttentionConfig, BlockMode};
use crate::episodes::{parse_key_values, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::DType;

/// Where episodes come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeSource {
    /// A directory of episode directories, or a single episode directory.
    Dir(PathBuf),
    Synth(SynthSource),
}

/// Synthetic episodes. Classes `0..classes-holdout` are used for training,
/// the last `holdout` classes only for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSource {
    pub spec: SynthSpec,
    /// Episodes per epoch, and per evaluation.
    pub count: usize,
    pub holdout: usize,
}

impl Default for SynthSource {
    fn default() -> Self {
        Self {
            spec: SynthSpec::default(),
            count: 100,
            holdout: 2,
        }
    }
}

impl SynthSource {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.count == 0 {
            return Err(Error::Config("synthetic count must be at least 1".into()));
        }
        if self.holdout == 0 || self.holdout >= self.spec.classes {
            return Err(Error::Config(format!(
                "holdout {} must be in 1..{}",
                self.holdout, self.spec.classes
            )));
        }
        Ok(())
    }

    pub fn train_classes(&self) -> std::ops::Range<u32> {
        0..(self.spec.classes - self.holdout) as u32
    }

    pub fn eval_classes(&self) -> std::ops::Range<u32> {
        (self.spec.classes - self.holdout) as u32..self.spec.classes as u32
    }
}

impl FromStr for EpisodeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(body) = s.strip_prefix("synth:").or((s == "synth").then_some("")) else {
            return Ok(Self::Dir(PathBuf::from(s)));
        };
        let mut src = SynthSource::default();
        for item in body.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("synthetic spec item `{item}` is not key=value"))
            })?;
            let bad = || Error::Config(format!("bad value `{v}` for synthetic `{k}`"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            match k {
                "c" | "channels" => src.spec.channels = int()?,
                "h" | "height" => src.spec.height = int()?,
                "w" | "width" => src.spec.width = int()?,
                "classes" => src.spec.classes = int()?,
                "blob" => src.spec.blob = int()?,
                "noise" => src.spec.noise = v.parse().map_err(|_| bad())?,
                "count" => src.count = int()?,
                "holdout" => src.holdout = int()?,
                _ => return Err(Error::Config(format!("unknown synthetic key `{k}`"))),
            }
        }
        Ok(Self::Synth(src))
    }
}

impl fmt::Display for EpisodeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dir(p) => write!(f, "{}", p.display()),
            Self::Synth(s) => write!(
                f,
                "synth:c={},h={},w={},classes={},blob={},noise={},count={},holdout={}",
                s.spec.channels,
                s.spec.height,
                s.spec.width,
                s.spec.classes,
                s.spec.blob,
                s.spec.noise,
                s.count,
                s.holdout
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub blocks: usize,
    pub window: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub shots: usize,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub dtype: DType,
    pub pma_threshold: f64,
    pub episodes: EpisodeSource,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            window: 8,
            heads: 8,
            dim: 256,
            mlp_ratio: 1,
            shots: 1,
            seed: 0,
            epochs: 1,
            lr: 0.05,
            dtype: DType::F64,
            pma_threshold: 0.75,
            episodes: EpisodeSource::Synth(SynthSource::default()),
            out: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Applies one `key=value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key.trim().replace('-', "_").as_str() {
            "blocks" => self.blocks = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "dtype" => self.dtype = parse(key, value)?,
            "pma_threshold" => self.pma_threshold = parse(key, value)?,
            "episodes" => self.episodes = value.trim().parse()?,
            "out" => self.out = PathBuf::from(value.trim()),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value.trim())),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_key_values(&text, path)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.blocks == 0 || self.shots == 0 {
            return Err(Error::Config("blocks and shots must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.pma_threshold) {
            return Err(Error::Config(format!(
                "pma threshold {} outside [0, 1]",
                self.pma_threshold
            )));
        }
        if let EpisodeSource::Synth(s) = &self.episodes {
            s.validate()?;
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
            window: self.window,
            mlp_ratio: self.mlp_ratio,
            mode: BlockMode::Standard,
        }
    }

    pub fn model(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            channels,
            blocks: self.blocks,
            attention: self.attention(),
        }
    }

    /// Synthetic spec with the run's shot count, if the source is synthetic.
    pub fn synth(&self) -> Option<SynthSource> {
        match &self.episodes {
            EpisodeSource::Synth(s) => Some(SynthSource {
                spec: SynthSpec {
                    shots: self.shots,
                    ..s.spec
                },
                ..*s
            }),
            EpisodeSource::Dir(_) => None,
        }
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("blocks", self.blocks.to_string()),
            ("window", self.window.to_string()),
            ("heads", self.heads.to_string()),
            ("dim", self.dim.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("shots", self.shots.to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("dtype", self.dtype.name().to_string()),
            ("pma_threshold", self.pma_threshold.to_string()),
            ("episodes", self.episodes.to_string()),
            ("out", self.out.display().to_string()),
        ];
        if let Some(c) = &self.checkpoint {
            kv.push(("checkpoint", c.display().to_string()));
        }
        kv.into_iter()
            .map(|(k, v)| (format!("config.{k}"), v))
            .collect()
    }
}
