//! Episode training, evaluation and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, BlockMode};
use crate::autodiff::Tape;
use crate::config::{EpisodeSource, RunConfig, SynthSource};
use crate::episodes::{
    kshot_average, load_episode, parse_key_values, synth_episode_for_class, Episode, MANIFEST,
};
use crate::error::{Error, Result};
use crate::model::{
    binarize_prediction, mask_iou, MetricAccumulator, ModelConfig, PreparedEpisode, Sccan,
};
use crate::params::ParamStore;
use crate::pma::{aggregate_pseudo_mask, binarize, max_similarity_prior, PseudoMask};
use crate::sctf;
use crate::tensor::{DType, Tensor};

const EVAL_STREAM: u64 = 1 << 63;
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.txt";

/// Seed of the `index`-th episode of a stream.
fn episode_seed(run_seed: u64, index: u64) -> u64 {
    run_seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ index
}

fn synth_from(src: &SynthSource, seed: u64, classes: std::ops::Range<u32>) -> Result<Episode> {
    let class = ChaCha8Rng::seed_from_u64(seed).random_range(classes);
    synth_episode_for_class(seed, &src.spec, class)
}

/// `index`-th synthetic training episode, drawn from the training classes.
pub fn synth_train_episode(src: &SynthSource, run_seed: u64, index: u64) -> Result<Episode> {
    synth_from(src, episode_seed(run_seed, index), src.train_classes())
}

/// `index`-th synthetic evaluation episode, drawn from the held-out classes.
pub fn synth_eval_episode(src: &SynthSource, run_seed: u64, index: u64) -> Result<Episode> {
    synth_from(
        src,
        episode_seed(run_seed, EVAL_STREAM | index),
        src.eval_classes(),
    )
}

/// A single episode directory, or every episode directory below `dir` in name order.
pub fn load_episode_dirs(dir: &Path) -> Result<Vec<Episode>> {
    if dir.join(MANIFEST).exists() {
        return Ok(vec![load_episode(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Config(format!(
            "no episodes found under {}",
            dir.display()
        )));
    }
    subdirs.iter().map(load_episode).collect()
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Every step's loss, in order.
    pub losses: Vec<f64>,
    pub eval: MetricAccumulator,
}

/// One gradient-descent step; returns the loss before the update.
pub fn train_step(
    model: &Sccan,
    store: &mut ParamStore,
    ep: &PreparedEpisode,
    lr: f64,
) -> Result<f64> {
    Ok(train_step_with_prediction(model, store, ep, lr)?.0)
}

/// Like [`train_step`], also returning the pre-update binarized prediction.
pub fn train_step_with_prediction(
    model: &Sccan,
    store: &mut ParamStore,
    ep: &PreparedEpisode,
    lr: f64,
) -> Result<(f64, Tensor)> {
    let (loss, probs) = {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let probs = model.forward(&tape, ep, &bound)?;
        let l = Sccan::loss_from_probs(probs, ep)?;
        let grads = tape.backward(l)?;
        store.accumulate(&grads, &bound)?;
        (l.value().data()[0], probs.value().as_ref().clone())
    };
    store.sgd_step(lr);
    store.zero_grad();
    let pred = binarize_prediction(&Tensor::from_pixel_major(&probs, ep.height, ep.width)?)?;
    Ok((loss, pred))
}

/// Evaluates binarized predictions against ground truth.
pub fn evaluate<'a>(
    model: &Sccan,
    store: &ParamStore,
    episodes: impl IntoIterator<Item = &'a PreparedEpisode>,
) -> Result<MetricAccumulator> {
    let mut acc = MetricAccumulator::new();
    for ep in episodes {
        let pred = binarize_prediction(&model.predict(ep, store)?)?;
        acc.update(
            &pred,
            &ep.query_mask.reshape(&[1, ep.height, ep.width])?,
            ep.class_id,
        )?;
    }
    Ok(acc)
}

fn step_context(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::NonFinite { op, index } => Error::NonFinite {
            op: format!("{op} (epoch {epoch}, step {step})"),
            index,
        },
        other => other,
    }
}

/// Training and evaluation episodes described by `cfg`.
pub struct EpisodeSets {
    train: Vec<PreparedEpisode>,
    pub eval: Vec<PreparedEpisode>,
    synth: Option<SynthSource>,
    seed: u64,
    pub channels: usize,
}

impl EpisodeSets {
    /// Directory sources use every episode for both training and evaluation.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match (&cfg.episodes, cfg.synth()) {
            (_, Some(src)) => {
                let eval = (0..src.count as u64)
                    .map(|i| PreparedEpisode::new(&synth_eval_episode(&src, cfg.seed, i)?))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self {
                    train: Vec::new(),
                    eval,
                    synth: Some(src),
                    seed: cfg.seed,
                    channels: src.spec.channels,
                })
            }
            (EpisodeSource::Dir(dir), None) => {
                let eps = load_episode_dirs(dir)?;
                let channels = eps[0].query_feat.shape()[0];
                if let Some(bad) = eps.iter().find(|e| e.shots() != cfg.shots) {
                    return Err(Error::Config(format!(
                        "episode class {} has {} shots, config expects {}",
                        bad.class_id,
                        bad.shots(),
                        cfg.shots
                    )));
                }
                let prepared = eps
                    .iter()
                    .map(PreparedEpisode::new)
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self {
                    train: prepared.clone(),
                    eval: prepared,
                    synth: None,
                    seed: cfg.seed,
                    channels,
                })
            }
            (EpisodeSource::Synth(_), None) => {
                unreachable!("synthetic sources always yield a spec")
            }
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.synth.map_or(self.train.len(), |s| s.count)
    }

    /// Synthetic training draws fresh episodes every step.
    fn train_episode(&self, step: usize) -> Result<PreparedEpisode> {
        match &self.synth {
            Some(src) => PreparedEpisode::new(&synth_train_episode(src, self.seed, step as u64)?),
            None => Ok(self.train[step % self.train.len()].clone()),
        }
    }
}

/// Runs `cfg.epochs` epochs of plain gradient descent, then evaluates.
pub fn train(
    cfg: &RunConfig,
    model: &Sccan,
    store: &mut ParamStore,
    sets: &EpisodeSets,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    let per_epoch = sets.steps_per_epoch();
    let mut losses = Vec::with_capacity(cfg.epochs * per_epoch);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = MetricAccumulator::new();
        let mut total = 0.0;
        for i in 0..per_epoch {
            let step = epoch * per_epoch + i;
            let ep = sets.train_episode(step)?;
            let (loss, pred) = train_step_with_prediction(model, store, &ep, cfg.lr)
                .map_err(|e| step_context(e, epoch, step))?;
            acc.update(
                &pred,
                &ep.query_mask.reshape(&[1, ep.height, ep.width])?,
                ep.class_id,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("training loss (epoch {epoch}, step {step})"),
                    index: 0,
                });
            }
            total += loss;
            losses.push(loss);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / per_epoch as f64,
            train_miou: acc.miou(),
        };
        on_epoch(&stats);
        epochs.push(stats);
    }
    let eval = evaluate(model, store, &sets.eval)?;
    Ok(TrainReport {
        epochs,
        losses,
        eval,
    })
}

/// Mean per-episode IoU of the two binarized pseudo masks against the query mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmaComparison {
    pub aggregated_iou: f64,
    pub max_similarity_iou: f64,
    pub episodes: usize,
}

/// Both pseudo masks of one episode, binarized, with their IoUs.
pub struct EpisodePma {
    pub aggregated: PseudoMask,
    pub max_similarity: PseudoMask,
    pub aggregated_binary: Tensor,
    pub max_similarity_binary: Tensor,
    pub aggregated_iou: f64,
    pub max_similarity_iou: f64,
}

/// Empty-vs-empty counts as a perfect match.
pub fn episode_pma(ep: &Episode, threshold: f64) -> Result<EpisodePma> {
    ep.validate()?;
    let hf = ep
        .high_feats
        .as_ref()
        .ok_or_else(|| Error::Config("pseudo masks need high-level features".into()))?;
    let (_, support_mask) = kshot_average(&ep.support_feats, &ep.support_masks)?;
    let aggregated = aggregate_pseudo_mask(&hf.query, &hf.support, &support_mask)?;
    let max_similarity = max_similarity_prior(&hf.query, &hf.support, &support_mask)?;
    let aggregated_binary = binarize(&aggregated, threshold);
    let max_similarity_binary = binarize(&max_similarity, threshold);
    Ok(EpisodePma {
        aggregated_iou: mask_iou(&aggregated_binary, &ep.query_mask)?.unwrap_or(1.0),
        max_similarity_iou: mask_iou(&max_similarity_binary, &ep.query_mask)?.unwrap_or(1.0),
        aggregated,
        max_similarity,
        aggregated_binary,
        max_similarity_binary,
    })
}

pub fn compare_pseudo_masks<'a>(
    episodes: impl IntoIterator<Item = &'a Episode>,
    threshold: f64,
) -> Result<PmaComparison> {
    let (mut agg, mut max, mut n) = (0.0, 0.0, 0);
    for ep in episodes {
        let r = episode_pma(ep, threshold)?;
        agg += r.aggregated_iou;
        max += r.max_similarity_iou;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("no episodes to compare".into()));
    }
    Ok(PmaComparison {
        aggregated_iou: agg / n as f64,
        max_similarity_iou: max / n as f64,
        episodes: n,
    })
}

pub fn save_checkpoint(dir: &Path, model: &Sccan, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &model.config;
    let a = &c.attention;
    let dtype = store.iter().next().map_or(DType::F64, |(_, t)| t.dtype());
    let mut manifest = format!(
        "channels={}\nblocks={}\ndim={}\nheads={}\nwindow={}\nmlp_ratio={}\ndtype={}\nparams={}\n",
        c.channels,
        c.blocks,
        a.dim,
        a.heads,
        a.window,
        a.mlp_ratio,
        dtype.name(),
        store.len()
    );
    for (i, (name, tensor)) in store.iter().enumerate() {
        let file = format!("{name}.sctf");
        sctf::save(tensor, dir.join(&file))?;
        manifest.push_str(&format!("param.{i}={file}\n"));
    }
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model from the manifest and loads every parameter, checking shapes.
pub fn load_checkpoint(dir: &Path) -> Result<(Sccan, ParamStore)> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_key_values(&text, &path)?;
    let field = |k: &str| -> Result<usize> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config(format!("{}: missing or bad `{k}`", path.display())))
    };
    let dtype: DType = kv
        .get("dtype")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config(format!("{}: missing or bad `dtype`", path.display())))?;
    let config = ModelConfig {
        channels: field("channels")?,
        blocks: field("blocks")?,
        attention: AttentionConfig {
            dim: field("dim")?,
            heads: field("heads")?,
            window: field("window")?,
            mlp_ratio: field("mlp_ratio")?,
            mode: BlockMode::Standard,
        },
    };
    let (model, mut store) = Sccan::new(config, 0)?;
    if field("params")? != store.len() {
        return Err(Error::Config(format!(
            "{}: {} parameters listed, architecture has {}",
            path.display(),
            field("params")?,
            store.len()
        )));
    }
    store.to_dtype(dtype);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let file = kv
            .get(&format!("param.{i}"))
            .ok_or_else(|| Error::Config(format!("{}: missing `param.{i}`", path.display())))?;
        let expected = format!("{}.sctf", store.name(id));
        if *file != expected {
            return Err(Error::Config(format!(
                "{}: param.{i} is `{file}`, expected `{expected}`",
                path.display()
            )));
        }
        let tensor = sctf::load(dir.join(file))?;
        store
            .set(id, tensor)
            .map_err(|e| Error::Config(format!("{}: {e}", dir.join(file).display())))?;
    }
    Ok((model, store))
}

/// Checks that a checkpoint fits the configured architecture.
pub fn check_compatible(model: &Sccan, cfg: &RunConfig, channels: usize) -> Result<()> {
    let want = cfg.model(channels);
    if model.config != want {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match configuration {:?}",
            model.config, want
        )));
    }
    Ok(())
}
