//! Decoder head, Dice loss, segmentation metrics and the assembled network.

use std::collections::BTreeMap;

use crate::attention::{AttentionConfig, SccaStack};
use crate::autodiff::{Tape, Var};
use crate::episodes::{kshot_average, mean_mask, Episode};
use crate::error::{Error, Result};
use crate::fusion::{fuse_pixels, support_prototype, FusionParams};
use crate::params::{Bound, Init, Linear, ParamStore};
use crate::pma::aggregate_pseudo_mask;
use crate::tensor::Tensor;

pub const BG_CHANNEL: usize = 0;
pub const FG_CHANNEL: usize = 1;
pub const DICE_SMOOTH: f64 = 1.0;

/// Pixel-wise `C → C/2 → 2` MLP with GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub hidden: Linear,
    pub logits: Linear,
}

impl DecoderParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize) -> Self {
        let hidden = (dim / 2).max(1);
        Self {
            hidden: Linear::new(store, init, "decoder.hidden", dim, hidden),
            logits: Linear::new(store, init, "decoder.logits", hidden, 2),
        }
    }
}

/// Per-pixel BG/FG probabilities, `P×2`.
pub fn decode_pixels<'t>(x: Var<'t>, dec: &DecoderParams, p: &Bound<'t>) -> Result<Var<'t>> {
    let h = dec.hidden.forward(x, p)?.gelu()?;
    dec.logits.forward(h, p)?.softmax()
}

/// `C×H×W` features to a `2×H×W` probability map.
pub fn decode(fq_final: &Tensor, dec: &DecoderParams, store: &ParamStore) -> Result<Tensor> {
    let (_, h, w) = fq_final.dims3("decode")?;
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = decode_pixels(tape.constant(fq_final.to_pixel_major()?), dec, &p)?;
    Tensor::from_pixel_major(&out.value(), h, w)
}

/// Soft Dice loss on tape values; `pred` and `gt` hold the same number of entries.
pub fn dice_loss_var<'t>(pred: Var<'t>, gt: Var<'t>, smooth: f64) -> Result<Var<'t>> {
    let inter = pred.mul(gt)?.sum()?;
    let num = inter.scale(2.0)?.add_scalar(smooth)?;
    let den = pred.sum()?.add(gt.sum()?)?.add_scalar(smooth)?;
    num.div(den)?.scale(-1.0)?.add_scalar(1.0)
}

/// `1 − (2Σpg + s)/(Σp + Σg + s)`.
pub fn dice_loss(pred_fg: &Tensor, gt: &Tensor, smooth: f64) -> Result<f64> {
    if pred_fg.numel() != gt.numel() {
        return Err(Error::dim(
            "dice_loss",
            format!("{:?} vs {:?}", pred_fg.shape(), gt.shape()),
        ));
    }
    if !(smooth > 0.0) {
        return Err(Error::Contract(format!(
            "dice smoothing must be positive, got {smooth}"
        )));
    }
    let tape = Tape::new();
    let p = tape.constant(pred_fg.reshape(&[pred_fg.numel()])?);
    let g = tape.constant(gt.reshape(&[gt.numel()])?);
    Ok(dice_loss_var(p, g, smooth)?.value().data()[0])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }

    fn add(&mut self, other: Overlap) {
        self.intersection += other.intersection;
        self.union += other.union;
    }
}

/// Foreground IoU of two binary masks; `None` when both are empty.
pub fn mask_iou(pred: &Tensor, gt: &Tensor) -> Result<Option<f64>> {
    if pred.numel() != gt.numel() {
        return Err(Error::dim(
            "mask_iou",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(overlap(pred.data(), gt.data(), true).iou())
}

fn overlap(pred: &[f64], gt: &[f64], positive: bool) -> Overlap {
    let mut o = Overlap::default();
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = ((p != 0.0) == positive, (g != 0.0) == positive);
        o.intersection += (p && g) as u64;
        o.union += (p || g) as u64;
    }
    o
}

/// Accumulated intersections and unions across episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricAccumulator {
    classes: BTreeMap<u32, Overlap>,
    foreground: Overlap,
    background: Overlap,
    episodes: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, pred_mask: &Tensor, gt_mask: &Tensor, class_id: u32) -> Result<()> {
        if pred_mask.shape() != gt_mask.shape() {
            return Err(Error::dim(
                "update_metrics",
                format!("{:?} vs {:?}", pred_mask.shape(), gt_mask.shape()),
            ));
        }
        let fg = overlap(pred_mask.data(), gt_mask.data(), true);
        self.classes.entry(class_id).or_default().add(fg);
        self.foreground.add(fg);
        self.background
            .add(overlap(pred_mask.data(), gt_mask.data(), false));
        self.episodes += 1;
        Ok(())
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn class_overlap(&self, class_id: u32) -> Option<Overlap> {
        self.classes.get(&class_id).copied()
    }

    /// IoU per class; classes with an empty union are omitted.
    pub fn per_class(&self) -> Vec<(u32, f64)> {
        self.classes
            .iter()
            .filter_map(|(&c, o)| o.iou().map(|v| (c, v)))
            .collect()
    }

    pub fn miou(&self) -> Option<f64> {
        let ious = self.per_class();
        (!ious.is_empty()).then(|| ious.iter().map(|(_, v)| v).sum::<f64>() / ious.len() as f64)
    }

    /// Pooled foreground IoU over all episodes.
    pub fn fg_iou(&self) -> Option<f64> {
        self.foreground.iou()
    }

    pub fn bg_iou(&self) -> Option<f64> {
        self.background.iou()
    }

    pub fn fbiou(&self) -> Option<f64> {
        match (self.fg_iou(), self.bg_iou()) {
            (Some(f), Some(b)) => Some((f + b) / 2.0),
            (Some(v), None) | (None, Some(v)) => Some(v),
            (None, None) => None,
        }
    }

    /// `key=value` lines: `miou`, `fbiou`, `fg_iou`, `episodes`, `class_<id>`.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        let mut out = vec![
            ("miou".to_string(), fmt(self.miou())),
            ("fbiou".to_string(), fmt(self.fbiou())),
            ("fg_iou".to_string(), fmt(self.fg_iou())),
            ("episodes".to_string(), self.episodes.to_string()),
        ];
        for (&c, o) in &self.classes {
            out.push((format!("class_{c}"), fmt(o.iou())));
        }
        out
    }
}

/// Shape of the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Channels of the mid-level input features.
    pub channels: usize,
    pub blocks: usize,
    pub attention: AttentionConfig,
}

/// An episode reduced to the tensors the network consumes.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    /// `P×C` query features.
    pub query: Tensor,
    /// `P×C` k-shot averaged support features.
    pub support: Tensor,
    /// Support prototype, `C`.
    pub prototype: Tensor,
    /// Query prior from the pseudo mask, `P`.
    pub pseudo_mask: Tensor,
    /// Mean of the support masks, `P`.
    pub support_soft_mask: Tensor,
    /// Any-shot support foreground, per pixel.
    pub support_fg: Vec<bool>,
    /// Ground truth, `P`.
    pub query_mask: Tensor,
    pub height: usize,
    pub width: usize,
    pub class_id: u32,
}

impl PreparedEpisode {
    pub fn new(ep: &Episode) -> Result<Self> {
        ep.validate()?;
        let (_, h, w) = ep.query_feat.dims3("prepare")?;
        let p = h * w;
        let (support, binary) = kshot_average(&ep.support_feats, &ep.support_masks)?;
        let soft = mean_mask(&ep.support_masks)?;
        let prototype = support_prototype(&support, &binary)?;
        let pseudo = match &ep.high_feats {
            Some(hf) => aggregate_pseudo_mask(&hf.query, &hf.support, &binary)?,
            None => aggregate_pseudo_mask(&ep.query_feat, &support, &binary)?,
        };
        Ok(Self {
            query: ep.query_feat.to_pixel_major()?,
            support: support.to_pixel_major()?,
            prototype,
            pseudo_mask: pseudo.values.reshape(&[p])?,
            support_soft_mask: soft.reshape(&[p])?,
            support_fg: binary.data().iter().map(|&v| v > 0.0).collect(),
            query_mask: ep.query_mask.reshape(&[p])?,
            height: h,
            width: w,
            class_id: ep.class_id,
        })
    }
}

/// Fusion, attention stack and decoder.
#[derive(Debug, Clone)]
pub struct Sccan {
    pub config: ModelConfig,
    pub fusion: FusionParams,
    pub stack: SccaStack,
    pub decoder: DecoderParams,
}

impl Sccan {
    /// Registers every parameter in a fresh store with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.attention.validate()?;
        if config.channels == 0 || config.blocks == 0 {
            return Err(Error::Config(
                "channels and blocks must be at least 1".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let fusion =
            FusionParams::new(&mut store, &mut init, config.channels, config.attention.dim);
        let stack = SccaStack::new(&mut store, &mut init, config.attention, config.blocks);
        let decoder = DecoderParams::new(&mut store, &mut init, config.attention.dim);
        Ok((
            Self {
                config,
                fusion,
                stack,
                decoder,
            },
            store,
        ))
    }

    /// BG/FG probabilities per query pixel, `P×2`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ep: &PreparedEpisode,
        p: &Bound<'t>,
    ) -> Result<Var<'t>> {
        if ep.query.shape()[1] != self.config.channels {
            return Err(Error::dim(
                "model",
                format!(
                    "episode has {} channels, model expects {}",
                    ep.query.shape()[1],
                    self.config.channels
                ),
            ));
        }
        let proto = tape.constant(ep.prototype.clone());
        let fq = fuse_pixels(
            tape.constant(ep.query.clone()),
            proto,
            tape.constant(ep.pseudo_mask.clone()),
            &self.fusion.query_proj,
            p,
        )?;
        let fs = fuse_pixels(
            tape.constant(ep.support.clone()),
            proto,
            tape.constant(ep.support_soft_mask.clone()),
            &self.fusion.support_proj,
            p,
        )?;
        let x = self
            .stack
            .forward_pixels(fq, fs, &ep.support_fg, ep.height, ep.width, p)?;
        decode_pixels(x, &self.decoder, p)
    }

    /// Dice loss of the foreground channel against the query mask.
    pub fn loss<'t>(&self, tape: &'t Tape, ep: &PreparedEpisode, p: &Bound<'t>) -> Result<Var<'t>> {
        let probs = self.forward(tape, ep, p)?;
        Self::loss_from_probs(probs, ep)
    }

    /// Dice loss of the foreground column of `P×2` probabilities.
    pub fn loss_from_probs<'t>(probs: Var<'t>, ep: &PreparedEpisode) -> Result<Var<'t>> {
        let tape = probs.tape();
        let pixels = ep.height * ep.width;
        let fg = probs.slice(0..pixels, FG_CHANNEL..FG_CHANNEL + 1)?;
        let gt = tape.constant(ep.query_mask.reshape(&[pixels, 1])?);
        dice_loss_var(fg, gt, DICE_SMOOTH)
    }

    /// `2×H×W` probabilities.
    pub fn predict(&self, ep: &PreparedEpisode, store: &ParamStore) -> Result<Tensor> {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let probs = self.forward(&tape, ep, &p)?;
        Tensor::from_pixel_major(&probs.value(), ep.height, ep.width)
    }
}

/// Argmax over the two channels of a `2×H×W` map; ties go to background.
pub fn binarize_prediction(probs: &Tensor) -> Result<Tensor> {
    let (c, h, w) = probs.dims3("binarize_prediction")?;
    if c != 2 {
        return Err(Error::dim(
            "binarize_prediction",
            format!("{c} channels, expected 2"),
        ));
    }
    let hw = h * w;
    let data = (0..hw)
        .map(|i| {
            let (bg, fg) = (
                probs.data()[BG_CHANNEL * hw + i],
                probs.data()[FG_CHANNEL * hw + i],
            );
            if fg > bg {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}
