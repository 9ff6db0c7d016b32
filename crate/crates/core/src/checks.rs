//! Finite-difference gradient checks over each trainable part of the network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{AttentionConfig, SccaStack};
use crate::autodiff::{Tape, Var};
use crate::episodes::{synth_episode, SynthSpec};
use crate::error::{Error, Result};
use crate::fusion::{fuse_pixels, FusionParams};
use crate::gradcheck::{check_params, combine, GradCheckOptions, GradCheckReport};
use crate::model::{decode_pixels, DecoderParams, ModelConfig, PreparedEpisode, Sccan};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const MAX_DIM: usize = 16;
pub const MAX_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub channels: usize,
    pub side: usize,
    pub window: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            side: 8,
            window: 4,
            dim: 8,
            heads: 2,
            mlp_ratio: 1,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim > MAX_DIM || self.side > MAX_SIDE {
            return Err(Error::Config(format!(
                "gradient checks need dim ≤ {MAX_DIM} and H=W ≤ {MAX_SIDE}, got dim {} and side {}",
                self.dim, self.side
            )));
        }
        self.attention().validate()
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
            window: self.window,
            mlp_ratio: self.mlp_ratio,
            ..AttentionConfig::default()
        }
    }

    fn episode(&self) -> Result<PreparedEpisode> {
        let spec = SynthSpec {
            channels: self.channels,
            height: self.side,
            width: self.side,
            classes: 4,
            blob: (self.side / 2).max(2),
            noise: 0.3,
            shots: 1,
        };
        PreparedEpisode::new(&synth_episode(self.seed, &spec)?)
    }
}

/// Reports for one group, one entry per parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: &'static str,
    pub params: Vec<(String, GradCheckReport)>,
}

impl GroupReport {
    pub fn summary(&self) -> GradCheckReport {
        combine(self.params.iter().map(|(_, r)| r))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|(_, r)| r.passed())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn probe<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    out.mul(out.tape().constant(weights.clone()))?.sum()
}

fn all_ids(store: &ParamStore) -> Vec<crate::params::ParamId> {
    store.ids().collect()
}

pub fn fusion_check(cfg: &SuiteConfig, opts: GradCheckOptions) -> Result<GroupReport> {
    let ep = cfg.episode()?;
    let mut store = ParamStore::new();
    let fusion = FusionParams::new(&mut store, &mut Init::new(cfg.seed), cfg.channels, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF0);
    let pixels = cfg.side * cfg.side;
    let (rq, rs) = (
        gaussian(&mut rng, &[pixels, cfg.dim]),
        gaussian(&mut rng, &[pixels, cfg.dim]),
    );
    let ids = all_ids(&store);
    let params = check_params(
        &mut store,
        &ids,
        |tape: &Tape, p| {
            let proto = tape.constant(ep.prototype.clone());
            let q = fuse_pixels(
                tape.constant(ep.query.clone()),
                proto,
                tape.constant(ep.pseudo_mask.clone()),
                &fusion.query_proj,
                p,
            )?;
            let s = fuse_pixels(
                tape.constant(ep.support.clone()),
                proto,
                tape.constant(ep.support_soft_mask.clone()),
                &fusion.support_proj,
                p,
            )?;
            probe(q, &rq)?.add(probe(s, &rs)?)
        },
        opts,
    )?;
    Ok(GroupReport {
        group: "fusion",
        params,
    })
}

/// One shifted block, so the padded lattice and masking are exercised.
pub fn block_check(cfg: &SuiteConfig, opts: GradCheckOptions) -> Result<GroupReport> {
    let ep = cfg.episode()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB1);
    let pixels = cfg.side * cfg.side;
    let xq = gaussian(&mut rng, &[pixels, cfg.dim]);
    let xs = gaussian(&mut rng, &[pixels, cfg.dim]);
    let r = gaussian(&mut rng, &[pixels, cfg.dim]);
    let mut store = ParamStore::new();
    let stack = SccaStack::new(&mut store, &mut Init::new(cfg.seed), cfg.attention(), 2);
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).starts_with("block1."))
        .collect();
    let params = check_params(
        &mut store,
        &ids,
        |tape: &Tape, p| {
            let out = stack.blocks[1].forward_pixels(
                &stack.cfg,
                tape.constant(xq.clone()),
                tape.constant(xs.clone()),
                &ep.support_fg,
                cfg.side,
                cfg.side,
                SccaStack::shifted(1),
                p,
            )?;
            probe(out, &r)
        },
        opts,
    )?;
    Ok(GroupReport {
        group: "block",
        params,
    })
}

pub fn decoder_check(cfg: &SuiteConfig, opts: GradCheckOptions) -> Result<GroupReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDE);
    let pixels = cfg.side * cfg.side;
    let x = gaussian(&mut rng, &[pixels, cfg.dim]);
    let r = gaussian(&mut rng, &[pixels, 2]);
    let mut store = ParamStore::new();
    let dec = DecoderParams::new(&mut store, &mut Init::new(cfg.seed), cfg.dim);
    let ids = all_ids(&store);
    let params = check_params(
        &mut store,
        &ids,
        |tape: &Tape, p| probe(decode_pixels(tape.constant(x.clone()), &dec, p)?, &r),
        opts,
    )?;
    Ok(GroupReport {
        group: "decoder",
        params,
    })
}

/// Two blocks end to end under the Dice loss.
pub fn model_check(cfg: &SuiteConfig, opts: GradCheckOptions) -> Result<GroupReport> {
    let ep = cfg.episode()?;
    let (model, mut store) = Sccan::new(
        ModelConfig {
            channels: cfg.channels,
            blocks: 2,
            attention: cfg.attention(),
        },
        cfg.seed,
    )?;
    let ids = all_ids(&store);
    let params = check_params(
        &mut store,
        &ids,
        |tape: &Tape, p| model.loss(tape, &ep, p),
        opts,
    )?;
    Ok(GroupReport {
        group: "model",
        params,
    })
}

pub fn run_all(cfg: &SuiteConfig, opts: GradCheckOptions) -> Result<Vec<GroupReport>> {
    cfg.validate()?;
    Ok(vec![
        fusion_check(cfg, opts)?,
        block_check(cfg, opts)?,
        decoder_check(cfg, opts)?,
        model_check(cfg, opts)?,
    ])
}
