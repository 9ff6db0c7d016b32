//! Closed-form FLOP and activation-memory counts for windowed attention.
//!
//! A multiply-add counts as two FLOPs. With `t = K²` tokens per window,
//! `n` windows, width `D` and `keys` keys per query token:
//!
//! - logits: `n·2·t·keys·D`
//! - aggregation: `n·2·t·keys·D`
//! - softmax: `3` FLOPs per score per head (exp, sum, divide)
//!
//! Self attention and plain cross attention use `keys = t`. The
//! self-calibrated variant attends to its own window and the aligned support
//! window at once, so `keys = 2t`.

use crate::error::{Error, Result};
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    WindowSelf,
    WindowCross,
    Scca,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [Self::WindowSelf, Self::WindowCross, Self::Scca];

    pub fn name(self) -> &'static str {
        match self {
            Self::WindowSelf => "self",
            Self::WindowCross => "cross",
            Self::Scca => "scca",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostConfig {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub dtype: DType,
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.height,
            self.width,
            self.window,
            self.dim,
            self.heads,
            self.blocks,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("cost dimensions must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    /// Windows on the unshifted lattice, with partial windows padded.
    pub fn windows(&self) -> u64 {
        (self.height.div_ceil(self.window) * self.width.div_ceil(self.window)) as u64
    }

    pub fn tokens_per_window(&self) -> u64 {
        (self.window * self.window) as u64
    }
}

/// Per-block counts for one attention kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCost {
    pub kind: AttentionKind,
    pub keys_per_token: u64,
    pub logit_flops: u64,
    pub aggregation_flops: u64,
    pub softmax_flops: u64,
    /// Row normalization for cosine scores.
    pub norm_flops: u64,
    /// Q/K/V/output projections.
    pub projection_flops: u64,
    pub ffn_flops: u64,
    /// Scalars kept for the backward pass: projections, scores, weights, outputs.
    pub activation_scalars: u64,
    pub activation_bytes: u64,
}

impl BlockCost {
    pub fn attention_core(&self) -> u64 {
        self.logit_flops + self.aggregation_flops
    }

    pub fn total(&self) -> u64 {
        self.logit_flops
            + self.aggregation_flops
            + self.softmax_flops
            + self.norm_flops
            + self.projection_flops
            + self.ffn_flops
    }
}

pub fn block_cost(cfg: &CostConfig, kind: AttentionKind) -> Result<BlockCost> {
    cfg.validate()?;
    let n = cfg.windows();
    let t = cfg.tokens_per_window();
    let d = cfg.dim as u64;
    let heads = cfg.heads as u64;
    let tokens = n * t;
    let keys = match kind {
        AttentionKind::WindowSelf | AttentionKind::WindowCross => t,
        AttentionKind::Scca => 2 * t,
    };
    let scores = n * heads * t * keys;
    // Projected token streams: self/cross need Q, K, V; SCCA adds support K, V.
    let streams = match kind {
        AttentionKind::WindowSelf | AttentionKind::WindowCross => 3,
        AttentionKind::Scca => 5,
    };
    // Cosine scores normalize every query row and every support key row.
    let norm_flops = match kind {
        AttentionKind::Scca => 3 * 2 * tokens * d,
        _ => 0,
    };
    let hidden = (cfg.mlp_ratio as u64) * d;
    let activation_scalars = streams * tokens * d + 2 * scores + 2 * tokens * d + tokens * hidden;
    Ok(BlockCost {
        kind,
        keys_per_token: keys,
        logit_flops: n * 2 * t * keys * d,
        aggregation_flops: n * 2 * t * keys * d,
        softmax_flops: 3 * scores,
        norm_flops,
        projection_flops: (streams + 1) * 2 * tokens * d * d,
        ffn_flops: 2 * 2 * tokens * d * hidden,
        activation_scalars,
        activation_bytes: activation_scalars * cfg.dtype.size_of() as u64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub config: CostConfig,
    pub blocks: Vec<BlockCost>,
}

impl CostReport {
    pub fn get(&self, kind: AttentionKind) -> &BlockCost {
        self.blocks
            .iter()
            .find(|b| b.kind == kind)
            .expect("all kinds are reported")
    }

    /// Logit plus aggregation FLOPs of SCCA over windowed self attention.
    pub fn scca_ratio(&self) -> f64 {
        self.get(AttentionKind::Scca).attention_core() as f64
            / self.get(AttentionKind::WindowSelf).attention_core() as f64
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        let c = &self.config;
        let mut kv = vec![
            ("windows".to_string(), c.windows().to_string()),
            (
                "tokens_per_window".to_string(),
                c.tokens_per_window().to_string(),
            ),
        ];
        for b in &self.blocks {
            let k = b.kind.name();
            let blocks = c.blocks as u64;
            kv.extend([
                (format!("{k}.keys_per_token"), b.keys_per_token.to_string()),
                (format!("{k}.logit_flops"), b.logit_flops.to_string()),
                (
                    format!("{k}.aggregation_flops"),
                    b.aggregation_flops.to_string(),
                ),
                (format!("{k}.softmax_flops"), b.softmax_flops.to_string()),
                (format!("{k}.norm_flops"), b.norm_flops.to_string()),
                (
                    format!("{k}.projection_flops"),
                    b.projection_flops.to_string(),
                ),
                (format!("{k}.ffn_flops"), b.ffn_flops.to_string()),
                (format!("{k}.block_flops"), b.total().to_string()),
                (format!("{k}.stack_flops"), (b.total() * blocks).to_string()),
                (
                    format!("{k}.activation_bytes_per_block"),
                    b.activation_bytes.to_string(),
                ),
            ]);
        }
        kv.push((
            "scca_over_self_core_ratio".into(),
            format!("{}", self.scca_ratio()),
        ));
        kv
    }
}

pub fn cost_report(cfg: &CostConfig) -> Result<CostReport> {
    let blocks = AttentionKind::ALL
        .iter()
        .map(|&k| block_cost(cfg, k))
        .collect::<Result<_>>()?;
    Ok(CostReport {
        config: *cfg,
        blocks,
    })
}
