//! Feature fusion front end.
//!
//! Each pixel's mid-level feature is concatenated with the support prototype
//! and a mask value, then projected to the attention width:
//! `[feat; proto; mask] → Linear(2C+1 → dim)`. Query and support paths use
//! separate projections.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, Linear, ParamStore};
use crate::tensor::{masked_average_pool, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub query_proj: Linear,
    pub support_proj: Linear,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize, dim: usize) -> Self {
        Self {
            query_proj: Linear::new(store, init, "fusion.query", 2 * channels + 1, dim),
            support_proj: Linear::new(store, init, "fusion.support", 2 * channels + 1, dim),
        }
    }
}

/// Masked average pool of support features over foreground.
pub fn support_prototype(fs_mid: &Tensor, ms: &Tensor) -> Result<Tensor> {
    masked_average_pool(fs_mid, ms).map_err(|e| match e {
        Error::EmptyRegion(_) => Error::EmptyRegion("support prototype foreground"),
        other => other,
    })
}

/// Tape-level fusion on pixel-major inputs.
///
/// `feat` is `P×C`, `proto` has `C` values, `mask` has `P` values.
pub fn fuse_pixels<'t>(
    feat: Var<'t>,
    proto: Var<'t>,
    mask: Var<'t>,
    proj: &Linear,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let shape = feat.shape();
    let [pixels, channels] = shape[..] else {
        return Err(Error::dim(
            "fuse",
            format!("expected P×C features, got {shape:?}"),
        ));
    };
    if proto.value().numel() != channels {
        return Err(Error::dim(
            "fuse",
            format!(
                "prototype has {} values for {channels} channels",
                proto.value().numel()
            ),
        ));
    }
    if mask.value().numel() != pixels {
        return Err(Error::dim(
            "fuse",
            format!(
                "mask has {} values for {pixels} pixels",
                mask.value().numel()
            ),
        ));
    }
    let tape = feat.tape();
    let ones = tape.constant(Tensor::ones(&[pixels, 1]));
    let proto_map = ones.matmul(proto.reshape(&[1, channels])?)?;
    let joined = tape.concat_cols(&[feat, proto_map, mask.reshape(&[pixels, 1])?])?;
    proj.forward(joined, p)
}

/// Fuses a `C×H×W` map with a prototype and a `1×H×W` mask into `C'×H×W`.
pub fn fuse(
    feat_mid: &Tensor,
    proto: &Tensor,
    mask: &Tensor,
    proj: &Linear,
    store: &ParamStore,
) -> Result<Tensor> {
    let (_, h, w) = feat_mid.dims3("fuse")?;
    if mask.numel() != h * w {
        return Err(Error::dim(
            "fuse",
            format!("mask {:?} vs {h}x{w}", mask.shape()),
        ));
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = fuse_pixels(
        tape.constant(feat_mid.to_pixel_major()?),
        tape.constant(proto.clone()),
        tape.constant(mask.clone()),
        proj,
        &p,
    )?;
    Tensor::from_pixel_major(&out.value(), h, w)
}
