//! Training-free query foreground priors from high-level features.
//!
//! [`aggregate_pseudo_mask`] softmax-weights every support pixel by its cosine
//! similarity to the query pixel and sums the binary support mask under those
//! weights. [`max_similarity_prior`] is the older single-best-match baseline.

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim_matrix, softmax_lastdim, Tensor, NORM_EPS};

/// Ranges at or below this are treated as constant by the min-max step.
pub const DEGENERATE_RANGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoMaskSource {
    Aggregated,
    MaxSimilarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    /// `1×H×W`, values in `[0, 1]`.
    pub values: Tensor,
    pub source: PseudoMaskSource,
}

fn check_inputs(fq: &Tensor, fs: &Tensor, ms: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (c, h, w) = fq.dims3(op)?;
    if fs.shape() != fq.shape() {
        return Err(Error::dim(
            op,
            format!("query {:?} vs support {:?}", fq.shape(), fs.shape()),
        ));
    }
    if ms.numel() != h * w {
        return Err(Error::dim(
            op,
            format!("mask {:?} vs {h}x{w} map", ms.shape()),
        ));
    }
    Ok((c, h * w))
}

/// Pre-normalization aggregated values, one per query pixel (`HW`).
pub fn aggregate_raw(fq: &Tensor, fs: &Tensor, ms: &Tensor) -> Result<Vec<f64>> {
    check_inputs(fq, fs, ms, "aggregate_pseudo_mask")?;
    let sim = cosine_sim_matrix(&fq.to_pixel_major()?, &fs.to_pixel_major()?, NORM_EPS)?;
    let weights = softmax_lastdim(&sim);
    let p = ms.numel();
    Ok(weights
        .data()
        .chunks(p)
        .map(|row| row.iter().zip(ms.data()).map(|(w, m)| w * m).sum())
        .collect())
}

pub fn aggregate_pseudo_mask(fq: &Tensor, fs: &Tensor, ms: &Tensor) -> Result<PseudoMask> {
    let (_, h, w) = fq.dims3("aggregate_pseudo_mask")?;
    let raw = aggregate_raw(fq, fs, ms)?;
    Ok(PseudoMask {
        values: Tensor::derived(vec![1, h, w], min_max_normalize(raw), fq.dtype()),
        source: PseudoMaskSource::Aggregated,
    })
}

pub fn max_similarity_prior(fq: &Tensor, fs: &Tensor, ms: &Tensor) -> Result<PseudoMask> {
    let (_, h, w) = fq.dims3("max_similarity_prior")?;
    check_inputs(fq, fs, ms, "max_similarity_prior")?;
    let fg: Vec<usize> = (0..ms.numel()).filter(|&i| ms.data()[i] != 0.0).collect();
    if fg.is_empty() {
        return Err(Error::EmptyRegion(
            "max_similarity_prior support foreground",
        ));
    }
    let sim = cosine_sim_matrix(&fq.to_pixel_major()?, &fs.to_pixel_major()?, NORM_EPS)?;
    let p = ms.numel();
    let raw = sim
        .data()
        .chunks(p)
        .map(|row| fg.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(PseudoMask {
        values: Tensor::derived(vec![1, h, w], min_max_normalize(raw), fq.dtype()),
        source: PseudoMaskSource::MaxSimilarity,
    })
}

/// Min-max to `[0, 1]`; a (near-)constant input is kept as-is and clamped.
pub fn min_max_normalize(mut values: Vec<f64>) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= DEGENERATE_RANGE {
        values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
    values
}

/// 1 where the mask value reaches `threshold`, else 0.
pub fn binarize(mask: &PseudoMask, threshold: f64) -> Tensor {
    let data = mask
        .values
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::derived(mask.values.shape().to_vec(), data, mask.values.dtype())
}
