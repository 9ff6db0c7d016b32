//! Patch alignment and self-calibrated cross attention.
//!
//! Each query window attends jointly to itself and to the most similar
//! foreground-bearing support window. Self scores are scaled dot products,
//! cross scores are plain cosines, and both halves share one softmax:
//!
//! ```text
//! A_QQ = Q·K_Qᵀ / √d_k        A_QS = cos(Q, K_S)
//! A    = softmax([A_QQ | A_QS])
//! out  = A · [V_Q ; V_S]
//! ```
//!
//! Padded positions and support background are removed from the key set
//! with a large negative logit before the softmax.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{cosine_sim_matrix, Tensor, NORM_EPS};
use crate::windowing::{PatchGrid, WindowLayout};

/// Logit assigned to keys that must receive no attention.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockMode {
    /// Pre-norm block with learned Q/K/V/output projections.
    #[default]
    Standard,
    /// Identity projections and no normalization; scores are computed on the
    /// block input directly.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub mode: BlockMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            heads: 8,
            window: 8,
            mlp_ratio: 1,
            mode: BlockMode::Standard,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide embedding dimension {}",
                self.heads, self.dim
            )));
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "window and mlp ratio must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Mean feature of each window plus a flag telling whether any pixel counted.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrototypes {
    /// `N²×C`; rows with no eligible pixel are zero.
    pub protos: Tensor,
    pub flags: Vec<bool>,
}

/// Patch-wise average pooling over valid pixels, and over foreground pixels
/// when `fg` (the partitioned `1×H×W` mask) is given.
pub fn patch_prototypes(grid: &PatchGrid, fg: Option<&PatchGrid>) -> Result<PatchPrototypes> {
    let (c, _, _) = grid.origin_shape;
    let n = grid.num_windows();
    let area = grid.window * grid.window;
    if let Some(m) = fg {
        if m.validity.shape() != grid.validity.shape() {
            return Err(Error::dim(
                "patch_prototypes",
                "mask grid does not match feature grid",
            ));
        }
    }
    let mut protos = vec![0.0; n * c];
    let mut flags = vec![false; n];
    for win in 0..n {
        let eligible: Vec<usize> = (0..area)
            .filter(|&pos| grid.validity.data()[win * area + pos] != 0.0)
            .filter(|&pos| fg.is_none_or(|m| m.patches.data()[win * area + pos] != 0.0))
            .collect();
        if eligible.is_empty() {
            continue;
        }
        flags[win] = true;
        for ch in 0..c {
            let base = (win * c + ch) * area;
            let sum: f64 = eligible
                .iter()
                .map(|&pos| grid.patches.data()[base + pos])
                .sum();
            protos[win * c + ch] = sum / eligible.len() as f64;
        }
    }
    Ok(PatchPrototypes {
        protos: Tensor::derived(vec![n, c], protos, grid.patches.dtype()),
        flags,
    })
}

/// Same pooling as [`patch_prototypes`] on a pixel-major `P×C` matrix.
fn window_prototypes(
    pixels: &Tensor,
    layout: &WindowLayout,
    eligible: Option<&[bool]>,
) -> PatchPrototypes {
    let c = pixels.shape()[1];
    let (n, area) = (layout.num_windows(), layout.window_area());
    let mut protos = vec![0.0; n * c];
    let mut flags = vec![false; n];
    for win in 0..n {
        let mut count = 0usize;
        for pos in 0..area {
            let Some(p) = layout.source(win, pos) else {
                continue;
            };
            if eligible.is_some_and(|e| !e[p]) {
                continue;
            }
            count += 1;
            for ch in 0..c {
                protos[win * c + ch] += pixels.data()[p * c + ch];
            }
        }
        if count > 0 {
            flags[win] = true;
            protos[win * c..(win + 1) * c]
                .iter_mut()
                .for_each(|v| *v /= count as f64);
        }
    }
    PatchPrototypes {
        protos: Tensor::derived(vec![n, c], protos, pixels.dtype()),
        flags,
    }
}

/// Aligned support window for each query window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentIndices {
    pub indices: Vec<usize>,
}

/// Argmax of prototype cosine over foreground-flagged support windows.
/// Windows without foreground are excluded outright; ties go to the lowest index.
pub fn align_patches(
    tq_proto: &Tensor,
    ts_proto: &Tensor,
    fg_flags: &[bool],
) -> Result<AlignmentIndices> {
    let n_support = ts_proto.shape()[0];
    if fg_flags.len() != n_support {
        return Err(Error::dim(
            "align_patches",
            format!("{} flags for {n_support} support patches", fg_flags.len()),
        ));
    }
    if !fg_flags.iter().any(|&f| f) {
        return Err(Error::NoValidSupport);
    }
    let sim = cosine_sim_matrix(tq_proto, ts_proto, NORM_EPS)?;
    let indices = sim
        .data()
        .chunks(n_support)
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &s) in row.iter().enumerate() {
                if fg_flags[j] && best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best.expect("at least one flag is set").0
        })
        .collect();
    Ok(AlignmentIndices { indices })
}

/// Score blocks for every head and window.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    /// `heads×N²×K²×K²`, scaled dot products before masking.
    pub a_qq: Tensor,
    /// `heads×N²×K²×K²`, cosines before masking.
    pub a_qs: Tensor,
    /// `heads×N²×K²×2K²`, softmax over the masked concatenation.
    pub joint: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct SccaBlockParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl SccaBlockParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: &AttentionConfig,
    ) -> Self {
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        Self {
            query: Linear::new(store, init, &format!("{prefix}.attn.query"), d, d),
            key: Linear::new(store, init, &format!("{prefix}.attn.key"), d, d),
            value: Linear::new(store, init, &format!("{prefix}.attn.value"), d, d),
            out: Linear::new(store, init, &format!("{prefix}.attn.out"), d, d),
            ffn_in: Linear::new(store, init, &format!("{prefix}.ffn.in"), d, hidden),
            ffn_out: Linear::new(store, init, &format!("{prefix}.ffn.out"), hidden, d),
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d),
        }
    }
}

/// Projected window rows for one block, plus per-row key masks.
struct WindowInputs<'t> {
    query: Var<'t>,
    key_self: Var<'t>,
    value_self: Var<'t>,
    key_support: Var<'t>,
    value_support: Var<'t>,
    self_valid: Vec<bool>,
    support_valid: Vec<bool>,
    windows: usize,
    area: usize,
}

#[derive(Default)]
struct ScoreSink {
    a_qq: Vec<Vec<f64>>,
    a_qs: Vec<Vec<f64>>,
    joint: Vec<Vec<f64>>,
}

fn mask_row<'t>(tape: &'t Tape, valid: &[bool]) -> Var<'t> {
    let data = valid
        .iter()
        .map(|&v| if v { 0.0 } else { MASK_LOGIT })
        .collect();
    tape.constant(Tensor::from_vec(&[valid.len()], data).expect("non-empty window"))
}

fn project<'t>(x: Var<'t>, lin: &Linear, cfg: &AttentionConfig, p: &Bound<'t>) -> Result<Var<'t>> {
    match cfg.mode {
        BlockMode::Standard => lin.forward(x, p),
        BlockMode::Literal => Ok(x),
    }
}

fn norm<'t>(x: Var<'t>, ln: &LayerNorm, cfg: &AttentionConfig, p: &Bound<'t>) -> Result<Var<'t>> {
    match cfg.mode {
        BlockMode::Standard => ln.forward(x, p),
        BlockMode::Literal => Ok(x),
    }
}

impl SccaBlockParams {
    /// Normalizes and projects already-windowed query and aligned support rows.
    fn window_inputs<'t>(
        &self,
        cfg: &AttentionConfig,
        tq: Var<'t>,
        ts: Var<'t>,
        self_valid: Vec<bool>,
        support_valid: Vec<bool>,
        area: usize,
        p: &Bound<'t>,
    ) -> Result<WindowInputs<'t>> {
        let rows = tq.shape()[0];
        let tq = norm(tq, &self.norm1, cfg, p)?;
        let ts = norm(ts, &self.norm1, cfg, p)?;
        Ok(WindowInputs {
            query: project(tq, &self.query, cfg, p)?,
            key_self: project(tq, &self.key, cfg, p)?,
            value_self: project(tq, &self.value, cfg, p)?,
            key_support: project(ts, &self.key, cfg, p)?,
            value_support: project(ts, &self.value, cfg, p)?,
            self_valid,
            support_valid,
            windows: rows / area,
            area,
        })
    }

    /// Joint self/cross attention for every window and head; `N²K²×dim`.
    fn attend<'t>(
        &self,
        cfg: &AttentionConfig,
        inp: &WindowInputs<'t>,
        mut sink: Option<&mut ScoreSink>,
    ) -> Result<Var<'t>> {
        let tape = inp.query.tape();
        let d = cfg.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let area = inp.area;
        if let Some(s) = sink.as_deref_mut() {
            *s = ScoreSink {
                a_qq: vec![Vec::new(); cfg.heads],
                a_qs: vec![Vec::new(); cfg.heads],
                joint: vec![Vec::new(); cfg.heads],
            };
        }
        let mut windows = Vec::with_capacity(inp.windows);
        for win in 0..inp.windows {
            let rows = win * area..(win + 1) * area;
            let self_mask = mask_row(tape, &inp.self_valid[rows.clone()]);
            let support_mask = mask_row(tape, &inp.support_valid[rows.clone()]);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let cols = h * d..(h + 1) * d;
                let q = inp.query.slice(rows.clone(), cols.clone())?;
                let kq = inp.key_self.slice(rows.clone(), cols.clone())?;
                let vq = inp.value_self.slice(rows.clone(), cols.clone())?;
                let ks = inp.key_support.slice(rows.clone(), cols.clone())?;
                let vs = inp.value_support.slice(rows.clone(), cols.clone())?;

                let a_qq = q.matmul(kq.t()?)?.scale(scale)?;
                let a_qs = q
                    .row_normalize(NORM_EPS)?
                    .matmul(ks.row_normalize(NORM_EPS)?.t()?)?;
                let logits =
                    tape.concat_cols(&[a_qq.add_row(self_mask)?, a_qs.add_row(support_mask)?])?;
                let joint = logits.softmax()?;
                if let Some(s) = sink.as_deref_mut() {
                    s.a_qq[h].extend_from_slice(a_qq.value().data());
                    s.a_qs[h].extend_from_slice(a_qs.value().data());
                    s.joint[h].extend_from_slice(joint.value().data());
                }
                heads.push(joint.matmul(tape.concat_rows(&[vq, vs])?)?);
            }
            windows.push(if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)?
            });
        }
        if windows.len() == 1 {
            Ok(windows[0])
        } else {
            tape.concat_rows(&windows)
        }
    }

    /// Aligns support windows to query windows and builds the gathered rows.
    fn prepare<'t>(
        &self,
        cfg: &AttentionConfig,
        xq: Var<'t>,
        xs: Var<'t>,
        support_fg: &[bool],
        layout: &WindowLayout,
        p: &Bound<'t>,
    ) -> Result<(WindowInputs<'t>, AlignmentIndices)> {
        let area = layout.window_area();
        let query_protos = window_prototypes(&xq.value(), layout, None);
        let support_protos = window_prototypes(&xs.value(), layout, Some(support_fg));
        let aligned = align_patches(
            &query_protos.protos,
            &support_protos.protos,
            &support_protos.flags,
        )?;

        let query_index = layout.gather_index();
        let support_index: Rc<[Option<usize>]> = (0..layout.num_windows() * area)
            .map(|r| layout.source(aligned.indices[r / area], r % area))
            .collect();
        let self_valid = query_index.iter().map(Option::is_some).collect();
        let support_valid = support_index
            .iter()
            .map(|s| s.is_some_and(|px| support_fg[px]))
            .collect();

        let tq = xq.gather_rows(query_index)?;
        let ts = xs.gather_rows(support_index)?;
        let inputs = self.window_inputs(cfg, tq, ts, self_valid, support_valid, area, p)?;
        Ok((inputs, aligned))
    }

    /// One block on pixel-major `P×dim` query and support rows.
    ///
    /// `support_fg` holds the binary support mask per pixel. Returns the
    /// enhanced query rows, `P×dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_pixels<'t>(
        &self,
        cfg: &AttentionConfig,
        xq: Var<'t>,
        xs: Var<'t>,
        support_fg: &[bool],
        height: usize,
        width: usize,
        shifted: bool,
        p: &Bound<'t>,
    ) -> Result<Var<'t>> {
        cfg.validate()?;
        let shape = xq.shape();
        if shape != [height * width, cfg.dim] || xs.shape() != shape {
            return Err(Error::dim(
                "scca_block",
                format!(
                    "query {shape:?} / support {:?} for a {height}x{width} map of width {}",
                    xs.shape(),
                    cfg.dim
                ),
            ));
        }
        if support_fg.len() != height * width {
            return Err(Error::dim(
                "scca_block",
                "support mask does not cover the map",
            ));
        }
        let layout = WindowLayout::new(height, width, cfg.window, shifted)?;
        let (inputs, _) = self.prepare(cfg, xq, xs, support_fg, &layout, p)?;
        let attended = project(self.attend(cfg, &inputs, None)?, &self.out, cfg, p)?;
        let merged = attended.gather_rows(layout.scatter_index())?;
        let y = xq.add(merged)?;
        let hidden = self
            .ffn_in
            .forward(norm(y, &self.norm2, cfg, p)?, p)?
            .gelu()?;
        y.add(self.ffn_out.forward(hidden, p)?)
    }
}

fn pixel_inputs(
    fq: &Tensor,
    fs: &Tensor,
    ms: &Tensor,
) -> Result<(Tensor, Tensor, Vec<bool>, usize, usize)> {
    let (_, h, w) = fq.dims3("scca")?;
    if fs.shape() != fq.shape() {
        return Err(Error::dim(
            "scca",
            format!("query {:?} vs support {:?}", fq.shape(), fs.shape()),
        ));
    }
    if ms.numel() != h * w {
        return Err(Error::dim(
            "scca",
            format!("mask {:?} vs {h}x{w}", ms.shape()),
        ));
    }
    let fg = ms.data().iter().map(|&m| m > 0.0).collect();
    Ok((fq.to_pixel_major()?, fs.to_pixel_major()?, fg, h, w))
}

/// Scores of one block for windowed inputs.
///
/// `tq` and `ts_aligned` are `N²×K²×C` (support windows already aligned);
/// `query_valid` and `support_valid` are `N²×K²` key masks.
pub fn scca_scores(
    tq: &Tensor,
    ts_aligned: &Tensor,
    query_valid: &Tensor,
    support_valid: &Tensor,
    block: &SccaBlockParams,
    cfg: &AttentionConfig,
    store: &ParamStore,
) -> Result<AttentionScores> {
    cfg.validate()?;
    let [n, area, c] = tq.shape()[..] else {
        return Err(Error::dim(
            "scca_scores",
            format!("expected N²×K²×C, got {:?}", tq.shape()),
        ));
    };
    if ts_aligned.shape() != tq.shape() {
        return Err(Error::dim(
            "scca_scores",
            "query and support windows differ in shape",
        ));
    }
    if c != cfg.dim {
        return Err(Error::dim(
            "scca_scores",
            format!("{c} channels for width {}", cfg.dim),
        ));
    }
    if query_valid.numel() != n * area || support_valid.numel() != n * area {
        return Err(Error::dim(
            "scca_scores",
            "validity masks do not match windows",
        ));
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let tq = tape.constant(tq.reshape(&[n * area, c])?);
    let ts = tape.constant(ts_aligned.reshape(&[n * area, c])?);
    let flags = |t: &Tensor| t.data().iter().map(|&v| v != 0.0).collect::<Vec<_>>();
    let inputs = block.window_inputs(
        cfg,
        tq,
        ts,
        flags(query_valid),
        flags(support_valid),
        area,
        &p,
    )?;
    let mut sink = ScoreSink::default();
    block.attend(cfg, &inputs, Some(&mut sink))?;
    let heads = cfg.heads;
    let cat = |parts: Vec<Vec<f64>>| parts.into_iter().flatten().collect::<Vec<f64>>();
    Ok(AttentionScores {
        a_qq: Tensor::from_vec(&[heads, n, area, area], cat(sink.a_qq))?,
        a_qs: Tensor::from_vec(&[heads, n, area, area], cat(sink.a_qs))?,
        joint: Tensor::from_vec(&[heads, n, area, 2 * area], cat(sink.joint))?,
    })
}

/// Alignment indices the block would use for these inputs.
pub fn block_alignment(
    fq: &Tensor,
    fs: &Tensor,
    ms: &Tensor,
    window: usize,
    shifted: bool,
) -> Result<AlignmentIndices> {
    let (q, s, fg, h, w) = pixel_inputs(fq, fs, ms)?;
    let layout = WindowLayout::new(h, w, window, shifted)?;
    let qp = window_prototypes(&q, &layout, None);
    let sp = window_prototypes(&s, &layout, Some(&fg));
    align_patches(&qp.protos, &sp.protos, &sp.flags)
}

/// One block on `C×H×W` maps.
pub fn scca_block_forward(
    fq: &Tensor,
    fs: &Tensor,
    ms: &Tensor,
    block: &SccaBlockParams,
    cfg: &AttentionConfig,
    shifted: bool,
    store: &ParamStore,
) -> Result<Tensor> {
    let (q, s, fg, h, w) = pixel_inputs(fq, fs, ms)?;
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = block.forward_pixels(
        cfg,
        tape.constant(q),
        tape.constant(s),
        &fg,
        h,
        w,
        shifted,
        &p,
    )?;
    Tensor::from_pixel_major(&out.value(), h, w)
}

/// A stack of blocks; odd-indexed blocks use the shifted lattice.
#[derive(Debug, Clone)]
pub struct SccaStack {
    pub cfg: AttentionConfig,
    pub blocks: Vec<SccaBlockParams>,
}

impl SccaStack {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        cfg: AttentionConfig,
        depth: usize,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| SccaBlockParams::new(store, init, &format!("block{i}"), &cfg))
            .collect();
        Self { cfg, blocks }
    }

    pub fn shifted(index: usize) -> bool {
        index % 2 == 1
    }

    /// Runs every block; support rows stay fixed across blocks.
    pub fn forward_pixels<'t>(
        &self,
        xq: Var<'t>,
        xs: Var<'t>,
        support_fg: &[bool],
        height: usize,
        width: usize,
        p: &Bound<'t>,
    ) -> Result<Var<'t>> {
        let mut q = xq;
        for (i, block) in self.blocks.iter().enumerate() {
            q = block.forward_pixels(
                &self.cfg,
                q,
                xs,
                support_fg,
                height,
                width,
                Self::shifted(i),
                p,
            )?;
        }
        Ok(q)
    }
}

/// Final query map after every block of `stack`.
pub fn stack_forward(
    fq0: &Tensor,
    fs0: &Tensor,
    ms: &Tensor,
    stack: &SccaStack,
    store: &ParamStore,
) -> Result<Tensor> {
    let (q, s, fg, h, w) = pixel_inputs(fq0, fs0, ms)?;
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = stack.forward_pixels(tape.constant(q), tape.constant(s), &fg, h, w, &p)?;
    Tensor::from_pixel_major(&out.value(), h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::partition;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn literal(dim: usize, window: usize) -> AttentionConfig {
        AttentionConfig {
            dim,
            heads: 1,
            window,
            mlp_ratio: 1,
            mode: BlockMode::Literal,
        }
    }

    fn block(cfg: &AttentionConfig) -> (ParamStore, SccaBlockParams) {
        let mut store = ParamStore::new();
        let b = SccaBlockParams::new(&mut store, &mut Init::new(3), "b", cfg);
        (store, b)
    }

    #[test]
    fn prototypes_examples() {
        let feat = Tensor::full(&[2, 2, 2], 1.25);
        let g = partition(&feat, 2, false).unwrap();
        let pp = patch_prototypes(&g, None).unwrap();
        assert_eq!(pp.protos.data(), &[1.25, 1.25]);

        let feat = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mask = t(&[1, 2, 2], &[0.0, 0.0, 1.0, 0.0]);
        let pp = patch_prototypes(
            &partition(&feat, 2, false).unwrap(),
            Some(&partition(&mask, 2, false).unwrap()),
        )
        .unwrap();
        assert_eq!(pp.protos.data(), &[3.0]);

        let g = partition(&Tensor::ones(&[1, 4, 4]), 2, true).unwrap();
        let m = partition(&t(&[1, 4, 4], &[0.0; 16]), 2, true).unwrap();
        let pp = patch_prototypes(&g, Some(&m)).unwrap();
        assert!(pp.flags.iter().all(|f| !f));
        assert!(pp.protos.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alignment_examples() {
        let q = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let s = t(&[3, 2], &[0.9, 0.1, 0.0, 1.0, 1.0, 1.0]);
        let a = align_patches(&q, &s, &[true, false, true]).unwrap();
        assert_eq!(a.indices, vec![0, 2]);

        let p = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.2]);
        assert_eq!(
            align_patches(&p, &p, &[true; 3]).unwrap().indices,
            vec![0, 1, 2]
        );
        assert_eq!(
            align_patches(&p, &p, &[false, true, false])
                .unwrap()
                .indices,
            vec![1, 1, 1]
        );
        assert!(matches!(
            align_patches(&p, &p, &[false; 3]),
            Err(Error::NoValidSupport)
        ));
    }

    #[test]
    fn negative_cosines_still_pick_a_valid_patch() {
        let q = t(&[1, 2], &[1.0, 0.0]);
        let s = t(&[2, 2], &[0.0, 0.0, -1.0, 0.1]);
        assert_eq!(
            align_patches(&q, &s, &[false, true]).unwrap().indices,
            vec![1]
        );
    }

    #[test]
    fn hand_example_joint_weights() {
        let cfg = literal(2, 1);
        let (store, b) = block(&cfg);
        let s = scca_scores(
            &t(&[1, 1, 2], &[3.0, 0.0]),
            &t(&[1, 1, 2], &[1.0, 0.0]),
            &Tensor::ones(&[1, 1]),
            &Tensor::ones(&[1, 1]),
            &b,
            &cfg,
            &store,
        )
        .unwrap();
        assert!((s.a_qq.data()[0] - 9.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.a_qs.data(), &[1.0]);
        assert!((s.joint.data()[0] - 0.99534).abs() < 1e-5);
        assert!((s.joint.data()[1] - 0.00466).abs() < 1e-5);
    }

    #[test]
    fn masked_support_gets_no_mass() {
        let cfg = AttentionConfig {
            dim: 4,
            heads: 2,
            window: 2,
            mlp_ratio: 1,
            mode: BlockMode::Standard,
        };
        let (store, b) = block(&cfg);
        let tq = Tensor::from_vec(
            &[1, 4, 4],
            (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let ts = Tensor::from_vec(
            &[1, 4, 4],
            (0..16).map(|i| (i as f64 * 0.91).cos()).collect(),
        )
        .unwrap();
        let s = scca_scores(
            &tq,
            &ts,
            &Tensor::ones(&[1, 4]),
            &Tensor::zeros(&[1, 4]),
            &b,
            &cfg,
            &store,
        )
        .unwrap();
        for row in s.joint.data().chunks(8) {
            assert!((row[..4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[4..].iter().sum::<f64>() < 1e-12);
        }
    }

    #[test]
    fn zero_output_and_ffn_is_identity() {
        let cfg = AttentionConfig {
            dim: 4,
            heads: 2,
            window: 2,
            mlp_ratio: 1,
            mode: BlockMode::Standard,
        };
        let (mut store, b) = block(&cfg);
        for id in [b.out.weight, b.out.bias, b.ffn_out.weight, b.ffn_out.bias] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let fq = Tensor::from_vec(
            &[4, 4, 4],
            (0..64).map(|i| (i as f64 * 0.13).sin()).collect(),
        )
        .unwrap();
        let fs = Tensor::from_vec(
            &[4, 4, 4],
            (0..64).map(|i| (i as f64 * 0.29).cos()).collect(),
        )
        .unwrap();
        let ms = t(
            &[1, 4, 4],
            &[
                0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
            ],
        );
        for shifted in [false, true] {
            let out = scca_block_forward(&fq, &fs, &ms, &b, &cfg, shifted, &store).unwrap();
            assert!(out.max_abs_diff(&fq) < 1e-12);
        }
    }

    #[test]
    fn head_dim_mismatch() {
        let cfg = AttentionConfig {
            dim: 6,
            heads: 4,
            ..AttentionConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
