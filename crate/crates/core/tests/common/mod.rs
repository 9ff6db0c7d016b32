//! Brute-force reference implementations, written directly from the
//! definitions with explicit loops and no library kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sccan::params::ParamStore;
use sccan::Tensor;

pub const EPS: f64 = 1e-8;
pub const LN_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    tensor(shape, uniform(rng, n))
}

/// Binary `1×H×W` mask with at least one foreground pixel.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let mut data: Vec<f64> = (0..h * w)
        .map(|_| f64::from(rng.random_bool(0.4)))
        .collect();
    let forced = rng.random_range(0..h * w);
    data[forced] = 1.0;
    tensor(&[1, h, w], data)
}

/// Overwrites every parameter with random values; scales stay near one.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let gamma = store.name(id).ends_with(".gamma");
        let data = (0..n)
            .map(|_| {
                let v = rng.random_range(-0.5..0.5);
                if gamma {
                    1.0 + v
                } else {
                    v
                }
            })
            .collect();
        store.set(id, tensor(&shape, data)).unwrap();
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn all_rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| rel_close(*x, *y, tol))
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a).max(EPS) * norm(b).max(EPS))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Feature vector of pixel `p` from a `C×H×W` map.
pub fn pixel(feat: &Tensor, p: usize) -> Vec<f64> {
    let c = feat.shape()[0];
    let hw = feat.numel() / c;
    (0..c).map(|ch| feat.data()[ch * hw + p]).collect()
}

fn min_max(v: Vec<f64>) -> Vec<f64> {
    let mut lo = v[0];
    let mut hi = v[0];
    for &x in &v {
        if x < lo {
            lo = x;
        }
        if x > hi {
            hi = x;
        }
    }
    if hi - lo <= 1e-8 {
        v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect()
    } else {
        v.into_iter().map(|x| (x - lo) / (hi - lo)).collect()
    }
}

pub fn pma_aggregated(fq: &Tensor, fs: &Tensor, ms: &Tensor) -> Vec<f64> {
    let p = ms.numel();
    let mut raw = Vec::with_capacity(p);
    for i in 0..p {
        let qi = pixel(fq, i);
        let sims: Vec<f64> = (0..p).map(|j| cosine(&qi, &pixel(fs, j))).collect();
        let w = softmax(&sims);
        let mut v = 0.0;
        for j in 0..p {
            v += w[j] * ms.data()[j];
        }
        raw.push(v);
    }
    min_max(raw)
}

pub fn pma_max_similarity(fq: &Tensor, fs: &Tensor, ms: &Tensor) -> Vec<f64> {
    let p = ms.numel();
    let raw = (0..p)
        .map(|i| {
            let qi = pixel(fq, i);
            let mut best = f64::NEG_INFINITY;
            for j in 0..p {
                if ms.data()[j] == 1.0 {
                    best = best.max(cosine(&qi, &pixel(fs, j)));
                }
            }
            best
        })
        .collect();
    min_max(raw)
}

/// Pixels of window `win`, in window-position order; `None` for padding.
pub fn window_pixels(
    h: usize,
    w: usize,
    k: usize,
    shifted: bool,
    win: usize,
) -> Vec<Option<usize>> {
    let off = if shifted { k / 2 } else { 0 };
    let cols = (w + off).div_ceil(k);
    let (gr, gc) = (win / cols, win % cols);
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let y = (gr * k + i) as isize - off as isize;
            let x = (gc * k + j) as isize - off as isize;
            let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
            out.push(inside.then(|| y as usize * w + x as usize));
        }
    }
    out
}

pub fn window_count(h: usize, w: usize, k: usize, shifted: bool) -> usize {
    let off = if shifted { k / 2 } else { 0 };
    (h + off).div_ceil(k) * (w + off).div_ceil(k)
}

/// Aligned support window per query window.
pub fn alignment(
    fq: &Tensor,
    fs: &Tensor,
    ms: &Tensor,
    k: usize,
    shifted: bool,
) -> Option<Vec<usize>> {
    let (c, h, w) = (fq.shape()[0], fq.shape()[1], fq.shape()[2]);
    let n = window_count(h, w, k, shifted);
    let mean = |feat: &Tensor, pixels: &[usize]| -> Vec<f64> {
        let mut m = vec![0.0; c];
        for &p in pixels {
            let v = pixel(feat, p);
            for ch in 0..c {
                m[ch] += v[ch];
            }
        }
        m.iter().map(|x| x / pixels.len() as f64).collect()
    };
    let mut qp = Vec::new();
    let mut sp: Vec<Option<Vec<f64>>> = Vec::new();
    for win in 0..n {
        let px: Vec<usize> = window_pixels(h, w, k, shifted, win)
            .into_iter()
            .flatten()
            .collect();
        qp.push(mean(fq, &px));
        let fg: Vec<usize> = px.into_iter().filter(|&p| ms.data()[p] == 1.0).collect();
        sp.push((!fg.is_empty()).then(|| mean(fs, &fg)));
    }
    if sp.iter().all(Option::is_none) {
        return None;
    }
    Some(
        qp.iter()
            .map(|q| {
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for (j, s) in sp.iter().enumerate() {
                    if let Some(s) = s {
                        let v = cosine(q, s);
                        if v > best.1 {
                            best = (j, v);
                        }
                    }
                }
                best.0
            })
            .collect(),
    )
}

/// Weight `[in×out]` and bias `[out]` of a linear layer named `name`.
pub fn linear_params(store: &ParamStore, name: &str) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let w = store.get(store.find(&format!("{name}.weight")).unwrap());
    let b = store.get(store.find(&format!("{name}.bias")).unwrap());
    (
        w.data().to_vec(),
        b.data().to_vec(),
        w.shape()[0],
        w.shape()[1],
    )
}

pub fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let (w, b, i, o) = linear_params(store, name);
    let rows = x.len() / i;
    let mut y = matmul(x, &w, rows, i, o);
    for r in 0..rows {
        for c in 0..o {
            y[r * o + c] += b[c];
        }
    }
    y
}

pub fn layer_norm(store: &ParamStore, name: &str, x: &[f64], d: usize) -> Vec<f64> {
    let g = store
        .get(store.find(&format!("{name}.gamma")).unwrap())
        .data()
        .to_vec();
    let b = store
        .get(store.find(&format!("{name}.beta")).unwrap())
        .data()
        .to_vec();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + LN_EPS).sqrt() * g[i] + b[i]);
        }
    }
    out
}

/// Per-pixel `dim → hidden → 2` MLP with GELU and softmax; `P×2`.
pub fn decode(store: &ParamStore, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(store, "decoder.hidden", x)
        .into_iter()
        .map(gelu)
        .collect();
    linear(store, "decoder.logits", &h)
        .chunks(2)
        .flat_map(softmax)
        .collect()
}

/// One block over a map that is exactly one window: pre-norm projections,
/// joint softmax over `[QK/√d | cos(Q, K_S)]`, output projection, residual,
/// and the normalized GELU feed-forward with its own residual.
pub fn single_window_block(
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    xq: &[f64],
    xs: &[f64],
    support_fg: &[bool],
) -> Vec<f64> {
    let p = support_fg.len();
    let d = xq.len() / p;
    let hd = d / heads;
    let nq = layer_norm(store, &format!("{prefix}.norm1"), xq, d);
    let ns = layer_norm(store, &format!("{prefix}.norm1"), xs, d);
    let q = linear(store, &format!("{prefix}.attn.query"), &nq);
    let kq = linear(store, &format!("{prefix}.attn.key"), &nq);
    let vq = linear(store, &format!("{prefix}.attn.value"), &nq);
    let ks = linear(store, &format!("{prefix}.attn.key"), &ns);
    let vs = linear(store, &format!("{prefix}.attn.value"), &ns);
    let head = |m: &[f64], r: usize, h: usize| m[r * d + h * hd..r * d + (h + 1) * hd].to_vec();

    let mut attn = vec![0.0; p * d];
    for h in 0..heads {
        for i in 0..p {
            let qi = head(&q, i, h);
            let mut logits = Vec::with_capacity(2 * p);
            for j in 0..p {
                logits.push(dot(&qi, &head(&kq, j, h)) / (hd as f64).sqrt());
            }
            for j in 0..p {
                let c = cosine(&qi, &head(&ks, j, h));
                logits.push(if support_fg[j] { c } else { c - 1e9 });
            }
            let wts = softmax(&logits);
            for j in 0..p {
                let (a, b) = (head(&vq, j, h), head(&vs, j, h));
                for t in 0..hd {
                    attn[i * d + h * hd + t] += wts[j] * a[t] + wts[p + j] * b[t];
                }
            }
        }
    }
    let o = linear(store, &format!("{prefix}.attn.out"), &attn);
    let y: Vec<f64> = xq.iter().zip(&o).map(|(a, b)| a + b).collect();
    let n2 = layer_norm(store, &format!("{prefix}.norm2"), &y, d);
    let hidden: Vec<f64> = linear(store, &format!("{prefix}.ffn.in"), &n2)
        .into_iter()
        .map(gelu)
        .collect();
    let f = linear(store, &format!("{prefix}.ffn.out"), &hidden);
    y.iter().zip(&f).map(|(a, b)| a + b).collect()
}
