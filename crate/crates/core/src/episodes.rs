//! Few-shot episodes: synthetic generation, k-shot reduction, box masks and
//! the on-disk episode directory.
//!
//! The generator stands in for a pretrained backbone. Every class owns a
//! fixed unit direction in feature space; foreground pixels are that
//! direction plus Gaussian noise, background pixels are directions of other
//! classes plus noise. Mid- and high-level features share the layout and
//! differ only in their noise draws.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sctf;
use crate::tensor::Tensor;

const DIRECTION_SEED: u64 = 0x5CCA_D1EC;
const DISTRACTORS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Bounding extent of a blob, in pixels.
    pub blob: usize,
    /// Standard deviation of per-component Gaussian noise.
    pub noise: f64,
    pub shots: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            channels: 32,
            height: 16,
            width: 16,
            classes: 8,
            blob: 8,
            noise: 0.1,
            shots: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return fail("feature map dimensions must be positive".into());
        }
        if self.classes < 1 + DISTRACTORS {
            return fail(format!("need at least {} classes", 1 + DISTRACTORS));
        }
        if self.blob < 2 || self.blob > self.height.min(self.width) {
            return fail(format!(
                "blob size {} does not fit a {}x{} map",
                self.blob, self.height, self.width
            ));
        }
        if self.shots == 0 {
            return fail("shots must be at least 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!(
                "noise {} is not a valid standard deviation",
                self.noise
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighFeatures {
    pub query: Tensor,
    /// k-shot average of the support high-level features.
    pub support: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub query_feat: Tensor,
    pub query_mask: Tensor,
    pub support_feats: Vec<Tensor>,
    pub support_masks: Vec<Tensor>,
    pub class_id: u32,
    pub high_feats: Option<HighFeatures>,
}

fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support_feats.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.query_feat.dims3("episode")?;
        let mask_shape = [1, h, w];
        let bad = |m: String| Err(Error::Shape(m));
        if self.query_mask.shape() != mask_shape || !is_binary(&self.query_mask) {
            return bad("query mask must be a binary 1×H×W map".into());
        }
        if self.support_feats.is_empty() || self.support_feats.len() != self.support_masks.len() {
            return bad(format!(
                "{} support features vs {} support masks",
                self.support_feats.len(),
                self.support_masks.len()
            ));
        }
        for (i, (f, m)) in self
            .support_feats
            .iter()
            .zip(&self.support_masks)
            .enumerate()
        {
            if f.shape() != [c, h, w] {
                return bad(format!(
                    "support {i} features {:?} vs query {:?}",
                    f.shape(),
                    [c, h, w]
                ));
            }
            if m.shape() != mask_shape || !is_binary(m) {
                return bad(format!("support {i} mask must be a binary 1×H×W map"));
            }
            if !m.data().contains(&1.0) {
                return Err(Error::EmptyRegion("support mask foreground"));
            }
        }
        if let Some(hf) = &self.high_feats {
            let (_, hh, hw) = hf.query.dims3("episode high features")?;
            if (hh, hw) != (h, w) || hf.support.shape() != hf.query.shape() {
                return bad("high-level features must share the spatial grid".into());
            }
        }
        Ok(())
    }
}

/// Fixed unit direction for each class.
pub fn class_directions(channels: usize, classes: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(DIRECTION_SEED ^ (channels as u64) << 20);
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..channels).map(|_| rng.sample(StandardNormal)).collect();
            let n = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Random ellipse inscribed in a `blob×blob` box at a random position.
fn blob_mask(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<bool> {
    let (h, w) = (spec.height, spec.width);
    let half = spec.blob as f64 / 2.0;
    let lo = (half / 2.0).max(1.0);
    let ry = rng.random_range(lo..=half);
    let rx = rng.random_range(lo..=half);
    let cy = rng.random_range(ry..=h as f64 - ry);
    let cx = rng.random_range(rx..=w as f64 - rx);
    (0..h * w)
        .map(|p| {
            let dy = ((p / w) as f64 + 0.5 - cy) / ry;
            let dx = ((p % w) as f64 + 0.5 - cx) / rx;
            dy * dy + dx * dx <= 1.0
        })
        .collect()
}

/// Per-pixel class label for one image: `class` on the blob, distractors elsewhere.
fn label_map(rng: &mut ChaCha8Rng, fg: &[bool], class: usize, classes: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..classes).filter(|&c| c != class).collect();
    others.shuffle(rng);
    let distractors = &others[..DISTRACTORS];
    fg.iter()
        .map(|&f| {
            if f {
                class
            } else {
                distractors[rng.random_range(0..DISTRACTORS)]
            }
        })
        .collect()
}

fn render(rng: &mut ChaCha8Rng, labels: &[usize], dirs: &[Vec<f64>], spec: &SynthSpec) -> Tensor {
    let (c, hw) = (spec.channels, spec.height * spec.width);
    let mut data = vec![0.0; c * hw];
    for (p, &label) in labels.iter().enumerate() {
        for ch in 0..c {
            let noise: f64 = rng.sample(StandardNormal);
            data[ch * hw + p] = dirs[label][ch] + spec.noise * noise;
        }
    }
    Tensor::from_vec(&[c, spec.height, spec.width], data).expect("spec dimensions are positive")
}

fn mask_tensor(fg: &[bool], spec: &SynthSpec) -> Tensor {
    let data = fg.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[1, spec.height, spec.width], data).expect("spec dimensions are positive")
}

/// Episode of a random class.
pub fn synth_episode(seed: u64, spec: &SynthSpec) -> Result<Episode> {
    spec.validate()?;
    let class = ChaCha8Rng::seed_from_u64(seed).random_range(0..spec.classes);
    synth_episode_for_class(seed, spec, class as u32)
}

/// Episode of a given class; deterministic in `(seed, spec, class)`.
pub fn synth_episode_for_class(seed: u64, spec: &SynthSpec, class_id: u32) -> Result<Episode> {
    spec.validate()?;
    let class = class_id as usize;
    if class >= spec.classes {
        return Err(Error::Generation(format!(
            "class {class} outside 0..{}",
            spec.classes
        )));
    }
    let dirs = class_directions(spec.channels, spec.classes);
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class as u64);

    let draw_image = |rng: &mut ChaCha8Rng| {
        let fg = blob_mask(rng, spec);
        let labels = label_map(rng, &fg, class, spec.classes);
        let mid = render(rng, &labels, &dirs, spec);
        let high = render(rng, &labels, &dirs, spec);
        (mask_tensor(&fg, spec), mid, high)
    };

    let (query_mask, query_feat, query_high) = draw_image(&mut rng);
    let mut support_feats = Vec::with_capacity(spec.shots);
    let mut support_masks = Vec::with_capacity(spec.shots);
    let mut support_high = Vec::with_capacity(spec.shots);
    for _ in 0..spec.shots {
        let (m, f, h) = draw_image(&mut rng);
        support_masks.push(m);
        support_feats.push(f);
        support_high.push(h);
    }
    let (support_high, _) = kshot_average(&support_high, &support_masks)?;
    Ok(Episode {
        query_feat,
        query_mask,
        support_feats,
        support_masks,
        class_id,
        high_feats: Some(HighFeatures {
            query: query_high,
            support: support_high,
        }),
    })
}

fn mean_of(tensors: &[Tensor], op: &'static str) -> Result<Tensor> {
    let first = tensors.first().ok_or(Error::EmptyRegion(op))?;
    let mut acc = vec![0.0; first.numel()];
    for t in tensors {
        if t.shape() != first.shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
        acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += v);
    }
    let k = tensors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Tensor::with_dtype(first.shape(), acc, first.dtype())
}

/// Mean of the k support masks (soft foreground).
pub fn mean_mask(masks: &[Tensor]) -> Result<Tensor> {
    mean_of(masks, "kshot masks")
}

/// Averages k support feature maps; the mask is 1 wherever any shot is foreground.
pub fn kshot_average(feats: &[Tensor], masks: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if feats.len() != masks.len() {
        return Err(Error::dim(
            "kshot_average",
            format!("{} feature maps vs {} masks", feats.len(), masks.len()),
        ));
    }
    if feats.len() == 1 {
        return Ok((feats[0].clone(), masks[0].clone()));
    }
    let feat = mean_of(feats, "kshot features")?;
    let soft = mean_mask(masks)?;
    let data = soft
        .data()
        .iter()
        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let mask = Tensor::with_dtype(soft.shape(), data, soft.dtype())?;
    Ok((feat, mask))
}

/// Filled inclusive rectangle `(x0, y0)..=(x1, y1)` as a `1×H×W` mask.
pub fn bbox_to_mask(
    bbox: (usize, usize, usize, usize),
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (x0, y0, x1, y1) = bbox;
    if !(x0 <= x1 && x1 < width && y0 <= y1 && y1 < height) {
        return Err(Error::Shape(format!(
            "box ({x0},{y0},{x1},{y1}) is not inside a {height}x{width} image"
        )));
    }
    let data = (0..height * width)
        .map(|p| {
            let (y, x) = (p / width, p % width);
            if (y0..=y1).contains(&y) && (x0..=x1).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(&[1, height, width], data)
}

pub const MANIFEST: &str = "manifest.txt";

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key=value",
                origin.display(),
                n + 1
            ))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn manifest_field<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Config(format!("{}: missing `{key}`", path.display())))?
        .parse()
        .map_err(|_| Error::Config(format!("{}: bad value for `{key}`", path.display())))
}

pub fn save_episode(ep: &Episode, dir: impl AsRef<Path>) -> Result<()> {
    ep.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = ep.query_feat.dims3("save_episode")?;
    sctf::save(&ep.query_feat, dir.join("query.feat"))?;
    sctf::save(&ep.query_mask, dir.join("query.mask"))?;
    for (i, (f, m)) in ep.support_feats.iter().zip(&ep.support_masks).enumerate() {
        sctf::save(f, dir.join(format!("support_{i}.feat")))?;
        sctf::save(m, dir.join(format!("support_{i}.mask")))?;
    }
    if let Some(hf) = &ep.high_feats {
        sctf::save(&hf.query, dir.join("query_high.feat"))?;
        sctf::save(&hf.support, dir.join("support_high.feat"))?;
    }
    let manifest = format!(
        "class_id={}\nk={}\nchannels={c}\nheight={h}\nwidth={w}\nhigh={}\n",
        ep.class_id,
        ep.shots(),
        ep.high_feats.is_some()
    );
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn load_episode(dir: impl AsRef<Path>) -> Result<Episode> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let map = parse_key_values(&text, &path)?;
    let k: usize = manifest_field(&map, "k", &path)?;
    let class_id: u32 = manifest_field(&map, "class_id", &path)?;
    let channels: usize = manifest_field(&map, "channels", &path)?;
    let height: usize = manifest_field(&map, "height", &path)?;
    let width: usize = manifest_field(&map, "width", &path)?;
    let high: bool = map.get("high").map_or(Ok(false), |v| {
        v.parse()
            .map_err(|_| Error::Config(format!("{}: bad value for `high`", path.display())))
    })?;
    if k == 0 {
        return Err(Error::Config(format!(
            "{}: k must be at least 1",
            path.display()
        )));
    }
    if dir.join(format!("support_{k}.feat")).exists() {
        return Err(Error::Config(format!(
            "{}: manifest declares k={k} but support_{k}.feat is present",
            path.display()
        )));
    }
    let load = |name: String| -> Result<Tensor> {
        let file = dir.join(&name);
        if !file.exists() {
            return Err(Error::io(
                file,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "file listed by manifest is missing",
                ),
            ));
        }
        sctf::load(file)
    };
    let mut support_feats = Vec::with_capacity(k);
    let mut support_masks = Vec::with_capacity(k);
    for i in 0..k {
        support_feats.push(load(format!("support_{i}.feat"))?);
        support_masks.push(load(format!("support_{i}.mask"))?);
    }
    let high_feats = if high {
        Some(HighFeatures {
            query: load("query_high.feat".into())?,
            support: load("support_high.feat".into())?,
        })
    } else {
        None
    };
    let ep = Episode {
        query_feat: load("query.feat".into())?,
        query_mask: load("query.mask".into())?,
        support_feats,
        support_masks,
        class_id,
        high_feats,
    };
    if ep.query_feat.shape() != [channels, height, width] {
        return Err(Error::Config(format!(
            "{}: manifest shape {channels}x{height}x{width} does not match query.feat {:?}",
            path.display(),
            ep.query_feat.shape()
        )));
    }
    ep.validate()?;
    Ok(ep)
}
