//! Dense row-major tensors and the forward kernels everything else is built on.
//!
//! Storage is always `f64`. A tensor tagged [`DType::F32`] keeps its values
//! rounded to single precision, so the tag controls both the precision seen by
//! downstream code and the width written to disk.

use crate::error::{Error, Result};

/// Norm floor used by every cosine and normalization kernel.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    fn round(self, data: &mut [f64]) {
        if self == DType::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Dense rank-N array with optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        dtype.round(&mut data);
        Ok(Self {
            shape: shape.to_vec(),
            dtype,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor whose values follow the dtype of `like`.
    pub(crate) fn derived(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        dtype.round(&mut data);
        Self {
            shape,
            dtype,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Values written here are not rounded
    /// to the tensor's dtype until [`Tensor::to_dtype`] is called.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        dtype.round(&mut self.data);
        self
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        let mut out = self.clone();
        out.shape = shape.to_vec();
        out.grad = None;
        Ok(out)
    }

    /// Value at a multi-index. Panics when the index is out of bounds.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                ix < dim,
                "index {ix} out of bounds for axis {i} of size {dim}"
            );
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.numel() {
            return Err(Error::dim(
                "accumulate_grad",
                format!(
                    "gradient has {} values, tensor {}",
                    delta.len(),
                    self.numel()
                ),
            ));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                op: op.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::dim(
                op,
                format!("expected a matrix, got shape {other:?}"),
            )),
        }
    }

    /// Splits a `C×H×W` map into its dimensions.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::dim(
                op,
                format!("expected C×H×W, got shape {other:?}"),
            )),
        }
    }

    /// Channel-first `C×H×W` map to pixel-major `HW×C` matrix.
    pub fn to_pixel_major(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3("to_pixel_major")?;
        let flat = self.reshape(&[c, h * w])?;
        transpose(&flat)
    }

    /// Pixel-major `HW×C` matrix back to a `C×H×W` map.
    pub fn from_pixel_major(pix: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let (p, c) = pix.dims2("from_pixel_major")?;
        if p != height * width {
            return Err(Error::dim(
                "from_pixel_major",
                format!("{p} pixels cannot form a {height}x{width} map"),
            ));
        }
        transpose(pix)?.reshape(&[c, height, width])
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
    Ok(Tensor::derived(vec![m, n], out, a.dtype))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::derived(vec![n, m], out, a.dtype))
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let n = *x.shape.last().expect("tensors have rank >= 1");
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::derived(x.shape.clone(), out, x.dtype)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_sim_matrix(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    let (p, d) = a.dims2("cosine_sim_matrix")?;
    let (q, d2) = b.dims2("cosine_sim_matrix")?;
    if d != d2 {
        return Err(Error::dim(
            "cosine_sim_matrix",
            format!("feature dims {d} vs {d2}"),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "cosine eps must be positive, got {eps}"
        )));
    }
    let an = row_normalized(&a.data, d, eps);
    let bn = row_normalized(&b.data, d, eps);
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let ar = &an[i * d..(i + 1) * d];
        for j in 0..q {
            let br = &bn[j * d..(j + 1) * d];
            out[i * q + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::derived(vec![p, q], out, a.dtype))
}

/// Divides each length-`d` row by `max(‖row‖, eps)`.
pub(crate) fn row_normalized(data: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Per-channel mean of `feat` over the pixels where `mask` is 1.
pub fn masked_average_pool(feat: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = feat.dims3("masked_average_pool")?;
    if mask.numel() != h * w {
        return Err(Error::dim(
            "masked_average_pool",
            format!("mask {:?} does not cover a {h}x{w} map", mask.shape()),
        ));
    }
    let count = mask.data.iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::EmptyRegion("masked_average_pool"));
    }
    let hw = h * w;
    let out = (0..c)
        .map(|ch| {
            let plane = &feat.data[ch * hw..(ch + 1) * hw];
            plane
                .iter()
                .zip(&mask.data)
                .filter(|(_, &m)| m != 0.0)
                .map(|(v, _)| v)
                .sum::<f64>()
                / count as f64
        })
        .collect();
    Ok(Tensor::derived(vec![c], out, feat.dtype))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_dot() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        assert!(matmul(&a, &Tensor::zeros(&[2, 2]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastdim(&t(&[2], &[0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastdim(&t(&[2], &[1.0, 0.0]));
        let e = 1f64.exp();
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.73106).abs() < 1e-5);
        let s = softmax_lastdim(&t(&[2], &[1000.0, 0.0]));
        assert!(s.data().iter().all(|v| v.is_finite()));
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        let v = t(&[1, 3], &[0.3, -2.0, 1.5]);
        assert!((cosine_sim_matrix(&v, &v, NORM_EPS).unwrap().data()[0] - 1.0).abs() < 1e-12);
        let x = t(&[1, 2], &[1.0, 0.0]);
        let y = t(&[1, 2], &[0.0, 1.0]);
        assert_eq!(cosine_sim_matrix(&x, &y, NORM_EPS).unwrap().data(), &[0.0]);
        let s = t(&[1, 2], &[3.0, 0.0]);
        assert_eq!(cosine_sim_matrix(&s, &x, NORM_EPS).unwrap().data(), &[1.0]);
        // zero vector guarded by eps
        let z = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(cosine_sim_matrix(&z, &x, NORM_EPS).unwrap().data(), &[0.0]);
    }

    #[test]
    fn masked_pool_examples() {
        let feat = Tensor::full(&[3, 2, 2], 1.5);
        let mask = t(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(masked_average_pool(&feat, &mask).unwrap().data(), &[1.5; 3]);

        // two pixels with features [1,2] and [3,4] in a 2-channel 1x2 map
        let feat = t(&[2, 1, 2], &[1.0, 3.0, 2.0, 4.0]);
        let mask = t(&[1, 1, 2], &[1.0, 0.0]);
        assert_eq!(
            masked_average_pool(&feat, &mask).unwrap().data(),
            &[1.0, 2.0]
        );
        let all = t(&[1, 1, 2], &[1.0, 1.0]);
        assert_eq!(
            masked_average_pool(&feat, &all).unwrap().data(),
            &[2.0, 3.0]
        );

        let none = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(
            masked_average_pool(&feat, &none),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn f32_tag_rounds_storage() {
        let x = Tensor::with_dtype(&[1], vec![0.1], DType::F32).unwrap();
        assert_eq!(x.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn shape_invariants() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[0, 2], vec![]).is_err());
        let m = Tensor::from_vec(&[2, 1, 3], (0..6).map(f64::from).collect()).unwrap();
        let pix = m.to_pixel_major().unwrap();
        assert_eq!(pix.shape(), &[3, 2]);
        assert_eq!(pix.at(&[1, 1]), 4.0);
        assert_eq!(Tensor::from_pixel_major(&pix, 1, 3).unwrap(), m);
    }

    #[test]
    fn grad_accumulates() {
        let mut x = Tensor::zeros(&[2]);
        x.accumulate_grad(&[1.0, 2.0]).unwrap();
        x.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(x.grad().unwrap(), &[2.0, 4.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), &[0.0, 0.0]);
    }
}
