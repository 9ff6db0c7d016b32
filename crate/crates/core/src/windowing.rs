//! Partition of feature maps into K×K windows and the exact inverse.
//!
//! Shifted layouts move the window lattice by `⌊K/2⌋` pixels in both axes and
//! zero-pad the irregular border windows. There is no cyclic roll: padded
//! positions carry validity 0 and must be ignored by consumers.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a window lattice over an `H×W` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shifted: bool,
    pub offset: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, shifted: bool) -> Result<Self> {
        if window == 0 || window > height || window > width {
            return Err(Error::WindowSize {
                window,
                height,
                width,
            });
        }
        let offset = if shifted { window / 2 } else { 0 };
        if !shifted && (!height.is_multiple_of(window) || !width.is_multiple_of(window)) {
            return Err(Error::Shape(format!(
                "{height}x{width} map is not divisible into {window}x{window} windows"
            )));
        }
        Ok(Self {
            height,
            width,
            window,
            shifted,
            offset,
            grid_rows: (height + offset).div_ceil(window),
            grid_cols: (width + offset).div_ceil(window),
        })
    }

    pub fn num_windows(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn window_area(&self) -> usize {
        self.window * self.window
    }

    /// Image coordinates of position `pos` inside window `win`, if inside the map.
    pub fn coords(&self, win: usize, pos: usize) -> Option<(usize, usize)> {
        let (wr, wc) = (win / self.grid_cols, win % self.grid_cols);
        let (pr, pc) = (pos / self.window, pos % self.window);
        let y = (wr * self.window + pr).checked_sub(self.offset)?;
        let x = (wc * self.window + pc).checked_sub(self.offset)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    /// Row-major pixel index feeding window position `pos` of window `win`.
    pub fn source(&self, win: usize, pos: usize) -> Option<usize> {
        self.coords(win, pos).map(|(y, x)| y * self.width + x)
    }

    /// Pixel source for every `(window, position)` row, windows in row-major order.
    pub fn gather_index(&self) -> Rc<[Option<usize>]> {
        let area = self.window_area();
        (0..self.num_windows() * area)
            .map(|r| self.source(r / area, r % area))
            .collect()
    }

    /// For every pixel, the `(window, position)` row holding it.
    pub fn scatter_index(&self) -> Rc<[Option<usize>]> {
        let mut inv = vec![None; self.height * self.width];
        for (row, src) in self.gather_index().iter().enumerate() {
            if let Some(p) = src {
                inv[*p] = Some(row);
            }
        }
        inv.into()
    }

    /// Validity flag per `(window, position)` row.
    pub fn validity(&self) -> Vec<bool> {
        self.gather_index().iter().map(Option::is_some).collect()
    }
}

/// A feature map split into windows, with per-position validity.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// `N²×C×K×K`.
    pub patches: Tensor,
    /// `N²×K×K`, 1 where the position maps to a real pixel.
    pub validity: Tensor,
    pub origin_shape: (usize, usize, usize),
    pub shifted: bool,
    pub shift_offset: usize,
    pub window: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl PatchGrid {
    pub fn layout(&self) -> Result<WindowLayout> {
        let (_, h, w) = self.origin_shape;
        WindowLayout::new(h, w, self.window, self.shifted)
    }

    pub fn num_windows(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

pub fn partition(feat: &Tensor, window: usize, shifted: bool) -> Result<PatchGrid> {
    let (c, h, w) = feat.dims3("partition")?;
    let layout = WindowLayout::new(h, w, window, shifted)?;
    let (n, area) = (layout.num_windows(), layout.window_area());
    let mut patches = vec![0.0; n * c * area];
    let mut validity = vec![0.0; n * area];
    let data = feat.data();
    for win in 0..n {
        for pos in 0..area {
            if let Some(p) = layout.source(win, pos) {
                validity[win * area + pos] = 1.0;
                for ch in 0..c {
                    patches[(win * c + ch) * area + pos] = data[ch * h * w + p];
                }
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::derived(vec![n, c, window, window], patches, feat.dtype()),
        validity: Tensor::derived(vec![n, window, window], validity, feat.dtype()),
        origin_shape: (c, h, w),
        shifted,
        shift_offset: layout.offset,
        window,
        grid_rows: layout.grid_rows,
        grid_cols: layout.grid_cols,
    })
}

pub fn merge(grid: &PatchGrid) -> Result<Tensor> {
    let (c, h, w) = grid.origin_shape;
    let layout = grid.layout()?;
    if layout.offset != grid.shift_offset
        || layout.grid_rows != grid.grid_rows
        || layout.grid_cols != grid.grid_cols
    {
        return Err(Error::Consistency(
            "lattice metadata does not match origin shape".into(),
        ));
    }
    let (n, area) = (layout.num_windows(), layout.window_area());
    let k = grid.window;
    if grid.patches.shape() != [n, c, k, k] || grid.validity.shape() != [n, k, k] {
        return Err(Error::Consistency(format!(
            "patches {:?} / validity {:?} do not match {n} windows of {c}x{k}x{k}",
            grid.patches.shape(),
            grid.validity.shape()
        )));
    }
    let mut out = vec![0.0; c * h * w];
    let mut covered = vec![0u32; h * w];
    let (pd, vd) = (grid.patches.data(), grid.validity.data());
    for win in 0..n {
        for pos in 0..area {
            let flag = vd[win * area + pos];
            if flag == 0.0 {
                continue;
            }
            if flag != 1.0 {
                return Err(Error::Consistency(format!(
                    "validity value {flag} is not binary"
                )));
            }
            let Some(p) = layout.source(win, pos) else {
                return Err(Error::Consistency(format!(
                    "window {win} position {pos} is marked valid but lies outside the map"
                )));
            };
            covered[p] += 1;
            for ch in 0..c {
                out[ch * h * w + p] = pd[(win * c + ch) * area + pos];
            }
        }
    }
    if let Some(p) = covered.iter().position(|&n| n != 1) {
        return Err(Error::Consistency(format!(
            "pixel ({}, {}) covered {} times",
            p / w,
            p % w,
            covered[p]
        )));
    }
    Ok(Tensor::derived(vec![c, h, w], out, grid.patches.dtype()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(
            &[c, h, w],
            (0..c * h * w).map(|i| i as f64 * 0.5 - 3.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unshifted_exact_tiling() {
        let g = partition(&ramp(1, 4, 4), 2, false).unwrap();
        assert_eq!(g.num_windows(), 4);
        assert!(g.validity.data().iter().all(|&v| v == 1.0));
        // window 1 is the top-right block
        assert_eq!(&g.patches.data()[4..8], &[-2.0, -1.5, 0.0, 0.5]);
    }

    #[test]
    fn shifted_4x4_has_nine_windows() {
        let g = partition(&ramp(1, 4, 4), 2, true).unwrap();
        assert_eq!(g.num_windows(), 9);
        assert_eq!(g.shift_offset, 1);
        let counts: Vec<usize> = g
            .validity
            .data()
            .chunks(4)
            .map(|w| w.iter().filter(|&&v| v == 1.0).count())
            .collect();
        assert_eq!(counts, vec![1, 2, 1, 2, 4, 2, 1, 2, 1]);
    }

    #[test]
    fn round_trip_and_plus_one() {
        for shifted in [false, true] {
            let f = ramp(3, 8, 8);
            let mut g = partition(&f, 4, shifted).unwrap();
            assert_eq!(merge(&g).unwrap(), f);
            for (i, v) in g.patches.data_mut().iter_mut().enumerate() {
                let win_pos = (i / (3 * 16)) * 16 + i % 16;
                if g.validity.data()[win_pos] == 1.0 {
                    *v += 1.0;
                }
            }
            let plus: Vec<f64> = f.data().iter().map(|v| v + 1.0).collect();
            assert_eq!(merge(&g).unwrap().data(), plus.as_slice());
        }
    }

    #[test]
    fn merge_of_zero_patches_is_zero() {
        let mut g = partition(&ramp(2, 4, 4), 2, true).unwrap();
        g.patches.data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(merge(&g).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            partition(&ramp(1, 4, 4), 5, false),
            Err(Error::WindowSize { .. })
        ));
        assert!(matches!(
            partition(&ramp(1, 6, 6), 4, false),
            Err(Error::Shape(_))
        ));
        // shifted lattices tolerate non-divisible maps
        assert!(partition(&ramp(1, 6, 6), 4, true).is_ok());

        let mut g = partition(&ramp(1, 4, 4), 2, false).unwrap();
        g.validity.data_mut()[0] = 0.0;
        assert!(matches!(merge(&g), Err(Error::Consistency(_))));
        let mut g = partition(&ramp(1, 4, 4), 2, true).unwrap();
        g.validity.data_mut()[0] = 1.0;
        assert!(matches!(merge(&g), Err(Error::Consistency(_))));
    }

    #[test]
    fn scatter_inverts_gather() {
        let l = WindowLayout::new(6, 8, 4, true).unwrap();
        let (g, s) = (l.gather_index(), l.scatter_index());
        for (p, row) in s.iter().enumerate() {
            assert_eq!(g[row.unwrap()], Some(p));
        }
    }
}
