//! Spatial operators on `[batch, height, width, channels]` tensors.
//!
//! Each operator is linear, and its backward rule is its adjoint, which
//! is again one of these operators. That keeps convolutions and
//! resampling differentiable to any order.

use std::rc::Rc;

use super::{Backward, BackwardCtx, Var};
use crate::tensor::{Real, Tensor};

/// Square-kernel convolution geometry over NHWC inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Visit every (output pixel, kernel tap) pair that lands inside the
    /// input: `f(col_offset, input_offset)` both relative to one image,
    /// each addressing `channels` contiguous values.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let c = self.channels;
        let k = self.kernel;
        for oy in 0..ho {
            for ox in 0..wo {
                let col_base = (oy * wo + ox) * self.patch_len();
                for ky in 0..k {
                    let y = (oy * self.stride + ky) as isize - self.pad as isize;
                    if y < 0 || y >= self.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let x = (ox * self.stride + kx) as isize - self.pad as isize;
                        if x < 0 || x >= self.width as isize {
                            continue;
                        }
                        let in_off = (y as usize * self.width + x as usize) * c;
                        f(col_base + (ky * k + kx) * c, in_off);
                    }
                }
            }
        }
    }
}

struct UnfoldBw(ConvGeometry);
impl<T: Real> Backward<T> for UnfoldBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.fold(self.0))]
    }
}

struct FoldBw(ConvGeometry);
impl<T: Real> Backward<T> for FoldBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.unfold(self.0))]
    }
}

/// Sparse row-stochastic-ish 1-D interpolation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    in_len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Resampler {
    pub fn from_rows(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        for r in &rows {
            for &(i, _) in r {
                assert!(i < in_len, "resampler index {i} out of range {in_len}");
            }
        }
        Resampler { in_len, rows }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Nearest neighbour at pixel centres: output `i` reads input
    /// `floor((i + 0.5) · in / out)`. Integer upscaling replicates cells.
    pub fn nearest(in_len: usize, out_len: usize) -> Self {
        let rows = (0..out_len)
            .map(|i| {
                let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
                vec![(src.min(in_len - 1), 1.0)]
            })
            .collect();
        Resampler { in_len, rows }
    }

    /// Linear interpolation at pixel centres with edge clamping.
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let rows = (0..out_len)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                let t = pos - lo as f64;
                if hi == lo || t == 0.0 {
                    vec![(lo, 1.0)]
                } else {
                    vec![(lo, 1.0 - t), (hi, t)]
                }
            })
            .collect();
        Resampler { in_len, rows }
    }

    /// Cubic convolution (Keys, a = -0.5) at pixel centres, edge clamped.
    pub fn bicubic(in_len: usize, out_len: usize) -> Self {
        fn kernel(x: f64) -> f64 {
            let a = -0.5;
            let x = x.abs();
            if x <= 1.0 {
                (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
            } else if x < 2.0 {
                a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
            } else {
                0.0
            }
        }
        let scale = in_len as f64 / out_len as f64;
        let rows = (0..out_len)
            .map(|i| {
                let pos = (i as f64 + 0.5) * scale - 0.5;
                let base = pos.floor() as isize;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for tap in base - 1..=base + 2 {
                    let w = kernel(pos - tap as f64);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = tap.clamp(0, in_len as isize - 1) as usize;
                    match row.iter_mut().find(|(j, _)| *j == idx) {
                        Some(e) => e.1 += w,
                        None => row.push((idx, w)),
                    }
                }
                row
            })
            .collect();
        Resampler { in_len, rows }
    }

    /// Average of each aligned pair (2× box downsampling).
    pub fn average_pool2(in_len: usize) -> Self {
        assert!(in_len % 2 == 0, "average_pool2 needs an even length, got {in_len}");
        let rows = (0..in_len / 2)
            .map(|i| vec![(2 * i, 0.5), (2 * i + 1, 0.5)])
            .collect();
        Resampler { in_len, rows }
    }

    pub fn transpose(&self) -> Self {
        let mut rows = vec![Vec::new(); self.in_len];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, w) in r {
                rows[j].push((i, w));
            }
        }
        Resampler {
            in_len: self.rows.len(),
            rows,
        }
    }
}

struct ResampleBw {
    ry: Rc<Resampler>,
    rx: Rc<Resampler>,
}
impl<T: Real> Backward<T> for ResampleBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        let ry = Rc::new(self.ry.transpose());
        let rx = Rc::new(self.rx.transpose());
        vec![Some(c.grad.resample_rc(ry, rx))]
    }
}

impl<T: Real> Var<T> {
    /// im2col: `[B, H, W, C]` → `[B, Ho, Wo, k·k·C]`, taps ordered (ky, kx, c).
    pub fn unfold(&self, g: ConvGeometry) -> Self {
        let s = self.shape();
        assert!(
            s.len() == 4 && s[1] == g.height && s[2] == g.width && s[3] == g.channels,
            "unfold input {s:?} does not match {g:?}"
        );
        let batch = s[0];
        let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
        let img_len = g.height * g.width * g.channels;
        let col_len = ho * wo * pl;
        let data = self.value().data();
        let mut out = vec![T::zero(); batch * col_len];
        let c = g.channels;
        for b in 0..batch {
            let src = &data[b * img_len..(b + 1) * img_len];
            let dst = &mut out[b * col_len..(b + 1) * col_len];
            g.for_each_tap(|co, io| dst[co..co + c].copy_from_slice(&src[io..io + c]));
        }
        Var::from_op(
            Tensor::new(vec![batch, ho, wo, pl], out),
            vec![self.clone()],
            UnfoldBw(g),
        )
    }

    /// col2im, the adjoint of [`Var::unfold`]: overlapping taps accumulate.
    pub fn fold(&self, g: ConvGeometry) -> Self {
        let s = self.shape();
        let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
        assert!(
            s.len() == 4 && s[1] == ho && s[2] == wo && s[3] == pl,
            "fold input {s:?} does not match {g:?}"
        );
        let batch = s[0];
        let img_len = g.height * g.width * g.channels;
        let col_len = ho * wo * pl;
        let data = self.value().data();
        let mut out = vec![T::zero(); batch * img_len];
        let c = g.channels;
        for b in 0..batch {
            let src = &data[b * col_len..(b + 1) * col_len];
            let dst = &mut out[b * img_len..(b + 1) * img_len];
            g.for_each_tap(|co, io| {
                for (d, v) in dst[io..io + c].iter_mut().zip(&src[co..co + c]) {
                    *d += *v;
                }
            });
        }
        Var::from_op(
            Tensor::new(vec![batch, g.height, g.width, g.channels], out),
            vec![self.clone()],
            FoldBw(g),
        )
    }

    /// Separable resampling of the two spatial axes of an NHWC tensor.
    pub fn resample(&self, ry: &Resampler, rx: &Resampler) -> Self {
        self.resample_rc(Rc::new(ry.clone()), Rc::new(rx.clone()))
    }

    fn resample_rc(&self, ry: Rc<Resampler>, rx: Rc<Resampler>) -> Self {
        let s = self.shape();
        assert!(
            s.len() == 4 && s[1] == ry.in_len() && s[2] == rx.in_len(),
            "resample input {s:?} does not match resamplers {}x{}",
            ry.in_len(),
            rx.in_len()
        );
        let (batch, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (ry.out_len(), rx.out_len());
        let data = self.value().data();
        let mut out = vec![T::zero(); batch * ho * wo * c];
        for b in 0..batch {
            let src = &data[b * h * w * c..(b + 1) * h * w * c];
            let dst = &mut out[b * ho * wo * c..(b + 1) * ho * wo * c];
            for (i, row_y) in ry.rows().iter().enumerate() {
                for (j, row_x) in rx.rows().iter().enumerate() {
                    let d = &mut dst[(i * wo + j) * c..(i * wo + j + 1) * c];
                    for &(a, wa) in row_y {
                        for &(bx, wb) in row_x {
                            let weight = T::of(wa * wb);
                            let sp = &src[(a * w + bx) * c..(a * w + bx + 1) * c];
                            for (dv, sv) in d.iter_mut().zip(sp) {
                                *dv += weight * *sv;
                            }
                        }
                    }
                }
            }
        }
        Var::from_op(
            Tensor::new(vec![batch, ho, wo, c], out),
            vec![self.clone()],
            ResampleBw { ry, rx },
        )
    }
}
