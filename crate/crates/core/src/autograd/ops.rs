//! Elementwise, reduction, shape and matrix-product operations.

use super::{record_macs, Backward, BackwardCtx, Var};
use crate::tensor::{gemm, numel, strides, Real, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast shapes {a:?} and {b:?}"),
        };
    }
    out
}

/// Walk `dst` in contiguous runs, reporting the matching offset in a
/// broadcast source of shape `src`.
fn for_each_broadcast_run(src: &[usize], dst: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = dst.len();
    assert!(src.len() <= rank, "cannot broadcast {src:?} to {dst:?}");
    let mut padded = vec![1; rank - src.len()];
    padded.extend_from_slice(src);
    for (s, d) in padded.iter().zip(dst) {
        assert!(*s == *d || *s == 1, "cannot broadcast {src:?} to {dst:?}");
    }
    // Longest trailing run where the source is not broadcast.
    let mut split = rank;
    while split > 0 && padded[split - 1] == dst[split - 1] {
        split -= 1;
    }
    let run: usize = dst[split..].iter().product();
    let src_strides = strides(&padded);
    let outer_shape = &dst[..split];
    let outer: usize = outer_shape.iter().product();
    let mut idx = vec![0usize; split];
    for o in 0..outer {
        let src_off: usize = (0..split)
            .map(|i| if padded[i] == 1 { 0 } else { idx[i] * src_strides[i] })
            .sum();
        f(src_off, o * run, run);
        for i in (0..split).rev() {
            idx[i] += 1;
            if idx[i] < outer_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
}

fn expand_tensor<T: Real>(src: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); numel(shape)];
    let data = src.data();
    for_each_broadcast_run(src.shape(), shape, |s, d, n| {
        out[d..d + n].copy_from_slice(&data[s..s + n]);
    });
    Tensor::new(shape.to_vec(), out)
}

fn sum_to_tensor<T: Real>(src: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); numel(shape)];
    let data = src.data();
    for_each_broadcast_run(shape, src.shape(), |s, d, n| {
        for (o, v) in out[s..s + n].iter_mut().zip(&data[d..d + n]) {
            *o += *v;
        }
    });
    Tensor::new(shape.to_vec(), out)
}

macro_rules! backward_fn {
    ($name:ident, |$ctx:ident| $body:expr) => {
        struct $name;
        impl<T: Real> Backward<T> for $name {
            fn backward(&self, $ctx: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
                $body
            }
        }
    };
}

backward_fn!(AddBw, |c| vec![Some(c.grad.clone()), Some(c.grad.clone())]);
backward_fn!(SubBw, |c| vec![Some(c.grad.clone()), Some(c.grad.neg())]);
backward_fn!(MulBw, |c| vec![
    c.needs[0].then(|| c.grad.mul(&c.inputs[1])),
    c.needs[1].then(|| c.grad.mul(&c.inputs[0])),
]);
backward_fn!(DivBw, |c| {
    let (a, b) = (&c.inputs[0], &c.inputs[1]);
    vec![
        c.needs[0].then(|| c.grad.div(b)),
        c.needs[1].then(|| c.grad.mul(a).div(&b.square()).neg()),
    ]
});
backward_fn!(NegBw, |c| vec![Some(c.grad.neg())]);
backward_fn!(IdentityBw, |c| vec![Some(c.grad.clone())]);
backward_fn!(ExpBw, |c| vec![Some(c.grad.mul(c.output))]);
backward_fn!(LnBw, |c| vec![Some(c.grad.div(&c.inputs[0]))]);
backward_fn!(SigmoidBw, |c| {
    let s = c.output;
    vec![Some(c.grad.mul(&s.mul(&s.neg().add_scalar(1.0))))]
});
backward_fn!(SoftplusBw, |c| vec![Some(c.grad.mul(&c.inputs[0].sigmoid()))]);
backward_fn!(SinBw, |c| vec![Some(c.grad.mul(&c.inputs[0].cos()))]);
backward_fn!(CosBw, |c| vec![Some(c.grad.mul(&c.inputs[0].sin()).neg())]);
backward_fn!(SquareBw, |c| vec![Some(c.grad.mul(&c.inputs[0]).scale(2.0))]);
backward_fn!(SqrtBw, |c| vec![Some(c.grad.div(c.output).scale(0.5))]);

struct ScaleBw(f64);
impl<T: Real> Backward<T> for ScaleBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.scale(self.0))]
    }
}

/// Multiplication by a fixed mask (piecewise-linear activations).
struct MaskBw<T: Real>(Tensor<T>);
impl<T: Real> Backward<T> for MaskBw<T> {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.mul(&Var::constant(self.0.clone())))]
    }
}

struct ExpandBw(Vec<usize>);
impl<T: Real> Backward<T> for ExpandBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.sum_to(&self.0))]
    }
}

struct SumToBw(Vec<usize>);
impl<T: Real> Backward<T> for SumToBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.expand(&self.0))]
    }
}

struct ReshapeBw(Vec<usize>);
impl<T: Real> Backward<T> for ReshapeBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.reshape(&self.0))]
    }
}

struct PermuteBw(Vec<usize>);
impl<T: Real> Backward<T> for PermuteBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        let mut inverse = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inverse[p] = i;
        }
        vec![Some(c.grad.permute(&inverse))]
    }
}

struct SumAxisBw {
    keep_shape: Vec<usize>,
    input_shape: Vec<usize>,
}
impl<T: Real> Backward<T> for SumAxisBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.reshape(&self.keep_shape).expand(&self.input_shape))]
    }
}

struct NarrowBw {
    axis: usize,
    start: usize,
    total: usize,
}
impl<T: Real> Backward<T> for NarrowBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.pad_axis(self.axis, self.start, self.total))]
    }
}

struct PadBw {
    axis: usize,
    start: usize,
    len: usize,
}
impl<T: Real> Backward<T> for PadBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        vec![Some(c.grad.narrow(self.axis, self.start, self.len))]
    }
}

struct ConcatBw {
    axis: usize,
    sizes: Vec<usize>,
}
impl<T: Real> Backward<T> for ConcatBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        let mut start = 0;
        self.sizes
            .iter()
            .zip(c.needs)
            .map(|(&len, &need)| {
                let g = need.then(|| c.grad.narrow(self.axis, start, len));
                start += len;
                g
            })
            .collect()
    }
}

struct MatMulBw {
    ta: bool,
    tb: bool,
}
impl<T: Real> Backward<T> for MatMulBw {
    fn backward(&self, c: &BackwardCtx<'_, T>) -> Vec<Option<Var<T>>> {
        let (a, b, g) = (&c.inputs[0], &c.inputs[1], c.grad);
        let (ta, tb) = (self.ta, self.tb);
        let reduce = |v: Var<T>, target_rank: usize| {
            if target_rank == 2 && v.rank() == 3 {
                v.sum_axis(0, false)
            } else {
                v
            }
        };
        let ga = c.needs[0].then(|| {
            let d = if !ta {
                g.matmul_t(b, false, !tb)
            } else {
                b.matmul_t(g, tb, true)
            };
            reduce(d, a.rank())
        });
        let gb = c.needs[1].then(|| {
            let d = if !tb {
                a.matmul_t(g, !ta, false)
            } else {
                g.matmul_t(a, true, ta)
            };
            reduce(d, b.rank())
        });
        vec![ga, gb]
    }
}

/// Split a shape at `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Real> Var<T> {
    fn unary(&self, f: impl Fn(T) -> T, bw: impl Backward<T> + 'static) -> Self {
        Var::from_op(self.value().map(f), vec![self.clone()], bw)
    }

    fn binary(
        &self,
        other: &Self,
        f: impl Fn(T, T) -> T,
        bw: impl Backward<T> + 'static,
    ) -> Self {
        let (a, b) = if self.shape() == other.shape() {
            (self.clone(), other.clone())
        } else {
            let shape = broadcast_shape(self.shape(), other.shape());
            (self.expand(&shape), other.expand(&shape))
        };
        let value = a.value().zip_map(b.value(), f);
        Var::from_op(value, vec![a, b], bw)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.binary(other, |a, b| a + b, AddBw)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.binary(other, |a, b| a - b, SubBw)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.binary(other, |a, b| a * b, MulBw)
    }

    pub fn div(&self, other: &Self) -> Self {
        self.binary(other, |a, b| a / b, DivBw)
    }

    pub fn neg(&self) -> Self {
        self.unary(|v| -v, NegBw)
    }

    pub fn scale(&self, c: f64) -> Self {
        let k = T::of(c);
        self.unary(move |v| v * k, ScaleBw(c))
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        let k = T::of(c);
        self.unary(move |v| v + k, IdentityBw)
    }

    pub fn exp(&self) -> Self {
        self.unary(|v| v.exp(), ExpBw)
    }

    pub fn ln(&self) -> Self {
        self.unary(|v| v.ln(), LnBw)
    }

    pub fn sigmoid(&self) -> Self {
        self.unary(sigmoid, SigmoidBw)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Self {
        self.unary(softplus, SoftplusBw)
    }

    pub fn sin(&self) -> Self {
        self.unary(|v| v.sin(), SinBw)
    }

    pub fn cos(&self) -> Self {
        self.unary(|v| v.cos(), CosBw)
    }

    pub fn square(&self) -> Self {
        self.unary(|v| v * v, SquareBw)
    }

    pub fn sqrt(&self) -> Self {
        self.unary(|v| v.sqrt(), SqrtBw)
    }

    pub fn leaky_relu(&self, slope: f64) -> Self {
        let s = T::of(slope);
        let mask = self.value().map(|v| if v > T::zero() { T::one() } else { s });
        let value = self.value().zip_map(&mask, |v, m| v * m);
        Var::from_op(value, vec![self.clone()], MaskBw(mask))
    }

    /// Clamp into `[0, 1]`; gradient passes only strictly inside.
    pub fn clamp_unit(&self) -> Self {
        let mask = self.value().map(|v| {
            if v > T::zero() && v < T::one() {
                T::one()
            } else {
                T::zero()
            }
        });
        let value = self.value().map(|v| v.max(T::zero()).min(T::one()));
        Var::from_op(value, vec![self.clone()], MaskBw(mask))
    }

    /// Broadcast to `shape` (numpy rules, leading axes may be added).
    pub fn expand(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let value = expand_tensor(self.value(), shape);
        Var::from_op(value, vec![self.clone()], ExpandBw(self.shape().to_vec()))
    }

    /// Sum broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let value = sum_to_tensor(self.value(), shape);
        Var::from_op(value, vec![self.clone()], SumToBw(self.shape().to_vec()))
    }

    pub fn sum(&self) -> Self {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Self {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Self {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let data = self.value().data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        let mut keep_shape = self.shape().to_vec();
        keep_shape[axis] = 1;
        let mut out_shape = keep_shape.clone();
        if !keepdim {
            out_shape.remove(axis);
        }
        Var::from_op(
            Tensor::new(out_shape, out),
            vec![self.clone()],
            SumAxisBw {
                keep_shape,
                input_shape: self.shape().to_vec(),
            },
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Self {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self.value().clone().reshape(shape);
        Var::from_op(value, vec![self.clone()], ReshapeBw(self.shape().to_vec()))
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        let shape = self.shape();
        assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = self.value().data();
        let n = data.len();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        let mut off = 0usize;
        for _ in 0..n {
            out.push(data[off]);
            for i in (0..out_shape.len()).rev() {
                idx[i] += 1;
                off += src_strides[i];
                if idx[i] < out_shape[i] {
                    break;
                }
                off -= src_strides[i] * out_shape[i];
                idx[i] = 0;
            }
        }
        Var::from_op(
            Tensor::new(out_shape, out),
            vec![self.clone()],
            PermuteBw(perm.to_vec()),
        )
    }

    /// Swap the two trailing axes.
    pub fn transpose(&self) -> Self {
        let r = self.rank();
        assert!(r >= 2, "transpose needs rank >= 2");
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let (outer, total, inner) = split_axis(self.shape(), axis);
        assert!(start + len <= total, "narrow {start}+{len} exceeds axis size {total}");
        let data = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Var::from_op(
            Tensor::new(shape, out),
            vec![self.clone()],
            NarrowBw { axis, start, total },
        )
    }

    /// Embed into a zero tensor whose `axis` has size `total`, starting at `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Self {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        assert!(start + len <= total, "pad_axis {start}+{len} exceeds {total}");
        let data = self.value().data();
        let mut out = vec![T::zero(); outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&data[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        Var::from_op(
            Tensor::new(shape, out),
            vec![self.clone()],
            PadBw { axis, start, len },
        )
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        let (outer, _, inner) = split_axis(first, axis);
        for p in parts {
            let s = p.shape();
            assert!(
                s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b),
                "concat shape mismatch: {s:?} vs {first:?} along axis {axis}"
            );
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                let d = p.value().data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Var::from_op(Tensor::new(shape, out), parts.to_vec(), ConcatBw { axis, sizes })
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes the two
    /// trailing axes. Rank-3 operands are batched; a rank-2 operand is
    /// shared across the batch of the other.
    pub fn matmul_t(&self, other: &Self, ta: bool, tb: bool) -> Self {
        let (a, b) = (self.value(), other.value());
        let (ra, rb) = (a.rank(), b.rank());
        assert!(
            (ra == 2 || ra == 3) && (rb == 2 || rb == 3),
            "matmul needs rank 2 or 3 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let batch_a = if ra == 3 { a.shape()[0] } else { 1 };
        let batch_b = if rb == 3 { b.shape()[0] } else { 1 };
        let batch = batch_a.max(batch_b);
        assert!(
            (batch_a == batch || ra == 2) && (batch_b == batch || rb == 2),
            "matmul batch mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let sa = &a.shape()[ra - 2..];
        let sb = &b.shape()[rb - 2..];
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(
            k,
            k2,
            "matmul inner dimension mismatch: {:?}{} x {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        );
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ao = if ra == 3 { i * m * k } else { 0 };
            let bo = if rb == 3 { i * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                &a.data()[ao..ao + m * k],
                ta,
                &b.data()[bo..bo + k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        record_macs((batch * m * k * n) as u64);
        let shape = if ra == 3 || rb == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Var::from_op(
            Tensor::new(shape, out),
            vec![self.clone(), other.clone()],
            MatMulBw { ta, tb },
        )
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
