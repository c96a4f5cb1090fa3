//! Trainable parameters, dense and convolutional layers, and Adam.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Optimizer group a parameter belongs to; each group has its own
/// learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Generator,
    SharedInr,
    Discriminator,
}

/// A named trainable tensor. The current value is a gradient leaf that
/// is swapped out on every optimizer update.
#[derive(Debug)]
pub struct Param<T: Real> {
    name: String,
    group: ParamGroup,
    var: RefCell<Var<T>>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            group,
            var: RefCell::new(Var::leaf(value)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn var(&self) -> Var<T> {
        self.var.borrow().clone()
    }

    pub fn value(&self) -> Tensor<T> {
        self.var.borrow().value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.var.borrow().shape().to_vec()
    }

    pub fn set(&self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.var.borrow().shape() {
            return Err(Error::invalid(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.name,
                self.var.borrow().shape(),
                value.shape()
            )));
        }
        *self.var.borrow_mut() = Var::leaf(value);
        Ok(())
    }
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn params(&self) -> Vec<&Param<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value().numel()).sum()
    }

    fn state(&self) -> BTreeMap<String, Tensor<T>> {
        self.params()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value()))
            .collect()
    }

    fn load_state(&self, state: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in self.params() {
            let t = state
                .get(p.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name())))?;
            p.set(t.clone())?;
        }
        Ok(())
    }
}

pub fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = crate::tensor::numel(shape);
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(normal.sample(rng))).collect())
}

/// `y = x·W + b` with `W: [n_in, n_out]`; `x` is `[..., n_in]` of rank 2 or 3.
#[derive(Debug)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(
        name: &str,
        group: ParamGroup,
        n_in: usize,
        n_out: usize,
        weight_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                group,
                normal_tensor(&[n_in, n_out], weight_std, rng),
            ),
            bias: Param::new(format!("{name}.bias"), group, Tensor::zeros(&[n_out])),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.matmul(&self.weight.var()).add(&self.bias.var())
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}

/// Square-kernel convolution on NHWC tensors via unfold + matmul.
#[derive(Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                group,
                normal_tensor(&[fan_in, c_out], (2.0 / fan_in as f64).sqrt(), rng),
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), group, Tensor::zeros(&[c_out]))),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let s = x.shape();
        let (batch, height, width, channels) = (s[0], s[1], s[2], s[3]);
        let c_out = self.c_out();
        let y = if self.kernel == 1 && self.stride == 1 {
            x.reshape(&[batch * height * width, channels])
                .matmul(&self.weight.var())
                .reshape(&[batch, height, width, c_out])
        } else {
            let g = ConvGeometry {
                height,
                width,
                channels,
                kernel: self.kernel,
                stride: self.stride,
                pad: self.pad,
            };
            let (ho, wo) = (g.out_height(), g.out_width());
            x.unfold(g)
                .reshape(&[batch * ho * wo, g.patch_len()])
                .matmul(&self.weight.var())
                .reshape(&[batch, ho, wo, c_out])
        };
        match &self.bias {
            Some(b) => y.add(&b.var()),
            None => y,
        }
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = vec![&self.weight];
        p.extend(self.bias.as_ref());
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.0,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    rates: BTreeMap<ParamGroup, f64>,
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, rates: &[(ParamGroup, f64)], params: &[&Param<T>]) -> Self {
        Adam {
            config,
            rates: rates.iter().copied().collect(),
            names: params.iter().map(|p| p.name().to_string()).collect(),
            m: params.iter().map(|p| Tensor::zeros(&p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &[&Param<T>], grads: &[Var<T>]) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != params.len() {
            return Err(Error::InvalidState(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.names.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.name() != self.names[i] {
                return Err(Error::InvalidState(format!(
                    "parameter order changed: expected {}, got {}",
                    self.names[i],
                    p.name()
                )));
            }
            let lr = *self.rates.get(&p.group()).ok_or_else(|| {
                Error::InvalidState(format!("no learning rate for group {:?}", p.group()))
            })?;
            let g = g.value().data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let (lr_t, eps) = (T::of(lr), T::of(c.eps));
            let (s1, s2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
            let mut value = p.value();
            for ((x, &mi), &vi) in value.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                *x -= lr_t * (mi * s1) / ((vi * s2).sqrt() + eps);
            }
            p.set(value)?;
        }
        Ok(())
    }

    /// Moments and step counter as named arrays, for checkpoints.
    pub fn state(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (i, n) in self.names.iter().enumerate() {
            out.insert(format!("{prefix}.m.{n}"), self.m[i].clone());
            out.insert(format!("{prefix}.v.{n}"), self.v[i].clone());
        }
        out.insert(
            format!("{prefix}.step"),
            Tensor::new(vec![2], split_u64(self.step).map(T::of).to_vec()),
        );
        out
    }

    pub fn load_state(&mut self, prefix: &str, state: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let get = |k: String| {
            state
                .get(&k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry {k}")))
        };
        for (i, n) in self.names.iter().enumerate() {
            let m = get(format!("{prefix}.m.{n}"))?;
            let v = get(format!("{prefix}.v.{n}"))?;
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(Error::Checkpoint(format!("optimizer moments for {n} have wrong shape")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        let s = get(format!("{prefix}.step"))?;
        let d = s.data();
        if d.len() != 2 {
            return Err(Error::Checkpoint("optimizer step entry malformed".into()));
        }
        self.step = join_u64([d[0].as_f64(), d[1].as_f64()])?;
        Ok(())
    }
}

/// Counter stored as two 20-bit limbs so an f32 array holds it exactly.
fn split_u64(v: u64) -> [f64; 2] {
    [(v >> 20) as f64, (v & 0xF_FFFF) as f64]
}

fn join_u64(d: [f64; 2]) -> Result<u64> {
    if d.iter().any(|x| x.fract() != 0.0 || *x < 0.0 || *x >= (1u64 << 20) as f64) {
        return Err(Error::Checkpoint("step counter out of range".into()));
    }
    Ok(((d[0] as u64) << 20) | d[1] as u64)
}
