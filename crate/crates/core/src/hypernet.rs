//! The hypernetwork: latent `z` → intermediate code `w` → decoder
//! parameters `θ`.
//!
//! The mapping is a residual MLP whose last hidden state is `w`. A single
//! linear head turns `w` into every generated tensor of the decoder. The
//! head bias is the sample-independent part of `θ` and is trained with
//! the shared decoder weights; the head weight carries the per-sample
//! variation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{Error, Result};
use crate::inr::{InrArchitecture, InrDecoder, InrParams, SegmentKind};
use crate::nn::{normal_tensor, Linear, Module, Param, ParamGroup};
use crate::seed;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub hidden_dim: usize,
    /// Nonlinear layers of the mapping; the head is one more, linear.
    pub num_layers: usize,
    /// Per-sample variation of `θ` at initialization, relative to each
    /// tensor's base scale.
    pub head_init_scale: f64,
    /// Standard deviation of the final block's base frequencies; earlier
    /// blocks scale it by their share of the final resolution.
    pub fourier_init_std: f64,
    pub ema_decay: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            z_dim: 512,
            hidden_dim: 1024,
            num_layers: 3,
            head_init_scale: 0.1,
            fourier_init_std: 10.0,
            ema_decay: 0.995,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::invalid("z_dim, hidden_dim and num_layers must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if !(self.head_init_scale >= 0.0 && self.fourier_init_std > 0.0) {
            return Err(Error::invalid("head_init_scale must be >= 0 and fourier_init_std > 0"));
        }
        Ok(())
    }

    /// Multiply-accumulates of one mapping + head pass for one sample.
    pub fn macs(&self, param_len: usize) -> u64 {
        let h = self.hidden_dim as u64;
        self.z_dim as u64 * h + (self.num_layers as u64 - 1) * h * h + h * param_len as u64
    }
}

/// `count` latents `z ~ N(0, I)` as a `[count, z_dim]` tensor.
pub fn sample_latent<T: Real>(count: usize, z_dim: usize, seed: u64) -> Result<Tensor<T>> {
    if count == 0 {
        return Err(Error::invalid("latent count must be at least 1"));
    }
    let mut rng = seed::stream(seed, "latent", 0);
    Ok(Tensor::new(
        vec![count, z_dim],
        (0..count * z_dim)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    ))
}

/// `w̄ + ψ·(w − w̄)`.
pub fn truncate<T: Real>(w: &Var<T>, psi: f64, mean: &Tensor<T>) -> Result<Var<T>> {
    if w.shape().last() != mean.shape().last() || mean.rank() != 1 {
        return Err(Error::invalid(format!(
            "truncation mean {:?} does not match codes {:?}",
            mean.shape(),
            w.shape()
        )));
    }
    if psi == 1.0 {
        return Ok(w.clone());
    }
    let m = Var::constant(mean.clone());
    Ok(m.add(&w.sub(&m).scale(psi)))
}

/// Parameter counts by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub mapping: usize,
    pub head: usize,
    pub shared_inr: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn head_fraction(&self) -> f64 {
        self.head as f64 / self.total as f64
    }
}

#[derive(Debug)]
pub struct Generator<T: Real> {
    config: GeneratorConfig,
    mapping: Vec<Linear<T>>,
    head_weight: Param<T>,
    head_bias: Param<T>,
    decoder: InrDecoder<T>,
    running_mean_w: Tensor<T>,
}

impl<T: Real> Generator<T> {
    /// Seeded construction. Mapping weights are Kaiming-normal; head
    /// biases hold a base decoder (Kaiming direct layers, zero `A`,
    /// random `B`, Gaussian frequencies) and head weights are scaled so
    /// each generated entry varies by `head_init_scale` of its base scale.
    pub fn new(config: GeneratorConfig, arch: InrArchitecture, root_seed: u64) -> Result<Self> {
        config.validate()?;
        arch.validate()?;
        let mut rng = seed::stream(root_seed, "init", 0);
        let h = config.hidden_dim;
        let mut mapping = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let n_in = if i == 0 { config.z_dim } else { h };
            mapping.push(Linear::new(
                &format!("g.map{i}"),
                ParamGroup::Generator,
                n_in,
                h,
                (2.0 / n_in as f64).sqrt(),
                &mut rng,
            ));
        }
        let decoder = InrDecoder::new(arch.clone(), &mut rng)?;
        let segments = arch.param_segments();
        let len = arch.param_len();
        let final_res = arch.resolution() as f64;
        let specs: Vec<_> = arch.layers().copied().collect();

        let mut gen = Generator {
            config: config.clone(),
            mapping,
            head_weight: Param::new("g.head.weight", ParamGroup::Generator, Tensor::zeros(&[h, len])),
            head_bias: Param::new("g.head.bias", ParamGroup::SharedInr, Tensor::zeros(&[len])),
            decoder,
            running_mean_w: Tensor::zeros(&[h]),
        };

        // statistics of w at init fix the head scale and seed the running mean
        let probe = Var::constant(sample_latent::<T>(256, config.z_dim, root_seed ^ 0x5eed)?);
        let w = {
            let _g = no_grad();
            gen.map_latent(&probe)?
        };
        let wv = w.value().to_f64_vec();
        let mean_sq = wv.iter().map(|v| v * v).sum::<f64>() / wv.len() as f64;
        gen.running_mean_w = w.mean_axis(0, false).value().clone();
        let unit = 1.0 / (h as f64 * mean_sq.max(1e-12)).sqrt();

        let mut weight = Vec::with_capacity(h * len);
        let mut columns: Vec<f64> = Vec::with_capacity(len);
        let mut bias: Vec<T> = Vec::with_capacity(len);
        for s in &segments {
            let (base_std, var_scale) = match s.kind {
                SegmentKind::DirectWeight { layer } => {
                    let k = (2.0 / specs[layer].n_in as f64).sqrt();
                    (k, k)
                }
                SegmentKind::FactorA { .. } => (0.0, 1.0),
                SegmentKind::FactorB { layer } => {
                    let k = 1.0 / (specs[layer].rank as f64).sqrt();
                    (k, k)
                }
                SegmentKind::Bias { .. } => (0.0, 1.0),
                SegmentKind::Fourier { block } => {
                    let k = config.fourier_init_std * arch.blocks[block].resolution as f64 / final_res;
                    (k, k)
                }
            };
            bias.extend(normal_tensor::<T>(&[s.len()], base_std, &mut rng).into_data());
            columns.extend(std::iter::repeat_n(config.head_init_scale * var_scale * unit, s.len()));
        }
        for _ in 0..h {
            for &std in &columns {
                let v: f64 = if std == 0.0 { 0.0 } else { rng.sample::<f64, _>(StandardNormal) * std };
                weight.push(T::of(v));
            }
        }
        gen.head_weight.set(Tensor::new(vec![h, len], weight))?;
        gen.head_bias.set(Tensor::new(vec![len], bias))?;
        Ok(gen)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn arch(&self) -> &InrArchitecture {
        self.decoder.arch()
    }

    pub fn decoder(&self) -> &InrDecoder<T> {
        &self.decoder
    }

    pub fn head_weight(&self) -> &Param<T> {
        &self.head_weight
    }

    pub fn head_bias(&self) -> &Param<T> {
        &self.head_bias
    }

    pub fn running_mean_w(&self) -> &Tensor<T> {
        &self.running_mean_w
    }

    pub fn set_running_mean_w(&mut self, mean: Tensor<T>) -> Result<()> {
        if mean.shape() != [self.config.hidden_dim] || !mean.all_finite() {
            return Err(Error::invalid("running mean must be a finite [hidden_dim] vector"));
        }
        self.running_mean_w = mean;
        Ok(())
    }

    /// Exponential moving average toward the batch mean of `w`.
    pub fn update_running_mean(&mut self, w: &Tensor<T>) -> Result<()> {
        let h = self.config.hidden_dim;
        if w.rank() != 2 || w.shape()[1] != h {
            return Err(Error::invalid(format!("codes {:?} are not [B, {h}]", w.shape())));
        }
        let b = w.shape()[0];
        let d = self.config.ema_decay;
        let mut mean = vec![0.0f64; h];
        for row in w.data().chunks(h) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        for (r, m) in self.running_mean_w.data_mut().iter_mut().zip(&mean) {
            *r = T::of(d * r.as_f64() + (1.0 - d) * m / b as f64);
        }
        Ok(())
    }

    /// Residual MLP: `h₁ = lrelu(L₁z)`, `hᵢ = hᵢ₋₁ + lrelu(Lᵢhᵢ₋₁)`; `w` is the last `h`.
    pub fn map_latent(&self, z: &Var<T>) -> Result<Var<T>> {
        if z.rank() != 2 || z.shape()[1] != self.config.z_dim {
            return Err(Error::invalid(format!(
                "latents {:?} are not [B, {}]",
                z.shape(),
                self.config.z_dim
            )));
        }
        let mut h = self.mapping[0].forward(z).leaky_relu(0.2);
        for layer in &self.mapping[1..] {
            h = h.add(&layer.forward(&h).leaky_relu(0.2));
        }
        Ok(h)
    }

    /// Flattened `θ` as `[B, param_len]`.
    pub fn head(&self, w: &Var<T>) -> Result<Var<T>> {
        if w.rank() != 2 || w.shape()[1] != self.config.hidden_dim {
            return Err(Error::InvalidState(format!(
                "codes {:?} do not match hidden size {}",
                w.shape(),
                self.config.hidden_dim
            )));
        }
        Ok(w.matmul(&self.head_weight.var()).add(&self.head_bias.var()))
    }

    pub fn generate_params(&self, w: &Var<T>) -> Result<InrParams<T>> {
        let theta = self.head(w)?;
        split_params(self.arch(), &theta)
    }

    /// `z → w → (truncate) → θ → image [B, R, R, 3]`.
    pub fn generate_image(&self, z: &Var<T>, psi: Option<f64>) -> Result<Var<T>> {
        let params = self.params_for(z, psi)?;
        self.decoder.evaluate(&params)
    }

    pub fn params_for(&self, z: &Var<T>, psi: Option<f64>) -> Result<InrParams<T>> {
        let mut w = self.map_latent(z)?;
        if let Some(psi) = psi {
            w = truncate(&w, psi, &self.running_mean_w)?;
        }
        self.generate_params(&w)
    }

    pub fn param_report(&self) -> ParamReport {
        let mapping: usize = self.mapping.iter().map(|l| l.num_params()).sum();
        let head = self.head_weight.value().numel() + self.head_bias.value().numel();
        let shared_inr = self.decoder.num_params();
        ParamReport {
            mapping,
            head,
            shared_inr,
            total: mapping + head + shared_inr,
        }
    }

    /// Parameters and non-trainable state as named arrays.
    pub fn full_state(&self) -> BTreeMap<String, Tensor<T>> {
        let mut s = self.state();
        s.insert("g.running_mean_w".into(), self.running_mean_w.clone());
        s
    }

    pub fn load_full_state(&mut self, state: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.load_state(state)?;
        let mean = state
            .get("g.running_mean_w")
            .ok_or_else(|| Error::Checkpoint("missing g.running_mean_w".into()))?;
        self.set_running_mean_w(mean.clone())
    }
}

impl<T: Real> Module<T> for Generator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.mapping.iter().flat_map(|l| l.params()).collect();
        p.push(&self.head_weight);
        p.push(&self.head_bias);
        p.extend(self.decoder.params());
        p
    }
}

/// Cut a `[B, param_len]` vector into decoder tensors.
pub fn split_params<T: Real>(arch: &InrArchitecture, theta: &Var<T>) -> Result<InrParams<T>> {
    let len = arch.param_len();
    if theta.rank() != 2 || theta.shape()[1] != len {
        return Err(Error::InvalidState(format!(
            "flattened parameters {:?} do not match length {len}",
            theta.shape()
        )));
    }
    let b = theta.shape()[0];
    let mut off = 0;
    let mut vars = Vec::new();
    for s in arch.param_segments() {
        let shape: Vec<usize> = [&[b][..], &s.shape].concat();
        vars.push(theta.narrow(1, off, s.len()).reshape(&shape));
        off += s.len();
    }
    InrParams::from_vars(arch, vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use crate::fmm::modulate;
    use crate::inr::{ArchConfig, LayerParams};

    fn toy() -> GeneratorConfig {
        GeneratorConfig {
            z_dim: 4,
            hidden_dim: 6,
            num_layers: 3,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn latents_are_seeded_standard_normal() {
        let a = sample_latent::<f64>(3, 5, 11).unwrap();
        assert_eq!(a, sample_latent::<f64>(3, 5, 11).unwrap());
        assert_ne!(a, sample_latent::<f64>(3, 5, 12).unwrap());
        assert_eq!(sample_latent::<f32>(1, 512, 0).unwrap().shape(), &[1, 512]);
        assert!(sample_latent::<f32>(0, 4, 0).is_err());

        let n = 100_000;
        let d = 4;
        let z = sample_latent::<f64>(n, d, 3).unwrap();
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| z.data()[i * d + j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
        }
    }

    #[test]
    fn truncation_examples() {
        let w = Var::constant(Tensor::<f64>::ones(&[1, 3]));
        let zero = Tensor::zeros(&[3]);
        assert_eq!(truncate(&w, 1.0, &zero).unwrap().value(), w.value());
        let mean = Tensor::from_f64(vec![3], &[0.2, -0.4, 7.0]);
        assert_eq!(truncate(&w, 0.0, &mean).unwrap().value().data(), mean.data());
        let t = truncate(&w, 0.9, &zero).unwrap();
        assert!(t.value().data().iter().all(|&v| (v - 0.9).abs() < 1e-15));
        assert!(truncate(&w, 0.5, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn mapping_is_pure_and_differentiable() {
        let arch = ArchConfig::tiny().build().unwrap();
        let g = Generator::<f64>::new(toy(), arch, 1).unwrap();
        let z0 = sample_latent::<f64>(1, 4, 2).unwrap();
        let a = g.map_latent(&Var::constant(z0.clone())).unwrap();
        let b = g.map_latent(&Var::constant(z0.clone())).unwrap();
        assert_eq!(a.value(), b.value());

        // finite-difference Jacobian of every output coordinate
        for out in 0..6 {
            let z = Var::leaf(z0.clone());
            let y = g.map_latent(&z).unwrap().narrow(1, out, 1).sum();
            let gz = grad(&y, &[&z], false).remove(0);
            for i in 0..4 {
                let eval = |d: f64| {
                    let mut zz = z0.clone();
                    zz.data_mut()[i] += d;
                    g.map_latent(&Var::constant(zz)).unwrap().value().data()[out]
                };
                let num = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                let ana = gz.value().data()[i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel <= 1e-3 || (num - ana).abs() < 1e-9, "{num} vs {ana}");
            }
        }
    }

    #[test]
    fn zero_heads_give_half_shared_weights() {
        let arch = ArchConfig::tiny().build().unwrap();
        let g = Generator::<f64>::new(toy(), arch.clone(), 3).unwrap();
        let len = arch.param_len();
        g.head_weight.set(Tensor::zeros(&[6, len])).unwrap();
        g.head_bias.set(Tensor::zeros(&[len])).unwrap();
        let z = Var::constant(sample_latent::<f64>(2, 4, 4).unwrap());
        let p = g.params_for(&z, None).unwrap();
        for (i, (lp, spec)) in p.layers.iter().zip(arch.layers()).enumerate() {
            if let LayerParams::Factorized(f) = lp {
                assert!(f.a.value().data().iter().all(|&v| v == 0.0));
                let ws = g.decoder().shared_weight(i).unwrap().var();
                let w = modulate(spec, &ws, f).unwrap();
                for s in 0..2 {
                    let ws_half = ws.value().map(|v| 0.5 * v);
                    assert_eq!(w.narrow(0, s, 1).value().data(), ws_half.data());
                }
            }
        }
    }

    #[test]
    fn init_starts_at_half_shared_weights_for_every_sample() {
        // zero A base: the factor product varies only through the head weights
        let arch = ArchConfig::tiny().build().unwrap();
        let g = Generator::<f64>::new(
            GeneratorConfig {
                head_init_scale: 0.0,
                ..toy()
            },
            arch,
            5,
        )
        .unwrap();
        let z = Var::constant(sample_latent::<f64>(3, 4, 6).unwrap());
        let p = g.params_for(&z, None).unwrap();
        for lp in &p.layers {
            if let LayerParams::Factorized(f) = lp {
                assert!(f.a.value().data().iter().all(|&v| v == 0.0));
                assert!(f.b.value().data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn generation_contracts() {
        let arch = ArchConfig::tiny().build().unwrap();
        let g = Generator::<f32>::new(toy(), arch.clone(), 7).unwrap();
        let z = Var::constant(sample_latent::<f32>(4, 4, 8).unwrap());
        let img = g.generate_image(&z, None).unwrap();
        assert_eq!(img.shape(), &[4, 8, 8, 3]);
        assert!(img.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(img.value(), g.generate_image(&z, None).unwrap().value());
        // distinct latents give distinct images
        assert!(img.narrow(0, 0, 1).value().max_abs_diff(img.narrow(0, 1, 1).value()) > 0.0);

        let collapsed = g.generate_image(&z, Some(0.0)).unwrap();
        let first = collapsed.narrow(0, 0, 1);
        for i in 1..4 {
            assert_eq!(collapsed.narrow(0, i, 1).value(), first.value());
        }

        let theta = g.head(&g.map_latent(&z).unwrap()).unwrap();
        assert_eq!(theta.shape(), &[4, arch.param_len()]);
        assert!(split_params(&arch, &theta.narrow(1, 0, 5)).is_err());
        assert!(g.map_latent(&Var::constant(Tensor::zeros(&[1, 3]))).is_err());
    }

    #[test]
    fn head_dominates_reference_parameter_count() {
        let arch = ArchConfig::reference().build().unwrap();
        let g = Generator::<f32>::new(GeneratorConfig::default(), arch.clone(), 0).unwrap();
        let r = g.param_report();
        assert_eq!(r.total, r.mapping + r.head + r.shared_inr);
        assert_eq!(r.head, (1024 + 1) * arch.param_len());
        assert_eq!(r.mapping, 512 * 1024 + 1024 + 2 * (1024 * 1024 + 1024));
        assert!(r.head_fraction() > 0.5, "{}", r.head_fraction());
    }

    #[test]
    fn running_mean_moves_toward_batch_mean() {
        let arch = ArchConfig::tiny().build().unwrap();
        let mut g = Generator::<f64>::new(toy(), arch, 9).unwrap();
        g.set_running_mean_w(Tensor::zeros(&[6])).unwrap();
        g.update_running_mean(&Tensor::ones(&[2, 6])).unwrap();
        assert!(g.running_mean_w().data().iter().all(|&v| (v - 0.005).abs() < 1e-15));
        let state = g.full_state();
        let mut h = Generator::<f64>::new(toy(), ArchConfig::tiny().build().unwrap(), 10).unwrap();
        h.load_full_state(&state).unwrap();
        assert_eq!(h.full_state(), state);
    }
}
