//! FMM rank ablation: fit a fixed image set with an auto-decoder (one
//! free parameter vector per image plus shared weights) at several ranks.

use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::data::{make_synthetic, Image, ShapeKind, SyntheticShapeSpec};
use crate::error::{Error, Result};
use crate::inr::{ArchConfig, InrDecoder, InrParams, SegmentKind};
use crate::nn::{normal_tensor, Adam, AdamConfig, Module, Param, ParamGroup};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankAblationConfig {
    pub ranks: Vec<usize>,
    pub image_count: usize,
    pub resolution: usize,
    pub width: usize,
    pub fourier_n_f: usize,
    pub steps: usize,
    pub lr_codes: f64,
    pub lr_shared: f64,
    /// Seed of the fixed image set; kept apart from the fitting seed.
    pub data_seed: u64,
}

impl Default for RankAblationConfig {
    fn default() -> Self {
        RankAblationConfig {
            ranks: vec![1, 3, 10],
            image_count: 8,
            resolution: 16,
            width: 16,
            fourier_n_f: 8,
            steps: 300,
            lr_codes: 1e-2,
            lr_shared: 1e-2,
            data_seed: 0,
        }
    }
}

impl RankAblationConfig {
    pub fn arch(&self, rank: usize) -> ArchConfig {
        ArchConfig {
            resolutions: vec![self.resolution / 2, self.resolution],
            widths: vec![self.width, self.width],
            fourier_n_f: self.fourier_n_f,
            rank,
            ..ArchConfig::reference()
        }
    }

    pub fn images(&self) -> Result<Vec<Image>> {
        let spec = SyntheticShapeSpec {
            resolution: self.resolution,
            kind: ShapeKind::Mixed,
            seed: self.data_seed,
            ..SyntheticShapeSpec::default()
        };
        Ok(make_synthetic(&spec, self.image_count, false)?.images)
    }
}

/// Reconstruction MSE per step of fitting `images` at `rank`.
pub fn fit_rank(config: &RankAblationConfig, rank: usize, images: &[Image], seed: u64) -> Result<Vec<f64>> {
    if images.is_empty() || images.iter().any(|i| i.height != config.resolution || i.width != config.resolution) {
        return Err(Error::invalid(format!(
            "need a nonempty set of {r}x{r} images",
            r = config.resolution
        )));
    }
    let arch = config.arch(rank).build()?;
    let n = images.len();
    let mut rng = seed::stream(seed, "rank_ablation", rank as u64);
    let decoder = InrDecoder::<f64>::new(arch.clone(), &mut rng)?;
    let codes: Vec<Param<f64>> = arch
        .param_segments()
        .iter()
        .map(|s| {
            let std = match s.kind {
                // a zero A with random B keeps the gate at 0.5 but leaves A a gradient
                SegmentKind::FactorA { .. } | SegmentKind::Bias { .. } => 0.0,
                SegmentKind::FactorB { .. } => 1.0 / (rank as f64).sqrt(),
                SegmentKind::DirectWeight { .. } => (2.0 / s.shape[1] as f64).sqrt(),
                SegmentKind::Fourier { block } => {
                    10.0 * arch.blocks[block].resolution as f64 / config.resolution as f64
                }
            };
            let shape: Vec<usize> = [&[n][..], &s.shape].concat();
            Param::new(format!("code.{}", s.name), ParamGroup::Generator, normal_tensor(&shape, std, &mut rng))
        })
        .collect();
    let mut params: Vec<&Param<f64>> = codes.iter().collect();
    params.extend(decoder.params());
    let mut adam = Adam::new(
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &[(ParamGroup::Generator, config.lr_codes), (ParamGroup::SharedInr, config.lr_shared)],
        &params,
    );
    let target = Var::constant(Image::to_batch::<f64>(&images.iter().collect::<Vec<_>>())?);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let vars: Vec<Var<f64>> = params.iter().map(|p| p.var()).collect();
        let inr = InrParams::from_vars(&arch, vars[..codes.len()].to_vec())?;
        let loss = decoder.evaluate(&inr)?.sub(&target).square().mean();
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::Divergence {
                step: step as u64,
                message: format!("rank {rank} fit loss {lv}"),
            });
        }
        history.push(lv);
        let grads = grad(&loss, &vars.iter().collect::<Vec<_>>(), false);
        adam.update(&params, &grads)?;
    }
    Ok(history)
}

/// Final reconstruction loss for every configured rank.
pub fn rank_ablation(config: &RankAblationConfig, seed: u64) -> Result<Vec<(usize, f64)>> {
    let images = config.images()?;
    config
        .ranks
        .iter()
        .map(|&r| {
            let h = fit_rank(config, r, &images, seed)?;
            Ok((r, *h.last().ok_or_else(|| Error::invalid("ablation needs at least one step"))?))
        })
        .collect()
}

/// Mean of the last `k` losses, a less noisy endpoint than the last value.
pub fn tail_mean(history: &[f64], k: usize) -> f64 {
    let k = k.clamp(1, history.len().max(1));
    history[history.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
}
