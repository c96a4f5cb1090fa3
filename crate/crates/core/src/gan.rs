//! Adversarial training: residual convolutional discriminator,
//! non-saturating logistic losses, R1 penalty on real images, and the
//! step/loop plumbing with checkpoints and a CSV log.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Resampler, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{Image, ImageDataset};
use crate::error::{Error, Result};
use crate::hypernet::{sample_latent, Generator, GeneratorConfig};
use crate::imageio;
use crate::inr::InrArchitecture;
use crate::nn::{Adam, AdamConfig, Conv2d, Linear, Module, Param, ParamGroup};
use crate::seed;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_shared_inr: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub r1_gamma: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Root seed; set by the caller rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub resolution: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Write a sample grid every this many steps (0: only at the end).
    pub sample_every: u64,
    pub sample_count: usize,
    /// Measure wall time per step; when off the log records 0.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 1e-5,
            lr_shared_inr: 5e-4,
            lr_d: 3e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            r1_gamma: 10.0,
            batch_size: 16,
            total_steps: 3000,
            seed: 0,
            resolution: 32,
            checkpoint_every: 1000,
            sample_every: 1000,
            sample_count: 16,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_g, self.lr_shared_inr, self.lr_d];
        if lrs.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::invalid(format!("learning rates must be >= 0, got {lrs:?}")));
        }
        if !(self.r1_gamma >= 0.0 && self.r1_gamma.is_finite()) {
            return Err(Error::invalid("r1_gamma must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || self.adam_eps <= 0.0
        {
            return Err(Error::invalid("Adam betas must be in [0, 1) and eps > 0"));
        }
        if self.batch_size == 0 || self.resolution == 0 || self.sample_count == 0 {
            return Err(Error::invalid("batch_size, resolution and sample_count must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Residual convolutional discriminator. A 1×1 stem maps RGB to
/// `stem_channels`; each stage halves the resolution; a two-layer head
/// turns the final map into one logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub resolution: usize,
    pub stem_channels: usize,
    /// Output channels of each stage.
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            resolution: 32,
            stem_channels: 16,
            channels: vec![32, 64, 128, 256],
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        let down = 1usize << self.channels.len();
        if self.channels.is_empty()
            || self.stem_channels == 0
            || self.channels.contains(&0)
            || self.resolution % down != 0
        {
            return Err(Error::invalid(format!(
                "discriminator needs stages that halve {} evenly, got {:?}",
                self.resolution, self.channels
            )));
        }
        Ok(())
    }

    pub fn final_resolution(&self) -> usize {
        self.resolution >> self.channels.len()
    }
}

#[derive(Debug)]
struct Stage<T: Real> {
    conv: Conv2d<T>,
    down: Conv2d<T>,
    skip: Conv2d<T>,
}

#[derive(Debug)]
pub struct Discriminator<T: Real> {
    spec: DiscriminatorSpec,
    stem: Conv2d<T>,
    stages: Vec<Stage<T>>,
    fc: Linear<T>,
    out: Linear<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let g = ParamGroup::Discriminator;
        let stem = Conv2d::new("d.stem", g, 3, spec.stem_channels, 1, 1, true, rng);
        let mut stages = Vec::new();
        let mut c_in = spec.stem_channels;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            stages.push(Stage {
                conv: Conv2d::new(&format!("d.stage{i}.conv"), g, c_in, c_in, 3, 1, true, rng),
                down: Conv2d::new(&format!("d.stage{i}.down"), g, c_in, c_out, 3, 2, true, rng),
                skip: Conv2d::new(&format!("d.stage{i}.skip"), g, c_in, c_out, 1, 1, false, rng),
            });
            c_in = c_out;
        }
        let r = spec.final_resolution();
        let flat = r * r * c_in;
        let fc = Linear::new("d.fc", g, flat, c_in, (2.0 / flat as f64).sqrt(), rng);
        let out = Linear::new("d.out", g, c_in, 1, (1.0 / c_in as f64).sqrt(), rng);
        Ok(Discriminator {
            spec,
            stem,
            stages,
            fc,
            out,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Images `[B, R, R, 3]` in `[0, 1]` → logits `[B]`.
    pub fn forward(&self, images: &Var<T>) -> Result<Var<T>> {
        let s = images.shape();
        let r = self.spec.resolution;
        if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
            return Err(Error::invalid(format!(
                "discriminator expects [B, {r}, {r}, 3], got {s:?}"
            )));
        }
        let b = s[0];
        let mut x = self.stem.forward(&images.scale(2.0).add_scalar(-1.0)).leaky_relu(0.2);
        let mut res = r;
        for st in &self.stages {
            let main = st.down.forward(&st.conv.forward(&x).leaky_relu(0.2)).leaky_relu(0.2);
            let pool = Resampler::average_pool2(res);
            let skip = st.skip.forward(&x.resample(&pool, &pool));
            x = main.add(&skip).scale(std::f64::consts::FRAC_1_SQRT_2);
            res /= 2;
        }
        let flat = x.reshape(&[b, x.numel() / b]);
        let h = self.fc.forward(&flat).leaky_relu(0.2);
        Ok(self.out.forward(&h).reshape(&[b]))
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.stem.params();
        for s in &self.stages {
            p.extend(s.conv.params());
            p.extend(s.down.params());
            p.extend(s.skip.params());
        }
        p.extend(self.fc.params());
        p.extend(self.out.params());
        p
    }
}

/// `mean softplus(−real) + mean softplus(fake)`.
pub fn d_logistic_loss<T: Real>(real_logits: &Var<T>, fake_logits: &Var<T>) -> Var<T> {
    real_logits.neg().softplus().mean().add(&fake_logits.softplus().mean())
}

/// `mean softplus(−fake)`.
pub fn g_nonsaturating_loss<T: Real>(fake_logits: &Var<T>) -> Var<T> {
    fake_logits.neg().softplus().mean()
}

/// `(γ/2) · mean_b ‖∇ₓ D(x_b)‖²`, differentiable with respect to the
/// parameters of `d`. `real` must be a gradient leaf.
pub fn r1_penalty<T: Real>(
    d: impl Fn(&Var<T>) -> Result<Var<T>>,
    real: &Var<T>,
    gamma: f64,
) -> Result<Var<T>> {
    if !real.requires_grad() {
        return Err(Error::invalid("R1 input must be a gradient leaf"));
    }
    let logits = d(real)?;
    Ok(r1_from_logits(&logits, real, gamma))
}

fn r1_from_logits<T: Real>(logits: &Var<T>, real: &Var<T>, gamma: f64) -> Var<T> {
    let batch = real.shape()[0] as f64;
    let g = grad(&logits.sum(), &[real], true).remove(0);
    g.square().sum().scale(0.5 * gamma / batch)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub r1: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "step,loss_d,loss_g,r1,seconds_per_step";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.6}",
            self.step, self.loss_d, self.loss_g, self.r1, self.seconds
        )
    }
}

/// Generator, discriminator, both optimizers and the step counter.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    step: u64,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        arch: InrArchitecture,
        gen_config: GeneratorConfig,
        disc_spec: DiscriminatorSpec,
    ) -> Result<Self> {
        config.validate()?;
        if arch.resolution() != config.resolution || disc_spec.resolution != config.resolution {
            return Err(Error::invalid(format!(
                "resolution mismatch: train {}, decoder {}, discriminator {}",
                config.resolution,
                arch.resolution(),
                disc_spec.resolution
            )));
        }
        let generator = Generator::new(gen_config, arch, config.seed)?;
        let discriminator = Discriminator::new(disc_spec, &mut seed::stream(config.seed, "init_d", 0))?;
        let opt_g = Adam::new(
            config.adam(),
            &[
                (ParamGroup::Generator, config.lr_g),
                (ParamGroup::SharedInr, config.lr_shared_inr),
            ],
            &generator.params(),
        );
        let opt_d = Adam::new(
            config.adam(),
            &[(ParamGroup::Discriminator, config.lr_d)],
            &discriminator.params(),
        );
        Ok(Trainer {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn latents(&self, tag: &str) -> Result<Var<f32>> {
        let z_dim = self.generator.config().z_dim;
        let mut rng = seed::stream(self.config.seed, tag, self.step);
        let seed: u64 = rng.random();
        Ok(Var::constant(sample_latent(self.config.batch_size, z_dim, seed)?))
    }

    /// One discriminator update (logistic loss plus R1 on the same
    /// objective) followed by one generator update.
    pub fn train_step(&mut self, real: &Tensor<f32>) -> Result<StepRecord> {
        let start = self.config.record_timing.then(Instant::now);
        let b = self.config.batch_size;
        let r = self.config.resolution;
        if real.shape() != [b, r, r, 3] {
            return Err(Error::invalid(format!(
                "real batch {:?} is not [{b}, {r}, {r}, 3]",
                real.shape()
            )));
        }

        // discriminator
        let z = self.latents("z_d")?;
        let fake = {
            let _g = no_grad();
            self.generator.generate_image(&z, None)?.detach()
        };
        let x = Var::leaf(real.clone());
        let real_logits = self.discriminator.forward(&x)?;
        let fake_logits = self.discriminator.forward(&fake)?;
        let loss_d = d_logistic_loss(&real_logits, &fake_logits);
        let r1 = if self.config.r1_gamma > 0.0 {
            r1_from_logits(&real_logits, &x, self.config.r1_gamma)
        } else {
            Var::scalar(0.0)
        };
        let total_d = loss_d.add(&r1);
        self.check_finite(&[("loss_d", &loss_d), ("r1", &r1)])?;
        let d_params = self.discriminator.params();
        let d_vars: Vec<Var<f32>> = d_params.iter().map(|p| p.var()).collect();
        let grads = grad(&total_d, &d_vars.iter().collect::<Vec<_>>(), false);
        self.opt_d.update(&d_params, &grads)?;

        // generator
        let z = self.latents("z_g")?;
        let w = self.generator.map_latent(&z)?;
        let params = self.generator.generate_params(&w)?;
        let images = self.generator.decoder().evaluate(&params)?;
        let loss_g = g_nonsaturating_loss(&self.discriminator.forward(&images)?);
        self.check_finite(&[("loss_g", &loss_g)])?;
        let g_params = self.generator.params();
        let g_vars: Vec<Var<f32>> = g_params.iter().map(|p| p.var()).collect();
        let grads = grad(&loss_g, &g_vars.iter().collect::<Vec<_>>(), false);
        self.opt_g.update(&g_params, &grads)?;
        self.generator.update_running_mean(w.value())?;

        let record = StepRecord {
            step: self.step,
            loss_d: loss_d.item() as f64,
            loss_g: loss_g.item() as f64,
            r1: r1.item() as f64,
            seconds: start.map_or(0.0, |s| s.elapsed().as_secs_f64()),
        };
        self.step += 1;
        Ok(record)
    }

    fn check_finite(&self, values: &[(&str, &Var<f32>)]) -> Result<()> {
        for (name, v) in values {
            if !v.item().is_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    message: format!("{name} = {}", v.item()),
                });
            }
        }
        Ok(())
    }

    /// Fixed preview latents, independent of the training stream.
    pub fn preview_latents(&self) -> Result<Tensor<f32>> {
        sample_latent(
            self.config.sample_count,
            self.generator.config().z_dim,
            seed::stream(self.config.seed, "preview", 0).random(),
        )
    }

    pub fn sample_grid(&self) -> Result<Image> {
        let _g = no_grad();
        let z = Var::constant(self.preview_latents()?);
        let imgs = self.generator.generate_image(&z, None)?;
        imageio::grid(&Image::from_batch(imgs.value())?)
    }

    pub fn checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let mut arrays = self.generator.full_state();
        arrays.extend(self.discriminator.state());
        arrays.extend(self.opt_g.state("opt_g"));
        arrays.extend(self.opt_d.state("opt_d"));
        Ok(Checkpoint {
            meta: CheckpointMeta {
                step: self.step,
                seed: self.config.seed,
                config_hash: config_hash.to_string(),
                arch: self.generator.arch().clone(),
                generator: self.generator.config().clone(),
                extra: serde_json::json!({
                    "train": self.config,
                    "discriminator": self.discriminator.spec(),
                }),
            },
            arrays,
        })
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::checkpoint`].
    /// `config` overrides the stored training settings (e.g. more steps).
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let stored: TrainConfig = serde_json::from_value(ck.meta.extra["train"].clone())
            .map_err(|e| Error::Checkpoint(format!("training settings: {e}")))?;
        let disc: DiscriminatorSpec = serde_json::from_value(ck.meta.extra["discriminator"].clone())
            .map_err(|e| Error::Checkpoint(format!("discriminator settings: {e}")))?;
        let config = config.unwrap_or(TrainConfig {
            seed: ck.meta.seed,
            ..stored
        });
        let mut t = Trainer::new(config, ck.meta.arch.clone(), ck.meta.generator.clone(), disc)?;
        t.generator.load_full_state(&ck.arrays)?;
        t.discriminator.load_state(&ck.arrays)?;
        t.opt_g.load_state("opt_g", &ck.arrays)?;
        t.opt_d.load_state("opt_d", &ck.arrays)?;
        t.step = ck.meta.step;
        Ok(t)
    }
}

/// Load a generator alone from a checkpoint.
pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<Generator<f32>> {
    let mut g = Generator::new(ck.meta.generator.clone(), ck.meta.arch.clone(), ck.meta.seed)?;
    g.load_full_state(&ck.arrays)?;
    Ok(g)
}

/// Files produced by [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<StepRecord>,
}

/// Train until `config.total_steps`, appending to `out/log.csv`, writing
/// `out/checkpoint_<step>.bin`, `out/latest.bin` and `out/samples_<step>.png`.
/// A resumed trainer continues its log where the checkpoint left off.
pub fn train_loop(
    trainer: &mut Trainer,
    dataset: &ImageDataset,
    out: &Path,
    config_hash: &str,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if dataset.resolution != trainer.config.resolution {
        return Err(Error::invalid(format!(
            "dataset resolution {} differs from training resolution {}",
            dataset.resolution, trainer.config.resolution
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("log.csv");
    let resumed = trainer.step() > 0;
    let mut log = if resumed {
        truncate_log(&log_path, trainer.step())?
    } else {
        String::from(LOG_HEADER) + "\n"
    };
    let cfg = trainer.config.clone();
    let mut records = Vec::new();
    while trainer.step() < cfg.total_steps {
        let real = dataset.batch::<f32>(cfg.batch_size, cfg.seed, trainer.step())?;
        let rec = match trainer.train_step(&real) {
            Ok(r) => r,
            Err(e) => {
                write_file(&log_path, log.as_bytes())?;
                return Err(e);
            }
        };
        writeln!(log, "{}", rec.csv_row()).unwrap();
        on_step(&rec);
        records.push(rec);
        let done = trainer.step();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
            trainer
                .checkpoint(config_hash)?
                .save(&out.join(format!("checkpoint_{done:07}.bin")))?;
            write_file(&log_path, log.as_bytes())?;
        }
        if cfg.sample_every > 0 && done % cfg.sample_every == 0 && done < cfg.total_steps {
            imageio::save_png(&trainer.sample_grid()?, &out.join(format!("samples_{done:07}.png")))?;
        }
    }
    write_file(&log_path, log.as_bytes())?;
    let done = trainer.step();
    let ck = trainer.checkpoint(config_hash)?;
    let final_path = out.join(format!("checkpoint_{done:07}.bin"));
    ck.save(&final_path)?;
    ck.save(&out.join("latest.bin"))?;
    imageio::save_png(&trainer.sample_grid()?, &out.join(format!("samples_{done:07}.png")))?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        log: log_path,
        records,
    })
}

/// Existing log rows for steps before `step`, so a resumed run rewrites
/// exactly the rows it repeats.
fn truncate_log(path: &Path, step: u64) -> Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = String::from(LOG_HEADER) + "\n";
    for line in text.lines().skip(1) {
        let s: u64 = match line.split(',').next().and_then(|v| v.parse().ok()) {
            Some(s) => s,
            None => continue,
        };
        if s < step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticShapeSpec};
    use crate::inr::ArchConfig;
    use crate::nn::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    #[test]
    fn logistic_loss_values() {
        let zero = Var::constant(Tensor::<f64>::zeros(&[4]));
        assert!((d_logistic_loss(&zero, &zero).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g_nonsaturating_loss(&zero).item() - 2f64.ln()).abs() < 1e-12);
        let big = Var::constant(Tensor::<f64>::full(&[2], 50.0));
        assert!(d_logistic_loss(&big, &big.neg()).item() < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = normal_tensor::<f64>(&[7], 3.0, &mut rng);
        let f = normal_tensor::<f64>(&[5], 3.0, &mut rng);
        let expect = r.data().iter().map(|&v| softplus(-v)).sum::<f64>() / 7.0
            + f.data().iter().map(|&v| softplus(v)).sum::<f64>() / 5.0;
        let got = d_logistic_loss(&Var::constant(r), &Var::constant(f)).item();
        assert!((got - expect).abs() < 1e-7);

        let pair = Var::constant(Tensor::<f64>::from_f64(vec![2], &[-1.0, 1.0]));
        let expect = (softplus(1.0) + softplus(-1.0)) / 2.0;
        assert!((g_nonsaturating_loss(&pair).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_gradient_is_scaled_sigmoid() {
        let v = Tensor::<f64>::from_f64(vec![3], &[-2.0, 0.3, 1.7]);
        let x = Var::leaf(v.clone());
        let g = grad(&g_nonsaturating_loss(&x), &[&x], false).remove(0);
        for (i, &f) in v.data().iter().enumerate() {
            let expect = -1.0 / (1.0 + f.exp()) / 3.0;
            assert!((g.value().data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn r1_on_linear_and_constant_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = normal_tensor::<f64>(&[12, 1], 1.0, &mut rng);
        let norm2: f64 = a.data().iter().map(|v| v * v).sum();
        let av = Var::constant(a);
        let linear = |x: &Var<f64>| Ok(x.reshape(&[x.shape()[0], 12]).matmul(&av).reshape(&[x.shape()[0]]));
        for batch in [1, 3, 8] {
            let x = Var::leaf(normal_tensor(&[batch, 2, 2, 3], 1.0, &mut rng));
            let p = r1_penalty(linear, &x, 10.0).unwrap().item();
            assert!((p - 5.0 * norm2).abs() < 1e-8 * norm2.max(1.0));
            assert_eq!(r1_penalty(linear, &x, 0.0).unwrap().item(), 0.0);
        }
        let x = Var::leaf(normal_tensor(&[2, 2, 2, 3], 1.0, &mut rng));
        let constant = |x: &Var<f64>| Ok(x.scale(0.0).sum_axis(3, false).sum_axis(2, false).sum_axis(1, false).add_scalar(1.0));
        assert_eq!(r1_penalty(constant, &x, 10.0).unwrap().item(), 0.0);
        assert!(r1_penalty(linear, &x.detach(), 10.0).is_err());
    }

    #[test]
    fn discriminator_shapes_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = DiscriminatorSpec {
            resolution: 8,
            stem_channels: 4,
            channels: vec![4, 8],
        };
        let d = Discriminator::<f32>::new(spec, &mut rng).unwrap();
        let x = Var::constant(normal_tensor(&[3, 8, 8, 3], 1.0, &mut rng));
        assert_eq!(d.forward(&x).unwrap().shape(), &[3]);
        assert!(d.forward(&Var::constant(Tensor::zeros(&[1, 4, 4, 3]))).is_err());
        let bad = DiscriminatorSpec {
            resolution: 12,
            stem_channels: 4,
            channels: vec![4, 4, 4],
        };
        assert!(Discriminator::<f32>::new(bad, &mut rng).is_err());
    }

    pub(crate) fn tiny_trainer(config: TrainConfig) -> Trainer {
        let arch = ArchConfig::tiny().build().unwrap();
        let gen = GeneratorConfig {
            z_dim: 8,
            hidden_dim: 16,
            ..GeneratorConfig::default()
        };
        let disc = DiscriminatorSpec {
            resolution: 8,
            stem_channels: 4,
            channels: vec![8, 8],
        };
        Trainer::new(config, arch, gen, disc).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            resolution: 8,
            total_steps: 3,
            record_timing: false,
            sample_count: 4,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> ImageDataset {
        let spec = SyntheticShapeSpec {
            resolution: 8,
            ..SyntheticShapeSpec::default()
        };
        make_synthetic(&spec, 32, true).unwrap()
    }

    #[test]
    fn zero_rates_freeze_parameters() {
        let cfg = TrainConfig {
            lr_g: 0.0,
            lr_shared_inr: 0.0,
            lr_d: 0.0,
            ..tiny_config()
        };
        let mut t = tiny_trainer(cfg);
        let g0 = t.generator.state();
        let d0 = t.discriminator.state();
        let real = tiny_data().batch(4, 0, 0).unwrap();
        t.train_step(&real).unwrap();
        assert_eq!(t.generator.state(), g0);
        assert_eq!(t.discriminator.state(), d0);
    }

    #[test]
    fn groups_update_independently() {
        let data = tiny_data();
        let real = data.batch(4, 0, 0).unwrap();
        let mut t = tiny_trainer(TrainConfig {
            lr_d: 0.0,
            ..tiny_config()
        });
        let (g0, d0) = (t.generator.state(), t.discriminator.state());
        t.train_step(&real).unwrap();
        assert_eq!(t.discriminator.state(), d0);
        assert_ne!(t.generator.state(), g0);

        let mut t = tiny_trainer(TrainConfig {
            lr_g: 0.0,
            lr_shared_inr: 0.0,
            ..tiny_config()
        });
        let (g0, d0) = (t.generator.state(), t.discriminator.state());
        t.train_step(&real).unwrap();
        assert_eq!(t.generator.state(), g0);
        assert_ne!(t.discriminator.state(), d0);

        // only the shared group moves: mapping and head weights stay put
        let mut t = tiny_trainer(TrainConfig {
            lr_g: 0.0,
            ..tiny_config()
        });
        let g0 = t.generator.state();
        t.train_step(&real).unwrap();
        let g1 = t.generator.state();
        assert_eq!(g1["g.head.weight"], g0["g.head.weight"]);
        assert_eq!(g1["g.map0.weight"], g0["g.map0.weight"]);
        assert_ne!(g1["g.head.bias"], g0["g.head.bias"]);
        assert_ne!(g1["inr.layer1.shared"], g0["inr.layer1.shared"]);
    }

    #[test]
    fn fixed_seed_runs_are_identical_and_resumable() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let mut t = tiny_trainer(tiny_config());
            let out = dir.path().join(sub);
            train_loop(&mut t, &data, &out, "h", |_| {}).unwrap();
            (std::fs::read(out.join("log.csv")).unwrap(), t)
        };
        let (log_a, ta) = run("a");
        let (log_b, _) = run("b");
        assert_eq!(log_a, log_b);
        let text = String::from_utf8(log_a.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with(LOG_HEADER));

        // resume from step 2 and finish: same log and same final state
        let ck = Checkpoint::load(&dir.path().join("a/checkpoint_0000003.bin")).unwrap();
        assert_eq!(ck.meta.step, 3);
        let mut short = tiny_trainer(TrainConfig {
            total_steps: 2,
            ..tiny_config()
        });
        let out = dir.path().join("c");
        train_loop(&mut short, &data, &out, "h", |_| {}).unwrap();
        let ck2 = Checkpoint::load(&out.join("latest.bin")).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck2, Some(tiny_config())).unwrap();
        train_loop(&mut resumed, &data, &out, "h", |_| {}).unwrap();
        assert_eq!(std::fs::read(out.join("log.csv")).unwrap(), log_a);
        assert_eq!(resumed.generator.full_state(), ta.generator.full_state());
        assert_eq!(resumed.discriminator.state(), ta.discriminator.state());
    }

    #[test]
    fn divergence_is_reported() {
        let mut t = tiny_trainer(tiny_config());
        let mut real = tiny_data().batch::<f32>(4, 0, 0).unwrap();
        real.data_mut()[0] = f32::NAN;
        assert!(matches!(t.train_step(&real), Err(Error::Divergence { step: 0, .. })));
    }
}
