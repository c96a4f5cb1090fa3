//! Evaluation: Fréchet distance on a frozen random feature extractor,
//! upsampled variants, keypoint predictability, MAC accounting and
//! latent projection.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Resampler, Var};
use crate::coords::Extent;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::hypernet::{sample_latent, Generator, GeneratorConfig};
use crate::inr::InrArchitecture;
use crate::nn::{Conv2d, ParamGroup};
use crate::seed;
use crate::tensor::Tensor;

/// Gaussian fit of a feature cloud, accumulated in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    /// Rows of `features` are samples. Unbiased covariance.
    pub fn from_rows(features: &DMatrix<f64>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
        }
        let mean = features.row_mean().transpose();
        let mut centred = features.clone();
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        Ok(FeatureStats {
            mean,
            covariance: (&cov + cov.transpose()) * 0.5,
            sample_count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Negative eigenvalue mass tolerated in the product spectrum, relative to its trace.
pub const NEGATIVE_MASS_TOL: f64 = 1e-6;

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)`.
///
/// The square-root trace comes from the spectrum of the symmetric
/// `Σ₁^½ Σ₂ Σ₁^½`, which shares its eigenvalues with `Σ₁Σ₂`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let s1 = psd_sqrt(&a.covariance)?;
    let m = &s1 * &b.covariance * &s1;
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5).eigenvalues;
    check_negative_mass(eig.as_slice())?;
    let tr_sqrt: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let dmu = (&a.mean - &b.mean).norm_squared();
    let d = dmu + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

fn check_negative_mass(eig: &[f64]) -> Result<()> {
    let trace: f64 = eig.iter().map(|l| l.abs()).sum();
    let negative: f64 = eig.iter().filter(|&&l| l < 0.0).map(|l| -l).sum();
    if negative > NEGATIVE_MASS_TOL * trace.max(f64::MIN_POSITIVE) {
        let worst = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::NumericalStability {
            message: format!("covariance is not PSD: negative mass {negative:e} of {trace:e}"),
            eigenvalue: worst,
        });
    }
    Ok(())
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    check_negative_mass(e.eigenvalues.as_slice())?;
    let d = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose())
}

pub const FEATURE_DIM: usize = 128;
pub const MIN_FID_SAMPLES: usize = 64;
const EXTRACT_BATCH: usize = 64;

/// Frozen random conv net: four 3×3 convolutions (the last three
/// strided) with leaky ReLU, then global average pooling to 128 features.
#[derive(Debug)]
pub struct FeatureExtractor {
    convs: Vec<Conv2d<f32>>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = seed::stream(seed, "fid_extractor", 0);
        let chans = [3, 32, 64, 128, FEATURE_DIM];
        let convs = (0..4)
            .map(|i| {
                let stride = if i == 0 { 1 } else { 2 };
                let name = format!("fid.conv{i}");
                Conv2d::new(&name, ParamGroup::Discriminator, chans[i], chans[i + 1], 3, stride, false, &mut rng)
            })
            .collect();
        FeatureExtractor { convs }
    }

    /// `[B, H, W, 3]` → `[B, 128]`, differentiable.
    pub fn forward(&self, images: &Var<f32>) -> Var<f32> {
        let mut x = images.scale(2.0).add_scalar(-1.0);
        for c in &self.convs {
            x = c.forward(&x).leaky_relu(0.2);
        }
        x.mean_axis(2, false).mean_axis(1, false)
    }

    /// One feature row per image.
    pub fn features(&self, images: &[Image]) -> Result<DMatrix<f64>> {
        let _g = no_grad();
        let mut out = DMatrix::zeros(images.len(), FEATURE_DIM);
        for (chunk_i, chunk) in images.chunks(EXTRACT_BATCH).enumerate() {
            let batch = Image::to_batch::<f32>(&chunk.iter().collect::<Vec<_>>())?;
            let f = self.forward(&Var::constant(batch));
            for (r, row) in f.value().data().chunks(FEATURE_DIM).enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    out[(chunk_i * EXTRACT_BATCH + r, c)] = v as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn stats(&self, images: &[Image]) -> Result<FeatureStats> {
        if images.len() < MIN_FID_SAMPLES {
            return Err(Error::invalid(format!(
                "need at least {MIN_FID_SAMPLES} images, got {}",
                images.len()
            )));
        }
        FeatureStats::from_rows(&self.features(images)?)
    }
}

/// Fréchet distance between extractor features of two image sets.
pub fn fid_proxy(real: &[Image], fake: &[Image], extractor_seed: u64) -> Result<f64> {
    let ex = FeatureExtractor::new(extractor_seed);
    frechet_distance(&ex.stats(real)?, &ex.stats(fake)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMethod {
    Nearest,
    Bilinear,
    Bicubic,
    /// Re-evaluate the generator's INR on a denser final grid.
    InrSuperres,
}

impl std::str::FromStr for UpsampleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMethod::Nearest),
            "bilinear" => Ok(UpsampleMethod::Bilinear),
            "bicubic" => Ok(UpsampleMethod::Bicubic),
            "inr_superres" => Ok(UpsampleMethod::InrSuperres),
            _ => Err(Error::invalid(format!("unknown upsampler {s:?}"))),
        }
    }
}

/// Pixel-space upsampling by an integer factor; results clamped to `[0, 1]`.
pub fn upsample_images(images: &[Image], factor: usize, method: UpsampleMethod) -> Result<Vec<Image>> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be positive"));
    }
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.height, first.width);
    let (ry, rx) = match method {
        UpsampleMethod::Nearest => (Resampler::nearest(h, h * factor), Resampler::nearest(w, w * factor)),
        UpsampleMethod::Bilinear => (Resampler::bilinear(h, h * factor), Resampler::bilinear(w, w * factor)),
        UpsampleMethod::Bicubic => (Resampler::bicubic(h, h * factor), Resampler::bicubic(w, w * factor)),
        UpsampleMethod::InrSuperres => {
            return Err(Error::invalid("INR superresolution needs a generator"))
        }
    };
    let _g = no_grad();
    let batch = Image::to_batch::<f32>(&images.iter().collect::<Vec<_>>())?;
    let up = Var::constant(batch).resample(&ry, &rx).clamp_unit();
    Image::from_batch(up.value())
}

fn divisor_factor(hi: usize, lo: usize) -> Result<usize> {
    if lo == 0 || hi % lo != 0 {
        return Err(Error::invalid(format!(
            "fake resolution {lo} does not divide real resolution {hi}"
        )));
    }
    Ok(hi / lo)
}

fn side(images: &[Image]) -> Result<usize> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image set"))?;
    if images.iter().any(|i| i.height != first.height || i.width != first.height) {
        return Err(Error::invalid("image sets must be square and uniform in size"));
    }
    Ok(first.height)
}

/// FID-proxy of real high-resolution images against pixel-upsampled fakes.
pub fn upsampled_fid_images(
    real_hi: &[Image],
    fake_lo: &[Image],
    method: UpsampleMethod,
    extractor_seed: u64,
) -> Result<f64> {
    let factor = divisor_factor(side(real_hi)?, side(fake_lo)?)?;
    fid_proxy(real_hi, &upsample_images(fake_lo, factor, method)?, extractor_seed)
}

/// FID-proxy of `real_hi` against generator samples for `latents`,
/// brought to the real resolution by `method`.
pub fn upsampled_fid(
    real_hi: &[Image],
    generator: &Generator<f32>,
    latents: &Tensor<f32>,
    method: UpsampleMethod,
    extractor_seed: u64,
) -> Result<f64> {
    let factor = divisor_factor(side(real_hi)?, generator.arch().resolution())?;
    let fakes = match method {
        UpsampleMethod::InrSuperres => generate_images(generator, latents, |g, p| {
            g.decoder().superresolve(p, factor)
        })?,
        _ => upsample_images(&generate_images(generator, latents, |g, p| g.decoder().evaluate(p))?, factor, method)?,
    };
    fid_proxy(real_hi, &fakes, extractor_seed)
}

/// Decode `latents` in chunks under `render`, without recording gradients.
pub fn generate_images(
    generator: &Generator<f32>,
    latents: &Tensor<f32>,
    render: impl Fn(&Generator<f32>, &crate::inr::InrParams<f32>) -> Result<Var<f32>>,
) -> Result<Vec<Image>> {
    let _g = no_grad();
    let (n, z_dim) = (latents.shape()[0], latents.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EXTRACT_BATCH) {
        let len = EXTRACT_BATCH.min(n - start);
        let z = Tensor::new(vec![len, z_dim], latents.data()[start * z_dim..(start + len) * z_dim].to_vec());
        let params = generator.params_for(&Var::constant(z), None)?;
        out.extend(Image::from_batch(render(generator, &params)?.value())?);
    }
    Ok(out)
}

/// Native-resolution samples for `count` latents drawn from `seed`.
pub fn sample_images(generator: &Generator<f32>, count: usize, seed: u64) -> Result<Vec<Image>> {
    let z = sample_latent(count, generator.config().z_dim, seed)?;
    generate_images(generator, &z, |g, p| g.decoder().evaluate(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSpace {
    Z,
    W,
}

/// Result of one keypoint-predictability run. Errors are mean squared
/// error over held-out keypoint coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KplResult {
    pub kpl_value: f64,
    pub kpl_random: f64,
    /// A ridge term had to be added to a rank-deficient design.
    pub regularized: bool,
}

pub const KPL_RIDGE: f64 = 1e-6;

/// Ordinary least squares with intercept: returns `[d+1, k]` coefficients
/// (intercept last) and whether the ridge fallback was used.
pub fn fit_linear(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(Error::invalid("regression needs matching, nonempty rows"));
    }
    let xa = with_intercept(x);
    let gram = xa.transpose() * &xa;
    let rhs = xa.transpose() * y;
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(0.0f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let deficient = x.nrows() < xa.ncols() || min <= 1e-10 * max.max(f64::MIN_POSITIVE);
    let gram = if deficient {
        log::warn!("rank-deficient regression design; adding ridge {KPL_RIDGE}");
        gram + DMatrix::identity(xa.ncols(), xa.ncols()) * KPL_RIDGE
    } else {
        gram
    };
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("regression normal equations are singular"))?;
    Ok((chol.solve(&rhs), deficient))
}

pub fn predict_linear(coef: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    with_intercept(x) * coef
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(x.ncols(), 1.0)
}

pub fn mean_squared_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm_squared() / a.len().max(1) as f64
}

/// Held-out error of a linear map latents → keypoints, next to the same
/// fit on latents shuffled against their targets.
pub fn kpl_from_data(
    x_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    x_test: &DMatrix<f64>,
    y_test: &DMatrix<f64>,
    seed: u64,
) -> Result<KplResult> {
    let (coef, reg_a) = fit_linear(x_train, y_train)?;
    let kpl_value = mean_squared_error(&predict_linear(&coef, x_test), y_test);
    let mut perm: Vec<usize> = (0..x_train.nrows()).collect();
    perm.shuffle(&mut seed::stream(seed, "kpl_shuffle", 0));
    let shuffled = x_train.select_rows(&perm);
    let (coef_r, reg_b) = fit_linear(&shuffled, y_train)?;
    let kpl_random = mean_squared_error(&predict_linear(&coef_r, x_test), y_test);
    Ok(KplResult {
        kpl_value,
        kpl_random,
        regularized: reg_a || reg_b,
    })
}

/// Latent and keypoint rows for `count` generated samples.
pub fn latent_keypoint_pairs(
    generator: &Generator<f32>,
    oracle: &dyn Fn(&Image) -> Vec<f64>,
    count: usize,
    space: LatentSpace,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let _g = no_grad();
    let z_dim = generator.config().z_dim;
    let z = sample_latent::<f32>(count, z_dim, seed)?;
    let mut lat_rows = Vec::new();
    let mut kp_rows: Vec<Vec<f64>> = Vec::new();
    for start in (0..count).step_by(EXTRACT_BATCH) {
        let len = EXTRACT_BATCH.min(count - start);
        let zc = Var::constant(Tensor::new(
            vec![len, z_dim],
            z.data()[start * z_dim..(start + len) * z_dim].to_vec(),
        ));
        let w = generator.map_latent(&zc)?;
        let imgs = generator.decoder().evaluate(&generator.generate_params(&w)?)?;
        let lat = match space {
            LatentSpace::Z => zc.value().clone(),
            LatentSpace::W => w.value().clone(),
        };
        lat_rows.extend(lat.data().iter().map(|&v| v as f64));
        for img in Image::from_batch(imgs.value())? {
            kp_rows.push(oracle(&img));
        }
    }
    let dim = lat_rows.len() / count;
    let k = kp_rows[0].len();
    if kp_rows.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("keypoint oracle returned vectors of varying length"));
    }
    Ok((
        DMatrix::from_row_slice(count, dim, &lat_rows),
        DMatrix::from_row_slice(count, k, &kp_rows.concat()),
    ))
}

/// Keypoint predictability on held-out generated samples.
pub fn kpl(
    generator: &Generator<f32>,
    oracle: &dyn Fn(&Image) -> Vec<f64>,
    n_train: usize,
    n_test: usize,
    space: LatentSpace,
    seed: u64,
) -> Result<KplResult> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("KPL needs nonempty train and test splits"));
    }
    let mut rng = seed::stream(seed, "kpl", 0);
    let (xtr, ytr) = latent_keypoint_pairs(generator, oracle, n_train, space, rng.random())?;
    let (xte, yte) = latent_keypoint_pairs(generator, oracle, n_test, space, rng.random())?;
    kpl_from_data(&xtr, &ytr, &xte, &yte, seed)
}

/// Keypoint predictability where the test split is real images projected
/// into W; targets are the oracle applied to the real images.
pub fn kpl_projected(
    generator: &Generator<f32>,
    oracle: &dyn Fn(&Image) -> Vec<f64>,
    real: &[Image],
    n_train: usize,
    projection: &ProjectionConfig,
    seed: u64,
) -> Result<KplResult> {
    if real.is_empty() || n_train == 0 {
        return Err(Error::invalid("projected KPL needs real images and a train split"));
    }
    let mut rng = seed::stream(seed, "kpl", 0);
    let (xtr, ytr) = latent_keypoint_pairs(generator, oracle, n_train, LatentSpace::W, rng.random())?;
    let h = generator.config().hidden_dim;
    let mut xte = DMatrix::zeros(real.len(), h);
    let mut kps = Vec::new();
    for (i, img) in real.iter().enumerate() {
        let p = project_latent(generator, img, projection)?;
        for (j, &v) in p.w.data().iter().enumerate() {
            xte[(i, j)] = v as f64;
        }
        kps.push(oracle(img));
    }
    let yte = DMatrix::from_row_slice(real.len(), kps[0].len(), &kps.concat());
    kpl_from_data(&xtr, &ytr, &xte, &yte, seed)
}

/// Intensity-weighted centre of an image in `[0, 1]²`.
pub fn center_of_mass_oracle(img: &Image) -> Vec<f64> {
    img.center_of_mass().to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMacs {
    pub block: usize,
    pub layer: usize,
    pub resolution: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub macs: u64,
}

/// Multiply-accumulate budget of generating one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacReport {
    pub resolution: usize,
    pub layers: Vec<LayerMacs>,
    /// Fourier embedding per block.
    pub fourier: Vec<u64>,
    /// Embedding plus affine layers, per block.
    pub blocks: Vec<u64>,
    /// `A·B` products forming the modulated weights; resolution independent.
    pub modulation: u64,
    /// Mapping network and parameter head; resolution independent.
    pub hypernetwork: u64,
    pub total: u64,
}

impl MacReport {
    pub fn inr_total(&self) -> u64 {
        self.blocks.iter().sum()
    }

    pub const CSV_HEADER: &'static str = "resolution,inr,modulation,hypernetwork,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.resolution,
            self.inr_total(),
            self.modulation,
            self.hypernetwork,
            self.total
        )
    }

    /// Per-layer breakdown as CSV.
    pub fn layers_csv(&self) -> String {
        let mut s = String::from("block,layer,resolution,n_in,n_out,macs\n");
        for (k, &f) in self.fourier.iter().enumerate() {
            let r = self.layers.iter().find(|l| l.block == k).map_or(0, |l| l.resolution);
            writeln!(s, "{k},fourier,{r},2,,{f}").unwrap();
        }
        for l in &self.layers {
            writeln!(s, "{},{},{},{},{},{}", l.block, l.layer, l.resolution, l.n_in, l.n_out, l.macs).unwrap();
        }
        s
    }
}

/// MACs of one image at output side `resolution`: `ρ²·n_in·n_out` per
/// affine layer and `ρ²·2·n_f` per Fourier embedding at each block's
/// working resolution `ρ`, plus the resolution-independent weight
/// synthesis.
pub fn count_macs(arch: &InrArchitecture, gen: &GeneratorConfig, resolution: usize) -> Result<MacReport> {
    let res = arch.resolutions_for(resolution)?;
    let mut layers = Vec::new();
    let mut fourier = Vec::new();
    let mut blocks = Vec::new();
    let mut modulation = 0u64;
    let mut idx = 0;
    for (k, block) in arch.blocks.iter().enumerate() {
        let p = (res[k] * res[k]) as u64;
        let f = p * 2 * block.fourier_n_f as u64;
        let mut sub = f;
        fourier.push(f);
        for spec in &block.layers {
            let macs = p * (spec.n_in * spec.n_out) as u64;
            if !spec.direct {
                modulation += (spec.n_out * spec.rank * spec.n_in) as u64;
            }
            layers.push(LayerMacs {
                block: k,
                layer: idx,
                resolution: res[k],
                n_in: spec.n_in,
                n_out: spec.n_out,
                macs,
            });
            sub += macs;
            idx += 1;
        }
        blocks.push(sub);
    }
    let hypernetwork = gen.macs(arch.param_len());
    let total = blocks.iter().sum::<u64>() + modulation + hypernetwork;
    Ok(MacReport {
        resolution,
        layers,
        fourier,
        blocks,
        modulation,
        hypernetwork,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub steps: usize,
    pub lr: f64,
    /// Backtrack the step size so the loss never increases.
    pub line_search: bool,
    /// Weight of a squared feature distance under the FID extractor.
    pub feature_weight: f64,
    pub extractor_seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            steps: 200,
            lr: 0.1,
            line_search: true,
            feature_weight: 0.0,
            extractor_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    /// Best `w` found, `[1, hidden]`.
    pub w: Tensor<f32>,
    /// Loss of the current iterate before each step, then after the last.
    pub history: Vec<f64>,
}

const MAX_BACKTRACKS: usize = 30;

/// Gradient descent on `w` (initialized at the running mean) to reproduce
/// `target` under pixel MSE, optionally plus a feature term.
pub fn project_latent(generator: &Generator<f32>, target: &Image, config: &ProjectionConfig) -> Result<Projection> {
    project_latent_from(generator, target, config, generator.running_mean_w().clone())
}

pub fn project_latent_from(
    generator: &Generator<f32>,
    target: &Image,
    config: &ProjectionConfig,
    init: Tensor<f32>,
) -> Result<Projection> {
    let r = generator.arch().resolution();
    if target.height != r || target.width != r {
        return Err(Error::invalid(format!(
            "target is {}x{}, generator renders {r}x{r}",
            target.height, target.width
        )));
    }
    let h = generator.config().hidden_dim;
    if init.numel() != h {
        return Err(Error::invalid(format!("initial w has {} values, expected {h}", init.numel())));
    }
    let init = init.reshape(&[1, h]);
    let target_t = Var::constant(Image::to_batch::<f32>(&[target])?);
    let extractor = (config.feature_weight > 0.0).then(|| FeatureExtractor::new(config.extractor_seed));
    let target_feat = extractor.as_ref().map(|e| {
        let _g = no_grad();
        e.forward(&target_t).detach()
    });
    let loss_of = |w: &Var<f32>| -> Result<Var<f32>> {
        let img = generator.decoder().evaluate(&generator.generate_params(w)?)?;
        let mut loss = img.sub(&target_t).square().mean();
        if let (Some(e), Some(tf)) = (&extractor, &target_feat) {
            let f = e.forward(&img);
            loss = loss.add(&f.sub(tf).square().mean().scale(config.feature_weight));
        }
        Ok(loss)
    };
    let value_of = |w: &Tensor<f32>| -> Result<f64> {
        let _g = no_grad();
        Ok(loss_of(&Var::constant(w.clone()))?.item() as f64)
    };

    let mut w = init;
    let mut history = Vec::with_capacity(config.steps + 1);
    let mut best = (f64::INFINITY, w.clone());
    for step in 0..config.steps {
        let wv = Var::leaf(w.clone());
        let loss = loss_of(&wv)?;
        let lv = loss.item() as f64;
        if !lv.is_finite() {
            return Err(Error::Divergence {
                step: step as u64,
                message: format!("projection loss {lv} after history {history:?}"),
            });
        }
        history.push(lv);
        if lv < best.0 {
            best = (lv, w.clone());
        }
        let g = grad(&loss, &[&wv], false).remove(0);
        let step_to = |lr: f64| w.zip_map(g.value(), |a, b| a - (lr as f32) * b);
        if config.line_search {
            let mut lr = config.lr;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let cand = step_to(lr);
                if value_of(&cand)? <= lv {
                    accepted = Some(cand);
                    break;
                }
                lr *= 0.5;
            }
            if let Some(c) = accepted {
                w = c;
            }
        } else {
            w = step_to(config.lr);
        }
    }
    let last = value_of(&w)?;
    if !last.is_finite() {
        return Err(Error::Divergence {
            step: config.steps as u64,
            message: format!("projection loss {last} after history {history:?}"),
        });
    }
    history.push(last);
    if last < best.0 {
        best = (last, w);
    }
    Ok(Projection { w: best.1, history })
}

/// A named scalar result with enough context to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn push(&mut self, metric: impl Into<String>, value: f64, config_hash: &str, seed: u64) {
        self.records.push(MetricRecord {
            metric: metric.into(),
            value,
            config_hash: config_hash.to_string(),
            seed,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,config_hash,seed\n");
        for r in &self.records {
            writeln!(s, "{},{:.10e},{},{}", r.metric, r.value, r.config_hash, r.seed).unwrap();
        }
        s
    }

    pub fn pretty(&self) -> String {
        let width = self.records.iter().map(|r| r.metric.len()).max().unwrap_or(0);
        let mut s = String::new();
        for r in &self.records {
            writeln!(s, "{:width$}  {:.6}", r.metric, r.value).unwrap();
        }
        s
    }
}

/// Unit-square extent helper for callers that zoom before scoring.
pub fn render_extent(generator: &Generator<f32>, latents: &Tensor<f32>, extent: Extent) -> Result<Vec<Image>> {
    generate_images(generator, latents, |g, p| g.decoder().zoom(p, extent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::count_macs_of;
    use crate::inr::ArchConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn stats_1d(mean: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: DVector::from_element(1, mean),
            covariance: DMatrix::from_element(1, 1, var),
            sample_count: 100,
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let a = stats_1d(0.0, 1.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        assert!((frechet_distance(&a, &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-8);
        assert!((frechet_distance(&a, &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn frechet_commuting_diagonal_oracle() {
        // diagonal covariances commute: Tr sqrt(S1 S2) = Σ sqrt(s1_i s2_i)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 6;
        let m1: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m2: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v1: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        let v2: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        let mk = |m: &[f64], v: &[f64]| FeatureStats {
            mean: DVector::from_row_slice(m),
            covariance: DMatrix::from_diagonal(&DVector::from_row_slice(v)),
            sample_count: 10,
        };
        let expect: f64 = (0..d)
            .map(|i| (m1[i] - m2[i]).powi(2) + (v1[i].sqrt() - v2[i].sqrt()).powi(2))
            .sum();
        let (a, b) = (mk(&m1, &v1), mk(&m2, &v2));
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-10);
        assert!((frechet_distance(&b, &a).unwrap() - got).abs() < 1e-8);
    }

    #[test]
    fn frechet_rejects_indefinite_covariance() {
        let mut a = stats_1d(0.0, 1.0);
        a.covariance[(0, 0)] = -1.0;
        assert!(matches!(
            frechet_distance(&a, &stats_1d(0.0, 1.0)),
            Err(Error::NumericalStability { eigenvalue, .. }) if eigenvalue == -1.0
        ));
        let b = FeatureStats {
            mean: DVector::zeros(2),
            covariance: DMatrix::identity(2, 2),
            sample_count: 2,
        };
        assert!(frechet_distance(&a, &b).is_err());
    }

    #[test]
    fn feature_stats_match_direct_formula() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 0.0, 5.0, 4.0]);
        let s = FeatureStats::from_rows(&x).unwrap();
        assert_eq!(s.mean.as_slice(), &[3.0, 2.0]);
        // var x = (4+0+4)/2 = 4, var y = (0+4+4)/2 = 4, cov = (-2*0 + 0*-2 + 2*2)/2 = 2
        assert_eq!(s.covariance.as_slice(), &[4.0, 2.0, 2.0, 4.0]);
        assert!(FeatureStats::from_rows(&DMatrix::zeros(1, 2)).is_err());
    }

    fn noise_images(n: usize, res: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Image::new(res, res, (0..res * res * 3).map(|_| rng.random::<f32>()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn fid_proxy_basic_properties() {
        let a = noise_images(64, 8, 0);
        assert!(fid_proxy(&a, &a, 1).unwrap().abs() < 1e-6);
        let mut rev = a.clone();
        rev.reverse();
        let b = noise_images(64, 8, 1);
        let d = fid_proxy(&a, &b, 1).unwrap();
        let dr = fid_proxy(&rev, &b, 1).unwrap();
        // 64 samples in 128 dims: near-zero eigenvalues pass through a square root
        assert!((dr - d).abs() < 1e-7 * d.max(1.0), "{dr} vs {d}");
        let black = vec![Image::filled(8, 8, [0.0; 3]); 64];
        let white = vec![Image::filled(8, 8, [1.0; 3]); 64];
        assert!(fid_proxy(&black, &white, 1).unwrap() > 0.0);
        assert!(fid_proxy(&a[..63], &b, 1).is_err());
    }

    #[test]
    fn upsampling_properties() {
        let a = noise_images(64, 4, 2);
        let same = upsampled_fid_images(&a, &a, UpsampleMethod::Nearest, 0).unwrap();
        assert_eq!(same, fid_proxy(&a, &a, 0).unwrap());
        let up = upsample_images(&a[..2], 2, UpsampleMethod::Nearest).unwrap();
        for img in &up {
            for y in (0..8).step_by(2) {
                for x in (0..8).step_by(2) {
                    let p = img.pixel(y, x);
                    assert_eq!(img.pixel(y + 1, x), p);
                    assert_eq!(img.pixel(y, x + 1), p);
                    assert_eq!(img.pixel(y + 1, x + 1), p);
                }
            }
        }
        let hi = noise_images(64, 6, 3);
        assert!(upsampled_fid_images(&hi, &a, UpsampleMethod::Bilinear, 0).is_err());
        for m in [UpsampleMethod::Bilinear, UpsampleMethod::Bicubic] {
            assert!(upsample_images(&a, 2, m).unwrap().iter().all(Image::in_unit_range));
        }
        assert!(upsample_images(&a, 2, UpsampleMethod::InrSuperres).is_err());
    }

    #[test]
    fn regression_recovers_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 1.0).unwrap();
        let x = DMatrix::from_fn(50, 3, |_, _| n.sample(&mut rng));
        let beta = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let y = (&x * &beta).add_scalar(0.25);
        let (coef, reg) = fit_linear(&x, &y).unwrap();
        assert!(!reg);
        assert!((coef.rows(0, 3) - &beta).abs().max() < 1e-10);
        assert!((coef[(3, 0)] - 0.25).abs() < 1e-10);

        // duplicated column: rank deficient
        let xd = x.clone().insert_column(3, 0.0).map_with_location(|_, _, v| v);
        let mut xd = xd;
        for r in 0..50 {
            xd[(r, 3)] = xd[(r, 0)];
        }
        let (coef, reg) = fit_linear(&xd, &y).unwrap();
        assert!(reg);
        assert!(mean_squared_error(&predict_linear(&coef, &xd), &y) < 1e-8);
    }

    #[test]
    fn kpl_constant_and_iid_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 1.0).unwrap();
        let xtr = DMatrix::from_fn(400, 4, |_, _| n.sample(&mut rng));
        let xte = DMatrix::from_fn(300, 4, |_, _| n.sample(&mut rng));
        let c = |rows| DMatrix::from_element(rows, 2, 0.7);
        let r = kpl_from_data(&xtr, &c(400), &xte, &c(300), 0).unwrap();
        assert!(r.kpl_value.abs() < 1e-20 && r.kpl_random.abs() < 1e-20);

        let ytr = DMatrix::from_fn(400, 2, |_, _| 3.0 * n.sample(&mut rng));
        let yte = DMatrix::from_fn(300, 2, |_, _| 3.0 * n.sample(&mut rng));
        let mean = yte.mean();
        let var = yte.map(|v| (v - mean).powi(2)).sum() / yte.len() as f64;
        let r = kpl_from_data(&xtr, &ytr, &xte, &yte, 0).unwrap();
        assert!((r.kpl_random / var - 1.0).abs() < 0.15, "{} vs {var}", r.kpl_random);
    }

    #[test]
    fn kpl_invariant_to_joint_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = Normal::new(0.0, 1.0).unwrap();
        let d = 5;
        let xtr = DMatrix::from_fn(60, d, |_, _| n.sample(&mut rng));
        let xte = DMatrix::from_fn(20, d, |_, _| n.sample(&mut rng));
        let ytr = DMatrix::from_fn(60, 2, |_, _| n.sample(&mut rng));
        let yte = DMatrix::from_fn(20, 2, |_, _| n.sample(&mut rng));
        let q = DMatrix::from_fn(d, d, |_, _| n.sample(&mut rng)).qr().q();
        let a = kpl_from_data(&xtr, &ytr, &xte, &yte, 9).unwrap();
        let b = kpl_from_data(&(&xtr * &q), &ytr, &(&xte * &q), &yte, 9).unwrap();
        assert!((a.kpl_value - b.kpl_value).abs() < 1e-9);
        assert!((a.kpl_random - b.kpl_random).abs() < 1e-9);
    }

    fn small_generator() -> Generator<f32> {
        let cfg = GeneratorConfig {
            z_dim: 8,
            hidden_dim: 16,
            ..GeneratorConfig::default()
        };
        Generator::new(cfg, ArchConfig::tiny().build().unwrap(), 3).unwrap()
    }

    #[test]
    fn macs_match_instrumented_counter() {
        let g = small_generator();
        let z = Var::constant(sample_latent::<f32>(1, 8, 0).unwrap());
        for res in [1, 2, 4, 8, 16, 32] {
            let report = count_macs(g.arch(), g.config(), res).unwrap();
            let resolutions = g.arch().resolutions_for(res).unwrap();
            let (img, counted) = count_macs_of(|| {
                let _g = no_grad();
                let p = g.params_for(&z, None).unwrap();
                g.decoder().run(&p, &resolutions, Extent::UNIT).unwrap()
            });
            assert_eq!(img.shape()[1], res);
            assert_eq!(report.total, counted, "resolution {res}");
            assert_eq!(
                report.total,
                report.inr_total() + report.modulation + report.hypernetwork
            );
        }
    }

    #[test]
    fn single_layer_mac_count() {
        let arch = ArchConfig::single_block(4, 3).build().unwrap();
        let r = count_macs(&arch, &GeneratorConfig::default(), 4).unwrap();
        let last = r.layers.last().unwrap();
        assert_eq!(last.macs, 16 * (last.n_in * last.n_out) as u64);
        assert_eq!(r.fourier[0], 16 * 2 * arch.blocks[0].fourier_n_f as u64);
    }

    #[test]
    fn macs_shrink_with_resolution() {
        let arch = ArchConfig::reference().build().unwrap();
        let gen = GeneratorConfig::default();
        let full = count_macs(&arch, &gen, 32).unwrap();
        let half = count_macs(&arch, &gen, 16).unwrap();
        assert!(half.total < full.total);
        for (a, b) in full.blocks.iter().zip(&half.blocks) {
            assert_eq!(*a, 4 * b);
        }
    }

    #[test]
    fn projection_fixed_point_and_monotone() {
        let g = small_generator();
        let w_star = {
            let _g = no_grad();
            g.map_latent(&Var::constant(sample_latent(1, 8, 11).unwrap())).unwrap().value().clone()
        };
        let target = {
            let _g = no_grad();
            let p = g.generate_params(&Var::constant(w_star.clone())).unwrap();
            Image::from_batch(g.decoder().evaluate(&p).unwrap().value()).unwrap().remove(0)
        };
        let cfg = ProjectionConfig {
            steps: 5,
            ..ProjectionConfig::default()
        };
        let p = project_latent_from(&g, &target, &cfg, w_star).unwrap();
        assert!(p.history[0] < 1e-12);

        let random = noise_images(1, 8, 7).remove(0);
        let cfg = ProjectionConfig {
            steps: 20,
            lr: 5.0,
            ..ProjectionConfig::default()
        };
        let p = project_latent(&g, &random, &cfg).unwrap();
        assert!(p.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(p.history.last().unwrap() <= &p.history[0]);
        let again = project_latent(&g, &random, &cfg).unwrap();
        assert_eq!(again.w, p.w);

        let plain = ProjectionConfig {
            line_search: false,
            lr: 0.5,
            feature_weight: 0.1,
            ..cfg
        };
        let p = project_latent(&g, &random, &plain).unwrap();
        assert!(p.history.last().unwrap() <= &p.history[0]);
        assert!(project_latent(&g, &noise_images(1, 4, 0)[0], &plain).is_err());
    }

    #[test]
    fn kpl_runs_on_generator() {
        let g = small_generator();
        let r = kpl(&g, &center_of_mass_oracle, 40, 16, LatentSpace::W, 0).unwrap();
        assert!(r.kpl_value.is_finite() && r.kpl_random.is_finite());
        assert!(kpl(&g, &|_| vec![1.0], 40, 16, LatentSpace::Z, 0).unwrap().kpl_value < 1e-20);
    }

    #[test]
    fn report_csv() {
        let mut r = MetricReport::default();
        r.push("fid_proxy", 1.5, "abc", 3);
        assert_eq!(r.to_csv(), "metric,value,config_hash,seed\nfid_proxy,1.5000000000e0,abc,3\n");
        assert!(r.pretty().contains("fid_proxy"));
    }
}
