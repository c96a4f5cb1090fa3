//! Multi-scale implicit decoder.
//!
//! The decoder is a stack of blocks at doubling resolutions. Each block
//! evaluates its layers on its own coordinate grid; its input is the
//! block's Fourier features concatenated with the previous block's
//! output, replicated up to the new grid. Every layer is a per-point
//! affine map, so evaluating a grid is a batched 1×1 convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Resampler, Var};
use crate::coords::{embed, make_grid, Extent, FourierMode};
use crate::error::{Error, Result};
use crate::fmm::{apply_affine, init_shared_weight, modulate, FmmActivation, FmmFactors, FmmLayerSpec};
use crate::nn::{normal_tensor, Module, Param, ParamGroup};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    SigmoidToUnit,
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub resolution: usize,
    pub layers: Vec<FmmLayerSpec>,
    pub fourier_n_f: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InrArchitecture {
    pub blocks: Vec<BlockSpec>,
    pub upsample_mode: UpsampleMode,
    pub output_channels: usize,
    pub output_activation: OutputActivation,
    pub fourier_mode: FourierMode,
    pub fourier_scale: f64,
    /// Concatenate raw `(x, y)` to the input of every non-first layer of a block.
    pub coord_skip: bool,
    pub hidden_slope: f64,
}

/// Compact description from which an [`InrArchitecture`] is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub resolutions: Vec<usize>,
    pub widths: Vec<usize>,
    /// Hidden layers per block; the final block also gets the output layer.
    pub layers_per_block: usize,
    pub fourier_n_f: usize,
    pub fourier_scale: f64,
    pub fourier_mode: FourierMode,
    pub rank: usize,
    pub fmm_activation: FmmActivation,
    pub upsample_mode: UpsampleMode,
    pub output_activation: OutputActivation,
    pub coord_skip: bool,
    /// Generate the first and last layers whole instead of factorized.
    pub direct_first_last: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::reference()
    }
}

impl ArchConfig {
    /// 8² → 16² → 32², widths 64/64/32.
    pub fn reference() -> Self {
        ArchConfig {
            resolutions: vec![8, 16, 32],
            widths: vec![64, 64, 32],
            layers_per_block: 2,
            fourier_n_f: 32,
            fourier_scale: 1.0,
            fourier_mode: FourierMode::SinCos,
            rank: 10,
            fmm_activation: FmmActivation::Sigmoid,
            upsample_mode: UpsampleMode::Nearest,
            output_activation: OutputActivation::SigmoidToUnit,
            coord_skip: true,
            direct_first_last: true,
        }
    }

    /// 4² → 8², widths 8/8; small enough for scalar oracles.
    pub fn tiny() -> Self {
        ArchConfig {
            resolutions: vec![4, 8],
            widths: vec![8, 8],
            fourier_n_f: 4,
            rank: 3,
            ..ArchConfig::reference()
        }
    }

    /// One block at `resolution`: a pointwise MLP on Fourier features.
    pub fn single_block(resolution: usize, width: usize) -> Self {
        ArchConfig {
            resolutions: vec![resolution],
            widths: vec![width],
            fourier_n_f: 4,
            rank: 3.min(width),
            ..ArchConfig::reference()
        }
    }

    pub fn build(&self) -> Result<InrArchitecture> {
        if self.resolutions.is_empty() || self.resolutions.len() != self.widths.len() {
            return Err(Error::invalid(format!(
                "need one width per block resolution, got {} resolutions and {} widths",
                self.resolutions.len(),
                self.widths.len()
            )));
        }
        if self.layers_per_block == 0 || self.fourier_n_f == 0 || self.rank == 0 {
            return Err(Error::invalid(
                "layers_per_block, fourier_n_f and rank must be positive",
            ));
        }
        let emb = self.fourier_mode.output_dim(self.fourier_n_f);
        let skip = if self.coord_skip { 2 } else { 0 };
        let k = self.resolutions.len();
        let mut blocks = Vec::with_capacity(k);
        let mut prev_width = 0;
        for (b, (&res, &width)) in self.resolutions.iter().zip(&self.widths).enumerate() {
            let mut dims = vec![(emb + prev_width, width)];
            for _ in 1..self.layers_per_block {
                dims.push((width + skip, width));
            }
            if b == k - 1 {
                dims.push((width + skip, 3));
            }
            let last = dims.len() - 1;
            let layers = dims
                .into_iter()
                .enumerate()
                .map(|(l, (n_in, n_out))| {
                    let first_of_all = b == 0 && l == 0;
                    let last_of_all = b == k - 1 && l == last;
                    if self.direct_first_last && (first_of_all || last_of_all) {
                        FmmLayerSpec::direct(n_in, n_out)
                    } else {
                        FmmLayerSpec::factorized(
                            n_in,
                            n_out,
                            self.rank.min(n_in).min(n_out),
                            self.fmm_activation,
                        )
                    }
                })
                .collect();
            blocks.push(BlockSpec {
                resolution: res,
                layers,
                fourier_n_f: self.fourier_n_f,
            });
            prev_width = width;
        }
        let arch = InrArchitecture {
            blocks,
            upsample_mode: self.upsample_mode,
            output_channels: 3,
            output_activation: self.output_activation,
            fourier_mode: self.fourier_mode,
            fourier_scale: self.fourier_scale,
            coord_skip: self.coord_skip,
            hidden_slope: 0.2,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// What a slice of the flattened parameter vector holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    FactorA { layer: usize },
    FactorB { layer: usize },
    Bias { layer: usize },
    DirectWeight { layer: usize },
    Fourier { block: usize },
}

/// One per-sample tensor of [`InrParams`], without the batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSegment {
    pub name: String,
    pub kind: SegmentKind,
    pub shape: Vec<usize>,
}

impl ParamSegment {
    pub fn len(&self) -> usize {
        crate::tensor::numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl InrArchitecture {
    pub fn resolution(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.resolution)
    }

    pub fn layers(&self) -> impl Iterator<Item = &FmmLayerSpec> {
        self.blocks.iter().flat_map(|b| b.layers.iter())
    }

    pub fn num_layers(&self) -> usize {
        self.layers().count()
    }

    pub fn embed_dim(&self, block: usize) -> usize {
        self.fourier_mode.output_dim(self.blocks[block].fourier_n_f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("architecture has no blocks"));
        }
        if self.output_channels == 0 {
            return Err(Error::invalid("output_channels must be positive"));
        }
        if !(self.fourier_scale > 0.0 && self.fourier_scale.is_finite()) {
            return Err(Error::invalid("fourier_scale must be positive"));
        }
        let skip = if self.coord_skip { 2 } else { 0 };
        let mut prev_width = 0;
        for (k, block) in self.blocks.iter().enumerate() {
            if block.resolution == 0 || block.fourier_n_f == 0 {
                return Err(Error::invalid(format!("block {k} has zero resolution or n_f")));
            }
            if k > 0 && block.resolution != 2 * self.blocks[k - 1].resolution {
                return Err(Error::invalid(format!(
                    "block resolutions must double: {} then {}",
                    self.blocks[k - 1].resolution,
                    block.resolution
                )));
            }
            if !(1..=4).contains(&block.layers.len()) {
                return Err(Error::invalid(format!(
                    "block {k} has {} layers, expected 1 to 4",
                    block.layers.len()
                )));
            }
            let mut n_in = self.embed_dim(k) + prev_width;
            for (l, layer) in block.layers.iter().enumerate() {
                layer.validate()?;
                if layer.n_in != n_in {
                    return Err(Error::invalid(format!(
                        "block {k} layer {l} expects {} inputs, receives {n_in}",
                        layer.n_in
                    )));
                }
                n_in = layer.n_out + skip;
            }
            prev_width = block.layers.last().expect("nonempty").n_out;
        }
        if prev_width != self.output_channels {
            return Err(Error::invalid(format!(
                "final layer emits {prev_width} channels, expected {}",
                self.output_channels
            )));
        }
        Ok(())
    }

    /// Canonical order of per-sample tensors: per layer `A, B, bias` or
    /// `W, bias`, then one `U` per block.
    pub fn param_segments(&self) -> Vec<ParamSegment> {
        let mut out = Vec::new();
        for (i, s) in self.layers().enumerate() {
            if s.direct {
                out.push(ParamSegment {
                    name: format!("layer{i}.weight"),
                    kind: SegmentKind::DirectWeight { layer: i },
                    shape: vec![s.n_out, s.n_in],
                });
            } else {
                out.push(ParamSegment {
                    name: format!("layer{i}.a"),
                    kind: SegmentKind::FactorA { layer: i },
                    shape: vec![s.n_out, s.rank],
                });
                out.push(ParamSegment {
                    name: format!("layer{i}.b"),
                    kind: SegmentKind::FactorB { layer: i },
                    shape: vec![s.rank, s.n_in],
                });
            }
            out.push(ParamSegment {
                name: format!("layer{i}.bias"),
                kind: SegmentKind::Bias { layer: i },
                shape: vec![s.n_out],
            });
        }
        for (k, b) in self.blocks.iter().enumerate() {
            out.push(ParamSegment {
                name: format!("block{k}.fourier"),
                kind: SegmentKind::Fourier { block: k },
                shape: vec![b.fourier_n_f, 2],
            });
        }
        out
    }

    /// Length of one sample's flattened parameters.
    pub fn param_len(&self) -> usize {
        self.param_segments().iter().map(ParamSegment::len).sum()
    }

    /// Per-block working resolutions for native evaluation.
    pub fn native_resolutions(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.resolution).collect()
    }

    /// Final block densified `factor` times, earlier blocks unchanged.
    pub fn superres_resolutions(&self, factor: usize) -> Result<Vec<usize>> {
        if factor == 0 {
            return Err(Error::invalid("superresolution factor must be at least 1"));
        }
        let mut r = self.native_resolutions();
        *r.last_mut().expect("nonempty") *= factor;
        Ok(r)
    }

    /// Every block scaled by `r_low / R`, floored, never below 1.
    pub fn lowres_resolutions(&self, r_low: usize) -> Result<Vec<usize>> {
        let full = self.resolution();
        if r_low == 0 || r_low > full {
            return Err(Error::invalid(format!(
                "low resolution must be in 1..={full}, got {r_low}"
            )));
        }
        Ok(self
            .blocks
            .iter()
            .map(|b| (b.resolution * r_low / full).max(1))
            .collect())
    }

    /// Working resolutions for an output of side `resolution`: a sparser
    /// grid below the native size, a densified final block above it.
    pub fn resolutions_for(&self, resolution: usize) -> Result<Vec<usize>> {
        let full = self.resolution();
        if resolution <= full {
            self.lowres_resolutions(resolution)
        } else if resolution % full == 0 {
            self.superres_resolutions(resolution / full)
        } else {
            Err(Error::invalid(format!(
                "resolution {resolution} is neither at most {full} nor a multiple of it"
            )))
        }
    }
}

/// Generated parameters of one layer, batched over samples.
#[derive(Debug, Clone)]
pub enum LayerParams<T: Real> {
    Factorized(FmmFactors<T>),
    /// `weight: [B, n_out, n_in]`, `bias: [B, n_out]`.
    Direct { weight: Var<T>, bias: Var<T> },
}

/// A batch of sample-specific decoder parameters. Every tensor carries a
/// leading batch axis.
#[derive(Debug, Clone)]
pub struct InrParams<T: Real> {
    pub batch: usize,
    pub layers: Vec<LayerParams<T>>,
    /// `[B, n_f, 2]` per block.
    pub fourier: Vec<Var<T>>,
}

impl<T: Real> InrParams<T> {
    /// Assemble from tensors in [`InrArchitecture::param_segments`] order.
    pub fn from_vars(arch: &InrArchitecture, vars: Vec<Var<T>>) -> Result<Self> {
        let segments = arch.param_segments();
        if vars.len() != segments.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                segments.len(),
                vars.len()
            )));
        }
        let batch = vars[0].shape().first().copied().unwrap_or(0);
        for (v, s) in vars.iter().zip(&segments) {
            if v.shape().first() != Some(&batch) || v.shape()[1..] != s.shape[..] {
                return Err(Error::invalid(format!(
                    "{} has shape {:?}, expected [{batch}, {:?}]",
                    s.name,
                    v.shape(),
                    s.shape
                )));
            }
        }
        let mut it = vars.into_iter();
        let mut layers = Vec::new();
        for s in arch.layers() {
            let mut next = || it.next().expect("count checked");
            layers.push(if s.direct {
                let weight = next();
                LayerParams::Direct {
                    weight,
                    bias: next(),
                }
            } else {
                let (a, b) = (next(), next());
                LayerParams::Factorized(FmmFactors { a, b, bias: next() })
            });
        }
        Ok(InrParams {
            batch,
            layers,
            fourier: it.collect(),
        })
    }

    pub fn vars(&self) -> Vec<Var<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerParams::Factorized(f) => out.extend([f.a.clone(), f.b.clone(), f.bias.clone()]),
                LayerParams::Direct { weight, bias } => out.extend([weight.clone(), bias.clone()]),
            }
        }
        out.extend(self.fourier.iter().cloned());
        out
    }

    fn rebuild(&self, vars: Vec<Var<T>>) -> Self {
        let batch = vars[0].shape()[0];
        let mut it = vars.into_iter();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Factorized(_) => {
                    let (a, b, bias) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                    LayerParams::Factorized(FmmFactors { a, b, bias })
                }
                LayerParams::Direct { .. } => {
                    let weight = it.next().unwrap();
                    LayerParams::Direct {
                        weight,
                        bias: it.next().unwrap(),
                    }
                }
            })
            .collect();
        InrParams {
            batch,
            layers,
            fourier: it.collect(),
        }
    }

    /// Samples `start..start + len` of the batch.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.batch || len == 0 {
            return Err(Error::invalid(format!(
                "slice {start}..{} outside batch of {}",
                start + len,
                self.batch
            )));
        }
        Ok(self.rebuild(self.vars().iter().map(|v| v.narrow(0, start, len)).collect()))
    }

    pub fn concat(parts: &[InrParams<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero parameter sets"))?;
        let lists: Vec<Vec<Var<T>>> = parts.iter().map(|p| p.vars()).collect();
        let n = lists[0].len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let column: Vec<Var<T>> = lists.iter().map(|l| l[i].clone()).collect();
            if column.iter().any(|v| v.shape()[1..] != column[0].shape()[1..]) {
                return Err(Error::invalid("parameter sets have different shapes"));
            }
            out.push(Var::concat(&column, 0));
        }
        Ok(first.rebuild(out))
    }

    pub fn detach(&self) -> Self {
        self.rebuild(self.vars().iter().map(Var::detach).collect())
    }

    /// Random parameters with i.i.d. entries, for tests and fitting.
    pub fn random(
        arch: &InrArchitecture,
        batch: usize,
        factor_std: f64,
        fourier_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let vars = arch
            .param_segments()
            .iter()
            .map(|s| {
                let std = match s.kind {
                    SegmentKind::Fourier { .. } => fourier_std,
                    SegmentKind::DirectWeight { .. } => (2.0 / s.shape[1] as f64).sqrt(),
                    _ => factor_std,
                };
                let shape: Vec<usize> = [&[batch][..], &s.shape].concat();
                Var::constant(normal_tensor(&shape, std, rng))
            })
            .collect();
        InrParams::from_vars(arch, vars).expect("shapes built from the architecture")
    }
}

/// Elementwise `(1 − t)·p1 + t·p2` over every tensor.
pub fn lerp_params<T: Real>(p1: &InrParams<T>, p2: &InrParams<T>, t: f64) -> Result<InrParams<T>> {
    let (a, b) = (p1.vars(), p2.vars());
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::invalid("cannot interpolate parameters of different shapes"));
    }
    Ok(p1.rebuild(
        a.iter()
            .zip(&b)
            .map(|(x, y)| x.scale(1.0 - t).add(&y.scale(t)))
            .collect(),
    ))
}

/// Resample `[B, R, R, C]` features to `[B, out, out, C]`.
pub fn upsample_features<T: Real>(features: &Var<T>, out: usize, mode: UpsampleMode) -> Result<Var<T>> {
    let s = features.shape();
    if s.len() != 4 || s[1] != s[2] || s[1] == 0 || out == 0 {
        return Err(Error::invalid(format!(
            "upsampling needs a square [B, R, R, C] map, got {s:?}"
        )));
    }
    if s[1] == out {
        return Ok(features.clone());
    }
    let r = match mode {
        UpsampleMode::Nearest => Resampler::nearest(s[1], out),
        UpsampleMode::Bilinear => Resampler::bilinear(s[1], out),
    };
    Ok(features.resample(&r, &r))
}

/// Intermediate values of one evaluation.
#[derive(Debug, Clone)]
pub struct InrTrace<T: Real> {
    /// Previous block's features after upsampling, `[B, res, res, C]`;
    /// `None` for the first block.
    pub upsampled: Vec<Option<Var<T>>>,
    /// Output of each block's last layer, `[B, res, res, C]`.
    pub block_outputs: Vec<Var<T>>,
}

/// The decoder: architecture plus the shared matrices of all factorized
/// layers.
#[derive(Debug)]
pub struct InrDecoder<T: Real> {
    arch: InrArchitecture,
    shared: Vec<Option<Param<T>>>,
}

impl<T: Real> InrDecoder<T> {
    pub fn new(arch: InrArchitecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let shared = arch
            .layers()
            .enumerate()
            .map(|(i, s)| {
                (!s.direct).then(|| {
                    Param::new(
                        format!("inr.layer{i}.shared"),
                        ParamGroup::SharedInr,
                        init_shared_weight(s.n_out, s.n_in, rng),
                    )
                })
            })
            .collect();
        Ok(InrDecoder { arch, shared })
    }

    pub fn arch(&self) -> &InrArchitecture {
        &self.arch
    }

    pub fn shared_weight(&self, layer: usize) -> Option<&Param<T>> {
        self.shared.get(layer).and_then(Option::as_ref)
    }

    /// Per-layer effective weights `[B, n_out, n_in]` and biases `[B, n_out]`.
    pub fn layer_weights(&self, params: &InrParams<T>) -> Result<Vec<(Var<T>, Var<T>)>> {
        if params.layers.len() != self.arch.num_layers()
            || params.fourier.len() != self.arch.blocks.len()
        {
            return Err(Error::invalid(format!(
                "parameters cover {} layers and {} blocks, architecture has {} and {}",
                params.layers.len(),
                params.fourier.len(),
                self.arch.num_layers(),
                self.arch.blocks.len()
            )));
        }
        self.arch
            .layers()
            .zip(&params.layers)
            .zip(&self.shared)
            .map(|((spec, lp), shared)| match (lp, shared) {
                (LayerParams::Factorized(f), Some(ws)) if !spec.direct => {
                    Ok((modulate(spec, &ws.var(), f)?, f.bias.clone()))
                }
                (LayerParams::Direct { weight, bias }, None) if spec.direct => {
                    let b = params.batch;
                    if weight.shape() != [b, spec.n_out, spec.n_in] || bias.shape() != [b, spec.n_out] {
                        return Err(Error::invalid(format!(
                            "direct layer expects [{b}, {}, {}], got {:?}",
                            spec.n_out,
                            spec.n_in,
                            weight.shape()
                        )));
                    }
                    Ok((weight.clone(), bias.clone()))
                }
                _ => Err(Error::invalid("layer parameter kind does not match the architecture")),
            })
            .collect()
    }

    /// Evaluate with explicit per-block working resolutions over `extent`.
    /// Returns the image `[B, H, W, C]` and the trace.
    pub fn run_traced(
        &self,
        params: &InrParams<T>,
        resolutions: &[usize],
        extent: Extent,
    ) -> Result<(Var<T>, InrTrace<T>)> {
        let arch = &self.arch;
        if resolutions.len() != arch.blocks.len() || resolutions.contains(&0) {
            return Err(Error::invalid(format!(
                "need one positive resolution per block, got {resolutions:?}"
            )));
        }
        let weights = self.layer_weights(params)?;
        let batch = params.batch;
        let mut trace = InrTrace {
            upsampled: Vec::new(),
            block_outputs: Vec::new(),
        };
        let mut prev: Option<Var<T>> = None;
        let mut layer = 0;
        let n_layers = arch.num_layers();
        for (k, block) in arch.blocks.iter().enumerate() {
            let res = resolutions[k];
            let points = res * res;
            let u = &params.fourier[k];
            if u.shape() != [batch, block.fourier_n_f, 2] {
                return Err(Error::invalid(format!(
                    "block {k} Fourier matrix has shape {:?}",
                    u.shape()
                )));
            }
            let coords = Var::constant(make_grid(res, res, extent)?.to_tensor::<T>());
            let features = embed(&coords, u, arch.fourier_scale, arch.fourier_mode);
            let up = match &prev {
                Some(p) => Some(upsample_features(p, res, arch.upsample_mode)?),
                None => None,
            };
            let mut x = match &up {
                Some(u) => {
                    let c = u.shape()[3];
                    Var::concat(&[features, u.reshape(&[batch, points, c])], 2)
                }
                None => features,
            };
            trace.upsampled.push(up);
            let skip = arch
                .coord_skip
                .then(|| coords.reshape(&[1, points, 2]).expand(&[batch, points, 2]));
            for l in 0..block.layers.len() {
                if l > 0 {
                    if let Some(s) = &skip {
                        x = Var::concat(&[x, s.clone()], 2);
                    }
                }
                let (w, b) = &weights[layer];
                x = apply_affine(w, b, &x)?;
                layer += 1;
                if layer < n_layers {
                    x = x.leaky_relu(arch.hidden_slope);
                }
            }
            let c = x.shape()[2];
            let out = x.reshape(&[batch, res, res, c]);
            trace.block_outputs.push(out.clone());
            prev = Some(out);
        }
        let logits = prev.expect("at least one block");
        let image = match arch.output_activation {
            OutputActivation::SigmoidToUnit => logits.sigmoid(),
            OutputActivation::Clamp => logits.clamp_unit(),
        };
        Ok((image, trace))
    }

    pub fn run(&self, params: &InrParams<T>, resolutions: &[usize], extent: Extent) -> Result<Var<T>> {
        Ok(self.run_traced(params, resolutions, extent)?.0)
    }

    /// Native resolution over the unit square: `[B, R, R, 3]` in `[0, 1]`.
    pub fn evaluate(&self, params: &InrParams<T>) -> Result<Var<T>> {
        self.run(params, &self.arch.native_resolutions(), Extent::UNIT)
    }

    /// Final block on an `s·R` grid; earlier blocks unchanged.
    pub fn superresolve(&self, params: &InrParams<T>, factor: usize) -> Result<Var<T>> {
        self.run(params, &self.arch.superres_resolutions(factor)?, Extent::UNIT)
    }

    /// Native resolution over an arbitrary extent.
    pub fn zoom(&self, params: &InrParams<T>, extent: Extent) -> Result<Var<T>> {
        self.run(params, &self.arch.native_resolutions(), extent)
    }

    /// Every block on a proportionally sparser grid.
    pub fn evaluate_lowres(&self, params: &InrParams<T>, r_low: usize) -> Result<Var<T>> {
        self.run(params, &self.arch.lowres_resolutions(r_low)?, Extent::UNIT)
    }
}

impl<T: Real> Module<T> for InrDecoder<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.shared.iter().flatten().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::count_macs_of;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ArchConfig, seed: u64) -> (InrDecoder<f64>, InrParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = cfg.build().unwrap();
        let dec = InrDecoder::new(arch.clone(), &mut rng).unwrap();
        let p = InrParams::random(&arch, 2, 0.5, 3.0, &mut rng);
        (dec, p)
    }

    #[test]
    fn reference_arch_shapes() {
        let arch = ArchConfig::reference().build().unwrap();
        let ins: Vec<usize> = arch.layers().map(|l| l.n_in).collect();
        let outs: Vec<usize> = arch.layers().map(|l| l.n_out).collect();
        assert_eq!(ins, vec![64, 66, 128, 66, 128, 34, 34]);
        assert_eq!(outs, vec![64, 64, 64, 64, 32, 32, 3]);
        let direct: Vec<bool> = arch.layers().map(|l| l.direct).collect();
        assert_eq!(direct, vec![true, false, false, false, false, false, true]);
        assert_eq!(arch.native_resolutions(), vec![8, 16, 32]);
        // counting oracle over the architecture
        let mut expect = 0;
        for l in arch.layers() {
            expect += if l.direct {
                l.n_out * l.n_in + l.n_out
            } else {
                l.n_out * l.rank + l.rank * l.n_in + l.n_out
            };
        }
        expect += 3 * 32 * 2;
        assert_eq!(arch.param_len(), expect);
    }

    #[test]
    fn invalid_architectures_rejected() {
        let mut arch = ArchConfig::tiny().build().unwrap();
        arch.blocks[1].resolution = 12;
        assert!(arch.validate().is_err());
        let mut arch = ArchConfig::tiny().build().unwrap();
        arch.blocks[0].layers[1].n_in += 1;
        assert!(arch.validate().is_err());
        let cfg = ArchConfig {
            widths: vec![8],
            ..ArchConfig::tiny()
        };
        assert!(cfg.build().is_err());
    }

    #[test]
    fn zero_final_layer_gives_mid_grey() {
        let (dec, p) = setup(&ArchConfig::single_block(4, 6), 1);
        let vars: Vec<Var<f64>> = p
            .vars()
            .into_iter()
            .enumerate()
            .map(|(i, v)| if (5..=6).contains(&i) { Var::constant(Tensor::zeros(v.shape())) } else { v })
            .collect();
        // vars 5 and 6 are the direct output layer's weight and bias
        let segs = dec.arch().param_segments();
        assert_eq!(segs[5].kind, SegmentKind::DirectWeight { layer: 2 });
        let p = InrParams::from_vars(dec.arch(), vars).unwrap();
        let img = dec.evaluate(&p).unwrap();
        assert!(img.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn nearest_features_replicate_into_cells() {
        let (dec, p) = setup(&ArchConfig::tiny(), 2);
        let (_, trace) = dec
            .run_traced(&p, &dec.arch().native_resolutions(), Extent::UNIT)
            .unwrap();
        let low = trace.block_outputs[0].value();
        let up = trace.upsampled[1].as_ref().unwrap().value();
        assert_eq!(up.shape(), &[2, 8, 8, 8]);
        for b in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..8 {
                        assert_eq!(up.at(&[b, y, x, c]), low.at(&[b, y / 2, x / 2, c]));
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_examples() {
        let one = Var::constant(Tensor::<f64>::from_f64(vec![1, 1, 1, 2], &[3.0, 4.0]));
        let up = upsample_features(&one, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(up.value().data(), &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let m = Var::constant(Tensor::<f64>::from_f64(vec![1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let up = upsample_features(&m, 4, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            up.value().data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let rect = Var::constant(Tensor::<f64>::zeros(&[1, 2, 3, 1]));
        assert!(upsample_features(&rect, 4, UpsampleMode::Nearest).is_err());
    }

    #[test]
    fn bilinear_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = normal_tensor::<f64>(&[1, 4, 4, 3], 1.0, &mut rng);
        let up = upsample_features(&Var::constant(x.clone()), 8, UpsampleMode::Bilinear).unwrap();
        let interp = |i: usize| {
            let pos = ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
            let lo = pos.floor() as usize;
            (lo, (lo + 1).min(3), pos - lo as f64)
        };
        // rows first, then columns
        let mut mid = vec![0.0; 8 * 4 * 3];
        for i in 0..8 {
            let (lo, hi, t) = interp(i);
            for j in 0..4 {
                for c in 0..3 {
                    mid[(i * 4 + j) * 3 + c] =
                        (1.0 - t) * x.at(&[0, lo, j, c]) + t * x.at(&[0, hi, j, c]);
                }
            }
        }
        for i in 0..8 {
            for j in 0..8 {
                let (lo, hi, t) = interp(j);
                for c in 0..3 {
                    let v = (1.0 - t) * mid[(i * 4 + lo) * 3 + c] + t * mid[(i * 4 + hi) * 3 + c];
                    assert!((up.value().at(&[0, i, j, c]) - v).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn resampling_variants() {
        let (dec, p) = setup(&ArchConfig::tiny(), 4);
        let native = dec.evaluate(&p).unwrap();
        assert_eq!(native.shape(), &[2, 8, 8, 3]);
        assert!(native.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(dec.superresolve(&p, 1).unwrap().value(), native.value());
        assert_eq!(dec.zoom(&p, Extent::UNIT).unwrap().value(), native.value());
        assert_eq!(dec.evaluate_lowres(&p, 8).unwrap().value(), native.value());
        assert_eq!(dec.superresolve(&p, 2).unwrap().shape(), &[2, 16, 16, 3]);
        assert_eq!(dec.evaluate_lowres(&p, 4).unwrap().shape(), &[2, 4, 4, 3]);
        assert_eq!(dec.evaluate_lowres(&p, 3).unwrap().shape(), &[2, 3, 3, 3]);
        assert_eq!(dec.arch().lowres_resolutions(1).unwrap(), vec![1, 1]);
        assert!(dec.evaluate_lowres(&p, 0).is_err());
        assert!(dec.superresolve(&p, 0).is_err());
        let z = dec.zoom(&p, Extent::square(-1.5, 1.5).unwrap()).unwrap();
        assert!(z.value().data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));

        let (_, full) = count_macs_of(|| dec.evaluate(&p).unwrap());
        let (_, low) = count_macs_of(|| dec.evaluate_lowres(&p, 4).unwrap());
        assert!(low < full);
    }

    #[test]
    fn single_block_is_pointwise() {
        let (dec, p) = setup(&ArchConfig::single_block(8, 6), 5);
        let full = dec.evaluate(&p).unwrap();
        // 4x4 centres over [-1/16, 15/16] are (2j + 0.5)/8, the even-index
        // centres of the native 8x8 grid
        let e = Extent::square(-1.0 / 16.0, 15.0 / 16.0).unwrap();
        let coarse = dec.run(&p, &[4], e).unwrap();
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    for c in 0..3 {
                        let a = coarse.value().at(&[b, i, j, c]);
                        let f = full.value().at(&[b, 2 * i, 2 * j, c]);
                        assert!((a - f).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn lerp_endpoints_and_symmetry() {
        let (dec, p) = setup(&ArchConfig::tiny(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = InrParams::random(dec.arch(), 2, 0.5, 3.0, &mut rng);
        let at0 = lerp_params(&p, &q, 0.0).unwrap();
        let at1 = lerp_params(&p, &q, 1.0).unwrap();
        for ((a, b), (c, d)) in at0.vars().iter().zip(p.vars()).zip(at1.vars().iter().zip(q.vars())) {
            assert_eq!(a.value(), b.value());
            assert_eq!(c.value(), d.value());
        }
        let neg = p.rebuild(p.vars().iter().map(Var::neg).collect());
        let mid = lerp_params(&p, &neg, 0.5).unwrap();
        assert!(mid.vars().iter().all(|v| v.value().data().iter().all(|&x| x == 0.0)));

        let decoded_mid = dec.evaluate(&lerp_params(&p, &q, 0.5).unwrap()).unwrap();
        let pixel_mid = dec.evaluate(&p).unwrap().scale(0.5).add(&dec.evaluate(&q).unwrap().scale(0.5));
        assert!(decoded_mid.value().max_abs_diff(pixel_mid.value()) > 0.0);

        let other = InrParams::random(&ArchConfig::single_block(4, 4).build().unwrap(), 2, 0.5, 1.0, &mut rng);
        assert!(lerp_params(&p, &other, 0.5).is_err());
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let (dec, p) = setup(&ArchConfig::tiny(), 8);
        let a = p.slice(0, 1).unwrap();
        let b = p.slice(1, 1).unwrap();
        let joined = InrParams::concat(&[a.clone(), b]).unwrap();
        assert_eq!(dec.evaluate(&joined).unwrap().value(), dec.evaluate(&p).unwrap().value());
        let single = dec.evaluate(&a).unwrap();
        let both = dec.evaluate(&p).unwrap();
        assert!(both.narrow(0, 0, 1).value().max_abs_diff(single.value()) < 1e-12);
        assert!(p.slice(1, 2).is_err());
    }
}
