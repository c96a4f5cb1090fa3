//! Factorized multiplicative modulation.
//!
//! A layer owns a shared matrix `W_s` (`n_out × n_in`). Per sample the
//! hypernetwork emits low-rank factors `A` (`n_out × r`) and `B`
//! (`r × n_in`); the effective weight is `W = W_s ⊙ act(A·B)`. With the
//! sigmoid activation `W` keeps the full rank of `W_s` even though the
//! generated part is rank `r`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FmmActivation {
    #[default]
    Sigmoid,
    /// Ablation: plain multiplicative low-rank modulation.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FmmLayerSpec {
    pub n_in: usize,
    pub n_out: usize,
    pub rank: usize,
    pub activation: FmmActivation,
    /// Weights are generated whole, without a shared matrix.
    pub direct: bool,
}

impl FmmLayerSpec {
    pub fn factorized(n_in: usize, n_out: usize, rank: usize, activation: FmmActivation) -> Self {
        FmmLayerSpec {
            n_in,
            n_out,
            rank,
            activation,
            direct: false,
        }
    }

    pub fn direct(n_in: usize, n_out: usize) -> Self {
        FmmLayerSpec {
            n_in,
            n_out,
            rank: 0,
            activation: FmmActivation::Sigmoid,
            direct: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 {
            return Err(Error::invalid(format!("layer has an empty side: {self:?}")));
        }
        if !self.direct && (self.rank == 0 || self.rank > self.n_in.min(self.n_out)) {
            return Err(Error::invalid(format!(
                "rank {} outside 1..={} for a {}x{} layer",
                self.rank,
                self.n_in.min(self.n_out),
                self.n_out,
                self.n_in
            )));
        }
        Ok(())
    }

    /// Number of values the hypernetwork emits for this layer.
    pub fn generated_len(&self) -> usize {
        if self.direct {
            self.n_out * self.n_in + self.n_out
        } else {
            self.n_out * self.rank + self.rank * self.n_in + self.n_out
        }
    }
}

/// Hypernetwork output for one factorized layer. Either unbatched
/// (`A: [n_out, r]`, `B: [r, n_in]`, `bias: [n_out]`) or batched with a
/// leading sample axis on all three.
#[derive(Debug, Clone)]
pub struct FmmFactors<T: Real> {
    pub a: Var<T>,
    pub b: Var<T>,
    pub bias: Var<T>,
}

impl<T: Real> FmmFactors<T> {
    pub fn from_tensors(a: Tensor<T>, b: Tensor<T>, bias: Tensor<T>) -> Self {
        FmmFactors {
            a: Var::constant(a),
            b: Var::constant(b),
            bias: Var::constant(bias),
        }
    }

    fn check(&self, spec: &FmmLayerSpec) -> Result<Option<usize>> {
        let (a, b, bias) = (self.a.shape(), self.b.shape(), self.bias.shape());
        let batched = a.len() == 3;
        let batch = batched.then(|| a[0]);
        let lead: Vec<usize> = batch.into_iter().collect();
        let want = |tail: &[usize]| [lead.as_slice(), tail].concat();
        if a != want(&[spec.n_out, spec.rank]).as_slice()
            || b != want(&[spec.rank, spec.n_in]).as_slice()
            || bias != want(&[spec.n_out]).as_slice()
        {
            return Err(Error::invalid(format!(
                "factor shapes A{a:?} B{b:?} bias{bias:?} do not match layer {}x{} rank {}",
                spec.n_out, spec.n_in, spec.rank
            )));
        }
        Ok(batch)
    }
}

/// `W = W_s ⊙ act(A·B)`, batched when the factors are.
pub fn modulate<T: Real>(
    spec: &FmmLayerSpec,
    shared_w: &Var<T>,
    factors: &FmmFactors<T>,
) -> Result<Var<T>> {
    if spec.direct {
        return Err(Error::invalid("direct layers are not modulated"));
    }
    spec.validate()?;
    if shared_w.shape() != [spec.n_out, spec.n_in] {
        return Err(Error::invalid(format!(
            "shared weight {:?} does not match {}x{}",
            shared_w.shape(),
            spec.n_out,
            spec.n_in
        )));
    }
    factors.check(spec)?;
    let wh = factors.a.matmul(&factors.b);
    let gate = match spec.activation {
        FmmActivation::Sigmoid => wh.sigmoid(),
        FmmActivation::Identity => wh,
    };
    Ok(gate.mul(shared_w))
}

/// Row-wise `W·x + bias`, i.e. a 1×1 convolution over a table of points.
///
/// `weight`: `[n_out, n_in]` or `[B, n_out, n_in]`; `inputs`: `[P, n_in]`
/// or `[B, P, n_in]`; `bias`: `[n_out]` or `[B, n_out]`.
pub fn apply_affine<T: Real>(weight: &Var<T>, bias: &Var<T>, inputs: &Var<T>) -> Result<Var<T>> {
    let ws = weight.shape();
    let xs = inputs.shape();
    if !(ws.len() == 2 || ws.len() == 3) || !(xs.len() == 2 || xs.len() == 3) {
        return Err(Error::invalid(format!(
            "affine expects rank 2/3 weight and inputs, got {ws:?} and {xs:?}"
        )));
    }
    let n_in = ws[ws.len() - 1];
    let n_out = ws[ws.len() - 2];
    if xs[xs.len() - 1] != n_in {
        return Err(Error::invalid(format!(
            "inputs have {} columns, layer expects {n_in}",
            xs[xs.len() - 1]
        )));
    }
    if ws.len() == 3 && xs.len() == 3 && ws[0] != xs[0] {
        return Err(Error::invalid(format!(
            "batch mismatch between weight {ws:?} and inputs {xs:?}"
        )));
    }
    let out = inputs.matmul_t(weight, false, true);
    let bias = match bias.shape() {
        [n] if *n == n_out => bias.clone(),
        [b, n] if *n == n_out && out.rank() == 3 && *b == out.shape()[0] => {
            bias.reshape(&[*b, 1, n_out])
        }
        s => {
            return Err(Error::invalid(format!(
                "bias {s:?} does not match output {:?}",
                out.shape()
            )))
        }
    };
    Ok(out.add(&bias))
}

/// Factors that reproduce an arbitrary `target` modulation exactly when
/// the rank equals the smaller layer side: one factor is an identity,
/// the other carries the target.
pub fn simulate_direct_hypernet<T: Real>(
    spec: &FmmLayerSpec,
    target_wh: &Tensor<T>,
) -> Result<FmmFactors<T>> {
    let full = spec.n_in.min(spec.n_out);
    if spec.rank != full {
        return Err(Error::UnsupportedRank {
            rank: spec.rank,
            required: full,
        });
    }
    if target_wh.shape() != [spec.n_out, spec.n_in] {
        return Err(Error::invalid(format!(
            "target {:?} does not match {}x{}",
            target_wh.shape(),
            spec.n_out,
            spec.n_in
        )));
    }
    let (a, b) = if spec.n_out <= spec.n_in {
        (Tensor::eye(spec.n_out), target_wh.clone())
    } else {
        (target_wh.clone(), Tensor::eye(spec.n_in))
    };
    let factors = FmmFactors::from_tensors(a, b, Tensor::zeros(&[spec.n_out]));
    let product = factors.a.matmul(&factors.b);
    if product.value() != target_wh {
        return Err(Error::InvalidState(
            "identity-padded factorization did not reproduce the target".into(),
        ));
    }
    Ok(factors)
}

/// Zero-mean Gaussian with standard deviation `sqrt(2 / n_in)`.
pub fn init_shared_weight<T: Real>(n_out: usize, n_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("valid std");
    Tensor::new(
        vec![n_out, n_in],
        (0..n_out * n_in).map(|_| T::of(normal.sample(rng))).collect(),
    )
}
