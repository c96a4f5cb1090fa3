//! Coordinate grids and Fourier coordinate features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Axis-aligned rectangle of dimensionless coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extent {
    pub const UNIT: Extent = Extent {
        x_min: 0.0,
        x_max: 1.0,
        y_min: 0.0,
        y_max: 1.0,
    };

    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let e = Extent {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        e.validate()?;
        Ok(e)
    }

    /// `[lo, hi]²`.
    pub fn square(lo: f64, hi: f64) -> Result<Self> {
        Self::new(lo, hi, lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.x_min, self.x_max, self.y_min, self.y_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite extent {self}")));
        }
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::invalid(format!("degenerate extent {self}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

impl Default for Extent {
    fn default() -> Self {
        Extent::UNIT
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x_min, self.x_max, self.y_min, self.y_max)
    }
}

impl FromStr for Extent {
    type Err = Error;

    /// Parses `x0,x1,y0,y1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("extent '{s}': {e}")))?;
        match parts.as_slice() {
            &[x0, x1, y0, y1] => Extent::new(x0, x1, y0, y1),
            _ => Err(Error::invalid(format!(
                "extent '{s}' must have four comma-separated values"
            ))),
        }
    }
}

/// Uniform pixel-centre grid in row-major order (rows follow `y`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    pub extent: Extent,
    pub points: Vec<[f64; 2]>,
}

/// Build the `height × width` grid of pixel centres covering `extent`:
/// `x_j = x_min + (j + 0.5) / width · (x_max − x_min)`, likewise for `y`.
pub fn make_grid(height: usize, width: usize, extent: Extent) -> Result<CoordGrid> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "grid dimensions must be positive, got {height}x{width}"
        )));
    }
    extent.validate()?;
    let xs: Vec<f64> = (0..width)
        .map(|j| extent.x_min + (j as f64 + 0.5) / width as f64 * extent.width())
        .collect();
    let ys: Vec<f64> = (0..height)
        .map(|i| extent.y_min + (i as f64 + 0.5) / height as f64 * extent.height())
        .collect();
    let points = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| [x, y]))
        .collect();
    Ok(CoordGrid {
        height,
        width,
        extent,
        points,
    })
}

impl CoordGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `[len, 2]` tensor of `(x, y)` rows.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.points.len(), 2],
            self.points
                .iter()
                .flat_map(|p| [T::of(p[0]), T::of(p[1])])
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FourierMode {
    /// `concat(sin(γUp), cos(γUp))`
    #[default]
    SinCos,
    /// `sin(γUp)` only.
    Sin,
}

impl FourierMode {
    pub fn output_dim(self, n_f: usize) -> usize {
        match self {
            FourierMode::SinCos => 2 * n_f,
            FourierMode::Sin => n_f,
        }
    }
}

/// Frequency matrix `U` (`n_f × 2`) with multiplier `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierEmbedding<T> {
    pub matrix: Tensor<T>,
    pub scale: f64,
    pub mode: FourierMode,
}

impl<T: Real> FourierEmbedding<T> {
    pub fn new(matrix: Tensor<T>, scale: f64, mode: FourierMode) -> Result<Self> {
        if matrix.rank() != 2 || matrix.shape()[1] != 2 {
            return Err(Error::invalid(format!(
                "Fourier matrix must be n_f x 2, got {:?}",
                matrix.shape()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("Fourier scale must be positive, got {scale}")));
        }
        Ok(FourierEmbedding {
            matrix,
            scale,
            mode,
        })
    }

    pub fn num_frequencies(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.mode.output_dim(self.num_frequencies())
    }

    /// Euclidean norm of every frequency row.
    pub fn row_norms(&self) -> Vec<f64> {
        self.matrix
            .data()
            .chunks(2)
            .map(|r| r[0].as_f64().hypot(r[1].as_f64()))
            .collect()
    }
}

/// Feature table with one row per grid point.
pub fn fourier_embed<T: Real>(grid: &CoordGrid, emb: &FourierEmbedding<T>) -> Result<Tensor<T>> {
    if emb.matrix.rank() != 2 || emb.matrix.shape()[1] != 2 {
        return Err(Error::invalid(format!(
            "Fourier matrix must have 2 columns, got {:?}",
            emb.matrix.shape()
        )));
    }
    let coords = Var::constant(grid.to_tensor::<T>());
    let u = Var::constant(emb.matrix.clone());
    Ok(embed(&coords, &u, emb.scale, emb.mode).value().clone())
}

/// Differentiable Fourier features.
///
/// `coords` is `[P, 2]`; `u` is `[n_f, 2]` or batched `[B, n_f, 2]`.
/// Returns `[P, d]` or `[B, P, d]`.
pub fn embed<T: Real>(coords: &Var<T>, u: &Var<T>, scale: f64, mode: FourierMode) -> Var<T> {
    let phase = coords.matmul_t(u, false, true);
    let phase = if scale == 1.0 { phase } else { phase.scale(scale) };
    let last = phase.rank() - 1;
    match mode {
        FourierMode::SinCos => Var::concat(&[phase.sin(), phase.cos()], last),
        FourierMode::Sin => phase.sin(),
    }
}

/// Histogram of frequency-row norms over `[min, max]` of those norms.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn frequency_histogram<T: Real>(
    emb: &FourierEmbedding<T>,
    num_bins: usize,
) -> Result<FrequencyHistogram> {
    if num_bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let norms = emb.row_norms();
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if norms.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    };
    let width = (hi - lo) / num_bins as f64;
    let edges = (0..=num_bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0; num_bins];
    for n in norms {
        let bin = (((n - lo) / width).floor() as usize).min(num_bins - 1);
        counts[bin] += 1;
    }
    Ok(FrequencyHistogram { edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_grid_has_pixel_centres() {
        let g = make_grid(256, 256, Extent::UNIT).unwrap();
        assert_eq!(g.len(), 65536);
        assert!(g
            .points
            .iter()
            .all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])));
        assert_eq!(make_grid(1, 1, Extent::UNIT).unwrap().points, vec![[0.5, 0.5]]);
    }

    #[test]
    fn zoom_extent_corners() {
        let g = make_grid(4, 4, Extent::square(-1.5, 1.5).unwrap()).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g.points[0], [-1.125, -1.125]);
        assert_eq!(g.points[15], [1.125, 1.125]);
        // row-major: second point moves along x
        assert_eq!(g.points[1], [-0.375, -1.125]);
        // an 8x8 grid over the same extent starts half as far from the edge
        let g8 = make_grid(8, 8, Extent::square(-1.5, 1.5).unwrap()).unwrap();
        assert_eq!(g8.points[0], [-1.3125, -1.3125]);
    }

    #[test]
    fn subsampled_rows_follow_pixel_centre_formula() {
        // Every 2nd row of an 8-grid is not the 4-grid: centres differ by
        // half a coarse pixel. The formula is checked pointwise.
        let fine = make_grid(8, 8, Extent::UNIT).unwrap();
        let coarse = make_grid(4, 4, Extent::UNIT).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let f = fine.points[(2 * i) * 8 + 2 * j];
                let c = coarse.points[i * 4 + j];
                assert!((f[0] - (2.0 * j as f64 + 0.5) / 8.0).abs() < 1e-15);
                assert!((c[0] - (j as f64 + 0.5) / 4.0).abs() < 1e-15);
                assert!((c[0] - f[0] - 1.0 / 16.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(make_grid(0, 4, Extent::UNIT).is_err());
        assert!(make_grid(4, 0, Extent::UNIT).is_err());
        assert!(Extent::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(Extent::new(0.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn extent_parses() {
        let e: Extent = "-0.3,1.3,-0.3,1.3".parse().unwrap();
        assert_eq!(e, Extent::square(-0.3, 1.3).unwrap());
        assert!("1,2,3".parse::<Extent>().is_err());
        assert!("a,b,c,d".parse::<Extent>().is_err());
    }

    #[test]
    fn origin_embeds_to_zeros_then_ones() {
        let grid = CoordGrid {
            height: 1,
            width: 1,
            extent: Extent::UNIT,
            points: vec![[0.0, 0.0]],
        };
        let u = Tensor::<f64>::from_f64(vec![3, 2], &[1.0, 2.0, -3.0, 0.5, 7.0, 7.0]);
        let emb = FourierEmbedding::new(u, 1.3, FourierMode::SinCos).unwrap();
        let out = fourier_embed(&grid, &emb).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quarter_period() {
        let grid = CoordGrid {
            height: 1,
            width: 1,
            extent: Extent::UNIT,
            points: vec![[0.5, 7.0]],
        };
        let u = Tensor::<f64>::from_f64(vec![1, 2], &[std::f64::consts::PI, 0.0]);
        let out = fourier_embed(&grid, &FourierEmbedding::new(u, 1.0, FourierMode::SinCos).unwrap())
            .unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        assert!(out.data()[1].abs() < 1e-15);
    }

    #[test]
    fn embedding_matches_scalar_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n_f = 5;
        let u: Vec<f64> = (0..n_f * 2).map(|_| rng.random_range(-10.0..10.0)).collect();
        let gamma = 0.7;
        let grid = make_grid(3, 4, Extent::square(-1.0, 2.0).unwrap()).unwrap();
        let emb = FourierEmbedding::new(
            Tensor::<f32>::from_f64(vec![n_f, 2], &u),
            gamma,
            FourierMode::SinCos,
        )
        .unwrap();
        let out = fourier_embed(&grid, &emb).unwrap();
        for (r, p) in grid.points.iter().enumerate() {
            for k in 0..n_f {
                // f32 storage of U is part of the computation under test.
                let uk0 = u[2 * k] as f32 as f64;
                let uk1 = u[2 * k + 1] as f32 as f64;
                let phase = gamma * (uk0 * p[0] + uk1 * p[1]);
                let s = out.at(&[r, k]) as f64;
                let c = out.at(&[r, n_f + k]) as f64;
                assert!((s - phase.sin()).abs() < 1e-5, "sin row {r} k {k}");
                assert!((c - phase.cos()).abs() < 1e-5, "cos row {r} k {k}");
            }
        }
    }

    #[test]
    fn sin_mode_has_half_width() {
        let grid = make_grid(2, 2, Extent::UNIT).unwrap();
        let u = Tensor::<f64>::from_f64(vec![3, 2], &[1.0; 6]);
        let out = fourier_embed(&grid, &FourierEmbedding::new(u, 1.0, FourierMode::Sin).unwrap())
            .unwrap();
        assert_eq!(out.shape(), &[4, 3]);
    }

    #[test]
    fn wrong_matrix_shape_rejected() {
        let u = Tensor::<f64>::zeros(&[3, 3]);
        assert!(FourierEmbedding::new(u.clone(), 1.0, FourierMode::SinCos).is_err());
        let grid = make_grid(2, 2, Extent::UNIT).unwrap();
        let emb = FourierEmbedding {
            matrix: u,
            scale: 1.0,
            mode: FourierMode::SinCos,
        };
        assert!(fourier_embed(&grid, &emb).is_err());
    }

    #[test]
    fn histogram_cases() {
        let same = Tensor::<f64>::from_f64(vec![4, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let h = frequency_histogram(&FourierEmbedding::new(same, 1.0, FourierMode::Sin).unwrap(), 5)
            .unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 4);

        let pyth = Tensor::<f64>::from_f64(vec![2, 2], &[3.0, 4.0, 0.0, 1.0]);
        let emb = FourierEmbedding::new(pyth, 1.0, FourierMode::Sin).unwrap();
        assert_eq!(emb.row_norms(), vec![5.0, 1.0]);
        assert!(frequency_histogram(&emb, 0).is_err());
    }

    #[test]
    fn histogram_matches_sorting_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n_f = 200;
        let u: Vec<f64> = (0..2 * n_f).map(|_| rng.random_range(-5.0..5.0)).collect();
        let emb =
            FourierEmbedding::new(Tensor::<f64>::from_f64(vec![n_f, 2], &u), 1.0, FourierMode::Sin)
                .unwrap();
        let bins = 7;
        let h = frequency_histogram(&emb, bins).unwrap();
        let mut norms = emb.row_norms();
        norms.sort_by(f64::total_cmp);
        let mut oracle = vec![0; bins];
        let mut b = 0;
        for n in norms {
            while b + 1 < bins && n >= h.edges[b + 1] {
                b += 1;
            }
            oracle[b] += 1;
        }
        assert_eq!(h.counts, oracle);
        assert_eq!(h.counts.iter().sum::<usize>(), n_f);
    }

    proptest! {
        #[test]
        fn embedding_is_bounded(
            u in proptest::collection::vec(-50.0f64..50.0, 8),
            gamma in 0.01f64..20.0,
            px in -100.0f64..100.0,
            py in -100.0f64..100.0,
        ) {
            let grid = CoordGrid { height: 1, width: 1, extent: Extent::UNIT, points: vec![[px, py]] };
            let emb = FourierEmbedding::new(Tensor::<f64>::from_f64(vec![4, 2], &u), gamma, FourierMode::SinCos).unwrap();
            let out = fourier_embed(&grid, &emb).unwrap();
            prop_assert_eq!(out.numel(), 8);
            prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn phase_shift_covariance(
            u in proptest::collection::vec(-5.0f64..5.0, 6),
            gamma in 0.1f64..3.0,
            p in proptest::array::uniform2(-2.0f64..2.0),
            d in proptest::array::uniform2(-2.0f64..2.0),
        ) {
            let n_f = 3;
            let emb = FourierEmbedding::new(Tensor::<f64>::from_f64(vec![n_f, 2], &u), gamma, FourierMode::SinCos).unwrap();
            let at = |pt: [f64; 2]| {
                let g = CoordGrid { height: 1, width: 1, extent: Extent::UNIT, points: vec![pt] };
                fourier_embed(&g, &emb).unwrap().into_data()
            };
            let base = at(p);
            let moved = at([p[0] + d[0], p[1] + d[1]]);
            for k in 0..n_f {
                let shift = gamma * (u[2 * k] * d[0] + u[2 * k + 1] * d[1]);
                let (s, c) = (base[k], base[n_f + k]);
                let expect_sin = s * shift.cos() + c * shift.sin();
                let expect_cos = c * shift.cos() - s * shift.sin();
                prop_assert!((moved[k] - expect_sin).abs() < 1e-6);
                prop_assert!((moved[n_f + k] - expect_cos).abs() < 1e-6);
            }
        }
    }
}
