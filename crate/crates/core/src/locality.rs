//! Spatial locality priors.
//!
//! Grid coordinates in the public functions are 1-based (`1..=G_h`,
//! `1..=G_w`), matching the matrix notation of the locality matrices.
//! Flattened tables use row-major, 0-based cell indices.

use alloc::format;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Gaussian,
    Laplacian,
}

impl PriorKind {
    /// ψ at Euclidean distance `d`.
    pub fn eval_distance<T: Real>(self, d: T, sigma: T) -> T {
        match self {
            PriorKind::Gaussian => (-(d * d) / (T::of(2.0) * sigma * sigma)).exp(),
            PriorKind::Laplacian => (-d / sigma).exp(),
        }
    }

    /// ∂ψ/∂σ given the already evaluated `psi`.
    pub fn dsigma<T: Real>(self, d: T, sigma: T, psi: T) -> T {
        match self {
            PriorKind::Gaussian => psi * d * d / (sigma * sigma * sigma),
            PriorKind::Laplacian => psi * d / (sigma * sigma),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityConfig {
    pub kind: PriorKind,
    /// Spread in patch-grid units.
    pub sigma: f64,
    /// Replace `sigma` by the query-conditioned head output.
    pub adaptive: bool,
}

impl LocalityConfig {
    pub fn gaussian(sigma: f64) -> Self {
        LocalityConfig {
            kind: PriorKind::Gaussian,
            sigma,
            adaptive: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "locality.sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

impl Default for LocalityConfig {
    fn default() -> Self {
        Self::gaussian(0.65)
    }
}

/// ψ(h, w, x, y) for 1-based grid coordinates.
pub fn psi<T: Real>(h: usize, w: usize, x: usize, y: usize, cfg: &LocalityConfig) -> Result<T> {
    cfg.validate()?;
    let dh = T::of(x as f64 - h as f64);
    let dw = T::of(y as f64 - w as f64);
    let sigma = T::of(cfg.sigma);
    Ok(match cfg.kind {
        PriorKind::Gaussian => (-(dh * dh + dw * dw) / (T::of(2.0) * sigma * sigma)).exp(),
        PriorKind::Laplacian => (-(dh * dh + dw * dw).sqrt() / sigma).exp(),
    })
}

/// Ψ centred on one query cell.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalityMatrix<T> {
    /// 1-based `(h, w)`.
    pub center: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols` weights.
    pub weights: Vec<T>,
}

impl<T: Real> LocalityMatrix<T> {
    /// Weight at 1-based `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> T {
        self.weights[(x - 1) * self.cols + (y - 1)]
    }
}

pub fn build_locality_matrix<T: Real>(
    h: usize,
    w: usize,
    grid_h: usize,
    grid_w: usize,
    cfg: &LocalityConfig,
) -> Result<LocalityMatrix<T>> {
    cfg.validate()?;
    if h == 0 || h > grid_h {
        return Err(Error::Index {
            op: "build_locality_matrix",
            index: h,
            len: grid_h,
        });
    }
    if w == 0 || w > grid_w {
        return Err(Error::Index {
            op: "build_locality_matrix",
            index: w,
            len: grid_w,
        });
    }
    let mut weights = Vec::with_capacity(grid_h * grid_w);
    for x in 1..=grid_h {
        for y in 1..=grid_w {
            weights.push(psi(h, w, x, y, cfg)?);
        }
    }
    Ok(LocalityMatrix {
        center: (h, w),
        rows: grid_h,
        cols: grid_w,
        weights,
    })
}

/// Pairwise Euclidean distances between the cells of a `grid_h × grid_w`
/// grid, as an `[L×L]` tensor (`L = grid_h·grid_w`, row-major cells).
pub fn distance_table<T: Real>(grid_h: usize, grid_w: usize) -> Tensor<T> {
    let l = grid_h * grid_w;
    Tensor::from_fn(&[l, l], |i| {
        let (q, k) = (i / l, i % l);
        let dh = (q / grid_w) as f64 - (k / grid_w) as f64;
        let dw = (q % grid_w) as f64 - (k % grid_w) as f64;
        T::of((dh * dh + dw * dw).sqrt())
    })
}

/// Every locality matrix of a grid stacked row-wise: row `q` holds Ψ for
/// the query cell `q`, flattened over key cells. Built once per grid shape
/// and σ.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTable<T> {
    pub grid: (usize, usize),
    pub cfg: LocalityConfig,
    pub table: Tensor<T>,
}

impl<T: Real> PriorTable<T> {
    pub fn new(grid_h: usize, grid_w: usize, cfg: &LocalityConfig) -> Result<Self> {
        cfg.validate()?;
        let l = grid_h * grid_w;
        let mut data = Vec::with_capacity(l * l);
        for q in 0..l {
            let m =
                build_locality_matrix::<T>(q / grid_w + 1, q % grid_w + 1, grid_h, grid_w, cfg)?;
            data.extend_from_slice(&m.weights);
        }
        Ok(PriorTable {
            grid: (grid_h, grid_w),
            cfg: *cfg,
            table: Tensor::new(&[l, l], data)?,
        })
    }
}

/// Query-conditioned σ: `sigmoid(⟨mean_cells(features), projection⟩ + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveSigmaHead<T> {
    /// `[D, 1]`
    pub projection: Tensor<T>,
    /// `[1]`
    pub bias: Tensor<T>,
}

impl<T: Real> AdaptiveSigmaHead<T> {
    pub fn zeros(dim: usize) -> Self {
        AdaptiveSigmaHead {
            projection: Tensor::zeros(&[dim, 1]),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        AdaptiveSigmaHead {
            projection: Tensor::xavier(&[dim, 1], dim, 1, rng),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn cast<U: Real>(&self) -> AdaptiveSigmaHead<U> {
        AdaptiveSigmaHead {
            projection: self.projection.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Eager evaluation of the adaptive head on `[cells × D]` query features.
pub fn adaptive_sigma<T: Real>(
    query_features: &Tensor<T>,
    head: &AdaptiveSigmaHead<T>,
) -> Result<T> {
    let d = query_features.cols();
    if d != head.dim() {
        return Err(Error::dim(
            "adaptive_sigma",
            query_features.shape(),
            head.projection.shape(),
        ));
    }
    let rows = query_features.rows();
    let mut mean = alloc::vec![T::zero(); d];
    for r in 0..rows {
        mean.iter_mut()
            .zip(query_features.row(r))
            .for_each(|(a, &b)| *a += b);
    }
    let inv = T::one() / T::of(rows as f64);
    mean.iter_mut().for_each(|a| *a *= inv);
    let z = kernels::dot(&mean, head.projection.data()) + head.bias.data()[0];
    Ok(T::one() / (T::one() + (-z).exp()))
}
