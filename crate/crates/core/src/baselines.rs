//! Gaussian kernel density estimate and the classical procedures built on
//! it: bandwidth selection, mean shift and subspace-constrained mean shift.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsddr::{log_grid, median_pairwise_scale_pooled};
use crate::mode_seeking::{cluster, AscentField, ClusterResult, SeekConfig, ShiftVector};
use crate::points::{sq_dist, PointSet};
use crate::ridge::{self, CurvatureField};

/// Log density below which KDE-based iterations give up on a point.
pub const MIN_LOG_DENSITY: f64 = -690.7755278982137; // ln(1e-300)

/// `p^(x) = 1 / (n (2 pi h^2)^{D/2}) sum_i exp(-|x - x_i|^2 / 2h^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    samples: PointSet,
    h: f64,
}

/// Kernel weights relative to the largest one, with the log of that scale.
struct Weights {
    w: Vec<f64>,
    sum: f64,
    log_max: f64,
}

impl KdeModel {
    pub fn new(samples: PointSet, h: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("density estimate needs at least one sample"));
        }
        if !samples.all_finite() {
            return Err(Error::invalid("samples must be finite"));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive and finite, got {h}")));
        }
        Ok(Self { samples, h })
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn samples(&self) -> &PointSet {
        &self.samples
    }

    fn log_norm(&self) -> f64 {
        let d = self.samples.dim() as f64;
        (self.samples.len() as f64).ln() + 0.5 * d * (2.0 * std::f64::consts::PI * self.h * self.h).ln()
    }

    fn weights(&self, x: &[f64]) -> Weights {
        let inv = 1.0 / (2.0 * self.h * self.h);
        let mut w: Vec<f64> = self.samples.rows().map(|r| -sq_dist(x, r) * inv).collect();
        let log_max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in &mut w {
            *v = (*v - log_max).exp();
            sum += *v;
        }
        Weights { w, sum, log_max }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.samples.check_point(x)?;
        Ok(self.log_density_raw(x))
    }

    fn log_density_raw(&self, x: &[f64]) -> f64 {
        let w = self.weights(x);
        w.log_max + w.sum.ln() - self.log_norm()
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// Weighted mean of the samples, the mean-shift target.
    fn weighted_mean(&self, w: &Weights) -> Vec<f64> {
        let mut m = vec![0.0; self.samples.dim()];
        for (wi, r) in w.w.iter().zip(self.samples.rows()) {
            for (a, b) in m.iter_mut().zip(r) {
                *a += wi * b;
            }
        }
        m.iter_mut().for_each(|v| *v /= w.sum);
        m
    }

    /// `grad p^(x)`.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.samples.check_point(x)?;
        let p = self.log_density_raw(x).exp();
        Ok(self.log_gradient_raw(x).iter().map(|g| g * p).collect())
    }

    /// `grad grad p^(x)`.
    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.samples.check_point(x)?;
        let p = self.log_density_raw(x).exp();
        Ok(self.hessian_ratio_raw(x) * p)
    }

    /// `grad p^ / p^`.
    fn log_gradient_raw(&self, x: &[f64]) -> Vec<f64> {
        let w = self.weights(x);
        let h2 = self.h * self.h;
        self.weighted_mean(&w).iter().zip(x).map(|(m, xi)| (m - xi) / h2).collect()
    }

    /// `grad grad p^ / p^ = E_w[(x_i - x)(x_i - x)^T] / h^4 - I / h^2`.
    fn hessian_ratio_raw(&self, x: &[f64]) -> DMatrix<f64> {
        let w = self.weights(x);
        let d = x.len();
        let h2 = self.h * self.h;
        let mut m = DMatrix::zeros(d, d);
        let mut u = vec![0.0; d];
        for (wi, r) in w.w.iter().zip(self.samples.rows()) {
            if *wi == 0.0 {
                continue;
            }
            for k in 0..d {
                u[k] = r[k] - x[k];
            }
            for a in 0..d {
                for b in a..d {
                    m[(a, b)] += wi * u[a] * u[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = m[(a, b)] / (w.sum * h2 * h2);
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
            m[(a, a)] -= 1.0 / h2;
        }
        m
    }

    /// Mean-shift update `sum_i w_i x_i / sum_i w_i`.
    pub fn ms_update(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.samples.check_point(z)?;
        Ok(self.weighted_mean(&self.weights(z)))
    }

    /// `Sigma^{-1}(x) = -grad grad p^ / p^ + (grad p^ / p^)(grad p^ / p^)^T`.
    pub fn inverse_local_cov(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.samples.check_point(x)?;
        let g = self.log_gradient_raw(x);
        Ok(ridge::inverse_local_cov(&g, &self.hessian_ratio_raw(x)))
    }

    /// One subspace-constrained mean-shift step toward a `d`-dimensional ridge.
    pub fn scms_update(&self, z: &[f64], d: usize) -> Result<Vec<f64>> {
        self.samples.check_point(z)?;
        AscentField::validate(self, z)?;
        Ok(ridge::lsdrf_step(self, self, z, d)?.z)
    }
}

impl AscentField for KdeModel {
    fn dim(&self) -> usize {
        self.samples.dim()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.log_gradient_raw(x)
    }

    fn shift(&self, x: &[f64]) -> ShiftVector {
        let w = self.weights(x);
        let mean = self.weighted_mean(&w);
        let m = mean.iter().zip(x).map(|(a, b)| a - b).collect();
        let p = (w.log_max + w.sum.ln() - self.log_norm()).exp();
        ShiftVector {
            m,
            f: vec![p; x.len()],
        }
    }

    fn gain(&self, to: &[f64], from: &[f64]) -> f64 {
        self.log_density_raw(to) - self.log_density_raw(from)
    }

    fn min_width(&self) -> f64 {
        self.h
    }

    fn validate(&self, x: &[f64]) -> Result<()> {
        let lp = self.log_density_raw(x);
        if !(lp >= MIN_LOG_DENSITY) {
            return Err(Error::numeric(format!("density underflow (log density {lp:.1})")));
        }
        Ok(())
    }
}

impl CurvatureField for KdeModel {
    fn hessian_ratio(&self, x: &[f64]) -> DMatrix<f64> {
        self.hessian_ratio_raw(x)
    }
}

/// Pooled per-coordinate variance `S_n = (1/D) sum_j var_j`, with the
/// `1/n` normalization.
pub fn pooled_variance(samples: &PointSet) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let n = samples.len() as f64;
    let mut total = 0.0;
    for j in 0..samples.dim() {
        let col = samples.column(j);
        let mean = col.iter().sum::<f64>() / n;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    Ok(total / samples.dim() as f64)
}

/// Normal-reference bandwidth
/// `h = S (4 / (D + 4))^{1/(D+6)} n^{-1/(D+6)}`.
///
/// `S` is the pooled variance, or its square root when `sqrt_scale` is set.
pub fn nr_bandwidth(samples: &PointSet, sqrt_scale: bool) -> Result<f64> {
    let var = pooled_variance(samples)?;
    if !(var > 0.0) {
        return Err(Error::invalid("samples have zero variance"));
    }
    let s = if sqrt_scale { var.sqrt() } else { var };
    let d = samples.dim() as f64;
    let n = samples.len() as f64;
    let e = 1.0 / (d + 6.0);
    Ok(s * (4.0 / (d + 4.0)).powf(e) * n.powf(-e))
}

/// Bandwidth grid and scores from least-squares cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LscvReport {
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    pub h: f64,
}

/// `10^l h_med` for ten `l` evenly spaced in `[-1.5, 0]`.
pub fn default_lscv_grid(samples: &PointSet) -> Result<Vec<f64>> {
    let med = median_pairwise_scale_pooled(samples)?;
    if !(med > 0.0) {
        return Err(Error::invalid("samples have zero pairwise spread"));
    }
    Ok(log_grid(10f64.powf(-1.5) * med, med, 10))
}

/// Leave-one-out least-squares CV score
/// `int p^_h^2 - (2/n) sum_i p^_{h,-i}(x_i)`.
pub fn lscv_score(samples: &PointSet, h: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    Ok(lscv_from_distances(&pairwise_sq(samples), samples.len(), samples.dim(), h))
}

fn pairwise_sq(samples: &PointSet) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for k in (i + 1)..n {
            out.push(sq_dist(samples.row(i), samples.row(k)));
        }
    }
    out
}

fn lscv_from_distances(sq: &[f64], n: usize, dim: usize, h: f64) -> f64 {
    let nf = n as f64;
    let d = dim as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let norm_conv = (2.0 * two_pi * h * h).powf(-0.5 * d);
    let norm = (two_pi * h * h).powf(-0.5 * d);
    let (mut conv, mut kern) = (0.0, 0.0);
    for &s in sq {
        conv += (-s / (4.0 * h * h)).exp();
        kern += (-s / (2.0 * h * h)).exp();
    }
    // Off-diagonal pairs are counted twice; the diagonal contributes n.
    let integral = norm_conv * (nf + 2.0 * conv) / (nf * nf);
    let loo = norm * 2.0 * kern / (nf * (nf - 1.0));
    integral - 2.0 * loo
}

/// Bandwidth minimizing the leave-one-out LSCV score over `grid`
/// (the default grid when `None`). Ties resolve to the larger bandwidth.
pub fn lscv_bandwidth(samples: &PointSet, grid: Option<&[f64]>) -> Result<LscvReport> {
    if samples.len() < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let grid = match grid {
        Some(g) if g.is_empty() => return Err(Error::invalid("bandwidth grid is empty")),
        Some(g) => g.to_vec(),
        None => default_lscv_grid(samples)?,
    };
    if grid.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::invalid("bandwidths must be positive"));
    }
    let sq = pairwise_sq(samples);
    let scores: Vec<f64> = grid
        .iter()
        .map(|&h| lscv_from_distances(&sq, samples.len(), samples.dim(), h))
        .collect();
    let mut best = 0;
    for i in 1..grid.len() {
        let better = scores[i] < scores[best] || (scores[i] == scores[best] && grid[i] > grid[best]);
        if better {
            best = i;
        }
    }
    Ok(LscvReport {
        h: grid[best],
        grid,
        scores,
    })
}

/// Mean-shift clustering; the merge radius defaults to `h / 2`.
pub fn ms_cluster(samples: &PointSet, h: f64, config: &SeekConfig, merge_radius: Option<f64>) -> Result<ClusterResult> {
    let kde = KdeModel::new(samples.clone(), h)?;
    cluster(samples, &kde, config, merge_radius.unwrap_or(h / 2.0), false)
}
