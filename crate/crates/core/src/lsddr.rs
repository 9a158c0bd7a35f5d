//! Least-squares density-derivative-ratio (LSDDR) estimation.
//!
//! For a multi-index `j`, the ratio `r_j(x) = d_j p(x) / p(x)` is modelled as
//! `theta^T psi(x)` with basis functions centred on a subset of the samples:
//!
//! ```text
//! psi_i(x)     = k(x, c_i)                    (kernel-value half, omitted when simplified)
//! psi_{b+i}(x) = d'_j k(x, c) |_{c = c_i}     (derivative half)
//! ```
//!
//! Integration by parts turns the squared-loss fit into the regularized
//! quadratic `theta^T G theta - 2 (-1)^{|j|} theta^T h + lambda theta^T theta`,
//! whose minimizer is `(-1)^{|j|} (G + lambda I)^{-1} h`. No density estimate is
//! formed at any point.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{check_sigma, partial_unchecked, MultiIndex};
use crate::linalg::{solve_regularized, SolveMethod};
use crate::points::PointSet;

/// Default number of cross-validation folds.
pub const DEFAULT_FOLDS: usize = 5;
/// Default cap on the number of kernel centers.
pub const DEFAULT_MAX_CENTERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    centers: PointSet,
    sigma: f64,
    multi_index: MultiIndex,
    /// Keep only the derivative half of the basis.
    simplified: bool,
    zero: Vec<u32>,
}

impl BasisSpec {
    pub fn new(centers: PointSet, sigma: f64, multi_index: MultiIndex, simplified: bool) -> Result<Self> {
        check_sigma(sigma)?;
        if centers.is_empty() {
            return Err(Error::invalid("basis needs at least one center"));
        }
        if multi_index.dim() != centers.dim() {
            return Err(Error::DimensionMismatch {
                expected: centers.dim(),
                got: multi_index.dim(),
            });
        }
        let order = multi_index.order();
        if !(1..=2).contains(&order) {
            return Err(Error::invalid(format!(
                "ratio models support |j| in {{1, 2}}, got {order}"
            )));
        }
        let zero = vec![0; centers.dim()];
        Ok(Self {
            centers,
            sigma,
            multi_index,
            simplified,
            zero,
        })
    }

    pub fn centers(&self) -> &PointSet {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn multi_index(&self) -> &MultiIndex {
        &self.multi_index
    }

    pub fn simplified(&self) -> bool {
        self.simplified
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.dim()
    }

    /// Number of basis functions: `b` simplified, `2b` otherwise.
    pub fn len(&self) -> usize {
        if self.simplified {
            self.num_centers()
        } else {
            2 * self.num_centers()
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn with_sigma(&self, sigma: f64) -> Self {
        Self {
            sigma,
            ..self.clone()
        }
    }

    /// Writes `d_{jx} psi(x)` into `out`; `jx = 0` gives `psi(x)` itself.
    pub(crate) fn eval_into(&self, x: &[f64], jx: &[u32], out: &mut [f64]) {
        let b = self.num_centers();
        let j = self.multi_index.entries();
        let offset = if self.simplified {
            0
        } else {
            for (i, c) in self.centers.rows().enumerate() {
                out[i] = partial_unchecked(x, c, self.sigma, jx, &self.zero);
            }
            b
        };
        for (i, c) in self.centers.rows().enumerate() {
            out[offset + i] = partial_unchecked(x, c, self.sigma, jx, j);
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &vec![0; self.dim()], &mut out);
        out
    }

    /// `d_{jx} psi(x)`.
    pub fn feature_partials(&self, x: &[f64], jx: &MultiIndex) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, jx.entries(), &mut out);
        out
    }

    /// Row-stacked `psi(x_i)` and `d_j psi(x_i)` for every sample.
    fn design_rows(&self, samples: &PointSet) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = samples.len();
        let p = self.len();
        let zero = vec![0u32; self.dim()];
        let j = self.multi_index.entries().to_vec();
        let mut psi = DMatrix::zeros(n, p);
        let mut dpsi = DMatrix::zeros(n, p);
        let mut buf = vec![0.0; p];
        for (r, x) in samples.rows().enumerate() {
            self.eval_into(x, &zero, &mut buf);
            for (c, v) in buf.iter().enumerate() {
                psi[(r, c)] = *v;
            }
            self.eval_into(x, &j, &mut buf);
            for (c, v) in buf.iter().enumerate() {
                dpsi[(r, c)] = *v;
            }
        }
        (psi, dpsi)
    }
}

/// `G = (1/n) sum psi(x_i) psi(x_i)^T` and `h = (1/n) sum d_j psi(x_i)`.
pub fn build_design(samples: &PointSet, basis: &BasisSpec) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("design needs at least one sample"));
    }
    if samples.dim() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: samples.dim(),
        });
    }
    let (psi, dpsi) = basis.design_rows(samples);
    let n = samples.len() as f64;
    let mut g = psi.tr_mul(&psi) / n;
    symmetrize(&mut g);
    let h = column_sums(&dpsi) / n;
    Ok((g, h))
}

fn symmetrize(g: &mut DMatrix<f64>) {
    let p = g.nrows();
    for i in 0..p {
        for k in (i + 1)..p {
            let v = 0.5 * (g[(i, k)] + g[(k, i)]);
            g[(i, k)] = v;
            g[(k, i)] = v;
        }
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// A fitted ratio model `r_j(x) = theta^T psi(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioModel {
    basis: BasisSpec,
    theta: Vec<f64>,
    lambda: f64,
    solve_method: SolveMethod,
    /// Coefficients constrained so that `beta~ = -theta >= 0`.
    constrained: bool,
    seed: Option<u64>,
}

impl RatioModel {
    /// Wrap explicit coefficients, e.g. for analytic or synthetic models.
    pub fn from_parts(basis: BasisSpec, theta: Vec<f64>, lambda: f64) -> Result<Self> {
        if theta.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                got: theta.len(),
            });
        }
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(Error::numeric("non-finite coefficients"));
        }
        if !(lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            basis,
            theta,
            lambda,
            solve_method: SolveMethod::Cholesky,
            constrained: false,
            seed: None,
        })
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma(&self) -> f64 {
        self.basis.sigma
    }

    pub fn solve_method(&self) -> SolveMethod {
        self.solve_method
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    /// Coefficients of the derivative half of the basis.
    pub fn beta(&self) -> &[f64] {
        let b = self.basis.num_centers();
        if self.basis.simplified {
            &self.theta
        } else {
            &self.theta[b..]
        }
    }

    /// Coefficients of the kernel-value half, empty when simplified.
    pub fn alpha(&self) -> &[f64] {
        let b = self.basis.num_centers();
        if self.basis.simplified {
            &[]
        } else {
            &self.theta[..b]
        }
    }

    /// Unchecked evaluation of `d_{jx} r(x)`.
    pub(crate) fn eval_partial_raw(&self, x: &[f64], jx: &[u32]) -> f64 {
        let zero = &self.basis.zero;
        let j = self.basis.multi_index.entries();
        let sigma = self.basis.sigma;
        let mut acc = 0.0;
        if !self.basis.simplified {
            for (i, c) in self.basis.centers.rows().enumerate() {
                let a = self.theta[i];
                if a != 0.0 {
                    acc += a * partial_unchecked(x, c, sigma, jx, zero);
                }
            }
        }
        for (beta, c) in self.beta().iter().zip(self.basis.centers.rows()) {
            if *beta != 0.0 {
                acc += beta * partial_unchecked(x, c, sigma, jx, j);
            }
        }
        acc
    }

    pub(crate) fn eval_raw(&self, x: &[f64]) -> f64 {
        self.eval_partial_raw(x, &self.basis.zero)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.basis.centers.check_point(x)?;
        Ok(self.eval_raw(x))
    }

    /// `d r(x) / d x_i`.
    pub fn evaluate_partial(&self, x: &[f64], i: usize) -> Result<f64> {
        self.basis.centers.check_point(x)?;
        if i >= x.len() {
            return Err(Error::invalid(format!("coordinate {i} out of range")));
        }
        let mut e = vec![0u32; x.len()];
        e[i] = 1;
        Ok(self.eval_partial_raw(x, &e))
    }

    /// `d_j r(x)` for the model's own multi-index.
    pub fn evaluate_own_derivative(&self, x: &[f64]) -> Result<f64> {
        self.basis.centers.check_point(x)?;
        Ok(self.eval_partial_raw(x, self.basis.multi_index.entries()))
    }

    /// `||(G + lambda I) theta - (-1)^{|j|} h||` on the given design.
    pub fn residual(&self, g: &DMatrix<f64>, h: &DVector<f64>) -> f64 {
        let theta = DVector::from_column_slice(&self.theta);
        let mut lhs = g * &theta;
        lhs += &theta * self.lambda;
        (lhs - h * self.basis.multi_index.sign()).norm()
    }

    pub fn to_document(&self) -> RatioModelDoc {
        RatioModelDoc {
            multi_index: self.basis.multi_index.entries().to_vec(),
            sigma: self.basis.sigma,
            lambda: self.lambda,
            centers: self.basis.centers.rows().map(|r| r.to_vec()).collect(),
            theta: self.theta.clone(),
            simplified: self.basis.simplified,
            seed: self.seed,
        }
    }

    pub fn from_document(doc: &RatioModelDoc) -> Result<Self> {
        let centers = PointSet::from_rows(&doc.centers)?;
        let basis = BasisSpec::new(centers, doc.sigma, MultiIndex::new(doc.multi_index.clone())?, doc.simplified)?;
        Ok(Self::from_parts(basis, doc.theta.clone(), doc.lambda)?.with_seed(doc.seed))
    }
}

/// Serialized form of a [`RatioModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModelDoc {
    pub multi_index: Vec<u32>,
    pub sigma: f64,
    pub lambda: f64,
    /// One inner vector per center.
    pub centers: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub simplified: bool,
    pub seed: Option<u64>,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

fn solve_theta(g: &DMatrix<f64>, h: &DVector<f64>, lambda: f64, sign: f64) -> Result<(Vec<f64>, SolveMethod)> {
    let rhs = h * sign;
    let (theta, method) = solve_regularized(g, lambda, &rhs)?;
    if method == SolveMethod::LeastSquares {
        log::warn!("Cholesky factorization failed at lambda={lambda}; used least squares");
    }
    Ok((theta.as_slice().to_vec(), method))
}

/// Minimize `theta^T (G + lambda I) theta - 2 theta^T q` subject to
/// `theta <= 0` by cyclic coordinate descent.
fn solve_nonpositive(g: &DMatrix<f64>, q: &DVector<f64>, lambda: f64) -> Vec<f64> {
    let p = g.nrows();
    let mut theta = vec![0.0; p];
    // grad_i = sum_k A_ik theta_k, maintained incrementally.
    let mut a_theta = vec![0.0; p];
    for _sweep in 0..10_000 {
        let mut max_change = 0.0f64;
        for i in 0..p {
            let aii = g[(i, i)] + lambda;
            let rest = a_theta[i] - aii * theta[i];
            let new = ((q[i] - rest) / aii).min(0.0);
            let delta = new - theta[i];
            if delta != 0.0 {
                for k in 0..p {
                    let aki = g[(k, i)] + if k == i { lambda } else { 0.0 };
                    a_theta[k] += aki * delta;
                }
                theta[i] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        let scale = theta.iter().fold(0.0f64, |m, t| m.max(t.abs())).max(1e-300);
        if max_change <= 1e-13 * scale {
            break;
        }
    }
    theta
}

/// Fit `theta = (-1)^{|j|} (G + lambda I)^{-1} h`.
pub fn fit_ratio(samples: &PointSet, basis: &BasisSpec, lambda: f64) -> Result<RatioModel> {
    check_lambda(lambda)?;
    let (g, h) = build_design(samples, basis)?;
    let (theta, method) = solve_theta(&g, &h, lambda, basis.multi_index.sign())?;
    let mut model = RatioModel::from_parts(basis.clone(), theta, lambda)?;
    model.solve_method = method;
    Ok(model)
}

/// Fit a simplified first-order model with `beta~ = -theta >= 0`.
pub fn fit_ratio_nonneg(samples: &PointSet, basis: &BasisSpec, lambda: f64) -> Result<RatioModel> {
    check_lambda(lambda)?;
    if !basis.simplified || basis.multi_index.order() != 1 {
        return Err(Error::invalid(
            "non-negative coefficients are only defined for simplified first-order models",
        ));
    }
    let (g, h) = build_design(samples, basis)?;
    let q = h * basis.multi_index.sign();
    let theta = solve_nonpositive(&g, &q, lambda);
    let mut model = RatioModel::from_parts(basis.clone(), theta, lambda)?;
    model.constrained = true;
    Ok(model)
}

/// Hold-out score `mean[r(x)^2 - 2 (-1)^{|j|} d_j r(x)]`; lower is better.
pub fn cv_score(model: &RatioModel, holdout: &PointSet) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::invalid("hold-out set is empty"));
    }
    if holdout.dim() != model.basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.basis.dim(),
            got: holdout.dim(),
        });
    }
    let sign = model.basis.multi_index.sign();
    let j = model.basis.multi_index.entries();
    let total: f64 = holdout
        .rows()
        .map(|x| {
            let r = model.eval_raw(x);
            let dr = model.eval_partial_raw(x, j);
            r * r - 2.0 * sign * dr
        })
        .sum();
    Ok(total / holdout.len() as f64)
}

/// How per-fold scores are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Mean,
    Median,
}

impl Aggregate {
    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            Aggregate::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregate::Median => median(values.to_vec()),
        }
    }
}

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seeded shuffle of `0..n` cut into `folds` near-equal blocks.
pub fn fold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(Error::invalid(format!("{n} samples cannot be split into {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..folds)
        .map(|t| idx[t * n / folds..(t + 1) * n / folds].to_vec())
        .collect())
}

/// Cross-validation settings shared by all components of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    pub folds: usize,
    pub aggregate: Aggregate,
    pub seed: u64,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            aggregate: Aggregate::Mean,
            seed: 0,
        }
    }
}

/// Full record of one grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub sigma_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    /// `fold_scores[s][l][t]`; `+inf` marks a failed fit.
    pub fold_scores: Vec<Vec<Vec<f64>>>,
    /// `aggregate[s][l]`.
    pub aggregate: Vec<Vec<f64>>,
    pub sigma: f64,
    pub lambda: f64,
}

impl CvReport {
    pub fn entries(&self) -> usize {
        self.aggregate.iter().map(Vec::len).sum()
    }
}

/// Pick the `(sigma, lambda)` minimizing the aggregated hold-out score.
///
/// Ties go to the larger `lambda`, then the larger `sigma`.
pub fn argmin_grid(sigma_grid: &[f64], lambda_grid: &[f64], scores: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::INFINITY;
    let mut found = false;
    for (s, row) in scores.iter().enumerate() {
        for (l, &score) in row.iter().enumerate() {
            let better = if !found {
                true
            } else if score < best_score {
                true
            } else if score == best_score {
                let (bs, bl) = best;
                lambda_grid[l] > lambda_grid[bl]
                    || (lambda_grid[l] == lambda_grid[bl] && sigma_grid[s] > sigma_grid[bs])
            } else {
                false
            };
            if better && (score.is_finite() || !found) {
                best = (s, l);
                best_score = score;
                found = score.is_finite();
            }
        }
    }
    best
}

/// Basis columns usable when `hold` is held out: centers that coincide with
/// a hold-out sample are dropped, so each fold's basis is built from its
/// training samples only.
fn training_columns(samples: &PointSet, basis: &BasisSpec, hold: &[usize]) -> Vec<usize> {
    use std::collections::HashSet;
    let key = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let held: HashSet<Vec<u64>> = hold.iter().map(|&i| key(samples.row(i))).collect();
    let b = basis.num_centers();
    let kept: Vec<usize> = (0..b)
        .filter(|&i| !held.contains(&key(basis.centers.row(i))))
        .collect();
    if basis.simplified {
        kept
    } else {
        kept.iter().copied().chain(kept.iter().map(|i| i + b)).collect()
    }
}

/// Cross-validated grid search over `(sigma, lambda)` for one ratio.
pub fn select_model(
    samples: &PointSet,
    template: &BasisSpec,
    sigma_grid: &[f64],
    lambda_grid: &[f64],
    cv: &CvSettings,
) -> Result<CvReport> {
    if sigma_grid.is_empty() || lambda_grid.is_empty() {
        return Err(Error::invalid("model-selection grids must be non-empty"));
    }
    for &s in sigma_grid {
        check_sigma(s)?;
    }
    for &l in lambda_grid {
        check_lambda(l)?;
    }
    if samples.dim() != template.dim() {
        return Err(Error::DimensionMismatch {
            expected: template.dim(),
            got: samples.dim(),
        });
    }
    let folds = fold_split(samples.len(), cv.folds, cv.seed)?;
    let sign = template.multi_index.sign();
    let fold_cols: Vec<Vec<usize>> = folds
        .iter()
        .map(|hold| training_columns(samples, template, hold))
        .collect();

    let fold_scores: Vec<Vec<Vec<f64>>> = sigma_grid
        .par_iter()
        .map(|&sigma| {
            let basis = template.with_sigma(sigma);
            let (psi, dpsi) = basis.design_rows(samples);
            let mut per_lambda = vec![Vec::with_capacity(folds.len()); lambda_grid.len()];
            for (hold, cols) in folds.iter().zip(&fold_cols) {
                let mut in_hold = vec![false; samples.len()];
                hold.iter().for_each(|&i| in_hold[i] = true);
                let train: Vec<usize> = (0..samples.len()).filter(|&i| !in_hold[i]).collect();
                if cols.is_empty() {
                    per_lambda.iter_mut().for_each(|v| v.push(f64::INFINITY));
                    continue;
                }
                let sub = |m: &DMatrix<f64>, rows: &[usize]| m.select_rows(rows.iter()).select_columns(cols.iter());
                let (train_psi, train_dpsi) = (sub(&psi, &train), sub(&dpsi, &train));
                let (hold_psi, hold_dpsi) = (sub(&psi, hold), sub(&dpsi, hold));
                let n_train = train.len() as f64;
                let mut g = train_psi.tr_mul(&train_psi) / n_train;
                symmetrize(&mut g);
                let h = column_sums(&train_dpsi) / n_train;
                for (l, &lambda) in lambda_grid.iter().enumerate() {
                    let score = match solve_theta(&g, &h, lambda, sign) {
                        Ok((theta, _)) => {
                            let theta = DVector::from_vec(theta);
                            let r = &hold_psi * &theta;
                            let dr = &hold_dpsi * &theta;
                            let m = hold.len() as f64;
                            r.iter().zip(dr.iter()).map(|(r, dr)| r * r - 2.0 * sign * dr).sum::<f64>() / m
                        }
                        Err(_) => f64::INFINITY,
                    };
                    per_lambda[l].push(if score.is_finite() { score } else { f64::INFINITY });
                }
            }
            per_lambda
        })
        .collect();

    let aggregate: Vec<Vec<f64>> = fold_scores
        .iter()
        .map(|row| row.iter().map(|scores| cv.aggregate.apply(scores)).collect())
        .collect();
    let (s, l) = argmin_grid(sigma_grid, lambda_grid, &aggregate);
    if !aggregate[s][l].is_finite() {
        return Err(Error::numeric("every grid candidate failed to fit"));
    }
    Ok(CvReport {
        sigma_grid: sigma_grid.to_vec(),
        lambda_grid: lambda_grid.to_vec(),
        fold_scores,
        aggregate,
        sigma: sigma_grid[s],
        lambda: lambda_grid[l],
    })
}

/// Median of `|x_i^(j) - x_k^(j)|` over pairs `i < k`.
pub fn median_pairwise_scale(samples: &PointSet, j: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("pairwise scale needs at least two samples"));
    }
    if j >= samples.dim() {
        return Err(Error::invalid(format!("coordinate {j} out of range")));
    }
    let col = samples.column(j);
    Ok(median(pairwise_gaps(&col)))
}

/// Median of `|x_i^(j) - x_k^(j)|` pooled over all coordinates and pairs `i < k`.
pub fn median_pairwise_scale_pooled(samples: &PointSet) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("pairwise scale needs at least two samples"));
    }
    let mut gaps = Vec::new();
    for j in 0..samples.dim() {
        gaps.extend(pairwise_gaps(&samples.column(j)));
    }
    Ok(median(gaps))
}

fn pairwise_gaps(col: &[f64]) -> Vec<f64> {
    let n = col.len();
    let mut gaps = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for k in (i + 1)..n {
            gaps.push((col[i] - col[k]).abs());
        }
    }
    gaps
}

/// `b` distinct samples drawn uniformly without replacement.
pub fn subsample_centers(samples: &PointSet, b: usize, seed: u64) -> Result<PointSet> {
    let n = samples.len();
    if b == 0 || b > n {
        return Err(Error::invalid(format!("cannot draw {b} centers from {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, n, b).into_vec();
    Ok(samples.select(&idx))
}

/// `min(n, 100)`.
pub fn default_center_count(n: usize) -> usize {
    n.min(DEFAULT_MAX_CENTERS)
}

/// `count` geometrically spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Candidate grids, expressed relative to each coordinate's pairwise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Multipliers applied to the median pairwise scale.
    pub sigma_factors: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl GridSpec {
    /// `c * sigma_med` with `c` in `[0.5, 5]`, `lambda` in `[1e-3, 1]`.
    pub fn clustering() -> Self {
        Self {
            sigma_factors: log_grid(0.5, 5.0, 10),
            lambdas: log_grid(1e-3, 1.0, 10),
        }
    }

    /// `10^l * sigma_med` with `l` in `[-0.3, 1]`, `lambda` in `[1e-4, 1]`.
    pub fn ridge() -> Self {
        Self {
            sigma_factors: log_grid(10f64.powf(-0.3), 10.0, 10),
            lambdas: log_grid(1e-4, 1.0, 10),
        }
    }

    pub fn single(sigma_factor: f64, lambda: f64) -> Self {
        Self {
            sigma_factors: vec![sigma_factor],
            lambdas: vec![lambda],
        }
    }
}

/// Options for fitting gradient models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientOptions {
    pub grid: GridSpec,
    pub cv: CvSettings,
    /// Drop the kernel-value half of the basis (required for mode seeking).
    pub simplified: bool,
    /// Constrain `beta~ >= 0`.
    pub nonneg_beta: bool,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            grid: GridSpec::clustering(),
            cv: CvSettings::default(),
            simplified: true,
            nonneg_beta: false,
        }
    }
}

/// Estimates `g_j = d_j log p` for every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientModel {
    components: Vec<RatioModel>,
    reports: Vec<CvReport>,
}

impl GradientModel {
    pub fn from_components(components: Vec<RatioModel>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("gradient model needs at least one component"))?;
        let dim = first.basis.dim();
        if components.len() != dim {
            return Err(Error::invalid(format!(
                "expected {dim} components, got {}",
                components.len()
            )));
        }
        for (j, m) in components.iter().enumerate() {
            if m.basis.multi_index != MultiIndex::unit(dim, j) {
                return Err(Error::invalid(format!("component {j} has wrong multi-index")));
            }
            if m.basis.centers != first.basis.centers {
                return Err(Error::invalid("gradient components must share their centers"));
            }
        }
        Ok(Self {
            components,
            reports: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, j: usize) -> &RatioModel {
        &self.components[j]
    }

    pub fn components(&self) -> &[RatioModel] {
        &self.components
    }

    pub fn reports(&self) -> &[CvReport] {
        &self.reports
    }

    pub fn centers(&self) -> &PointSet {
        &self.components[0].basis.centers
    }

    pub fn is_simplified(&self) -> bool {
        self.components.iter().all(|m| m.basis.simplified)
    }

    /// `g^(x)`.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.centers().check_point(x)?;
        Ok(self.eval_raw(x))
    }

    pub(crate) fn eval_raw(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|m| m.eval_raw(x)).collect()
    }
}

fn fit_component(
    samples: &PointSet,
    template: BasisSpec,
    sigma_grid: Vec<f64>,
    lambdas: &[f64],
    cv: &CvSettings,
    nonneg: bool,
    name: String,
) -> Result<(RatioModel, CvReport)> {
    let report = select_model(samples, &template, &sigma_grid, lambdas, cv).map_err(|e| e.in_component(name.clone()))?;
    let basis = template.with_sigma(report.sigma);
    let model = if nonneg {
        fit_ratio_nonneg(samples, &basis, report.lambda)
    } else {
        fit_ratio(samples, &basis, report.lambda)
    }
    .map_err(|e| e.in_component(name))?;
    Ok((model, report))
}

/// Cross-validate and fit each `g_j` on shared centers.
pub fn fit_gradient(samples: &PointSet, centers: &PointSet, opts: &GradientOptions) -> Result<GradientModel> {
    let dim = samples.dim();
    if centers.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: centers.dim(),
        });
    }
    if opts.nonneg_beta && !opts.simplified {
        return Err(Error::invalid("non-negative coefficients require the simplified basis"));
    }
    let fitted: Vec<Result<(RatioModel, CvReport)>> = (0..dim)
        .into_par_iter()
        .map(|j| {
            let med = median_pairwise_scale(samples, j)?;
            if med <= 0.0 {
                return Err(Error::invalid(format!("coordinate {j} has zero spread")).in_component(format!("g[{j}]")));
            }
            let template = BasisSpec::new(centers.clone(), med, MultiIndex::unit(dim, j), opts.simplified)?;
            let sigmas = opts.grid.sigma_factors.iter().map(|f| f * med).collect();
            fit_component(samples, template, sigmas, &opts.grid.lambdas, &opts.cv, opts.nonneg_beta, format!("g[{j}]"))
        })
        .collect();
    let mut components = Vec::with_capacity(dim);
    let mut reports = Vec::with_capacity(dim);
    for r in fitted {
        let (m, rep) = r?;
        components.push(m.with_seed(Some(opts.cv.seed)));
        reports.push(rep);
    }
    let mut model = GradientModel::from_components(components)?;
    model.reports = reports;
    Ok(model)
}

/// Options for fitting Hessian models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianOptions {
    /// `sigma` multipliers apply to `sqrt(sigma_med^(i) sigma_med^(j))`.
    pub grid: GridSpec,
    pub cv: CvSettings,
}

impl Default for HessianOptions {
    fn default() -> Self {
        Self {
            grid: GridSpec::ridge(),
            cv: CvSettings::default(),
        }
    }
}

/// Estimates `H_ij = d_i d_j p / p` for every unordered pair `i <= j`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianModel {
    dim: usize,
    /// Upper-triangular order: (0,0), (0,1), ..., (0,D-1), (1,1), ...
    components: Vec<RatioModel>,
    reports: Vec<CvReport>,
}

fn pair_slot(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * dim - i * (i + 1) / 2 + j
}

pub fn pair_list(dim: usize) -> Vec<(usize, usize)> {
    (0..dim).flat_map(|i| (i..dim).map(move |j| (i, j))).collect()
}

impl HessianModel {
    pub fn from_components(dim: usize, components: Vec<RatioModel>) -> Result<Self> {
        if components.len() != dim * (dim + 1) / 2 {
            return Err(Error::invalid(format!(
                "expected {} Hessian components, got {}",
                dim * (dim + 1) / 2,
                components.len()
            )));
        }
        for ((i, j), m) in pair_list(dim).into_iter().zip(&components) {
            if m.basis.multi_index != MultiIndex::pair(dim, i, j) {
                return Err(Error::invalid(format!("component ({i},{j}) has wrong multi-index")));
            }
        }
        Ok(Self {
            dim,
            components,
            reports: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Model for `(i, j)`; `(j, i)` returns the same model.
    pub fn component(&self, i: usize, j: usize) -> &RatioModel {
        &self.components[pair_slot(self.dim, i, j)]
    }

    pub fn components(&self) -> &[RatioModel] {
        &self.components
    }

    pub fn reports(&self) -> &[CvReport] {
        &self.reports
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.eval_raw(x))
    }

    pub(crate) fn eval_raw(&self, x: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for ((i, j), m) in pair_list(self.dim).into_iter().zip(&self.components) {
            let v = m.eval_raw(x);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
        h
    }
}

/// Cross-validate and fit all `D(D+1)/2` second-order ratios.
pub fn fit_hessian(samples: &PointSet, centers: &PointSet, opts: &HessianOptions) -> Result<HessianModel> {
    let dim = samples.dim();
    if centers.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: centers.dim(),
        });
    }
    let meds = (0..dim)
        .map(|j| median_pairwise_scale(samples, j))
        .collect::<Result<Vec<_>>>()?;
    let fitted: Vec<Result<(RatioModel, CvReport)>> = pair_list(dim)
        .into_par_iter()
        .map(|(i, j)| {
            let name = format!("H[{i},{j}]");
            let scale = (meds[i] * meds[j]).sqrt();
            if scale <= 0.0 {
                return Err(Error::invalid("zero spread").in_component(name));
            }
            let template = BasisSpec::new(centers.clone(), scale, MultiIndex::pair(dim, i, j), false)?;
            let sigmas = opts.grid.sigma_factors.iter().map(|f| f * scale).collect();
            fit_component(samples, template, sigmas, &opts.grid.lambdas, &opts.cv, false, name)
        })
        .collect();
    let mut components = Vec::new();
    let mut reports = Vec::new();
    for r in fitted {
        let (m, rep) = r?;
        components.push(m.with_seed(Some(opts.cv.seed)));
        reports.push(rep);
    }
    let mut model = HessianModel::from_components(dim, components)?;
    model.reports = reports;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_points(n: usize, dim: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        PointSet::new(dim, data).unwrap()
    }

    #[test]
    fn design_single_sample() {
        let x = PointSet::from_rows(&[[0.3, -0.2]]).unwrap();
        let basis = BasisSpec::new(x.clone(), 1.0, MultiIndex::unit(2, 0), false).unwrap();
        let (g, _) = build_design(&x, &basis).unwrap();
        assert_relative_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn design_matches_naive_double_loop() {
        let samples = random_points(20, 2, 1);
        let centers = random_points(4, 2, 2);
        for mi in [MultiIndex::unit(2, 1), MultiIndex::pair(2, 0, 1)] {
            for simplified in [false, true] {
                if simplified && mi.order() == 2 {
                    continue;
                }
                let basis = BasisSpec::new(centers.clone(), 0.8, mi.clone(), simplified).unwrap();
                let (g, h) = build_design(&samples, &basis).unwrap();
                let p = basis.len();
                assert_eq!(g.nrows(), p);
                let mut g_ref = DMatrix::<f64>::zeros(p, p);
                let mut h_ref = DVector::<f64>::zeros(p);
                for x in samples.rows() {
                    let psi = basis.features(x);
                    let dpsi = basis.feature_partials(x, &mi);
                    for a in 0..p {
                        h_ref[a] += dpsi[a] / 20.0;
                        for b in 0..p {
                            g_ref[(a, b)] += psi[a] * psi[b] / 20.0;
                        }
                    }
                }
                assert!((&g - &g_ref).amax() < 1e-12);
                assert!((&h - &h_ref).amax() < 1e-12);
                assert!((&g - g.transpose()).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_samples_rejected() {
        let c = random_points(2, 1, 0);
        let basis = BasisSpec::new(c, 1.0, MultiIndex::unit(1, 0), true).unwrap();
        assert!(build_design(&PointSet::empty(1), &basis).is_err());
        assert!(cv_score(
            &RatioModel::from_parts(basis.clone(), vec![0.0; 2], 1.0).unwrap(),
            &PointSet::empty(1)
        )
        .is_err());
    }

    #[test]
    fn solver_residual_contract() {
        let samples = random_points(60, 2, 3);
        let centers = subsample_centers(&samples, 15, 4).unwrap();
        for mi in [MultiIndex::unit(2, 0), MultiIndex::pair(2, 1, 1), MultiIndex::pair(2, 0, 1)] {
            let basis = BasisSpec::new(centers.clone(), 0.7, mi, false).unwrap();
            let model = fit_ratio(&samples, &basis, 1e-3).unwrap();
            let (g, h) = build_design(&samples, &basis).unwrap();
            assert!(model.residual(&g, &h) <= 1e-8 * (1.0 + h.norm()));
        }
    }

    #[test]
    fn zero_model_evaluates_to_zero() {
        let c = random_points(3, 2, 5);
        let basis = BasisSpec::new(c, 1.0, MultiIndex::unit(2, 0), false).unwrap();
        let m = RatioModel::from_parts(basis, vec![0.0; 6], 1.0).unwrap();
        assert_eq!(m.evaluate(&[0.4, 0.1]).unwrap(), 0.0);
        assert_eq!(cv_score(&m, &random_points(7, 2, 6)).unwrap(), 0.0);
        assert!(m.evaluate(&[0.4]).is_err());
    }

    #[test]
    fn single_center_simplified_matches_restricted_form() {
        let c = PointSet::from_rows(&[[0.5, -0.3]]).unwrap();
        let sigma = 0.9;
        let basis = BasisSpec::new(c, sigma, MultiIndex::unit(2, 1), true).unwrap();
        // beta~ = -theta = 1
        let m = RatioModel::from_parts(basis, vec![-1.0], 1.0).unwrap();
        let x = [0.1, 0.4];
        let sq = (0.1f64 - 0.5).powi(2) + (0.4f64 + 0.3).powi(2);
        let expected = (-0.3 - 0.4) / (sigma * sigma) * (-sq / (2.0 * sigma * sigma)).exp();
        assert_relative_eq!(m.evaluate(&x).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn evaluation_matches_resummation() {
        let c = random_points(6, 3, 7);
        let basis = BasisSpec::new(c, 0.6, MultiIndex::pair(3, 0, 2), false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = RatioModel::from_parts(basis.clone(), theta.clone(), 0.1).unwrap();
        let x = [0.2, -0.7, 1.1];
        let psi = basis.features(&x);
        let direct: f64 = psi.iter().zip(&theta).map(|(a, b)| a * b).sum();
        assert!((m.evaluate(&x).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn own_derivative_matches_finite_difference() {
        let c = random_points(5, 2, 9);
        let basis = BasisSpec::new(c, 0.8, MultiIndex::unit(2, 0), false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let theta: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = RatioModel::from_parts(basis, theta, 0.1).unwrap();
        let x = [0.3, -0.1];
        let h = 1e-5;
        let fd = (m.evaluate(&[x[0] + h, x[1]]).unwrap() - m.evaluate(&[x[0] - h, x[1]]).unwrap()) / (2.0 * h);
        let an = m.evaluate_own_derivative(&x).unwrap();
        assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()));
        assert_relative_eq!(an, m.evaluate_partial(&x, 0).unwrap());
    }

    #[test]
    fn ridge_shrinkage_is_monotone() {
        let samples = random_points(40, 2, 11);
        let centers = subsample_centers(&samples, 10, 12).unwrap();
        let basis = BasisSpec::new(centers, 0.7, MultiIndex::unit(2, 0), false).unwrap();
        let mut prev = f64::INFINITY;
        for lambda in [1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let m = fit_ratio(&samples, &basis, lambda).unwrap();
            let norm = m.theta().iter().map(|t| t * t).sum::<f64>().sqrt();
            assert!(norm < prev);
            prev = norm;
        }
    }

    #[test]
    fn nonneg_fit_respects_constraint() {
        let samples = random_points(50, 2, 13);
        let centers = subsample_centers(&samples, 12, 14).unwrap();
        let basis = BasisSpec::new(centers, 0.6, MultiIndex::unit(2, 0), true).unwrap();
        let m = fit_ratio_nonneg(&samples, &basis, 1e-2).unwrap();
        assert!(m.is_constrained());
        assert!(m.theta().iter().all(|&t| t <= 0.0));
        // KKT: gradient of the quadratic vanishes on free coordinates.
        let (g, h) = build_design(&samples, &basis).unwrap();
        let theta = DVector::from_column_slice(m.theta());
        let grad = &g * &theta + &theta * 1e-2 - (-&h);
        for (i, &t) in m.theta().iter().enumerate() {
            if t < -1e-10 {
                assert!(grad[i].abs() < 1e-8, "free coordinate {i} gradient {}", grad[i]);
            } else {
                assert!(grad[i] <= 1e-8);
            }
        }
    }

    #[test]
    fn median_scale_examples() {
        let p = PointSet::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(median_pairwise_scale(&p, 0).unwrap(), 1.0);
        let p = PointSet::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        assert_eq!(median_pairwise_scale(&p, 0).unwrap(), 2.0);
        assert!(median_pairwise_scale(&PointSet::from_rows(&[[0.0]]).unwrap(), 0).is_err());
    }

    #[test]
    fn median_scale_matches_sorted_enumeration() {
        let p = random_points(200, 2, 15);
        let col = p.column(1);
        let mut gaps = Vec::new();
        for i in 0..200 {
            for k in 0..i {
                gaps.push((col[i] - col[k]).abs());
            }
        }
        gaps.sort_by(f64::total_cmp);
        let m = gaps.len();
        let expected = 0.5 * (gaps[m / 2 - 1] + gaps[m / 2]);
        assert_eq!(median_pairwise_scale(&p, 1).unwrap(), expected);
    }

    #[test]
    fn subsample_properties() {
        let p = random_points(30, 2, 16);
        let a = subsample_centers(&p, 10, 3).unwrap();
        let b = subsample_centers(&p, 10, 3).unwrap();
        assert_eq!(a, b);
        let all = subsample_centers(&p, 30, 3).unwrap();
        let mut got: Vec<Vec<u64>> = all.rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u64>> = p.rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert!(subsample_centers(&p, 31, 0).is_err());
    }

    #[test]
    fn fold_split_partitions() {
        let folds = fold_split(23, 5, 9).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(fold_split(3, 5, 0).is_err());
        assert!(fold_split(10, 1, 0).is_err());
    }

    #[test]
    fn single_candidate_grid() {
        let samples = random_points(30, 1, 17);
        let centers = subsample_centers(&samples, 10, 1).unwrap();
        let basis = BasisSpec::new(centers, 1.0, MultiIndex::unit(1, 0), true).unwrap();
        let rep = select_model(&samples, &basis, &[0.42], &[0.07], &CvSettings::default()).unwrap();
        assert_eq!((rep.sigma, rep.lambda), (0.42, 0.07));
        assert_eq!(rep.entries(), 1);
    }

    #[test]
    fn tie_break_prefers_smoother() {
        let scores = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(argmin_grid(&[0.5, 2.0], &[0.1, 1.0], &scores), (1, 1));
        let scores = vec![vec![0.5, 1.0], vec![1.0, 1.0]];
        assert_eq!(argmin_grid(&[0.5, 2.0], &[0.1, 1.0], &scores), (0, 0));
    }

    #[test]
    fn model_document_roundtrip() {
        let c = random_points(3, 2, 18);
        let basis = BasisSpec::new(c, 0.5, MultiIndex::pair(2, 0, 1), false).unwrap();
        let m = RatioModel::from_parts(basis, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6], 0.01)
            .unwrap()
            .with_seed(Some(42));
        let json = serde_json::to_string(&m.to_document()).unwrap();
        let back = RatioModel::from_document(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.to_document(), m.to_document());
    }

    #[test]
    fn hessian_pair_slots() {
        let pairs = pair_list(3);
        assert_eq!(pairs.len(), 6);
        for (slot, &(i, j)) in pairs.iter().enumerate() {
            assert_eq!(pair_slot(3, i, j), slot);
            assert_eq!(pair_slot(3, j, i), slot);
        }
    }
}
