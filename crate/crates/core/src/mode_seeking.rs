//! Mode-seeking clustering driven by an estimated log-density gradient.
//!
//! Each sample is moved by mean-shift-type fixed-point updates built from
//! the simplified gradient model `g_j(z) = sum_i beta~_i (c_i^(j) - z^(j)) / sigma_j^2 * varphi(.)`.
//! Progress is monitored with the axis-aligned path integral `D^[z'|z]`, an
//! estimate of `log p(z') - log p(z)`. A negative gain, or a vanishing
//! denominator `f_j`, switches the step to a line-searched gradient ascent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::kernels::{profile_phi, profile_varphi};
use crate::linalg::{gauss_legendre, integrate};
use crate::lsddr::{log_grid, GradientModel};
use crate::points::{sq_dist, PointSet};

/// Relative threshold for `|f_j|` below which a fixed-point step is unsafe.
pub const DEFAULT_F_GUARD: f64 = 1e-8;
/// Quadrature nodes per coordinate segment for models with a kernel-value half.
pub const PATH_QUADRATURE_NODES: usize = 32;

/// Mean-shift-type displacement at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftVector {
    /// `m^(j) = sigma_j^2 g_j(z) / f_j(z)`; non-finite when `f_j = 0`.
    pub m: Vec<f64>,
    /// Per-coordinate denominators `f_j(z)`.
    pub f: Vec<f64>,
}

/// A vector field that can drive density ascent.
pub trait AscentField: Sync {
    fn dim(&self) -> usize;

    /// Estimated `grad log p(x)`.
    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    fn shift(&self, x: &[f64]) -> ShiftVector;

    /// Displacement for coordinate `j` only; defaults to the full shift.
    fn shift_coordinate(&self, x: &[f64], j: usize) -> (f64, f64) {
        let s = self.shift(x);
        (s.m[j], s.f[j])
    }

    /// Estimated `log p(to) - log p(from)`.
    fn gain(&self, to: &[f64], from: &[f64]) -> f64;

    /// Scale of `|f_j|` used by the guard; zero disables the guard.
    fn guard_scale(&self, _j: usize) -> f64 {
        0.0
    }

    /// Smallest kernel width, used to scale line-search step sizes.
    fn min_width(&self) -> f64;

    /// Rejects points where the field cannot be evaluated reliably.
    fn validate(&self, _x: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// `m` and `f` of a simplified gradient model.
pub fn shift_vector(model: &GradientModel, z: &[f64]) -> Result<ShiftVector> {
    require_simplified(model)?;
    model.centers().check_point(z)?;
    Ok(AscentField::shift(model, z))
}

fn require_simplified(model: &GradientModel) -> Result<()> {
    if !model.is_simplified() {
        return Err(Error::invalid(
            "fixed-point updates need a simplified (alpha = 0) gradient model",
        ));
    }
    Ok(())
}

/// `(sum_i beta~_i c_i^(j) varphi_i, f_j)` for one coordinate.
fn weighted_sums(model: &GradientModel, z: &[f64], j: usize) -> (f64, f64) {
    let comp = model.component(j);
    let sigma = comp.sigma();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut num = 0.0;
    let mut den = 0.0;
    for (theta, c) in comp.beta().iter().zip(model.centers().rows()) {
        let bt = -theta;
        let w = bt * profile_varphi(sq_dist(z, c) * inv);
        num += w * c[j];
        den += w;
    }
    (num, den)
}

impl AscentField for GradientModel {
    fn dim(&self) -> usize {
        GradientModel::dim(self)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.eval_raw(x)
    }

    fn shift(&self, x: &[f64]) -> ShiftVector {
        let mut m = Vec::with_capacity(x.len());
        let mut f = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let (mj, fj) = self.shift_coordinate(x, j);
            m.push(mj);
            f.push(fj);
        }
        ShiftVector { m, f }
    }

    fn shift_coordinate(&self, x: &[f64], j: usize) -> (f64, f64) {
        if self.component(j).basis().simplified() {
            let (num, den) = weighted_sums(self, x, j);
            (num / den - x[j], den)
        } else {
            // m = sigma^2 g / f with the kernel-value half included in g.
            let (_, den) = weighted_sums(self, x, j);
            let s = self.component(j).sigma();
            (s * s * self.component(j).eval_raw(x) / den, den)
        }
    }

    fn gain(&self, to: &[f64], from: &[f64]) -> f64 {
        if self.is_simplified() {
            path_integral_closed_form(self, to, from)
        } else {
            path_integral_quadrature(self, to, from, PATH_QUADRATURE_NODES)
        }
    }

    fn guard_scale(&self, j: usize) -> f64 {
        let max = self.component(j).beta().iter().fold(0.0f64, |m, b| m.max(b.abs()));
        max * profile_varphi(0.0)
    }

    fn min_width(&self) -> f64 {
        self.components().iter().map(|c| c.sigma()).fold(f64::INFINITY, f64::min)
    }
}

/// Outcome of one fixed-point or coordinate-wise step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub z: Vec<f64>,
    pub f: Vec<f64>,
    /// Some `|f_j|` fell below the guard threshold.
    pub guard_tripped: bool,
}

fn guard_tripped<F: AscentField + ?Sized>(field: &F, f: &[f64], f_guard: f64) -> bool {
    f.iter()
        .enumerate()
        .any(|(j, fj)| !fj.is_finite() || fj.abs() <= f_guard * field.guard_scale(j))
}

/// `z' = z + m(z)` with every coordinate evaluated at the same `z`.
pub fn fixed_point_step<F: AscentField + ?Sized>(field: &F, z: &[f64], f_guard: f64) -> StepOutcome {
    let s = field.shift(z);
    let znew: Vec<f64> = z.iter().zip(&s.m).map(|(a, b)| a + b).collect();
    let guard = guard_tripped(field, &s.f, f_guard);
    StepOutcome {
        z: znew,
        f: s.f,
        guard_tripped: guard,
    }
}

/// Sequential update `z~^(j) <- z^(j) + m^(j)(z~)` for `j = 1..D`.
pub fn coordinate_wise_step<F: AscentField + ?Sized>(field: &F, z: &[f64], f_guard: f64) -> StepOutcome {
    let mut zt = z.to_vec();
    let mut f = Vec::with_capacity(z.len());
    for j in 0..z.len() {
        let (mj, fj) = field.shift_coordinate(&zt, j);
        zt[j] += mj;
        f.push(fj);
    }
    let guard = guard_tripped(field, &f, f_guard);
    StepOutcome {
        z: zt,
        f,
        guard_tripped: guard,
    }
}

/// Closed-form path integral for simplified models:
/// `sum_j sum_i beta~_i [phi(|z_x^j - c_i|^2 / 2 sigma_j^2) - phi(|z_y^j - c_i|^2 / 2 sigma_j^2)]`.
fn path_integral_closed_form(model: &GradientModel, x: &[f64], y: &[f64]) -> f64 {
    let mut zy = y.to_vec();
    let mut total = 0.0;
    for j in 0..x.len() {
        let mut zx = zy.clone();
        zx[j] = x[j];
        let comp = model.component(j);
        let sigma = comp.sigma();
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut acc = 0.0;
        for (theta, c) in comp.beta().iter().zip(model.centers().rows()) {
            let bt = -theta;
            acc += bt * (profile_phi(sq_dist(&zx, c) * inv) - profile_phi(sq_dist(&zy, c) * inv));
        }
        total += acc;
        zy = zx;
    }
    total
}

/// Path integral of `g^` along the axis-aligned path from `y` to `x`,
/// by Gauss-Legendre quadrature on each coordinate segment.
pub fn path_integral_quadrature(model: &GradientModel, x: &[f64], y: &[f64], nodes: usize) -> f64 {
    let rule = gauss_legendre(nodes);
    let mut z = y.to_vec();
    let mut total = 0.0;
    for j in 0..x.len() {
        let comp = model.component(j);
        let mut p = z.clone();
        total += integrate(&rule, y[j], x[j], |t| {
            p[j] = t;
            comp.eval_raw(&p)
        });
        z[j] = x[j];
    }
    total
}

/// `D^[x|y]`, the estimate of `log p(x) - log p(y)` along the path that
/// moves one coordinate at a time from `y` to `x`.
pub fn path_integral(model: &GradientModel, x: &[f64], y: &[f64]) -> Result<f64> {
    model.centers().check_point(x)?;
    model.centers().check_point(y)?;
    Ok(AscentField::gain(model, x, y))
}

/// Result of a line search along a fixed direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSearch {
    pub z: Vec<f64>,
    pub eta: Option<f64>,
    pub gain: f64,
    /// Every candidate decreased the estimated log density.
    pub stalled: bool,
}

/// Pick `eta` from the grid maximizing `D^[z + eta dir | z]`.
pub fn line_search<F: AscentField + ?Sized>(field: &F, z: &[f64], dir: &[f64], etas: &[f64]) -> LineSearch {
    let mut best: Option<(f64, f64)> = None;
    for &eta in etas {
        let cand: Vec<f64> = z.iter().zip(dir).map(|(a, d)| a + eta * d).collect();
        let g = field.gain(&cand, z);
        if !g.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, bg)| g > bg) {
            best = Some((eta, g));
        }
    }
    match best {
        Some((eta, gain)) if gain >= 0.0 => LineSearch {
            z: z.iter().zip(dir).map(|(a, d)| a + eta * d).collect(),
            eta: Some(eta),
            gain,
            stalled: false,
        },
        _ => LineSearch {
            z: z.to_vec(),
            eta: None,
            gain: 0.0,
            stalled: true,
        },
    }
}

/// Gradient ascent `z + eta g^(z)` with `eta` maximizing the path integral.
pub fn gradient_ascent_step<F: AscentField + ?Sized>(field: &F, z: &[f64], etas: &[f64]) -> Result<LineSearch> {
    if etas.is_empty() {
        return Err(Error::invalid("step-size grid is empty"));
    }
    let g = field.gradient(z);
    Ok(line_search(field, z, &g, etas))
}

/// `count` log-spaced step sizes in `[1e-3, 10] * width^2`.
pub fn default_eta_grid(min_width: f64) -> Vec<f64> {
    let s2 = min_width * min_width;
    log_grid(1e-3 * s2, 10.0 * s2, 20)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    FixedPoint,
    CoordinateWise,
}

/// Termination and fallback settings for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeekConfig {
    pub rule: UpdateRule,
    pub tol_step: f64,
    pub tol_gain: f64,
    pub max_iter: usize,
    /// Relative guard on `|f_j|`.
    pub f_guard: f64,
    /// Line-search step sizes; `None` uses [`default_eta_grid`].
    pub eta_grid: Option<Vec<f64>>,
}

impl Default for SeekConfig {
    fn default() -> Self {
        Self {
            rule: UpdateRule::FixedPoint,
            tol_step: 1e-6,
            tol_gain: 1e-9,
            max_iter: 500,
            f_guard: DEFAULT_F_GUARD,
            eta_grid: None,
        }
    }
}

impl SeekConfig {
    /// Defaults with `tol_step = 1e-6 * scale`, where `scale` is the RMS
    /// per-coordinate standard deviation of `samples`.
    pub fn for_data(samples: &PointSet) -> Self {
        Self {
            tol_step: 1e-6 * data_scale(samples),
            ..Self::default()
        }
    }

    pub fn with_rule(mut self, rule: UpdateRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_step > 0.0) || !(self.tol_gain > 0.0) || !(self.f_guard > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if self.eta_grid.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::invalid("step-size grid is empty"));
        }
        Ok(())
    }

    pub(crate) fn etas(&self, min_width: f64) -> Vec<f64> {
        self.eta_grid.clone().unwrap_or_else(|| default_eta_grid(min_width))
    }
}

pub(crate) fn data_scale(samples: &PointSet) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    for j in 0..samples.dim() {
        let col = samples.column(j);
        let mean = col.iter().sum::<f64>() / n;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    let s = (total / samples.dim() as f64).sqrt();
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeekStatus {
    Converged,
    /// The fallback line search found no ascent; treated as converged.
    Stalled,
    MaxIter,
}

impl SeekStatus {
    pub fn is_converged(self) -> bool {
        matches!(self, SeekStatus::Converged | SeekStatus::Stalled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SeekStatus::Converged => "converged",
            SeekStatus::Stalled => "stalled",
            SeekStatus::MaxIter => "max_iter",
        }
    }
}

/// Iterates of one seek run and per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `z^0, ..., z^T`.
    pub iterates: Vec<Vec<f64>>,
    /// Accepted `D^[z^{t+1}|z^t]` per step.
    pub gains: Vec<f64>,
    /// `D^` of the primary update before any fallback; `None` when the
    /// guard fired first.
    pub primary_gains: Vec<Option<f64>>,
    pub fallback: Vec<bool>,
    pub status: SeekStatus,
}

impl Trajectory {
    pub fn end(&self) -> &[f64] {
        self.iterates.last().expect("trajectory has a start point")
    }

    pub fn steps(&self) -> usize {
        self.gains.len()
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|f| **f).count()
    }
}

/// A trajectory that hit a non-finite iterate.
#[derive(Debug, Clone, Error)]
#[error("seek failed after {} steps: {message}", .trajectory.steps())]
pub struct SeekFailure {
    pub trajectory: Trajectory,
    pub message: String,
}

/// Run the ascent loop from `start`.
pub fn seek_mode<F: AscentField + ?Sized>(
    field: &F,
    start: &[f64],
    config: &SeekConfig,
) -> std::result::Result<Trajectory, SeekFailure> {
    let etas = config.etas(field.min_width());
    let mut traj = Trajectory {
        iterates: vec![start.to_vec()],
        gains: Vec::new(),
        primary_gains: Vec::new(),
        fallback: Vec::new(),
        status: SeekStatus::MaxIter,
    };
    let fail = |traj: Trajectory, message: String| SeekFailure {
        trajectory: traj,
        message,
    };
    if start.len() != field.dim() {
        return Err(fail(traj, format!("start has dimension {}, field has {}", start.len(), field.dim())));
    }
    let mut z = start.to_vec();
    for _ in 0..config.max_iter {
        if let Err(e) = field.validate(&z) {
            return Err(fail(traj, e.to_string()));
        }
        let step = match config.rule {
            UpdateRule::FixedPoint => fixed_point_step(field, &z, config.f_guard),
            UpdateRule::CoordinateWise => coordinate_wise_step(field, &z, config.f_guard),
        };
        let primary = if step.guard_tripped || !step.z.iter().all(|v| v.is_finite()) {
            None
        } else {
            Some(field.gain(&step.z, &z))
        };
        let use_fallback = primary.is_none_or(|d| !(d >= 0.0));
        let (next, gain) = if use_fallback {
            let g = field.gradient(&z);
            let ls = line_search(field, &z, &g, &etas);
            if ls.stalled {
                traj.gains.push(0.0);
                traj.primary_gains.push(primary);
                traj.fallback.push(true);
                traj.iterates.push(z.clone());
                traj.status = SeekStatus::Stalled;
                return Ok(traj);
            }
            (ls.z, ls.gain)
        } else {
            (step.z, primary.unwrap_or(0.0))
        };
        if !next.iter().all(|v| v.is_finite()) || !gain.is_finite() {
            return Err(fail(traj, "non-finite iterate".into()));
        }
        let moved = sq_dist(&next, &z).sqrt();
        traj.iterates.push(next.clone());
        traj.gains.push(gain);
        traj.primary_gains.push(primary);
        traj.fallback.push(use_fallback);
        z = next;
        if moved < config.tol_step || gain < config.tol_gain {
            traj.status = SeekStatus::Converged;
            return Ok(traj);
        }
    }
    Ok(traj)
}

/// Converged points, the merged modes, and per-sample labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Mode index per sample; `-1` marks a failed trajectory.
    pub labels: Vec<i64>,
    pub modes: PointSet,
    pub endpoints: PointSet,
    pub iterations: Vec<usize>,
    pub fallbacks: Vec<usize>,
    pub statuses: Vec<Option<SeekStatus>>,
    pub failures: Vec<(usize, String)>,
    pub trajectories: Option<Vec<Trajectory>>,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.modes.len()
    }
}

/// Single-linkage grouping of points at `radius`.
///
/// Groups are numbered by first appearance; each mode is its group's mean.
pub fn merge_modes(points: &PointSet, active: &[bool], radius: f64) -> (Vec<i64>, PointSet) {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let r2 = radius * radius;
    for i in 0..n {
        if !active[i] {
            continue;
        }
        for k in (i + 1)..n {
            if active[k] && sq_dist(points.row(i), points.row(k)) <= r2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, k));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut root_label = vec![-1i64; n];
    let mut labels = vec![-1i64; n];
    let mut sums: Vec<(Vec<f64>, usize)> = Vec::new();
    for i in 0..n {
        if !active[i] {
            continue;
        }
        let r = find(&mut parent, i);
        if root_label[r] < 0 {
            root_label[r] = sums.len() as i64;
            sums.push((vec![0.0; points.dim()], 0));
        }
        let l = root_label[r];
        labels[i] = l;
        let (s, c) = &mut sums[l as usize];
        for (a, b) in s.iter_mut().zip(points.row(i)) {
            *a += b;
        }
        *c += 1;
    }
    let mut modes = PointSet::empty(points.dim());
    for (s, c) in sums {
        let mean: Vec<f64> = s.iter().map(|v| v / c as f64).collect();
        modes.push(&mean).expect("dimension matches");
    }
    (labels, modes)
}

/// Default merge radius for a gradient model: `max_j sigma_j / 2`.
pub fn default_merge_radius(model: &GradientModel) -> f64 {
    model.components().iter().map(|c| c.sigma()).fold(0.0, f64::max) / 2.0
}

/// Seek a mode from every sample and group the endpoints.
pub fn cluster<F: AscentField + ?Sized>(
    samples: &PointSet,
    field: &F,
    config: &SeekConfig,
    merge_radius: f64,
    keep_trajectories: bool,
) -> Result<ClusterResult> {
    config.validate()?;
    if !samples.all_finite() {
        return Err(Error::invalid("samples must be finite"));
    }
    if samples.dim() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: samples.dim(),
        });
    }
    if !(merge_radius > 0.0) {
        return Err(Error::invalid("merge radius must be positive"));
    }
    let runs: Vec<std::result::Result<Trajectory, SeekFailure>> = (0..samples.len())
        .into_par_iter()
        .map(|i| seek_mode(field, samples.row(i), config))
        .collect();
    collect_cluster(samples, runs, merge_radius, keep_trajectories)
}

pub(crate) fn collect_cluster(
    samples: &PointSet,
    runs: Vec<std::result::Result<Trajectory, SeekFailure>>,
    merge_radius: f64,
    keep_trajectories: bool,
) -> Result<ClusterResult> {
    let n = samples.len();
    let mut endpoints = PointSet::empty(samples.dim());
    let mut active = vec![true; n];
    let mut iterations = Vec::with_capacity(n);
    let mut fallbacks = Vec::with_capacity(n);
    let mut statuses = Vec::with_capacity(n);
    let mut failures = Vec::new();
    let mut trajectories = Vec::new();
    for (i, run) in runs.into_iter().enumerate() {
        match run {
            Ok(t) => {
                endpoints.push(t.end())?;
                iterations.push(t.steps());
                fallbacks.push(t.fallback_count());
                statuses.push(Some(t.status));
                if keep_trajectories {
                    trajectories.push(t);
                }
            }
            Err(f) => {
                endpoints.push(f.trajectory.end())?;
                active[i] = false;
                iterations.push(f.trajectory.steps());
                fallbacks.push(f.trajectory.fallback_count());
                statuses.push(None);
                log::warn!("sample {i}: {}", f.message);
                failures.push((i, f.message.clone()));
                if keep_trajectories {
                    trajectories.push(f.trajectory);
                }
            }
        }
    }
    let (labels, modes) = merge_modes(&endpoints, &active, merge_radius);
    Ok(ClusterResult {
        labels,
        modes,
        endpoints,
        iterations,
        fallbacks,
        statuses,
        failures,
        trajectories: keep_trajectories.then_some(trajectories),
    })
}
