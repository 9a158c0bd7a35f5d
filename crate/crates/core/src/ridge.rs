//! Density ridge finding by subspace-constrained mean shift.
//!
//! The local inverse covariance `Sigma^{-1}(x) = -H(x) + g(x) g(x)^T`, with
//! `g = grad log p` and `H = grad grad p / p`, is eigendecomposed; its top
//! `D - d` eigenvectors span the directions orthogonal to a `d`-dimensional
//! ridge. Each step moves a point by the mean-shift vector projected onto
//! that subspace.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sorted_symmetric_eigen;
use crate::lsddr::HessianModel;
use crate::mode_seeking::{line_search, AscentField, LineSearch, SeekConfig, SeekFailure, SeekStatus, ShiftVector, Trajectory};
use crate::points::{dist, PointSet};

/// Eigengap below which the ridge subspace is reported as ill-defined.
pub const EIGENGAP_WARN: f64 = 1e-10;

/// Source of `H(x) = grad grad p(x) / p(x)`.
pub trait CurvatureField: Sync {
    fn hessian_ratio(&self, x: &[f64]) -> DMatrix<f64>;
}

impl CurvatureField for HessianModel {
    fn hessian_ratio(&self, x: &[f64]) -> DMatrix<f64> {
        self.eval_raw(x)
    }
}

/// `sym(-H + g g^T)`.
pub fn inverse_local_cov(g: &[f64], h: &DMatrix<f64>) -> DMatrix<f64> {
    let d = g.len();
    let mut m = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            m[(a, b)] = -0.5 * (h[(a, b)] + h[(b, a)]) + g[a] * g[b];
        }
    }
    m
}

/// Orthogonal projector onto the span of the top `D - d` eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub matrix: DMatrix<f64>,
    /// Eigenvalues of the decomposed matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// `lambda_{D-d} - lambda_{D-d+1}`; infinite when `d = 0`.
    pub eigengap: f64,
}

impl Projector {
    pub fn is_degenerate(&self) -> bool {
        self.eigengap < EIGENGAP_WARN
    }

    /// Largest of `|L^2 - L|`, `|L - L^T|` (Frobenius) and `|tr L - rank|`.
    pub fn defect(&self, rank: usize) -> f64 {
        let l = &self.matrix;
        let idem = (l * l - l).norm();
        let sym = (l - l.transpose()).norm();
        let tr = (l.trace() - rank as f64).abs();
        idem.max(sym).max(tr)
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        (0..d).map(|a| (0..d).map(|b| self.matrix[(a, b)] * v[b]).sum()).collect()
    }
}

/// Projector for a `d`-dimensional ridge of the symmetric matrix `m`.
pub fn subspace_projector(m: &DMatrix<f64>, d: usize) -> Result<Projector> {
    let dim = m.nrows();
    if m.ncols() != dim {
        return Err(Error::invalid("matrix must be square"));
    }
    if d >= dim {
        return Err(Error::invalid(format!("ridge dimension {d} must be below {dim}")));
    }
    let (values, vectors) = sorted_symmetric_eigen(m)?;
    let k = dim - d;
    let v = vectors.columns(0, k);
    let eigengap = if d == 0 { f64::INFINITY } else { values[k - 1] - values[k] };
    Ok(Projector {
        matrix: &v * v.transpose(),
        eigenvalues: values,
        eigengap,
    })
}

fn projector_at<F, C>(field: &F, curv: &C, z: &[f64], d: usize) -> Result<Projector>
where
    F: AscentField + ?Sized,
    C: CurvatureField + ?Sized,
{
    if d == 0 {
        let n = z.len();
        return Ok(Projector {
            matrix: DMatrix::identity(n, n),
            eigenvalues: Vec::new(),
            eigengap: f64::INFINITY,
        });
    }
    let g = field.gradient(z);
    subspace_projector(&inverse_local_cov(&g, &curv.hessian_ratio(z)), d)
}

/// One projected mean-shift step and what it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeStep {
    pub z: Vec<f64>,
    pub projector: Projector,
    pub shift: ShiftVector,
}

/// `z + L(z) m(z)`.
pub fn lsdrf_step<F, C>(field: &F, curv: &C, z: &[f64], d: usize) -> Result<RidgeStep>
where
    F: AscentField + ?Sized,
    C: CurvatureField + ?Sized,
{
    check_dims(field, z, d)?;
    let projector = projector_at(field, curv, z, d)?;
    let shift = field.shift(z);
    let lm = projector.apply(&shift.m);
    let znew = z.iter().zip(&lm).map(|(a, b)| a + b).collect();
    Ok(RidgeStep {
        z: znew,
        projector,
        shift,
    })
}

/// `z + eta L(z) g(z)` with `eta` chosen by the path-integral line search.
pub fn projected_gradient_step<F, C>(field: &F, curv: &C, z: &[f64], d: usize, etas: &[f64]) -> Result<LineSearch>
where
    F: AscentField + ?Sized,
    C: CurvatureField + ?Sized,
{
    check_dims(field, z, d)?;
    if etas.is_empty() {
        return Err(Error::invalid("step-size grid is empty"));
    }
    let projector = projector_at(field, curv, z, d)?;
    let dir = projector.apply(&field.gradient(z));
    Ok(line_search(field, z, &dir, etas))
}

fn check_dims<F: AscentField + ?Sized>(field: &F, z: &[f64], d: usize) -> Result<()> {
    if z.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: z.len(),
        });
    }
    if d >= z.len() {
        return Err(Error::invalid(format!("ridge dimension {d} must be below {}", z.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    /// Intrinsic ridge dimension `d`.
    pub ridge_dim: usize,
    /// Tolerances and step sizes; the update rule is ignored.
    pub seek: SeekConfig,
}

impl RidgeConfig {
    pub fn for_data(samples: &PointSet, ridge_dim: usize) -> Self {
        Self {
            ridge_dim,
            seek: SeekConfig::for_data(samples),
        }
    }
}

/// One ridge trajectory with projector diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeTrace {
    pub trajectory: Trajectory,
    pub max_projector_defect: f64,
    pub degenerate_steps: usize,
}

/// Iterate projected steps from `start` until the step or the gain is small.
pub fn trace_ridge<F, C>(field: &F, curv: &C, start: &[f64], config: &RidgeConfig) -> std::result::Result<RidgeTrace, SeekFailure>
where
    F: AscentField + ?Sized,
    C: CurvatureField + ?Sized,
{
    let cfg = &config.seek;
    let d = config.ridge_dim;
    let etas = cfg.etas(field.min_width());
    let mut trace = RidgeTrace {
        trajectory: Trajectory {
            iterates: vec![start.to_vec()],
            gains: Vec::new(),
            primary_gains: Vec::new(),
            fallback: Vec::new(),
            status: SeekStatus::MaxIter,
        },
        max_projector_defect: 0.0,
        degenerate_steps: 0,
    };
    let fail = |trace: RidgeTrace, message: String| SeekFailure {
        trajectory: trace.trajectory,
        message,
    };
    if let Err(e) = check_dims(field, start, d) {
        return Err(fail(trace, e.to_string()));
    }
    let rank = start.len() - d;
    let mut z = start.to_vec();
    for _ in 0..cfg.max_iter {
        if let Err(e) = field.validate(&z) {
            return Err(fail(trace, e.to_string()));
        }
        let step = match lsdrf_step(field, curv, &z, d) {
            Ok(s) => s,
            Err(e) => return Err(fail(trace, e.to_string())),
        };
        trace.max_projector_defect = trace.max_projector_defect.max(step.projector.defect(rank));
        if step.projector.is_degenerate() {
            trace.degenerate_steps += 1;
        }
        let guard = step
            .shift
            .f
            .iter()
            .enumerate()
            .any(|(j, f)| !f.is_finite() || f.abs() <= cfg.f_guard * field.guard_scale(j));
        let primary = if guard || !step.z.iter().all(|v| v.is_finite()) {
            None
        } else {
            Some(field.gain(&step.z, &z))
        };
        let use_fallback = primary.is_none_or(|g| !(g >= 0.0));
        let t = &mut trace.trajectory;
        let (next, gain) = if use_fallback {
            let dir = step.projector.apply(&field.gradient(&z));
            let ls = line_search(field, &z, &dir, &etas);
            if ls.stalled {
                t.gains.push(0.0);
                t.primary_gains.push(primary);
                t.fallback.push(true);
                t.iterates.push(z.clone());
                t.status = SeekStatus::Stalled;
                return Ok(trace);
            }
            (ls.z, ls.gain)
        } else {
            (step.z, primary.unwrap_or(0.0))
        };
        if !next.iter().all(|v| v.is_finite()) || !gain.is_finite() {
            return Err(fail(trace, "non-finite iterate".into()));
        }
        let moved = dist(&next, &z);
        t.iterates.push(next.clone());
        t.gains.push(gain);
        t.primary_gains.push(primary);
        t.fallback.push(use_fallback);
        z = next;
        if moved < cfg.tol_step || gain < cfg.tol_gain {
            t.status = SeekStatus::Converged;
            return Ok(trace);
        }
    }
    Ok(trace)
}

/// Ridge points reached from every start.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeResult {
    /// Final iterates of the non-failed starts, in start order.
    pub points: PointSet,
    /// Start index of each entry of `points`.
    pub indices: Vec<usize>,
    pub statuses: Vec<Option<SeekStatus>>,
    pub iterations: Vec<usize>,
    pub fallbacks: Vec<usize>,
    pub failures: Vec<(usize, String)>,
    /// Worst projector defect over all iterates of all starts.
    pub max_projector_defect: f64,
    pub degenerate_steps: usize,
}

/// Run [`trace_ridge`] from every start in parallel.
pub fn find_ridge<F, C>(starts: &PointSet, field: &F, curv: &C, config: &RidgeConfig) -> Result<RidgeResult>
where
    F: AscentField + ?Sized,
    C: CurvatureField + ?Sized,
{
    config.seek.validate()?;
    if starts.dim() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: starts.dim(),
        });
    }
    if config.ridge_dim >= starts.dim() {
        return Err(Error::invalid(format!(
            "ridge dimension {} must be below {}",
            config.ridge_dim,
            starts.dim()
        )));
    }
    if !starts.all_finite() {
        return Err(Error::invalid("start points must be finite"));
    }
    let runs: Vec<_> = (0..starts.len())
        .into_par_iter()
        .map(|i| trace_ridge(field, curv, starts.row(i), config))
        .collect();
    let mut out = RidgeResult {
        points: PointSet::empty(starts.dim()),
        indices: Vec::new(),
        statuses: Vec::with_capacity(starts.len()),
        iterations: Vec::with_capacity(starts.len()),
        fallbacks: Vec::with_capacity(starts.len()),
        failures: Vec::new(),
        max_projector_defect: 0.0,
        degenerate_steps: 0,
    };
    for (i, run) in runs.into_iter().enumerate() {
        match run {
            Ok(t) => {
                out.points.push(t.trajectory.end())?;
                out.indices.push(i);
                out.statuses.push(Some(t.trajectory.status));
                out.iterations.push(t.trajectory.steps());
                out.fallbacks.push(t.trajectory.fallback_count());
                out.max_projector_defect = out.max_projector_defect.max(t.max_projector_defect);
                out.degenerate_steps += t.degenerate_steps;
            }
            Err(f) => {
                log::warn!("start {i}: {}", f.message);
                out.statuses.push(None);
                out.iterations.push(f.trajectory.steps());
                out.fallbacks.push(f.trajectory.fallback_count());
                out.failures.push((i, f.message));
            }
        }
    }
    if out.degenerate_steps > 0 {
        log::warn!("{} steps had an eigengap below {EIGENGAP_WARN:e}", out.degenerate_steps);
    }
    Ok(out)
}
