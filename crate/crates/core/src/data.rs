//! Synthetic datasets, CSV ingestion and preprocessing.
//!
//! Every generated sample `i` draws from its own ChaCha8 stream
//! `(seed, i)`, so the first `k` rows of an `n`-row dataset equal a
//! `k`-row dataset for the blob and two-curve generators.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{nr_bandwidth, KdeModel};
use crate::error::{Error, Result};
use crate::points::{sq_dist, PointSet};

/// Identifier of the random generator, written into output artifacts.
pub const RNG_ALGORITHM: &str = "chacha8-stream-per-sample";

/// Points per truth-curve grid.
pub const TRUTH_GRID_SIZE: usize = 10_000;

const PADDING_STD: f64 = 0.1;

/// Generator for sample `i` of a dataset drawn with `seed`.
pub fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Seed of repetition `rep` under a master seed.
pub fn repetition_seed(master: u64, rep: usize) -> u64 {
    sample_rng(master, rep).random()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Known structure behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    /// Isotropic Gaussian mixture in the first two coordinates.
    Mixture {
        means: PointSet,
        weights: Vec<f64>,
        std: f64,
    },
    /// Dense samples of the generating curve(s), padded with zeros.
    Curve { name: String, grid: PointSet },
}

impl Truth {
    /// Modes of a mixture truth, padded to `dim` coordinates.
    ///
    /// For equal isotropic components the mixture-density fixed point
    /// `z = sum_k w_k N_k(z) mu_k / sum_k w_k N_k(z)` is iterated from each mean.
    pub fn modes(&self, dim: usize) -> Option<PointSet> {
        let Truth::Mixture { means, weights, std } = self else {
            return None;
        };
        let mut out = PointSet::empty(dim);
        for start in means.rows() {
            let mut z = start.to_vec();
            for _ in 0..10_000 {
                let mut num = vec![0.0; z.len()];
                let mut den = 0.0;
                for (w, m) in weights.iter().zip(means.rows()) {
                    let k = w * (-sq_dist(&z, m) / (2.0 * std * std)).exp();
                    den += k;
                    for (a, b) in num.iter_mut().zip(m) {
                        *a += k * b;
                    }
                }
                let next: Vec<f64> = num.iter().map(|v| v / den).collect();
                let moved = sq_dist(&next, &z).sqrt();
                z = next;
                if moved < 1e-14 {
                    break;
                }
            }
            z.resize(dim, 0.0);
            out.push(&z).expect("padded to dim");
        }
        Some(out)
    }

    pub fn grid(&self) -> Option<&PointSet> {
        match self {
            Truth::Curve { grid, .. } => Some(grid),
            Truth::Mixture { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: PointSet,
    pub labels: Option<Vec<i64>>,
    pub truth: Option<Truth>,
}

impl LabeledDataset {
    pub fn new(points: PointSet, labels: Option<Vec<i64>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::DimensionMismatch {
                    expected: points.len(),
                    got: l.len(),
                });
            }
        }
        Ok(Self {
            points,
            labels,
            truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }

    /// Rows at `indices`; truth is kept.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: self.points.select(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            truth: self.truth.clone(),
        }
    }
}

fn pad(rng: &mut ChaCha8Rng, row: &mut Vec<f64>, dim: usize, std: f64) {
    while row.len() < dim {
        row.push(std * normal(rng));
    }
}

fn check_generator_args(n: usize, dim: usize, min_n: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::invalid(format!("dimension must be at least 2, got {dim}")));
    }
    if n < min_n {
        return Err(Error::invalid(format!("need at least {min_n} samples, got {n}")));
    }
    Ok(())
}

/// Three-component mixture with means `(0,1), (-1,-1), (1,-1)`, covariance
/// `0.1 I` and weights `0.4, 0.3, 0.3`; extra coordinates are `N(0, 0.1^2)`.
pub fn gen_blobs(n: usize, dim: usize, seed: u64) -> Result<LabeledDataset> {
    check_generator_args(n, dim, 1)?;
    let means = [[0.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
    let weights = [0.4, 0.3, 0.3];
    let std = 0.1f64.sqrt();
    let mut points = PointSet::empty(dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, i);
        let u: f64 = rng.random();
        let k = if u < weights[0] {
            0
        } else if u < weights[0] + weights[1] {
            1
        } else {
            2
        };
        let mut row: Vec<f64> = means[k].iter().map(|m| m + std * normal(&mut rng)).collect();
        pad(&mut rng, &mut row, dim, PADDING_STD);
        points.push(&row)?;
        labels.push(k as i64);
    }
    Ok(LabeledDataset {
        points,
        labels: Some(labels),
        truth: Some(Truth::Mixture {
            means: PointSet::from_rows(&means)?,
            weights: weights.to_vec(),
            std,
        }),
    })
}

/// Center of the optional third population in [`gen_two_curves`].
pub const TWO_CURVES_BLOB_CENTER: [f64; 2] = [-1.0, -1.0];

/// Two interleaved arcs `(cos pi t, sin pi t)` and `(1 - cos pi t, -sin pi t)`
/// with `t ~ N(0.5, 0.15^2)` and noise covariance `0.1 I`.
///
/// Sample `i` belongs to class `i mod 2`, or `i mod 3` with the blob, so the
/// classes are equal up to a remainder that goes to the lower labels.
pub fn gen_two_curves(n: usize, dim: usize, with_blob: bool, seed: u64) -> Result<LabeledDataset> {
    gen_two_curves_scaled(n, dim, with_blob, 1.0, seed)
}

/// [`gen_two_curves`] with the curve noise multiplied by `noise_scale`.
pub fn gen_two_curves_scaled(n: usize, dim: usize, with_blob: bool, noise_scale: f64, seed: u64) -> Result<LabeledDataset> {
    check_generator_args(n, dim, 2)?;
    if !(noise_scale >= 0.0) {
        return Err(Error::invalid("noise scale must be non-negative"));
    }
    let noise = noise_scale * 0.1f64.sqrt();
    let classes = if with_blob { 3 } else { 2 };
    let mut points = PointSet::empty(dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, i);
        let class = i % classes;
        let mut row = match class {
            0 | 1 => {
                let t = 0.5 + 0.15 * normal(&mut rng);
                let (c, s) = ((PI * t).cos(), (PI * t).sin());
                let base = if class == 0 { [c, s] } else { [1.0 - c, -s] };
                base.iter().map(|b| b + noise * normal(&mut rng)).collect::<Vec<_>>()
            }
            _ => TWO_CURVES_BLOB_CENTER
                .iter()
                .map(|b| b + PADDING_STD * normal(&mut rng))
                .collect(),
        };
        pad(&mut rng, &mut row, dim, PADDING_STD);
        points.push(&row)?;
        labels.push(class as i64);
    }
    let mut grid = PointSet::empty(dim);
    for l in 0..TRUTH_GRID_SIZE {
        // Both arcs over t in [0, 1], interleaved.
        let t = (l / 2) as f64 / (TRUTH_GRID_SIZE / 2 - 1) as f64;
        let (c, s) = ((PI * t).cos(), (PI * t).sin());
        let mut row = if l % 2 == 0 { vec![c, s] } else { vec![1.0 - c, -s] };
        row.resize(dim, 0.0);
        grid.push(&row)?;
    }
    Ok(LabeledDataset {
        points,
        labels: Some(labels),
        truth: Some(Truth::Curve {
            name: "two_curves".into(),
            grid,
        }),
    })
}

/// Curve shapes for ridge experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveFamily {
    /// Unit circle, `t in [0, 2 pi)`.
    Circle,
    /// Archimedean spiral `0.3 t (cos t, sin t)`, `t in [pi/2, 3 pi]`.
    Spiral,
    /// `(t, sin 2t)`, `t in [-pi, pi]`.
    Sine,
    /// `(t, t^2)`, `t in [-1.5, 1.5]`.
    Quadratic,
}

impl CurveFamily {
    pub fn name(self) -> &'static str {
        match self {
            CurveFamily::Circle => "circle",
            CurveFamily::Spiral => "spiral",
            CurveFamily::Sine => "sine",
            CurveFamily::Quadratic => "quadratic",
        }
    }

    fn range(self) -> (f64, f64) {
        match self {
            CurveFamily::Circle => (0.0, 2.0 * PI),
            CurveFamily::Spiral => (0.5 * PI, 3.0 * PI),
            CurveFamily::Sine => (-PI, PI),
            CurveFamily::Quadratic => (-1.5, 1.5),
        }
    }

    fn closed(self) -> bool {
        self == CurveFamily::Circle
    }

    pub fn eval(self, t: f64) -> [f64; 2] {
        match self {
            CurveFamily::Circle => [t.cos(), t.sin()],
            CurveFamily::Spiral => [0.3 * t * t.cos(), 0.3 * t * t.sin()],
            CurveFamily::Sine => [t, (2.0 * t).sin()],
            CurveFamily::Quadratic => [t, t * t],
        }
    }

    /// `count` regularly spaced parameters over the family's range.
    pub fn parameters(self, count: usize) -> Vec<f64> {
        let (a, b) = self.range();
        let steps = if self.closed() {
            count
        } else {
            count.saturating_sub(1).max(1)
        };
        (0..count).map(|i| a + (b - a) * i as f64 / steps as f64).collect()
    }
}

impl FromStr for CurveFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(CurveFamily::Circle),
            "spiral" => Ok(CurveFamily::Spiral),
            "sine" => Ok(CurveFamily::Sine),
            "quadratic" => Ok(CurveFamily::Quadratic),
            _ => Err(Error::invalid(format!(
                "unknown curve '{s}' (expected circle, spiral, sine or quadratic)"
            ))),
        }
    }
}

/// `x_i = f(t_i) + noise` with `t_i` on a regular grid; padding coordinates
/// have the same noise level. The truth grid holds [`TRUTH_GRID_SIZE`] points.
pub fn gen_ridge_curve(name: &str, n: usize, dim: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    let family: CurveFamily = name.parse()?;
    check_generator_args(n, dim, 2)?;
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise std must be non-negative and finite"));
    }
    let mut points = PointSet::empty(dim);
    for (i, t) in family.parameters(n).into_iter().enumerate() {
        let mut rng = sample_rng(seed, i);
        let mut row: Vec<f64> = family.eval(t).iter().map(|v| v + noise_std * normal(&mut rng)).collect();
        pad(&mut rng, &mut row, dim, noise_std);
        points.push(&row)?;
    }
    let mut grid = PointSet::empty(dim);
    for t in family.parameters(TRUTH_GRID_SIZE) {
        let mut row = family.eval(t).to_vec();
        row.resize(dim, 0.0);
        grid.push(&row)?;
    }
    Ok(LabeledDataset {
        points,
        labels: None,
        truth: Some(Truth::Curve {
            name: family.name().into(),
            grid,
        }),
    })
}

/// Read a comma-separated file of numbers; labels, when present, are the
/// last column. Rows and columns in errors are 1-based.
pub fn load_csv(path: &Path, has_labels: bool, has_header: bool) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, has_labels, has_header)
}

pub fn read_csv<R: std::io::Read>(reader: R, has_labels: bool, has_header: bool) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1 + usize::from(has_header);
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Parse {
                    row,
                    column: rec.len().min(w) + 1,
                    message: format!("expected {w} fields, found {}", rec.len()),
                })
            }
            _ => {}
        }
        let nfeat = rec.len() - usize::from(has_labels);
        if nfeat == 0 {
            return Err(Error::Parse {
                row,
                column: 1,
                message: "no feature columns".into(),
            });
        }
        for (c, field) in rec.iter().enumerate() {
            let bad = |what: &str| Error::Parse {
                row,
                column: c + 1,
                message: format!("{what} '{field}'"),
            };
            if c < nfeat {
                let v: f64 = field.parse().map_err(|_| bad("not a number:"))?;
                if !v.is_finite() {
                    return Err(bad("non-finite value"));
                }
                data.push(v);
            } else {
                let l: f64 = field.parse().map_err(|_| bad("not a label:"))?;
                if l.fract() != 0.0 || !l.is_finite() {
                    return Err(bad("label is not an integer:"));
                }
                labels.push(l as i64);
            }
        }
    }
    let w = width.ok_or_else(|| Error::invalid("CSV contains no data rows"))?;
    let points = PointSet::new(w - usize::from(has_labels), data)?;
    LabeledDataset::new(points, has_labels.then_some(labels))
}

/// Per-coordinate shift and scale applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Centre each coordinate and scale it to unit standard deviation
/// (`1/n` normalization).
pub fn standardize(dataset: &LabeledDataset) -> Result<(LabeledDataset, Standardization)> {
    let p = &dataset.points;
    if p.len() < 2 {
        return Err(Error::invalid("need at least two rows to standardize"));
    }
    let n = p.len() as f64;
    let mut mean = Vec::with_capacity(p.dim());
    let mut std = Vec::with_capacity(p.dim());
    for j in 0..p.dim() {
        let col = p.column(j);
        let m = col.iter().sum::<f64>() / n;
        let s = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        if !(s > 0.0) {
            return Err(Error::invalid(format!("column {} has zero standard deviation", j + 1)));
        }
        mean.push(m);
        std.push(s);
    }
    let mut out = p.clone();
    for i in 0..out.len() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mean[j]) / std[j];
        }
    }
    Ok((
        LabeledDataset {
            points: out,
            labels: dataset.labels.clone(),
            truth: dataset.truth.clone(),
        },
        Standardization { mean, std },
    ))
}

/// Default relative density below which a row counts as clutter.
pub const CLUTTER_THRESHOLD: f64 = 1e-3;

/// Drop rows with `p^(x) / max_i p^(x_i) < threshold` under a KDE of the
/// data; `h` defaults to the normal-reference bandwidth. Returns the kept
/// dataset and the removed row indices.
pub fn filter_clutter(dataset: &LabeledDataset, h: Option<f64>, threshold: f64) -> Result<(LabeledDataset, Vec<usize>)> {
    let h = match h {
        Some(h) => h,
        None => nr_bandwidth(&dataset.points, false)?,
    };
    let kde = KdeModel::new(dataset.points.clone(), h)?;
    let logs: Vec<f64> = dataset
        .points
        .rows()
        .map(|r| kde.log_density(r))
        .collect::<Result<_>>()?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = threshold.ln();
    let (keep, drop): (Vec<usize>, Vec<usize>) = (0..logs.len()).partition(|&i| logs[i] - max >= cut);
    Ok((dataset.select(&keep), drop))
}
