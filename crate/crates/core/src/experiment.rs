//! Seeded experiment runs: dataset construction, repetitions, metric
//! aggregation and the CSV/JSON artifacts written for each command.
//!
//! Repetition `r` under master seed `s` uses seed `repetition_seed(s, r)`,
//! from which the data, center and fold seeds are derived on separate
//! streams. Any single repetition can be replayed from its recorded seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{lscv_bandwidth, ms_cluster, nr_bandwidth, KdeModel};
use crate::data::{
    filter_clutter, gen_blobs, gen_ridge_curve, gen_two_curves, load_csv, repetition_seed, standardize,
    LabeledDataset, Truth, RNG_ALGORITHM,
};
use crate::error::{Error, Result};
use crate::lsddr::{
    default_center_count, fit_gradient, fit_hessian, subsample_centers, Aggregate, CvReport, CvSettings,
    GradientModel, GradientOptions, GridSpec, HessianModel, HessianOptions, RatioModelDoc, DEFAULT_FOLDS,
};
use crate::metrics::{adjusted_rand_index, hausdorff, mean_log_kde, ridge_error};
use crate::mode_seeking::{cluster, default_merge_radius, ClusterResult, SeekConfig, UpdateRule};
use crate::points::PointSet;
use crate::ridge::{find_ridge, RidgeConfig, RidgeResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// LSDDR mode seeking, fixed-point updates.
    Lsldgc,
    /// LSDDR mode seeking, coordinate-wise updates.
    LsldgcCw,
    /// Mean shift with an LSCV bandwidth.
    MsLs,
    /// Mean shift with the normal-reference bandwidth.
    MsNr,
    /// Subspace-constrained mean shift with an LSCV bandwidth.
    ScmsLs,
    /// LSDDR ridge finding.
    Lsdrf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lsldgc => "lsldgc",
            Method::LsldgcCw => "lsldgc_cw",
            Method::MsLs => "ms_ls",
            Method::MsNr => "ms_nr",
            Method::ScmsLs => "scms_ls",
            Method::Lsdrf => "lsdrf",
        }
    }

    pub fn is_ridge(self) -> bool {
        matches!(self, Method::ScmsLs | Method::Lsdrf)
    }

    pub fn uses_lsddr(self) -> bool {
        matches!(self, Method::Lsldgc | Method::LsldgcCw | Method::Lsdrf)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown method '{s}'")))
    }
}

fn default_noise() -> f64 {
    0.15
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        n: usize,
        dim: usize,
    },
    TwoCurves {
        n: usize,
        dim: usize,
        #[serde(default)]
        blob: bool,
    },
    RidgeCurve {
        curve: String,
        n: usize,
        dim: usize,
        #[serde(default = "default_noise")]
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_labels: bool,
        #[serde(default)]
        has_header: bool,
    },
}

impl DatasetSpec {
    fn size_mut(&mut self) -> Option<(&mut usize, &mut usize)> {
        match self {
            DatasetSpec::Blobs { n, dim } | DatasetSpec::TwoCurves { n, dim, .. } | DatasetSpec::RidgeCurve { n, dim, .. } => {
                Some((n, dim))
            }
            DatasetSpec::Csv { .. } => None,
        }
    }

    pub fn build(&self, seed: u64) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::Blobs { n, dim } => gen_blobs(*n, *dim, seed),
            DatasetSpec::TwoCurves { n, dim, blob } => gen_two_curves(*n, *dim, *blob, seed),
            DatasetSpec::RidgeCurve { curve, n, dim, noise_std } => gen_ridge_curve(curve, *n, *dim, *noise_std, seed),
            DatasetSpec::Csv {
                path,
                has_labels,
                has_header,
            } => load_csv(path, *has_labels, *has_header),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    N,
    Dim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

/// Optional replacements for the default iteration settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeekOverrides {
    pub max_iter: Option<usize>,
    pub tol_step: Option<f64>,
    pub tol_gain: Option<f64>,
    pub f_guard: Option<f64>,
    pub merge_radius: Option<f64>,
}

/// Optional replacements for the model-selection grids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridOverrides {
    pub clustering: Option<GridSpec>,
    pub ridge: Option<GridSpec>,
    pub hessian: Option<GridSpec>,
    pub lscv: Option<Vec<f64>>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Lsldgc]
}

fn one() -> usize {
    1
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub dataset: DatasetSpec,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Intrinsic ridge dimension for ridge methods.
    #[serde(default)]
    pub ridge_dim: Option<usize>,
    /// Number of kernel centers; `min(n, 100)` when unset.
    #[serde(default)]
    pub centers: Option<usize>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub aggregate: Aggregate,
    #[serde(default)]
    pub grids: GridOverrides,
    #[serde(default)]
    pub seek: SeekOverrides,
    /// Use the standard deviation instead of the variance in the NR rule.
    #[serde(default)]
    pub nr_sqrt: bool,
    /// Constrain LSDDR coefficients to be non-negative.
    #[serde(default)]
    pub nonneg_beta: bool,
    #[serde(default)]
    pub standardize: bool,
    /// Relative-density threshold of the clutter filter; off when unset.
    #[serde(default)]
    pub clutter_threshold: Option<f64>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| cfg_err("<root>", e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(cfg_err("methods", "at least one method is required"));
        }
        if self.repetitions == 0 {
            return Err(cfg_err("repetitions", "must be at least 1"));
        }
        if self.folds < 2 {
            return Err(cfg_err("folds", "must be at least 2"));
        }
        if self.centers == Some(0) {
            return Err(cfg_err("centers", "must be positive"));
        }
        match &self.dataset {
            DatasetSpec::Blobs { n, dim } | DatasetSpec::TwoCurves { n, dim, .. } => {
                if *n < 2 {
                    return Err(cfg_err("dataset.n", "must be at least 2"));
                }
                if *dim < 2 {
                    return Err(cfg_err("dataset.dim", "must be at least 2"));
                }
            }
            DatasetSpec::RidgeCurve {
                curve,
                n,
                dim,
                noise_std,
            } => {
                curve
                    .parse::<crate::data::CurveFamily>()
                    .map_err(|e| cfg_err("dataset.curve", e.to_string()))?;
                if *n < 2 {
                    return Err(cfg_err("dataset.n", "must be at least 2"));
                }
                if *dim < 2 {
                    return Err(cfg_err("dataset.dim", "must be at least 2"));
                }
                if !(*noise_std >= 0.0) {
                    return Err(cfg_err("dataset.noise_std", "must be non-negative"));
                }
            }
            DatasetSpec::Csv { .. } => {}
        }
        for (i, m) in self.methods.iter().enumerate() {
            if m.is_ridge() && self.ridge_dim.is_none() {
                return Err(cfg_err(&format!("methods[{i}]"), format!("{} needs ridge_dim", m.name())));
            }
        }
        if let Some(d) = self.ridge_dim {
            if let Some((_, dim)) = self.dataset.clone().size_mut() {
                if d >= *dim {
                    return Err(cfg_err("ridge_dim", format!("must be below the data dimension {dim}")));
                }
            }
        }
        if let Some(t) = self.clutter_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(cfg_err("clutter_threshold", "must lie in (0, 1)"));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(cfg_err("sweep.values", "must not be empty"));
            }
            if matches!(self.dataset, DatasetSpec::Csv { .. }) {
                return Err(cfg_err("sweep", "cannot sweep a CSV dataset"));
            }
            for (i, &v) in sweep.values.iter().enumerate() {
                let bad = match sweep.axis {
                    SweepAxis::N => v < 2,
                    SweepAxis::Dim => v < 2 || self.ridge_dim.is_some_and(|d| d >= v),
                };
                if bad {
                    return Err(cfg_err(&format!("sweep.values[{i}]"), format!("invalid value {v}")));
                }
            }
        }
        let s = &self.seek;
        if s.max_iter == Some(0) {
            return Err(cfg_err("seek.max_iter", "must be at least 1"));
        }
        for (name, v) in [
            ("seek.tol_step", s.tol_step),
            ("seek.tol_gain", s.tol_gain),
            ("seek.f_guard", s.f_guard),
            ("seek.merge_radius", s.merge_radius),
        ] {
            if v.is_some_and(|v| !(v > 0.0)) {
                return Err(cfg_err(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    fn cv(&self, seed: u64) -> CvSettings {
        CvSettings {
            folds: self.folds,
            aggregate: self.aggregate,
            seed,
        }
    }
}

/// Independent seeds used inside one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionSeeds {
    pub repetition: u64,
    pub data: u64,
    pub centers: u64,
    pub folds: u64,
}

impl RepetitionSeeds {
    pub fn from_repetition(seed: u64) -> Self {
        let derive = |purpose: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::MAX - purpose);
            rng.random()
        };
        Self {
            repetition: seed,
            data: derive(0),
            centers: derive(1),
            folds: derive(2),
        }
    }

    pub fn for_repetition(master: u64, rep: usize) -> Self {
        Self::from_repetition(repetition_seed(master, rep))
    }
}

/// Provenance written into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub rng: String,
    pub repetition_seeds: Vec<u64>,
}

impl Provenance {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            tool: "ridgecrest".into(),
            version: TOOL_VERSION.into(),
            config_hash: config.hash(),
            master_seed: config.seed,
            rng: RNG_ALGORITHM.into(),
            repetition_seeds: (0..config.repetitions).map(|r| repetition_seed(config.seed, r)).collect(),
        }
    }

    fn csv_comment(&self) -> String {
        format!(
            "# {} {} config_hash={} master_seed={} rng={}\n",
            self.tool, self.version, self.config_hash, self.master_seed, self.rng
        )
    }
}

/// Dataset of one repetition after preprocessing.
pub fn prepare_dataset(config: &ExperimentConfig, spec: &DatasetSpec, seeds: &RepetitionSeeds) -> Result<LabeledDataset> {
    let mut ds = spec.build(seeds.data)?;
    if config.standardize {
        ds = standardize(&ds)?.0;
    }
    if let Some(t) = config.clutter_threshold {
        let (kept, removed) = filter_clutter(&ds, None, t)?;
        if !removed.is_empty() {
            log::info!("clutter filter removed {} rows", removed.len());
        }
        ds = kept;
    }
    Ok(ds)
}

fn seek_config(config: &ExperimentConfig, points: &PointSet, rule: UpdateRule) -> SeekConfig {
    let mut s = SeekConfig::for_data(points).with_rule(rule);
    let o = &config.seek;
    if let Some(v) = o.max_iter {
        s.max_iter = v;
    }
    if let Some(v) = o.tol_step {
        s.tol_step = v;
    }
    if let Some(v) = o.tol_gain {
        s.tol_gain = v;
    }
    if let Some(v) = o.f_guard {
        s.f_guard = v;
    }
    s
}

fn centers_for(config: &ExperimentConfig, points: &PointSet, seeds: &RepetitionSeeds) -> Result<PointSet> {
    let b = config.centers.unwrap_or_else(|| default_center_count(points.len())).min(points.len());
    subsample_centers(points, b, seeds.centers)
}

/// Gradient model with the clustering or ridge grid.
pub fn fit_gradient_for(
    config: &ExperimentConfig,
    points: &PointSet,
    seeds: &RepetitionSeeds,
    ridge: bool,
) -> Result<GradientModel> {
    let centers = centers_for(config, points, seeds)?;
    let grid = if ridge {
        config.grids.ridge.clone().unwrap_or_else(GridSpec::ridge)
    } else {
        config.grids.clustering.clone().unwrap_or_else(GridSpec::clustering)
    };
    let opts = GradientOptions {
        grid,
        cv: config.cv(seeds.folds),
        simplified: true,
        nonneg_beta: config.nonneg_beta && !ridge,
    };
    fit_gradient(points, &centers, &opts)
}

pub fn fit_hessian_for(config: &ExperimentConfig, points: &PointSet, seeds: &RepetitionSeeds) -> Result<HessianModel> {
    let centers = centers_for(config, points, seeds)?;
    let opts = HessianOptions {
        grid: config.grids.hessian.clone().unwrap_or_else(GridSpec::ridge),
        cv: config.cv(seeds.folds),
    };
    fit_hessian(points, &centers, &opts)
}

fn lscv_h(config: &ExperimentConfig, points: &PointSet) -> Result<f64> {
    Ok(lscv_bandwidth(points, config.grids.lscv.as_deref())?.h)
}

/// Result of one method on one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: BTreeMap<String, f64>,
    pub labels: Option<Vec<i64>>,
    pub points: Option<PointSet>,
}

fn cluster_metrics(ds: &LabeledDataset, res: &ClusterResult) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    if let Some(truth) = &ds.labels {
        m.insert("ari".into(), adjusted_rand_index(truth, &res.labels)?);
    }
    m.insert("n_clusters".into(), res.num_clusters() as f64);
    m.insert("failed_points".into(), res.failures.len() as f64);
    m.insert("fallback_steps".into(), res.fallbacks.iter().sum::<usize>() as f64);
    if let Some(modes) = ds.truth.as_ref().and_then(|t| t.modes(ds.dim())) {
        if !res.modes.is_empty() {
            m.insert("mode_hausdorff".into(), hausdorff(&res.modes, &modes)?);
        }
    }
    Ok(m)
}

fn ridge_metrics(config: &ExperimentConfig, ds: &LabeledDataset, res: &RidgeResult) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    m.insert("failed_points".into(), res.failures.len() as f64);
    m.insert("max_projector_defect".into(), res.max_projector_defect);
    if res.points.is_empty() {
        return Err(Error::numeric("every ridge trajectory failed"));
    }
    if let Some(Truth::Curve { grid, .. }) = &ds.truth {
        m.insert("ridge_error".into(), ridge_error(&res.points, grid)?);
    }
    let h = lscv_h(config, &ds.points)?;
    let l = mean_log_kde(&res.points, &ds.points, h)?;
    m.insert("mean_log_kde".into(), l.value);
    m.insert("log_kde_excluded".into(), l.excluded as f64);
    Ok(m)
}

/// Run `method` on one prepared dataset.
pub fn run_method(config: &ExperimentConfig, method: Method, ds: &LabeledDataset, seeds: &RepetitionSeeds) -> Result<RunOutput> {
    let x = &ds.points;
    let merge = config.seek.merge_radius;
    match method {
        Method::Lsldgc | Method::LsldgcCw => {
            let model = fit_gradient_for(config, x, seeds, false)?;
            let rule = if method == Method::Lsldgc {
                UpdateRule::FixedPoint
            } else {
                UpdateRule::CoordinateWise
            };
            let res = cluster(
                x,
                &model,
                &seek_config(config, x, rule),
                merge.unwrap_or_else(|| default_merge_radius(&model)),
                false,
            )?;
            Ok(RunOutput {
                metrics: cluster_metrics(ds, &res)?,
                labels: Some(res.labels),
                points: None,
            })
        }
        Method::MsLs | Method::MsNr => {
            let h = if method == Method::MsLs {
                lscv_h(config, x)?
            } else {
                nr_bandwidth(x, config.nr_sqrt)?
            };
            let res = ms_cluster(x, h, &seek_config(config, x, UpdateRule::FixedPoint), merge)?;
            let mut metrics = cluster_metrics(ds, &res)?;
            metrics.insert("bandwidth".into(), h);
            Ok(RunOutput {
                metrics,
                labels: Some(res.labels),
                points: None,
            })
        }
        Method::Lsdrf | Method::ScmsLs => {
            let d = config.ridge_dim.ok_or_else(|| cfg_err("ridge_dim", "required for ridge methods"))?;
            let mut rc = RidgeConfig::for_data(x, d);
            rc.seek = seek_config(config, x, UpdateRule::FixedPoint);
            let res = if method == Method::Lsdrf {
                let g = fit_gradient_for(config, x, seeds, true)?;
                let h = fit_hessian_for(config, x, seeds)?;
                find_ridge(x, &g, &h, &rc)?
            } else {
                let kde = KdeModel::new(x.clone(), lscv_h(config, x)?)?;
                find_ridge(x, &kde, &kde, &rc)?
            };
            Ok(RunOutput {
                metrics: ridge_metrics(config, ds, &res)?,
                labels: None,
                points: Some(res.points),
            })
        }
    }
}

/// One (method, repetition) cell of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub repetition: usize,
    pub seeds: RepetitionSeeds,
    /// Sweep value, when sweeping.
    pub axis_value: Option<usize>,
    pub outcome: std::result::Result<RunOutput, String>,
}

/// Summary of one metric across repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { values, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub method: Method,
    pub repetition: usize,
    pub seed: u64,
    pub axis_value: Option<usize>,
    pub error: String,
}

/// Everything an experiment produced, in deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub provenance: Provenance,
    pub cells: Vec<Cell>,
}

impl ExperimentOutput {
    pub fn failures(&self) -> Vec<Failure> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.outcome.as_ref().err().map(|e| Failure {
                    method: c.method,
                    repetition: c.repetition,
                    seed: c.seeds.repetition,
                    axis_value: c.axis_value,
                    error: e.clone(),
                })
            })
            .collect()
    }

    pub fn succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_ok())
    }

    /// `method -> metric -> summary` over the successful repetitions.
    /// Sweep cells are keyed `method@value`.
    pub fn summaries(&self) -> BTreeMap<String, BTreeMap<String, MetricSummary>> {
        let mut acc: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for c in &self.cells {
            if let Ok(out) = &c.outcome {
                let key = match c.axis_value {
                    Some(v) => format!("{}@{v}", c.method.name()),
                    None => c.method.name().to_string(),
                };
                let entry = acc.entry(key).or_default();
                for (k, v) in &out.metrics {
                    entry.entry(k.clone()).or_default().push(*v);
                }
            }
        }
        acc.into_iter()
            .map(|(m, metrics)| {
                (
                    m,
                    metrics.into_iter().map(|(k, v)| (k, MetricSummary::from_values(v))).collect(),
                )
            })
            .collect()
    }
}

fn sweep_points(config: &ExperimentConfig) -> Vec<(Option<usize>, DatasetSpec)> {
    match &config.sweep {
        None => vec![(None, config.dataset.clone())],
        Some(sweep) => sweep
            .values
            .iter()
            .map(|&v| {
                let mut spec = config.dataset.clone();
                if let Some((n, dim)) = spec.size_mut() {
                    match sweep.axis {
                        SweepAxis::N => *n = v,
                        SweepAxis::Dim => *dim = v,
                    }
                }
                (Some(v), spec)
            })
            .collect(),
    }
}

/// Run every (sweep value, repetition, method) cell on `jobs` threads.
///
/// Repetitions are independent and share seeds across methods and sweep
/// values, so results can be compared pairwise.
pub fn run_experiment(config: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentOutput> {
    config.validate()?;
    let provenance = Provenance::new(config);
    let mut tasks = Vec::new();
    for (axis_value, spec) in sweep_points(config) {
        for rep in 0..config.repetitions {
            tasks.push((axis_value, spec.clone(), rep));
        }
    }
    let work = || -> Vec<Cell> {
        tasks
            .par_iter()
            .flat_map_iter(|(axis_value, spec, rep)| {
                let seeds = RepetitionSeeds::for_repetition(config.seed, *rep);
                let ds = prepare_dataset(config, spec, &seeds);
                config.methods.iter().map(move |&method| {
                    let outcome = match &ds {
                        Ok(ds) => run_method(config, method, ds, &seeds).map_err(|e| e.to_string()),
                        Err(e) => Err(format!("dataset: {e}")),
                    };
                    if let Err(e) = &outcome {
                        log::warn!("{} repetition {rep}: {e}", method.name());
                    }
                    Cell {
                        method,
                        repetition: *rep,
                        seeds,
                        axis_value: *axis_value,
                        outcome,
                    }
                })
                .collect::<Vec<_>>()
            })
            .collect()
    };
    let cells = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(ExperimentOutput { provenance, cells })
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v:?}")
}

/// Per-sample labels: `method,repetition,seed,index,label`.
pub fn labels_csv(out: &ExperimentOutput) -> String {
    let mut s = out.provenance.csv_comment();
    s.push_str("method,repetition,seed,index,label\n");
    for c in &out.cells {
        if let Ok(RunOutput { labels: Some(labels), .. }) = &c.outcome {
            for (i, l) in labels.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{}", c.method.name(), c.repetition, c.seeds.repetition, i, l);
            }
        }
    }
    s
}

/// Ridge points: `method,repetition,seed,index,x1..xD`.
pub fn ridge_csv(out: &ExperimentOutput) -> String {
    let dim = out
        .cells
        .iter()
        .find_map(|c| c.outcome.as_ref().ok().and_then(|o| o.points.as_ref()).map(PointSet::dim))
        .unwrap_or(0);
    let mut s = out.provenance.csv_comment();
    s.push_str("method,repetition,seed,index");
    for j in 1..=dim {
        let _ = write!(s, ",x{j}");
    }
    s.push('\n');
    for c in &out.cells {
        if let Ok(RunOutput { points: Some(p), .. }) = &c.outcome {
            for (i, r) in p.rows().enumerate() {
                let _ = write!(s, "{},{},{},{}", c.method.name(), c.repetition, c.seeds.repetition, i);
                for v in r {
                    let _ = write!(s, ",{}", fmt_f64(*v));
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Sweep table with one row per (method, axis value, repetition) and one
/// column per metric; failed cells have `status=failed` and empty metrics.
pub fn sweep_csv(config: &ExperimentConfig, out: &ExperimentOutput) -> String {
    let axis = match config.sweep.as_ref().map(|s| s.axis) {
        Some(SweepAxis::N) => "n",
        Some(SweepAxis::Dim) => "dim",
        None => "none",
    };
    let names: std::collections::BTreeSet<&String> = out
        .cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok())
        .flat_map(|o| o.metrics.keys())
        .collect();
    let mut s = out.provenance.csv_comment();
    s.push_str("method,axis,axis_value,repetition,seed,status");
    for n in &names {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for c in &out.cells {
        let _ = write!(
            s,
            "{},{axis},{},{},{},{}",
            c.method.name(),
            c.axis_value.map(|v| v.to_string()).unwrap_or_default(),
            c.repetition,
            c.seeds.repetition,
            if c.outcome.is_ok() { "ok" } else { "failed" }
        );
        for n in &names {
            s.push(',');
            if let Some(v) = c.outcome.as_ref().ok().and_then(|o| o.metrics.get(*n)) {
                s.push_str(&fmt_f64(*v));
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    provenance: &'a Provenance,
    methods: BTreeMap<String, BTreeMap<String, MetricSummary>>,
    failures: Vec<Failure>,
}

pub fn metrics_json(out: &ExperimentOutput) -> String {
    let doc = MetricsDoc {
        provenance: &out.provenance,
        methods: out.summaries(),
        failures: out.failures(),
    };
    serde_json::to_string_pretty(&doc).expect("metrics serialize")
}

#[derive(Serialize)]
struct FailureManifest<'a> {
    provenance: &'a Provenance,
    failures: Vec<Failure>,
}

/// Write `contents` to `dir/name` through a temporary file in `dir`.
pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.flush()?;
    let path = dir.join(name);
    tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
    Ok(path)
}

/// Write `failures.json` when any cell failed; returns its path.
pub fn write_failures(dir: &Path, out: &ExperimentOutput) -> Result<Option<PathBuf>> {
    let failures = out.failures();
    if failures.is_empty() {
        return Ok(None);
    }
    let doc = FailureManifest {
        provenance: &out.provenance,
        failures,
    };
    Ok(Some(write_atomic(dir, "failures.json", &serde_json::to_string_pretty(&doc)?)?))
}

/// Labels or ridge points plus metrics for a cluster or ridge run.
pub fn write_run_outputs(dir: &Path, out: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if out.cells.iter().any(|c| !c.method.is_ridge()) {
        written.push(write_atomic(dir, "labels.csv", &labels_csv(out))?);
    }
    if out.cells.iter().any(|c| c.method.is_ridge()) {
        written.push(write_atomic(dir, "ridge_points.csv", &ridge_csv(out))?);
    }
    written.push(write_atomic(dir, "metrics.json", &metrics_json(out))?);
    written.extend(write_failures(dir, out)?);
    Ok(written)
}

#[derive(Serialize)]
struct ModelFile<'a> {
    provenance: &'a Provenance,
    repetition: usize,
    seeds: RepetitionSeeds,
    kind: &'static str,
    dim: usize,
    components: Vec<RatioModelDoc>,
    cv: &'a [CvReport],
}

/// Fit and serialize the models each method needs, per repetition.
pub fn fit_models(config: &ExperimentConfig, dir: &Path, jobs: Option<usize>) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let provenance = Provenance::new(config);
    let ridge = config.methods.iter().any(|m| m.is_ridge());
    let work = || -> Result<Vec<(String, String)>> {
        let per_rep: Vec<Result<Vec<(String, String)>>> = (0..config.repetitions)
            .into_par_iter()
            .map(|rep| {
                let seeds = RepetitionSeeds::for_repetition(config.seed, rep);
                let ds = prepare_dataset(config, &config.dataset, &seeds)?;
                let mut files = Vec::new();
                let g = fit_gradient_for(config, &ds.points, &seeds, ridge)?;
                let doc = ModelFile {
                    provenance: &provenance,
                    repetition: rep,
                    seeds,
                    kind: "gradient",
                    dim: g.dim(),
                    components: g.components().iter().map(|c| c.to_document()).collect(),
                    cv: g.reports(),
                };
                files.push((format!("gradient_rep{rep:03}.json"), serde_json::to_string_pretty(&doc)?));
                if ridge {
                    let h = fit_hessian_for(config, &ds.points, &seeds)?;
                    let doc = ModelFile {
                        provenance: &provenance,
                        repetition: rep,
                        seeds,
                        kind: "hessian",
                        dim: h.dim(),
                        components: h.components().iter().map(|c| c.to_document()).collect(),
                        cv: h.reports(),
                    };
                    files.push((format!("hessian_rep{rep:03}.json"), serde_json::to_string_pretty(&doc)?));
                }
                Ok(files)
            })
            .collect();
        let mut all = Vec::new();
        for r in per_rep {
            all.extend(r?);
        }
        Ok(all)
    };
    let files = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    files.iter().map(|(name, text)| write_atomic(dir, name, text)).collect()
}

/// Metric computed by the `metrics` command from files on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileMetric {
    Ari,
    RidgeError,
    Hausdorff,
    MeanLogKde,
}

impl std::str::FromStr for FileMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::invalid(format!("unknown metric '{s}'")))
    }
}

struct Table {
    header: Option<Vec<String>>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            row: 0,
            column: 0,
            message: format!("{}: {e}", path.display()),
        })?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i + 1,
            column: 0,
            message: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
    }
    // A first row with any non-numeric field is a header.
    let header = match rows.first() {
        Some(r) if r.iter().any(|f| f.parse::<f64>().is_err()) => Some(rows.remove(0)),
        _ => None,
    };
    Ok(Table { header, rows })
}

fn parse_field<T: std::str::FromStr>(rows: &[Vec<String>], r: usize, c: usize, offset: usize) -> Result<T> {
    let field = rows[r].get(c).ok_or_else(|| Error::Parse {
        row: r + 1 + offset,
        column: c + 1,
        message: "missing field".into(),
    })?;
    field.parse().map_err(|_| Error::Parse {
        row: r + 1 + offset,
        column: c + 1,
        message: format!("cannot parse '{field}'"),
    })
}

/// Labels from the `label` column, or the last column without a header.
pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let t = read_table(path)?;
    let offset = usize::from(t.header.is_some());
    let col = match &t.header {
        Some(h) => h.iter().position(|c| c == "label"),
        None => None,
    };
    (0..t.rows.len())
        .map(|r| {
            let c = col.unwrap_or(t.rows[r].len().saturating_sub(1));
            parse_field(&t.rows, r, c, offset)
        })
        .collect()
}

/// Coordinates from the `x1..xD` columns, or every column without a header.
pub fn read_points(path: &Path) -> Result<PointSet> {
    let t = read_table(path)?;
    let offset = usize::from(t.header.is_some());
    let cols: Vec<usize> = match &t.header {
        Some(h) => h
            .iter()
            .enumerate()
            .filter(|(_, c)| c.len() > 1 && c.starts_with('x') && c[1..].parse::<usize>().is_ok())
            .map(|(i, _)| i)
            .collect(),
        None => (0..t.rows.first().map_or(0, Vec::len)).collect(),
    };
    if cols.is_empty() {
        return Err(Error::invalid(format!("{}: no coordinate columns", path.display())));
    }
    let mut out = PointSet::empty(cols.len());
    for r in 0..t.rows.len() {
        let row = cols
            .iter()
            .map(|&c| parse_field::<f64>(&t.rows, r, c, offset))
            .collect::<Result<Vec<_>>>()?;
        out.push(&row)?;
    }
    Ok(out)
}

/// Compare a prediction file against a reference file.
///
/// `bandwidth` is used by `mean_log_kde`; the LSCV choice on the reference
/// set is used when it is absent.
pub fn metric_from_files(metric: FileMetric, pred: &Path, reference: &Path, bandwidth: Option<f64>) -> Result<f64> {
    match metric {
        FileMetric::Ari => adjusted_rand_index(&read_labels(pred)?, &read_labels(reference)?),
        FileMetric::RidgeError => ridge_error(&read_points(pred)?, &read_points(reference)?),
        FileMetric::Hausdorff => hausdorff(&read_points(pred)?, &read_points(reference)?),
        FileMetric::MeanLogKde => {
            let r = read_points(reference)?;
            let h = match bandwidth {
                Some(h) => h,
                None => lscv_bandwidth(&r, None)?.h,
            };
            Ok(mean_log_kde(&read_points(pred)?, &r, h)?.value)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"methods": ["lsldgc", "ms_nr"], "dataset": {"kind": "blobs", "n": 60, "dim": 2},
                "repetitions": 2, "seed": 7}"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_hash() {
        let c = blobs_config();
        assert_eq!(c.folds, 5);
        assert!(!c.nonneg_beta);
        assert_eq!(c.hash(), blobs_config().hash());
        let mut d = c.clone();
        d.seed = 8;
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn validation_reports_field_paths() {
        let mut c = blobs_config();
        c.repetitions = 0;
        match c.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "repetitions"),
            other => panic!("{other:?}"),
        }
        let mut c = blobs_config();
        c.methods = vec![Method::Lsdrf];
        match c.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "methods[0]"),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_json(r#"{"dataset": {"kind": "blobs", "n": 5, "dim": 2}, "bogus": 1}"#).is_err());
    }

    #[test]
    fn repetition_seeds_are_distinct() {
        let a = RepetitionSeeds::for_repetition(1, 0);
        let b = RepetitionSeeds::for_repetition(1, 1);
        assert_ne!(a.repetition, b.repetition);
        let all = [a.data, a.centers, a.folds];
        assert!(all[0] != all[1] && all[1] != all[2] && all[0] != all[2]);
    }

    #[test]
    fn summary_statistics() {
        let s = MetricSummary::from_values(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(MetricSummary::from_values(vec![4.0]).std, 0.0);
    }

    #[test]
    fn small_experiment_runs_paired_methods() {
        let c = blobs_config();
        let out = run_experiment(&c, Some(2)).unwrap();
        assert!(out.succeeded());
        assert_eq!(out.cells.len(), 4);
        let s = out.summaries();
        assert_eq!(s["lsldgc"]["ari"].values.len(), 2);
        assert_eq!(s["ms_nr"]["ari"].values.len(), 2);
        let csv = labels_csv(&out);
        assert_eq!(csv.lines().count(), 2 + 4 * 60);
        assert!(csv.starts_with("# ridgecrest"));
    }

    #[test]
    fn artifact_files_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let c = blobs_config();
        let out = run_experiment(&c, Some(1)).unwrap();
        write_run_outputs(dir.path(), &out).unwrap();
        let labels = read_labels(&dir.path().join("labels.csv")).unwrap();
        assert_eq!(labels.len(), 4 * 60);
        let plain = dir.path().join("p.csv");
        std::fs::write(&plain, "0,0\n3,4\n").unwrap();
        let p = read_points(&plain).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(metric_from_files(FileMetric::Hausdorff, &plain, &plain, None).unwrap(), 0.0);
        assert_eq!("ridge-error".parse::<FileMetric>().unwrap(), FileMetric::RidgeError);
    }
}
