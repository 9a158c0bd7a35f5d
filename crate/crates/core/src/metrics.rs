//! Evaluation metrics for clusterings and ridge estimates.

use std::collections::HashMap;

use crate::baselines::{KdeModel, MIN_LOG_DENSITY};
use crate::error::{Error, Result};
use crate::points::{dist, sq_dist, PointSet};

fn choose2(k: u64) -> f64 {
    (k * k.saturating_sub(1)) as f64 / 2.0
}

/// Hubert-Arabie adjusted Rand index.
///
/// Two trivial partitions that coincide (all in one group, or all
/// singletons) have no chance correction and score 1.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    let n = a.len() as u64;
    let mut table: HashMap<(i64, i64), u64> = HashMap::new();
    let mut rows: HashMap<i64, u64> = HashMap::new();
    let mut cols: HashMap<i64, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

fn nearest(x: &[f64], set: &PointSet) -> f64 {
    set.rows().map(|r| sq_dist(x, r)).fold(f64::INFINITY, f64::min).sqrt()
}

fn check_pair(a: &PointSet, b: &PointSet) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("point sets must be non-empty"));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Mean distance from each output point to its nearest truth-grid point.
pub fn ridge_error(outputs: &PointSet, truth: &PointSet) -> Result<f64> {
    check_pair(outputs, truth)?;
    let total: f64 = outputs.rows().map(|r| nearest(r, truth)).sum();
    Ok(total / outputs.len() as f64)
}

/// `max(sup_a inf_b |a - b|, sup_b inf_a |a - b|)`.
pub fn hausdorff(a: &PointSet, b: &PointSet) -> Result<f64> {
    check_pair(a, b)?;
    let directed = |x: &PointSet, y: &PointSet| x.rows().map(|r| nearest(r, y)).fold(0.0, f64::max);
    Ok(directed(a, b).max(directed(b, a)))
}

/// Mean log KDE density over points, excluding underflowed ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanLogKde {
    pub value: f64,
    pub used: usize,
    pub excluded: usize,
}

/// `(1/n) sum_i log p^_KDE(y_i)` with the KDE centred at `reference`.
pub fn mean_log_kde(points: &PointSet, reference: &PointSet, h: f64) -> Result<MeanLogKde> {
    check_pair(points, reference)?;
    let kde = KdeModel::new(reference.clone(), h)?;
    let mut sum = 0.0;
    let mut used = 0;
    for r in points.rows() {
        let lp = kde.log_density(r)?;
        if lp >= MIN_LOG_DENSITY {
            sum += lp;
            used += 1;
        }
    }
    let excluded = points.len() - used;
    if used == 0 {
        return Err(Error::numeric("density underflow at every point"));
    }
    Ok(MeanLogKde {
        value: sum / used as f64,
        used,
        excluded,
    })
}

/// Mean distance of each point to the closest of `targets`, e.g. recovered
/// modes against the true ones.
pub fn mean_nearest_distance(points: &PointSet, targets: &PointSet) -> Result<f64> {
    check_pair(points, targets)?;
    Ok(points.rows().map(|r| targets.rows().map(|t| dist(r, t)).fold(f64::INFINITY, f64::min)).sum::<f64>()
        / points.len() as f64)
}
