//! Gaussian kernel, its radial profile, and closed-form mixed partial
//! derivatives.
//!
//! The kernel `k(x, c) = exp(-|x - c|^2 / (2 sigma^2))` depends on `u = x - c`
//! only, and factorizes over coordinates. A derivative of order `a_i` in
//! `x_i` and `b_i` in `c_i` is therefore a product of one-dimensional terms
//!
//! ```text
//! d^(a+b) / dx^a dc^b  exp(-u^2 / 2s^2) = (-1)^b (-1/s)^(a+b) He_(a+b)(u/s) exp(-u^2 / 2s^2)
//! ```
//!
//! where `He_m` is the probabilists' Hermite polynomial.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest derivative order accepted on each kernel argument.
pub const MAX_ARG_ORDER: u32 = 2;

/// Multi-index `j = (j_1, ..., j_D)` selecting a partial derivative.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("multi-index must have at least one entry"));
        }
        let order: u32 = entries.iter().sum();
        if order > MAX_ARG_ORDER {
            return Err(Error::invalid(format!(
                "multi-index order {order} exceeds supported maximum {MAX_ARG_ORDER}"
            )));
        }
        Ok(Self(entries))
    }

    pub fn zero(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    /// First-order index `e_i`.
    pub fn unit(dim: usize, i: usize) -> Self {
        let mut e = vec![0; dim];
        e[i] = 1;
        Self(e)
    }

    /// Second-order index `e_i + e_j` (`2 e_i` on the diagonal).
    pub fn pair(dim: usize, i: usize, j: usize) -> Self {
        let mut e = vec![0; dim];
        e[i] += 1;
        e[j] += 1;
        Self(e)
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `(-1)^{|j|}`.
    pub fn sign(&self) -> f64 {
        if self.order() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Coordinates with a non-zero entry.
    pub fn support(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.0.iter().copied().enumerate().filter(|&(_, m)| m > 0)
    }
}

/// Radial profile `phi` of a kernel `k(x, c) = phi(|x - c|^2 / (2 sigma^2))`.
///
/// Mode seeking with non-negative coefficients needs `phi` non-negative,
/// non-increasing, convex and differentiable.
pub trait Profile: Send + Sync {
    fn phi(&self, t: f64) -> f64;

    /// `varphi(t) = -d phi / dt`.
    fn varphi(&self, t: f64) -> f64;
}

/// `phi(t) = exp(-t)`, which yields the Gaussian kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GaussianProfile;

impl Profile for GaussianProfile {
    #[inline]
    fn phi(&self, t: f64) -> f64 {
        (-t).exp()
    }

    #[inline]
    fn varphi(&self, t: f64) -> f64 {
        (-t).exp()
    }
}

pub fn profile_phi(t: f64) -> f64 {
    GaussianProfile.phi(t)
}

pub fn profile_varphi(t: f64) -> f64 {
    GaussianProfile.varphi(t)
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "bandwidth must be positive and finite, got {sigma}"
        )));
    }
    Ok(())
}

fn check_dims(x: &[f64], c: &[f64]) -> Result<()> {
    if x.len() != c.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: c.len(),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn gaussian_from_sq(sq: f64, sigma: f64) -> f64 {
    (-sq / (2.0 * sigma * sigma)).exp()
}

pub fn kernel_value(x: &[f64], c: &[f64], sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_dims(x, c)?;
    Ok(gaussian_from_sq(crate::points::sq_dist(x, c), sigma))
}

/// Probabilists' Hermite polynomial `He_m(t)`.
#[inline]
pub(crate) fn hermite(m: u32, t: f64) -> f64 {
    match m {
        0 => 1.0,
        1 => t,
        2 => t * t - 1.0,
        3 => t * (t * t - 3.0),
        4 => {
            let t2 = t * t;
            t2 * t2 - 6.0 * t2 + 3.0
        }
        _ => {
            let (mut prev, mut cur) = (1.0, t);
            for k in 1..m {
                let next = t * cur - k as f64 * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// One-dimensional factor of the mixed partial, excluding the Gaussian itself.
#[inline]
pub(crate) fn axis_factor(u: f64, sigma: f64, a: u32, b: u32) -> f64 {
    let m = a + b;
    if m == 0 {
        return 1.0;
    }
    let mut scale = (-1.0 / sigma).powi(m as i32);
    if b % 2 == 1 {
        scale = -scale;
    }
    scale * hermite(m, u / sigma)
}

/// Mixed partial without argument validation; `jx`/`jc` entries are assumed
/// to index the same coordinates as `x` and `c`.
#[inline]
pub(crate) fn partial_unchecked(x: &[f64], c: &[f64], sigma: f64, jx: &[u32], jc: &[u32]) -> f64 {
    let k = gaussian_from_sq(crate::points::sq_dist(x, c), sigma);
    let mut f = 1.0;
    for i in 0..x.len() {
        let (a, b) = (jx[i], jc[i]);
        if a + b > 0 {
            f *= axis_factor(x[i] - c[i], sigma, a, b);
        }
    }
    f * k
}

/// Partial of `k(x, c)` taken `jx` times in `x` and `jc` times in the
/// center argument.
pub fn kernel_partial(
    x: &[f64],
    c: &[f64],
    sigma: f64,
    jx: &MultiIndex,
    jc: &MultiIndex,
) -> Result<f64> {
    check_sigma(sigma)?;
    check_dims(x, c)?;
    for j in [jx, jc] {
        if j.dim() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: j.dim(),
            });
        }
        if j.order() > MAX_ARG_ORDER {
            return Err(Error::invalid(format!(
                "derivative order {} exceeds supported maximum {MAX_ARG_ORDER}",
                j.order()
            )));
        }
    }
    Ok(partial_unchecked(x, c, sigma, jx.entries(), jc.entries()))
}
