//! Univariate Gaussian mixtures: density, CDF, sampling and the implicit
//! reparameterization partials of a sample with respect to the mixture
//! parameters.
//!
//! For a sample `z` with CDF level `u = F(z)`, holding `u` fixed and
//! differentiating `F(z; params) = u` gives `dz/dθ = -(∂F/∂θ) / q(z)`. For a
//! mixture this yields closed forms for every weight, mean and scale, so no
//! inverse CDF is needed during training.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};

/// Lower bound applied to every component standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Below this density a sample's pathwise gradients are reported as zero.
pub const DENSITY_FLOOR: f64 = 1e-30;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_log_pdf(z: f64, mean: f64, stddev: f64) -> f64 {
    let s = (z - mean) / stddev;
    -LN_SQRT_2PI - stddev.ln() - 0.5 * s * s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture1D {
    weights: Vec<f64>,
    means: Vec<f64>,
    stddevs: Vec<f64>,
}

/// Pathwise derivatives of a sample `z` with respect to the (unconstrained)
/// mixture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePathGradients {
    pub d_weights: Vec<f64>,
    pub d_means: Vec<f64>,
    pub d_stddevs: Vec<f64>,
    /// Set when `q(z)` fell below [`DENSITY_FLOOR`] and the gradients were zeroed.
    pub underflow: bool,
}

/// Log density at `z` together with its partial derivatives.
#[derive(Debug, Clone)]
pub struct LogProbPartials {
    pub log_prob: f64,
    /// Posterior component probabilities `π_k N_k(z) / q(z)`.
    pub responsibilities: Vec<f64>,
    pub d_z: f64,
    pub d_means: Vec<f64>,
    pub d_stddevs: Vec<f64>,
}

impl GaussianMixture1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stddevs: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidInput("mixture needs at least one component".into()));
        }
        if means.len() != k || stddevs.len() != k {
            return Err(Error::InvalidInput(format!(
                "component vectors disagree: {} weights, {} means, {} stddevs",
                k,
                means.len(),
                stddevs.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("means must be finite".into()));
        }
        if stddevs.iter().any(|s| !s.is_finite() || *s < SIGMA_FLOOR) {
            return Err(Error::InvalidInput(format!(
                "stddevs must be finite and at least {SIGMA_FLOOR}"
            )));
        }
        Ok(Self::from_parts_unchecked(weights, means, stddevs))
    }

    /// Builds a mixture whose invariants the caller has already established.
    pub(crate) fn from_parts_unchecked(weights: Vec<f64>, means: Vec<f64>, stddevs: Vec<f64>) -> Self {
        Self { weights, means, stddevs }
    }

    pub fn standard_normal() -> Self {
        Self::from_parts_unchecked(vec![1.0], vec![0.0], vec![1.0])
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stddevs(&self) -> &[f64] {
        &self.stddevs
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn log_prob(&self, z: f64) -> Result<f64> {
        check_finite(z)?;
        Ok(self.log_prob_unchecked(z))
    }

    pub(crate) fn log_prob_unchecked(&self, z: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut terms = [0.0f64; 16];
        let mut heap;
        let buf: &mut [f64] = if self.weights.len() <= terms.len() {
            &mut terms[..self.weights.len()]
        } else {
            heap = vec![0.0; self.weights.len()];
            &mut heap
        };
        for (k, t) in buf.iter_mut().enumerate() {
            *t = self.weights[k].ln() + normal_log_pdf(z, self.means[k], self.stddevs[k]);
            max = max.max(*t);
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + buf.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    pub fn cdf(&self, z: f64) -> Result<f64> {
        if z.is_nan() {
            return Err(Error::InvalidInput("cdf evaluated at NaN".into()));
        }
        Ok(self.cdf_unchecked(z))
    }

    fn cdf_unchecked(&self, z: f64) -> f64 {
        let s: f64 = (0..self.components())
            .map(|k| self.weights[k] * normal_cdf((z - self.means[k]) / self.stddevs[k]))
            .sum();
        s.clamp(0.0, 1.0)
    }

    /// Inverse CDF by bisection on [`cdf`](Self::cdf). Slow but exact to
    /// machine precision; intended for fixed-level resampling.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::InvalidInput(format!("quantile level {u} outside (0, 1)")));
        }
        let (mut lo, mut hi) = self.bracket();
        while self.cdf_unchecked(lo) > u {
            lo -= hi - lo;
        }
        while self.cdf_unchecked(hi) < u {
            hi += hi - lo;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf_unchecked(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    fn bracket(&self) -> (f64, f64) {
        let smax = self.stddevs.iter().cloned().fold(0.0, f64::max);
        let lo = self.means.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * smax;
        let hi = self.means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * smax;
        (lo, hi)
    }

    /// Draws a component with one uniform, then a Gaussian from it.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let e: f64 = rng.sample(StandardNormal);
        self.means[k] + self.stddevs[k] * e
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, SamplePathGradients) {
        let z = self.draw(rng);
        (z, self.path_gradients(z))
    }

    /// Implicit reparameterization partials evaluated at `z`.
    pub fn path_gradients(&self, z: f64) -> SamplePathGradients {
        let k = self.components();
        let mut g = SamplePathGradients {
            d_weights: vec![0.0; k],
            d_means: vec![0.0; k],
            d_stddevs: vec![0.0; k],
            underflow: false,
        };
        let log_q = self.log_prob_unchecked(z);
        if !(log_q.exp() >= DENSITY_FLOOR) {
            g.underflow = true;
            return g;
        }
        for i in 0..k {
            let s = (z - self.means[i]) / self.stddevs[i];
            let r = (self.weights[i].ln() + normal_log_pdf(z, self.means[i], self.stddevs[i]) - log_q).exp();
            g.d_weights[i] = -normal_cdf(s) / log_q.exp();
            g.d_means[i] = r;
            g.d_stddevs[i] = r * s;
        }
        g
    }

    /// Log density and its derivatives with respect to `z`, the means and the
    /// stddevs, plus the component responsibilities.
    pub fn log_prob_partials(&self, z: f64) -> LogProbPartials {
        let k = self.components();
        let log_prob = self.log_prob_unchecked(z);
        let mut out = LogProbPartials {
            log_prob,
            responsibilities: vec![0.0; k],
            d_z: 0.0,
            d_means: vec![0.0; k],
            d_stddevs: vec![0.0; k],
        };
        for i in 0..k {
            let sd = self.stddevs[i];
            let s = (z - self.means[i]) / sd;
            let r = (self.weights[i].ln() + normal_log_pdf(z, self.means[i], sd) - log_prob).exp();
            out.responsibilities[i] = r;
            out.d_means[i] = r * s / sd;
            out.d_stddevs[i] = r * (s * s - 1.0) / sd;
            out.d_z -= r * s / sd;
        }
        out
    }
}

fn check_finite(z: f64) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite evaluation point {z}")))
    }
}
