//! Coordinate swaps between a feature vector and its knockoff, and the
//! relaxed-Bernoulli sampler that learns which coordinates to swap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Which coordinates to swap. `bits` drive every forward computation;
/// `soft` is the relaxed value the straight-through estimator differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapIndicator {
    pub bits: Vec<bool>,
    pub soft: Vec<f64>,
}

impl SwapIndicator {
    pub fn none(d: usize) -> Self {
        Self {
            bits: vec![false; d],
            soft: vec![0.0; d],
        }
    }

    pub fn all(d: usize) -> Self {
        Self {
            bits: vec![true; d],
            soft: vec![1.0; d],
        }
    }

    /// Hard indicator for the given 0-based coordinates.
    pub fn from_indices(d: usize, indices: &[usize]) -> Result<Self> {
        let mut h = Self::none(d);
        for &j in indices {
            if j >= d {
                return Err(Error::InvalidInput(format!("swap index {j} out of range for d = {d}")));
            }
            h.bits[j] = true;
            h.soft[j] = 1.0;
        }
        Ok(h)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(j, _)| j).collect()
    }
}

/// `[x, x̃]_swap(H)`: exchanges `x_j` and `x̃_j` for every `j ∈ H`.
pub fn apply_swap(x: &[f64], xt: &[f64], h: &SwapIndicator) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(x.len(), xt.len())?;
    check_len(x.len(), h.len())?;
    let mut u = x.to_vec();
    let mut ut = xt.to_vec();
    for (j, &b) in h.bits.iter().enumerate() {
        if b {
            u[j] = xt[j];
            ut[j] = x[j];
        }
    }
    Ok((u, ut))
}

/// Log density of the swapped distribution at `(x, x̃)`: the original
/// density evaluated at the swapped point. Swaps are measure-preserving
/// permutations, so no Jacobian term appears.
pub fn swap_log_prob<F>(joint_logprob: F, x: &[f64], xt: &[f64], h: &SwapIndicator) -> Result<f64>
where
    F: FnOnce(&[f64], &[f64]) -> Result<f64>,
{
    let (u, ut) = apply_swap(x, xt, h)?;
    joint_logprob(&u, &ut)
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn standard_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval keeps both logs finite
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Binary-concrete swap sampler with one logit per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapSampler {
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl SwapSampler {
    /// Logits start at zero: every coordinate is swapped with probability ½.
    pub fn new(d: usize, temperature: f64) -> Result<Self> {
        Self::from_logits(vec![0.0; d], temperature)
    }

    pub fn from_logits(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidInput("swap logits must be finite".into()));
        }
        Ok(Self { logits, temperature })
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    /// Marginal probability that coordinate `j` is swapped.
    pub fn swap_probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|l| logistic(*l)).collect()
    }

    /// Draws an indicator and `∂soft_j/∂β_j` for every coordinate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (SwapIndicator, Vec<f64>) {
        let noise: Vec<(f64, f64)> = (0..self.dim())
            .map(|_| (standard_gumbel(rng), standard_gumbel(rng)))
            .collect();
        self.sample_with_noise(&noise)
    }

    /// Relaxation for given Gumbel pairs `(g¹_j, g²_j)`.
    pub fn sample_with_noise(&self, noise: &[(f64, f64)]) -> (SwapIndicator, Vec<f64>) {
        let mut h = SwapIndicator::none(self.dim());
        let mut grad = vec![0.0; self.dim()];
        for (j, (g1, g2)) in noise.iter().enumerate() {
            let s = logistic((self.logits[j] + g1 - g2) / self.temperature);
            h.soft[j] = s;
            h.bits[j] = s >= 0.5;
            grad[j] = s * (1.0 - s) / self.temperature;
        }
        (h, grad)
    }
}

pub fn sample_swap<R: Rng + ?Sized>(sampler: &SwapSampler, rng: &mut R) -> (SwapIndicator, Vec<f64>) {
    sampler.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::normal_log_pdf;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_three_coordinate_example() {
        let x = [1.0, 2.0, 3.0];
        let xt = [-1.0, -2.0, -3.0];
        let h = SwapIndicator::from_indices(3, &[0, 2]).unwrap();
        let (u, ut) = apply_swap(&x, &xt, &h).unwrap();
        assert_eq!(u, vec![-1.0, 2.0, -3.0]);
        assert_eq!(ut, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn empty_swap_is_identity_and_lengths_checked() {
        let (u, ut) = apply_swap(&[1.0, 2.0], &[3.0, 4.0], &SwapIndicator::none(2)).unwrap();
        assert_eq!((u, ut), (vec![1.0, 2.0], vec![3.0, 4.0]));
        assert!(apply_swap(&[1.0], &[1.0, 2.0], &SwapIndicator::none(1)).is_err());
        assert!(SwapIndicator::from_indices(2, &[2]).is_err());
    }

    #[test]
    fn swap_log_prob_hand_computed() {
        let scorer = |a: &[f64], b: &[f64]| Ok(normal_log_pdf(a[0], 0.0, 1.0) + normal_log_pdf(b[0], 5.0, 1.0));
        let v = swap_log_prob(scorer, &[0.0], &[5.0], &SwapIndicator::all(1)).unwrap();
        assert!((v + 26.837_877_066_409_345).abs() < 1e-12);
        let v0 = swap_log_prob(scorer, &[0.0], &[5.0], &SwapIndicator::none(1)).unwrap();
        assert!((v0 - scorer(&[0.0], &[5.0]).unwrap()).abs() == 0.0);
    }

    #[test]
    fn exchangeable_scorer_ignores_swap() {
        let scorer = |a: &[f64], b: &[f64]| -> Result<f64> {
            Ok(a.iter().zip(b).map(|(p, q)| p * p + q * q + p * q).sum())
        };
        let x = [0.3, -1.0, 2.0];
        let xt = [1.1, 0.4, -0.7];
        let base = swap_log_prob(scorer, &x, &xt, &SwapIndicator::none(3)).unwrap();
        for mask in 0..8usize {
            let idx: Vec<usize> = (0..3).filter(|j| mask >> j & 1 == 1).collect();
            let h = SwapIndicator::from_indices(3, &idx).unwrap();
            assert!((swap_log_prob(scorer, &x, &xt, &h).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn large_logit_almost_always_swaps() {
        let s = SwapSampler::from_logits(vec![20.0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..10_000).filter(|_| s.sample(&mut rng).0.bits[0]).count();
        assert!(hits as f64 / 1e4 >= 0.999);
    }

    #[test]
    fn zero_logit_is_fair() {
        let s = SwapSampler::new(1, DEFAULT_TEMPERATURE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits = (0..10_000).filter(|_| s.sample(&mut rng).0.bits[0]).count();
        let rate = hits as f64 / 1e4;
        assert!((0.48..=0.52).contains(&rate), "{rate}");
    }

    #[test]
    fn zero_logits_are_exchangeable_across_coordinates() {
        // Pearson chi-square on per-coordinate swap counts, 4 degrees of freedom.
        let d = 5;
        let s = SwapSampler::new(d, DEFAULT_TEMPERATURE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = vec![0usize; d];
        for _ in 0..10_000 {
            let (h, _) = s.sample(&mut rng);
            for j in 0..d {
                counts[j] += h.bits[j] as usize;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / d as f64;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square(4)
        assert!(chi2 < 13.277, "chi2 = {chi2}");
    }

    #[test]
    fn soft_values_harden_as_temperature_vanishes() {
        let noise = [(0.3, -0.8), (-1.2, 0.1), (0.05, 0.0)];
        let logits = vec![0.2, 0.4, -0.01];
        for t in [1e-2, 1e-4, 1e-6] {
            let s = SwapSampler::from_logits(logits.clone(), t).unwrap();
            let (h, _) = s.sample_with_noise(&noise);
            for j in 0..3 {
                let hard = if h.bits[j] { 1.0 } else { 0.0 };
                let gap = (h.soft[j] - hard).abs();
                assert!(gap < 0.5, "{gap}");
                if t <= 1e-4 {
                    assert!(gap < 1e-3, "t = {t}: gap {gap}");
                }
            }
        }
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let noise = [(0.3, -0.8), (-1.2, 0.1)];
        let s = SwapSampler::from_logits(vec![0.2, -0.4], 0.5).unwrap();
        let (h, g) = s.sample_with_noise(&noise);
        let eps = 1e-6;
        for j in 0..2 {
            let mut l = s.logits.clone();
            l[j] += eps;
            let up = SwapSampler::from_logits(l.clone(), 0.5).unwrap().sample_with_noise(&noise).0.soft[j];
            l[j] -= 2.0 * eps;
            let down = SwapSampler::from_logits(l, 0.5).unwrap().sample_with_noise(&noise).0.soft[j];
            assert!(((up - down) / (2.0 * eps) - g[j]).abs() < 1e-8);
            assert!(h.soft[j] > 0.0 && h.soft[j] < 1.0);
        }
    }

    proptest! {
        #[test]
        fn swap_is_an_involution(x in prop::collection::vec(-10.0f64..10.0, 1..8), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xt: Vec<f64> = x.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
            let (h, _) = SwapSampler::new(x.len(), 0.5).unwrap().sample(&mut rng);
            let (u, ut) = apply_swap(&x, &xt, &h).unwrap();
            let (a, b) = apply_swap(&u, &ut, &h).unwrap();
            prop_assert_eq!(a, x);
            prop_assert_eq!(b, xt);
        }

        #[test]
        fn bits_are_binary_and_match_soft(seed in 0u64..1000, l in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = SwapSampler::from_logits(vec![l; 4], 0.5).unwrap();
            let (h, g) = s.sample(&mut rng);
            for j in 0..4 {
                prop_assert_eq!(h.bits[j], h.soft[j] >= 0.5);
                prop_assert!(g[j] >= 0.0);
            }
        }
    }
}
