//! Two-stage knockoff training.
//!
//! Stage 1 fits the covariate joint by maximum likelihood
//! ([`fit_joint`](crate::autoregressive::fit_joint)). Stage 2 fits the
//! knockoff conditional against an adversarial swap sampler: per mini-batch
//! one swap `H` is drawn, the knockoff parameters take a descent step on
//! `A − B` and the swap logits take an ascent step, where
//!
//! ```text
//! A = mean[ log q_joint(x) + (1 + λ) log q_knockoff(x̃ | x) ]
//! B = mean[ log q_joint(u) + log q_knockoff(ũ | u) ],   [u, ũ] = [x, x̃]_swap(H)
//! ```
//!
//! Gradients with respect to the knockoff parameters flow through the
//! sampled knockoffs (implicit reparameterization along the whole chain),
//! including the joint model's density at the swapped point.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoregressive::{data_support, fit_joint, AutoregressiveModel, JointFitReport, ModelGradient};
use crate::data::{DataMatrix, Standardizer};
use crate::error::{check_len, Error, Result};
use crate::gmm::GaussianMixture1D;
use crate::mdn::{DEFAULT_COMPONENTS, DEFAULT_HIDDEN};
use crate::optim::{AdamState, EarlyStopping};
use crate::seeding::child_rng;
use crate::swap::{apply_swap, SwapIndicator, SwapSampler, DEFAULT_TEMPERATURE};

/// Objective magnitude treated as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Rows per work unit in batch evaluations. Fixed so the reduction order,
/// and therefore every floating-point result, is independent of thread count.
const ROW_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Entropy-regularization weight.
    pub lambda: f64,
    pub lr_phi: f64,
    pub lr_beta: f64,
    pub lr_joint: f64,
    pub max_epochs_joint: usize,
    pub max_epochs_knockoff: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub temperature: f64,
    pub seed: u64,
    pub components: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr_phi: 1e-3,
            lr_beta: 1e-2,
            lr_joint: 5e-4,
            max_epochs_joint: 50,
            max_epochs_knockoff: 250,
            batch_size: 64,
            patience: 10,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            components: DEFAULT_COMPONENTS,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [("lr_phi", self.lr_phi), ("lr_beta", self.lr_beta), ("lr_joint", self.lr_joint)];
        for (name, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {r}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidInput("temperature must be positive".into()));
        }
        if self.batch_size == 0 || self.components == 0 || self.hidden == 0 {
            return Err(Error::InvalidInput(
                "batch_size, components and hidden must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub a: f64,
    pub b: f64,
    pub objective: f64,
    pub epoch: usize,
}

impl ObjectiveReport {
    fn new(a: f64, b: f64, epoch: usize) -> Self {
        Self {
            a,
            b,
            objective: a - b,
            epoch,
        }
    }
}

/// Source of the randomness used to draw knockoffs for each batch row.
#[derive(Debug, Clone, Copy)]
pub enum KnockoffNoise<'a> {
    /// One seed per row; coordinates are drawn by component then Gaussian.
    Seeds(&'a [u64]),
    /// Fixed CDF levels per row and coordinate, inverted exactly. Used for
    /// common-random-number finite-difference checks.
    Levels(&'a [Vec<f64>]),
}

impl KnockoffNoise<'_> {
    fn len(&self) -> usize {
        match self {
            KnockoffNoise::Seeds(s) => s.len(),
            KnockoffNoise::Levels(l) => l.len(),
        }
    }

    fn sample(&self, phi: &AutoregressiveModel, row: usize, x: &[f64]) -> Result<crate::autoregressive::ChainSample> {
        match self {
            KnockoffNoise::Seeds(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s[row]);
                phi.sample_chain_with(x, |_, m: &GaussianMixture1D| m.draw(&mut rng))
            }
            KnockoffNoise::Levels(l) => {
                let levels = &l[row];
                let mut err = None;
                let chain = phi.sample_chain_with(x, |j, m| match m.quantile(levels[j]) {
                    Ok(z) => z,
                    Err(e) => {
                        err = Some(e);
                        0.0
                    }
                })?;
                match err {
                    Some(e) => Err(e),
                    None => Ok(chain),
                }
            }
        }
    }
}

/// Result of one batch evaluation of the objective.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub report: ObjectiveReport,
    /// `∇_φ (A − B)`.
    pub grads_phi: ModelGradient,
    /// `∇_β (A − B)` through the straight-through relaxation.
    pub grad_beta: Vec<f64>,
    /// `∂(A − B)/∂b_j` at the hard swap bits.
    pub d_objective_d_bits: Vec<f64>,
}

struct Partial {
    a: f64,
    b: f64,
    grads: ModelGradient,
    d_bits: Vec<f64>,
}

/// Evaluates the batch objective and its gradients. `swap_grad[j]` is
/// `∂soft_j/∂β_j` from the sampler draw that produced `h`.
#[allow(clippy::too_many_arguments)]
pub fn ddlk_objective_batch(
    theta: &AutoregressiveModel,
    phi: &AutoregressiveModel,
    batch: &DataMatrix,
    h: &SwapIndicator,
    swap_grad: &[f64],
    lambda: f64,
    noise: KnockoffNoise<'_>,
) -> Result<BatchOutcome> {
    let d = phi.dim();
    check_len(d, batch.cols())?;
    check_len(d, theta.dim())?;
    check_len(d, phi.base_dim())?;
    check_len(d, h.len())?;
    check_len(d, swap_grad.len())?;
    check_len(batch.rows(), noise.len())?;
    let joint_x: Vec<f64> = batch.iter_rows().map(|r| theta.log_prob_unchecked(&[], r)).collect();
    let rows: Vec<&[f64]> = batch.iter_rows().collect();
    batch_objective(theta, phi, &rows, &joint_x, h, swap_grad, lambda, noise)
}

#[allow(clippy::too_many_arguments)]
fn batch_objective(
    theta: &AutoregressiveModel,
    phi: &AutoregressiveModel,
    rows: &[&[f64]],
    joint_x: &[f64],
    h: &SwapIndicator,
    swap_grad: &[f64],
    lambda: f64,
    noise: KnockoffNoise<'_>,
) -> Result<BatchOutcome> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let d = phi.dim();
    let chunks: Vec<Result<Partial>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(ROW_CHUNK)
        .map(|idx| {
            let mut part = Partial {
                a: 0.0,
                b: 0.0,
                grads: phi.zero_gradient(),
                d_bits: vec![0.0; d],
            };
            for &i in idx {
                let chain = noise.sample(phi, i, rows[i])?;
                row_objective(theta, phi, rows[i], joint_x[i], &chain, h, lambda, &mut part)?;
            }
            Ok(part)
        })
        .collect();

    let mut total = Partial {
        a: 0.0,
        b: 0.0,
        grads: phi.zero_gradient(),
        d_bits: vec![0.0; d],
    };
    for c in chunks {
        let c = c?;
        total.a += c.a;
        total.b += c.b;
        for (t, g) in total.grads.iter_mut().zip(&c.grads) {
            for (x, y) in t.iter_mut().zip(g) {
                *x += y;
            }
        }
        for (t, g) in total.d_bits.iter_mut().zip(&c.d_bits) {
            *t += g;
        }
    }
    let inv = 1.0 / n as f64;
    total.grads.iter_mut().flatten().for_each(|g| *g *= inv);
    let d_bits: Vec<f64> = total.d_bits.iter().map(|g| g * inv).collect();
    let grad_beta = d_bits.iter().zip(swap_grad).map(|(g, s)| g * s).collect();
    Ok(BatchOutcome {
        report: ObjectiveReport::new(total.a * inv, total.b * inv, 0),
        grads_phi: total.grads,
        grad_beta,
        d_objective_d_bits: d_bits,
    })
}

#[allow(clippy::too_many_arguments)]
fn row_objective(
    theta: &AutoregressiveModel,
    phi: &AutoregressiveModel,
    x: &[f64],
    joint_x: f64,
    chain: &crate::autoregressive::ChainSample,
    h: &SwapIndicator,
    lambda: f64,
    acc: &mut Partial,
) -> Result<()> {
    let d = x.len();
    let xt = chain.values();
    let weight = 1.0 + lambda;
    let a = joint_x + weight * chain.log_prob();
    let (u, ut) = apply_swap(x, xt, h)?;
    let (joint_u, _, d_u_joint) = theta.log_prob_backward(&[], &u, 1.0, None);
    // weight −1: these are gradients of −log q_knockoff(ũ | u)
    let (knock_u, d_u_knock, d_ut_knock) = phi.log_prob_backward(&u, &ut, -1.0, Some(&mut acc.grads));
    let b = joint_u + knock_u;
    let mut adjoint = vec![0.0; d];
    for j in 0..d {
        let gu = d_u_knock[j] - d_u_joint[j];
        let gut = d_ut_knock[j];
        adjoint[j] = if h.bits[j] { gu } else { gut };
        acc.d_bits[j] += (gu - gut) * (xt[j] - x[j]);
    }
    phi.backward_chain(chain, &adjoint, weight, Some(&mut acc.grads));
    acc.a += a;
    acc.b += b;
    Ok(())
}

/// Swap-KL estimate with the entropy bonus removed, on a fixed set of
/// knockoff draws and Gumbel noise so successive epochs are comparable.
struct ValidationProbe<'a> {
    rows: Vec<&'a [f64]>,
    joint_x: Vec<f64>,
    seeds: Vec<u64>,
    gumbel: Vec<Vec<(f64, f64)>>,
}

impl<'a> ValidationProbe<'a> {
    fn new<R: Rng + ?Sized>(theta: &AutoregressiveModel, val: &'a DataMatrix, rng: &mut R) -> Self {
        let rows: Vec<&[f64]> = val.iter_rows().collect();
        let joint_x = rows.iter().map(|r| theta.log_prob_unchecked(&[], r)).collect();
        let seeds = (0..rows.len()).map(|_| rng.random()).collect();
        let gumbel = rows
            .iter()
            .map(|r| {
                (0..r.len())
                    .map(|_| {
                        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                        let u2: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                        (-(-u1.ln()).ln(), -(-u2.ln()).ln())
                    })
                    .collect()
            })
            .collect();
        Self {
            rows,
            joint_x,
            seeds,
            gumbel,
        }
    }

    fn evaluate(&self, theta: &AutoregressiveModel, phi: &AutoregressiveModel, sampler: &SwapSampler) -> Result<f64> {
        let noise = KnockoffNoise::Seeds(&self.seeds);
        let terms: Vec<Result<f64>> = (0..self.rows.len())
            .into_par_iter()
            .map(|i| {
                let x = self.rows[i];
                let chain = noise.sample(phi, i, x)?;
                let (h, _) = sampler.sample_with_noise(&self.gumbel[i]);
                let (u, ut) = apply_swap(x, chain.values(), &h)?;
                Ok(self.joint_x[i] + chain.log_prob()
                    - theta.log_prob_unchecked(&[], &u)
                    - phi.log_prob_unchecked(&u, &ut))
            })
            .collect();
        let mut sum = 0.0;
        for t in terms {
            sum += t?;
        }
        Ok(sum / self.rows.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mini-batch averages over the epoch.
    pub train: ObjectiveReport,
    pub val_objective: f64,
    pub swap_probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoffHistory {
    pub initial_val_objective: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_objective: f64,
}

#[derive(Debug, Clone)]
pub struct KnockoffFit {
    pub model: AutoregressiveModel,
    pub sampler: SwapSampler,
    pub history: KnockoffHistory,
}

/// Stage 2. `theta` is never modified. Returns the knockoff model and swap
/// sampler from the epoch with the lowest validation objective.
pub fn fit_knockoff<R: Rng + ?Sized>(
    theta: &AutoregressiveModel,
    train: &DataMatrix,
    val: &DataMatrix,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<KnockoffFit> {
    config.validate()?;
    let d = train.cols();
    check_len(theta.dim(), d)?;
    check_len(d, val.cols())?;
    if theta.base_dim() != 0 {
        return Err(Error::InvalidInput("joint model must be unconditional".into()));
    }
    if train.rows() < 2 || val.rows() == 0 {
        return Err(Error::InvalidInput("knockoff training needs train and validation rows".into()));
    }
    let mut phi = AutoregressiveModel::init(d, data_support(train), config.components, config.hidden, rng)?;
    let mut sampler = SwapSampler::new(d, config.temperature)?;
    let mut adams: Vec<AdamState> = phi.conditionals().iter().map(|c| AdamState::new(c.param_count())).collect();
    let mut beta_adam = AdamState::new(d);

    let rows: Vec<&[f64]> = train.iter_rows().collect();
    let joint_train: Vec<f64> = rows.par_iter().map(|r| theta.log_prob_unchecked(&[], r)).collect();
    let probe = ValidationProbe::new(theta, val, rng);
    let initial_val_objective = probe.evaluate(theta, &phi, &sampler)?;

    let mut history = KnockoffHistory {
        initial_val_objective,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_objective: f64::INFINITY,
    };
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = (phi.clone(), sampler.clone());
    let mut order: Vec<usize> = (0..rows.len()).collect();

    for epoch in 0..config.max_epochs_knockoff {
        order.shuffle(rng);
        let (mut sum_a, mut sum_b) = (0.0, 0.0);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let (h, swap_grad) = sampler.sample(rng);
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let batch_rows: Vec<&[f64]> = batch.iter().map(|&i| rows[i]).collect();
            let batch_joint: Vec<f64> = batch.iter().map(|&i| joint_train[i]).collect();
            let out = batch_objective(
                theta,
                &phi,
                &batch_rows,
                &batch_joint,
                &h,
                &swap_grad,
                config.lambda,
                KnockoffNoise::Seeds(&seeds),
            )?;
            let obj = out.report.objective;
            if !obj.is_finite() || out.grads_phi.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteObjective { epoch, batch: bi });
            }
            if obj.abs() > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    epoch,
                    value: obj,
                    history: history.epochs.iter().map(|e| e.val_objective).collect(),
                });
            }
            for ((net, adam), g) in phi.conditionals_mut().iter_mut().zip(&mut adams).zip(&out.grads_phi) {
                adam.step(net.params_mut(), g, config.lr_phi);
            }
            beta_adam.ascend(&mut sampler.logits, &out.grad_beta, config.lr_beta);
            sum_a += out.report.a * batch.len() as f64;
            sum_b += out.report.b * batch.len() as f64;
        }
        let n = rows.len() as f64;
        let val_objective = probe.evaluate(theta, &phi, &sampler)?;
        if !val_objective.is_finite() {
            return Err(Error::NonFiniteObjective { epoch, batch: usize::MAX });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train: ObjectiveReport::new(sum_a / n, sum_b / n, epoch),
            val_objective,
            swap_probabilities: sampler.swap_probabilities(),
        });
        if stopper.observe(epoch, val_objective) {
            best = (phi.clone(), sampler.clone());
        }
        if stopper.should_stop() {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    history.best_val_objective = stopper.best();
    Ok(KnockoffFit {
        model: best.0,
        sampler: best.1,
        history,
    })
}

/// Trains only the swap logits against a frozen knockoff model for
/// `epochs` passes over `train`, starting from `sampler`.
pub fn fit_swap_adversary<R: Rng + ?Sized>(
    theta: &AutoregressiveModel,
    phi: &AutoregressiveModel,
    train: &DataMatrix,
    mut sampler: SwapSampler,
    config: &TrainConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<SwapSampler> {
    config.validate()?;
    check_len(phi.dim(), train.cols())?;
    check_len(phi.dim(), sampler.dim())?;
    let rows: Vec<&[f64]> = train.iter_rows().collect();
    let joint: Vec<f64> = rows.iter().map(|r| theta.log_prob_unchecked(&[], r)).collect();
    let mut adam = AdamState::new(sampler.dim());
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let (h, swap_grad) = sampler.sample(rng);
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let batch_rows: Vec<&[f64]> = batch.iter().map(|&i| rows[i]).collect();
            let batch_joint: Vec<f64> = batch.iter().map(|&i| joint[i]).collect();
            let out = batch_objective(
                theta,
                phi,
                &batch_rows,
                &batch_joint,
                &h,
                &swap_grad,
                config.lambda,
                KnockoffNoise::Seeds(&seeds),
            )?;
            if !out.report.objective.is_finite() {
                return Err(Error::NonFiniteObjective { epoch, batch: bi });
            }
            adam.ascend(&mut sampler.logits, &out.grad_beta, config.lr_beta);
        }
    }
    Ok(sampler)
}

/// Monte-Carlo estimate of the conditional entropy `−E log q(x̃ | x)` over
/// the rows of `data`.
pub fn conditional_entropy(phi: &AutoregressiveModel, data: &DataMatrix, seed: u64) -> Result<f64> {
    check_len(phi.dim(), data.cols())?;
    let terms: Vec<Result<f64>> = (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = child_rng(seed, i as u64);
            Ok(-phi.sample_chain(data.row(i), &mut rng)?.log_prob())
        })
        .collect();
    let mut sum = 0.0;
    for t in terms {
        sum += t?;
    }
    Ok(sum / data.rows() as f64)
}

/// A fitted generator: standardization, covariate joint, knockoff
/// conditional and the learned swap sampler.
#[derive(Debug, Clone)]
pub struct DdlkModel {
    pub standardizer: Standardizer,
    pub joint: AutoregressiveModel,
    pub knockoff: AutoregressiveModel,
    pub sampler: SwapSampler,
}

#[derive(Debug, Clone)]
pub struct DdlkFitReport {
    pub joint: JointFitReport,
    pub knockoff: KnockoffHistory,
}

/// Fits the standardizer on `train`, then both training stages.
pub fn fit_ddlk(train: &DataMatrix, val: &DataMatrix, config: &TrainConfig) -> Result<(DdlkModel, DdlkFitReport)> {
    let standardizer = Standardizer::fit(train)?;
    let train_s = standardizer.transform(train)?;
    let val_s = standardizer.transform(val)?;
    let mut rng = child_rng(config.seed, 1);
    let (joint, joint_report) = fit_joint(&train_s, &val_s, config, &mut rng)?;
    let mut rng = child_rng(config.seed, 2);
    let fit = fit_knockoff(&joint, &train_s, &val_s, config, &mut rng)?;
    Ok((
        DdlkModel {
            standardizer,
            joint,
            knockoff: fit.model,
            sampler: fit.sampler,
        },
        DdlkFitReport {
            joint: joint_report,
            knockoff: fit.history,
        },
    ))
}

/// Samples one knockoff row per data row on the original scale. Row `i`
/// uses a stream derived from `(seed, i)`.
pub fn sample_knockoff_matrix(
    knockoff: &AutoregressiveModel,
    standardizer: &Standardizer,
    data: &DataMatrix,
    seed: u64,
) -> Result<DataMatrix> {
    check_len(knockoff.dim(), data.cols())?;
    let z = standardizer.transform(data)?;
    let rows: Vec<Result<Vec<f64>>> = (0..z.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = child_rng(seed, i as u64);
            knockoff.sample(z.row(i), &mut rng)
        })
        .collect();
    let mut values = Vec::with_capacity(z.values().len());
    for r in rows {
        values.extend(r?);
    }
    let sampled = DataMatrix::new(data.names().to_vec(), data.rows(), values)?;
    standardizer.inverse(&sampled)
}

impl DdlkModel {
    pub fn sample_knockoffs(&self, data: &DataMatrix, seed: u64) -> Result<DataMatrix> {
        sample_knockoff_matrix(&self.knockoff, &self.standardizer, data, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_models(rng: &mut ChaCha8Rng, d: usize) -> (AutoregressiveModel, AutoregressiveModel) {
        let mut theta = AutoregressiveModel::init(0, vec![(-2.0, 2.0); d], 2, 5, rng).unwrap();
        let mut phi = AutoregressiveModel::init(d, vec![(-2.0, 2.0); d], 2, 5, rng).unwrap();
        for c in theta.conditionals_mut().iter_mut().chain(phi.conditionals_mut()) {
            for p in c.params_mut() {
                *p += rng.random_range(-0.3..0.3);
            }
        }
        (theta, phi)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_phi: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identity_swap_without_regularizer_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (theta, phi) = small_models(&mut rng, 3);
        let batch = DataMatrix::from_rows(&[vec![0.1, -0.4, 1.0], vec![1.2, 0.3, -0.5]]).unwrap();
        let seeds = [5, 6];
        let out = ddlk_objective_batch(
            &theta,
            &phi,
            &batch,
            &SwapIndicator::none(3),
            &[0.0; 3],
            0.0,
            KnockoffNoise::Seeds(&seeds),
        )
        .unwrap();
        assert_eq!(out.report.objective, out.report.a - out.report.b);
        assert!(out.report.objective.abs() < 1e-12);
        assert!(out.grads_phi.iter().flatten().all(|g| g.abs() < 1e-10));
    }

    fn objective_with_levels(
        theta: &AutoregressiveModel,
        phi: &AutoregressiveModel,
        batch: &DataMatrix,
        h: &SwapIndicator,
        lambda: f64,
        levels: &[Vec<f64>],
    ) -> f64 {
        ddlk_objective_batch(theta, phi, batch, h, &vec![0.0; h.len()], lambda, KnockoffNoise::Levels(levels))
            .unwrap()
            .report
            .objective
    }

    #[test]
    fn phi_gradients_match_common_random_number_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let (theta, mut phi) = small_models(&mut rng, d);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let batch = DataMatrix::from_rows(&rows).unwrap();
        let levels: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| rng.random_range(0.05..0.95)).collect()).collect();
        let h = SwapIndicator::from_indices(d, &[0, 2]).unwrap();
        let lambda = 0.3;
        let out = ddlk_objective_batch(&theta, &phi, &batch, &h, &[0.0; 3], lambda, KnockoffNoise::Levels(&levels))
            .unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for c in 0..d {
            for p in (0..phi.conditionals()[c].param_count()).step_by(3) {
                let orig = phi.conditionals()[c].params()[p];
                phi.conditionals_mut()[c].params_mut()[p] = orig + eps;
                let up = objective_with_levels(&theta, &phi, &batch, &h, lambda, &levels);
                phi.conditionals_mut()[c].params_mut()[p] = orig - eps;
                let down = objective_with_levels(&theta, &phi, &batch, &h, lambda, &levels);
                phi.conditionals_mut()[c].params_mut()[p] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = out.grads_phi[c][p];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-2));
            }
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn bit_derivative_matches_relaxed_swap() {
        // d(A − B)/db_j with u = x + b(x̃ − x), ũ = x̃ + b(x − x̃), b at the hard bits.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let (theta, phi) = small_models(&mut rng, d);
        let x = vec![0.2, -0.7, 0.9];
        let levels = vec![vec![0.3, 0.6, 0.45]];
        let batch = DataMatrix::from_rows(std::slice::from_ref(&x)).unwrap();
        let h = SwapIndicator::from_indices(d, &[1]).unwrap();
        let out = ddlk_objective_batch(&theta, &phi, &batch, &h, &[1.0; 3], 0.0, KnockoffNoise::Levels(&levels))
            .unwrap();
        let xt = phi
            .sample_chain_with(&x, |j, m| m.quantile(levels[0][j]).unwrap())
            .unwrap()
            .values()
            .to_vec();
        let neg_b = |bits: &[f64]| {
            let u: Vec<f64> = (0..d).map(|j| x[j] + bits[j] * (xt[j] - x[j])).collect();
            let ut: Vec<f64> = (0..d).map(|j| xt[j] + bits[j] * (x[j] - xt[j])).collect();
            -(theta.log_prob(&[], &u).unwrap() + phi.log_prob(&u, &ut).unwrap())
        };
        let eps = 1e-6;
        for j in 0..d {
            let mut b: Vec<f64> = h.bits.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
            b[j] += eps;
            let up = neg_b(&b);
            b[j] -= 2.0 * eps;
            let down = neg_b(&b);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - out.d_objective_d_bits[j]).abs() < 1e-5 * (1.0 + fd.abs()), "{j}");
            assert_eq!(out.grad_beta[j], out.d_objective_d_bits[j]);
        }
    }

    #[test]
    fn exchangeable_pair_has_zero_expected_objective() {
        // Exact N(0,1) joint and a knockoff head that ignores x: (x, x̃) is exchangeable.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut theta = AutoregressiveModel::init(0, vec![(-1.0, 1.0)], 1, 4, &mut rng).unwrap();
        let mut phi = AutoregressiveModel::init(1, vec![(-1.0, 1.0)], 1, 4, &mut rng).unwrap();
        for m in [&mut theta, &mut phi] {
            let net = &mut m.conditionals_mut()[0];
            net.params_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.sample(normal)]).collect();
        let batch = DataMatrix::from_rows(&rows).unwrap();
        let seeds: Vec<u64> = (0..rows.len() as u64).collect();
        let out = ddlk_objective_batch(
            &theta,
            &phi,
            &batch,
            &SwapIndicator::all(1),
            &[0.0],
            0.0,
            KnockoffNoise::Seeds(&seeds),
        )
        .unwrap();
        assert!(out.report.objective.abs() < 0.05, "{}", out.report.objective);
    }
}
