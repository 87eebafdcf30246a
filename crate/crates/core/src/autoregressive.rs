//! Chain-rule factorized densities built from mixture density networks.
//!
//! An [`AutoregressiveModel`] scores a vector `v ∈ R^d` given an optional
//! base vector `b`: conditional `j` sees `(b, v_1, …, v_{j-1})` in natural
//! column order. With an empty base this is the covariate joint; with
//! `b = x` it is the knockoff conditional `q(x̃ | x)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{check_len, Error, Result};
use crate::gmm::{GaussianMixture1D, LogProbPartials, SamplePathGradients};
use crate::mdn::{ConditionalDensityNetwork, HeadAdjoint, MdnTape};
use crate::optim::{AdamState, EarlyStopping};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AutoregressiveModel {
    base_dim: usize,
    conditionals: Vec<ConditionalDensityNetwork>,
    support: Vec<(f64, f64)>,
}

/// Per-conditional parameter gradients, aligned with
/// [`AutoregressiveModel::conditionals`].
pub type ModelGradient = Vec<Vec<f64>>;

/// One step of an autoregressive sampling pass.
#[derive(Debug, Clone)]
struct ChainStep {
    tape: MdnTape,
    partials: LogProbPartials,
    path: SamplePathGradients,
}

/// A sample drawn through the whole chain, with everything needed to
/// backpropagate through it.
#[derive(Debug, Clone)]
pub struct ChainSample {
    values: Vec<f64>,
    steps: Vec<ChainStep>,
}

impl ChainSample {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `Σ_j log q_j(v_j | ·)` at the sampled values.
    pub fn log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.partials.log_prob).sum()
    }

    pub fn mixture(&self, j: usize) -> &GaussianMixture1D {
        self.steps[j].tape.mixture()
    }

    /// True when any coordinate's density underflowed and its pathwise
    /// gradient was zeroed.
    pub fn underflowed(&self) -> bool {
        self.steps.iter().any(|s| s.path.underflow)
    }
}

impl AutoregressiveModel {
    /// Fresh model with `d = support.len()` conditionals; conditional `j`
    /// has `base_dim + j` inputs and means initialized over `support[j]`.
    pub fn init<R: Rng + ?Sized>(
        base_dim: usize,
        support: Vec<(f64, f64)>,
        components: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidInput("model needs at least one feature".into()));
        }
        let conditionals = support
            .iter()
            .enumerate()
            .map(|(j, s)| ConditionalDensityNetwork::init_with_hidden(base_dim + j, hidden, components, *s, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base_dim,
            conditionals,
            support,
        })
    }

    pub fn from_parts(
        base_dim: usize,
        conditionals: Vec<ConditionalDensityNetwork>,
        support: Vec<(f64, f64)>,
    ) -> Result<Self> {
        check_len(conditionals.len(), support.len())?;
        for (j, c) in conditionals.iter().enumerate() {
            if c.input_dim() != base_dim + j {
                return Err(Error::InvalidInput(format!(
                    "conditional {j} has {} inputs, expected {}",
                    c.input_dim(),
                    base_dim + j
                )));
            }
        }
        Ok(Self {
            base_dim,
            conditionals,
            support,
        })
    }

    pub fn dim(&self) -> usize {
        self.conditionals.len()
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn conditionals(&self) -> &[ConditionalDensityNetwork] {
        &self.conditionals
    }

    pub fn conditionals_mut(&mut self) -> &mut [ConditionalDensityNetwork] {
        &mut self.conditionals
    }

    pub fn support(&self) -> &[(f64, f64)] {
        &self.support
    }

    pub fn zero_gradient(&self) -> ModelGradient {
        self.conditionals.iter().map(|c| vec![0.0; c.param_count()]).collect()
    }

    fn check_dims(&self, base: &[f64], v: &[f64]) -> Result<()> {
        check_len(self.base_dim, base.len())?;
        check_len(self.dim(), v.len())
    }

    fn input(&self, j: usize, base: &[f64], v: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(base);
        buf.extend_from_slice(&v[..j]);
    }

    /// Conditional mixture of coordinate `j` given `base` and `v[..j]`.
    pub fn conditional_mixture(&self, j: usize, base: &[f64], v: &[f64]) -> Result<GaussianMixture1D> {
        self.check_dims(base, v)?;
        let mut buf = Vec::new();
        self.input(j, base, v, &mut buf);
        self.conditionals[j].forward(&buf)
    }

    pub fn log_prob(&self, base: &[f64], v: &[f64]) -> Result<f64> {
        self.check_dims(base, v)?;
        if base.iter().chain(v).any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("non-finite input to log_prob".into()));
        }
        Ok(self.log_prob_unchecked(base, v))
    }

    pub(crate) fn log_prob_unchecked(&self, base: &[f64], v: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.base_dim + self.dim());
        let mut total = 0.0;
        for (j, net) in self.conditionals.iter().enumerate() {
            self.input(j, base, v, &mut buf);
            total += net.forward_tape(&buf).mixture().log_prob_unchecked(v[j]);
        }
        total
    }

    /// Log density with gradients. Parameter gradients (scaled by `weight`)
    /// are accumulated into `grads` when given; the returned input
    /// gradients `(d_base, d_v)` are scaled by `weight` as well.
    pub fn log_prob_backward(
        &self,
        base: &[f64],
        v: &[f64],
        weight: f64,
        mut grads: Option<&mut [Vec<f64>]>,
    ) -> (f64, Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut d_base = vec![0.0; self.base_dim];
        let mut d_v = vec![0.0; d];
        let mut buf = Vec::with_capacity(self.base_dim + d);
        let mut d_in = Vec::with_capacity(self.base_dim + d);
        let mut total = 0.0;
        for (j, net) in self.conditionals.iter().enumerate() {
            self.input(j, base, v, &mut buf);
            let tape = net.forward_tape(&buf);
            let partials = tape.mixture().log_prob_partials(v[j]);
            total += partials.log_prob;
            let mut adj = HeadAdjoint::zeros(net.components());
            adj.add_log_prob(tape.mixture(), &partials, weight);
            d_in.clear();
            d_in.resize(buf.len(), 0.0);
            net.backward(&tape, &adj, grads.as_deref_mut().map(|g| g[j].as_mut_slice()), Some(&mut d_in));
            for (a, b) in d_base.iter_mut().zip(&d_in[..self.base_dim]) {
                *a += b;
            }
            for (a, b) in d_v.iter_mut().zip(&d_in[self.base_dim..]) {
                *a += b;
            }
            d_v[j] += weight * partials.d_z;
        }
        (total, d_base, d_v)
    }

    /// Samples every coordinate in order with a caller-supplied draw
    /// `(j, mixture) -> value`, recording the pathwise information.
    pub fn sample_chain_with(
        &self,
        base: &[f64],
        mut draw: impl FnMut(usize, &GaussianMixture1D) -> f64,
    ) -> Result<ChainSample> {
        check_len(self.base_dim, base.len())?;
        let d = self.dim();
        let mut values = vec![0.0; d];
        let mut steps = Vec::with_capacity(d);
        let mut buf = Vec::with_capacity(self.base_dim + d);
        for (j, net) in self.conditionals.iter().enumerate() {
            self.input(j, base, &values, &mut buf);
            let tape = net.forward_tape(&buf);
            let z = draw(j, tape.mixture());
            if !z.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite draw for coordinate {j}")));
            }
            let partials = tape.mixture().log_prob_partials(z);
            let path = tape.mixture().path_gradients(z);
            values[j] = z;
            steps.push(ChainStep { tape, partials, path });
        }
        Ok(ChainSample { values, steps })
    }

    pub fn sample_chain<R: Rng + ?Sized>(&self, base: &[f64], rng: &mut R) -> Result<ChainSample> {
        self.sample_chain_with(base, |_, m| m.draw(rng))
    }

    /// Draws a vector without recording gradients.
    pub fn sample<R: Rng + ?Sized>(&self, base: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        check_len(self.base_dim, base.len())?;
        let d = self.dim();
        let mut values = vec![0.0; d];
        let mut buf = Vec::with_capacity(self.base_dim + d);
        for (j, net) in self.conditionals.iter().enumerate() {
            self.input(j, base, &values, &mut buf);
            values[j] = net.forward_tape(&buf).mixture().draw(rng);
        }
        Ok(values)
    }

    /// Reverse sweep through a sampled chain for the objective
    /// `Σ_j adjoint[j]·v_j + logprob_weight·log q(v | base)`, where `v` is
    /// the chain's own sample. Every coordinate's pathwise dependence on the
    /// parameters and on earlier coordinates is included. Parameter
    /// gradients are accumulated into `grads`; returns the gradient with
    /// respect to `base`.
    pub fn backward_chain(
        &self,
        chain: &ChainSample,
        adjoint: &[f64],
        logprob_weight: f64,
        mut grads: Option<&mut [Vec<f64>]>,
    ) -> Vec<f64> {
        let d = self.dim();
        debug_assert_eq!(adjoint.len(), d);
        let mut a = adjoint.to_vec();
        let mut d_base = vec![0.0; self.base_dim];
        let mut d_in = Vec::with_capacity(self.base_dim + d);
        for j in (0..d).rev() {
            let step = &chain.steps[j];
            let net = &self.conditionals[j];
            let mixture = step.tape.mixture();
            let a_j = a[j] + logprob_weight * step.partials.d_z;
            let mut adj = HeadAdjoint::zeros(net.components());
            adj.add_log_prob(mixture, &step.partials, logprob_weight);
            adj.add_path(mixture, &step.path, a_j);
            d_in.clear();
            d_in.resize(self.base_dim + j, 0.0);
            net.backward(&step.tape, &adj, grads.as_deref_mut().map(|g| g[j].as_mut_slice()), Some(&mut d_in));
            for (x, y) in d_base.iter_mut().zip(&d_in[..self.base_dim]) {
                *x += y;
            }
            for (i, y) in d_in[self.base_dim..].iter().enumerate() {
                a[i] += y;
            }
        }
        d_base
    }

    /// Pathwise gradient of coordinate `j` of a sampled chain with respect
    /// to every conditional's parameters and to the base vector.
    pub fn pathwise_jacobian_row(&self, chain: &ChainSample, j: usize) -> (ModelGradient, Vec<f64>) {
        let mut adjoint = vec![0.0; self.dim()];
        adjoint[j] = 1.0;
        let mut grads = self.zero_gradient();
        let d_base = self.backward_chain(chain, &adjoint, 0.0, Some(&mut grads));
        (grads, d_base)
    }
}

/// Samples knockoffs `x̃ ~ q(x̃ | x)` through the full chain.
pub fn sample_knockoffs<R: Rng + ?Sized>(
    kmodel: &AutoregressiveModel,
    x: &[f64],
    rng: &mut R,
) -> Result<ChainSample> {
    if kmodel.base_dim() != kmodel.dim() {
        return Err(Error::InvalidInput(format!(
            "knockoff model must condition on all {} features, not {}",
            kmodel.dim(),
            kmodel.base_dim()
        )));
    }
    kmodel.sample_chain(x, rng)
}

/// Training and validation losses for one conditional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHistory {
    pub feature: usize,
    pub train_nll: Vec<f64>,
    pub val_nll: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFitReport {
    pub features: Vec<FeatureHistory>,
}

impl JointFitReport {
    /// Best validation negative log-likelihood of the whole model after
    /// each epoch (conditionals that stopped early keep their best value).
    pub fn best_val_checkpoints(&self) -> Vec<f64> {
        let epochs = self.features.iter().map(|f| f.val_nll.len()).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                self.features
                    .iter()
                    .map(|f| {
                        let upto = (e + 1).min(f.val_nll.len());
                        f.val_nll[..upto].iter().cloned().fold(f64::INFINITY, f64::min)
                    })
                    .sum()
            })
            .collect()
    }

    pub fn best_val_nll(&self) -> f64 {
        self.features.iter().map(|f| f.best_val_nll).sum()
    }
}

/// Per-column (min, max) of the training data; a constant column gets a
/// unit-width interval around its value.
pub fn data_support(data: &DataMatrix) -> Vec<(f64, f64)> {
    data.column_ranges()
        .into_iter()
        .map(|(lo, hi)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
        .collect()
}

/// Maximum-likelihood fit of the covariate joint. Each conditional is
/// trained independently with Adam and early stopping on `val`; the best
/// validation checkpoint of every conditional is returned.
pub fn fit_joint<R: Rng + ?Sized>(
    train: &DataMatrix,
    val: &DataMatrix,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(AutoregressiveModel, JointFitReport)> {
    config.validate()?;
    let d = train.cols();
    if train.rows() < 2 || d < 1 {
        return Err(Error::InvalidInput("fit_joint needs at least 2 rows and 1 feature".into()));
    }
    check_len(d, val.cols())?;
    if val.rows() == 0 {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    let support = data_support(train);
    let seeds: Vec<u64> = (0..d).map(|_| rng.random()).collect();
    let fitted: Vec<Result<(ConditionalDensityNetwork, FeatureHistory)>> = (0..d)
        .into_par_iter()
        .map(|j| fit_conditional(j, train, val, support[j], config, seeds[j]))
        .collect();
    let mut conditionals = Vec::with_capacity(d);
    let mut features = Vec::with_capacity(d);
    for f in fitted {
        let (net, hist) = f?;
        conditionals.push(net);
        features.push(hist);
    }
    Ok((
        AutoregressiveModel {
            base_dim: 0,
            conditionals,
            support,
        },
        JointFitReport { features },
    ))
}

fn fit_conditional(
    j: usize,
    train: &DataMatrix,
    val: &DataMatrix,
    support: (f64, f64),
    config: &TrainConfig,
    seed: u64,
) -> Result<(ConditionalDensityNetwork, FeatureHistory)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ConditionalDensityNetwork::init_with_hidden(j, config.hidden, config.components, support, &mut rng)?;
    let mut adam = AdamState::new(net.param_count());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = net.clone();
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut hist = FeatureHistory {
        feature: j,
        train_nll: Vec::new(),
        val_nll: Vec::new(),
        best_epoch: 0,
        best_val_nll: f64::INFINITY,
    };
    let mut grad = vec![0.0; net.param_count()];
    for epoch in 0..config.max_epochs_joint {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = -1.0 / batch.len() as f64;
            for &i in batch {
                let row = train.row(i);
                let tape = net.forward_tape(&row[..j]);
                let partials = tape.mixture().log_prob_partials(row[j]);
                epoch_nll -= partials.log_prob;
                let mut adj = HeadAdjoint::zeros(net.components());
                adj.add_log_prob(tape.mixture(), &partials, scale);
                net.backward(&tape, &adj, Some(&mut grad), None);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { feature: j, epoch });
            }
            adam.step(net.params_mut(), &grad, config.lr_joint);
        }
        let train_nll = epoch_nll / train.rows() as f64;
        let val_nll = val
            .iter_rows()
            .map(|r| -net.forward_tape(&r[..j]).mixture().log_prob_unchecked(r[j]))
            .sum::<f64>()
            / val.rows() as f64;
        if !train_nll.is_finite() || !val_nll.is_finite() {
            return Err(Error::NonFiniteLoss { feature: j, epoch });
        }
        hist.train_nll.push(train_nll);
        hist.val_nll.push(val_nll);
        if stopper.observe(epoch, val_nll) {
            best = net.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    hist.best_epoch = stopper.best_epoch();
    hist.best_val_nll = stopper.best();
    Ok((best, hist))
}
