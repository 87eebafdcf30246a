//! Mixture density network: a small residual MLP that maps a conditioning
//! vector to the parameters of a univariate Gaussian mixture.
//!
//! Architecture: three ReLU layers of `hidden` units; an affine skip map from
//! the input is added to the third layer before its nonlinearity; three linear
//! heads emit mixture logits (softmax), means, and log-stddevs
//! (exponentiated, then floored at [`SIGMA_FLOOR`]).
//!
//! All parameters live in one flat vector so optimizers and gradients can
//! treat a network as a plain slice. Backpropagation is hand written.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gmm::{GaussianMixture1D, LogProbPartials, SamplePathGradients, SIGMA_FLOOR};

pub const DEFAULT_HIDDEN: usize = 50;
pub const DEFAULT_COMPONENTS: usize = 5;

const RAW_STD_MIN: f64 = -30.0;
/// Stddevs are capped at 10 in standardized units.
const RAW_STD_MAX: f64 = std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MdnShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub components: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    skip: usize,
    wa: usize,
    ba: usize,
    wm: usize,
    bm: usize,
    ws: usize,
    bs: usize,
    total: usize,
}

impl MdnShape {
    fn layout(&self) -> Layout {
        let (n, h, k) = (self.input_dim, self.hidden, self.components);
        let mut at = 0;
        let mut take = |len: usize| {
            let start = at;
            at += len;
            start
        };
        let w1 = take(h * n);
        let b1 = take(h);
        let w2 = take(h * h);
        let b2 = take(h);
        let w3 = take(h * h);
        let b3 = take(h);
        let skip = take(h * n);
        let wa = take(k * h);
        let ba = take(k);
        let wm = take(k * h);
        let bm = take(k);
        let ws = take(k * h);
        let bs = take(k);
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            skip,
            wa,
            ba,
            wm,
            bm,
            ws,
            bs,
            total: at,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDensityNetwork {
    shape: MdnShape,
    layout: Layout,
    params: Vec<f64>,
}

/// Gradient aligned with [`ConditionalDensityNetwork::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradient(pub Vec<f64>);

/// Activations recorded by a forward pass, consumed by [`ConditionalDensityNetwork::backward`].
#[derive(Debug, Clone)]
pub struct MdnTape {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    h3: Vec<f64>,
    raw_std: Vec<f64>,
    mixture: GaussianMixture1D,
}

impl MdnTape {
    pub fn mixture(&self) -> &GaussianMixture1D {
        &self.mixture
    }
}

/// Adjoints of a scalar objective with respect to the mixture parameters
/// (softmax logits, means, stddevs).
#[derive(Debug, Clone)]
pub struct HeadAdjoint {
    pub d_logits: Vec<f64>,
    pub d_means: Vec<f64>,
    pub d_stddevs: Vec<f64>,
}

impl HeadAdjoint {
    pub fn zeros(components: usize) -> Self {
        Self {
            d_logits: vec![0.0; components],
            d_means: vec![0.0; components],
            d_stddevs: vec![0.0; components],
        }
    }

    /// Adds `weight * ∂ log q(z) / ∂ heads`.
    pub fn add_log_prob(&mut self, mixture: &GaussianMixture1D, partials: &LogProbPartials, weight: f64) {
        if weight == 0.0 {
            return;
        }
        let pi = mixture.weights();
        for k in 0..pi.len() {
            self.d_logits[k] += weight * (partials.responsibilities[k] - pi[k]);
            self.d_means[k] += weight * partials.d_means[k];
            self.d_stddevs[k] += weight * partials.d_stddevs[k];
        }
    }

    /// Adds `weight * ∂z / ∂ heads` for a pathwise sample `z`. The
    /// unconstrained weight partials are chained through the softmax.
    pub fn add_path(&mut self, mixture: &GaussianMixture1D, path: &SamplePathGradients, weight: f64) {
        if weight == 0.0 || path.underflow {
            return;
        }
        let pi = mixture.weights();
        let avg: f64 = pi.iter().zip(&path.d_weights).map(|(p, g)| p * g).sum();
        for k in 0..pi.len() {
            self.d_logits[k] += weight * pi[k] * (path.d_weights[k] - avg);
            self.d_means[k] += weight * path.d_means[k];
            self.d_stddevs[k] += weight * path.d_stddevs[k];
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[o] += Σ_i w[o, i] x[i]` for a row-major `out.len() × x.len()` block.
#[inline]
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    if n == 0 {
        return;
    }
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o += dot(row, x);
    }
}

impl ConditionalDensityNetwork {
    /// Initializes a network whose mixture means at zero input are evenly
    /// spaced over `support`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        components: usize,
        support: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        Self::init_with_hidden(input_dim, DEFAULT_HIDDEN, components, support, rng)
    }

    pub fn init_with_hidden<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        components: usize,
        support: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        if components < 1 {
            return Err(Error::InvalidInput("mixture density network needs K >= 1".into()));
        }
        if hidden < 1 {
            return Err(Error::InvalidInput("hidden width must be positive".into()));
        }
        let (lo, hi) = support;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInput(format!("invalid support ({lo}, {hi})")));
        }
        let shape = MdnShape {
            input_dim,
            hidden,
            components,
        };
        let layout = shape.layout();
        let mut params = vec![0.0; layout.total];
        let mut fill = |start: usize, len: usize, fan_in: usize| {
            if fan_in == 0 {
                return;
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[start..start + len] {
                *p = rng.random_range(-bound..bound);
            }
        };
        let (n, h, k) = (input_dim, hidden, components);
        fill(layout.w1, h * n, n);
        fill(layout.w2, h * h, h);
        fill(layout.w3, h * h, h);
        fill(layout.skip, h * n, n);
        fill(layout.wa, k * h, h);
        fill(layout.wm, k * h, h);
        fill(layout.ws, k * h, h);

        let init_sd = ((hi - lo) / (2.0 * k as f64)).max(SIGMA_FLOOR);
        for c in 0..k {
            params[layout.bm + c] = if k == 1 {
                0.5 * (lo + hi)
            } else {
                lo + c as f64 * (hi - lo) / (k - 1) as f64
            };
            params[layout.bs + c] = init_sd.ln();
        }
        Ok(Self { shape, layout, params })
    }

    /// Rebuilds a network from a stored parameter vector.
    pub fn from_params(shape: MdnShape, params: Vec<f64>) -> Result<Self> {
        let layout = shape.layout();
        check_len(layout.total, params.len())?;
        if shape.components < 1 || shape.hidden < 1 {
            return Err(Error::InvalidInput(format!("invalid network shape {shape:?}")));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite network parameter".into()));
        }
        Ok(Self { shape, layout, params })
    }

    pub fn shape(&self) -> MdnShape {
        self.shape
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input_dim
    }

    pub fn components(&self) -> usize {
        self.shape.components
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, cond: &[f64]) -> Result<GaussianMixture1D> {
        check_len(self.shape.input_dim, cond.len())?;
        if cond.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite conditioning input".into()));
        }
        Ok(self.forward_tape(cond).mixture)
    }

    /// Forward pass that keeps the activations needed for backpropagation.
    /// `cond` must have length `input_dim`.
    pub fn forward_tape(&self, cond: &[f64]) -> MdnTape {
        debug_assert_eq!(cond.len(), self.shape.input_dim);
        let (n, h, k) = (self.shape.input_dim, self.shape.hidden, self.shape.components);
        let l = &self.layout;
        let p = &self.params;

        let mut h1 = p[l.b1..l.b1 + h].to_vec();
        matvec_acc(&p[l.w1..l.w1 + h * n], cond, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.max(0.0));

        let mut h2 = p[l.b2..l.b2 + h].to_vec();
        matvec_acc(&p[l.w2..l.w2 + h * h], &h1, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.max(0.0));

        let mut h3 = p[l.b3..l.b3 + h].to_vec();
        matvec_acc(&p[l.w3..l.w3 + h * h], &h2, &mut h3);
        matvec_acc(&p[l.skip..l.skip + h * n], cond, &mut h3);
        h3.iter_mut().for_each(|v| *v = v.max(0.0));

        let mut logits = p[l.ba..l.ba + k].to_vec();
        matvec_acc(&p[l.wa..l.wa + k * h], &h3, &mut logits);
        let mut means = p[l.bm..l.bm + k].to_vec();
        matvec_acc(&p[l.wm..l.wm + k * h], &h3, &mut means);
        let mut raw_std = p[l.bs..l.bs + k].to_vec();
        matvec_acc(&p[l.ws..l.ws + k * h], &h3, &mut raw_std);

        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let stddevs = raw_std
            .iter()
            .map(|s| s.clamp(RAW_STD_MIN, RAW_STD_MAX).exp().max(SIGMA_FLOOR))
            .collect();

        MdnTape {
            input: cond.to_vec(),
            h1,
            h2,
            h3,
            raw_std,
            mixture: GaussianMixture1D::from_parts_unchecked(weights, means, stddevs),
        }
    }

    /// Accumulates (`+=`) the gradient of a scalar objective into `grad`
    /// and/or `d_input`, given its adjoint with respect to the mixture heads.
    pub fn backward(
        &self,
        tape: &MdnTape,
        adj: &HeadAdjoint,
        mut grad: Option<&mut [f64]>,
        d_input: Option<&mut [f64]>,
    ) {
        let (n, h, k) = (self.shape.input_dim, self.shape.hidden, self.shape.components);
        let l = &self.layout;
        let p = &self.params;
        let sd = tape.mixture.stddevs();

        let d_raw: Vec<f64> = (0..k)
            .map(|c| {
                let raw = tape.raw_std[c];
                if raw < RAW_STD_MIN || raw > RAW_STD_MAX || raw.exp() < SIGMA_FLOOR {
                    0.0
                } else {
                    adj.d_stddevs[c] * sd[c]
                }
            })
            .collect();

        // heads
        let mut d_h3 = vec![0.0; h];
        for c in 0..k {
            let heads = [
                (l.wa, l.ba, adj.d_logits[c]),
                (l.wm, l.bm, adj.d_means[c]),
                (l.ws, l.bs, d_raw[c]),
            ];
            for (w, b, g) in heads {
                if g == 0.0 {
                    continue;
                }
                axpy(g, &p[w + c * h..w + (c + 1) * h], &mut d_h3);
                if let Some(gr) = grad.as_deref_mut() {
                    gr[b + c] += g;
                    axpy(g, &tape.h3, &mut gr[w + c * h..w + (c + 1) * h]);
                }
            }
        }
        for (d, a) in d_h3.iter_mut().zip(&tape.h3) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }

        let mut d_h2 = vec![0.0; h];
        let mut d_h1 = vec![0.0; h];
        let want_input = d_input.is_some() && n > 0;
        let mut d_in = vec![0.0; if want_input { n } else { 0 }];

        for o in 0..h {
            let g = d_h3[o];
            if g == 0.0 {
                continue;
            }
            axpy(g, &p[l.w3 + o * h..l.w3 + (o + 1) * h], &mut d_h2);
            if want_input {
                axpy(g, &p[l.skip + o * n..l.skip + (o + 1) * n], &mut d_in);
            }
            if let Some(gr) = grad.as_deref_mut() {
                gr[l.b3 + o] += g;
                axpy(g, &tape.h2, &mut gr[l.w3 + o * h..l.w3 + (o + 1) * h]);
                axpy(g, &tape.input, &mut gr[l.skip + o * n..l.skip + (o + 1) * n]);
            }
        }
        for (d, a) in d_h2.iter_mut().zip(&tape.h2) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        for o in 0..h {
            let g = d_h2[o];
            if g == 0.0 {
                continue;
            }
            axpy(g, &p[l.w2 + o * h..l.w2 + (o + 1) * h], &mut d_h1);
            if let Some(gr) = grad.as_deref_mut() {
                gr[l.b2 + o] += g;
                axpy(g, &tape.h1, &mut gr[l.w2 + o * h..l.w2 + (o + 1) * h]);
            }
        }
        for (d, a) in d_h1.iter_mut().zip(&tape.h1) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        for o in 0..h {
            let g = d_h1[o];
            if g == 0.0 {
                continue;
            }
            if want_input {
                axpy(g, &p[l.w1 + o * n..l.w1 + (o + 1) * n], &mut d_in);
            }
            if let Some(gr) = grad.as_deref_mut() {
                gr[l.b1 + o] += g;
                axpy(g, &tape.input, &mut gr[l.w1 + o * n..l.w1 + (o + 1) * n]);
            }
        }
        if let Some(di) = d_input {
            for (a, b) in di.iter_mut().zip(&d_in) {
                *a += b;
            }
        }
    }

    /// Log density of `z` under the network's mixture at `cond`, with its
    /// gradient with respect to the parameters and to `cond`.
    pub fn logprob_backward(&self, cond: &[f64], z: f64) -> Result<(f64, ParameterGradient, Vec<f64>)> {
        check_len(self.shape.input_dim, cond.len())?;
        if !z.is_finite() || cond.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite input".into()));
        }
        let tape = self.forward_tape(cond);
        let partials = tape.mixture.log_prob_partials(z);
        let mut adj = HeadAdjoint::zeros(self.shape.components);
        adj.add_log_prob(&tape.mixture, &partials, 1.0);
        let mut grad = vec![0.0; self.params.len()];
        let mut d_cond = vec![0.0; self.shape.input_dim];
        self.backward(&tape, &adj, Some(&mut grad), Some(&mut d_cond));
        Ok((partials.log_prob, ParameterGradient(grad), d_cond))
    }

    /// Draws `z` from the mixture at `cond` and returns its pathwise
    /// derivatives with respect to the parameters and to `cond`.
    pub fn sample_backward<R: Rng + ?Sized>(
        &self,
        cond: &[f64],
        rng: &mut R,
    ) -> Result<(f64, ParameterGradient, Vec<f64>)> {
        self.sample_backward_with(cond, |m| m.draw(rng))
    }

    /// As [`sample_backward`](Self::sample_backward) with a caller-supplied
    /// draw, e.g. a fixed-level quantile for common-random-number checks.
    pub fn sample_backward_with(
        &self,
        cond: &[f64],
        draw: impl FnOnce(&GaussianMixture1D) -> f64,
    ) -> Result<(f64, ParameterGradient, Vec<f64>)> {
        check_len(self.shape.input_dim, cond.len())?;
        if cond.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite conditioning input".into()));
        }
        let tape = self.forward_tape(cond);
        let z = draw(&tape.mixture);
        let path = tape.mixture.path_gradients(z);
        let mut adj = HeadAdjoint::zeros(self.shape.components);
        adj.add_path(&tape.mixture, &path, 1.0);
        let mut grad = vec![0.0; self.params.len()];
        let mut d_cond = vec![0.0; self.shape.input_dim];
        self.backward(&tape, &adj, Some(&mut grad), Some(&mut d_cond));
        Ok((z, ParameterGradient(grad), d_cond))
    }
}

/// Free-function form of [`ConditionalDensityNetwork::init`].
pub fn mdn_init<R: Rng + ?Sized>(
    input_dim: usize,
    components: usize,
    support: (f64, f64),
    rng: &mut R,
) -> Result<ConditionalDensityNetwork> {
    ConditionalDensityNetwork::init(input_dim, components, support, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn perturbed_net(rng: &mut ChaCha8Rng, input_dim: usize, k: usize) -> ConditionalDensityNetwork {
        let mut net = ConditionalDensityNetwork::init_with_hidden(input_dim, 8, k, (-2.0, 2.0), rng).unwrap();
        // Nonzero biases so the ReLUs are active and the FD probe sees every path.
        for p in net.params_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        net
    }

    fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }

    #[test]
    fn even_spacing_at_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = mdn_init(3, 5, (0.0, 4.0), &mut rng).unwrap();
        let m = net.forward(&[0.0, 0.0, 0.0]).unwrap();
        for (got, want) in m.means().iter().zip([0.0, 1.0, 2.0, 3.0, 4.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let net = mdn_init(0, 1, (-2.0, 2.0), &mut rng).unwrap();
        assert!(net.forward(&[]).unwrap().means()[0].abs() < 1e-12);
        let net = mdn_init(2, 3, (0.0, 40.0), &mut rng).unwrap();
        let m = net.forward(&[0.0, 0.0]).unwrap();
        assert_eq!(m.means(), &[0.0, 20.0, 40.0]);
        // initial spread (hi - lo) / 2K
        assert!((m.stddevs()[0] - 40.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn init_rejects_bad_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(mdn_init(2, 0, (0.0, 1.0), &mut rng).is_err());
        assert!(mdn_init(2, 3, (1.0, 1.0), &mut rng).is_err());
    }

    #[test]
    fn forward_checks_length_and_validity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = perturbed_net(&mut rng, 3, 4);
        assert!(net.forward(&[1.0]).is_err());
        for _ in 0..50 {
            let cond: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let m = net.forward(&cond).unwrap();
            let rebuilt =
                GaussianMixture1D::new(m.weights().to_vec(), m.means().to_vec(), m.stddevs().to_vec());
            assert!(rebuilt.is_ok());
        }
    }

    #[test]
    fn forward_is_lipschitz_in_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = perturbed_net(&mut rng, 4, 3);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let cond: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let base = net.forward(&cond).unwrap();
            for eps in [1e-3, 1e-5, 1e-7] {
                let mut c2 = cond.clone();
                c2[1] += eps;
                let moved = net.forward(&c2).unwrap();
                for (a, b) in base.means().iter().zip(moved.means()) {
                    worst = worst.max((a - b).abs() / eps);
                }
            }
        }
        assert!(worst.is_finite() && worst < 100.0, "empirical Lipschitz {worst}");
    }

    #[test]
    fn logprob_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let input_dim = rng.random_range(0..4);
            let k = rng.random_range(1..4);
            let mut net = perturbed_net(&mut rng, input_dim, k);
            let cond: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let z = rng.random_range(-2.0..2.0);
            let (logp, grad, d_cond) = net.logprob_backward(&cond, z).unwrap();
            let direct = net.forward(&cond).unwrap().log_prob(z).unwrap();
            assert_eq!(logp, direct);
            for i in 0..net.param_count() {
                let orig = net.params[i];
                net.params[i] = orig + h;
                let up = net.forward(&cond).unwrap().log_prob(z).unwrap();
                net.params[i] = orig - h;
                let down = net.forward(&cond).unwrap().log_prob(z).unwrap();
                net.params[i] = orig;
                worst = worst.max(rel_err(grad.0[i], (up - down) / (2.0 * h), 1e-2));
            }
            for i in 0..input_dim {
                let mut c = cond.clone();
                c[i] += h;
                let up = net.forward(&c).unwrap().log_prob(z).unwrap();
                c[i] -= 2.0 * h;
                let down = net.forward(&c).unwrap().log_prob(z).unwrap();
                worst = worst.max(rel_err(d_cond[i], (up - down) / (2.0 * h), 1e-2));
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn stddevs_stay_bounded_for_far_out_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = perturbed_net(&mut rng, 2, 3);
        for scale in [1.0, 1e3, 1e6] {
            let m = net.forward(&[scale, -scale]).unwrap();
            assert!(m.stddevs().iter().all(|s| *s >= SIGMA_FLOOR && *s <= 10.0 + 1e-9));
        }
    }

    #[test]
    fn empty_input_gives_empty_cond_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = mdn_init(0, 3, (-1.0, 1.0), &mut rng).unwrap();
        assert!(net.logprob_backward(&[], 0.3).unwrap().2.is_empty());
        assert!(net.sample_backward(&[], &mut rng).unwrap().2.is_empty());
    }

    #[test]
    fn single_component_mean_bias_has_unit_path_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = mdn_init(0, 1, (-1.0, 3.0), &mut rng).unwrap();
        let (_, grad, _) = net.sample_backward(&[], &mut rng).unwrap();
        let l = net.shape.layout();
        assert!((grad.0[l.bm] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_path_gradients_match_fixed_level_resampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let input_dim = rng.random_range(0..3);
            let k = rng.random_range(1..4);
            let mut net = perturbed_net(&mut rng, input_dim, k);
            let cond: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let u: f64 = rng.random_range(0.05..0.95);
            let (z, grad, d_cond) = net.sample_backward_with(&cond, |m| m.quantile(u).unwrap()).unwrap();
            let at = |net: &ConditionalDensityNetwork, c: &[f64]| net.forward(c).unwrap().quantile(u).unwrap();
            assert!((at(&net, &cond) - z).abs() < 1e-12);
            for i in 0..net.param_count() {
                let orig = net.params[i];
                net.params[i] = orig + h;
                let up = at(&net, &cond);
                net.params[i] = orig - h;
                let down = at(&net, &cond);
                net.params[i] = orig;
                worst = worst.max(rel_err(grad.0[i], (up - down) / (2.0 * h), 1e-2));
            }
            for i in 0..input_dim {
                let mut c = cond.clone();
                c[i] += h;
                let up = at(&net, &c);
                c[i] -= 2.0 * h;
                let down = at(&net, &c);
                worst = worst.max(rel_err(d_cond[i], (up - down) / (2.0 * h), 1e-2));
            }
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn unconditional_fit_reaches_true_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(3.0, 2.0).unwrap();
        let train: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let test: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let mut net = mdn_init(0, 5, (-5.0, 11.0), &mut rng).unwrap();
        let mut adam = AdamState::new(net.param_count());
        for _epoch in 0..30 {
            for batch in train.chunks(100) {
                let mut g = vec![0.0; net.param_count()];
                for &z in batch {
                    let (_, gr, _) = net.logprob_backward(&[], z).unwrap();
                    axpy(-1.0 / batch.len() as f64, &gr.0, &mut g);
                }
                adam.step(net.params_mut(), &g, 1e-2);
            }
        }
        let m = net.forward(&[]).unwrap();
        let ll = test.iter().map(|z| m.log_prob(*z).unwrap()).sum::<f64>() / test.len() as f64;
        let truth = -(2.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).sqrt()).ln();
        assert!((ll - truth).abs() < 0.05, "held-out {ll} vs {truth}");
    }
}
