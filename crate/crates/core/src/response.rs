//! Response models `q(y | x)` used to score feature importance.
//!
//! Scores are oriented so that larger is better: negative mean squared
//! error for real responses, mean log-likelihood for binary ones.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, Response, Standardizer};
use crate::error::{check_len, Error, Result};
use crate::optim::{AdamState, EarlyStopping};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResponseSpec {
    /// One hidden ReLU layer.
    Network {
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_epochs")]
        max_epochs: usize,
        #[serde(default = "default_patience")]
        patience: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
    /// Ridge regression, or L2-penalized logistic regression for binary y.
    Ridge {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_hidden() -> usize {
    200
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_alpha() -> f64 {
    1.0
}

impl Default for ResponseSpec {
    fn default() -> Self {
        ResponseSpec::Network {
            hidden: default_hidden(),
            lr: default_lr(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            batch_size: default_batch(),
        }
    }
}

impl ResponseSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ResponseSpec::Network {
                hidden,
                lr,
                batch_size,
                ..
            } => {
                if *hidden == 0 || *batch_size == 0 || !(*lr > 0.0) {
                    return Err(Error::InvalidInput("network response model needs positive sizes and rate".into()));
                }
            }
            ResponseSpec::Ridge { alpha } => {
                if !(*alpha >= 0.0 && alpha.is_finite()) {
                    return Err(Error::InvalidInput("ridge alpha must be >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// A fitted response model.
#[derive(Debug, Clone)]
pub struct ResponseModel {
    x_scale: Standardizer,
    y_mean: f64,
    y_scale: f64,
    binary: bool,
    kind: Fitted,
}

#[derive(Debug, Clone)]
enum Fitted {
    Linear { coef: Vec<f64>, intercept: f64 },
    Network(Mlp),
}

impl ResponseModel {
    /// Fits on `(x, y)`; the optional validation pair drives early stopping
    /// of the network.
    pub fn fit(
        spec: &ResponseSpec,
        x: &DataMatrix,
        y: &Response,
        val: Option<(&DataMatrix, &Response)>,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        check_len(x.rows(), y.len())?;
        if let Some((vx, vy)) = val {
            check_len(x.cols(), vx.cols())?;
            check_len(vx.rows(), vy.len())?;
        }
        let x_scale = Standardizer::fit(x)?;
        let xs = x_scale.transform(x)?;
        let binary = y.is_binary();
        let (y_mean, y_scale) = if binary {
            (0.0, 1.0)
        } else {
            let v = y.values();
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let s = (v.iter().map(|t| (t - m).powi(2)).sum::<f64>() / n).sqrt();
            (m, if s > 1e-12 { s } else { 1.0 })
        };
        let targets: Vec<f64> = y.values().iter().map(|t| (t - y_mean) / y_scale).collect();
        let kind = match spec {
            ResponseSpec::Ridge { alpha } => {
                if binary {
                    fit_logistic(&xs, &targets, *alpha)?
                } else {
                    fit_ridge(&xs, &targets, *alpha)?
                }
            }
            ResponseSpec::Network {
                hidden,
                lr,
                max_epochs,
                patience,
                batch_size,
            } => {
                let val_scaled = match val {
                    Some((vx, vy)) => Some((
                        x_scale.transform(vx)?,
                        vy.values().iter().map(|t| (t - y_mean) / y_scale).collect::<Vec<_>>(),
                    )),
                    None => None,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut net = Mlp::init(x.cols(), *hidden, &mut rng);
                net.train(
                    &xs,
                    &targets,
                    val_scaled.as_ref().map(|(a, b)| (a, b.as_slice())),
                    binary,
                    NetSchedule {
                        lr: *lr,
                        max_epochs: *max_epochs,
                        patience: *patience,
                        batch_size: *batch_size,
                    },
                    &mut rng,
                );
                Fitted::Network(net)
            }
        };
        Ok(Self {
            x_scale,
            y_mean,
            y_scale,
            binary,
            kind,
        })
    }

    /// A real-response linear model on unscaled inputs.
    pub fn linear(coef: Vec<f64>, intercept: f64) -> Self {
        Self {
            x_scale: Standardizer::identity(coef.len()),
            y_mean: 0.0,
            y_scale: 1.0,
            binary: false,
            kind: Fitted::Linear { coef, intercept },
        }
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    /// Raw model output per row: the prediction on the response scale, or
    /// the logit for binary responses.
    pub fn predict(&self, x: &DataMatrix) -> Result<Vec<f64>> {
        let xs = self.x_scale.transform(x)?;
        let out = xs.iter_rows().map(|r| match &self.kind {
            Fitted::Linear { coef, intercept } => intercept + coef.iter().zip(r).map(|(a, b)| a * b).sum::<f64>(),
            Fitted::Network(net) => net.forward(r),
        });
        Ok(out.map(|o| o * self.y_scale + self.y_mean).collect())
    }

    /// Performance measure: negative MSE or mean Bernoulli log-likelihood.
    pub fn score(&self, x: &DataMatrix, y: &Response) -> Result<f64> {
        check_len(x.rows(), y.len())?;
        if x.rows() == 0 {
            return Err(Error::InvalidInput("cannot score an empty set".into()));
        }
        let pred = self.predict(x)?;
        let n = pred.len() as f64;
        Ok(if self.binary {
            pred.iter().zip(y.values()).map(|(z, t)| bernoulli_log_lik(*z, *t)).sum::<f64>() / n
        } else {
            -pred.iter().zip(y.values()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n
        })
    }
}

/// `t log σ(z) + (1 − t) log σ(−z)`, computed stably.
fn bernoulli_log_lik(z: f64, t: f64) -> f64 {
    -(softplus(-z) * t + softplus(z) * (1.0 - t))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn design(x: &DataMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.rows(), x.cols(), x.values())
}

fn fit_ridge(x: &DataMatrix, y: &[f64], alpha: f64) -> Result<Fitted> {
    // Columns and targets are centred, so the intercept is zero.
    let a = design(x);
    let mut gram = a.transpose() * &a;
    for i in 0..gram.nrows() {
        gram[(i, i)] += alpha.max(1e-10);
    }
    let rhs = a.transpose() * DVector::from_column_slice(y);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::LinearAlgebra("ridge normal equations are not positive definite".into()))?;
    Ok(Fitted::Linear {
        coef: chol.solve(&rhs).iter().copied().collect(),
        intercept: 0.0,
    })
}

/// Newton iterations on the penalized logistic likelihood; the intercept is
/// not penalized.
fn fit_logistic(x: &DataMatrix, y: &[f64], alpha: f64) -> Result<Fitted> {
    let (n, d) = (x.rows(), x.cols());
    let mut a = DMatrix::from_element(n, d + 1, 1.0);
    for i in 0..n {
        for j in 0..d {
            a[(i, j + 1)] = x.get(i, j);
        }
    }
    let mut w = DVector::zeros(d + 1);
    let ridge = alpha.max(1e-8);
    for _ in 0..100 {
        let z = &a * &w;
        let p: Vec<f64> = z.iter().map(|v| sigmoid(*v)).collect();
        let mut grad = DVector::zeros(d + 1);
        let mut hess = DMatrix::zeros(d + 1, d + 1);
        for i in 0..n {
            let r = y[i] - p[i];
            let s = (p[i] * (1.0 - p[i])).max(1e-12);
            let row = a.row(i);
            grad += row.transpose() * r;
            hess += row.transpose() * row * s;
        }
        for j in 1..=d {
            grad[j] -= ridge * w[j];
            hess[(j, j)] += ridge;
        }
        hess[(0, 0)] += 1e-10;
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::LinearAlgebra("logistic Hessian is not positive definite".into()))?
            .solve(&grad);
        w += &step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    Ok(Fitted::Linear {
        intercept: w[0],
        coef: w.iter().skip(1).copied().collect(),
    })
}

struct NetSchedule {
    lr: f64,
    max_epochs: usize,
    patience: usize,
    batch_size: usize,
}

/// `x → ReLU(W1 x + b1) → w2·h + b2`.
#[derive(Debug, Clone)]
struct Mlp {
    d: usize,
    hidden: usize,
    params: Vec<f64>,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(hidden * d + 2 * hidden + 1);
        let b1 = 1.0 / (d.max(1) as f64).sqrt();
        params.extend((0..hidden * d + hidden).map(|_| rng.random_range(-b1..b1)));
        let b2 = 1.0 / (hidden as f64).sqrt();
        params.extend((0..hidden + 1).map(|_| rng.random_range(-b2..b2)));
        Self { d, hidden, params }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (w1, rest) = self.params.split_at(self.hidden * self.d);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, rest) = rest.split_at(self.hidden);
        (w1, b1, w2, rest[0])
    }

    fn hidden_layer(&self, x: &[f64], h: &mut [f64]) {
        let (w1, b1, _, _) = self.split();
        for k in 0..self.hidden {
            let row = &w1[k * self.d..(k + 1) * self.d];
            h[k] = (b1[k] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).max(0.0);
        }
    }

    fn forward(&self, x: &[f64]) -> f64 {
        let mut h = vec![0.0; self.hidden];
        self.hidden_layer(x, &mut h);
        let (_, _, w2, b2) = self.split();
        b2 + w2.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Mean loss over `rows`; gradient accumulated into `grad` when given.
    /// Squared error `½(o − t)²`, or Bernoulli negative log-likelihood.
    fn loss(&self, x: &DataMatrix, t: &[f64], rows: &[usize], binary: bool, mut grad: Option<&mut [f64]>) -> f64 {
        let (d, hdim) = (self.d, self.hidden);
        let (_, _, w2, b2) = self.split();
        let mut h = vec![0.0; hdim];
        let mut total = 0.0;
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            let xi = x.row(i);
            self.hidden_layer(xi, &mut h);
            let o = b2 + w2.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            let (l, dl) = if binary {
                (-bernoulli_log_lik(o, t[i]), sigmoid(o) - t[i])
            } else {
                (0.5 * (o - t[i]).powi(2), o - t[i])
            };
            total += l;
            if let Some(g) = grad.as_deref_mut() {
                let dl = dl * scale;
                let (gw1, rest) = g.split_at_mut(hdim * d);
                let (gb1, rest) = rest.split_at_mut(hdim);
                let (gw2, gb2) = rest.split_at_mut(hdim);
                gb2[0] += dl;
                for k in 0..hdim {
                    gw2[k] += dl * h[k];
                    if h[k] > 0.0 {
                        let dh = dl * w2[k];
                        gb1[k] += dh;
                        for (gw, xv) in gw1[k * d..(k + 1) * d].iter_mut().zip(xi) {
                            *gw += dh * xv;
                        }
                    }
                }
            }
        }
        total * scale
    }

    fn train<R: Rng + ?Sized>(
        &mut self,
        x: &DataMatrix,
        t: &[f64],
        val: Option<(&DataMatrix, &[f64])>,
        binary: bool,
        sched: NetSchedule,
        rng: &mut R,
    ) {
        let mut adam = AdamState::new(self.params.len());
        let mut stopper = EarlyStopping::new(sched.patience);
        let mut best = self.params.clone();
        let mut order: Vec<usize> = (0..x.rows()).collect();
        let mut grad = vec![0.0; self.params.len()];
        let val_rows: Vec<usize> = val.map(|(vx, _)| (0..vx.rows()).collect()).unwrap_or_default();
        for epoch in 0..sched.max_epochs {
            order.shuffle(rng);
            for batch in order.chunks(sched.batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                self.loss(x, t, batch, binary, Some(&mut grad));
                adam.step(&mut self.params, &grad, sched.lr);
            }
            if let Some((vx, vt)) = val {
                if val_rows.is_empty() {
                    continue;
                }
                let v = self.loss(vx, vt, &val_rows, binary, None);
                if stopper.observe(epoch, v) {
                    best.clone_from(&self.params);
                }
                if stopper.should_stop() {
                    break;
                }
            }
        }
        if val.is_some() && !val_rows.is_empty() {
            self.params = best;
        }
    }
}
