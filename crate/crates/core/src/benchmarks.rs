//! Synthetic benchmarks and the end-to-end experiment runner.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_rows, DataMatrix, Dataset, Response};
use crate::error::{check_len, Error, Result};
use crate::filter::{
    default_p_grid, fit_hrt_statistics, fdp_and_power, knockoff_threshold, mixture_statistics, null_sign_balance,
    KnockoffStatistics, NullSignBalance, TrainingData,
};
use crate::response::ResponseSpec;
use crate::seeding::{child_rng, derive_seed};
use crate::trainer::{fit_ddlk, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    Gaussian,
    Mixture,
    /// AR Gaussian covariates with the nonlinear gene-style response.
    GeneResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub kind: BenchmarkKind,
    pub n: usize,
    pub d: usize,
    /// Number of important features; they are the first `m` columns.
    pub m: usize,
    /// AR correlation, one per mixture component.
    pub rho: Vec<f64>,
    pub mixture_centers: Vec<f64>,
    pub mixture_weights: Vec<f64>,
    pub lambda: f64,
    pub split: [f64; 3],
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self::gaussian()
    }
}

impl BenchmarkSpec {
    /// `gaussian` at desk scale: N=2000, d=30, m=10, ρ=0.6, λ=0.1, 10 seeds.
    pub fn gaussian() -> Self {
        Self {
            kind: BenchmarkKind::Gaussian,
            n: 2000,
            d: 30,
            m: 10,
            rho: vec![0.6],
            mixture_centers: vec![0.0],
            mixture_weights: vec![1.0],
            lambda: 0.1,
            split: [0.70, 0.15, 0.15],
            seeds: (0..10).collect(),
        }
    }

    /// `mixture` at desk scale: d=10, three AR components centred at 0, 20, 40.
    pub fn mixture() -> Self {
        Self {
            kind: BenchmarkKind::Mixture,
            n: 2000,
            d: 10,
            m: 5,
            rho: vec![0.6, 0.4, 0.2],
            mixture_centers: vec![0.0, 20.0, 40.0],
            mixture_weights: vec![0.4, 0.2, 0.4],
            lambda: 0.001,
            split: [0.70, 0.15, 0.15],
            seeds: (0..10).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.d == 0 || self.n < 10 {
            return bad(format!("benchmark needs d >= 1 and n >= 10 (got d={}, n={})", self.d, self.n));
        }
        if self.m > self.d {
            return bad(format!("m={} exceeds d={}", self.m, self.d));
        }
        if (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.split.iter().any(|s| *s < 0.0) {
            return bad(format!("split {:?} must be non-negative and sum to 1", self.split));
        }
        if self.rho.is_empty() || self.rho.iter().any(|r| !(r.abs() < 1.0)) {
            return bad("every rho must lie in (-1, 1)".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0".into());
        }
        match self.kind {
            BenchmarkKind::Mixture => {
                let k = self.mixture_weights.len();
                if k == 0 || self.mixture_centers.len() != k || self.rho.len() != k {
                    return bad("mixture needs equal numbers of weights, centers and rho values".into());
                }
                if self.mixture_weights.iter().any(|w| *w < 0.0)
                    || (self.mixture_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return bad("mixture weights must be non-negative and sum to 1".into());
                }
            }
            BenchmarkKind::GeneResponse => {
                if self.m % 4 != 0 {
                    return bad(format!("gene response needs m divisible by 4, got {}", self.m));
                }
            }
            BenchmarkKind::Gaussian => {}
        }
        if self.seeds.is_empty() {
            return bad("at least one replication seed is required".into());
        }
        Ok(())
    }

    /// Indices of the important features.
    pub fn truth(&self) -> Vec<usize> {
        (0..self.m).collect()
    }
}

/// `Σ_ij = ρ^|i−j|`.
pub fn ar_covariance(d: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

fn cholesky_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sigma
        .clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::LinearAlgebra("covariance is not positive definite".into()))
}

fn draw_correlated<R: Rng + ?Sized>(l: &DMatrix<f64>, mean: f64, rng: &mut R) -> Vec<f64> {
    let z = DVector::from_fn(l.nrows(), |_, _| StandardNormal.sample(rng));
    (l * z).iter().map(|v| v + mean).collect()
}

/// A simulated dataset together with the quantities only the evaluator may see.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: Dataset,
    pub truth: Vec<usize>,
    /// Linear coefficients `α`; empty for the gene response.
    pub coefficients: Vec<f64>,
    /// Mixture component of each row.
    pub components: Vec<usize>,
}

/// `α_j = ±100/√N` with Rademacher signs on the first `m` coordinates.
fn linear_coefficients<R: Rng + ?Sized>(spec: &BenchmarkSpec, rng: &mut R) -> Vec<f64> {
    let a = 100.0 / (spec.n as f64).sqrt();
    (0..spec.d)
        .map(|j| {
            if j < spec.m {
                if rng.random_bool(0.5) {
                    a
                } else {
                    -a
                }
            } else {
                0.0
            }
        })
        .collect()
}

fn linear_response<R: Rng + ?Sized>(x: &DataMatrix, alpha: &[f64], rng: &mut R) -> Response {
    Response::Real(
        x.iter_rows()
            .map(|r| {
                let e: f64 = StandardNormal.sample(rng);
                r.iter().zip(alpha).map(|(a, b)| a * b).sum::<f64>() + e
            })
            .collect(),
    )
}

/// `x ~ N(0, Σ)` with AR covariance, `y | x ~ N(⟨x, α⟩, 1)`.
pub fn gen_gaussian<R: Rng + ?Sized>(spec: &BenchmarkSpec, rng: &mut R) -> Result<Simulation> {
    spec.validate()?;
    if spec.kind != BenchmarkKind::Gaussian {
        return Err(Error::InvalidInput("gen_gaussian needs a gaussian spec".into()));
    }
    let x = gaussian_covariates(spec, rng)?;
    let alpha = linear_coefficients(spec, rng);
    let y = linear_response(&x, &alpha, rng);
    Ok(Simulation {
        data: Dataset { x, y: Some(y) },
        truth: spec.truth(),
        coefficients: alpha,
        components: vec![0; spec.n],
    })
}

fn gaussian_covariates<R: Rng + ?Sized>(spec: &BenchmarkSpec, rng: &mut R) -> Result<DataMatrix> {
    let l = cholesky_factor(&ar_covariance(spec.d, spec.rho[0]))?;
    let rows: Vec<Vec<f64>> = (0..spec.n).map(|_| draw_correlated(&l, 0.0, rng)).collect();
    DataMatrix::from_rows(&rows)
}

/// Rows from `Σ_k π_k N(μ_k 1, Σ_k)` with AR covariance `ρ_k`; linear response.
pub fn gen_mixture<R: Rng + ?Sized>(spec: &BenchmarkSpec, rng: &mut R) -> Result<Simulation> {
    spec.validate()?;
    if spec.kind != BenchmarkKind::Mixture {
        return Err(Error::InvalidInput("gen_mixture needs a mixture spec".into()));
    }
    let factors = spec
        .rho
        .iter()
        .map(|r| cholesky_factor(&ar_covariance(spec.d, *r)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(spec.n);
    let mut components = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let u: f64 = rng.random();
        let mut k = 0;
        let mut acc = spec.mixture_weights[0];
        while u >= acc && k + 1 < spec.mixture_weights.len() {
            k += 1;
            acc += spec.mixture_weights[k];
        }
        rows.push(draw_correlated(&factors[k], spec.mixture_centers[k], rng));
        components.push(k);
    }
    let x = DataMatrix::from_rows(&rows)?;
    let alpha = linear_coefficients(spec, rng);
    let y = linear_response(&x, &alpha, rng);
    Ok(Simulation {
        data: Dataset { x, y: Some(y) },
        truth: spec.truth(),
        coefficients: alpha,
        components,
    })
}

/// Coefficients `φ⁽¹⁾ … φ⁽⁶⁾` of the gene response, each of length `m/4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenePhis {
    pub phi: [Vec<f64>; 6],
}

impl GenePhis {
    /// `φ⁽¹⁾, φ⁽²⁾ ~ N(1, 1)`, `φ⁽³⁾ … φ⁽⁶⁾ ~ N(2, 1)`.
    pub fn draw<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Self> {
        if m % 4 != 0 {
            return Err(Error::InvalidInput(format!("m={m} is not divisible by 4")));
        }
        let blocks = m / 4;
        let one = Normal::new(1.0, 1.0).expect("valid normal");
        let two = Normal::new(2.0, 1.0).expect("valid normal");
        let mut draw = |dist: &Normal<f64>| (0..blocks).map(|_| dist.sample(rng)).collect::<Vec<_>>();
        let phi = [draw(&one), draw(&one), draw(&two), draw(&two), draw(&two), draw(&two)];
        Ok(Self { phi })
    }

    pub fn constant(m: usize, value: f64) -> Result<Self> {
        if m % 4 != 0 {
            return Err(Error::InvalidInput(format!("m={m} is not divisible by 4")));
        }
        let v = vec![value; m / 4];
        Ok(Self {
            phi: [v.clone(), v.clone(), v.clone(), v.clone(), v.clone(), v],
        })
    }

    pub fn blocks(&self) -> usize {
        self.phi[0].len()
    }
}

/// `y = ε + Σ_k [φ¹_k x_{4k−3} + φ³_k x_{4k−2} + φ⁴_k x_{4k−3} x_{4k−2}
///      + φ⁵_k tanh(φ²_k x_{4k−1} + φ⁶_k x_{4k})]` (1-based `x`).
pub fn gene_response(x: &[f64], phis: &GenePhis, noise: f64) -> Result<f64> {
    let blocks = phis.blocks();
    if phis.phi.iter().any(|p| p.len() != blocks) {
        return Err(Error::InvalidInput("gene coefficient blocks differ in length".into()));
    }
    if x.len() < 4 * blocks {
        return Err(Error::DimensionMismatch {
            expected: 4 * blocks,
            got: x.len(),
        });
    }
    let [p1, p2, p3, p4, p5, p6] = &phis.phi;
    let mut y = noise;
    for k in 0..blocks {
        let (a, b, c, e) = (x[4 * k], x[4 * k + 1], x[4 * k + 2], x[4 * k + 3]);
        y += p1[k] * a + p3[k] * b + p4[k] * a * b + p5[k] * (p2[k] * c + p6[k] * e).tanh();
    }
    Ok(y)
}

/// AR Gaussian covariates with the gene response.
pub fn gen_gene<R: Rng + ?Sized>(spec: &BenchmarkSpec, rng: &mut R) -> Result<(Simulation, GenePhis)> {
    spec.validate()?;
    if spec.kind != BenchmarkKind::GeneResponse {
        return Err(Error::InvalidInput("gen_gene needs a gene_response spec".into()));
    }
    let x = gaussian_covariates(spec, rng)?;
    let phis = GenePhis::draw(spec.m, rng)?;
    let y = x
        .iter_rows()
        .map(|r| gene_response(r, &phis, StandardNormal.sample(rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Simulation {
            data: Dataset {
                x,
                y: Some(Response::Real(y)),
            },
            truth: spec.truth(),
            coefficients: Vec::new(),
            components: vec![0; spec.n],
        },
        phis,
    ))
}

pub fn simulate<R: Rng + ?Sized>(spec: &BenchmarkSpec, rng: &mut R) -> Result<Simulation> {
    match spec.kind {
        BenchmarkKind::Gaussian => gen_gaussian(spec, rng),
        BenchmarkKind::Mixture => gen_mixture(spec, rng),
        BenchmarkKind::GeneResponse => gen_gene(spec, rng).map(|(s, _)| s),
    }
}

/// Exact model-X knockoffs for `x ~ N(0, Σ)` with the equicorrelated
/// construction `s_j = min(1, 2 λ_min(Σ))` (Σ a correlation matrix):
/// `x̃ | x ~ N(x − sΣ⁻¹x, 2s − sΣ⁻¹s)`.
#[derive(Debug, Clone)]
pub struct GaussianKnockoffs {
    mean_map: DMatrix<f64>,
    root: DMatrix<f64>,
    s: f64,
}

impl GaussianKnockoffs {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let d = sigma.nrows();
        if sigma.ncols() != d {
            return Err(Error::InvalidInput("covariance must be square".into()));
        }
        let lambda_min = sigma.clone().symmetric_eigen().eigenvalues.min();
        if lambda_min <= 0.0 {
            return Err(Error::LinearAlgebra("covariance is not positive definite".into()));
        }
        let s = (2.0 * lambda_min).min(1.0);
        let inv = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::LinearAlgebra("covariance is not positive definite".into()))?
            .inverse();
        let identity = DMatrix::<f64>::identity(d, d);
        let mean_map = &identity - &inv * s;
        let cond_cov = &identity * (2.0 * s) - &inv * (s * s);
        let eig = cond_cov.symmetric_eigen();
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        Ok(Self { mean_map, root, s })
    }

    pub fn ar(d: usize, rho: f64) -> Result<Self> {
        Self::new(&ar_covariance(d, rho))
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        check_len(self.mean_map.nrows(), x.len())?;
        let z = DVector::from_fn(x.len(), |_, _| StandardNormal.sample(rng));
        let mean = &self.mean_map * DVector::from_column_slice(x);
        Ok((mean + &self.root * z).iter().copied().collect())
    }

    /// One knockoff row per data row; row `i` uses the stream `(seed, i)`.
    pub fn sample_matrix(&self, x: &DataMatrix, seed: u64) -> Result<DataMatrix> {
        let mut values = Vec::with_capacity(x.values().len());
        for (i, r) in x.iter_rows().enumerate() {
            values.extend(self.sample(r, &mut child_rng(seed, i as u64))?);
        }
        DataMatrix::new(x.names().to_vec(), x.rows(), values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    #[default]
    Hrt,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnockoffMethod {
    #[default]
    Ddlk,
    /// Exact Gaussian knockoffs from the known AR covariance.
    OracleGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub knockoffs: KnockoffMethod,
    /// `lambda` here is replaced by the benchmark's own value.
    pub train: TrainConfig,
    pub statistic: StatisticKind,
    pub response: ResponseSpec,
    pub p_grid: Vec<f64>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            knockoffs: KnockoffMethod::Ddlk,
            train: TrainConfig::default(),
            statistic: StatisticKind::Hrt,
            response: ResponseSpec::default(),
            p_grid: default_p_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub p: f64,
    pub fdp: f64,
    pub power: f64,
    #[serde(with = "crate::filter::infinite_as_null")]
    pub threshold: f64,
    pub n_selected: usize,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub truth: Vec<usize>,
    pub statistics: Vec<f64>,
    pub levels: Vec<LevelRecord>,
    /// Sign balance of the statistics of truly null features.
    pub null_signs: NullSignBalance,
    /// Best validation objective of knockoff training, when trained.
    pub knockoff_val_objective: Option<f64>,
    /// Epochs of knockoff training run, when trained.
    pub knockoff_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSeed {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p: f64,
    pub mean_fdp: f64,
    pub se_fdp: f64,
    pub mean_power: f64,
    pub se_power: f64,
}

/// Covariates and knockoffs of one replication, kept for histograms.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub seed: u64,
    pub x: DataMatrix,
    pub knockoffs: DataMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: BenchmarkSpec,
    pub method: MethodConfig,
    pub seeds: Vec<SeedRecord>,
    pub failed: Vec<FailedSeed>,
    pub curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub samples: Option<SamplePair>,
}

/// Mean and standard error (sample standard deviation over √n).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Mean/SE curves over the successful seeds, one point per grid level.
pub fn aggregate_curve(grid: &[f64], seeds: &[SeedRecord]) -> Vec<CurvePoint> {
    grid.iter()
        .enumerate()
        .map(|(i, &p)| {
            let fdp: Vec<f64> = seeds.iter().map(|s| s.levels[i].fdp).collect();
            let power: Vec<f64> = seeds.iter().map(|s| s.levels[i].power).collect();
            let (mean_fdp, se_fdp) = mean_and_se(&fdp);
            let (mean_power, se_power) = mean_and_se(&power);
            CurvePoint {
                p,
                mean_fdp,
                se_fdp,
                mean_power,
                se_power,
            }
        })
        .collect()
}

struct Knockoffs {
    train: DataMatrix,
    val: DataMatrix,
    test: DataMatrix,
    val_objective: Option<f64>,
    epochs: Option<usize>,
}

struct SplitData {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

/// Everything up to the statistics. The truth set is not an input.
fn statistics_stage(
    spec: &BenchmarkSpec,
    method: &MethodConfig,
    splits: &SplitData,
    seed: u64,
) -> Result<(KnockoffStatistics, Knockoffs)> {
    let knock = match method.knockoffs {
        KnockoffMethod::Ddlk => {
            let config = TrainConfig {
                lambda: spec.lambda,
                seed: derive_seed(seed, 2),
                ..method.train.clone()
            };
            let (model, report) = fit_ddlk(&splits.train.x, &splits.val.x, &config)?;
            let base = derive_seed(seed, 3);
            Knockoffs {
                train: model.sample_knockoffs(&splits.train.x, derive_seed(base, 0))?,
                val: model.sample_knockoffs(&splits.val.x, derive_seed(base, 1))?,
                test: model.sample_knockoffs(&splits.test.x, derive_seed(base, 2))?,
                val_objective: Some(report.knockoff.best_val_objective),
                epochs: Some(report.knockoff.epochs.len()),
            }
        }
        KnockoffMethod::OracleGaussian => {
            if spec.kind == BenchmarkKind::Mixture {
                return Err(Error::InvalidInput("oracle knockoffs need Gaussian covariates".into()));
            }
            let oracle = GaussianKnockoffs::ar(spec.d, spec.rho[0])?;
            let base = derive_seed(seed, 3);
            Knockoffs {
                train: oracle.sample_matrix(&splits.train.x, derive_seed(base, 0))?,
                val: oracle.sample_matrix(&splits.val.x, derive_seed(base, 1))?,
                test: oracle.sample_matrix(&splits.test.x, derive_seed(base, 2))?,
                val_objective: None,
                epochs: None,
            }
        }
    };
    let response = |d: &Dataset| {
        d.y.clone()
            .ok_or_else(|| Error::InvalidInput("benchmark data has no response".into()))
    };
    let (y_train, y_val, y_test) = (response(&splits.train)?, response(&splits.val)?, response(&splits.test)?);
    let train = TrainingData {
        x: &splits.train.x,
        xk: &knock.train,
        y: &y_train,
        val: (splits.val.x.rows() > 0).then_some((&splits.val.x, &y_val)),
    };
    let stat_seed = derive_seed(seed, 4);
    let w = match method.statistic {
        StatisticKind::Hrt => {
            fit_hrt_statistics(&method.response, &train, &splits.test.x, &y_test, &knock.test, stat_seed)?
        }
        StatisticKind::Mixture => {
            mixture_statistics(&method.response, &train, &splits.test.x, &y_test, &knock.test, stat_seed)?
        }
    };
    Ok((w, knock))
}

/// Threshold sweep and scoring against the truth set.
pub fn selection_stage(w: &KnockoffStatistics, truth: &[usize], grid: &[f64]) -> Result<Vec<LevelRecord>> {
    grid.iter()
        .map(|&p| {
            let sel = knockoff_threshold(w, p)?;
            let fp = fdp_and_power(&sel.selected, truth);
            Ok(LevelRecord {
                p,
                fdp: fp.fdp,
                power: fp.power,
                threshold: sel.threshold,
                n_selected: sel.selected.len(),
                selected: sel.selected,
            })
        })
        .collect()
}

fn run_seed(spec: &BenchmarkSpec, method: &MethodConfig, seed: u64) -> Result<(SeedRecord, SamplePair)> {
    let sim = simulate(spec, &mut child_rng(seed, 0))?;
    let split = split_rows(spec.n, (spec.split[0], spec.split[1], spec.split[2]), Some(&mut child_rng(seed, 1)))?;
    let splits = SplitData {
        train: sim.data.select_rows(&split.train),
        val: sim.data.select_rows(&split.val),
        test: sim.data.select_rows(&split.test),
    };
    let (w, knock) = statistics_stage(spec, method, &splits, seed)?;
    let levels = selection_stage(&w, &sim.truth, &method.p_grid)?;
    let nulls: Vec<usize> = (0..spec.d).filter(|j| !sim.truth.contains(j)).collect();
    let record = SeedRecord {
        seed,
        null_signs: null_sign_balance(&w, &nulls),
        truth: sim.truth,
        statistics: w.w,
        levels,
        knockoff_val_objective: knock.val_objective,
        knockoff_epochs: knock.epochs,
    };
    let x = splits.train.x.concat_rows(&splits.val.x)?.concat_rows(&splits.test.x)?;
    let knockoffs = knock.train.concat_rows(&knock.val)?.concat_rows(&knock.test)?;
    Ok((record, SamplePair { seed, x, knockoffs }))
}

/// Runs every replication seed of `spec`. Replications run concurrently;
/// a failing replication is recorded and the others continue.
pub fn run_experiment(spec: &BenchmarkSpec, method: &MethodConfig) -> Result<ExperimentResult> {
    spec.validate()?;
    method.train.validate()?;
    method.response.validate()?;
    if method.p_grid.is_empty() || method.p_grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidInput("nominal levels must lie in (0, 1)".into()));
    }
    let outcomes: Vec<Result<(SeedRecord, SamplePair)>> =
        spec.seeds.par_iter().map(|&s| run_seed(spec, method, s)).collect();
    let mut seeds = Vec::new();
    let mut failed = Vec::new();
    let mut samples = None;
    for (o, &seed) in outcomes.into_iter().zip(&spec.seeds) {
        match o {
            Ok((record, pair)) => {
                seeds.push(record);
                samples.get_or_insert(pair);
            }
            Err(e) => failed.push(FailedSeed {
                seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(ExperimentResult {
        curve: aggregate_curve(&method.p_grid, &seeds),
        spec: spec.clone(),
        method: method.clone(),
        seeds,
        failed,
        samples,
    })
}

/// Area under the ROC curve of `scores` for binary `labels` (ties count
/// one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over ties
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|l| **l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::InvalidInput("AUC needs both classes".into()));
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Linear and pairwise-product features of `[a, b]`.
fn quadratic_features(a: &[f64], b: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut f = v.clone();
    for i in 0..v.len() {
        for j in i..v.len() {
            f.push(v[i] * v[j]);
        }
    }
    f
}

fn probe_design(x: &DataMatrix, xk: &DataMatrix) -> Result<(DataMatrix, Vec<bool>)> {
    check_len(x.rows(), xk.rows())?;
    check_len(x.cols(), xk.cols())?;
    let mut rows = Vec::with_capacity(2 * x.rows());
    let mut labels = Vec::with_capacity(2 * x.rows());
    for (a, b) in x.iter_rows().zip(xk.iter_rows()) {
        rows.push(quadratic_features(a, b));
        labels.push(true);
        rows.push(quadratic_features(b, a));
        labels.push(false);
    }
    Ok((DataMatrix::from_rows(&rows)?, labels))
}

/// Two-sample swap test: an L2 logistic regression on quadratic features
/// is trained to tell `[x, x̃]` from its full swap `[x̃, x]`, and its AUC is
/// measured on held-out rows. Values near one half mean the pair looks
/// exchangeable to the probe.
pub fn swap_probe_auc(
    x_train: &DataMatrix,
    xk_train: &DataMatrix,
    x_test: &DataMatrix,
    xk_test: &DataMatrix,
) -> Result<f64> {
    let (ftrain, ltrain) = probe_design(x_train, xk_train)?;
    let (ftest, ltest) = probe_design(x_test, xk_test)?;
    let y = Response::Binary(ltrain.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect());
    let model = crate::response::ResponseModel::fit(&ResponseSpec::Ridge { alpha: 1.0 }, &ftrain, &y, None, 0)?;
    auc(&model.predict(&ftest)?, &ltest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub data: Vec<usize>,
    pub knockoffs: Vec<usize>,
}

/// Histograms of one feature for data and knockoffs over shared bins.
pub fn marginal_histogram(x: &[f64], xk: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 || x.is_empty() {
        return Err(Error::InvalidInput("histogram needs data and at least one bin".into()));
    }
    let lo = x.iter().chain(xk).copied().fold(f64::INFINITY, f64::min);
    let mut hi = x.iter().chain(xk).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let count = |v: &[f64]| {
        let mut c = vec![0; bins];
        for t in v {
            c[(((t - lo) / width) as usize).min(bins - 1)] += 1;
        }
        c
    };
    Ok(Histogram {
        edges,
        data: count(x),
        knockoffs: count(xk),
    })
}

/// Local maxima of a Gaussian kernel density estimate on a regular grid,
/// keeping peaks at least `min_relative_height` of the tallest. The
/// bandwidth defaults to Silverman's rule.
pub fn kde_modes(values: &[f64], bandwidth: Option<f64>, min_relative_height: f64) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return values.to_vec();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let h = bandwidth.unwrap_or(1.06 * sd * (n as f64).powf(-0.2)).max(1e-6);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let points = 1000;
    let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let density: Vec<f64> = grid
        .iter()
        .map(|g| values.iter().map(|v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    let top = density.iter().copied().fold(0.0, f64::max);
    (1..points - 1)
        .filter(|&i| {
            density[i] > density[i - 1] && density[i] >= density[i + 1] && density[i] >= min_relative_height * top
        })
        .map(|i| grid[i])
        .collect()
}
