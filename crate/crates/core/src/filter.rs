//! Knockoff statistics, the selection threshold and FDP/power accounting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataMatrix, Response};
use crate::error::{check_len, Error, Result};
use crate::response::{ResponseModel, ResponseSpec};
use crate::seeding::derive_seed;

/// Nominal levels 0.05, 0.10, …, 0.50.
pub fn default_p_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoffStatistics {
    pub w: Vec<f64>,
}

impl KnockoffStatistics {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("knockoff statistics must be finite".into()));
        }
        Ok(Self { w })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected feature indices (0-based, ascending).
    pub selected: Vec<usize>,
    /// `+∞` when nothing is selected; serialized as `null`.
    #[serde(with = "infinite_as_null")]
    pub threshold: f64,
    pub nominal_level: f64,
}

/// Serializes `+∞` as `null` and back.
pub mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Smallest `t ∈ {|w_j| : w_j ≠ 0}` with
/// `(1 + #{w_j ≤ −t}) / #{w_j ≥ t} ≤ p`; selects `{j : w_j ≥ t}`.
pub fn knockoff_threshold(w: &KnockoffStatistics, p: f64) -> Result<SelectionResult> {
    if w.is_empty() {
        return Err(Error::InvalidInput("empty statistic vector".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("nominal level must lie in (0, 1), got {p}")));
    }
    let mut sorted = w.w.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut candidates: Vec<f64> = w.w.iter().filter(|v| **v != 0.0).map(|v| v.abs()).collect();
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup();
    let n = sorted.len();
    let threshold = candidates
        .into_iter()
        .find(|&t| {
            let neg = sorted.partition_point(|v| *v <= -t);
            let pos = n - sorted.partition_point(|v| *v < t);
            pos > 0 && (1 + neg) as f64 / pos as f64 <= p
        })
        .unwrap_or(f64::INFINITY);
    let selected = (0..w.len()).filter(|&j| w.w[j] >= threshold).collect();
    Ok(SelectionResult {
        selected,
        threshold,
        nominal_level: p,
    })
}

fn check_aligned(x: &DataMatrix, xk: &DataMatrix, y: &Response) -> Result<()> {
    if x.rows() != xk.rows() || x.cols() != xk.cols() {
        return Err(Error::InvalidInput(format!(
            "knockoffs ({}x{}) are not aligned with the data ({}x{})",
            xk.rows(),
            xk.cols(),
            x.rows(),
            x.cols()
        )));
    }
    check_len(x.rows(), y.len())
}

/// Holdout statistics `w_j = 𝒲(D_test) − 𝒲(D̃_j,test)` for a fitted model,
/// where `D̃_j` has column `j` replaced by its knockoff.
pub fn hrt_statistics(
    model: &ResponseModel,
    x_test: &DataMatrix,
    y_test: &Response,
    xk_test: &DataMatrix,
) -> Result<KnockoffStatistics> {
    check_aligned(x_test, xk_test, y_test)?;
    let base = model.score(x_test, y_test)?;
    let w: Vec<Result<f64>> = (0..x_test.cols())
        .into_par_iter()
        .map(|j| Ok(base - model.score(&x_test.with_column_from(j, xk_test)?, y_test)?))
        .collect();
    KnockoffStatistics::new(w.into_iter().collect::<Result<_>>()?)
}

/// Training split with its knockoffs, plus an optional validation pair for
/// early stopping of network response models.
pub struct TrainingData<'a> {
    pub x: &'a DataMatrix,
    pub xk: &'a DataMatrix,
    pub y: &'a Response,
    pub val: Option<(&'a DataMatrix, &'a Response)>,
}

/// Fits one response model on the training data and returns holdout
/// statistics on the test split.
pub fn fit_hrt_statistics(
    spec: &ResponseSpec,
    train: &TrainingData<'_>,
    x_test: &DataMatrix,
    y_test: &Response,
    xk_test: &DataMatrix,
    seed: u64,
) -> Result<KnockoffStatistics> {
    let model = ResponseModel::fit(spec, train.x, train.y, train.val, seed)?;
    hrt_statistics(&model, x_test, y_test, xk_test)
}

/// Mixture statistics: for each feature `j` a fresh model is fitted on the
/// training rows stacked with a copy whose column `j` is the knockoff, then
/// scored as in [`hrt_statistics`].
pub fn mixture_statistics(
    spec: &ResponseSpec,
    train: &TrainingData<'_>,
    x_test: &DataMatrix,
    y_test: &Response,
    xk_test: &DataMatrix,
    seed: u64,
) -> Result<KnockoffStatistics> {
    check_aligned(train.x, train.xk, train.y)?;
    check_aligned(x_test, xk_test, y_test)?;
    let y_mix = train.y.concat(train.y);
    let w: Vec<Result<f64>> = (0..x_test.cols())
        .into_par_iter()
        .map(|j| {
            let x_mix = train.x.concat_rows(&train.x.with_column_from(j, train.xk)?)?;
            let model = ResponseModel::fit(spec, &x_mix, &y_mix, train.val, derive_seed(seed, j as u64))?;
            Ok(model.score(x_test, y_test)? - model.score(&x_test.with_column_from(j, xk_test)?, y_test)?)
        })
        .collect();
    KnockoffStatistics::new(w.into_iter().collect::<Result<_>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdpPower {
    pub fdp: f64,
    pub power: f64,
    /// Set when the truth set is empty; power is then reported as 0.
    pub empty_truth: bool,
}

/// `fdp = |Ŝ \ S| / max(|Ŝ|, 1)`, `power = |Ŝ ∩ S| / |S|`.
pub fn fdp_and_power(selected: &[usize], truth: &[usize]) -> FdpPower {
    let hits = selected.iter().filter(|j| truth.contains(j)).count();
    let false_hits = selected.len() - hits;
    FdpPower {
        fdp: false_hits as f64 / selected.len().max(1) as f64,
        power: if truth.is_empty() {
            0.0
        } else {
            hits as f64 / truth.len() as f64
        },
        empty_truth: truth.is_empty(),
    }
}

/// Sign counts of presumed-null statistics. Under valid knockoffs nonzero
/// null statistics are positive or negative with equal probability; a
/// positive fraction well above one half points to biased knockoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullSignBalance {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
    /// `positive / (positive + negative)`; `None` when all are zero.
    pub positive_fraction: Option<f64>,
}

/// Sign balance over the features in `nulls`.
pub fn null_sign_balance(w: &KnockoffStatistics, nulls: &[usize]) -> NullSignBalance {
    let (mut positive, mut negative, mut zero) = (0, 0, 0);
    for &j in nulls {
        match w.w[j].partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => positive += 1,
            Some(std::cmp::Ordering::Less) => negative += 1,
            _ => zero += 1,
        }
    }
    NullSignBalance {
        positive,
        negative,
        zero,
        positive_fraction: (positive + negative > 0).then(|| positive as f64 / (positive + negative) as f64),
    }
}

/// Without a known truth set, the features not selected at the most
/// liberal level of `grid` stand in for the nulls.
pub fn presumed_nulls(w: &KnockoffStatistics, grid: &[f64]) -> Result<Vec<usize>> {
    let p = grid.iter().copied().fold(f64::NAN, f64::max);
    if p.is_nan() {
        return Err(Error::InvalidInput("empty nominal-level grid".into()));
    }
    let sel = knockoff_threshold(w, p)?;
    Ok((0..w.len()).filter(|j| !sel.selected.contains(j)).collect())
}
