use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use knockoff_forge::autoregressive::fit_joint as fit_joint_model;
use knockoff_forge::benchmarks::{marginal_histogram, run_experiment, CurvePoint, StatisticKind};
use knockoff_forge::data::{read_csv, read_csv_keep, split_rows, write_csv, CsvTable, DataMatrix, Response, Standardizer};
use knockoff_forge::filter::{
    fit_hrt_statistics, infinite_as_null, knockoff_threshold, mixture_statistics, null_sign_balance, presumed_nulls,
    KnockoffStatistics, NullSignBalance, TrainingData,
};
use knockoff_forge::model_file::{ModelFile, ModelKind};
use knockoff_forge::seeding::{child_rng, derive_seed};
use knockoff_forge::trainer::{fit_knockoff as fit_knockoff_model, sample_knockoff_matrix};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{out_dir, write_atomic, write_json};
use crate::{CliError, Common};

pub const JOINT_FILE: &str = "joint.kfm";
pub const JOINT_HISTORY: &str = "joint_history.json";
pub const KNOCKOFF_FILE: &str = "knockoff.kfm";
pub const KNOCKOFF_HISTORY: &str = "knockoff_history.json";
pub const KNOCKOFFS_CSV: &str = "knockoffs.csv";
pub const SELECTION_REPORT: &str = "selection.json";
pub const CURVE_CSV: &str = "curve.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const KNOCKOFF_SUFFIX: &str = "_knockoff";

struct Prepared {
    config: RunConfig,
    out: PathBuf,
    seed: u64,
}

fn prepare(common: &Common) -> Result<Prepared, CliError> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(l) = common.lambda {
        config.train.lambda = l;
        config.benchmark.lambda = l;
    }
    if let Some(s) = common.seed {
        config.train.seed = s;
    }
    if let Some(s) = common.stat {
        config.statistic = s.into();
    }
    config.validate()?;
    let out = out_dir(common.out.as_ref(), config.out.as_ref());
    Ok(Prepared {
        seed: config.train.seed,
        config,
        out,
    })
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))
}

fn in_file(path: &Path, e: knockoff_forge::Error) -> CliError {
    match CliError::from(e) {
        CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn load_model(path: &Path, kind: ModelKind) -> Result<ModelFile, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let file = ModelFile::from_bytes(&bytes).map_err(|e| in_file(path, e))?;
    if file.kind != kind {
        return Err(CliError::Input(format!(
            "{} holds a {:?} model, expected {kind:?}",
            path.display(),
            file.kind
        )));
    }
    Ok(file)
}

/// Train/validation split of the fitting commands, shared so that
/// `fit-joint` and `fit-knockoff` see the same rows.
fn fit_split(x: &DataMatrix, config: &RunConfig, seed: u64) -> Result<(DataMatrix, DataMatrix), CliError> {
    let v = config.data.validation_fraction;
    let split = split_rows(x.rows(), (1.0 - v, v, 0.0), Some(&mut child_rng(seed, 0)))?;
    if split.val.is_empty() {
        return Err(CliError::Input("too few rows for a validation split".into()));
    }
    Ok((x.select_rows(&split.train), x.select_rows(&split.val)))
}

pub fn fit_joint(common: &Common, data: &Path, exclude: &[String]) -> Result<(), CliError> {
    let p = prepare(common)?;
    let mut set_aside = exclude.to_vec();
    if let Some(r) = &p.config.data.response_column {
        if !set_aside.contains(r) {
            set_aside.push(r.clone());
        }
    }
    let table = read_csv(open(data)?, &set_aside).map_err(|e| in_file(data, e))?;
    let (train, val) = fit_split(&table.x, &p.config, p.seed)?;
    let standardizer = Standardizer::fit(&train)?;
    let (joint, report) = fit_joint_model(
        &standardizer.transform(&train)?,
        &standardizer.transform(&val)?,
        &p.config.train,
        &mut child_rng(p.seed, 1),
    )?;
    let file = ModelFile {
        kind: ModelKind::Joint,
        column_names: table.x.names().to_vec(),
        standardizer,
        model: joint,
        sampler: None,
    };
    write_atomic(&p.out.join(JOINT_FILE), &file.to_bytes()?)?;
    write_json(&p.out.join(JOINT_HISTORY), &report)
}

pub fn fit_knockoff(common: &Common, data: &Path, joint_path: &Path) -> Result<(), CliError> {
    let p = prepare(common)?;
    let joint = load_model(joint_path, ModelKind::Joint)?;
    let table = read_csv_keep(open(data)?, &joint.column_names).map_err(|e| in_file(data, e))?;
    let (train, val) = fit_split(&table.x, &p.config, p.seed)?;
    let fit = fit_knockoff_model(
        &joint.model,
        &joint.standardizer.transform(&train)?,
        &joint.standardizer.transform(&val)?,
        &p.config.train,
        &mut child_rng(p.seed, 2),
    )?;
    let file = ModelFile {
        kind: ModelKind::Knockoff,
        column_names: joint.column_names,
        standardizer: joint.standardizer,
        model: fit.model,
        sampler: Some(fit.sampler),
    };
    write_atomic(&p.out.join(KNOCKOFF_FILE), &file.to_bytes()?)?;
    write_json(&p.out.join(KNOCKOFF_HISTORY), &fit.history)
}

fn csv_bytes(x: &DataMatrix, extra: &[(String, Vec<String>)]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_csv(&mut buf, x, extra)?;
    Ok(buf)
}

pub fn sample(common: &Common, model_path: &Path, data: &Path) -> Result<(), CliError> {
    let p = prepare(common)?;
    let model = load_model(model_path, ModelKind::Knockoff)?;
    let table = read_csv_keep(open(data)?, &model.column_names).map_err(|e| in_file(data, e))?;
    let knockoffs = sample_knockoff_matrix(&model.model, &model.standardizer, &table.x, p.seed)?;
    let names = model.column_names.iter().map(|n| format!("{n}{KNOCKOFF_SUFFIX}")).collect();
    let knockoffs = knockoffs.with_names(names)?;
    write_atomic(&p.out.join(KNOCKOFFS_CSV), &csv_bytes(&knockoffs, &table.passthrough)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSelection {
    pub p: f64,
    #[serde(with = "infinite_as_null")]
    pub threshold: f64,
    pub selected: Vec<String>,
    pub selected_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionReport {
    pub statistic: StatisticKind,
    pub response_column: String,
    pub seed: u64,
    pub split: [f64; 3],
    pub features: Vec<String>,
    pub w: Vec<f64>,
    pub levels: Vec<LevelSelection>,
    /// Sign balance over the features not selected at the largest level.
    pub null_sign_balance: NullSignBalance,
}

impl SelectionReport {
    /// Internal consistency of a (possibly deserialized) report.
    pub fn validate(&self) -> Result<(), String> {
        let d = self.features.len();
        if self.w.len() != d {
            return Err(format!("{} statistics for {d} features", self.w.len()));
        }
        for l in &self.levels {
            if !(l.p > 0.0 && l.p < 1.0) {
                return Err(format!("level {} outside (0, 1)", l.p));
            }
            let expect: Vec<usize> = (0..d).filter(|&j| self.w[j] >= l.threshold).collect();
            if l.selected_indices != expect {
                return Err(format!("selection at p={} disagrees with its threshold", l.p));
            }
            let names: Vec<String> = expect.iter().map(|&j| self.features[j].clone()).collect();
            if l.selected != names {
                return Err(format!("selected names at p={} disagree with indices", l.p));
            }
        }
        Ok(())
    }
}

/// Reads knockoff columns named `<feature>_knockoff`, or plain feature names.
fn read_knockoffs(path: &Path, names: &[String]) -> Result<CsvTable, CliError> {
    let suffixed: Vec<String> = names.iter().map(|n| format!("{n}{KNOCKOFF_SUFFIX}")).collect();
    match read_csv_keep(open(path)?, &suffixed) {
        Ok(t) => Ok(t),
        Err(_) => read_csv_keep(open(path)?, names).map_err(|e| in_file(path, e)),
    }
}

pub fn select(common: &Common, data: &Path, knockoffs: &Path, response: Option<String>) -> Result<(), CliError> {
    let p = prepare(common)?;
    let response = response
        .or_else(|| p.config.data.response_column.clone())
        .ok_or_else(|| CliError::Input("select needs --response or data.response_column".into()))?;
    let table = read_csv(open(data)?, std::slice::from_ref(&response)).map_err(|e| in_file(data, e))?;
    let raw_y = &table.passthrough[0].1;
    let y: Vec<f64> = raw_y
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            cell.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                CliError::Input(format!(
                    "{}: parse error at row {}, column {response}: cannot parse {cell:?} as a number",
                    data.display(),
                    i + 1
                ))
            })
        })
        .collect::<Result<_, _>>()?;
    let y = Response::infer(y);
    let x = table.x;
    let xk = read_knockoffs(knockoffs, x.names())?.x;
    if xk.rows() != x.rows() {
        return Err(CliError::Input(format!(
            "knockoffs have {} rows but the data has {}",
            xk.rows(),
            x.rows()
        )));
    }
    let s = p.config.data.select_split;
    let split = split_rows(x.rows(), (s[0], s[1], s[2]), Some(&mut child_rng(p.seed, 1)))?;
    if split.test.is_empty() {
        return Err(CliError::Input("too few rows for a test split".into()));
    }
    let (x_train, xk_train, y_train) = (x.select_rows(&split.train), xk.select_rows(&split.train), y.select(&split.train));
    let (x_val, y_val) = (x.select_rows(&split.val), y.select(&split.val));
    let (x_test, xk_test, y_test) = (x.select_rows(&split.test), xk.select_rows(&split.test), y.select(&split.test));
    let train = TrainingData {
        x: &x_train,
        xk: &xk_train,
        y: &y_train,
        val: (x_val.rows() > 0).then_some((&x_val, &y_val)),
    };
    let stat_seed = derive_seed(p.seed, 4);
    let spec = &p.config.response;
    let w: KnockoffStatistics = match p.config.statistic {
        StatisticKind::Hrt => fit_hrt_statistics(spec, &train, &x_test, &y_test, &xk_test, stat_seed)?,
        StatisticKind::Mixture => mixture_statistics(spec, &train, &x_test, &y_test, &xk_test, stat_seed)?,
    };
    let features = x.names().to_vec();
    let levels = p
        .config
        .p_grid
        .iter()
        .map(|&level| {
            let sel = knockoff_threshold(&w, level)?;
            Ok(LevelSelection {
                p: level,
                threshold: sel.threshold,
                selected: sel.selected.iter().map(|&j| features[j].clone()).collect(),
                selected_indices: sel.selected,
            })
        })
        .collect::<Result<Vec<_>, knockoff_forge::Error>>()?;
    let nulls = presumed_nulls(&w, &p.config.p_grid)?;
    let report = SelectionReport {
        statistic: p.config.statistic,
        response_column: response,
        seed: p.seed,
        split: s,
        features,
        null_sign_balance: null_sign_balance(&w, &nulls),
        w: w.w,
        levels,
    };
    report.validate().map_err(CliError::Numerical)?;
    write_json(&p.out.join(SELECTION_REPORT), &report)
}

fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("p,mean_fdp,se_fdp,mean_power,se_power\n");
    for c in curve {
        s.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?}\n",
            c.p, c.mean_fdp, c.se_fdp, c.mean_power, c.se_power
        ));
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    spec: &'a knockoff_forge::benchmarks::BenchmarkSpec,
    method: &'a knockoff_forge::benchmarks::MethodConfig,
    truth: Vec<usize>,
    completed_seeds: Vec<u64>,
    failed: &'a [knockoff_forge::benchmarks::FailedSeed],
    curve: &'a [CurvePoint],
    histogram_seed: Option<u64>,
}

pub fn benchmark(common: &Common) -> Result<(), CliError> {
    let p = prepare(common)?;
    let mut spec = p.config.benchmark.clone();
    if let Some(master) = common.seed {
        spec.seeds = (0..spec.seeds.len() as u64).map(|r| derive_seed(master, r)).collect();
    }
    let result = run_experiment(&spec, &p.config.method())?;
    for record in &result.seeds {
        write_json(&p.out.join(format!("seed_{}.json", record.seed)), record)?;
    }
    write_atomic(&p.out.join(CURVE_CSV), curve_csv(&result.curve).as_bytes())?;
    if let Some(pair) = &result.samples {
        let dir = p.out.join("histograms");
        for (j, name) in pair.x.names().iter().enumerate() {
            let h = marginal_histogram(&pair.x.column(j), &pair.knockoffs.column(j), p.config.data.histogram_bins)?;
            let mut s = String::from("bin_lo,bin_hi,data_count,knockoff_count\n");
            for b in 0..h.data.len() {
                s.push_str(&format!(
                    "{:?},{:?},{},{}\n",
                    h.edges[b],
                    h.edges[b + 1],
                    h.data[b],
                    h.knockoffs[b]
                ));
            }
            write_atomic(&dir.join(format!("{name}.csv")), s.as_bytes())?;
        }
    }
    write_json(
        &p.out.join(SUMMARY_JSON),
        &Summary {
            spec: &result.spec,
            method: &result.method,
            truth: spec.truth(),
            completed_seeds: result.seeds.iter().map(|s| s.seed).collect(),
            failed: &result.failed,
            curve: &result.curve,
            histogram_seed: result.samples.as_ref().map(|s| s.seed),
        },
    )?;
    if result.seeds.is_empty() {
        let reasons: Vec<String> = result.failed.iter().map(|f| format!("seed {}: {}", f.seed, f.error)).collect();
        return Err(CliError::Numerical(format!("every replication failed ({})", reasons.join("; "))));
    }
    Ok(())
}
