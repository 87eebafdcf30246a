//! Covariate matrices, responses, CSV ingestion and per-column standardization.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Dense row-major `rows × cols` matrix of covariates with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    names: Vec<String>,
    rows: usize,
    values: Vec<f64>,
}

impl DataMatrix {
    pub fn new(names: Vec<String>, rows: usize, values: Vec<f64>) -> Result<Self> {
        check_len(rows * names.len(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("data matrix contains non-finite values".into()));
        }
        Ok(Self { names, rows, values })
    }

    /// Builds a matrix with generated column names `x1..xd`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(cols, r.len())?;
            values.extend_from_slice(r);
        }
        Self::new(default_names(cols), rows.len(), values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.cols();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so special-case zero columns
        let d = self.cols().max(1);
        let n = if self.cols() == 0 { 0 } else { self.rows };
        self.values.chunks_exact(d).take(n)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.cols());
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self {
            names: self.names.clone(),
            rows: idx.len(),
            values,
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let d = self.cols();
        Self {
            names: self.names.clone(),
            rows: end - start,
            values: self.values[start * d..end * d].to_vec(),
        }
    }

    /// Copy of `self` with column `j` taken from `other`.
    pub fn with_column_from(&self, j: usize, other: &DataMatrix) -> Result<Self> {
        check_len(self.rows, other.rows)?;
        check_len(self.cols(), other.cols())?;
        let d = self.cols();
        let mut values = self.values.clone();
        for i in 0..self.rows {
            values[i * d + j] = other.values[i * d + j];
        }
        Ok(Self {
            names: self.names.clone(),
            rows: self.rows,
            values,
        })
    }

    /// Stacks `other` below `self`.
    pub fn concat_rows(&self, other: &DataMatrix) -> Result<Self> {
        check_len(self.cols(), other.cols())?;
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(Self {
            names: self.names.clone(),
            rows: self.rows + other.rows,
            values,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        check_len(self.cols(), names.len())?;
        self.names = names;
        Ok(self)
    }

    /// Per-column (min, max).
    pub fn column_ranges(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.cols()];
        for r in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                o.0 = o.0.min(*v);
                o.1 = o.1.max(*v);
            }
        }
        out
    }
}

pub fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Response vector; binary responses hold 0/1 values.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Real(Vec<f64>),
    Binary(Vec<f64>),
}

impl Response {
    pub fn values(&self) -> &[f64] {
        match self {
            Response::Real(v) | Response::Binary(v) => v,
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Response::Binary(_))
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect();
        match self {
            Response::Real(v) => Response::Real(pick(v)),
            Response::Binary(v) => Response::Binary(pick(v)),
        }
    }

    pub fn concat(&self, other: &Response) -> Self {
        let mut v = self.values().to_vec();
        v.extend_from_slice(other.values());
        if self.is_binary() {
            Response::Binary(v)
        } else {
            Response::Real(v)
        }
    }

    /// Treats the values as binary when every entry is exactly 0 or 1.
    pub fn infer(values: Vec<f64>) -> Self {
        if !values.is_empty() && values.iter().all(|v| *v == 0.0 || *v == 1.0) {
            Response::Binary(values)
        } else {
            Response::Real(values)
        }
    }
}

/// Covariates plus optional response. The set of truly important features
/// is deliberately not part of this type: fitting code never sees it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DataMatrix,
    pub y: Option<Response>,
}

impl Dataset {
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: self.y.as_ref().map(|y| y.select(idx)),
        }
    }
}

/// Row indices of a train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `0..n` by the given fractions. With an RNG the rows are
/// shuffled first; without one the partition is contiguous.
pub fn split_rows<R: Rng + ?Sized>(n: usize, fractions: (f64, f64, f64), rng: Option<&mut R>) -> Result<Split> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        idx.shuffle(rng);
    }
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    if idx.len() < 2 {
        return Err(Error::InvalidInput(format!("training split of {} rows is too small", idx.len())));
    }
    Ok(Split { train: idx, val, test })
}

/// Affine per-column standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &DataMatrix) -> Result<Self> {
        let n = data.rows();
        if n < 2 {
            return Err(Error::InvalidInput("standardization needs at least two rows".into()));
        }
        let d = data.cols();
        let mut means = vec![0.0; d];
        for r in data.iter_rows() {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in data.iter_rows() {
            for j in 0..d {
                var[j] += (r[j] - means[j]).powi(2);
            }
        }
        let scales = var
            .iter()
            .map(|v| {
                let s = (v / (n - 1) as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { means, scales })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            means: vec![0.0; d],
            scales: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, data: &DataMatrix) -> Result<DataMatrix> {
        check_len(self.dim(), data.cols())?;
        let d = self.dim();
        let values = data
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.means[i % d]) / self.scales[i % d])
            .collect();
        Ok(DataMatrix {
            names: data.names.clone(),
            rows: data.rows,
            values,
        })
    }

    pub fn inverse(&self, data: &DataMatrix) -> Result<DataMatrix> {
        check_len(self.dim(), data.cols())?;
        let d = self.dim();
        let values = data
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.scales[i % d] + self.means[i % d])
            .collect();
        Ok(DataMatrix {
            names: data.names.clone(),
            rows: data.rows,
            values,
        })
    }
}

/// A parsed CSV: covariate columns plus the columns set aside by name.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub x: DataMatrix,
    /// Set-aside columns in file order, with their raw text cells.
    pub passthrough: Vec<(String, Vec<String>)>,
}

/// Reads a headered CSV. Columns named in `set_aside` are kept as raw text;
/// every other cell must parse as a finite number.
pub fn read_csv<R: Read>(reader: R, set_aside: &[String]) -> Result<CsvTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for name in set_aside {
        if !headers.contains(name) {
            return Err(Error::Parse {
                row: 0,
                column: name.clone(),
                message: "column not found in header".into(),
            });
        }
    }
    let keep: Vec<bool> = headers.iter().map(|h| !set_aside.contains(h)).collect();
    let names: Vec<String> = headers.iter().zip(&keep).filter(|(_, k)| **k).map(|(h, _)| h.clone()).collect();
    let mut passthrough: Vec<(String, Vec<String>)> = headers
        .iter()
        .zip(&keep)
        .filter(|(_, k)| !**k)
        .map(|(h, _)| (h.clone(), Vec::new()))
        .collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in rdr.records().enumerate() {
        // data rows are numbered from 1, after the header
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut p = 0;
        for (j, cell) in record.iter().enumerate() {
            if keep[j] {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    row,
                    column: headers[j].clone(),
                    message: format!("cannot parse {cell:?} as a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        column: headers[j].clone(),
                        message: "missing or non-finite value".into(),
                    });
                }
                values.push(v);
            } else {
                passthrough[p].1.push(cell.to_string());
                p += 1;
            }
        }
        rows += 1;
    }
    Ok(CsvTable {
        x: DataMatrix::new(names, rows, values)?,
        passthrough,
    })
}

/// Reads a headered CSV keeping exactly the `wanted` columns, in that
/// order, as covariates; all other columns are passed through as text.
pub fn read_csv_keep<R: Read>(mut reader: R, wanted: &[String]) -> Result<CsvTable> {
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    let headers: Vec<String> = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(raw.as_slice())
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for name in wanted {
        if !headers.contains(name) {
            return Err(Error::Parse {
                row: 0,
                column: name.clone(),
                message: "column not found in header".into(),
            });
        }
    }
    let set_aside: Vec<String> = headers.iter().filter(|h| !wanted.contains(h)).cloned().collect();
    let table = read_csv(raw.as_slice(), &set_aside)?;
    let order: Vec<usize> = wanted
        .iter()
        .map(|w| table.x.names().iter().position(|n| n == w).expect("checked above"))
        .collect();
    let d = order.len();
    let mut values = Vec::with_capacity(table.x.rows() * d);
    for r in table.x.iter_rows() {
        values.extend(order.iter().map(|&j| r[j]));
    }
    Ok(CsvTable {
        x: DataMatrix::new(wanted.to_vec(), table.x.rows(), values)?,
        passthrough: table.passthrough,
    })
}

/// Writes `x` (plus extra text columns appended on the right) as CSV.
pub fn write_csv<W: Write>(writer: W, x: &DataMatrix, extra: &[(String, Vec<String>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = x.names().iter().map(String::as_str).collect();
    header.extend(extra.iter().map(|(n, _)| n.as_str()));
    w.write_record(&header).map_err(csv_io)?;
    for (i, r) in x.iter_rows().enumerate() {
        let mut rec: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        for (_, col) in extra {
            rec.push(col[i].clone());
        }
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
