//! Datasets, shift specifications, loss rules and fold plans.
//!
//! A [`Dataset`] is an immutable column store of real values with a separate
//! integer population column. Missing cells are stored as `NaN` and are never
//! imputed; whether a missing cell is acceptable depends on the active
//! [`ShiftSpec`] and is checked eagerly by [`validate_plan`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Tokens read as a missing cell.
const MISSING_TOKENS: [&str; 6] = ["", "NA", "na", "NaN", "nan", "null"];

/// Probabilities fed to cross-entropy are clipped to `[CE_CLIP, 1 − CE_CLIP]`.
pub const CE_CLIP: f64 = 1e-12;

/// Rectangular table of observations with a population label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    index: HashMap<String, usize>,
    columns: Vec<Vec<f64>>,
    pop: Vec<i64>,
    pop_column: String,
}

impl Dataset {
    /// Builds a dataset from named columns (missing = `NaN`) and population labels.
    pub fn new(pop_column: &str, pop: Vec<i64>, columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let n = pop.len();
        let mut names = Vec::with_capacity(columns.len());
        let mut index = HashMap::new();
        let mut values = Vec::with_capacity(columns.len());
        for (name, col) in columns {
            if name == pop_column {
                return Err(Error::Schema(format!(
                    "column '{name}' is also the population column"
                )));
            }
            if col.len() != n {
                return Err(Error::Schema(format!(
                    "column '{name}' has {} rows, expected {n}",
                    col.len()
                )));
            }
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(Error::Schema(format!("duplicate column name '{name}'")));
            }
            names.push(name);
            values.push(col);
        }
        Ok(Self {
            names,
            index,
            columns: values,
            pop,
            pop_column: pop_column.to_string(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.pop.len()
    }

    pub fn pop(&self) -> &[i64] {
        &self.pop
    }

    pub fn pop_column(&self) -> &str {
        &self.pop_column
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    /// The set 𝒜 of population labels present in the data.
    pub fn populations(&self) -> BTreeSet<i64> {
        self.pop.iter().copied().collect()
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.index
            .get(name)
            .map(|&j| self.columns[j].as_slice())
            .ok_or_else(|| Error::Validation(format!("unknown column '{name}'")))
    }

    pub fn is_missing(&self, row: usize, name: &str) -> Result<bool> {
        Ok(self.column(name)?[row].is_nan())
    }

    /// Row-major feature matrix over `cols` for `rows`; errors on a missing cell.
    pub fn features(&self, cols: &[String], rows: &[usize]) -> Result<Features> {
        let refs: Vec<&[f64]> = cols.iter().map(|c| self.column(c)).collect::<Result<_>>()?;
        let p = cols.len();
        let mut data = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            for (j, col) in refs.iter().enumerate() {
                let v = col[i];
                if v.is_nan() {
                    return Err(Error::Missing {
                        row: i,
                        column: cols[j].clone(),
                    });
                }
                data.push(v);
            }
        }
        Ok(Features::new(rows.len(), p, data))
    }

    /// Rows whose population label lies in `labels`.
    pub fn rows_in(&self, labels: &BTreeSet<i64>) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| labels.contains(&self.pop[i])).collect()
    }

    /// Content hash identifying the sample (column names, values and labels).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_rows() as u64).to_le_bytes());
        h.update(self.pop_column.as_bytes());
        for a in &self.pop {
            h.update(a.to_le_bytes());
        }
        let mut order: Vec<usize> = (0..self.names.len()).collect();
        order.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        for j in order {
            h.update([0u8]);
            h.update(self.names[j].as_bytes());
            for v in &self.columns[j] {
                let bits = if v.is_nan() { u64::MAX } else { v.to_bits() };
                h.update(bits.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// New dataset with rows reordered (or subset) by `rows`.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .names
            .iter()
            .zip(&self.columns)
            .map(|(name, col)| (name.clone(), rows.iter().map(|&i| col[i]).collect()))
            .collect();
        let pop = rows.iter().map(|&i| self.pop[i]).collect();
        Dataset::new(&self.pop_column, pop, columns).expect("subset of a valid dataset")
    }

    /// Adds (or replaces) a column.
    pub fn with_column(mut self, name: &str, values: Vec<f64>) -> Result<Dataset> {
        if values.len() != self.n_rows() {
            return Err(Error::Schema(format!(
                "column '{name}' has {} rows, expected {}",
                values.len(),
                self.n_rows()
            )));
        }
        if name == self.pop_column {
            return Err(Error::Schema(format!("'{name}' is the population column")));
        }
        match self.index.get(name) {
            Some(&j) => self.columns[j] = values,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.columns.push(values);
            }
        }
        Ok(self)
    }

    /// Writes the dataset as CSV (missing cells empty, population column last).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.names.iter().map(String::as_str).collect();
        header.push(&self.pop_column);
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = self
                .columns
                .iter()
                .map(|c| if c[i].is_nan() { String::new() } else { format!("{:?}", c[i]) })
                .collect();
            rec.push(self.pop[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Dense row-major matrix of feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * p, "feature buffer has wrong length");
        Self { n, p, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let p = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), p, data)
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.p + j]
    }

    pub fn select(&self, rows: &[usize]) -> Features {
        let mut data = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Features::new(rows.len(), self.p, data)
    }
}

/// Column declarations for [`load_dataset`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Schema {
    /// Name of the integer population column.
    pub pop_column: String,
    /// Columns to load; `None` loads every non-population column.
    pub columns: Option<Vec<String>>,
}

impl Schema {
    pub fn new(pop_column: &str) -> Self {
        Self {
            pop_column: pop_column.to_string(),
            columns: None,
        }
    }
}

/// Reads a CSV file with a header row.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema)
}

/// Reads CSV from any reader; see [`load_dataset`].
pub fn read_dataset<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut seen = BTreeSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(Error::Schema(format!("duplicate column name '{h}'")));
        }
    }
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("declared column '{name}' not in header")))
    };
    let pop_pos = position(&schema.pop_column)?;
    let wanted: Vec<String> = match &schema.columns {
        Some(cols) => cols.iter().filter(|c| **c != schema.pop_column).cloned().collect(),
        None => header.iter().filter(|h| **h != schema.pop_column).cloned().collect(),
    };
    let positions: Vec<usize> = wanted.iter().map(|c| position(c)).collect::<Result<_>>()?;

    let mut pop = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |pos: usize| record.get(pos).unwrap_or("");
        let a = cell(pop_pos);
        let parsed = a.parse::<i64>().ok().or_else(|| {
            a.parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0 && v.is_finite())
                .map(|v| v as i64)
        });
        pop.push(parsed.ok_or_else(|| Error::Parse {
            row,
            column: schema.pop_column.clone(),
            message: format!("population label '{a}' is not an integer"),
        })?);
        for (k, &pos) in positions.iter().enumerate() {
            let s = cell(pos);
            let v = if MISSING_TOKENS.contains(&s) {
                f64::NAN
            } else {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    column: wanted[k].clone(),
                    message: format!("cannot parse '{s}' as a number"),
                })?
            };
            cols[k].push(v);
        }
    }
    Dataset::new(&schema.pop_column, pop, wanted.into_iter().zip(cols).collect())
}

/// Declared shift condition: K ordered components Z₁..Z_K and, per level,
/// the populations S′_k whose conditional law of Z_k given Z̄_{k−1} matches
/// the target's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub components: Vec<Vec<String>>,
    pub sources: Vec<Vec<i64>>,
    pub target_observed: bool,
}

impl ShiftSpec {
    /// S′_k for level `k` in 1..=K.
    pub fn relevant(&self, k: usize) -> BTreeSet<i64> {
        self.sources[k - 1].iter().copied().collect()
    }

    /// S_k = S′_k \ {0}.
    pub fn sources_without_target(&self, k: usize) -> BTreeSet<i64> {
        self.sources[k - 1].iter().copied().filter(|&a| a != 0).collect()
    }

    pub fn contains(&self, k: usize, a: i64) -> bool {
        self.sources[k - 1].contains(&a)
    }

    /// Columns of Z̄_k = (Z₁, …, Z_k).
    pub fn cumulative_columns(&self, k: usize) -> Vec<String> {
        self.components[..k].iter().flatten().cloned().collect()
    }

    /// Largest level whose relevant set contains `a`, if any.
    pub fn deepest_level(&self, a: i64) -> Option<usize> {
        (1..=self.k).rev().find(|&k| self.contains(k, a))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("malformed shift specification: {e}")))
    }

    /// Checks the structural invariants that do not depend on data.
    pub fn check_structure(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Validation("K must be at least 1".into()));
        }
        if self.components.len() != self.k || self.sources.len() != self.k {
            return Err(Error::Validation(format!(
                "K = {} but {} component groups and {} source sets were given",
                self.k,
                self.components.len(),
                self.sources.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (k, group) in self.components.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Validation(format!("component {} has no columns", k + 1)));
            }
            for c in group {
                if !seen.insert(c.as_str()) {
                    return Err(Error::Validation(format!(
                        "column '{c}' appears in more than one component"
                    )));
                }
            }
        }
        for (k, s) in self.sources.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Validation(format!("empty source set at level {}", k + 1)));
            }
            if self.target_observed && !s.contains(&0) {
                return Err(Error::Validation(format!(
                    "target_observed is set but level {} source set omits the target 0",
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

/// Result of [`validate_shift_spec`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub populations: Vec<i64>,
    /// |{i : A_i ∈ S′_k}| for k = 1..K.
    pub subsample_sizes: Vec<usize>,
}

/// Confirms the [`ShiftSpec`] invariants against a dataset.
pub fn validate_shift_spec(spec: &ShiftSpec, data: &Dataset) -> Result<ValidationReport> {
    spec.check_structure()?;
    for c in spec.components.iter().flatten() {
        if !data.has_column(c) {
            return Err(Error::Validation(format!("shift specification references unknown column '{c}'")));
        }
    }
    let pops = data.populations();
    for s in &spec.sources {
        for a in s {
            if !pops.contains(a) && !(*a == 0 && !spec.target_observed) {
                return Err(Error::Validation(format!(
                    "population label {a} declared in the shift specification does not occur in the data"
                )));
            }
        }
    }
    if spec.target_observed && !pops.contains(&0) {
        return Err(Error::Validation(
            "target_observed is set but the data has no A = 0 rows".into(),
        ));
    }
    let subsample_sizes = (1..=spec.k)
        .map(|k| data.pop().iter().filter(|a| spec.contains(k, **a)).count())
        .collect();
    Ok(ValidationReport {
        populations: pops.into_iter().collect(),
        subsample_sizes,
    })
}

/// Eager plan-time check that every cell the estimator will read is present.
///
/// A row with label `a` is read at every level `k` with `a ∈ S′_k`, which
/// requires the columns of Z̄_k up to the deepest such level; rows in S′_K
/// additionally need a defined loss value.
pub fn validate_plan(spec: &ShiftSpec, data: &Dataset, loss_values: &[f64]) -> Result<ValidationReport> {
    let report = validate_shift_spec(spec, data)?;
    if loss_values.len() != data.n_rows() {
        return Err(Error::Validation("loss vector length differs from the row count".into()));
    }
    let cumulative: Vec<Vec<&[f64]>> = (1..=spec.k)
        .map(|k| {
            spec.cumulative_columns(k)
                .iter()
                .map(|c| data.column(c))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let names: Vec<Vec<String>> = (1..=spec.k).map(|k| spec.cumulative_columns(k)).collect();
    let mut depth_cache: BTreeMap<i64, Option<usize>> = BTreeMap::new();
    for (i, &a) in data.pop().iter().enumerate() {
        let depth = *depth_cache.entry(a).or_insert_with(|| spec.deepest_level(a));
        let Some(m) = depth else { continue };
        for (j, col) in cumulative[m - 1].iter().enumerate() {
            if col[i].is_nan() {
                return Err(Error::Validation(format!(
                    "column '{}' is missing at row {i} (population {a}) but is required by the shift specification",
                    names[m - 1][j]
                )));
            }
        }
        if spec.contains(spec.k, a) && loss_values[i].is_nan() {
            return Err(Error::Validation(format!(
                "loss is undefined at row {i} (population {a}) but is consumed by the estimator"
            )));
        }
    }
    Ok(report)
}

/// Rule producing a per-row loss ℓ(Z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossSpec {
    SquaredError { outcome: String, prediction: String },
    ZeroOne { outcome: String, prediction: String },
    CrossEntropy { outcome: String, prediction: String },
    Column { column: String },
    Difference { first: Box<LossSpec>, second: Box<LossSpec> },
}

impl LossSpec {
    pub fn squared_error(outcome: &str, prediction: &str) -> Self {
        LossSpec::SquaredError {
            outcome: outcome.into(),
            prediction: prediction.into(),
        }
    }

    /// Outcome columns, which must belong to a component of the shift spec.
    pub fn outcome_columns(&self) -> Vec<String> {
        match self {
            LossSpec::SquaredError { outcome, .. }
            | LossSpec::ZeroOne { outcome, .. }
            | LossSpec::CrossEntropy { outcome, .. } => vec![outcome.clone()],
            LossSpec::Column { .. } => Vec::new(),
            LossSpec::Difference { first, second } => {
                let mut v = first.outcome_columns();
                for c in second.outcome_columns() {
                    if !v.contains(&c) {
                        v.push(c);
                    }
                }
                v
            }
        }
    }

    /// Every column the loss reads that is not an outcome (predictions and
    /// precomputed loss columns).
    pub fn auxiliary_columns(&self) -> Vec<String> {
        match self {
            LossSpec::SquaredError { prediction, .. }
            | LossSpec::ZeroOne { prediction, .. }
            | LossSpec::CrossEntropy { prediction, .. } => vec![prediction.clone()],
            LossSpec::Column { column } => vec![column.clone()],
            LossSpec::Difference { first, second } => {
                let mut v = first.auxiliary_columns();
                for c in second.auxiliary_columns() {
                    if !v.contains(&c) {
                        v.push(c);
                    }
                }
                v
            }
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::SquaredError { outcome, prediction } => write!(f, "squared_error:{outcome}:{prediction}"),
            LossSpec::ZeroOne { outcome, prediction } => write!(f, "zero_one:{outcome}:{prediction}"),
            LossSpec::CrossEntropy { outcome, prediction } => write!(f, "cross_entropy:{outcome}:{prediction}"),
            LossSpec::Column { column } => write!(f, "column:{column}"),
            LossSpec::Difference { first, second } => write!(f, "difference:{first}|{second}"),
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    /// Grammar: `family:outcome:prediction`, `column:name`, or
    /// `difference:<loss>|<loss>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Validation(format!("invalid loss '{s}': {msg}"));
        if let Some(rest) = s.strip_prefix("difference:") {
            let (a, b) = rest
                .split_once('|')
                .ok_or_else(|| bad("difference needs two losses separated by '|'"))?;
            return Ok(LossSpec::Difference {
                first: Box::new(a.parse()?),
                second: Box::new(b.parse()?),
            });
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["column", c] if !c.is_empty() => Ok(LossSpec::Column { column: c.to_string() }),
            [family, o, p] if !o.is_empty() && !p.is_empty() => {
                let (outcome, prediction) = (o.to_string(), p.to_string());
                match *family {
                    "squared_error" => Ok(LossSpec::SquaredError { outcome, prediction }),
                    "zero_one" => Ok(LossSpec::ZeroOne { outcome, prediction }),
                    "cross_entropy" => Ok(LossSpec::CrossEntropy { outcome, prediction }),
                    other => Err(bad(&format!("unknown loss family '{other}'"))),
                }
            }
            _ => Err(bad("expected family:outcome:prediction or column:name")),
        }
    }
}

/// Evaluates ℓ(Z_i) on every row. Rows where a referenced cell is missing
/// hold `NaN`; whether such rows are consumed is checked by [`validate_plan`].
pub fn evaluate_loss(loss: &LossSpec, data: &Dataset) -> Result<Vec<f64>> {
    match loss {
        LossSpec::Column { column } => Ok(data.column(column)?.to_vec()),
        LossSpec::Difference { first, second } => {
            let a = evaluate_loss(first, data)?;
            let b = evaluate_loss(second, data)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        }
        LossSpec::SquaredError { outcome, prediction }
        | LossSpec::ZeroOne { outcome, prediction }
        | LossSpec::CrossEntropy { outcome, prediction } => {
            let y = data.column(outcome)?;
            let f = data.column(prediction)?;
            y.iter()
                .zip(f)
                .enumerate()
                .map(|(i, (&y, &f))| {
                    if y.is_nan() || f.is_nan() {
                        return Ok(f64::NAN);
                    }
                    match loss {
                        LossSpec::SquaredError { .. } => Ok((y - f) * (y - f)),
                        LossSpec::ZeroOne { .. } => Ok(if y == f { 0.0 } else { 1.0 }),
                        _ => cross_entropy(y, f).map_err(|m| Error::Domain(format!("row {i}: {m}"))),
                    }
                })
                .collect()
        }
    }
}

fn cross_entropy(y: f64, p: f64) -> std::result::Result<f64, String> {
    if !(0.0..=1.0).contains(&p) {
        return Err(format!("cross-entropy prediction {p} is not a probability"));
    }
    if !(0.0..=1.0).contains(&y) {
        return Err(format!("cross-entropy outcome {y} is not in [0, 1]"));
    }
    let q = p.clamp(CE_CLIP, 1.0 - CE_CLIP);
    Ok(-(y * q.ln() + (1.0 - y) * (1.0 - q).ln()))
}

/// Random partition of the rows into V folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub v: usize,
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn n_rows(&self) -> usize {
        self.assignment.len()
    }

    /// Sorted row indices of fold `v`.
    pub fn fold(&self, v: usize) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.assignment[i] == v).collect()
    }

    /// Sorted row indices outside fold `v`.
    pub fn out_of_fold(&self, v: usize) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.assignment[i] != v).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.v];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

/// Uniformly random partition of `0..n` into `v` folds, reproducible from `seed`.
pub fn make_folds(n: usize, v: usize, seed: u64) -> Result<FoldPlan> {
    if v < 1 || v > n {
        return Err(Error::Parameter(format!("fold count V = {v} must satisfy 1 ≤ V ≤ n = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed));
    let mut assignment = vec![0; n];
    for (j, &i) in perm.iter().enumerate() {
        assignment[i] = j % v;
    }
    Ok(FoldPlan { v, assignment, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csv(text: &str) -> Result<Dataset> {
        read_dataset(text.as_bytes(), &Schema::new("A"))
    }

    #[test]
    fn loads_small_file() {
        let d = csv("x1,y,A\n1,2,0\n3,,1\n5,6,0\n").unwrap();
        assert_eq!(d.n_rows(), 3);
        assert_eq!(d.populations().into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert!(d.is_missing(1, "y").unwrap());
        assert_eq!(d.column("x1").unwrap(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn population_set_from_labels() {
        let d = csv("x,A\n1,0\n2,1\n3,2\n").unwrap();
        assert_eq!(d.populations().into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn parse_and_schema_errors() {
        match csv("x,A\n1,0\nfoo,1\n") {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(csv("x,x,A\n1,2,0\n"), Err(Error::Schema(_))));
        let schema = Schema {
            pop_column: "A".into(),
            columns: Some(vec!["z".into()]),
        };
        assert!(matches!(read_dataset("x,A\n1,0\n".as_bytes(), &schema), Err(Error::Schema(_))));
    }

    fn cov_spec() -> ShiftSpec {
        ShiftSpec {
            k: 2,
            components: vec![vec!["x".into()], vec!["y".into()]],
            sources: vec![vec![0], vec![0, 1]],
            target_observed: true,
        }
    }

    #[test]
    fn validation_reports_sizes() {
        let d = csv("x,y,A\n1,2,0\n3,4,1\n5,6,1\n").unwrap();
        let r = validate_shift_spec(&cov_spec(), &d).unwrap();
        assert_eq!(r.subsample_sizes, vec![1, 3]);
    }

    #[test]
    fn validation_errors() {
        let d = csv("x,y,A\n1,2,0\n3,4,1\n").unwrap();
        let mut s = cov_spec();
        s.sources[1] = vec![];
        s.target_observed = false;
        let e = validate_shift_spec(&s, &d).unwrap_err().to_string();
        assert!(e.contains("empty source set"), "{e}");

        let mut s = cov_spec();
        s.components[1] = vec!["w".into()];
        let e = validate_shift_spec(&s, &d).unwrap_err().to_string();
        assert!(e.contains("'w'"), "{e}");

        let mut s = cov_spec();
        s.components[1] = vec!["x".into()];
        assert!(validate_shift_spec(&s, &d).is_err());

        let only_source = csv("x,y,A\n1,2,1\n").unwrap();
        let mut s = cov_spec();
        s.sources = vec![vec![0, 1], vec![0, 1]];
        assert!(validate_shift_spec(&s, &only_source).is_err());
    }

    #[test]
    fn plan_validation_flags_missing_required_cells() {
        let d = csv("x,y,A\n1,2,0\n3,,1\n").unwrap();
        let loss = vec![1.0, f64::NAN];
        // Covariate-shift layout reads y on source rows.
        assert!(validate_plan(&cov_spec(), &d, &loss).is_err());
        // Concept shift in features never reads source y.
        let xcon = ShiftSpec {
            k: 2,
            components: vec![vec!["x".into()], vec!["y".into()]],
            sources: vec![vec![0, 1], vec![0]],
            target_observed: true,
        };
        assert!(validate_plan(&xcon, &d, &loss).is_ok());
    }

    #[test]
    fn loss_examples() {
        let d = Dataset::new(
            "A",
            vec![0, 0, 0],
            vec![("y".into(), vec![1.0, 1.0, 1.0]), ("p".into(), vec![0.5, 1.0, 0.5])],
        )
        .unwrap();
        assert_eq!(evaluate_loss(&"squared_error:y:p".parse().unwrap(), &d).unwrap()[0], 0.25);
        assert_eq!(evaluate_loss(&"zero_one:y:p".parse().unwrap(), &d).unwrap()[1], 0.0);
        let ce = evaluate_loss(&"cross_entropy:y:p".parse().unwrap(), &d).unwrap();
        assert!((ce[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let bad = d.clone().with_column("q", vec![1.5, 0.5, 0.5]).unwrap();
        assert!(matches!(
            evaluate_loss(&"cross_entropy:y:q".parse().unwrap(), &bad),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn loss_grammar_round_trips() {
        for s in ["squared_error:y:f", "column:l", "difference:squared_error:y:f|zero_one:y:g"] {
            let l: LossSpec = s.parse().unwrap();
            assert_eq!(l.to_string(), s);
        }
        assert!("bogus:y:f".parse::<LossSpec>().is_err());
        assert!("squared_error:y".parse::<LossSpec>().is_err());
    }

    #[test]
    fn fold_examples() {
        let p = make_folds(10, 5, 7).unwrap();
        assert_eq!(p.sizes(), vec![2; 5]);
        let mut s = make_folds(7, 3, 99).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 3]);
        assert!(make_folds(3, 5, 1).is_err());
        assert!(make_folds(3, 0, 1).is_err());
    }

    #[test]
    fn shift_spec_json_field_names() {
        let s = ShiftSpec::from_json(
            r#"{"K":2,"components":[["x"],["y"]],"sources":[[0],[0,1]],"target_observed":true}"#,
        )
        .unwrap();
        assert_eq!(s, cov_spec());
        assert!(ShiftSpec::from_json("{\"K\":").is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_rows(n in 1usize..200, v in 1usize..12, seed in any::<u64>()) {
            prop_assume!(v <= n);
            let p = make_folds(n, v, seed).unwrap();
            let sizes = p.sizes();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<usize> = (0..v).flat_map(|f| p.fold(f)).collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(p, make_folds(n, v, seed).unwrap());
        }

        #[test]
        fn losses_nonnegative_and_difference_subtracts(
            rows in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3), 1..40)
        ) {
            let d = Dataset::new(
                "A",
                vec![0; rows.len()],
                vec![
                    ("y".into(), rows.iter().map(|r| r.0.round()).collect()),
                    ("f".into(), rows.iter().map(|r| r.1.round()).collect()),
                    ("g".into(), rows.iter().map(|r| r.2).collect()),
                ],
            ).unwrap();
            let se = evaluate_loss(&"squared_error:y:g".parse().unwrap(), &d).unwrap();
            let zo = evaluate_loss(&"zero_one:y:f".parse().unwrap(), &d).unwrap();
            let diff = evaluate_loss(&"difference:squared_error:y:g|zero_one:y:f".parse().unwrap(), &d).unwrap();
            for i in 0..rows.len() {
                prop_assert!(se[i] >= 0.0 && zo[i] >= 0.0);
                prop_assert_eq!(diff[i], se[i] - zo[i]);
            }
        }
    }
}
