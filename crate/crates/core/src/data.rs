//! Datasets: the K-spirals generator, delimited-text loading and stratified
//! splits.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Labelled points. `x` is `N × D`, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<usize>,
    pub k: usize,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<usize>, k: usize) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(invalid("dataset has no points"));
        }
        if x.nrows() != y.len() {
            return Err(invalid(format!(
                "{} rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if k < 2 {
            return Err(invalid(format!("need at least 2 classes, got {k}")));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("dataset contains non-finite values"));
        }
        Ok(Self { x, y, k })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    /// Rows `idx` in the given order; keeps the class count.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(idx.len(), self.dim(), |i, j| self.x[(idx[i], j)]);
        let y = idx.iter().map(|&i| self.y[i]).collect();
        Dataset { x, y, k: self.k }
    }
}

/// Generates `k` interleaved Archimedean spirals in the plane.
///
/// Point `i` of class `c` sits at radius `turns · (0.5 + 0.5 t)` and angle
/// `2π · turns · t + 2π c / k`, with `t = i / (n_per_class − 1)`, plus
/// isotropic Gaussian jitter of standard deviation `noise_sd`. Points are
/// emitted class by class.
pub fn gen_spirals(
    k: usize,
    n_per_class: usize,
    noise_sd: f64,
    turns: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 {
        return Err(invalid(format!("spirals need k >= 2, got {k}")));
    }
    if n_per_class < 1 {
        return Err(invalid("spirals need at least one point per class"));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(invalid(format!("noise must be a finite value >= 0, got {noise_sd}")));
    }
    if !(turns > 0.0) || !turns.is_finite() {
        return Err(invalid(format!("turns must be positive, got {turns}")));
    }

    let mut rng = rng::stream(seed, rng::STREAM_SPIRALS);
    let n = k * n_per_class;
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for class in 0..k {
        let offset = 2.0 * PI * class as f64 / k as f64;
        for i in 0..n_per_class {
            let t = if n_per_class > 1 {
                i as f64 / (n_per_class - 1) as f64
            } else {
                0.0
            };
            let radius = turns * (0.5 + 0.5 * t);
            let angle = 2.0 * PI * turns * t + offset;
            let jx: f64 = StandardNormal.sample(&mut rng);
            let jy: f64 = StandardNormal.sample(&mut rng);
            let row = y.len();
            x[(row, 0)] = radius * angle.cos() + noise_sd * jx;
            x[(row, 1)] = radius * angle.sin() + noise_sd * jy;
            y.push(class);
        }
    }
    Dataset::new(x, y, k)
}

/// Original label strings, indexed by dense class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub names: Vec<String>,
}

impl LabelMap {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Loads a comma- or tab-separated file.
///
/// `label_col` selects the label column (`None` = last). A first row whose
/// feature cells are all non-numeric is treated as a header. Labels are
/// arbitrary strings, densely re-indexed in order of first appearance.
pub fn load_delimited(path: &Path, label_col: Option<usize>) -> Result<(Dataset, LabelMap)> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_delimited(&text, label_col).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })
}

fn parse_delimited(
    text: &str,
    label_col: Option<usize>,
) -> std::result::Result<(Dataset, LabelMap), String> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let Some(&(_, first)) = lines.first() else {
        return Err("file contains no rows".into());
    };
    let delim = if first.contains('\t') { '\t' } else { ',' };
    let split = |line: &str| -> Vec<String> {
        line.split(delim).map(|c| c.trim().to_string()).collect()
    };

    let arity = split(first).len();
    if arity < 2 {
        return Err(format!("need a label column and at least one feature, found {arity} column(s)"));
    }
    let label_col = label_col.unwrap_or(arity - 1);
    if label_col >= arity {
        return Err(format!("label column {label_col} out of range for {arity} columns"));
    }

    let first_cells = split(first);
    let is_header = first_cells
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label_col)
        .all(|(_, c)| c.parse::<f64>().is_err());
    let body = if is_header { &lines[1..] } else { &lines[..] };
    if body.is_empty() {
        return Err("file contains a header but no data rows".into());
    }

    let d = arity - 1;
    let mut values = Vec::with_capacity(body.len() * d);
    let mut labels = Vec::with_capacity(body.len());
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for &(line_no, line) in body {
        let cells = split(line);
        if cells.len() != arity {
            return Err(format!(
                "row at line {line_no} has {} columns, expected {arity}",
                cells.len()
            ));
        }
        for (j, cell) in cells.iter().enumerate() {
            if j == label_col {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                format!("line {line_no}, column {}: non-numeric value {cell:?}", j + 1)
            })?;
            if !v.is_finite() {
                return Err(format!(
                    "line {line_no}, column {}: non-finite value {cell:?}",
                    j + 1
                ));
            }
            values.push(v);
        }
        let name = &cells[label_col];
        let id = *index.entry(name.clone()).or_insert_with(|| {
            names.push(name.clone());
            names.len() - 1
        });
        labels.push(id);
    }
    let k = names.len();
    if k < 2 {
        return Err(format!("found {k} distinct label(s); need at least 2"));
    }
    let x = DMatrix::from_row_slice(labels.len(), d, &values);
    let ds = Dataset::new(x, labels, k).map_err(|e| e.to_string())?;
    Ok((ds, LabelMap { names }))
}

/// Rows of a file read against a known feature count: either exactly
/// `features` columns (no labels) or one more, the label.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub x: DMatrix<f64>,
    pub labels: Option<Vec<String>>,
}

/// Loads a comma- or tab-separated file for a model expecting `features`
/// inputs. `label_col` (default last) applies only when a label column is
/// present. Header detection as in [`load_delimited`].
pub fn load_table(path: &Path, features: usize, label_col: Option<usize>) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let Some(&(_, first)) = lines.first() else {
        return Err(parse_err("file contains no rows".into()));
    };
    let delim = if first.contains('\t') { '\t' } else { ',' };
    let split = |line: &str| -> Vec<String> {
        line.split(delim).map(|c| c.trim().to_string()).collect()
    };
    let arity = split(first).len();
    let label_col = if arity == features + 1 {
        let col = label_col.unwrap_or(arity - 1);
        if col >= arity {
            return Err(parse_err(format!("label column {col} out of range for {arity} columns")));
        }
        Some(col)
    } else if arity == features {
        None
    } else {
        return Err(invalid(format!(
            "file has {arity} columns; model expects {features} features (plus an optional label)"
        )));
    };
    let first_cells = split(first);
    let is_header = first_cells
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_col)
        .all(|(_, c)| c.parse::<f64>().is_err());
    let body = if is_header { &lines[1..] } else { &lines[..] };
    if body.is_empty() {
        return Err(parse_err("file contains a header but no data rows".into()));
    }
    let mut values = Vec::with_capacity(body.len() * features);
    let mut labels = label_col.map(|_| Vec::with_capacity(body.len()));
    for &(line_no, line) in body {
        let cells = split(line);
        if cells.len() != arity {
            return Err(parse_err(format!(
                "row at line {line_no} has {} columns, expected {arity}",
                cells.len()
            )));
        }
        for (j, cell) in cells.iter().enumerate() {
            if Some(j) == label_col {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(format!("line {line_no}, column {}: non-numeric value {cell:?}", j + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_err(format!(
                    "line {line_no}, column {}: non-finite value {cell:?}",
                    j + 1
                )));
            }
            values.push(v);
        }
        if let (Some(col), Some(out)) = (label_col, labels.as_mut()) {
            out.push(cells[col].clone());
        }
    }
    let x = DMatrix::from_row_slice(body.len(), features, &values);
    Ok(Table { x, labels })
}

/// Fractions of a random split plus its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fractions: Vec<f64>, seed: u64) -> Result<Self> {
        if fractions.is_empty() {
            return Err(invalid("split needs at least one fraction"));
        }
        if fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(invalid("split fractions must be positive"));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("split fractions sum to {total}, not 1")));
        }
        Ok(Self { fractions, seed })
    }
}

/// Row indices of each part of a class-stratified random split.
///
/// Within every class the shuffled points are dealt out by largest-remainder
/// rounding, so each part holds within one point of `fraction · class count`
/// of every class. Indices inside a part are ascending.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<Vec<Vec<usize>>> {
    let parts = spec.fractions.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.k];
    for (i, &c) in ds.y.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut rng = rng::stream(spec.seed, rng::STREAM_SPLIT);
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); parts];
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < parts {
            return Err(invalid(format!(
                "class {class} has {} point(s), fewer than the {parts} requested parts",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), &spec.fractions);
        let mut start = 0;
        for (part, &count) in counts.iter().enumerate() {
            out[part].extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Vec<Dataset>> {
    Ok(split_indices(ds, spec)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect())
}

fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &part in order.iter().take(n.saturating_sub(assigned)) {
        counts[part] += 1;
    }
    counts
}

/// Per-feature affine standardization fitted on one dataset and reused for
/// others. Constant features keep scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(invalid(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.scale[j]
        }))
    }
}
