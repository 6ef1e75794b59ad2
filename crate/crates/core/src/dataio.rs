//! Dataset loading, stratified splitting, standardization and ANOVA F-test
//! feature preselection.
//!
//! Everything here is a pure function of its inputs. Splits are driven by a
//! seeded ChaCha8 stream, so the same `(labels, folds, seed)` always yields
//! the same plan on every platform.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Real-valued `n × d` feature matrix with names, sample ids and class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub values: Matrix,
    pub feature_names: Vec<String>,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        values: Matrix,
        feature_names: Vec<String>,
        sample_ids: Vec<String>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let (n, d) = (values.rows(), values.cols());
        if n < 2 {
            return Err(Error::invalid(format!("dataset needs at least 2 rows, got {n}")));
        }
        if d < 2 {
            return Err(Error::invalid(format!("dataset needs at least 2 features, got {d}")));
        }
        if feature_names.len() != d {
            return Err(Error::DimensionMismatch {
                what: "feature names",
                expected: d,
                found: feature_names.len(),
            });
        }
        if sample_ids.len() != n {
            return Err(Error::DimensionMismatch {
                what: "sample ids",
                expected: n,
                found: sample_ids.len(),
            });
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: n,
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= class_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if let Some(pos) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self {
            values,
            feature_names,
            sample_ids,
            labels,
            class_names,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.values.rows()
    }

    pub fn n_features(&self) -> usize {
        self.values.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Rows `idx` in the given order. The class list is kept intact so that
    /// class indices stay comparable across subsets.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            values: self.values.select_rows(idx),
            feature_names: self.feature_names.clone(),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn select_features(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            values: self.values.select_cols(idx),
            feature_names: idx.iter().map(|&j| self.feature_names[j].clone()).collect(),
            sample_ids: self.sample_ids.clone(),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
        }
    }

    /// Looks a class up by name, falling back to a numeric index.
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .or_else(|| name.parse::<usize>().ok().filter(|&i| i < self.n_classes()))
    }
}

/// How to interpret the columns of a CSV file.
#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub label_column: String,
    /// Column holding sample identifiers; row numbers are used when absent.
    pub id_column: Option<String>,
    /// Columns to ignore entirely (e.g. categorical metadata).
    pub drop_columns: Vec<String>,
}

impl CsvOptions {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            ..Self::default()
        }
    }
}

/// Result of [`load_csv`]: the dataset plus the number of rows discarded for
/// holding NaN or infinite values.
#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub dataset: LabeledDataset,
    pub rejected_rows: usize,
}

/// Reads a comma-separated file with a header row. Every column other than
/// the label, id and dropped columns must be numeric.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<CsvLoad> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();

    let find = |name: &str| header.iter().position(|h| h == name);
    let label_col = find(&opts.label_column).ok_or_else(|| Error::Csv {
        path: path.to_path_buf(),
        message: format!("label column '{}' not in header", opts.label_column),
    })?;
    let id_col = match &opts.id_column {
        Some(name) => Some(find(name).ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            message: format!("id column '{name}' not in header"),
        })?),
        None => None,
    };
    for name in &opts.drop_columns {
        if find(name).is_none() {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                message: format!("dropped column '{name}' not in header"),
            });
        }
    }
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != label_col && Some(c) != id_col && !opts.drop_columns.contains(&header[c]))
        .collect();

    let mut values = Vec::new();
    let mut sample_ids = Vec::new();
    let mut labels = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut class_lookup: HashMap<String, usize> = HashMap::new();
    let mut rejected_rows = 0;
    let mut row_buf = Vec::with_capacity(feature_cols.len());

    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        // header is line 1
        let line = i + 2;
        let label = record.get(label_col).unwrap_or("");
        if label.is_empty() {
            return Err(Error::Cell {
                row: line,
                column: header[label_col].clone(),
                message: "missing label".into(),
            });
        }
        row_buf.clear();
        let mut finite = true;
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::Cell {
                row: line,
                column: header[c].clone(),
                message: format!("non-numeric value '{cell}'"),
            })?;
            finite &= v.is_finite();
            row_buf.push(v);
        }
        if !finite {
            rejected_rows += 1;
            continue;
        }
        let class = *class_lookup.entry(label.to_string()).or_insert_with(|| {
            class_names.push(label.to_string());
            class_names.len() - 1
        });
        labels.push(class);
        values.extend_from_slice(&row_buf);
        sample_ids.push(match id_col {
            Some(c) => record.get(c).unwrap_or("").to_string(),
            None => format!("row{}", line - 1),
        });
    }

    let n = labels.len();
    let values = Matrix::from_vec(n, feature_cols.len(), values)?;
    let feature_names = feature_cols.iter().map(|&c| header[c].clone()).collect();
    let dataset = LabeledDataset::new(values, feature_names, sample_ids, labels, class_names)?;
    Ok(CsvLoad {
        dataset,
        rejected_rows,
    })
}

/// Assignment of samples to cross-validation folds, with a stratified
/// early-stopping holdout inside each training fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: usize,
    pub fold_of_sample: Vec<usize>,
    /// `val_masks[f][i]` is true when sample `i` is held out for early
    /// stopping while fold `f` is the test fold.
    pub val_masks: Vec<Vec<bool>>,
    pub seed: u64,
}

/// Index sets for one fold of a [`FoldPlan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    /// Whole training fold (fit + early-stopping rows).
    pub train: Vec<usize>,
    /// Training rows used for gradient steps.
    pub fit: Vec<usize>,
    /// Early-stopping rows.
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fraction of each training fold held out for early stopping.
pub const VAL_FRACTION: f64 = 0.15;

impl FoldPlan {
    pub fn split(&self, fold: usize) -> FoldSplit {
        let mut s = FoldSplit {
            train: Vec::new(),
            fit: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, &f) in self.fold_of_sample.iter().enumerate() {
            if f == fold {
                s.test.push(i);
            } else {
                s.train.push(i);
                if self.val_masks[fold][i] {
                    s.val.push(i);
                } else {
                    s.fit.push(i);
                }
            }
        }
        s
    }

    /// Number of samples of class `c` in fold `f`.
    pub fn count(&self, labels: &[usize], fold: usize, class: usize) -> usize {
        self.fold_of_sample
            .iter()
            .zip(labels)
            .filter(|&(&f, &c)| f == fold && c == class)
            .count()
    }
}

fn members_by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    members
}

/// Stratified k-fold assignment. Within each class the members are shuffled
/// and dealt round-robin, continuing the deal across classes so that fold
/// sizes also differ by at most one.
pub fn stratified_kfold(labels: &[usize], folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    let members = members_by_class(labels);
    for (c, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < folds {
            return Err(Error::ClassTooSmall {
                class: c.to_string(),
                count: m.len(),
                folds,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of_sample = vec![0; labels.len()];
    let mut dealt = 0usize;
    for m in &members {
        let mut m = m.clone();
        m.shuffle(&mut rng);
        for &i in &m {
            fold_of_sample[i] = dealt % folds;
            dealt += 1;
        }
    }

    let mut val_masks = Vec::with_capacity(folds);
    for f in 0..folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of_sample[i] != f).collect();
        let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let fold_seed = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(f as u64 + 1));
        let (_, held) = stratified_holdout(&train_labels, VAL_FRACTION, fold_seed)?;
        let mut mask = vec![false; labels.len()];
        for h in held {
            mask[train[h]] = true;
        }
        val_masks.push(mask);
    }
    Ok(FoldPlan {
        folds,
        fold_of_sample,
        val_masks,
        seed,
    })
}

/// Splits positions `0..labels.len()` into `(kept, held)` with
/// `round(fraction · n)` held rows, allocated across classes by largest
/// remainder. Both lists are returned in ascending order.
pub fn stratified_holdout(
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("holdout fraction {fraction} not in [0, 1)")));
    }
    let n = labels.len();
    let members = members_by_class(labels);
    let total = (fraction * n as f64).round() as usize;
    let ideal: Vec<f64> = members.iter().map(|m| fraction * m.len() as f64).collect();
    let mut take: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(take.iter().sum());
    for &c in &order {
        if remaining == 0 {
            break;
        }
        if take[c] < members[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held_mask = vec![false; n];
    for (m, &t) in members.iter().zip(&take) {
        let mut m = m.clone();
        m.shuffle(&mut rng);
        for &i in &m[..t] {
            held_mask[i] = true;
        }
    }
    let kept = (0..n).filter(|&i| !held_mask[i]).collect();
    let held = (0..n).filter(|&i| held_mask[i]).collect();
    Ok((kept, held))
}

/// One-way ANOVA F statistic for every feature. Features with zero
/// within-class scatter get `+∞` when the class means differ and `0` when
/// the feature is constant.
pub fn anova_f_scores(values: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    let n = values.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: n,
            found: labels.len(),
        });
    }
    let k_max = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k_max];
    for &c in labels {
        counts[c] += 1;
    }
    let present: Vec<usize> = (0..k_max).filter(|&c| counts[c] > 0).collect();
    let k = present.len();
    if k < 2 {
        return Err(Error::invalid("ANOVA F-test needs at least two classes present"));
    }

    let d = values.cols();
    let mut scores = Vec::with_capacity(d);
    let mut class_sum = vec![0.0; k_max];
    for j in 0..d {
        class_sum.iter_mut().for_each(|s| *s = 0.0);
        let mut total = 0.0;
        for i in 0..n {
            let v = values.get(i, j);
            class_sum[labels[i]] += v;
            total += v;
        }
        let grand = total / n as f64;
        let class_mean: Vec<f64> = (0..k_max)
            .map(|c| if counts[c] > 0 { class_sum[c] / counts[c] as f64 } else { 0.0 })
            .collect();
        let between: f64 = present
            .iter()
            .map(|&c| counts[c] as f64 * (class_mean[c] - grand).powi(2))
            .sum();
        let within: f64 = (0..n)
            .map(|i| (values.get(i, j) - class_mean[labels[i]]).powi(2))
            .sum();
        // sums of identical values can leave ulp-level residue in `within`
        let negligible = 1e-12 * (between + within);
        let f = if within <= negligible || n == k {
            if between > negligible {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            (between / (k - 1) as f64) / (within / (n - k) as f64)
        };
        scores.push(f);
    }
    Ok(scores)
}

/// Indices of the `m` features with the largest F statistic, best first;
/// ties go to the lower index.
pub fn anova_f_select(values: &Matrix, labels: &[usize], m: usize) -> Result<Vec<usize>> {
    if m > values.cols() {
        return Err(Error::invalid(format!(
            "cannot select {m} of {} features",
            values.cols()
        )));
    }
    let scores = anova_f_scores(values, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(m);
    Ok(idx)
}

/// Per-feature affine standardization fitted on training rows. Uses the
/// population standard deviation; constant features map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(rows: &Matrix) -> Result<Self> {
        let n = rows.rows();
        if n < 2 {
            return Err(Error::invalid("standardizer needs at least 2 training rows"));
        }
        let d = rows.cols();
        let mut means = Vec::with_capacity(d);
        let mut stddevs = Vec::with_capacity(d);
        let mut constant = Vec::with_capacity(d);
        for j in 0..d {
            let col = rows.column(j);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is_const = col.iter().all(|&v| v == col[0]);
            means.push(mean);
            stddevs.push(if is_const || var == 0.0 { 1.0 } else { var.sqrt() });
            constant.push(is_const);
        }
        Ok(Self {
            means,
            stddevs,
            constant,
        })
    }

    pub fn apply(&self, rows: &Matrix) -> Result<Matrix> {
        let d = self.means.len();
        if rows.cols() != d {
            return Err(Error::DimensionMismatch {
                what: "standardizer input width",
                expected: d,
                found: rows.cols(),
            });
        }
        let mut out = rows.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = if self.constant[j] {
                    0.0
                } else {
                    (*v - self.means[j]) / self.stddevs[j]
                };
            }
        }
        Ok(out)
    }
}

/// Writes one integer per line.
pub fn write_index_lines(path: impl AsRef<Path>, values: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        writeln!(w, "{v}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_index_lines(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|_| Error::Cell {
            row: i + 1,
            column: "index".into(),
            message: format!("not an index: '{line}'"),
        })?);
    }
    Ok(out)
}
