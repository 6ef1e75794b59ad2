//! StepMiner thresholds and packed binary matrices.
//!
//! A threshold is the cut point of the least-squares one-step fit to the
//! sorted feature values, placed halfway between the two segment means.
//! Bits are `1[x > τ]`, stored column-major as 64-bit words so that pair
//! contingency tables reduce to AND + popcount.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Features whose most common value covers at least this fraction of rows are
/// treated as degenerate.
pub const DEFAULT_DEGENERATE_FRACTION: f64 = 0.99;

/// Fitted step location for a single feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFit {
    pub threshold: f64,
    pub degenerate: bool,
    /// Number of values in the low segment of the best split (0 when degenerate).
    pub split: usize,
}

/// Sum of squared residuals of the best one-step fit for every split
/// `s ∈ 1..n` of sorted `values`, where the low segment is `values[..s]`.
/// Computed from prefix sums of mean-centred values.
pub fn split_sse(sorted: &[f64]) -> Vec<f64> {
    let n = sorted.len();
    let centre = sorted.iter().sum::<f64>() / n as f64;
    let total: f64 = sorted.iter().map(|v| v - centre).sum();
    let total_sq: f64 = sorted.iter().map(|v| (v - centre).powi(2)).sum();
    let mut sse = Vec::with_capacity(n.saturating_sub(1));
    let (mut s1, mut s2) = (0.0, 0.0);
    for (i, v) in sorted[..n - 1].iter().enumerate() {
        let c = v - centre;
        s1 += c;
        s2 += c * c;
        let lo = (i + 1) as f64;
        let hi = (n - i - 1) as f64;
        let h1 = total - s1;
        let h2 = total_sq - s2;
        let low = (s2 - s1 * s1 / lo).max(0.0);
        let high = (h2 - h1 * h1 / hi).max(0.0);
        sse.push(low + high);
    }
    sse
}

/// Fits the StepMiner threshold of one feature.
///
/// A feature is degenerate when its most frequent value accounts for at least
/// `degenerate_fraction` of the rows (all-equal input is always degenerate).
/// Degenerate features get `τ = max` so that they binarize to all zeros.
pub fn fit_threshold_with(values: &[f64], degenerate_fraction: f64) -> Result<StepFit> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid(format!("threshold fit needs at least 2 values, got {n}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite feature values"));

    let mut longest_run = 1;
    let mut run = 1;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
            longest_run = longest_run.max(run);
        } else {
            run = 1;
        }
    }
    let max = sorted[n - 1];
    if sorted[0] == max || longest_run as f64 >= degenerate_fraction * n as f64 {
        return Ok(StepFit {
            threshold: max,
            degenerate: true,
            split: 0,
        });
    }

    let sse = split_sse(&sorted);
    let scale = sse.iter().cloned().fold(0.0, f64::max);
    // prefix-sum rounding can split exact ties; treat near-equal SSE as tied
    let tol = 1e-12 * scale;
    let mut best = 0;
    for (s, &v) in sse.iter().enumerate().skip(1) {
        if v < sse[best] - tol {
            best = s;
        }
    }
    let split = best + 1;
    let low_mean = sorted[..split].iter().sum::<f64>() / split as f64;
    let high_mean = sorted[split..].iter().sum::<f64>() / (n - split) as f64;
    Ok(StepFit {
        threshold: 0.5 * (low_mean + high_mean),
        degenerate: false,
        split,
    })
}

/// [`fit_threshold_with`] using the default degeneracy cutoff.
pub fn fit_threshold(values: &[f64]) -> Result<StepFit> {
    fit_threshold_with(values, DEFAULT_DEGENERATE_FRACTION)
}

/// Per-feature thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizationModel {
    pub thresholds: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl BinarizationModel {
    /// Fits every column independently; parallel over columns.
    pub fn fit(values: &Matrix, degenerate_fraction: f64) -> Result<Self> {
        let fits: Vec<StepFit> = (0..values.cols())
            .into_par_iter()
            .map(|j| fit_threshold_with(&values.column(j), degenerate_fraction))
            .collect::<Result<_>>()?;
        Ok(Self {
            thresholds: fits.iter().map(|f| f.threshold).collect(),
            degenerate: fits.iter().map(|f| f.degenerate).collect(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.thresholds.len()
    }

    /// Two-column table: feature name and threshold, or `DEGENERATE`.
    pub fn to_table(&self, names: &[String]) -> String {
        let mut out = String::from("feature\tthreshold\n");
        for (j, name) in names.iter().enumerate() {
            if self.degenerate[j] {
                let _ = writeln!(out, "{name}\tDEGENERATE");
            } else {
                let _ = writeln!(out, "{name}\t{}", self.thresholds[j]);
            }
        }
        out
    }

    pub fn write_table(&self, names: &[String], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_table(names)).map_err(|e| Error::io(path, e))
    }
}

/// `n × d` bits, column-major, packed into 64-bit words. Padding bits past
/// row `n` in each column's last word are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    n: usize,
    d: usize,
    words_per_col: usize,
    bits: Vec<u64>,
}

impl BinaryMatrix {
    pub fn zeros(n: usize, d: usize) -> Self {
        let words_per_col = n.div_ceil(64);
        Self {
            n,
            d,
            words_per_col,
            bits: vec![0; words_per_col * d],
        }
    }

    /// Builds from a row-major closure.
    pub fn from_fn(n: usize, d: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(n, d);
        for j in 0..d {
            for i in 0..n {
                if f(i, j) {
                    m.set(i, j, true);
                }
            }
        }
        m
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn words_per_col(&self) -> usize {
        self.words_per_col
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[u64] {
        &self.bits[j * self.words_per_col..(j + 1) * self.words_per_col]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        let w = self.column(j)[i / 64];
        (w >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        assert!(i < self.n && j < self.d, "bit index out of range");
        let w = &mut self.bits[j * self.words_per_col + i / 64];
        if v {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self, j: usize) -> usize {
        self.column(j).iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Inverts column `j` in place, keeping padding bits clear.
    pub fn flip_column(&mut self, j: usize) {
        let n = self.n;
        let wpc = self.words_per_col;
        let col = &mut self.bits[j * wpc..(j + 1) * wpc];
        for w in col.iter_mut() {
            *w = !*w;
        }
        if n % 64 != 0 {
            col[wpc - 1] &= (1u64 << (n % 64)) - 1;
        }
    }
}

/// Applies thresholds with strict `>`; degenerate features give zero columns.
pub fn binarize(values: &Matrix, model: &BinarizationModel) -> Result<BinaryMatrix> {
    if values.cols() != model.n_features() {
        return Err(Error::DimensionMismatch {
            what: "binarization model width",
            expected: model.n_features(),
            found: values.cols(),
        });
    }
    let (n, d) = (values.rows(), values.cols());
    let mut out = BinaryMatrix::zeros(n, d);
    let wpc = out.words_per_col;
    out.bits
        .par_chunks_mut(wpc.max(1))
        .enumerate()
        .take(d)
        .for_each(|(j, col)| {
            if model.degenerate[j] {
                return;
            }
            let tau = model.thresholds[j];
            for i in 0..n {
                if values.get(i, j) > tau {
                    col[i / 64] |= 1 << (i % 64);
                }
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_is_degenerate() {
        let fit = fit_threshold(&[5.0, 5.0, 5.0, 5.0]).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.threshold, 5.0);
        let m = Matrix::from_rows(&[vec![5.0], vec![5.0]]).unwrap();
        let model = BinarizationModel::fit(&m, DEFAULT_DEGENERATE_FRACTION).unwrap();
        let b = binarize(&m, &model).unwrap();
        assert_eq!(b.count_ones(0), 0);
    }

    #[test]
    fn two_plateaus() {
        let fit = fit_threshold(&[0.0, 10.0, 0.0, 10.0, 0.0]).unwrap();
        assert_eq!(fit.split, 3);
        assert_eq!(fit.threshold, 5.0);
    }

    #[test]
    fn outlier_step() {
        let fit = fit_threshold(&[1.0, 2.0, 3.0, 100.0]).unwrap();
        assert_eq!(fit.split, 3);
        assert_eq!(fit.threshold, 51.0);
    }

    #[test]
    fn too_short() {
        assert!(fit_threshold(&[1.0]).is_err());
    }

    #[test]
    fn near_constant_is_degenerate() {
        let mut v = vec![0.0; 200];
        v[0] = 1.0;
        assert!(fit_threshold(&v).unwrap().degenerate);
        v[1] = 2.0;
        v[2] = 3.0;
        assert!(!fit_threshold(&v).unwrap().degenerate);
        // zero-inflated but informative
        let mut w = vec![0.0; 100];
        w.extend((1..=100).map(f64::from));
        let fit = fit_threshold(&w).unwrap();
        assert!(!fit.degenerate);
    }

    #[test]
    fn strict_inequality_at_threshold() {
        let m = Matrix::from_rows(&[vec![0.0], vec![5.0], vec![10.0]]).unwrap();
        let model = BinarizationModel {
            thresholds: vec![5.0],
            degenerate: vec![false],
        };
        let b = binarize(&m, &model).unwrap();
        assert!(!b.get(0, 0));
        assert!(!b.get(1, 0));
        assert!(b.get(2, 0));
    }

    #[test]
    fn padding_bits_stay_clear() {
        let n = 67;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, 1.0]).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let model = BinarizationModel {
            thresholds: vec![0.0, 0.0],
            degenerate: vec![false, false],
        };
        let mut b = binarize(&m, &model).unwrap();
        assert_eq!(b.words_per_col(), 2);
        assert_eq!(b.column(0)[1], (1u64 << 3) - 1);
        assert_eq!(b.count_ones(1), 67);
        b.flip_column(1);
        assert_eq!(b.column(1), &[0, 0]);
        b.flip_column(1);
        assert_eq!(b.column(1)[1] >> 3, 0);
    }

    #[test]
    fn dimension_mismatch() {
        let m = Matrix::zeros(3, 2);
        let model = BinarizationModel {
            thresholds: vec![0.0],
            degenerate: vec![false],
        };
        assert!(binarize(&m, &model).is_err());
    }

    #[test]
    fn table_format() {
        let model = BinarizationModel {
            thresholds: vec![5.0, 1.0],
            degenerate: vec![false, true],
        };
        let t = model.to_table(&["a".into(), "b".into()]);
        assert_eq!(t, "feature\tthreshold\na\t5\nb\tDEGENERATE\n");
    }
}
