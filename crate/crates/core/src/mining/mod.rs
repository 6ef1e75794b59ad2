//! Boolean implication mining over binarized features.
//!
//! For an ordered pair `(a, b)` four directional implications are tested,
//! each identified by the quadrant of the 2×2 table it forbids:
//!
//! | type | clause    | antecedent | exception quadrant |
//! |------|-----------|------------|--------------------|
//! | T0   | `A → B`   | `a = 1`    | `a = 1, b = 0`     |
//! | T1   | `¬A → ¬B` | `a = 0`    | `a = 0, b = 1`     |
//! | T2   | `A → ¬B`  | `a = 1`    | `a = 1, b = 1`     |
//! | T3   | `¬A → B`  | `a = 0`    | `a = 0, b = 0`     |
//!
//! An implication is asserted when its exception count is improbably small
//! under independence (`ln P(K ≤ k) ≤ ln p*` with `K ~ Bin(n, p₀)`, `p₀` the
//! product of the empirical marginals of the quadrant) and the exceptions
//! make up at most `π` of the antecedent's support. An ordered pair holding
//! both T0 and T1 becomes one T4 (`A ↔ B`) edge; both T2 and T3 becomes one
//! T5 (`A ↔ ¬B`) edge.

pub mod binomial;
mod graph;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use binomial::{log_binom_lower_tail, log_binom_pmf};
pub use graph::{deduplicate_and_cap, ImplicationGraph};

use crate::binarize::BinaryMatrix;
use crate::error::{Error, Result};

/// The six implication types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BirType {
    T0,
    T1,
    T2,
    T3,
    T4,
    T5,
}

impl BirType {
    pub const ALL: [BirType; 6] = [
        BirType::T0,
        BirType::T1,
        BirType::T2,
        BirType::T3,
        BirType::T4,
        BirType::T5,
    ];

    pub const DIRECTIONAL: [BirType; 4] = [BirType::T0, BirType::T1, BirType::T2, BirType::T3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_symmetric(self) -> bool {
        matches!(self, BirType::T4 | BirType::T5)
    }

    /// Polarity of the source and target literals, `true` meaning "high".
    pub fn literals(self) -> (bool, bool) {
        match self {
            BirType::T0 | BirType::T4 => (true, true),
            BirType::T1 => (false, false),
            BirType::T2 | BirType::T5 => (true, false),
            BirType::T3 => (false, true),
        }
    }

    /// Sign of the initial source and target weights of a unit bound to
    /// this type.
    pub fn weight_signs(self) -> (f64, f64) {
        match self {
            BirType::T0 | BirType::T4 => (1.0, 1.0),
            BirType::T1 => (-1.0, -1.0),
            BirType::T2 | BirType::T5 => (1.0, -1.0),
            BirType::T3 => (-1.0, 1.0),
        }
    }

    /// Propositional rendering over named atoms.
    pub fn render(self, a: &str, b: &str) -> String {
        let lit = |name: &str, high: bool| {
            if high {
                name.to_string()
            } else {
                format!("¬{name}")
            }
        };
        let (sa, sb) = self.literals();
        let arrow = if self.is_symmetric() { "↔" } else { "→" };
        format!("{} {arrow} {}", lit(a, sa), lit(b, sb))
    }

    pub fn parse(s: &str) -> Option<BirType> {
        BirType::ALL.into_iter().find(|t| t.to_string() == s)
    }
}

impl fmt::Display for BirType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.index())
    }
}

/// One mined edge.
///
/// For T4/T5 edges `log_p` is the larger (less significant) of the two
/// constituent tests, `exceptions` and `antecedent_support` are summed over
/// both constituents and `exception_fraction` is the larger of the two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Implication {
    pub source: usize,
    pub target: usize,
    pub btype: BirType,
    pub log_p: f64,
    pub exceptions: usize,
    pub exception_fraction: f64,
    pub antecedent_support: usize,
}

impl Implication {
    /// The rule over the given feature names, e.g. `¬A → ¬B`.
    pub fn render(&self, names: &[String]) -> String {
        self.btype.render(&names[self.source], &names[self.target])
    }
}

/// Mining thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Significance threshold on the exception lower tail.
    pub p_star: f64,
    /// Largest admissible exception fraction.
    pub pi: f64,
    /// Per-layer cap on retained implications.
    pub h_max: usize,
    /// Minimum number of implications for a layer to be built.
    pub mu: usize,
    /// Minimum antecedent support for an implication to be asserted.
    pub min_support: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            p_star: 1e-6,
            pi: 0.05,
            h_max: 5000,
            mu: 10,
            min_support: 5,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_star > 0.0 && self.p_star < 1.0) {
            return Err(Error::invalid(format!("p_star = {} not in (0, 1)", self.p_star)));
        }
        if !(self.pi >= 0.0 && self.pi < 0.5) {
            return Err(Error::invalid(format!("pi = {} not in [0, 0.5)", self.pi)));
        }
        Ok(())
    }
}

/// 2×2 table for a pair of bit columns; `n_ab` counts rows with `a = A`
/// and `b = B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Contingency {
    pub n: usize,
    pub n11: usize,
    pub n10: usize,
    pub n01: usize,
    pub n00: usize,
}

impl Contingency {
    pub fn from_columns(col_a: &[u64], col_b: &[u64], n: usize) -> Self {
        let mut n11 = 0usize;
        let mut ones_a = 0usize;
        let mut ones_b = 0usize;
        for (&a, &b) in col_a.iter().zip(col_b) {
            n11 += (a & b).count_ones() as usize;
            ones_a += a.count_ones() as usize;
            ones_b += b.count_ones() as usize;
        }
        Self {
            n,
            n11,
            n10: ones_a - n11,
            n01: ones_b - n11,
            n00: n + n11 - ones_a - ones_b,
        }
    }

    pub fn ones_a(&self) -> usize {
        self.n11 + self.n10
    }

    pub fn ones_b(&self) -> usize {
        self.n11 + self.n01
    }

    /// The table with the roles of `a` and `b` exchanged.
    pub fn transposed(&self) -> Self {
        Self {
            n10: self.n01,
            n01: self.n10,
            ..*self
        }
    }

    fn degenerate(&self) -> bool {
        let (a, b) = (self.ones_a(), self.ones_b());
        a == 0 || a == self.n || b == 0 || b == self.n
    }
}

/// Outcome of one directional test, before any merging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assertion {
    pub btype: BirType,
    pub log_p: f64,
    pub exceptions: usize,
    pub exception_fraction: f64,
    pub antecedent_support: usize,
}

/// Evaluates T0–T3 for `a → b` on a contingency table and returns those
/// that assert.
pub fn test_table(t: &Contingency, cfg: &MiningConfig) -> Vec<Assertion> {
    if t.degenerate() {
        return Vec::new();
    }
    let n = t.n;
    let nf = n as f64;
    let lo = 1.0 / (2.0 * nf);
    let clamp = |p: f64| p.clamp(lo, 1.0 - lo);
    let pa1 = clamp(t.ones_a() as f64 / nf);
    let pb1 = clamp(t.ones_b() as f64 / nf);
    let (pa0, pb0) = (1.0 - pa1, 1.0 - pb1);
    let support_a1 = t.ones_a();
    let support_a0 = n - support_a1;
    let log_p_star = cfg.p_star.ln();

    let candidates = [
        (BirType::T0, t.n10, support_a1, pa1 * pb0),
        (BirType::T1, t.n01, support_a0, pa0 * pb1),
        (BirType::T2, t.n11, support_a1, pa1 * pb1),
        (BirType::T3, t.n00, support_a0, pa0 * pb0),
    ];
    let mut out = Vec::new();
    for (btype, exceptions, support, p0) in candidates {
        if support < cfg.min_support.max(1) {
            continue;
        }
        let fraction = exceptions as f64 / support as f64;
        if fraction > cfg.pi {
            continue;
        }
        let log_p = log_binom_lower_tail(exceptions as u64, n as u64, p0)
            .expect("clamped probability is inside (0, 1)");
        if log_p <= log_p_star {
            out.push(Assertion {
                btype,
                log_p,
                exceptions,
                exception_fraction: fraction,
                antecedent_support: support,
            });
        }
    }
    out
}

/// Directional tests T0–T3 of `a → b` on packed bit columns. Degenerate
/// columns (all zeros or all ones) assert nothing.
pub fn test_pair(col_a: &[u64], col_b: &[u64], n: usize, cfg: &MiningConfig) -> Vec<Assertion> {
    test_table(&Contingency::from_columns(col_a, col_b, n), cfg)
}

fn to_edge(source: usize, target: usize, a: &Assertion) -> Implication {
    Implication {
        source,
        target,
        btype: a.btype,
        log_p: a.log_p,
        exceptions: a.exceptions,
        exception_fraction: a.exception_fraction,
        antecedent_support: a.antecedent_support,
    }
}

fn merge(i: usize, j: usize, x: &Assertion, y: &Assertion, btype: BirType) -> Implication {
    Implication {
        source: i,
        target: j,
        btype,
        log_p: x.log_p.max(y.log_p),
        exceptions: x.exceptions + y.exceptions,
        exception_fraction: x.exception_fraction.max(y.exception_fraction),
        antecedent_support: x.antecedent_support + y.antecedent_support,
    }
}

/// All edges asserted for the unordered pair `i < j`, in a fixed order:
/// merged T4/T5 first, then directional `i → j`, then `j → i`.
///
/// An orientation holding both T0 and T1 yields T4; one holding both T2 and
/// T3 yields T5. Once a pair is T4 (T5), its T0/T1 (T2/T3) assertions in
/// both orientations are absorbed into that edge.
pub fn mine_pair(i: usize, j: usize, t: &Contingency, cfg: &MiningConfig) -> Vec<Implication> {
    let fwd = test_table(t, cfg);
    let rev = test_table(&t.transposed(), cfg);
    if fwd.is_empty() && rev.is_empty() {
        return Vec::new();
    }
    let find = |v: &[Assertion], b: BirType| v.iter().find(|a| a.btype == b).copied();
    let both = |v: &[Assertion], x: BirType, y: BirType| match (find(v, x), find(v, y)) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };

    let mut out = Vec::new();
    let t4 = both(&fwd, BirType::T0, BirType::T1).or_else(|| both(&rev, BirType::T0, BirType::T1));
    let t5 = both(&fwd, BirType::T2, BirType::T3).or_else(|| both(&rev, BirType::T2, BirType::T3));
    if let Some((x, y)) = t4 {
        out.push(merge(i, j, &x, &y, BirType::T4));
    }
    if let Some((x, y)) = t5 {
        out.push(merge(i, j, &x, &y, BirType::T5));
    }
    let absorbed = |b: BirType| match b {
        BirType::T0 | BirType::T1 => t4.is_some(),
        BirType::T2 | BirType::T3 => t5.is_some(),
        _ => false,
    };
    out.extend(fwd.iter().filter(|a| !absorbed(a.btype)).map(|a| to_edge(i, j, a)));
    out.extend(rev.iter().filter(|a| !absorbed(a.btype)).map(|a| to_edge(j, i, a)));
    out
}

/// Whether mining may use the rayon thread pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

/// Tests every unordered pair of columns and assembles the typed graph.
/// Pairs are visited `(i, j)`, `i < j`, row-major; the output order is the
/// same in sequential and parallel mode.
pub fn mine_birs(
    bits: &BinaryMatrix,
    names: &[String],
    cfg: &MiningConfig,
    exec: Execution,
) -> Result<ImplicationGraph> {
    cfg.validate()?;
    let d = bits.n_cols();
    if names.len() != d {
        return Err(Error::DimensionMismatch {
            what: "vertex names",
            expected: d,
            found: names.len(),
        });
    }
    let n = bits.n_rows();
    let usable: Vec<bool> = (0..d)
        .map(|j| {
            let ones = bits.count_ones(j);
            ones > 0 && ones < n
        })
        .collect();

    let row = |i: usize| -> Vec<Implication> {
        if !usable[i] {
            return Vec::new();
        }
        let col_i = bits.column(i);
        let mut edges = Vec::new();
        for j in (i + 1)..d {
            if !usable[j] {
                continue;
            }
            let t = Contingency::from_columns(col_i, bits.column(j), n);
            edges.extend(mine_pair(i, j, &t, cfg));
        }
        edges
    };
    let rows: Vec<Vec<Implication>> = match exec {
        Execution::Sequential => (0..d).map(row).collect(),
        Execution::Parallel => (0..d).into_par_iter().map(row).collect(),
    };
    Ok(ImplicationGraph::new(
        names.to_vec(),
        rows.into_iter().flatten().collect(),
    ))
}
