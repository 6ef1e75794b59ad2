//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use birdnet::binarize::BinaryMatrix;
use birdnet::mining::{BirType, Implication, MiningConfig};
use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};

/// Natural log of a positive big integer.
pub fn ln_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 1000 {
        return x.to_f64().unwrap().ln();
    }
    let shift = bits - 64;
    let top = (x >> shift).to_f64().unwrap();
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

/// `ln P(K ≤ k)` for `K ~ Bin(n, a/1000)`, for every `k` in `0..=n`, from
/// exact integer arithmetic: `N_j = C(n, j) a^j b^(n−j)` with `b = 1000 − a`
/// and total `1000^n`.
pub fn exact_lower_tails(n: u64, a: u64) -> Vec<f64> {
    let b = 1000 - a;
    let total = BigUint::from(1000u32).pow(n as u32);
    let ln_total = ln_big(&total);
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut term = BigUint::from(b).pow(n as u32);
    let mut cum = BigUint::zero();
    for j in 0..=n {
        cum += &term;
        let v = if &cum + &cum <= total {
            ln_big(&cum) - ln_total
        } else {
            let upper = &total - &cum;
            if upper.is_zero() {
                0.0
            } else {
                (-(ln_big(&upper) - ln_total).exp()).ln_1p()
            }
        };
        out.push(v);
        if j < n {
            term = term * BigUint::from((n - j) * a) / BigUint::from((j + 1) * b);
        }
    }
    out
}

/// Lower tail by direct linear-domain pmf recursion; fine for `n ≤ ~500`.
pub fn direct_lower_tail(k: usize, n: usize, p: f64) -> f64 {
    let q = 1.0 - p;
    let mut pmf = q.powi(n as i32);
    let mut sum = pmf;
    for j in 0..k {
        pmf *= (n - j) as f64 / (j + 1) as f64 * p / q;
        sum += pmf;
    }
    sum.min(1.0).ln()
}

struct Directional {
    btype: BirType,
    log_p: f64,
    exceptions: usize,
    fraction: f64,
    support: usize,
}

/// T0–T3 for `a → b`, counting straight from the rows.
fn directional(a: &[bool], b: &[bool], cfg: &MiningConfig) -> Vec<Directional> {
    let n = a.len();
    let ones_a = a.iter().filter(|&&v| v).count();
    let ones_b = b.iter().filter(|&&v| v).count();
    if ones_a == 0 || ones_a == n || ones_b == 0 || ones_b == n {
        return Vec::new();
    }
    let count = |va: bool, vb: bool| (0..n).filter(|&i| a[i] == va && b[i] == vb).count();
    let lo = 0.5 / n as f64;
    let pa = (ones_a as f64 / n as f64).clamp(lo, 1.0 - lo);
    let pb = (ones_b as f64 / n as f64).clamp(lo, 1.0 - lo);
    let mut out = Vec::new();
    // (type, antecedent value of a, forbidden value of b)
    for (btype, ante, forbidden) in [
        (BirType::T0, true, false),
        (BirType::T1, false, true),
        (BirType::T2, true, true),
        (BirType::T3, false, false),
    ] {
        let support = if ante { ones_a } else { n - ones_a };
        if support < cfg.min_support.max(1) {
            continue;
        }
        let exceptions = count(ante, forbidden);
        let fraction = exceptions as f64 / support as f64;
        if fraction > cfg.pi {
            continue;
        }
        let p0 = (if ante { pa } else { 1.0 - pa }) * (if forbidden { pb } else { 1.0 - pb });
        let log_p = direct_lower_tail(exceptions, n, p0);
        if log_p <= cfg.p_star.ln() {
            out.push(Directional {
                btype,
                log_p,
                exceptions,
                fraction,
                support,
            });
        }
    }
    out
}

fn edge(source: usize, target: usize, d: &Directional) -> Implication {
    Implication {
        source,
        target,
        btype: d.btype,
        log_p: d.log_p,
        exceptions: d.exceptions,
        exception_fraction: d.fraction,
        antecedent_support: d.support,
    }
}

/// Double loop over column pairs with the merge rule: an orientation
/// holding T0 and T1 (T2 and T3) gives one T4 (T5) edge `i ↔ j`, preferring
/// the `i → j` orientation, and removes T0/T1 (T2/T3) from both
/// orientations.
pub fn naive_mine(bits: &BinaryMatrix, cfg: &MiningConfig) -> Vec<Implication> {
    let (n, d) = (bits.n_rows(), bits.n_cols());
    let col = |j: usize| (0..n).map(|i| bits.get(i, j)).collect::<Vec<bool>>();
    let mut out = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            let (ci, cj) = (col(i), col(j));
            let fwd = directional(&ci, &cj, cfg);
            let rev = directional(&cj, &ci, cfg);
            let pick = |v: &[Directional], x: BirType, y: BirType| {
                let fx = v.iter().position(|e| e.btype == x)?;
                let fy = v.iter().position(|e| e.btype == y)?;
                Some((fx, fy))
            };
            let mut merged = |x: BirType, y: BirType, t: BirType| -> bool {
                let hit = pick(&fwd, x, y)
                    .map(|(a, b)| (&fwd[a], &fwd[b]))
                    .or_else(|| pick(&rev, x, y).map(|(a, b)| (&rev[a], &rev[b])));
                if let Some((a, b)) = hit {
                    out.push(Implication {
                        source: i,
                        target: j,
                        btype: t,
                        log_p: a.log_p.max(b.log_p),
                        exceptions: a.exceptions + b.exceptions,
                        exception_fraction: a.fraction.max(b.fraction),
                        antecedent_support: a.support + b.support,
                    });
                    true
                } else {
                    false
                }
            };
            let t4 = merged(BirType::T0, BirType::T1, BirType::T4);
            let t5 = merged(BirType::T2, BirType::T3, BirType::T5);
            let keep = |t: BirType| match t {
                BirType::T0 | BirType::T1 => !t4,
                _ => !t5,
            };
            out.extend(fwd.iter().filter(|e| keep(e.btype)).map(|e| edge(i, j, e)));
            out.extend(rev.iter().filter(|e| keep(e.btype)).map(|e| edge(j, i, e)));
        }
    }
    out
}

/// Relative difference with a floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
