//! Binomial lower-tail probabilities in log space.
//!
//! Point masses use Loader's saddle-point expansion (Stirling error plus a
//! deviance term), which keeps the log pmf accurate to a few ulps even for
//! extreme `n` and `p`. Tails are summed outward from the term nearest the
//! mode, and the complement is taken when `k` is above the mean so that
//! probabilities close to one keep full relative accuracy in the log.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `ln(n!) − ln(√(2πn) (n/e)^n)` for `n ≥ 1`.
fn stirling_error(n: u64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15 {
        // 15! < 2^53, so the factorial itself is exact
        let fact: f64 = (1..=n).map(|i| i as f64).product();
        let nf = n as f64;
        return fact.ln() - (0.5 * (2.0 * PI * nf).ln() + nf * nf.ln() - nf);
    }
    let nf = n as f64;
    let nn = nf * nf;
    (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / nf
}

/// Deviance term `x ln(x/m) + m − x`, stable when `x ≈ m`.
fn deviance(x: f64, m: f64) -> f64 {
    if (x - m).abs() < 0.1 * (x + m) {
        let v = (x - m) / (x + m);
        let mut s = (x - m) * v;
        let mut ej = 2.0 * x * v;
        let v2 = v * v;
        for j in 1..1000 {
            ej *= v2;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / m).ln() + m - x
    }
}

/// Natural log of `P(K = k)` for `K ~ Binomial(n, p)`, with `q = 1 − p`
/// supplied separately to avoid cancellation.
pub fn log_binom_pmf(k: u64, n: u64, p: f64, q: f64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let nf = n as f64;
    if k == 0 {
        if n == 0 {
            return 0.0;
        }
        return if p < 0.1 {
            -deviance(nf, nf * q) - nf * p
        } else {
            nf * q.ln()
        };
    }
    if k == n {
        return if q < 0.1 {
            -deviance(nf, nf * p) - nf * q
        } else {
            nf * p.ln()
        };
    }
    let kf = k as f64;
    let lc = stirling_error(n)
        - stirling_error(k)
        - stirling_error(n - k)
        - deviance(kf, nf * p)
        - deviance(nf - kf, nf * q);
    let lf = (2.0 * PI).ln() + kf.ln() + (-kf / nf).ln_1p();
    lc - 0.5 * lf
}

/// Natural log of `P(K ≤ k)` for `K ~ Binomial(n, p)`.
pub fn log_binom_lower_tail(k: u64, n: u64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("binomial probability {p} not in (0, 1)")));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
    }
    if k == n {
        return Ok(0.0);
    }
    let q = 1.0 - p;
    let odds = p / q;
    let mean = n as f64 * p;

    if (k as f64) < mean {
        // terms increase up to k; walk down from the anchor
        let anchor = log_binom_pmf(k, n, p, q);
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut j = k;
        while j > 0 {
            term *= j as f64 / ((n - j + 1) as f64 * odds);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            j -= 1;
        }
        Ok(anchor + sum.ln())
    } else {
        // complement: upper tail from k + 1, terms decreasing
        let first = k + 1;
        let anchor = log_binom_pmf(first, n, p, q);
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut j = first;
        while j < n {
            term *= (n - j) as f64 * odds / (j + 1) as f64;
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            j += 1;
        }
        let log_upper = anchor + sum.ln();
        Ok((-log_upper.exp()).ln_1p())
    }
}
