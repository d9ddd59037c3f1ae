//! Shapiro–Wilk, Dunn's pairwise rank test, Holm adjustment and
//! mean / SD aggregation.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p: f64,
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Upper half of the antisymmetric Shapiro–Wilk coefficients, largest
/// first, via Royston's polynomial approximation.
fn sw_coefficients(n: usize) -> Vec<f64> {
    let half = n / 2;
    if n == 3 {
        return vec![FRAC_1_SQRT_2];
    }
    let nd = n as f64;
    let norm = std_normal();
    // m[i] for the i-th largest expected order statistic (positive).
    let m: Vec<f64> = (1..=half)
        .map(|i| -norm.inverse_cdf((i as f64 - 0.375) / (nd + 0.25)))
        .collect();
    let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
    let ssumm2 = summ2.sqrt();
    let rsn = 1.0 / nd.sqrt();
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    let mut a = vec![0.0; half];
    a[0] = m[0] / ssumm2 + poly(&C1, rsn);
    let (first, fac) = if n > 5 {
        a[1] = m[1] / ssumm2 + poly(&C2, rsn);
        let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
            / (1.0 - 2.0 * a[0] * a[0] - 2.0 * a[1] * a[1]))
            .sqrt();
        (2, fac)
    } else {
        let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a[0] * a[0])).sqrt();
        (1, fac)
    };
    for i in first..half {
        a[i] = m[i] / fac;
    }
    a
}

/// Shapiro–Wilk W with Royston's normalising transformation for the
/// p-value; exact for n = 3.
pub fn shapiro_wilk(sample: &[f64]) -> Result<ShapiroWilk> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "Shapiro–Wilk needs 3..=5000 values, got {n}"
        )));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::Degenerate(
            "Shapiro–Wilk sample has zero variance".into(),
        ));
    }
    let a = sw_coefficients(n);
    let mut coef = vec![0.0; n];
    for (i, &ai) in a.iter().enumerate() {
        coef[i] = -ai;
        coef[n - 1 - i] = ai;
    }
    // Squared correlation of the coefficients with the scaled order
    // statistics.
    let xs: Vec<f64> = x.iter().map(|v| v / range).collect();
    let (mc, mx) = (
        coef.iter().sum::<f64>() / n as f64,
        xs.iter().sum::<f64>() / n as f64,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (c, v) in coef.iter().zip(&xs) {
        let (da, db) = (c - mc, v - mx);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    let w = (sab * sab / (saa * sbb)).min(1.0);
    Ok(ShapiroWilk {
        w,
        p: sw_pvalue(w, n),
    })
}

fn sw_pvalue(w: f64, n: usize) -> f64 {
    if n == 3 {
        let p = 6.0 / PI * (w.sqrt().asin() - 0.75f64.sqrt().asin());
        return p.clamp(0.0, 1.0);
    }
    let nd = n as f64;
    let w1 = (1.0 - w).ln();
    let (y, mean, sd) = if n <= 11 {
        let gamma = poly(&[-2.273, 0.459], nd);
        if w1 >= gamma {
            return 1e-99;
        }
        let y = -(gamma - w1).ln();
        let mean = poly(&[0.544, -0.39978, 0.025054, -6.714e-4], nd);
        let sd = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], nd).exp();
        (y, mean, sd)
    } else {
        let ln_n = nd.ln();
        let mean = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], ln_n);
        let sd = poly(&[-0.4803, -0.082676, 0.0030302], ln_n).exp();
        (w1, mean, sd)
    };
    0.5 * erfc((y - mean) / sd * FRAC_1_SQRT_2)
}

/// Mid-ranks (1-based) of the pooled values and the tie term Σ(t³ − t).
fn mid_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DunnPair {
    pub i: usize,
    pub j: usize,
    pub z: f64,
    /// Two-sided, unadjusted.
    pub p: f64,
}

/// Dunn's test for every pair i < j, in lexicographic pair order.
pub fn dunn_test(groups: &[Vec<f64>]) -> Result<Vec<DunnPair>> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(
            "Dunn's test needs at least two groups".into(),
        ));
    }
    if let Some(g) = groups.iter().position(|g| g.is_empty()) {
        return Err(Error::InvalidArgument(format!("group {g} is empty")));
    }
    let pooled: Vec<f64> = groups.concat();
    let n = pooled.len() as f64;
    let (ranks, ties) = mid_ranks(&pooled);
    let var = n * (n + 1.0) / 12.0 - ties / (12.0 * (n - 1.0));
    if !(var > 0.0) {
        return Err(Error::Degenerate(
            "all values identical across groups".into(),
        ));
    }
    let mut means = Vec::with_capacity(groups.len());
    let mut at = 0;
    for g in groups {
        means.push(ranks[at..at + g.len()].iter().sum::<f64>() / g.len() as f64);
        at += g.len();
    }
    let mut out = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let se = (var * (1.0 / groups[i].len() as f64 + 1.0 / groups[j].len() as f64)).sqrt();
            let z = (means[i] - means[j]) / se;
            out.push(DunnPair {
                i,
                j,
                z,
                p: erfc(z.abs() * FRAC_1_SQRT_2).min(1.0),
            });
        }
    }
    Ok(out)
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[k]).min(1.0));
        out[k] = running;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub n: usize,
    pub mean: f64,
    /// Sample SD (n − 1); `None` for a single value.
    pub sd: Option<f64>,
}

/// `None` for an empty cell.
pub fn mean_sd(values: &[f64]) -> Option<CellStats> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(CellStats { n, mean, sd })
}
