//! Otsu threshold over a 256-bin histogram, in exact integer arithmetic.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::raster::GrayImage;

pub const BINS: usize = 256;

pub type Histogram = [u64; BINS];

/// Bin of a value in [0, 1]: bin k holds (k/256, (k+1)/256], bin 0 also
/// holds 0.
pub fn bin_of(v: f64) -> usize {
    ((v * BINS as f64).ceil() - 1.0).clamp(0.0, (BINS - 1) as f64) as usize
}

/// Upper edge of bin `t`; a value is above it exactly when its bin exceeds `t`.
pub fn bin_threshold(t: usize) -> f64 {
    (t + 1) as f64 / BINS as f64
}

pub fn histogram(values: &[f64]) -> Histogram {
    let mut h = [0u64; BINS];
    for &v in values {
        h[bin_of(v)] += 1;
    }
    h
}

/// 256-bit unsigned product of a `u128` and a `u64`, as (high, low) halves
/// of 128 and 64 bits.
fn widening_mul(a: u128, b: u64) -> (u128, u64) {
    let lo = (a as u64 as u128) * b as u128;
    let hi = (a >> 64) * b as u128 + (lo >> 64);
    (hi, lo as u64)
}

/// Between-class variance at split `t` up to the common factor 1/N², as the
/// fraction (n1·S0 − n0·S1)² / (n0·n1).
#[derive(Debug, Clone, Copy)]
struct Score {
    num: u128,
    den: u64,
}

impl Score {
    fn cmp(&self, other: &Score) -> Ordering {
        widening_mul(self.num, other.den).cmp(&widening_mul(other.num, self.den))
    }
}

/// Bin maximising the between-class variance for the split bins ≤ t vs
/// bins > t; the lowest bin wins ties. `None` when fewer than two bins are
/// occupied.
pub fn otsu_bin(hist: &Histogram) -> Option<usize> {
    let n: u64 = hist.iter().sum();
    let s: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best: Option<(usize, Score)> = None;
    for (t, &c) in hist.iter().enumerate().take(BINS - 1) {
        n0 += c;
        s0 += t as u128 * c as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = s - s0;
        let d = (n1 as u128 * s0).abs_diff(n0 as u128 * s1);
        let score = Score {
            num: d * d,
            den: n0 * n1,
        };
        if best.is_none_or(|(_, b)| score.cmp(&b) == Ordering::Greater) {
            best = Some((t, score));
        }
    }
    best.map(|(t, _)| t)
}

/// Otsu threshold of a map normalised to [0, 1]. When every value falls in
/// one bin the threshold is the map maximum, so a constant map thresholds
/// at its own value.
pub fn otsu_threshold(map: &GrayImage) -> Result<f64> {
    if map.values.is_empty() {
        return Err(Error::InvalidArgument(
            "Otsu threshold of an empty map".into(),
        ));
    }
    if let Some(v) = map.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "saliency value {v} outside [0, 1]"
        )));
    }
    Ok(match otsu_bin(&histogram(&map.values)) {
        Some(t) => bin_threshold(t),
        None => map.max(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook ω0·ω1·(μ0 − μ1)² in floating point, first maximum.
    fn brute_force(hist: &Histogram) -> Option<usize> {
        let n: f64 = hist.iter().map(|&c| c as f64).sum();
        let mut best: Option<(usize, f64)> = None;
        for t in 0..BINS - 1 {
            let (mut w0, mut m0, mut w1, mut m1) = (0.0, 0.0, 0.0, 0.0);
            for (i, &c) in hist.iter().enumerate() {
                if i <= t {
                    w0 += c as f64;
                    m0 += i as f64 * c as f64;
                } else {
                    w1 += c as f64;
                    m1 += i as f64 * c as f64;
                }
            }
            if w0 == 0.0 || w1 == 0.0 {
                continue;
            }
            let v = (w0 / n) * (w1 / n) * (m0 / w0 - m1 / w1).powi(2);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        best.map(|(t, _)| t)
    }

    #[test]
    fn binning_edges() {
        assert_eq!(bin_of(0.0), 0);
        assert_eq!(bin_of(1.0 / 256.0), 0);
        assert_eq!(bin_of(1.0 / 256.0 + 1e-12), 1);
        assert_eq!(bin_of(1.0), 255);
        for t in [0, 17, 128, 254] {
            assert_eq!(bin_of(bin_threshold(t)), t);
        }
    }

    #[test]
    fn two_modes_split_between_them() {
        let map = GrayImage::from_fn(10, 10, |c, _| if c < 5 { 0.0 } else { 1.0 });
        let t = otsu_threshold(&map).unwrap();
        assert_eq!(t, bin_threshold(0));
        assert_eq!(Some(0), brute_force(&histogram(&map.values)));
        assert_eq!(map.values.iter().filter(|&&v| v > t).count(), 50);
    }

    #[test]
    fn constant_map_thresholds_at_its_value() {
        let map = GrayImage::from_fn(4, 4, |_, _| 0.37);
        assert_eq!(otsu_threshold(&map).unwrap(), 0.37);
        assert!(otsu_threshold(&GrayImage::new(0, 0)).is_err());
        assert!(otsu_threshold(&GrayImage::from_fn(2, 1, |c, _| c as f64 * 2.0)).is_err());
    }

    #[test]
    fn ties_go_to_the_lowest_bin() {
        // Symmetric three-spike histogram: splits after bin 0 and after bin
        // 1 score equally.
        let mut h = [0u64; BINS];
        h[0] = 5;
        h[1] = 0;
        h[2] = 5;
        assert_eq!(otsu_bin(&h), Some(0));
        h[1] = 3;
        // 5, 3, 5: both splits tie again.
        assert_eq!(otsu_bin(&h), Some(0));
    }

    #[test]
    fn large_counts_do_not_overflow() {
        let mut h = [0u64; BINS];
        h[0] = 300_000;
        h[255] = 109_600;
        h[100] = 7;
        assert_eq!(otsu_bin(&h), brute_force(&h));
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(counts in proptest::collection::vec(0u64..500, BINS)) {
            let mut h = [0u64; BINS];
            h.copy_from_slice(&counts);
            prop_assert_eq!(otsu_bin(&h), brute_force(&h));
        }

        #[test]
        fn sparse_histograms_match(spikes in proptest::collection::vec((0usize..BINS, 1u64..2000), 1..6)) {
            let mut h = [0u64; BINS];
            for (b, c) in spikes {
                h[b] += c;
            }
            prop_assert_eq!(otsu_bin(&h), brute_force(&h));
        }
    }
}
