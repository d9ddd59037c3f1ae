//! Separable Gaussian blur with mirrored borders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub kernel: usize,
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self { kernel: 15 }
    }
}

impl BlurSpec {
    pub fn new(kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "blur kernel {kernel} must be odd"
            )));
        }
        Ok(Self { kernel })
    }

    /// σ = 0.3·((k − 1)·0.5 − 1) + 0.8, evaluated as (3k + 7)/20 so the
    /// usual kernel sizes give exactly rounded results.
    pub fn sigma(&self) -> f64 {
        (3.0 * self.kernel as f64 + 7.0) / 20.0
    }

    pub fn weights(&self) -> Vec<f64> {
        let radius = (self.kernel / 2) as f64;
        let s = self.sigma();
        let raw: Vec<f64> = (0..self.kernel)
            .map(|i| {
                let x = i as f64 - radius;
                (-x * x / (2.0 * s * s)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Mirror without repeating the edge sample: −1 → 1, n → n − 2.
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

pub fn gaussian_blur(img: &GrayImage, spec: BlurSpec) -> Result<GrayImage> {
    let spec = BlurSpec::new(spec.kernel)?;
    let k = spec.weights();
    let radius = (spec.kernel / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for r in 0..h {
        let row = &img.values[r * w..(r + 1) * w];
        for c in 0..w {
            tmp[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * row[reflect101(c as isize + i as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect101(r as isize + i as isize - radius, h) * w + c])
                .sum();
        }
    }
    Ok(GrayImage {
        width: w,
        height: h,
        values: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::mask::binarize;

    fn literal_sigma(k: usize) -> f64 {
        0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
    }

    #[test]
    fn sigma_values() {
        assert_eq!(BlurSpec { kernel: 15 }.sigma(), 2.6);
        assert_eq!(BlurSpec { kernel: 3 }.sigma(), 0.8);
        assert_eq!(BlurSpec { kernel: 1 }.sigma(), 0.5);
        for k in (1..40).step_by(2) {
            assert!((BlurSpec { kernel: k }.sigma() - literal_sigma(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(gaussian_blur(&GrayImage::new(3, 3), BlurSpec { kernel: 4 }).is_err());
    }

    #[test]
    fn reflect101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect101(-7, 2), 1);
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = GrayImage {
            width: 9,
            height: 6,
            values: vec![0.37; 54],
        };
        let out = gaussian_blur(&img, BlurSpec::default()).unwrap();
        assert!(out.values.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn single_pixel_spreads_over_the_kernel_support() {
        let mut img = GrayImage::new(41, 41);
        img.values[20 * 41 + 20] = 1.0;
        let m = binarize(&gaussian_blur(&img, BlurSpec::default()).unwrap());
        // The truncated kernel's corner weight exp(-98/13.52)/Σ² still
        // exceeds 1e-4 of the peak, so the region is the 15×15 support.
        assert_eq!(m.count(), 225);
        for r in 0..41 {
            for c in 0..41 {
                assert_eq!(
                    m.get(c, r),
                    (13..=27).contains(&c) && (13..=27).contains(&r)
                );
            }
        }
    }
}
