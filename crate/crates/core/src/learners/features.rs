//! Input standardization and random cosine feature maps.

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;

/// Per-column affine rescaling to zero weighted mean and unit weighted
/// variance. Constant columns keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[f64], width: usize, weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut mean = vec![0.0; width];
        for (row, &w) in features.chunks_exact(width).zip(weights) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += w * x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);
        let mut var = vec![0.0; width];
        for (row, &w) in features.chunks_exact(width).zip(weights) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += w * (x - m) * (x - m);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / total).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (((o, &v), &m), &s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.scale) {
            *o = (v - m) / s;
        }
    }
}

/// `phi(z) = sqrt(2/F) cos(W z + b)` with `W ~ N(0, 1/bandwidth^2)`,
/// `b ~ U[0, 2pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineFeatures {
    pub input_dim: usize,
    pub count: usize,
    /// Row-major `count x input_dim`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl CosineFeatures {
    pub fn sample(input_dim: usize, count: usize, bandwidth: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x0f0f);
        let normal = Normal::new(0.0, 1.0 / bandwidth).expect("positive bandwidth");
        let w = (0..count * input_dim).map(|_| rng.sample(normal)).collect();
        let b = (0..count)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        Self {
            input_dim,
            count,
            w,
            b,
        }
    }

    pub fn map_into(&self, z: &[f64], out: &mut [f64]) {
        let norm = (2.0 / self.count as f64).sqrt();
        for ((o, w), &b) in out
            .iter_mut()
            .zip(self.w.chunks_exact(self.input_dim))
            .zip(&self.b)
        {
            let dot: f64 = w.iter().zip(z).map(|(a, c)| a * c).sum();
            *o = norm * (dot + b).cos();
        }
    }
}

/// Standardize, then append random cosine features and/or the standardized
/// inputs themselves. Output excludes the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub standardizer: Standardizer,
    pub cosine: Option<CosineFeatures>,
    pub linear: bool,
}

impl FeatureMap {
    pub fn fit(
        features: &[f64],
        width: usize,
        weights: &[f64],
        cosine_count: usize,
        bandwidth: f64,
        linear: bool,
        seed: u64,
    ) -> Self {
        let standardizer = Standardizer::fit(features, width, weights);
        let cosine = (cosine_count > 0)
            .then(|| CosineFeatures::sample(width, cosine_count, bandwidth, seed));
        Self {
            standardizer,
            cosine,
            linear,
        }
    }

    pub fn input_width(&self) -> usize {
        self.standardizer.width()
    }

    pub fn output_width(&self) -> usize {
        self.cosine.as_ref().map_or(0, |c| c.count)
            + if self.linear { self.input_width() } else { 0 }
    }

    /// `scratch` must have length `input_width()`, `out` `output_width()`.
    pub fn map_into(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        self.standardizer.apply(x, scratch);
        let mut off = 0;
        if let Some(c) = &self.cosine {
            c.map_into(scratch, &mut out[..c.count]);
            off = c.count;
        }
        if self.linear {
            out[off..].copy_from_slice(scratch);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_centers_and_scales() {
        let x = [1.0, 5.0, 3.0, 5.0, 5.0, 5.0];
        let s = Standardizer::fit(&x, 2, &[1.0, 1.0, 1.0]);
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.scale[1], 1.0);
        let mut out = [0.0; 2];
        s.apply(&[3.0, 7.0], &mut out);
        assert_eq!(out, [0.0, 2.0]);
    }

    #[test]
    fn cosine_kernel_approximates_gaussian() {
        let f = CosineFeatures::sample(2, 20_000, 1.5, 3);
        let (x, y) = ([0.3, -0.2], [0.8, 0.4]);
        let mut px = vec![0.0; f.count];
        let mut py = vec![0.0; f.count];
        f.map_into(&x, &mut px);
        f.map_into(&y, &mut py);
        let k: f64 = px.iter().zip(&py).map(|(a, b)| a * b).sum();
        let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((k - (-d2 / (2.0 * 1.5 * 1.5)).exp()).abs() < 0.03);
    }
}
