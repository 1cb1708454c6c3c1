//! Z-score normalization fit on the training split only.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-feature mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormStats {
    /// Fits statistics over every entry of the training tensor, per feature
    /// (the last axis). Degenerate features are rejected: normalizing by a
    /// zero standard deviation would blow up.
    pub fn fit(train: &Tensor) -> Result<Self> {
        if train.rank() == 0 || train.numel() == 0 {
            return Err(Error::Data("cannot fit normalizer on empty data".into()));
        }
        let feats = *train.shape().last().unwrap();
        let rows = train.numel() / feats;
        let mut mean = vec![0.0; feats];
        for chunk in train.data().chunks_exact(feats) {
            for (m, &x) in mean.iter_mut().zip(chunk) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; feats];
        for chunk in train.data().chunks_exact(feats) {
            for (f, (&x, v)) in chunk.iter().zip(&mut var).enumerate() {
                let d = x - mean[f];
                *v += d * d;
            }
        }
        let mut std = vec![0.0; feats];
        for (f, v) in var.iter().enumerate() {
            let s = (v / rows as f64).sqrt();
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::Data(format!(
                    "feature {f} has zero variance on the training split; cannot Z-score"
                )));
            }
            std[f] = s;
        }
        Ok(NormStats { mean, std })
    }

    pub fn feature_count(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Rebuilds stats from stored values (checkpoint loading).
    pub fn from_parts(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Data(format!(
                "normalizer has {} means but {} deviations",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Data("normalizer deviations must be positive".into()));
        }
        Ok(NormStats { mean, std })
    }

    /// `(x − mean) / std` per feature.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let feats = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % feats]) / self.std[i % feats])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// `x·std + mean` per feature.
    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let feats = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % feats] + self.mean[i % feats])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Inverse transform of a single value of one feature.
    pub fn inverse_one(&self, feature: usize, v: f64) -> f64 {
        v * self.std[feature] + self.mean[feature]
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.rank() == 0 || *x.shape().last().unwrap() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                lhs: x.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        Ok(())
    }
}
