use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logarithmically spaced depth bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBinning {
    pub d_min: f64,
    pub d_max: f64,
    pub n_bins: usize,
    /// `n_bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    /// Log-space midpoints of each bin.
    pub centers: Vec<f64>,
}

/// Relative margin added around an observed depth range.
pub const RANGE_MARGIN: f64 = 0.01;

impl DepthBinning {
    pub fn new(d_min: f64, d_max: f64, n_bins: usize) -> Result<Self> {
        if !(d_min > 0.0 && d_max > d_min && d_max.is_finite()) {
            return Err(Error::LabelSpace(format!("invalid depth range [{d_min}, {d_max}]")));
        }
        if n_bins < 2 {
            return Err(Error::LabelSpace(format!("need at least 2 depth bins, got {n_bins}")));
        }
        // Powers of the exact range ratio keep edges exact when it is a
        // power of two, such as 0.5..8 in four bins.
        let ratio = d_max / d_min;
        let mut edges: Vec<f64> = (0..=n_bins).map(|i| d_min * ratio.powf(i as f64 / n_bins as f64)).collect();
        edges[0] = d_min;
        edges[n_bins] = d_max;
        let centers = edges.windows(2).map(|e| ((e[0].ln() + e[1].ln()) / 2.0).exp()).collect();
        Ok(DepthBinning {
            d_min,
            d_max,
            n_bins,
            edges,
            centers,
        })
    }

    /// Bins spanning an observed `[lo, hi]` widened by [`RANGE_MARGIN`] on each side.
    pub fn from_observed(lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        Self::new(lo * (1.0 - RANGE_MARGIN), hi * (1.0 + RANGE_MARGIN), n_bins)
    }

    /// Bin containing `depth`; out-of-range values clamp to the end bins.
    pub fn region(&self, depth: f64) -> Result<usize> {
        if depth.is_nan() {
            return Err(Error::LabelSpace("NaN depth".into()));
        }
        let inner = &self.edges[1..self.n_bins];
        Ok(inner.partition_point(|&e| e <= depth))
    }

    /// `sum_r probs_r * center_r`.
    pub fn soft_weighted_sum(&self, probs: &[f64]) -> Result<f64> {
        if probs.len() != self.n_bins || probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::LabelSpace("depth probabilities are not a simplex".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::LabelSpace(format!("depth probabilities sum to {total}")));
        }
        Ok(probs.iter().zip(&self.centers).map(|(p, c)| p * c).sum())
    }
}
