//! Dictionary learning: k-means codebooks for VLAD/BoW and diagonal GMMs
//! for Fisher vectors.
//!
//! Descriptor sets are `N x D` matrices with one descriptor per row.

mod gmm;
mod kmeans;

pub use gmm::{fit_gmm, fit_gmm_with, GmmModel, GmmOptions, GMM_KIND};
pub use kmeans::{assign, fit_kmeans, fit_kmeans_with, KMeansModel, KMEANS_KIND};

use nalgebra::DMatrix;

/// Column-per-descriptor copy so each descriptor is a contiguous slice.
pub(crate) fn columns(data: &DMatrix<f64>) -> DMatrix<f64> {
    data.transpose()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
