//! PCA on descriptors, fitted by SVD of the centred data matrix.
//!
//! Projections are not whitened; the per-dimension variances of projected
//! training data equal `explained_variance`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::error::{Error, Result};
use crate::store;

pub const PCA_KIND: &str = "pca";

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `D x R`, orthonormal rows.
    pub components: DMatrix<f64>,
    /// Sample variance (divisor `N - 1`) along each component, descending.
    pub explained_variance: DVector<f64>,
}

/// Fits `d` components to the rows of `data` (`N x R`).
pub fn fit_pca(data: &DMatrix<f64>, d: usize) -> Result<PcaModel> {
    let (n, r) = data.shape();
    if n < 2 {
        return Err(Error::validation(format!("PCA needs at least 2 descriptors, got {n}")));
    }
    if d == 0 {
        return Err(Error::validation("PCA dimension must be at least 1"));
    }
    let mean = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean.transpose();
    }
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::numerical("SVD did not return right singular vectors"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let s_max = order.first().map(|&k| svd.singular_values[k]).unwrap_or(0.0);
    let tol = s_max * (n.max(r) as f64) * f64::EPSILON;
    let rank = order.iter().filter(|&&k| svd.singular_values[k] > tol).count();
    if d > rank {
        return Err(Error::validation(format!(
            "requested {d} PCA components but the descriptors have rank {rank}"
        )));
    }
    let mut components = DMatrix::zeros(d, r);
    let mut explained_variance = DVector::zeros(d);
    for (row, &k) in order.iter().take(d).enumerate() {
        let mut v = v_t.row(k).clone_owned();
        let pivot = v
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (j, &x)| if x.abs() > best.1 { (j, x.abs()) } else { best })
            .0;
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        components.row_mut(row).copy_from(&v);
        explained_variance[row] = svd.singular_values[k].powi(2) / (n as f64 - 1.0);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.nrows()
    }

    /// `components * (x - mean)`.
    pub fn project(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dimension("PCA input", self.input_dim(), x.len()));
        }
        let centered = DVector::from_column_slice(x) - &self.mean;
        Ok(&self.components * centered)
    }

    /// Projects every row of `data`.
    pub fn project_rows(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.ncols() != self.input_dim() {
            return Err(Error::dimension("PCA input", self.input_dim(), data.ncols()));
        }
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= &self.mean.transpose();
        }
        Ok(centered * self.components.transpose())
    }

    pub fn reconstruct(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.output_dim() {
            return Err(Error::dimension("PCA code", self.output_dim(), z.len()));
        }
        Ok(self.components.transpose() * z + &self.mean)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mean = DMatrix::from_row_slice(1, self.mean.len(), self.mean.as_slice());
        let var = DMatrix::from_row_slice(1, self.explained_variance.len(), self.explained_variance.as_slice());
        store::encode_matrices(&[("mean", &mean), ("components", &self.components), ("explained_variance", &var)])
    }

    pub fn save(&self, stem: &Path, provenance: Option<&store::Provenance>) -> Result<String> {
        let mean = DMatrix::from_row_slice(1, self.mean.len(), self.mean.as_slice());
        let var = DMatrix::from_row_slice(1, self.explained_variance.len(), self.explained_variance.as_slice());
        store::write_model(
            stem,
            PCA_KIND,
            json!({ "input_dim": self.input_dim(), "output_dim": self.output_dim(), "provenance": provenance }),
            &[("mean", &mean), ("components", &self.components), ("explained_variance", &var)],
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let mut m = store::read_model(stem, PCA_KIND)?;
        let mean = m.take("mean")?;
        let components = m.take("components")?;
        let var = m.take("explained_variance")?;
        if components.ncols() != mean.ncols() || var.ncols() != components.nrows() {
            return Err(Error::parse(stem, "inconsistent PCA matrix shapes"));
        }
        Ok(Self {
            mean: DVector::from_iterator(mean.ncols(), mean.iter().copied()),
            components,
            explained_variance: DVector::from_iterator(var.ncols(), var.iter().copied()),
        })
    }
}
