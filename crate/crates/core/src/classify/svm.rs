//! One-vs-rest linear SVMs trained by dual coordinate descent.
//!
//! Each binary problem minimises
//! `0.5 * |w|^2 + (svm_c / n) * sum_i max(0, 1 - y_i (w.x_i + b))`
//! with the bias folded in as a constant feature. Averaging the hinge term
//! makes the solution independent of how often each sample is repeated.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::store;

fn default_c() -> f64 {
    1.0
}

fn default_tol() -> f64 {
    1e-9
}

fn default_epochs() -> usize {
    20_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmOptions {
    #[serde(default = "default_c")]
    pub svm_c: f64,
    /// Stop when the projected-gradient spread falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            svm_c: default_c(),
            tol: default_tol(),
            max_epochs: default_epochs(),
        }
    }
}

impl SvmOptions {
    pub fn with_c(svm_c: f64) -> Self {
        Self {
            svm_c,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// Sorted class labels; row `c` of `weights` scores `classes[c]`.
    pub classes: Vec<u32>,
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dimension("SVM features", self.dim(), x.len()));
        }
        Ok((0..self.classes.len())
            .map(|c| self.weights.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[c])
            .collect())
    }

    /// Highest-scoring class; ties go to the lowest class.
    pub fn predict(&self, x: &[f64]) -> Result<u32> {
        let s = self.scores(x)?;
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        Ok(self.classes[best])
    }

    pub fn predict_rows(&self, features: &DMatrix<f64>) -> Result<Vec<u32>> {
        features
            .row_iter()
            .map(|r| self.predict(&r.iter().copied().collect::<Vec<_>>()))
            .collect()
    }

    /// Sum over classes of the binary primal objectives.
    pub fn objective(&self, features: &DMatrix<f64>, labels: &[u32], svm_c: f64) -> f64 {
        let n = features.nrows() as f64;
        let mut total = 0.0;
        for (c, &class) in self.classes.iter().enumerate() {
            let w = self.weights.row(c);
            let mut reg = w.norm_squared() + self.bias[c] * self.bias[c];
            reg *= 0.5;
            let hinge: f64 = features
                .row_iter()
                .zip(labels)
                .map(|(x, &l)| {
                    let y = if l == class { 1.0 } else { -1.0 };
                    let s = w.dot(&x) + self.bias[c];
                    (1.0 - y * s).max(0.0)
                })
                .sum();
            total += reg + svm_c / n * hinge;
        }
        total
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let classes = DMatrix::from_iterator(1, self.classes.len(), self.classes.iter().map(|&c| c as f64));
        let bias = DMatrix::from_row_slice(1, self.bias.len(), self.bias.as_slice());
        store::encode_matrices(&[("classes", &classes), ("weights", &self.weights), ("bias", &bias)])
    }
}

/// Dual coordinate descent for one binary problem; returns `(w, b)`.
fn train_binary(x: &DMatrix<f64>, y: &[f64], opts: &SvmOptions, seed: u64) -> (DVector<f64>, f64) {
    let (n, d) = x.shape();
    // Rows of the augmented design, contiguous.
    let xt = x.transpose();
    let row = |i: usize| &xt.as_slice()[i * d..(i + 1) * d];
    let upper = opts.svm_c / n as f64;
    let qd: Vec<f64> = (0..n).map(|i| row(i).iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed);
    for _ in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            let xi = row(i);
            let g = y[i] * (xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= upper {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, upper);
                let delta = (alpha[i] - old) * y[i];
                if delta != 0.0 {
                    for (wj, &xj) in w.iter_mut().zip(xi) {
                        *wj += delta * xj;
                    }
                    b += delta;
                }
            }
        }
        if pg_max - pg_min < opts.tol {
            break;
        }
    }
    (DVector::from_vec(w), b)
}

/// Trains one binary SVM per class present in `labels`.
pub fn train_svm(features: &DMatrix<f64>, labels: &[u32], opts: &SvmOptions) -> Result<LinearModel> {
    if features.nrows() != labels.len() {
        return Err(Error::dimension("SVM labels", features.nrows(), labels.len()));
    }
    if !(opts.svm_c > 0.0 && opts.svm_c.is_finite()) {
        return Err(Error::validation(format!("svm_c must be positive, got {}", opts.svm_c)));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("SVM features contain non-finite values"));
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::validation(format!(
            "SVM training needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let fits: Vec<(DVector<f64>, f64)> = classes
        .par_iter()
        .map(|&class| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            train_binary(features, &y, opts, seed::sub_seed(0, "svm-order", class as u64))
        })
        .collect();
    let d = features.ncols();
    let mut weights = DMatrix::zeros(classes.len(), d);
    let mut bias = DVector::zeros(classes.len());
    for (c, (w, b)) in fits.into_iter().enumerate() {
        weights.row_mut(c).copy_from(&w.transpose());
        bias[c] = b;
    }
    Ok(LinearModel { classes, weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(seed: u64, n_per: usize, classes: u32, sep: f64) -> (DMatrix<f64>, Vec<u32>) {
        let mut rng = crate::seed::rng(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            let angle = c as f64 * std::f64::consts::TAU / classes as f64;
            for _ in 0..n_per {
                rows.push(sep * angle.cos() + 0.3 * rng.sample::<f64, _>(StandardNormal));
                rows.push(sep * angle.sin() + 0.3 * rng.sample::<f64, _>(StandardNormal));
                labels.push(c + 1);
            }
        }
        (DMatrix::from_row_slice(labels.len(), 2, &rows), labels)
    }

    #[test]
    fn separable_blobs_fit_perfectly() {
        let (x, y) = blobs(1, 20, 2, 3.0);
        let m = train_svm(&x, &y, &SvmOptions::with_c(10.0)).unwrap();
        assert_eq!(m.predict_rows(&x).unwrap(), y);
    }

    #[test]
    fn duplicating_samples_keeps_the_solution() {
        let (x, y) = blobs(2, 8, 3, 1.0);
        let opts = SvmOptions::with_c(5.0);
        let a = train_svm(&x, &y, &opts).unwrap();
        let x2 = DMatrix::from_fn(x.nrows() * 2, 2, |i, j| x[(i % x.nrows(), j)]);
        let y2: Vec<u32> = (0..y.len() * 2).map(|i| y[i % y.len()]).collect();
        let b = train_svm(&x2, &y2, &opts).unwrap();
        for r in x.row_iter() {
            let v: Vec<f64> = r.iter().copied().collect();
            for (s, t) in a.scores(&v).unwrap().iter().zip(b.scores(&v).unwrap()) {
                assert!((s - t).abs() < 1e-6, "{s} vs {t}");
            }
        }
    }

    #[test]
    fn single_class_is_an_error() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(matches!(train_svm(&x, &[1, 1], &SvmOptions::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let m = LinearModel {
            classes: vec![1, 2, 3],
            weights: DMatrix::zeros(3, 2),
            bias: DVector::from_vec(vec![0.0, 0.5, 0.5]),
        };
        assert_eq!(m.predict(&[1.0, 1.0]).unwrap(), 2);
    }

    #[test]
    fn bias_only_model_without_features() {
        let x = DMatrix::zeros(5, 0);
        let m = train_svm(&x, &[1, 1, 1, 2, 2], &SvmOptions::default()).unwrap();
        assert_eq!(m.dim(), 0);
        assert_eq!(m.predict(&[]).unwrap(), 1);
    }
}
