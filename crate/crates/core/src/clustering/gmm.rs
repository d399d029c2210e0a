use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{columns, fit_kmeans, log_sum_exp};
use crate::error::{Error, Result};
use crate::seed;
use crate::store;

pub const GMM_KIND: &str = "gmm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmOptions {
    pub max_iter: usize,
    /// Stop when `|ll_t - ll_{t-1}| < tol * |ll_t|`.
    pub tol: f64,
    /// Variance floor as a fraction of the mean per-dimension data variance.
    pub floor_ratio: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            floor_ratio: 1e-6,
        }
    }
}

/// Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: DVector<f64>,
    /// `K x D`.
    pub means: DMatrix<f64>,
    /// `K x D` diagonal variances.
    pub variances: DMatrix<f64>,
    pub seed: u64,
    pub variance_floor: f64,
    /// Log-likelihood of the training data at each EM iterate.
    pub ll_trace: Vec<f64>,
}

const MIN_WEIGHT: f64 = 1e-12;

/// Per-component constants reused across points.
struct Prepared {
    k: usize,
    d: usize,
    /// `D x K`, contiguous per component.
    means_t: DMatrix<f64>,
    inv_var_t: DMatrix<f64>,
    log_norm: Vec<f64>,
}

impl Prepared {
    fn new(m: &GmmModel) -> Self {
        let (k, d) = m.means.shape();
        let log_norm = (0..k)
            .map(|c| {
                let log_det: f64 = m.variances.row(c).iter().map(|v| (2.0 * PI * v).ln()).sum();
                m.weights[c].ln() - 0.5 * log_det
            })
            .collect();
        Self {
            k,
            d,
            means_t: m.means.transpose(),
            inv_var_t: m.variances.map(|v| 1.0 / v).transpose(),
            log_norm,
        }
    }

    /// `log w_k + log u_k(x)` for every component.
    fn joint(&self, x: &[f64], out: &mut [f64]) {
        let mu = self.means_t.as_slice();
        let iv = self.inv_var_t.as_slice();
        for c in 0..self.k {
            let base = c * self.d;
            let mut q = 0.0;
            for j in 0..self.d {
                let diff = x[j] - mu[base + j];
                q += diff * diff * iv[base + j];
            }
            out[c] = self.log_norm[c] - 0.5 * q;
        }
    }
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::dimension("GMM descriptor", self.dim(), len));
        }
        Ok(())
    }

    /// Responsibilities `gamma_k(x)`, computed in log space.
    pub fn posterior(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_dim(x.len())?;
        let prep = Prepared::new(self);
        let mut joint = vec![0.0; self.k()];
        prep.joint(x, &mut joint);
        let lse = log_sum_exp(&joint);
        Ok(DVector::from_iterator(self.k(), joint.iter().map(|v| (v - lse).exp())))
    }

    /// Responsibilities for every row of `data` (`N x K`).
    pub fn posteriors(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(data.ncols())?;
        let prep = Prepared::new(self);
        let cols = columns(data);
        let d = self.dim().max(1);
        let mut out = DMatrix::zeros(data.nrows(), self.k());
        let mut joint = vec![0.0; self.k()];
        for (i, x) in cols.as_slice().chunks_exact(d).enumerate() {
            prep.joint(x, &mut joint);
            let lse = log_sum_exp(&joint);
            for c in 0..self.k() {
                out[(i, c)] = (joint[c] - lse).exp();
            }
        }
        Ok(out)
    }

    /// `sum_i log sum_k w_k u_k(x_i)`.
    pub fn log_likelihood(&self, data: &DMatrix<f64>) -> Result<f64> {
        self.check_dim(data.ncols())?;
        let prep = Prepared::new(self);
        let cols = columns(data);
        let mut joint = vec![0.0; self.k()];
        let mut total = 0.0;
        for x in cols.as_slice().chunks_exact(self.dim().max(1)) {
            prep.joint(x, &mut joint);
            total += log_sum_exp(&joint);
        }
        Ok(total)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let w = DMatrix::from_row_slice(1, self.k(), self.weights.as_slice());
        store::encode_matrices(&[("weights", &w), ("means", &self.means), ("variances", &self.variances)])
    }

    pub fn save(&self, stem: &Path, provenance: Option<&store::Provenance>) -> Result<String> {
        let w = DMatrix::from_row_slice(1, self.k(), self.weights.as_slice());
        store::write_model(
            stem,
            GMM_KIND,
            json!({
                "k": self.k(),
                "dim": self.dim(),
                "seed": self.seed,
                "variance_floor": self.variance_floor,
                "em_iterations": self.ll_trace.len(),
                "provenance": provenance,
            }),
            &[("weights", &w), ("means", &self.means), ("variances", &self.variances)],
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let mut m = store::read_model(stem, GMM_KIND)?;
        let seed = m.meta["seed"].as_u64().unwrap_or(0);
        let variance_floor = m.meta["variance_floor"].as_f64().unwrap_or(0.0);
        let w = m.take("weights")?;
        let means = m.take("means")?;
        let variances = m.take("variances")?;
        if w.ncols() != means.nrows() || means.shape() != variances.shape() {
            return Err(Error::parse(stem, "inconsistent GMM matrix shapes"));
        }
        Ok(Self {
            weights: DVector::from_iterator(w.ncols(), w.iter().copied()),
            means,
            variances,
            seed,
            variance_floor,
            ll_trace: Vec::new(),
        })
    }
}

pub fn fit_gmm(data: &DMatrix<f64>, k: usize, seed: u64) -> Result<GmmModel> {
    fit_gmm_with(data, k, seed, &GmmOptions::default())
}

/// EM for a diagonal GMM, initialised from k-means (means at centroids,
/// within-cluster variances, cluster fractions as weights).
pub fn fit_gmm_with(data: &DMatrix<f64>, k: usize, seed: u64, opts: &GmmOptions) -> Result<GmmModel> {
    let (n, d) = data.shape();
    if k == 0 || d == 0 {
        return Err(Error::validation("GMM needs K >= 1 and D >= 1"));
    }
    if n < k {
        return Err(Error::validation(format!("GMM with K = {k} needs at least {k} descriptors, got {n}")));
    }
    let cols = columns(data);
    let point = |i: usize| &cols.as_slice()[i * d..(i + 1) * d];

    let global_mean = data.row_mean();
    let mean_var = (0..d)
        .map(|j| {
            let m = global_mean[j];
            data.column(j).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64
        })
        .sum::<f64>()
        / d as f64;
    let floor = if mean_var > 0.0 { opts.floor_ratio * mean_var } else { 1e-12 };

    let km = fit_kmeans(data, k, seed::sub_seed(seed, "gmm-init", 0))?;
    let mut model = GmmModel {
        weights: DVector::zeros(k),
        means: km.centroids.clone(),
        variances: DMatrix::from_element(k, d, floor),
        seed,
        variance_floor: floor,
        ll_trace: Vec::new(),
    };
    {
        let mut counts = vec![0usize; k];
        let mut sq = DMatrix::<f64>::zeros(k, d);
        for i in 0..n {
            let x = point(i);
            let c = super::assign(&km, x);
            counts[c] += 1;
            for j in 0..d {
                let diff = x[j] - km.centroids[(c, j)];
                sq[(c, j)] += diff * diff;
            }
        }
        for c in 0..k {
            model.weights[c] = (counts[c] as f64 / n as f64).max(MIN_WEIGHT);
            for j in 0..d {
                let v = if counts[c] > 0 { sq[(c, j)] / counts[c] as f64 } else { mean_var };
                model.variances[(c, j)] = v.max(floor);
            }
        }
        let total = model.weights.sum();
        model.weights /= total;
    }

    let mut resp = DMatrix::zeros(k, n);
    let mut joint = vec![0.0; k];
    for iter in 0..=opts.max_iter {
        // E-step
        let prep = Prepared::new(&model);
        let mut ll = 0.0;
        for i in 0..n {
            prep.joint(point(i), &mut joint);
            let lse = log_sum_exp(&joint);
            ll += lse;
            for c in 0..k {
                resp[(c, i)] = (joint[c] - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::numerical(format!("GMM log-likelihood became non-finite at EM iteration {iter}")));
        }
        let prev = model.ll_trace.last().copied();
        model.ll_trace.push(ll);
        if let Some(p) = prev {
            if (ll - p).abs() < opts.tol * ll.abs() {
                break;
            }
        }
        if iter == opts.max_iter {
            break;
        }
        // M-step
        for c in 0..k {
            let r = resp.row(c);
            let nk: f64 = r.iter().sum();
            if nk <= f64::MIN_POSITIVE {
                model.weights[c] = MIN_WEIGHT;
                continue;
            }
            model.weights[c] = (nk / n as f64).max(MIN_WEIGHT);
            let mut mu = vec![0.0; d];
            for i in 0..n {
                let g = r[i];
                if g == 0.0 {
                    continue;
                }
                for (m, &x) in mu.iter_mut().zip(point(i)) {
                    *m += g * x;
                }
            }
            mu.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; d];
            for i in 0..n {
                let g = r[i];
                if g == 0.0 {
                    continue;
                }
                for ((v, &x), &m) in var.iter_mut().zip(point(i)).zip(&mu) {
                    *v += g * (x - m) * (x - m);
                }
            }
            for j in 0..d {
                model.means[(c, j)] = mu[j];
                model.variances[(c, j)] = (var[j] / nk).max(floor);
            }
        }
        let total = model.weights.sum();
        model.weights /= total;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(seed: u64) -> DMatrix<f64> {
        let mut rng = crate::seed::rng(seed);
        let mut rows = Vec::new();
        for i in 0..900 {
            let (cx, cy, s) = if i < 600 { (0.0, 0.0, 1.0) } else { (20.0, -15.0, 0.5) };
            rows.push(cx + s * rng.sample::<f64, _>(StandardNormal));
            rows.push(cy + s * rng.sample::<f64, _>(StandardNormal));
        }
        DMatrix::from_row_slice(900, 2, &rows)
    }

    #[test]
    fn single_component_is_the_mle() {
        let data = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 2.0, 4.0, 3.0, 1.0, 6.0, 3.0]);
        let m = fit_gmm(&data, 1, 0).unwrap();
        assert!((m.weights[0] - 1.0).abs() < 1e-15);
        assert!((m.means[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((m.means[(0, 1)] - 2.0).abs() < 1e-12);
        assert!((m.variances[(0, 0)] - 3.5).abs() < 1e-12);
        assert!((m.variances[(0, 1)] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn recovers_separated_blobs() {
        let m = fit_gmm(&blobs(1), 2, 3).unwrap();
        let big = if m.means[(0, 0)] < 10.0 { 0 } else { 1 };
        let small = 1 - big;
        assert!((m.weights[big] - 2.0 / 3.0).abs() < 0.05);
        assert!(m.means[(big, 0)].abs() < 0.1 && m.means[(big, 1)].abs() < 0.1);
        assert!((m.means[(small, 0)] - 20.0).abs() < 0.05 && (m.means[(small, 1)] + 15.0).abs() < 0.05);
    }

    #[test]
    fn em_trace_is_monotone() {
        let mut rng = crate::seed::rng(2);
        let data = DMatrix::from_fn(200, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = fit_gmm(&data, 4, 8).unwrap();
        assert!(m.ll_trace.len() > 2);
        for w in m.ll_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{:?}", m.ll_trace);
        }
        assert!((m.log_likelihood(&data).unwrap() - m.ll_trace.last().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn posterior_dominance_and_single_component() {
        let m = GmmModel {
            weights: DVector::from_vec(vec![0.5, 0.5]),
            means: DMatrix::from_row_slice(2, 1, &[0.0, 50.0]),
            variances: DMatrix::from_row_slice(2, 1, &[1e-4, 1.0]),
            seed: 0,
            variance_floor: 0.0,
            ll_trace: vec![],
        };
        let g = m.posterior(&[0.0]).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12);
        let one = GmmModel {
            weights: DVector::from_vec(vec![1.0]),
            means: DMatrix::from_row_slice(1, 2, &[3.0, -1.0]),
            variances: DMatrix::from_row_slice(1, 2, &[2.0, 0.5]),
            seed: 0,
            variance_floor: 0.0,
            ll_trace: vec![],
        };
        assert_eq!(one.posterior(&[100.0, 7.0]).unwrap()[0], 1.0);
    }

    #[test]
    fn standard_normal_point_at_mean() {
        let m = GmmModel {
            weights: DVector::from_vec(vec![1.0]),
            means: DMatrix::from_row_slice(1, 1, &[0.0]),
            variances: DMatrix::from_row_slice(1, 1, &[1.0]),
            seed: 0,
            variance_floor: 0.0,
            ll_trace: vec![],
        };
        let one = DMatrix::from_row_slice(1, 1, &[0.0]);
        let ll = m.log_likelihood(&one).unwrap();
        assert!((ll - (1.0 / (2.0 * PI).sqrt()).ln()).abs() < 1e-15);
        let two = DMatrix::from_row_slice(2, 1, &[0.0, 0.0]);
        assert!((m.log_likelihood(&two).unwrap() - 2.0 * ll).abs() < 1e-15);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = fit_gmm(&blobs(4), 2, 1).unwrap();
        let stem = dir.path().join("gmm");
        m.save(&stem, None).unwrap();
        let back = GmmModel::load(&stem).unwrap();
        assert_eq!(back.to_bytes(), m.to_bytes());
        assert_eq!(back.seed, 1);
    }
}
