//! Encoders turning one sample's descriptor set (`R x D`, one descriptor per
//! row) into a fixed-length vector.
//!
//! Fisher vector layout is `[G_mu_1, G_sigma_1, ..., G_mu_K, G_sigma_K]`,
//! each block `D` long. VLAD is `[v_1, ..., v_K]`. Both are post-processed
//! with a signed square root followed by l2 normalisation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::{GmmModel, KMeansModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VladVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BowHistogram {
    pub counts: Vec<usize>,
}

impl BowHistogram {
    /// Counts divided by their total.
    pub fn frequencies(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Fv,
    Vlad,
    Bow,
    /// Concatenated descriptors, no dictionary.
    Mad,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Fv => "fv",
            EncoderKind::Vlad => "vlad",
            EncoderKind::Bow => "bow",
            EncoderKind::Mad => "mad",
        }
    }

    /// Feature length for `k` codewords of dimension `d`.
    pub fn output_len(self, k: usize, d: usize) -> usize {
        match self {
            EncoderKind::Fv => 2 * k * d,
            EncoderKind::Vlad => k * d,
            EncoderKind::Bow => k,
            EncoderKind::Mad => d,
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fv" => Ok(EncoderKind::Fv),
            "vlad" => Ok(EncoderKind::Vlad),
            "bow" => Ok(EncoderKind::Bow),
            "mad" => Ok(EncoderKind::Mad),
            other => Err(Error::validation(format!("unknown encoder '{other}'"))),
        }
    }
}

/// Signed square root, then division by the l2 norm. Zero stays zero.
pub fn power_l2_normalize(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = v.signum() * v.abs().sqrt();
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
}

pub fn normalize_fv(raw: &FisherVector) -> FisherVector {
    let mut values = raw.values.clone();
    power_l2_normalize(&mut values);
    FisherVector {
        values,
        normalized: true,
    }
}

/// Gradients of the mean log-likelihood w.r.t. means and standard
/// deviations, scaled by `1/sqrt(w_k)` and `1/sqrt(2 w_k)`.
pub fn encode_fv_raw(gmm: &GmmModel, descriptors: &DMatrix<f64>) -> Result<FisherVector> {
    let (n, d) = descriptors.shape();
    if d != gmm.dim() {
        return Err(Error::dimension("Fisher vector descriptor", gmm.dim(), d));
    }
    let k = gmm.k();
    let gamma = gmm.posteriors(descriptors)?;
    let mut values = vec![0.0; 2 * k * d];
    let r = n as f64;
    for c in 0..k {
        let w = gmm.weights[c];
        let (mu_block, rest) = values[2 * c * d..2 * (c + 1) * d].split_at_mut(d);
        for i in 0..n {
            let g = gamma[(i, c)];
            if g == 0.0 {
                continue;
            }
            for j in 0..d {
                let sigma = gmm.variances[(c, j)].sqrt();
                let z = (descriptors[(i, j)] - gmm.means[(c, j)]) / sigma;
                mu_block[j] += g * z;
                rest[j] += g * (z * z - 1.0);
            }
        }
        let mu_scale = 1.0 / (r * w.sqrt());
        let sigma_scale = 1.0 / (r * (2.0 * w).sqrt());
        mu_block.iter_mut().for_each(|v| *v *= mu_scale);
        rest.iter_mut().for_each(|v| *v *= sigma_scale);
        if mu_block.iter().chain(rest.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("Fisher vector block of component {c} is not finite")));
        }
    }
    Ok(FisherVector {
        values,
        normalized: false,
    })
}

pub fn encode_fv(gmm: &GmmModel, descriptors: &DMatrix<f64>) -> Result<FisherVector> {
    Ok(normalize_fv(&encode_fv_raw(gmm, descriptors)?))
}

fn assignments(kmeans: &KMeansModel, descriptors: &DMatrix<f64>) -> Result<Vec<usize>> {
    if descriptors.ncols() != kmeans.dim() {
        return Err(Error::dimension("codebook descriptor", kmeans.dim(), descriptors.ncols()));
    }
    let centroids_t = kmeans.centroids.transpose();
    let d = kmeans.dim();
    Ok(descriptors
        .row_iter()
        .map(|row| {
            let x: Vec<f64> = row.iter().copied().collect();
            let mut best = (0, f64::INFINITY);
            for (k, c) in centroids_t.as_slice().chunks_exact(d).enumerate() {
                let dist: f64 = c.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            best.0
        })
        .collect())
}

/// Per-codeword sums of residuals to the assigned centroid.
pub fn encode_vlad(kmeans: &KMeansModel, descriptors: &DMatrix<f64>, normalize: bool) -> Result<VladVector> {
    let labels = assignments(kmeans, descriptors)?;
    let d = kmeans.dim();
    let mut values = vec![0.0; kmeans.k() * d];
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..d {
            values[c * d + j] += descriptors[(i, j)] - kmeans.centroids[(c, j)];
        }
    }
    if normalize {
        power_l2_normalize(&mut values);
    }
    Ok(VladVector { values, normalized: normalize })
}

pub fn encode_bow(kmeans: &KMeansModel, descriptors: &DMatrix<f64>) -> Result<BowHistogram> {
    let labels = assignments(kmeans, descriptors)?;
    let mut counts = vec![0usize; kmeans.k()];
    for c in labels {
        counts[c] += 1;
    }
    Ok(BowHistogram { counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn unit_gmm(d: usize) -> GmmModel {
        GmmModel {
            weights: DVector::from_vec(vec![1.0]),
            means: DMatrix::zeros(1, d),
            variances: DMatrix::from_element(1, d, 1.0),
            seed: 0,
            variance_floor: 0.0,
            ll_trace: vec![],
        }
    }

    #[test]
    fn descriptors_at_the_mean() {
        let fv = encode_fv_raw(&unit_gmm(3), &DMatrix::zeros(5, 3)).unwrap();
        assert_eq!(fv.values.len(), 6);
        for j in 0..3 {
            assert_eq!(fv.values[j], 0.0);
            assert!((fv.values[3 + j] + 1.0 / 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn distant_component_block_vanishes() {
        let gmm = GmmModel {
            weights: DVector::from_vec(vec![0.5, 0.5]),
            means: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 100.0, 100.0]),
            variances: DMatrix::from_element(2, 2, 1.0),
            seed: 0,
            variance_floor: 0.0,
            ll_trace: vec![],
        };
        let a = DMatrix::from_row_slice(3, 2, &[0.1, -0.2, 0.3, 0.0, -0.5, 0.4]);
        let fv = encode_fv_raw(&gmm, &a).unwrap();
        assert!(fv.values[4..].iter().all(|v| v.abs() < 1e-100));
    }

    #[test]
    fn hand_computed_normalisation() {
        let fv = normalize_fv(&FisherVector { values: vec![4.0, -9.0], normalized: false });
        let s = 13f64.sqrt();
        assert!((fv.values[0] - 2.0 / s).abs() < 1e-15);
        assert!((fv.values[1] + 3.0 / s).abs() < 1e-15);
        let zero = normalize_fv(&FisherVector { values: vec![0.0; 4], normalized: false });
        assert_eq!(zero.values, vec![0.0; 4]);
    }

    fn codebook() -> KMeansModel {
        KMeansModel {
            centroids: DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 5.0, 0.0, 0.0, 5.0]),
            seed: 0,
            inertia_trace: vec![],
        }
    }

    #[test]
    fn vlad_exact_hits_and_single_term() {
        let km = codebook();
        let v = encode_vlad(&km, &km.centroids.clone(), false).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
        let one = KMeansModel { centroids: DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), seed: 0, inertia_trace: vec![] };
        let v = encode_vlad(&one, &DMatrix::from_row_slice(1, 2, &[4.0, -1.0]), false).unwrap();
        assert_eq!(v.values, vec![3.0, -3.0]);
    }

    #[test]
    fn bow_concentration_and_one_per_cluster() {
        let km = codebook();
        let near_zero = DMatrix::from_row_slice(4, 2, &[0.1, 0.0, -0.3, 0.2, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(encode_bow(&km, &near_zero).unwrap().counts, vec![4, 0, 0]);
        assert_eq!(encode_bow(&km, &km.centroids.clone()).unwrap().counts, vec![1, 1, 1]);
        let h = BowHistogram { counts: vec![1, 3] };
        assert_eq!(h.frequencies(), vec![0.25, 0.75]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(encode_fv(&unit_gmm(3), &DMatrix::zeros(2, 2)), Err(Error::Dimension { .. })));
        assert!(matches!(encode_bow(&codebook(), &DMatrix::zeros(2, 3)), Err(Error::Dimension { .. })));
    }
}
