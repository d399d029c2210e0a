//! Mesh arc descriptors.
//!
//! Each region is connected to its `p` functionally nearest regions (largest
//! Pearson correlation within the sample) and its series is regressed on
//! theirs with a ridge penalty. The fitted coefficients, scattered into a
//! length-`R` vector with zeros elsewhere, form the region's descriptor.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataio::RegionSample;
use crate::error::{Error, Result};
use crate::store;

fn default_lambda() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    pub p: usize,
    #[serde(default = "default_lambda")]
    pub ridge_lambda: f64,
    /// Z-score each region series before correlation and regression.
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Rank neighbours by |r| instead of r.
    #[serde(default)]
    pub absolute_correlation: bool,
}

impl NeighborhoodSpec {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            ridge_lambda: default_lambda(),
            standardize: true,
            absolute_correlation: false,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.ridge_lambda = lambda;
        self
    }

    pub fn with_standardize(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    pub fn validate(&self, n_regions: usize) -> Result<()> {
        if self.p == 0 || self.p >= n_regions {
            return Err(Error::validation(format!(
                "p must be in 1..={}, got {}",
                n_regions.saturating_sub(1),
                self.p
            )));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::validation(format!(
                "ridge_lambda must be finite and >= 0, got {}",
                self.ridge_lambda
            )));
        }
        Ok(())
    }
}

/// Arc weights of one region's mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MadVector {
    pub seed_region: usize,
    /// Neighbour indices, most correlated first.
    pub neighbors: Vec<usize>,
    /// Length `R`, zero outside `neighbors`.
    pub weights: DVector<f64>,
    pub residual_var: f64,
}

/// All `R` descriptors of one sample; row `i` of `weights` is region `i`'s.
#[derive(Debug, Clone, PartialEq)]
pub struct MadSet {
    pub subject_id: String,
    pub task_label: u32,
    pub weights: DMatrix<f64>,
    pub residual_vars: Vec<f64>,
}

impl MadSet {
    pub fn n_regions(&self) -> usize {
        self.weights.nrows()
    }

    /// Rebuilds a set from its `R^2` concatenation.
    pub fn from_concatenated(
        subject_id: impl Into<String>,
        task_label: u32,
        values: &[f64],
        n_regions: usize,
    ) -> Result<Self> {
        if values.len() != n_regions * n_regions {
            return Err(Error::dimension("concatenated MAD length", n_regions * n_regions, values.len()));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            task_label,
            weights: DMatrix::from_row_slice(n_regions, n_regions, values),
            residual_vars: vec![0.0; n_regions],
        })
    }
}

/// Row-major `[a_1, a_2, ..., a_R]`.
pub fn concatenate(set: &MadSet) -> Vec<f64> {
    set.weights.transpose().as_slice().to_vec()
}

/// Series used for fitting: z-scored rows when `standardize` is on.
pub fn prepare_series(sample: &RegionSample, standardize: bool) -> DMatrix<f64> {
    let mut y = sample.series.clone();
    if standardize {
        let t = y.ncols() as f64;
        for mut row in y.row_iter_mut() {
            let mean = row.sum() / t;
            row.add_scalar_mut(-mean);
            let sd = (row.norm_squared() / (t - 1.0)).sqrt();
            row /= sd;
        }
    }
    y
}

/// Pearson correlation matrix of the rows of `series`.
pub fn correlation_matrix(series: &DMatrix<f64>) -> DMatrix<f64> {
    let t = series.ncols() as f64;
    let mut z = series.clone();
    for mut row in z.row_iter_mut() {
        let mean = row.sum() / t;
        row.add_scalar_mut(-mean);
        let n = row.norm();
        row /= n;
    }
    let mut c = &z * z.transpose();
    for i in 0..c.nrows() {
        c[(i, i)] = 1.0;
    }
    c
}

fn rank_neighbors(corr_row: impl Iterator<Item = f64>, i: usize, p: usize, absolute: bool) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = corr_row
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, r)| (j, if absolute { r.abs() } else { r }))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(p);
    scored.into_iter().map(|(j, _)| j).collect()
}

/// The `p` regions most correlated with region `i`, ties to the lower index.
pub fn pearson_neighbors(sample: &RegionSample, i: usize, spec: &NeighborhoodSpec) -> Result<Vec<usize>> {
    let r = sample.n_regions();
    spec.validate(r)?;
    if i >= r {
        return Err(Error::validation(format!("region {i} out of range for R = {r}")));
    }
    let corr = correlation_matrix(&sample.series);
    Ok(rank_neighbors(corr.row(i).iter().copied(), i, spec.p, spec.absolute_correlation))
}

/// Solves `(G^T G + lambda I) a = G^T y`.
pub fn ridge_solve(g: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let mut gram = g.transpose() * g;
    let rhs = g.transpose() * y;
    if lambda == 0.0 {
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > max * 1e-12) {
            return Err(Error::numerical(
                "neighbour Gram matrix is singular with ridge_lambda = 0; use ridge_lambda > 0",
            ));
        }
    }
    for k in 0..gram.nrows() {
        gram[(k, k)] += lambda;
    }
    let chol = gram.cholesky().ok_or_else(|| {
        Error::numerical("neighbour Gram matrix is not positive definite; use a larger ridge_lambda")
    })?;
    Ok(chol.solve(&rhs))
}

fn fit_with_neighbors(y: &DMatrix<f64>, i: usize, neighbors: Vec<usize>, lambda: f64) -> Result<MadVector> {
    let t = y.ncols();
    let g = DMatrix::from_fn(t, neighbors.len(), |k, c| y[(neighbors[c], k)]);
    let target = DVector::from_iterator(t, y.row(i).iter().copied());
    let coef = ridge_solve(&g, &target, lambda)?;
    let residual = &target - &g * &coef;
    let mut weights = DVector::zeros(y.nrows());
    for (c, &j) in neighbors.iter().enumerate() {
        weights[j] = coef[c];
    }
    Ok(MadVector {
        seed_region: i,
        neighbors,
        weights,
        residual_var: residual.norm_squared() / t as f64,
    })
}

fn warn_short(sample: &RegionSample, p: usize) {
    if sample.n_times() <= p {
        log::warn!(
            "subject '{}', task {}: T = {} is not larger than p = {p}; weights rely on the ridge penalty",
            sample.subject_id,
            sample.task_label,
            sample.n_times()
        );
    }
}

/// Ridge-fits region `i` on its functional neighbours.
pub fn fit_mesh(sample: &RegionSample, i: usize, spec: &NeighborhoodSpec) -> Result<MadVector> {
    let neighbors = pearson_neighbors(sample, i, spec)?;
    warn_short(sample, spec.p);
    let y = prepare_series(sample, spec.standardize);
    fit_with_neighbors(&y, i, neighbors, spec.ridge_lambda)
}

/// Descriptors for every region of `sample`.
pub fn compute_mads(sample: &RegionSample, spec: &NeighborhoodSpec) -> Result<MadSet> {
    let r = sample.n_regions();
    spec.validate(r)?;
    warn_short(sample, spec.p);
    let corr = correlation_matrix(&sample.series);
    let y = prepare_series(sample, spec.standardize);
    let mut weights = DMatrix::zeros(r, r);
    let mut residual_vars = Vec::with_capacity(r);
    for i in 0..r {
        let nb = rank_neighbors(corr.row(i).iter().copied(), i, spec.p, spec.absolute_correlation);
        let v = fit_with_neighbors(&y, i, nb, spec.ridge_lambda).map_err(|e| match e {
            Error::Numerical(m) => Error::numerical(format!(
                "subject '{}', task {}, region '{}': {m}",
                sample.subject_id, sample.task_label, sample.region_names[i]
            )),
            other => other,
        })?;
        weights.row_mut(i).copy_from(&v.weights.transpose());
        residual_vars.push(v.residual_var);
    }
    Ok(MadSet {
        subject_id: sample.subject_id.clone(),
        task_label: sample.task_label,
        weights,
        residual_vars,
    })
}

/// Sidecar written next to a MAD CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadSidecar {
    pub subject_id: String,
    pub task_label: u32,
    pub p: usize,
    pub ridge_lambda: f64,
    pub standardized: bool,
    #[serde(default)]
    pub absolute_correlation: bool,
    #[serde(default)]
    pub residual_vars: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<store::Provenance>,
}

/// Writes `<stem>.csv` (R x R) and `<stem>.json`.
pub fn write_madset(
    set: &MadSet,
    spec: &NeighborhoodSpec,
    stem: &Path,
    provenance: Option<&store::Provenance>,
) -> Result<()> {
    store::write_atomic(&stem.with_extension("csv"), store::matrix_csv(&set.weights).as_bytes())?;
    let sidecar = MadSidecar {
        subject_id: set.subject_id.clone(),
        task_label: set.task_label,
        p: spec.p,
        ridge_lambda: spec.ridge_lambda,
        standardized: spec.standardize,
        absolute_correlation: spec.absolute_correlation,
        residual_vars: set.residual_vars.clone(),
        provenance: provenance.cloned(),
    };
    store::write_json(&stem.with_extension("json"), &sidecar)
}

pub fn read_madset(stem: &Path) -> Result<(MadSet, MadSidecar)> {
    let sidecar: MadSidecar = store::read_json(&stem.with_extension("json"))?;
    let csv_path = stem.with_extension("csv");
    let weights = store::read_matrix_csv(&csv_path)?;
    if weights.nrows() != weights.ncols() {
        return Err(Error::parse(&csv_path, "MAD matrix is not square"));
    }
    let residual_vars = if sidecar.residual_vars.len() == weights.nrows() {
        sidecar.residual_vars.clone()
    } else {
        vec![0.0; weights.nrows()]
    };
    Ok((
        MadSet {
            subject_id: sidecar.subject_id.clone(),
            task_label: sidecar.task_label,
            weights,
            residual_vars,
        },
        sidecar,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::default_region_names;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_sample(r: usize, t: usize, seed: u64) -> RegionSample {
        let mut rng = crate::seed::rng(seed);
        let m = DMatrix::from_fn(r, t, |_, _| rng.sample::<f64, _>(StandardNormal));
        RegionSample::new("s", 1, m, default_region_names(r)).unwrap()
    }

    #[test]
    fn affine_copy_ranks_first() {
        let mut s = random_sample(5, 40, 1);
        let copy = s.series.row(0) * 3.0;
        s.series.row_mut(3).copy_from(&copy.add_scalar(2.0));
        let nb = pearson_neighbors(&s, 0, &NeighborhoodSpec::new(2)).unwrap();
        assert_eq!(nb[0], 3);
    }

    #[test]
    fn p_max_returns_every_other_region() {
        let s = random_sample(6, 30, 2);
        let mut nb = pearson_neighbors(&s, 2, &NeighborhoodSpec::new(5)).unwrap();
        nb.sort();
        assert_eq!(nb, vec![0, 1, 3, 4, 5]);
    }

    #[test]
    fn neighbors_match_brute_force_sort() {
        let s = random_sample(6, 25, 3);
        let t = s.n_times() as f64;
        for i in 0..6 {
            // O(R^2 T) oracle straight from the definition.
            let mut all: Vec<(usize, f64)> = Vec::new();
            for j in 0..6 {
                if j == i {
                    continue;
                }
                let xi: Vec<f64> = s.series.row(i).iter().copied().collect();
                let xj: Vec<f64> = s.series.row(j).iter().copied().collect();
                let mi = xi.iter().sum::<f64>() / t;
                let mj = xj.iter().sum::<f64>() / t;
                let mut sxy = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                for k in 0..xi.len() {
                    sxy += (xi[k] - mi) * (xj[k] - mj);
                    sxx += (xi[k] - mi).powi(2);
                    syy += (xj[k] - mj).powi(2);
                }
                all.push((j, sxy / (sxx * syy).sqrt()));
            }
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let expected: Vec<usize> = all.iter().take(3).map(|x| x.0).collect();
            assert_eq!(pearson_neighbors(&s, i, &NeighborhoodSpec::new(3)).unwrap(), expected);
        }
    }

    #[test]
    fn neighbourhoods_need_not_be_symmetric() {
        // Region 1 tracks 0 closely; region 2 tracks 1 most, 0 less; region 3
        // is noise. With p = 1: eta(2) = {1} but eta(1) = {0}.
        let mut s = random_sample(4, 200, 4);
        let mut rng = crate::seed::rng(40);
        for k in 0..200 {
            let base = s.series[(0, k)];
            s.series[(1, k)] = base + 0.1 * rng.sample::<f64, _>(StandardNormal);
            s.series[(2, k)] = s.series[(1, k)] + 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        let spec = NeighborhoodSpec::new(1);
        assert_eq!(pearson_neighbors(&s, 2, &spec).unwrap(), vec![1]);
        assert_eq!(pearson_neighbors(&s, 1, &spec).unwrap(), vec![0]);
    }

    #[test]
    fn exact_linear_relation_without_penalty() {
        let mut s = random_sample(3, 20, 5);
        let doubled = s.series.row(1) * 2.0;
        s.series.row_mut(0).copy_from(&doubled);
        let spec = NeighborhoodSpec::new(1).with_lambda(0.0).with_standardize(false);
        let v = fit_mesh(&s, 0, &spec).unwrap();
        assert_eq!(v.neighbors, vec![1]);
        assert!((v.weights[1] - 2.0).abs() < 1e-12);
        assert!(v.residual_var < 1e-20);
    }

    #[test]
    fn shrinkage_is_monotone_and_vanishes() {
        let s = random_sample(8, 30, 6);
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 0.1, 1.0, 10.0, 100.0, 1e4, 1e8] {
            let v = fit_mesh(&s, 2, &NeighborhoodSpec::new(4).with_lambda(lambda)).unwrap();
            let n = v.weights.norm();
            assert!(n <= prev + 1e-12);
            prev = n;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn singular_gram_without_penalty_errors() {
        let mut s = random_sample(4, 20, 7);
        let copy = s.series.row(1).clone_owned();
        s.series.row_mut(2).copy_from(&(copy * -1.0));
        // region 0's neighbours include 1 and 2 with p = 3, which are collinear
        let spec = NeighborhoodSpec::new(3).with_lambda(0.0);
        let err = fit_mesh(&s, 0, &spec).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("ridge_lambda > 0"));
        assert!(fit_mesh(&s, 0, &NeighborhoodSpec::new(3)).is_ok());
    }

    #[test]
    fn every_row_has_p_nonzeros_and_zero_diagonal() {
        let s = random_sample(4, 30, 8);
        let set = compute_mads(&s, &NeighborhoodSpec::new(1)).unwrap();
        assert_eq!(set.weights.nrows(), 4);
        for i in 0..4 {
            assert_eq!(set.weights[(i, i)], 0.0);
            assert_eq!(set.weights.row(i).iter().filter(|&&v| v != 0.0).count(), 1);
        }
    }

    #[test]
    fn concatenation_layout() {
        let set = MadSet {
            subject_id: "s".into(),
            task_label: 1,
            weights: DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 0.0]),
            residual_vars: vec![0.0; 3],
        };
        let flat = concatenate(&set);
        assert_eq!(flat, vec![0.0, 1.0, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 0.0]);
        let back = MadSet::from_concatenated("s", 1, &flat, 3).unwrap();
        assert_eq!(back.weights, set.weights);
        let zero = MadSet::from_concatenated("s", 1, &[0.0; 9], 3).unwrap();
        assert_eq!(concatenate(&zero), vec![0.0; 9]);
    }

    #[test]
    fn madset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = random_sample(5, 30, 9);
        let spec = NeighborhoodSpec::new(2);
        let set = compute_mads(&s, &spec).unwrap();
        let stem = dir.path().join("s_task1");
        write_madset(&set, &spec, &stem, None).unwrap();
        let (back, side) = read_madset(&stem).unwrap();
        assert_eq!(back, set);
        assert_eq!(side.p, 2);
        assert!(side.standardized);
    }
}
