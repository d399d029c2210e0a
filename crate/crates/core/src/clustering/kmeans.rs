use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde_json::json;

use super::{columns, sq_dist};
use crate::error::{Error, Result};
use crate::seed;
use crate::store;

pub const KMEANS_KIND: &str = "kmeans";

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    /// `K x D`.
    pub centroids: DMatrix<f64>,
    pub seed: u64,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroid(&self, k: usize) -> Vec<f64> {
        self.centroids.row(k).iter().copied().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        store::encode_matrices(&[("centroids", &self.centroids)])
    }

    pub fn save(&self, stem: &Path, provenance: Option<&store::Provenance>) -> Result<String> {
        store::write_model(
            stem,
            KMEANS_KIND,
            json!({ "k": self.k(), "dim": self.dim(), "seed": self.seed, "provenance": provenance }),
            &[("centroids", &self.centroids)],
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let mut m = store::read_model(stem, KMEANS_KIND)?;
        let seed = m.meta["seed"].as_u64().unwrap_or(0);
        Ok(Self {
            centroids: m.take("centroids")?,
            seed,
            inertia_trace: Vec::new(),
        })
    }
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn assign(model: &KMeansModel, x: &[f64]) -> usize {
    let t = model.centroids.transpose();
    nearest(&t, x).0
}

/// `centroids_t` is `D x K`.
fn nearest(centroids_t: &DMatrix<f64>, x: &[f64]) -> (usize, f64) {
    let d = centroids_t.nrows();
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids_t.as_slice().chunks_exact(d).enumerate() {
        let dist = sq_dist(c, x);
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

fn distinct_count(cols: &DMatrix<f64>) -> usize {
    let d = cols.nrows();
    cols.as_slice()
        .chunks_exact(d)
        .map(|c| c.iter().map(|v| (v + 0.0).to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn plus_plus_init(cols: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let (d, n) = cols.shape();
    let point = |i: usize| &cols.as_slice()[i * d..(i + 1) * d];
    let mut centers = DMatrix::zeros(d, k);
    let first = rng.random_range(0..n);
    centers.column_mut(0).copy_from_slice(point(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let mut target = rng.random_range(0.0..1.0) * total;
        let mut chosen = n - 1;
        for (i, &w) in dist.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if target < w {
                chosen = i;
                break;
            }
            target -= w;
        }
        while dist[chosen] <= 0.0 {
            chosen -= 1;
        }
        centers.column_mut(c).copy_from_slice(point(chosen));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(point(i), point(chosen)));
        }
    }
    centers
}

pub fn fit_kmeans(data: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeansModel> {
    fit_kmeans_with(data, k, seed, 300)
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// stable and no cluster is empty, or `max_iter` is reached. Empty clusters
/// are moved onto the point farthest from its current centroid.
pub fn fit_kmeans_with(data: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeansModel> {
    let (n, d) = data.shape();
    if k == 0 {
        return Err(Error::validation("k-means needs K >= 1"));
    }
    if d == 0 {
        return Err(Error::validation("k-means needs descriptors of dimension >= 1"));
    }
    let cols = columns(data);
    let distinct = distinct_count(&cols);
    if k > distinct {
        return Err(Error::validation(format!(
            "K = {k} exceeds the {distinct} distinct descriptors"
        )));
    }
    let point = |i: usize| &cols.as_slice()[i * d..(i + 1) * d];
    let mut rng = seed::rng(seed);
    let mut centers = plus_plus_init(&cols, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let (best, dist) = nearest(&centers, point(i));
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            dists[i] = dist;
            inertia += dist;
        }
        trace.push(inertia);
        let mut sums = DMatrix::zeros(d, k);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut col = sums.column_mut(labels[i]);
            for (s, &x) in col.iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        let any_empty = counts.contains(&0);
        if !changed && !any_empty {
            break;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.column(c) / counts[c] as f64;
                centers.column_mut(c).copy_from(&mean);
            }
        }
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = (0..n)
                .fold((0usize, f64::NEG_INFINITY), |b, i| if dists[i] > b.1 { (i, dists[i]) } else { b })
                .0;
            centers.column_mut(c).copy_from_slice(point(far));
            dists[far] = 0.0;
        }
    }
    Ok(KMeansModel {
        centroids: centers.transpose(),
        seed,
        inertia_trace: trace,
    })
}
