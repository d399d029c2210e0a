//! Region-level datasets: validation, loading and writing, voxel-to-region
//! averaging, synthetic generation and subject-disjoint fold plans.

mod folds;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{self, Provenance};

pub use folds::{make_folds, FoldPlan};
pub use synth::{generate_synthetic, SynthConfig};

/// Voxel series of one region, `J_i x T`.
#[derive(Debug, Clone)]
pub struct VoxelBlock {
    /// 1-based region index.
    pub region_id: usize,
    pub series: DMatrix<f64>,
}

/// One (subject, task) recording: `R x T` region series.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSample {
    pub subject_id: String,
    /// Class label in `1..=C`.
    pub task_label: u32,
    pub series: DMatrix<f64>,
    pub region_names: Arc<Vec<String>>,
}

impl RegionSample {
    /// Builds a sample and checks shape, finiteness and that no row is constant.
    pub fn new(
        subject_id: impl Into<String>,
        task_label: u32,
        series: DMatrix<f64>,
        region_names: Arc<Vec<String>>,
    ) -> Result<Self> {
        let sample = Self {
            subject_id: subject_id.into(),
            task_label,
            series,
            region_names,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn n_regions(&self) -> usize {
        self.series.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.series.ncols()
    }

    fn describe(&self) -> String {
        format!("subject '{}', task {}", self.subject_id, self.task_label)
    }

    fn validate(&self) -> Result<()> {
        let (r, t) = self.series.shape();
        if r < 2 {
            return Err(Error::validation(format!("{}: need at least 2 regions, got {r}", self.describe())));
        }
        if t < 2 {
            return Err(Error::validation(format!("{}: need at least 2 time points, got {t}", self.describe())));
        }
        if self.region_names.len() != r {
            return Err(Error::validation(format!(
                "{}: {} region names for {r} regions",
                self.describe(),
                self.region_names.len()
            )));
        }
        if self.task_label == 0 {
            return Err(Error::validation(format!("{}: task labels start at 1", self.describe())));
        }
        for (i, row) in self.series.row_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "{}: region '{}' has non-finite values",
                    self.describe(),
                    self.region_names[i]
                )));
            }
            let first = row[0];
            if row.iter().all(|&v| v == first) {
                return Err(Error::validation(format!(
                    "{}: region '{}' is constant",
                    self.describe(),
                    self.region_names[i]
                )));
            }
        }
        Ok(())
    }
}

/// A validated collection of samples sharing regions.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<RegionSample>,
    pub n_classes: usize,
    pub n_regions: usize,
    pub region_names: Arc<Vec<String>>,
    /// Time points per class label.
    pub t_per_class: BTreeMap<u32, usize>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<RegionSample>, region_names: Arc<Vec<String>>) -> Result<Self> {
        let n_regions = region_names.len();
        if n_regions < 2 {
            return Err(Error::validation("dataset needs at least 2 regions"));
        }
        if samples.is_empty() {
            return Err(Error::validation("dataset has no samples"));
        }
        let mut seen = BTreeSet::new();
        let mut t_per_class = BTreeMap::new();
        for s in &samples {
            s.validate()?;
            if s.region_names.as_slice() != region_names.as_slice() {
                return Err(Error::validation(format!(
                    "{}: region names differ from the dataset's",
                    s.describe()
                )));
            }
            if !seen.insert((s.subject_id.clone(), s.task_label)) {
                return Err(Error::validation(format!("{}: duplicate (subject, task) pair", s.describe())));
            }
            match t_per_class.get(&s.task_label) {
                Some(&t) if t != s.n_times() => {
                    return Err(Error::validation(format!(
                        "{}: has {} time points, other samples of task {} have {t}",
                        s.describe(),
                        s.n_times(),
                        s.task_label
                    )));
                }
                _ => {
                    t_per_class.insert(s.task_label, s.n_times());
                }
            }
        }
        let n_classes = t_per_class.len();
        if t_per_class.keys().copied().ne(1..=n_classes as u32) {
            return Err(Error::validation(format!(
                "task labels must be contiguous 1..=C, found {:?}",
                t_per_class.keys().collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            samples,
            n_classes,
            n_regions,
            region_names,
            t_per_class,
        })
    }

    pub fn labels(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.task_label).collect()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.subject_id.as_str()).collect()
    }

    /// Same samples with labels replaced; used for permutation controls.
    pub fn with_labels(&self, labels: &[u32]) -> Result<Self> {
        if labels.len() != self.samples.len() {
            return Err(Error::dimension("relabel", self.samples.len(), labels.len()));
        }
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, &l)| RegionSample {
                task_label: l,
                ..s.clone()
            })
            .collect();
        // Per-class T and (subject, task) uniqueness are not meaningful for a
        // shuffled control, so this bypasses `new`.
        Ok(Self {
            samples,
            ..self.clone()
        })
    }
}

/// Averages voxel rows within each region: row `i` of the output is the mean
/// of the voxel series of region `i + 1`.
pub fn average_regions(
    blocks: &[VoxelBlock],
    subject_id: &str,
    task_label: u32,
    region_names: Arc<Vec<String>>,
) -> Result<RegionSample> {
    let n_regions = region_names.len();
    if blocks.len() != n_regions {
        return Err(Error::dimension("voxel blocks per region", n_regions, blocks.len()));
    }
    let t = blocks
        .first()
        .map(|b| b.series.ncols())
        .ok_or_else(|| Error::validation("no voxel blocks"))?;
    let mut out = DMatrix::zeros(n_regions, t);
    let mut filled = vec![false; n_regions];
    for block in blocks {
        let idx = block
            .region_id
            .checked_sub(1)
            .filter(|&i| i < n_regions)
            .ok_or_else(|| Error::validation(format!("region id {} outside 1..={n_regions}", block.region_id)))?;
        if filled[idx] {
            return Err(Error::validation(format!("region id {} given twice", block.region_id)));
        }
        if block.series.ncols() != t {
            return Err(Error::dimension(
                format!("time points of region {}", block.region_id),
                t,
                block.series.ncols(),
            ));
        }
        let j = block.series.nrows();
        if j == 0 {
            return Err(Error::validation(format!("region {} has no voxels", block.region_id)));
        }
        let mean = block.series.row_sum() / j as f64;
        out.row_mut(idx).copy_from(&mean);
        filled[idx] = true;
    }
    RegionSample::new(subject_id, task_label, out, region_names)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    subject_id: String,
    task_label: u32,
    matrix_path: String,
    #[serde(rename = "T")]
    t: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(rename = "R")]
    r: usize,
    #[serde(rename = "C")]
    c: usize,
    region_names: Vec<String>,
    samples: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads and validates a dataset. `path` is the manifest file or the
/// directory holding `manifest.json`; matrix paths are relative to it.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let mpath = manifest_path(path);
    let file: ManifestFile = store::read_json(&mpath)?;
    let base = mpath.parent().map(Path::to_path_buf).unwrap_or_default();
    if file.region_names.len() != file.r {
        return Err(Error::parse(
            &mpath,
            format!("R = {} but {} region names", file.r, file.region_names.len()),
        ));
    }
    let names = Arc::new(file.region_names);
    let mut samples = Vec::with_capacity(file.samples.len());
    for entry in &file.samples {
        let who = format!("subject '{}', task {}", entry.subject_id, entry.task_label);
        let mat_path = base.join(&entry.matrix_path);
        let series = store::read_matrix_csv(&mat_path).map_err(|e| match e {
            Error::MissingArtifact(p) => Error::validation(format!("{who}: matrix file {} not found", p.display())),
            other => other,
        })?;
        if series.nrows() != file.r {
            return Err(Error::validation(format!(
                "{who}: {} has {} rows, manifest says R = {}",
                mat_path.display(),
                series.nrows(),
                file.r
            )));
        }
        if series.ncols() != entry.t {
            return Err(Error::validation(format!(
                "{who}: {} has {} columns, manifest says T = {}",
                mat_path.display(),
                series.ncols(),
                entry.t
            )));
        }
        samples.push(RegionSample::new(
            entry.subject_id.clone(),
            entry.task_label,
            series,
            names.clone(),
        )?);
    }
    let manifest = DatasetManifest::new(samples, names)?;
    if manifest.n_classes != file.c {
        return Err(Error::validation(format!(
            "manifest says C = {}, samples carry {} classes",
            file.c, manifest.n_classes
        )));
    }
    Ok(manifest)
}

fn file_stem_for(subject: &str, task: u32) -> String {
    let clean: String = subject
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{clean}_task{task}")
}

/// Writes `manifest.json` plus one CSV per sample under `dir/matrices/`.
pub fn write_dataset(
    manifest: &DatasetManifest,
    dir: &Path,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let rel = format!("matrices/{}.csv", file_stem_for(&s.subject_id, s.task_label));
        store::write_atomic(&dir.join(&rel), store::matrix_csv(&s.series).as_bytes())?;
        entries.push(ManifestEntry {
            subject_id: s.subject_id.clone(),
            task_label: s.task_label,
            matrix_path: rel,
            t: s.n_times(),
        });
    }
    let file = ManifestFile {
        r: manifest.n_regions,
        c: manifest.n_classes,
        region_names: manifest.region_names.to_vec(),
        samples: entries,
        provenance: provenance.cloned(),
    };
    store::write_json(&dir.join(MANIFEST_FILE), &file)
}

/// Default region names `R01, R02, ...`.
pub fn default_region_names(n: usize) -> Arc<Vec<String>> {
    let width = n.to_string().len().max(2);
    Arc::new((1..=n).map(|i| format!("R{i:0width$}")).collect())
}
