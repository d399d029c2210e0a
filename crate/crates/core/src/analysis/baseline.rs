//! Feature baselines without descriptors: raw region series and Pearson
//! correlation pairs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::classify::{cross_validate_features, rows_to_matrix, CvParams, CvReport};
use crate::config::PipelineConfig;
use crate::dataio::{make_folds, DatasetManifest};
use crate::error::{Error, Result};
use crate::mesh::correlation_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Bold,
    Pearson,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Bold => "bold",
            BaselineKind::Pearson => "pearson",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bold" => Ok(BaselineKind::Bold),
            "pearson" => Ok(BaselineKind::Pearson),
            other => Err(Error::validation(format!("unknown baseline '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFeatures {
    pub features: DMatrix<f64>,
    /// Common length every series was cut to (bold only).
    pub truncated_to: Option<usize>,
}

/// `bold`: region series cut to the shortest `T` in the dataset and
/// concatenated region by region. `pearson`: upper-triangle correlations
/// `(i, j)` with `i < j`, row-major.
pub fn baseline_features(manifest: &DatasetManifest, kind: BaselineKind) -> Result<BaselineFeatures> {
    let r = manifest.n_regions;
    match kind {
        BaselineKind::Bold => {
            let t = manifest
                .samples
                .iter()
                .map(|s| s.n_times())
                .min()
                .ok_or_else(|| Error::validation("empty dataset"))?;
            let rows: Vec<Vec<f64>> = manifest
                .samples
                .iter()
                .map(|s| (0..r).flat_map(|i| (0..t).map(move |j| s.series[(i, j)])).collect())
                .collect();
            Ok(BaselineFeatures {
                features: rows_to_matrix(&rows, r * t),
                truncated_to: Some(t),
            })
        }
        BaselineKind::Pearson => {
            let rows: Vec<Vec<f64>> = manifest
                .samples
                .iter()
                .map(|s| {
                    let c = correlation_matrix(&s.series);
                    (0..r).flat_map(|i| (i + 1..r).map(move |j| (i, j))).map(|(i, j)| c[(i, j)]).collect()
                })
                .collect();
            Ok(BaselineFeatures {
                features: rows_to_matrix(&rows, r * (r - 1) / 2),
                truncated_to: None,
            })
        }
    }
}

/// Cross-validates baseline features with the folds and SVM settings of `cfg`.
pub fn run_baseline(manifest: &DatasetManifest, kind: BaselineKind, cfg: &PipelineConfig) -> Result<CvReport> {
    cfg.validate()?;
    let f = baseline_features(manifest, kind)?;
    let plan = make_folds(manifest, cfg.folds, cfg.seed)?;
    let labels = manifest.labels();
    let subjects: Vec<&str> = manifest.samples.iter().map(|s| s.subject_id.as_str()).collect();
    let params = CvParams {
        method: kind.name().to_string(),
        p: None,
        d: None,
        k: None,
        svm_c: cfg.svm_c,
    };
    let mut report =
        cross_validate_features(&f.features, &labels, &subjects, manifest.n_classes, &plan, &cfg.svm_options(), params)?;
    report.provenance = Some(cfg.provenance());
    Ok(report)
}
