//! Subject-disjoint cross-validation of the full encode-and-classify pipeline.
//!
//! Descriptors are per-sample and computed once. Everything fitted on data
//! (PCA, dictionary, SVM) is refitted inside each fold on training samples
//! only.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svm::{train_svm, LinearModel, SvmOptions};
use crate::clustering::{fit_gmm_with, fit_kmeans_with, GmmModel, GmmOptions, KMeansModel};
use crate::config::{PipelineConfig, Projection};
use crate::dataio::{make_folds, DatasetManifest, FoldPlan};
use crate::decomp::{fit_pca, PcaModel};
use crate::encoding::{encode_bow, encode_fv, encode_fv_raw, encode_vlad, EncoderKind};
use crate::error::{Error, Result};
use crate::mesh::{compute_mads, concatenate, MadSet, NeighborhoodSpec};
use crate::seed;
use crate::store::{self, Provenance};

/// Descriptors for every sample, in manifest order.
pub fn compute_all_mads(manifest: &DatasetManifest, spec: &NeighborhoodSpec) -> Result<Vec<MadSet>> {
    manifest.samples.par_iter().map(|s| compute_mads(s, spec)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderSettings {
    pub kind: EncoderKind,
    pub k: usize,
    pub projection: Projection,
    pub normalize_fv: bool,
    pub normalize_vlad: bool,
    pub bow_l1: bool,
    pub gmm: GmmOptions,
    pub kmeans_max_iter: usize,
}

impl EncoderSettings {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            kind: cfg.encoder,
            k: cfg.k,
            projection: cfg.pca_dim,
            normalize_fv: cfg.normalize_fv,
            normalize_vlad: cfg.normalize_vlad,
            bow_l1: cfg.bow_l1,
            gmm: cfg.gmm,
            kmeans_max_iter: cfg.kmeans_max_iter.unwrap_or(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dictionary {
    None,
    Gmm(GmmModel),
    KMeans(KMeansModel),
}

/// PCA plus dictionary, fitted on one training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedEncoder {
    pub settings: EncoderSettings,
    pub pca: Option<PcaModel>,
    pub dictionary: Dictionary,
    n_regions: usize,
}

/// Stacks the descriptor rows of every set into one `(sum R) x R` matrix.
pub fn stack_descriptors(sets: &[&MadSet]) -> Result<DMatrix<f64>> {
    let r = sets
        .first()
        .map(|s| s.n_regions())
        .ok_or_else(|| Error::validation("no training samples"))?;
    let mut out = DMatrix::zeros(sets.len() * r, r);
    for (i, s) in sets.iter().enumerate() {
        if s.n_regions() != r {
            return Err(Error::dimension("descriptor set size", r, s.n_regions()));
        }
        out.rows_mut(i * r, r).copy_from(&s.weights);
    }
    Ok(out)
}

impl FittedEncoder {
    /// Fits PCA (when configured) and the dictionary on `train`. Errors are
    /// tagged with `fold` and the failing stage.
    pub fn fit(train: &[&MadSet], settings: &EncoderSettings, base_seed: u64, fold: usize) -> Result<Self> {
        let raw = stack_descriptors(train).map_err(|e| e.in_stage(fold, "descriptors"))?;
        let n_regions = raw.ncols();
        let (pca, data) = match settings.projection {
            Projection::None => (None, raw),
            Projection::Pca(d) => {
                let pca = fit_pca(&raw, d).map_err(|e| e.in_stage(fold, "pca"))?;
                let projected = pca.project_rows(&raw).map_err(|e| e.in_stage(fold, "pca"))?;
                (Some(pca), projected)
            }
        };
        let f = fold as u64;
        let dictionary = match settings.kind {
            EncoderKind::Mad => Dictionary::None,
            EncoderKind::Fv => Dictionary::Gmm(
                fit_gmm_with(&data, settings.k, seed::sub_seed(base_seed, "gmm", f), &settings.gmm)
                    .map_err(|e| e.in_stage(fold, "gmm"))?,
            ),
            EncoderKind::Vlad | EncoderKind::Bow => Dictionary::KMeans(
                fit_kmeans_with(
                    &data,
                    settings.k,
                    seed::sub_seed(base_seed, "kmeans", f),
                    settings.kmeans_max_iter,
                )
                .map_err(|e| e.in_stage(fold, "kmeans"))?,
            ),
        };
        Ok(Self {
            settings: *settings,
            pca,
            dictionary,
            n_regions,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.pca.as_ref().map_or(self.n_regions, |p| p.output_dim())
    }

    pub fn output_len(&self) -> usize {
        let d = self.descriptor_dim();
        match self.settings.kind {
            EncoderKind::Mad => self.n_regions * d,
            kind => kind.output_len(self.settings.k, d),
        }
    }

    /// Descriptors of `set` after the optional projection.
    pub fn descriptors(&self, set: &MadSet) -> Result<DMatrix<f64>> {
        if set.n_regions() != self.n_regions {
            return Err(Error::dimension("descriptor set size", self.n_regions, set.n_regions()));
        }
        match &self.pca {
            Some(p) => p.project_rows(&set.weights),
            None => Ok(set.weights.clone()),
        }
    }

    /// Unnormalised Fisher vector; only defined for the `fv` encoder.
    pub fn encode_fv_raw(&self, set: &MadSet) -> Result<Vec<f64>> {
        match &self.dictionary {
            Dictionary::Gmm(g) => Ok(encode_fv_raw(g, &self.descriptors(set)?)?.values),
            _ => Err(Error::validation("raw Fisher vectors need the fv encoder")),
        }
    }

    pub fn encode(&self, set: &MadSet) -> Result<Vec<f64>> {
        let a = self.descriptors(set)?;
        Ok(match (&self.dictionary, self.settings.kind) {
            (Dictionary::Gmm(g), _) => {
                if self.settings.normalize_fv {
                    encode_fv(g, &a)?.values
                } else {
                    encode_fv_raw(g, &a)?.values
                }
            }
            (Dictionary::KMeans(km), EncoderKind::Vlad) => encode_vlad(km, &a, self.settings.normalize_vlad)?.values,
            (Dictionary::KMeans(km), _) => {
                let h = encode_bow(km, &a)?;
                if self.settings.bow_l1 {
                    h.frequencies()
                } else {
                    h.counts.iter().map(|&c| c as f64).collect()
                }
            }
            (Dictionary::None, _) => a.transpose().as_slice().to_vec(),
        })
    }

    /// One encoded row per set.
    pub fn encode_all(&self, sets: &[&MadSet]) -> Result<DMatrix<f64>> {
        let rows: Vec<Vec<f64>> = sets.par_iter().map(|s| self.encode(s)).collect::<Result<_>>()?;
        Ok(rows_to_matrix(&rows, self.output_len()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.pca.as_ref().map(|p| p.to_bytes()).unwrap_or_default();
        match &self.dictionary {
            Dictionary::None => {}
            Dictionary::Gmm(g) => out.extend(g.to_bytes()),
            Dictionary::KMeans(k) => out.extend(k.to_bytes()),
        }
        out
    }
}

pub fn rows_to_matrix(rows: &[Vec<f64>], width: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j])
}

/// Everything fitted for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldModels {
    pub encoder: FittedEncoder,
    pub svm: LinearModel,
}

impl FoldModels {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.encoder.to_bytes();
        out.extend(self.svm.to_bytes());
        out
    }
}

/// Fits the encoder and classifier on the given training sets only.
pub fn fit_fold(train: &[&MadSet], cfg: &PipelineConfig, fold: usize) -> Result<FoldModels> {
    let encoder = FittedEncoder::fit(train, &EncoderSettings::from_config(cfg), cfg.seed, fold)?;
    let x = encoder.encode_all(train).map_err(|e| e.in_stage(fold, "encode"))?;
    let y: Vec<u32> = train.iter().map(|s| s.task_label).collect();
    let svm = train_svm(&x, &y, &cfg.svm_options()).map_err(|e| e.in_stage(fold, "svm"))?;
    Ok(FoldModels { encoder, svm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvParams {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<Projection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub svm_c: f64,
}

impl CvParams {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        let kind = cfg.encoder;
        Self {
            method: kind.name().to_string(),
            p: Some(cfg.p),
            d: Some(cfg.pca_dim),
            k: (kind != EncoderKind::Mad).then_some(cfg.k),
            svm_c: cfg.svm_c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub params: CvParams,
    pub n_folds: usize,
    pub fold_seed: u64,
    /// Per-fold accuracy in percent.
    pub fold_accuracy: Vec<f64>,
    /// Mean of `fold_accuracy`.
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub classes: Vec<u32>,
    /// `confusion_counts[true][predicted]`.
    pub confusion_counts: Vec<Vec<usize>>,
    /// Row-normalised counts.
    pub confusion: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl CvReport {
    /// Mean of the confusion diagonal: the mean per-class recall.
    pub fn mean_class_accuracy(&self) -> f64 {
        let c = self.confusion.len();
        (0..c).map(|i| self.confusion[i][i]).sum::<f64>() / c as f64
    }

    pub fn fold_table_csv(&self) -> String {
        let header = serde_json::to_value(&self.params).ok();
        let mut rows = vec![vec!["fold".to_string(), "accuracy".to_string()]];
        for (k, a) in self.fold_accuracy.iter().enumerate() {
            rows.push(vec![k.to_string(), store::fmt_f64(*a)]);
        }
        rows.push(vec!["mean".into(), store::fmt_f64(self.mean_accuracy)]);
        rows.push(vec!["std".into(), store::fmt_f64(self.std_accuracy)]);
        store::csv_with_header(header.as_ref(), rows)
    }

    pub fn confusion_csv(&self) -> String {
        let mut head = vec!["true\\predicted".to_string()];
        head.extend(self.classes.iter().map(|c| c.to_string()));
        let mut rows = vec![head];
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            let mut r = vec![c.to_string()];
            r.extend(row.iter().map(|v| store::fmt_f64(*v)));
            rows.push(r);
        }
        store::csv_with_header(None, rows)
    }
}

/// Test-fold predictions of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub test: Vec<usize>,
    pub predictions: Vec<u32>,
}

/// Features for one fold: `(train rows, test rows)` in the order of the
/// given indices.
pub type FoldFeatures = (DMatrix<f64>, DMatrix<f64>);

/// Runs every fold in parallel. `features(fold, train, test)` must only
/// fit on `train`.
pub fn run_folds<F>(
    labels: &[u32],
    subjects: &[&str],
    plan: &FoldPlan,
    svm: &SvmOptions,
    features: F,
) -> Result<Vec<FoldOutcome>>
where
    F: Fn(usize, &[usize], &[usize]) -> Result<FoldFeatures> + Sync,
{
    (0..plan.n_folds)
        .into_par_iter()
        .map(|fold| {
            let (train, test) = plan.split_subjects(subjects.iter().copied(), fold)?;
            let (xtr, xte) = features(fold, &train, &test)?;
            let ytr: Vec<u32> = train.iter().map(|&i| labels[i]).collect();
            let model = train_svm(&xtr, &ytr, svm).map_err(|e| e.in_stage(fold, "svm"))?;
            let predictions = model.predict_rows(&xte).map_err(|e| e.in_stage(fold, "predict"))?;
            Ok(FoldOutcome { test, predictions })
        })
        .collect()
}

/// Summarises fold outcomes into accuracies and a confusion matrix over
/// classes `1..=n_classes`.
pub fn summarize(
    labels: &[u32],
    n_classes: usize,
    outcomes: &[FoldOutcome],
    params: CvParams,
    fold_seed: u64,
) -> CvReport {
    let mut counts = vec![vec![0usize; n_classes]; n_classes];
    let mut fold_accuracy = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let mut hits = 0usize;
        for (&i, &p) in o.test.iter().zip(&o.predictions) {
            let t = labels[i];
            if t == p {
                hits += 1;
            }
            counts[t as usize - 1][p as usize - 1] += 1;
        }
        let n = o.test.len().max(1);
        fold_accuracy.push(100.0 * hits as f64 / n as f64);
    }
    let nf = fold_accuracy.len() as f64;
    let mean = fold_accuracy.iter().sum::<f64>() / nf;
    let std = if fold_accuracy.len() > 1 {
        (fold_accuracy.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        0.0
    };
    let confusion = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect();
    CvReport {
        params,
        n_folds: outcomes.len(),
        fold_seed,
        fold_accuracy,
        mean_accuracy: mean,
        std_accuracy: std,
        classes: (1..=n_classes as u32).collect(),
        confusion_counts: counts,
        confusion,
        provenance: None,
    }
}

/// Cross-validates precomputed descriptors with the encoder in `cfg`.
pub fn cross_validate_mads(
    mads: &[MadSet],
    n_classes: usize,
    cfg: &PipelineConfig,
    plan: &FoldPlan,
) -> Result<CvReport> {
    let labels: Vec<u32> = mads.iter().map(|m| m.task_label).collect();
    let subjects: Vec<&str> = mads.iter().map(|m| m.subject_id.as_str()).collect();
    let settings = EncoderSettings::from_config(cfg);
    let outcomes = run_folds(&labels, &subjects, plan, &cfg.svm_options(), |fold, train, test| {
        let tr: Vec<&MadSet> = train.iter().map(|&i| &mads[i]).collect();
        let te: Vec<&MadSet> = test.iter().map(|&i| &mads[i]).collect();
        let enc = FittedEncoder::fit(&tr, &settings, cfg.seed, fold)?;
        let xtr = enc.encode_all(&tr).map_err(|e| e.in_stage(fold, "encode"))?;
        let xte = enc.encode_all(&te).map_err(|e| e.in_stage(fold, "encode"))?;
        Ok((xtr, xte))
    })?;
    Ok(summarize(&labels, n_classes, &outcomes, CvParams::from_config(cfg), plan.seed))
}

/// Descriptors, folds and cross-validation in one call.
pub fn cross_validate(manifest: &DatasetManifest, cfg: &PipelineConfig) -> Result<CvReport> {
    cfg.validate()?;
    let mads = compute_all_mads(manifest, &cfg.neighborhood())?;
    let plan = make_folds(manifest, cfg.folds, cfg.seed)?;
    let mut report = cross_validate_mads(&mads, manifest.n_classes, cfg, &plan)?;
    report.provenance = Some(cfg.provenance());
    Ok(report)
}

/// Cross-validates fixed per-sample feature vectors (no fitted encoder).
pub fn cross_validate_features(
    features: &DMatrix<f64>,
    labels: &[u32],
    subjects: &[&str],
    n_classes: usize,
    plan: &FoldPlan,
    svm: &SvmOptions,
    params: CvParams,
) -> Result<CvReport> {
    let pick = |idx: &[usize]| DMatrix::from_fn(idx.len(), features.ncols(), |i, j| features[(idx[i], j)]);
    let outcomes = run_folds(labels, subjects, plan, svm, |_, train, test| Ok((pick(train), pick(test))))?;
    Ok(summarize(labels, n_classes, &outcomes, params, plan.seed))
}

/// Flattened raw descriptors, one row per sample.
pub fn concatenated_features(mads: &[MadSet]) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = mads.iter().map(concatenate).collect();
    let width = rows.first().map_or(0, Vec::len);
    rows_to_matrix(&rows, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthConfig};

    fn small() -> (DatasetManifest, PipelineConfig) {
        let m = generate_synthetic(&SynthConfig::new(8, 3, 6, 60, 0.3, 5)).unwrap();
        let mut cfg = PipelineConfig::new(3, 11);
        cfg.pca_dim = Projection::Pca(4);
        cfg.k = 3;
        cfg.folds = 3;
        (m, cfg)
    }

    #[test]
    fn report_is_consistent() {
        let (m, cfg) = small();
        let r = cross_validate(&m, &cfg).unwrap();
        assert_eq!(r.fold_accuracy.len(), 3);
        for row in &r.confusion {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let total: usize = r.confusion_counts.iter().flatten().sum();
        assert_eq!(total, m.samples.len());
    }

    #[test]
    fn every_encoder_runs() {
        let (m, mut cfg) = small();
        for kind in [EncoderKind::Fv, EncoderKind::Vlad, EncoderKind::Bow, EncoderKind::Mad] {
            cfg.encoder = kind;
            let r = cross_validate(&m, &cfg).unwrap();
            assert!(r.mean_accuracy >= 0.0 && r.mean_accuracy <= 100.0);
        }
    }

    #[test]
    fn failing_stage_is_named() {
        let (m, mut cfg) = small();
        cfg.pca_dim = Projection::Pca(50);
        let err = cross_validate(&m, &cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "pca", .. }), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn encoder_output_lengths() {
        let (m, mut cfg) = small();
        let mads = compute_all_mads(&m, &cfg.neighborhood()).unwrap();
        let sets: Vec<&MadSet> = mads.iter().collect();
        for (kind, want) in [
            (EncoderKind::Fv, 2 * 3 * 4),
            (EncoderKind::Vlad, 3 * 4),
            (EncoderKind::Bow, 3),
            (EncoderKind::Mad, 8 * 4),
        ] {
            cfg.encoder = kind;
            let enc = FittedEncoder::fit(&sets, &EncoderSettings::from_config(&cfg), 1, 0).unwrap();
            assert_eq!(enc.encode(&mads[0]).unwrap().len(), want);
            assert_eq!(enc.output_len(), want);
        }
    }
}
