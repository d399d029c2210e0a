//! Fisher vector block energy, block ablation, baselines and codeword export.

mod baseline;
mod export;

pub use baseline::{baseline_features, run_baseline, BaselineFeatures, BaselineKind};
pub use export::{export_codewords, fit_codeword_gmm, load_atlas, Atlas, CodewordExport};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    compute_all_mads, summarize, train_svm, CvParams, CvReport, EncoderSettings, FittedEncoder, FoldOutcome,
    LinearModel,
};
use crate::config::{AblationMode, AblationSpec, EmptyFeatures, EnergyEnd, PipelineConfig};
use crate::dataio::{make_folds, DatasetManifest};
use crate::encoding::EncoderKind;
use crate::error::{Error, Result};
use crate::mesh::MadSet;
use crate::store::{self, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRanking {
    /// Energy of Gaussian `k`, indexed by component.
    pub energies: Vec<f64>,
    /// Component indices by descending energy; ties keep index order.
    pub order: Vec<usize>,
}

impl EnergyRanking {
    pub fn from_energies(energies: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..energies.len()).collect();
        order.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
        Self { energies, order }
    }

    pub fn k(&self) -> usize {
        self.energies.len()
    }

    /// The `m` components at the requested end of the ranking.
    pub fn pick(&self, which: EnergyEnd, m: usize) -> Vec<usize> {
        match which {
            EnergyEnd::Ghe => self.order.iter().take(m).copied().collect(),
            EnergyEnd::Gle => self.order.iter().rev().take(m).copied().collect(),
        }
    }

    /// `gaussian_index,energy,rank` with rank 1 for the highest energy.
    pub fn to_csv(&self, provenance: Option<&Provenance>) -> String {
        let mut rank = vec![0; self.k()];
        for (r, &k) in self.order.iter().enumerate() {
            rank[k] = r + 1;
        }
        let mut rows = vec![vec!["gaussian_index".to_string(), "energy".into(), "rank".into()]];
        for k in 0..self.k() {
            rows.push(vec![k.to_string(), store::fmt_f64(self.energies[k]), rank[k].to_string()]);
        }
        let header = provenance.map(|p| serde_json::json!({ "provenance": p }));
        store::csv_with_header(header.as_ref(), rows)
    }
}

/// Frobenius norm of each Gaussian's `N x 2D` column block.
pub fn gaussian_energy(fvs: &DMatrix<f64>, k: usize, d: usize) -> Result<EnergyRanking> {
    if fvs.ncols() != 2 * k * d {
        return Err(Error::dimension("Fisher vector width", 2 * k * d, fvs.ncols()));
    }
    let w = 2 * d;
    let energies = (0..k)
        .map(|c| fvs.columns(c * w, w).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(EnergyRanking::from_energies(energies))
}

/// Columns left after applying the ablation to `k` blocks of width `w`.
pub fn ablation_columns(blocks: &[usize], mode: AblationMode, k: usize, w: usize) -> Vec<usize> {
    (0..k)
        .filter(|c| blocks.contains(c) == (mode == AblationMode::Select))
        .flat_map(|c| c * w..(c + 1) * w)
        .collect()
}

fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec: AblationSpec,
    /// Training-fold energies per fold.
    pub fold_energies: Vec<Vec<f64>>,
    /// Ablated components per fold.
    pub fold_blocks: Vec<Vec<usize>>,
    pub baseline: CvReport,
    pub ablated: CvReport,
    /// Set when no feature column remained and a bias-only model was scored.
    pub chance_level: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl AblationReport {
    pub fn accuracy_drop(&self) -> f64 {
        self.baseline.mean_accuracy - self.ablated.mean_accuracy
    }
}

struct FoldAblation {
    energies: Vec<f64>,
    blocks: Vec<usize>,
    baseline: FoldOutcome,
    ablated: FoldOutcome,
    empty: bool,
}

/// FV cross-validation with and without the chosen blocks. Energies are
/// computed per fold on that fold's training Fisher vectors.
pub fn block_ablation_mads(
    mads: &[MadSet],
    n_classes: usize,
    cfg: &PipelineConfig,
    spec: &AblationSpec,
) -> Result<AblationReport> {
    if cfg.encoder != EncoderKind::Fv {
        return Err(Error::validation("block ablation needs the fv encoder"));
    }
    if spec.m > cfg.k {
        return Err(Error::validation(format!("ablation m = {} exceeds K = {}", spec.m, cfg.k)));
    }
    let labels: Vec<u32> = mads.iter().map(|m| m.task_label).collect();
    let subjects: Vec<&str> = mads.iter().map(|m| m.subject_id.as_str()).collect();
    let plan = crate::dataio::FoldPlan::from_subjects(&subjects, cfg.folds, cfg.seed)?;
    let settings = EncoderSettings::from_config(cfg);
    let svm = cfg.svm_options();
    let folds: Vec<FoldAblation> = (0..plan.n_folds)
        .into_par_iter()
        .map(|fold| {
            let (train, test) = plan.split_subjects(subjects.iter().copied(), fold)?;
            let tr: Vec<&MadSet> = train.iter().map(|&i| &mads[i]).collect();
            let te: Vec<&MadSet> = test.iter().map(|&i| &mads[i]).collect();
            let enc = FittedEncoder::fit(&tr, &settings, cfg.seed, fold)?;
            let xtr = enc.encode_all(&tr).map_err(|e| e.in_stage(fold, "encode"))?;
            let xte = enc.encode_all(&te).map_err(|e| e.in_stage(fold, "encode"))?;
            let d = enc.descriptor_dim();
            let ranking = gaussian_energy(&xtr, cfg.k, d).map_err(|e| e.in_stage(fold, "energy"))?;
            let blocks = ranking.pick(spec.which, spec.m);
            let cols = ablation_columns(&blocks, spec.mode, cfg.k, 2 * d);
            if cols.is_empty() && spec.on_empty == EmptyFeatures::Error {
                return Err(Error::validation(format!(
                    "ablation {:?} of {} blocks leaves no features",
                    spec.mode, spec.m
                ))
                .in_stage(fold, "ablation"));
            }
            let ytr: Vec<u32> = train.iter().map(|&i| labels[i]).collect();
            let score = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> Result<Vec<u32>> {
                let model: LinearModel = train_svm(a, &ytr, &svm).map_err(|e| e.in_stage(fold, "svm"))?;
                model.predict_rows(b).map_err(|e| e.in_stage(fold, "predict"))
            };
            let base = score(&xtr, &xte)?;
            let abl = score(&select_columns(&xtr, &cols), &select_columns(&xte, &cols))?;
            Ok(FoldAblation {
                energies: ranking.energies,
                blocks,
                baseline: FoldOutcome {
                    test: test.clone(),
                    predictions: base,
                },
                ablated: FoldOutcome {
                    test,
                    predictions: abl,
                },
                empty: cols.is_empty(),
            })
        })
        .collect::<Result<_>>()?;
    let params = CvParams::from_config(cfg);
    let base: Vec<FoldOutcome> = folds.iter().map(|f| f.baseline.clone()).collect();
    let abl: Vec<FoldOutcome> = folds.iter().map(|f| f.ablated.clone()).collect();
    Ok(AblationReport {
        spec: *spec,
        chance_level: folds.iter().any(|f| f.empty),
        fold_energies: folds.iter().map(|f| f.energies.clone()).collect(),
        fold_blocks: folds.into_iter().map(|f| f.blocks).collect(),
        baseline: summarize(&labels, n_classes, &base, params.clone(), plan.seed),
        ablated: summarize(&labels, n_classes, &abl, params, plan.seed),
        provenance: None,
    })
}

pub fn block_ablation(manifest: &DatasetManifest, cfg: &PipelineConfig, spec: &AblationSpec) -> Result<AblationReport> {
    cfg.validate()?;
    make_folds(manifest, cfg.folds, cfg.seed)?;
    let mads = compute_all_mads(manifest, &cfg.neighborhood())?;
    let mut r = block_ablation_mads(&mads, manifest.n_classes, cfg, spec)?;
    r.provenance = Some(cfg.provenance());
    Ok(r)
}
