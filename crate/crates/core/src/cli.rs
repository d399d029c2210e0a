//! Command-line front end. Each subcommand reads one JSON config (keys can
//! be overridden with `--set key=value`) and writes its artifacts under
//! `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    block_ablation_mads, export_codewords, fit_codeword_gmm, gaussian_energy, load_atlas, run_baseline,
    BaselineKind,
};
use crate::classify::{
    compute_all_mads, cross_validate_mads, grid_search, summarize, train_svm, CvParams, CvReport, Dictionary,
    EncoderSettings, FittedEncoder, FoldOutcome,
};
use crate::clustering::{GmmModel, KMeansModel};
use crate::config::{AblationMode, AblationSpec, EmptyFeatures, EnergyEnd, PipelineConfig};
use crate::dataio::{generate_synthetic, load_dataset, write_dataset, DatasetManifest, FoldPlan};
use crate::decomp::PcaModel;
use crate::encoding::EncoderKind;
use crate::error::{Error, Result};
use crate::mesh::{read_madset, write_madset, MadSet};
use crate::store::{self, Provenance};

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, Parser)]
#[command(name = "madenc", version, about = "Mesh arc descriptor encoding and task classification")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Config override, `key=value`; dotted keys reach nested objects.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Dataset manifest or directory; defaults to the config's dataset or synth section.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory written by `mads`.
    #[arg(long, conflicts_with = "data")]
    pub mads: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from the config's synth section.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Compute and store descriptors for every sample.
    Mads {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit PCA and dictionary per fold and write encoded features.
    Encode {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Cross-validated classification report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Directory written by `encode`.
        #[arg(long, conflicts_with_all = ["data", "mads"])]
        encoded: Option<PathBuf>,
    },
    /// Sweep p, d, K and encoder.
    Grid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Gaussian energy ranking and block ablation.
    Energy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// `remove` or `select` the chosen Gaussian blocks
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AblationMode>,
        /// `ghe` (highest energy) or `gle` (lowest energy)
        #[arg(long, value_parser = parse_end)]
        which: Option<EnergyEnd>,
        /// Number of blocks
        #[arg(long)]
        m: Option<usize>,
    },
    /// Write codewords of a dictionary fitted on unprojected descriptors.
    ExportCodewords {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Atlas CSV `region_name,x,y,z`; overrides the config.
        #[arg(long)]
        atlas: Option<PathBuf>,
    },
    /// Raw series and correlation baselines next to the descriptor pipeline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("'{s}': use remove or select"))
}

fn parse_end(s: &str) -> std::result::Result<EnergyEnd, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("'{s}': use ghe or gle"))
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Mads { common, .. }
            | Command::Encode { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Grid { common, .. }
            | Command::Energy { common, .. }
            | Command::ExportCodewords { common, .. }
            | Command::Baseline { common, .. } => common,
        }
    }
}

/// Runs a parsed command. On failure an `INCOMPLETE` marker holding the
/// error is left in the output directory.
pub fn run(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let cfg = PipelineConfig::load(&common.config, &common.overrides)?;
    let out = &common.out;
    let marker = out.join(INCOMPLETE_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = dispatch(&cli.command, &cfg, out);
    if let Err(e) = &result {
        if out.is_dir() {
            let _ = std::fs::write(&marker, format!("{e}\n"));
        }
    }
    result
}

fn dispatch(cmd: &Command, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let prov = cfg.provenance();
    match cmd {
        Command::Synth { .. } => {
            let synth = cfg
                .synth
                .as_ref()
                .ok_or_else(|| Error::validation("config has no synth section"))?;
            let m = generate_synthetic(synth)?;
            write_dataset(&m, out, Some(&prov))?;
            info!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Command::Mads { data, .. } => {
            let m = dataset(cfg, data.as_deref())?;
            let mads = compute_all_mads(&m, &cfg.neighborhood())?;
            write_mads(&m, &mads, cfg, out, &prov)?;
        }
        Command::Encode { inputs, .. } => {
            let (mads, n_classes, _) = descriptors(cfg, inputs)?;
            encode_folds(&mads, n_classes, cfg, out, &prov)?;
        }
        Command::Evaluate { inputs, encoded, .. } => {
            let mut report = match encoded {
                Some(dir) => evaluate_encoded(dir, cfg)?,
                None => {
                    let (mads, n_classes, _) = descriptors(cfg, inputs)?;
                    let plan = plan_for(&mads, cfg)?;
                    cross_validate_mads(&mads, n_classes, cfg, &plan)?
                }
            };
            report.provenance = Some(prov.clone());
            write_report(&report, out, "cv", &prov)?;
        }
        Command::Grid { inputs, .. } => {
            let grid = cfg
                .grid
                .as_ref()
                .ok_or_else(|| Error::validation("config has no grid section"))?;
            let m = match &inputs.mads {
                Some(_) => return Err(Error::validation("grid recomputes descriptors per p; pass --data instead")),
                None => dataset(cfg, inputs.data.as_deref())?,
            };
            let report = grid_search(&m, cfg, grid)?;
            store::write_json(&out.join("grid_report.json"), &report)?;
            let header = serde_json::json!({ "provenance": prov });
            let csv = report.to_csv();
            store::write_atomic(&out.join("grid.csv"), format!("# {header}\n{csv}").as_bytes())?;
        }
        Command::Energy { inputs, mode, which, m, .. } => {
            let (mads, n_classes, _) = descriptors(cfg, inputs)?;
            let mut ecfg = cfg.clone();
            ecfg.encoder = EncoderKind::Fv;
            let all: Vec<&MadSet> = mads.iter().collect();
            let enc = FittedEncoder::fit(&all, &EncoderSettings::from_config(&ecfg), cfg.seed, 0)?;
            let fvs = enc.encode_all(&all)?;
            let ranking = gaussian_energy(&fvs, ecfg.k, enc.descriptor_dim())?;
            store::write_atomic(&out.join("energy.csv"), ranking.to_csv(Some(&prov)).as_bytes())?;
            let spec = match (cfg.ablation, mode, which, m) {
                (_, Some(mode), Some(which), Some(m)) => Some(AblationSpec {
                    mode: *mode,
                    which: *which,
                    m: *m,
                    on_empty: cfg.ablation.map(|a| a.on_empty).unwrap_or(EmptyFeatures::Error),
                }),
                (Some(a), None, None, None) => Some(a),
                (_, None, None, None) => None,
                _ => return Err(Error::validation("--mode, --which and --m must be given together")),
            };
            if let Some(spec) = spec {
                let mut r = block_ablation_mads(&mads, n_classes, &ecfg, &spec)?;
                r.provenance = Some(prov.clone());
                store::write_json(&out.join("ablation.json"), &r)?;
            }
        }
        Command::ExportCodewords { inputs, atlas, .. } => {
            let (mads, _, names) = descriptors(cfg, inputs)?;
            let all: Vec<&MadSet> = mads.iter().collect();
            let (gmm, ranking) = fit_codeword_gmm(&all, cfg.k, cfg.seed, &cfg.gmm)?;
            let atlas = match atlas.as_ref().or(cfg.atlas.as_ref()) {
                Some(p) => Some(load_atlas(p)?),
                None => None,
            };
            export_codewords(&gmm, &names, &ranking, out, atlas.as_ref(), Some(&prov))?;
            store::write_atomic(&out.join("energy.csv"), ranking.to_csv(Some(&prov)).as_bytes())?;
        }
        Command::Baseline { data, .. } => {
            let m = dataset(cfg, data.as_deref())?;
            let mads = compute_all_mads(&m, &cfg.neighborhood())?;
            let plan = plan_for(&mads, cfg)?;
            let mut reports = vec![cross_validate_mads(&mads, m.n_classes, cfg, &plan)?];
            for kind in [BaselineKind::Pearson, BaselineKind::Bold] {
                reports.push(run_baseline(&m, kind, cfg)?);
            }
            let mut rows = vec![vec!["method".to_string(), "mean_accuracy".into(), "std_accuracy".into()]];
            for r in &mut reports {
                r.provenance = Some(prov.clone());
                rows.push(vec![
                    r.params.method.clone(),
                    store::fmt_f64(r.mean_accuracy),
                    store::fmt_f64(r.std_accuracy),
                ]);
                write_report(r, out, &format!("baseline_{}", r.params.method), &prov)?;
            }
            let header = serde_json::json!({ "provenance": prov });
            store::write_atomic(&out.join("baseline.csv"), store::csv_with_header(Some(&header), rows).as_bytes())?;
        }
    }
    Ok(())
}

fn dataset(cfg: &PipelineConfig, data: Option<&Path>) -> Result<DatasetManifest> {
    if let Some(p) = data.or(cfg.dataset.as_deref()) {
        return load_dataset(p);
    }
    match &cfg.synth {
        Some(s) => generate_synthetic(s),
        None => Err(Error::validation("no input: pass --data or set dataset or synth in the config")),
    }
}

fn plan_for(mads: &[MadSet], cfg: &PipelineConfig) -> Result<FoldPlan> {
    let subjects: Vec<&str> = mads.iter().map(|m| m.subject_id.as_str()).collect();
    FoldPlan::from_subjects(&subjects, cfg.folds, cfg.seed)
}

fn write_report(report: &CvReport, out: &Path, stem: &str, prov: &Provenance) -> Result<()> {
    let header = serde_json::json!({ "provenance": prov });
    store::write_json(&out.join(format!("{stem}_report.json")), report)?;
    store::write_atomic(
        &out.join(format!("{stem}_folds.csv")),
        format!("# {header}\n{}", report.fold_table_csv()).as_bytes(),
    )?;
    store::write_atomic(
        &out.join(format!("{stem}_confusion.csv")),
        format!("# {header}\n{}", report.confusion_csv()).as_bytes(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct MadIndexEntry {
    subject_id: String,
    task_label: u32,
    stem: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct MadIndex {
    n_classes: usize,
    region_names: Vec<String>,
    p: usize,
    ridge_lambda: f64,
    standardize: bool,
    samples: Vec<MadIndexEntry>,
    provenance: Provenance,
}

const MAD_INDEX: &str = "mads.json";

fn write_mads(m: &DatasetManifest, mads: &[MadSet], cfg: &PipelineConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let spec = cfg.neighborhood();
    let mut samples = Vec::with_capacity(mads.len());
    for (i, set) in mads.iter().enumerate() {
        let stem = format!("mad_{i:05}");
        write_madset(set, &spec, &out.join(&stem), Some(prov))?;
        samples.push(MadIndexEntry {
            subject_id: set.subject_id.clone(),
            task_label: set.task_label,
            stem,
        });
    }
    let index = MadIndex {
        n_classes: m.n_classes,
        region_names: m.region_names.to_vec(),
        p: spec.p,
        ridge_lambda: spec.ridge_lambda,
        standardize: spec.standardize,
        samples,
        provenance: prov.clone(),
    };
    store::write_json(&out.join(MAD_INDEX), &index)
}

fn read_mads(dir: &Path) -> Result<(Vec<MadSet>, usize, Vec<String>)> {
    let index: MadIndex = store::read_json(&dir.join(MAD_INDEX))?;
    let mut mads = Vec::with_capacity(index.samples.len());
    for e in &index.samples {
        let (set, _) = read_madset(&dir.join(&e.stem))?;
        if set.n_regions() != index.region_names.len() {
            return Err(Error::dimension("stored descriptor set", index.region_names.len(), set.n_regions()));
        }
        mads.push(set);
    }
    Ok((mads, index.n_classes, index.region_names))
}

/// Descriptors from `--mads`, or computed from the dataset.
fn descriptors(cfg: &PipelineConfig, inputs: &Inputs) -> Result<(Vec<MadSet>, usize, Vec<String>)> {
    match &inputs.mads {
        Some(dir) => read_mads(dir),
        None => {
            let m = dataset(cfg, inputs.data.as_deref())?;
            let mads = compute_all_mads(&m, &cfg.neighborhood())?;
            Ok((mads, m.n_classes, m.region_names.to_vec()))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EncodedFold {
    fold: usize,
    train: Vec<usize>,
    test: Vec<usize>,
    pca: Option<String>,
    dictionary: Option<String>,
    features_train: String,
    features_test: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncodedIndex {
    encoder: EncoderSettings,
    n_classes: usize,
    labels: Vec<u32>,
    plan: FoldPlan,
    folds: Vec<EncodedFold>,
    params: CvParams,
    provenance: Provenance,
}

const ENCODED_INDEX: &str = "encoded.json";

fn encode_folds(mads: &[MadSet], n_classes: usize, cfg: &PipelineConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let plan = plan_for(mads, cfg)?;
    let subjects: Vec<&str> = mads.iter().map(|m| m.subject_id.as_str()).collect();
    let settings = EncoderSettings::from_config(cfg);
    let mut folds = Vec::with_capacity(plan.n_folds);
    for fold in 0..plan.n_folds {
        let (train, test) = plan.split_subjects(subjects.iter().copied(), fold)?;
        let tr: Vec<&MadSet> = train.iter().map(|&i| &mads[i]).collect();
        let te: Vec<&MadSet> = test.iter().map(|&i| &mads[i]).collect();
        let enc = FittedEncoder::fit(&tr, &settings, cfg.seed, fold)?;
        let dir = format!("fold_{fold:02}");
        let pca = match &enc.pca {
            Some(p) => {
                let rel = format!("{dir}/pca");
                p.save(&out.join(&rel), Some(prov))?;
                Some(rel)
            }
            None => None,
        };
        let rel = format!("{dir}/dictionary");
        let dictionary = match &enc.dictionary {
            Dictionary::Gmm(g) => Some(g.save(&out.join(&rel), Some(prov)).map(|_| rel)?),
            Dictionary::KMeans(k) => Some(k.save(&out.join(&rel), Some(prov)).map(|_| rel)?),
            Dictionary::None => None,
        };
        let xtr = enc.encode_all(&tr).map_err(|e| e.in_stage(fold, "encode"))?;
        let xte = enc.encode_all(&te).map_err(|e| e.in_stage(fold, "encode"))?;
        let features_train = format!("{dir}/train.csv");
        let features_test = format!("{dir}/test.csv");
        store::write_atomic(&out.join(&features_train), store::matrix_csv(&xtr).as_bytes())?;
        store::write_atomic(&out.join(&features_test), store::matrix_csv(&xte).as_bytes())?;
        folds.push(EncodedFold {
            fold,
            train,
            test,
            pca,
            dictionary,
            features_train,
            features_test,
        });
    }
    let index = EncodedIndex {
        encoder: settings,
        n_classes,
        labels: mads.iter().map(|m| m.task_label).collect(),
        plan,
        folds,
        params: CvParams::from_config(cfg),
        provenance: prov.clone(),
    };
    store::write_json(&out.join(ENCODED_INDEX), &index)
}

/// Scores features written by `encode`; every fold's fitted models must be
/// present and consistent with the stored features.
fn evaluate_encoded(dir: &Path, cfg: &PipelineConfig) -> Result<CvReport> {
    let index: EncodedIndex = store::read_json(&dir.join(ENCODED_INDEX))?;
    let mut outcomes = Vec::with_capacity(index.folds.len());
    for f in &index.folds {
        if let Some(rel) = &f.pca {
            PcaModel::load(&dir.join(rel))?;
        }
        let expected = match (index.encoder.kind, &f.dictionary) {
            (EncoderKind::Mad, _) => None,
            (EncoderKind::Fv, Some(rel)) => {
                let g = GmmModel::load(&dir.join(rel))?;
                Some(EncoderKind::Fv.output_len(g.k(), g.dim()))
            }
            (kind, Some(rel)) => {
                let k = KMeansModel::load(&dir.join(rel))?;
                Some(kind.output_len(k.k(), k.dim()))
            }
            (_, None) => {
                return Err(Error::MissingArtifact(dir.join(format!("fold_{:02}/dictionary.json", f.fold))))
            }
        };
        let xtr = store::read_matrix_csv(&dir.join(&f.features_train))?;
        let xte = store::read_matrix_csv(&dir.join(&f.features_test))?;
        if let Some(width) = expected {
            if xtr.ncols() != width || xte.ncols() != width {
                return Err(Error::dimension("stored feature width", width, xtr.ncols()).in_stage(f.fold, "load"));
            }
        }
        let ytr: Vec<u32> = f.train.iter().map(|&i| index.labels[i]).collect();
        let model = train_svm(&xtr, &ytr, &cfg.svm_options()).map_err(|e| e.in_stage(f.fold, "svm"))?;
        let predictions = model.predict_rows(&xte).map_err(|e| e.in_stage(f.fold, "predict"))?;
        outcomes.push(FoldOutcome {
            test: f.test.clone(),
            predictions,
        });
    }
    let mut params = index.params.clone();
    params.svm_c = cfg.svm_c;
    Ok(summarize(&index.labels, index.n_classes, &outcomes, params, index.plan.seed))
}

/// Maps a result to the process exit status, printing the error.
pub fn exit_status(result: Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
