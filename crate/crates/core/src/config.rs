//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::classify::SvmOptions;
use crate::clustering::GmmOptions;
use crate::dataio::SynthConfig;
use crate::encoding::EncoderKind;
use crate::error::{Error, Result};
use crate::mesh::NeighborhoodSpec;
use crate::store;

/// PCA output dimension, or no projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    None,
    Pca(usize),
}

impl Projection {
    pub fn dim(self) -> Option<usize> {
        match self {
            Projection::None => None,
            Projection::Pca(d) => Some(d),
        }
    }

    pub fn label(self) -> String {
        match self {
            Projection::None => "none".into(),
            Projection::Pca(d) => d.to_string(),
        }
    }
}

impl Serialize for Projection {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Projection::None => s.serialize_str("none"),
            Projection::Pca(d) => s.serialize_u64(*d as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Projection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::Null => Ok(Projection::None),
            Value::String(s) if s.eq_ignore_ascii_case("none") => Ok(Projection::None),
            Value::Number(n) => n
                .as_u64()
                .filter(|&v| v > 0)
                .map(|v| Projection::Pca(v as usize))
                .ok_or_else(|| serde::de::Error::custom("PCA dimension must be a positive integer")),
            other => Err(serde::de::Error::custom(format!(
                "expected a positive integer or \"none\", got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub p: Vec<usize>,
    pub d: Vec<Projection>,
    pub k: Vec<usize>,
    pub encoders: Vec<EncoderKind>,
}

impl GridSpec {
    /// The grids over `p`, `d` and `k` used for the HCP experiments.
    pub fn reference() -> Self {
        Self {
            p: vec![10, 20, 30, 40],
            d: vec![
                Projection::Pca(50),
                Projection::Pca(60),
                Projection::Pca(70),
                Projection::Pca(80),
                Projection::Pca(90),
            ],
            k: vec![20, 40, 60, 80, 100, 120],
            encoders: vec![EncoderKind::Fv, EncoderKind::Vlad, EncoderKind::Bow],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.p.len() * self.d.len() * self.k.len() * self.encoders.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Remove,
    Select,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyEnd {
    /// Highest-energy Gaussians first.
    Ghe,
    /// Lowest-energy Gaussians first.
    Gle,
}

/// What to do when an ablation leaves no feature columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyFeatures {
    #[default]
    Error,
    /// Train a bias-only classifier and report its (chance-level) accuracy.
    Chance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub mode: AblationMode,
    pub which: EnergyEnd,
    pub m: usize,
    #[serde(default)]
    pub on_empty: EmptyFeatures,
}

fn default_lambda() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_projection() -> Projection {
    Projection::Pca(50)
}
fn default_encoder() -> EncoderKind {
    EncoderKind::Fv
}
fn default_k() -> usize {
    20
}
fn default_folds() -> usize {
    10
}
fn default_svm_c() -> f64 {
    1.0
}
fn default_svm_tol() -> f64 {
    SvmOptions::default().tol
}
fn default_svm_epochs() -> usize {
    SvmOptions::default().max_epochs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Manifest file or directory; relative paths resolve against the
    /// config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,

    pub p: usize,
    #[serde(default = "default_lambda")]
    pub ridge_lambda: f64,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub absolute_correlation: bool,

    #[serde(default = "default_projection")]
    pub pca_dim: Projection,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_true")]
    pub normalize_fv: bool,
    #[serde(default = "default_true")]
    pub normalize_vlad: bool,
    #[serde(default = "default_true")]
    pub bow_l1: bool,
    #[serde(default)]
    pub gmm: GmmOptions,
    #[serde(default)]
    pub kmeans_max_iter: Option<usize>,

    #[serde(default = "default_svm_c")]
    pub svm_c: f64,
    #[serde(default = "default_svm_tol")]
    pub svm_tol: f64,
    #[serde(default = "default_svm_epochs")]
    pub svm_max_epochs: usize,

    #[serde(default = "default_folds")]
    pub folds: usize,
    pub seed: u64,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSpec>,
    /// Atlas CSV `(region_name, x, y, z)` for `.node` export.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atlas: Option<PathBuf>,
}

impl PipelineConfig {
    /// Minimal config with defaults for everything but `p` and `seed`.
    pub fn new(p: usize, seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "p": p, "seed": seed }))
            .expect("defaults deserialize")
    }

    pub fn neighborhood(&self) -> NeighborhoodSpec {
        NeighborhoodSpec {
            p: self.p,
            ridge_lambda: self.ridge_lambda,
            standardize: self.standardize,
            absolute_correlation: self.absolute_correlation,
        }
    }

    pub fn svm_options(&self) -> SvmOptions {
        SvmOptions {
            svm_c: self.svm_c,
            tol: self.svm_tol,
            max_epochs: self.svm_max_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(format!("config: {m}")));
        if self.p == 0 {
            return bad("p must be at least 1".into());
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return bad(format!("ridge_lambda must be >= 0, got {}", self.ridge_lambda));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.svm_c > 0.0 && self.svm_c.is_finite()) {
            return bad(format!("svm_c must be > 0, got {}", self.svm_c));
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.gmm.max_iter == 0 || !(self.gmm.tol > 0.0) || !(self.gmm.floor_ratio >= 0.0) {
            return bad("gmm options out of range".into());
        }
        if let Some(g) = &self.grid {
            if g.n_cells() == 0 {
                return bad("grid has an empty axis".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        store::sha256_hex(&bytes)
    }

    pub fn provenance(&self) -> store::Provenance {
        store::Provenance::new(self.hash(), self.seed)
    }

    /// Reads a config file, applies `key=value` overrides (dotted keys reach
    /// into nested objects, values parse as JSON or fall back to strings) and
    /// resolves relative paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = store::read_to_string(path)?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| Error::parse(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.atlas].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn apply_override(value: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("override '{assignment}' is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::validation(format!("override '{key}': '{part}' is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_parses_numbers_and_none() {
        let v: Vec<Projection> = serde_json::from_str(r#"[50, "none", null]"#).unwrap();
        assert_eq!(v, vec![Projection::Pca(50), Projection::None, Projection::None]);
        assert!(serde_json::from_str::<Projection>("0").is_err());
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[50,"none","none"]"#);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"p": 5}"#).is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"p": 5, "seed": 2}"#).unwrap();
        assert_eq!(c.svm_c, 1.0);
        assert_eq!(c.ridge_lambda, 0.5);
        assert_eq!(c.folds, 10);
    }

    #[test]
    fn overrides_and_hash() {
        let mut v = serde_json::json!({"p": 5, "seed": 2, "gmm": {"max_iter": 10}});
        apply_override(&mut v, "p=7").unwrap();
        apply_override(&mut v, "gmm.tol=0.001").unwrap();
        apply_override(&mut v, "encoder=vlad").unwrap();
        let c: PipelineConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.p, 7);
        assert_eq!(c.gmm.max_iter, 10);
        assert_eq!(c.gmm.tol, 0.001);
        assert_eq!(c.encoder, EncoderKind::Vlad);
        let mut d = c.clone();
        assert_eq!(c.hash(), d.hash());
        d.seed = 3;
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn reference_grid_size() {
        assert_eq!(GridSpec::reference().n_cells(), 4 * 5 * 6 * 3);
    }
}
