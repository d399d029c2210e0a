//! Grid search over `p x d x K x encoder`.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::cv::{compute_all_mads, cross_validate_mads};
use crate::config::{GridSpec, PipelineConfig, Projection};
use crate::dataio::{make_folds, DatasetManifest};
use crate::encoding::EncoderKind;
use crate::error::Result;
use crate::store::{self, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub p: usize,
    pub d: Projection,
    pub k: usize,
    pub encoder: EncoderKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Best cell over `(d, K)` for one `(p, encoder)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBest {
    pub p: usize,
    pub encoder: EncoderKind,
    pub d: Projection,
    pub k: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub best: Vec<GridBest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl GridReport {
    /// One `cell` row per grid cell followed by one `best` row per
    /// `(p, encoder)`.
    pub fn to_csv(&self) -> String {
        let mut rows = vec![["row", "p", "d", "k", "encoder", "mean_accuracy", "std_accuracy", "error"]
            .map(String::from)
            .to_vec()];
        for c in &self.cells {
            rows.push(vec![
                "cell".into(),
                c.p.to_string(),
                c.d.label(),
                c.k.to_string(),
                c.encoder.to_string(),
                c.mean_accuracy.map(store::fmt_f64).unwrap_or_default(),
                c.std_accuracy.map(store::fmt_f64).unwrap_or_default(),
                c.error.as_deref().map(csv_field).unwrap_or_default(),
            ]);
        }
        for b in &self.best {
            rows.push(vec![
                "best".into(),
                b.p.to_string(),
                b.d.label(),
                b.k.to_string(),
                b.encoder.to_string(),
                store::fmt_f64(b.mean_accuracy),
                String::new(),
                String::new(),
            ]);
        }
        store::csv_with_header(None, rows)
    }
}

fn csv_field(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
}

/// Evaluates every cell. Descriptors are computed once per `p`; a cell that
/// fails is recorded with its error and the search continues. Fails only
/// when descriptors or folds cannot be built.
pub fn grid_search(manifest: &DatasetManifest, cfg: &PipelineConfig, grid: &GridSpec) -> Result<GridReport> {
    cfg.validate()?;
    let plan = make_folds(manifest, cfg.folds, cfg.seed)?;
    let mut cells = Vec::with_capacity(grid.n_cells());
    for &p in &grid.p {
        let mut cell_cfg = cfg.clone();
        cell_cfg.p = p;
        let mads = compute_all_mads(manifest, &cell_cfg.neighborhood())?;
        for &encoder in &grid.encoders {
            for &d in &grid.d {
                for &k in &grid.k {
                    cell_cfg.encoder = encoder;
                    cell_cfg.pca_dim = d;
                    cell_cfg.k = k;
                    let mut cell = GridCell {
                        p,
                        d,
                        k,
                        encoder,
                        mean_accuracy: None,
                        std_accuracy: None,
                        error: None,
                    };
                    match cross_validate_mads(&mads, manifest.n_classes, &cell_cfg, &plan) {
                        Ok(r) => {
                            cell.mean_accuracy = Some(r.mean_accuracy);
                            cell.std_accuracy = Some(r.std_accuracy);
                        }
                        Err(e) => {
                            warn!("grid cell p={p} d={} k={k} {encoder} failed: {e}", d.label());
                            cell.error = Some(e.to_string());
                        }
                    }
                    cells.push(cell);
                }
            }
        }
    }
    Ok(GridReport {
        best: best_cells(&cells),
        cells,
        provenance: Some(cfg.provenance()),
    })
}

/// Maximum over `(d, K)` per `(p, encoder)`; the first cell wins ties.
pub fn best_cells(cells: &[GridCell]) -> Vec<GridBest> {
    let mut best: BTreeMap<(usize, &'static str), GridBest> = BTreeMap::new();
    for c in cells {
        let Some(acc) = c.mean_accuracy else { continue };
        let entry = best.entry((c.p, c.encoder.name())).or_insert(GridBest {
            p: c.p,
            encoder: c.encoder,
            d: c.d,
            k: c.k,
            mean_accuracy: acc,
        });
        if acc > entry.mean_accuracy {
            *entry = GridBest {
                p: c.p,
                encoder: c.encoder,
                d: c.d,
                k: c.k,
                mean_accuracy: acc,
            };
        }
    }
    best.into_values().collect()
}
