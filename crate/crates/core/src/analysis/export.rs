//! Codeword export: GMM means over raw descriptors, one file per codeword,
//! named by energy rank.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{gaussian_energy, EnergyRanking};
use crate::classify::stack_descriptors;
use crate::clustering::{fit_gmm_with, GmmModel, GmmOptions};
use crate::encoding::encode_fv;
use crate::error::{Error, Result};
use crate::mesh::MadSet;
use crate::seed;
use crate::store::{self, Provenance};

/// Region coordinates keyed by region name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Atlas {
    pub coords: BTreeMap<String, [f64; 3]>,
}

/// Reads `region_name,x,y,z` rows; a header row is skipped when present.
pub fn load_atlas(path: &Path) -> Result<Atlas> {
    let text = store::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut coords = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        if rec.len() != 4 {
            return Err(Error::parse(path, format!("row {} has {} fields, expected 4", i + 1, rec.len())));
        }
        let parsed: std::result::Result<Vec<f64>, _> = (1..4).map(|j| rec[j].parse::<f64>()).collect();
        match parsed {
            Ok(v) => {
                coords.insert(rec[0].to_string(), [v[0], v[1], v[2]]);
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::parse(path, format!("row {}: {e}", i + 1))),
        }
    }
    Ok(Atlas { coords })
}

/// Fits a GMM on the raw (unprojected) descriptors of every set and ranks
/// its components by Fisher vector energy over the same sets.
pub fn fit_codeword_gmm(
    sets: &[&MadSet],
    k: usize,
    base_seed: u64,
    opts: &GmmOptions,
) -> Result<(GmmModel, EnergyRanking)> {
    let data = stack_descriptors(sets)?;
    let gmm = fit_gmm_with(&data, k, seed::sub_seed(base_seed, "codewords", 0), opts)?;
    let d = gmm.dim();
    let rows: Vec<Vec<f64>> = sets
        .iter()
        .map(|s| encode_fv(&gmm, &s.weights).map(|f| f.values))
        .collect::<Result<_>>()?;
    let fvs = DMatrix::from_fn(rows.len(), 2 * k * d, |i, j| rows[i][j]);
    let ranking = gaussian_energy(&fvs, k, d)?;
    Ok((gmm, ranking))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodewordExport {
    /// `(rank, gaussian_index, csv file, optional node file)`, rank 1 first.
    pub files: Vec<(usize, usize, PathBuf, Option<PathBuf>)>,
    pub energies: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Writes `codeword_NNN.csv` (and `.node` with an atlas) for each component,
/// `NNN` being its 1-based energy rank, plus `codewords.json`.
pub fn export_codewords(
    gmm: &GmmModel,
    region_names: &[String],
    ranking: &EnergyRanking,
    out_dir: &Path,
    atlas: Option<&Atlas>,
    provenance: Option<&Provenance>,
) -> Result<CodewordExport> {
    if gmm.dim() != region_names.len() {
        return Err(Error::dimension(
            "codeword length (GMM must be fitted on unprojected descriptors)",
            region_names.len(),
            gmm.dim(),
        ));
    }
    if ranking.k() != gmm.k() {
        return Err(Error::dimension("energy ranking length", gmm.k(), ranking.k()));
    }
    if let Some(a) = atlas {
        if let Some(missing) = region_names.iter().find(|n| !a.coords.contains_key(*n)) {
            return Err(Error::validation(format!("atlas has no coordinates for region '{missing}'")));
        }
    } else {
        warn!("no atlas coordinates given; writing codeword CSV files only");
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let header = provenance.map(|p| serde_json::json!({ "provenance": p }));
    let mut files = Vec::with_capacity(gmm.k());
    for (r, &c) in ranking.order.iter().enumerate() {
        let rank = r + 1;
        let mean = gmm.means.row(c);
        let mut rows = vec![vec!["region_name".to_string(), "value".to_string()]];
        rows.extend(region_names.iter().zip(mean.iter()).map(|(n, v)| vec![n.clone(), store::fmt_f64(*v)]));
        let csv_path = out_dir.join(format!("codeword_{rank:03}.csv"));
        store::write_atomic(&csv_path, store::csv_with_header(header.as_ref(), rows).as_bytes())?;
        let node_path = match atlas {
            Some(a) => {
                let mut text = String::new();
                for (n, v) in region_names.iter().zip(mean.iter()) {
                    let [x, y, z] = a.coords[n];
                    let label: String = n.chars().map(|ch| if ch.is_whitespace() { '_' } else { ch }).collect();
                    text.push_str(&format!("{x} {y} {z} {} {} {label}\n", store::fmt_f64(*v), store::fmt_f64(v.abs())));
                }
                let p = out_dir.join(format!("codeword_{rank:03}.node"));
                store::write_atomic(&p, text.as_bytes())?;
                Some(p)
            }
            None => None,
        };
        files.push((rank, c, csv_path, node_path));
    }
    let export = CodewordExport {
        files,
        energies: ranking.energies.clone(),
        provenance: provenance.cloned(),
    };
    store::write_json(&out_dir.join("codewords.json"), &export)?;
    Ok(export)
}
