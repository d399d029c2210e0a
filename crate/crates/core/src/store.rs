//! On-disk plumbing: atomic writes, provenance headers and the versioned
//! JSON + binary matrix pair used for fitted models.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"MADM";
pub const MATRIX_FORMAT_VERSION: u32 = 1;

/// Written into every artifact so it can be traced to the config that made it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.into(),
            seed,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::validation(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Formats a float so that parsing it back yields the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// CSV text with an optional `# {json}` header line followed by numeric rows.
pub fn csv_with_header(header: Option<&Value>, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str("# ");
        out.push_str(&h.to_string());
        out.push('\n');
    }
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    csv_with_header(
        None,
        m.row_iter()
            .map(|r| r.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>()),
    )
}

/// Reads a headerless numeric CSV into a matrix; `#` lines are skipped.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_to_string(path)?;
    parse_matrix_csv(path, &text)
}

pub fn parse_matrix_csv(path: &Path, text: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e))?;
        if cols.is_none() {
            cols = Some(record.len());
        } else if cols != Some(record.len()) {
            return Err(Error::parse(
                path,
                format!("row {} has {} columns, expected {}", line + 1, record.len(), cols.unwrap_or(0)),
            ));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(path, format!("row {}: '{field}' is not a number", line + 1)))?;
            if !v.is_finite() {
                return Err(Error::parse(path, format!("row {}: non-finite value", line + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::parse(path, "empty matrix"))?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    kind: String,
    format_version: u32,
    binary: String,
    binary_sha256: String,
    matrices: Vec<MatrixEntry>,
    meta: Value,
}

/// Packs matrices row-major as little-endian f64 behind a magic/version tag.
pub fn encode_matrices(matrices: &[(&str, &DMatrix<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for (_, m) in matrices {
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
    }
    out
}

fn decode_matrices(path: &Path, bytes: &[u8]) -> Result<Vec<DMatrix<f64>>> {
    let bad = |msg: &str| Error::parse(path, msg);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated matrix file"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MATRIX_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != MATRIX_FORMAT_VERSION {
        return Err(bad(&format!("unsupported matrix format version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        out.push(DMatrix::from_row_slice(rows, cols, &data));
    }
    Ok(out)
}

fn pair_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`; returns the SHA-256 of the binary.
pub fn write_model(
    stem: &Path,
    kind: &str,
    meta: Value,
    matrices: &[(&str, &DMatrix<f64>)],
) -> Result<String> {
    let (json_path, bin_path) = pair_paths(stem);
    let bytes = encode_matrices(matrices);
    let hash = sha256_hex(&bytes);
    write_atomic(&bin_path, &bytes)?;
    let header = ModelHeader {
        kind: kind.to_string(),
        format_version: MATRIX_FORMAT_VERSION,
        binary: bin_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        binary_sha256: hash.clone(),
        matrices: matrices
            .iter()
            .map(|(name, m)| MatrixEntry {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
        meta,
    };
    write_json(&json_path, &header)?;
    Ok(hash)
}

pub struct LoadedModel {
    pub meta: Value,
    pub binary_sha256: String,
    matrices: Vec<(String, DMatrix<f64>)>,
    path: PathBuf,
}

impl LoadedModel {
    pub fn take(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let idx = self
            .matrices
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::parse(&self.path, format!("matrix '{name}' missing")))?;
        Ok(self.matrices.swap_remove(idx).1)
    }
}

pub fn read_model(stem: &Path, kind: &str) -> Result<LoadedModel> {
    let (json_path, bin_path) = pair_paths(stem);
    let header: ModelHeader = read_json(&json_path)?;
    if header.kind != kind {
        return Err(Error::parse(
            &json_path,
            format!("expected a {kind} model, found {}", header.kind),
        ));
    }
    if header.format_version != MATRIX_FORMAT_VERSION {
        return Err(Error::parse(
            &json_path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    if !bin_path.exists() {
        return Err(Error::MissingArtifact(bin_path));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if sha256_hex(&bytes) != header.binary_sha256 {
        return Err(Error::parse(&bin_path, "checksum does not match header"));
    }
    let mats = decode_matrices(&bin_path, &bytes)?;
    if mats.len() != header.matrices.len() {
        return Err(Error::parse(&bin_path, "matrix count does not match header"));
    }
    let matrices = header
        .matrices
        .iter()
        .zip(mats)
        .map(|(e, m)| (e.name.clone(), m))
        .collect();
    Ok(LoadedModel {
        meta: header.meta,
        binary_sha256: header.binary_sha256,
        matrices,
        path: json_path,
    })
}
