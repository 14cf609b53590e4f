use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MFEA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Visual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "t" => Ok(Modality::Text),
            "visual" | "image" | "v" => Ok(Modality::Visual),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Raw encoder outputs for one modality, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub modality: Modality,
    pub matrix: Array2<f32>,
}

impl ModalityFeatures {
    pub fn new(modality: Modality, matrix: Array2<f32>) -> Result<Self> {
        if matrix.ncols() == 0 {
            return Err(Error::Dimension(
                "feature dimension must be at least 1".into(),
            ));
        }
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / matrix.ncols(), pos % matrix.ncols());
            return Err(Error::Dimension(format!(
                "non-finite {modality} feature at row {r}, column {c}"
            )));
        }
        Ok(Self { modality, matrix })
    }

    pub fn num_items(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn check_items(&self, num_items: usize) -> Result<()> {
        if self.num_items() != num_items {
            return Err(Error::Dimension(format!(
                "{} features have {} rows but the log has {num_items} items",
                self.modality,
                self.num_items()
            )));
        }
        Ok(())
    }

    /// Rows in the given order (used after item re-indexing).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.num_items()) {
            return Err(Error::Dimension(format!(
                "row {bad} out of range for {} feature rows",
                self.num_items()
            )));
        }
        Ok(Self {
            modality: self.modality,
            matrix: self.matrix.select(Axis(0), rows),
        })
    }

    /// Reorder rows so row `i` belongs to `item_ids[i]`, given the raw id of each file row.
    pub fn align_to(&self, row_ids: &[String], item_ids: &[String]) -> Result<Self> {
        if row_ids.len() != self.num_items() {
            return Err(Error::Dimension(format!(
                "{} row ids for {} feature rows",
                row_ids.len(),
                self.num_items()
            )));
        }
        let lookup: std::collections::HashMap<&str, usize> = row_ids
            .iter()
            .enumerate()
            .map(|(r, id)| (id.as_str(), r))
            .collect();
        let rows = item_ids
            .iter()
            .map(|id| {
                lookup.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Dimension(format!("no {} features for item `{id}`", self.modality))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.select_rows(&rows)
    }
}

/// Read the binary feature format: `MFEA`, u32 rows, u32 cols, u32 reserved,
/// then `rows × cols` little-endian f32 values in row-major order.
pub fn load_features(path: &Path, modality: Modality) -> Result<ModalityFeatures> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &header[..4] != MAGIC {
        return Err(Error::format(path, "missing MFEA magic"));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; rows * cols * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::format(path, format!("expected {rows}×{cols} f32 payload")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let matrix = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    ModalityFeatures::new(modality, matrix)
}

pub fn write_features(path: &Path, features: &ModalityFeatures) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(features.num_items() as u32).to_le_bytes())?;
    w.write_all(&(features.dim() as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for v in features.matrix.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Whitespace/tab separated rows of floats, one item per line.
pub fn load_features_tsv(path: &Path, modality: Modality) -> Result<ModalityFeatures> {
    let reader = BufReader::new(File::open(path)?);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f32>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("`{t}` is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected {c} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        data.extend(values);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(path, "no feature rows"))?;
    let matrix = Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    ModalityFeatures::new(modality, matrix)
}
