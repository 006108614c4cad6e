//! Grid containers on disk.
//!
//! A container is a directory holding `meta.json` and `payload.bin`. The
//! payload is little-endian, unpadded, row-major `(row, col, class)`. Labels
//! and masks may also be read from a CSV file with one line per grid row.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, PredictionSetGrid, ProbabilityGrid, Role, ScoreField, SplitMask};

pub const META_FILE: &str = "meta.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

/// Payload marker for a pixel that carries no prediction set.
const UNDEFINED_SET: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    I32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Probabilities,
    Labels,
    Mask,
    Scores,
    Sets,
}

/// Contents of `meta.json`; field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridMeta {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub dtype: Dtype,
    pub layout: String,
    pub kind: GridKind,
}

impl GridMeta {
    fn new(kind: GridKind, height: usize, width: usize, classes: usize, dtype: Dtype) -> Self {
        Self { height, width, classes, dtype, layout: "row-major".into(), kind }
    }

    /// Number of payload elements the header implies.
    pub fn elements(&self) -> usize {
        let per_pixel = match self.kind {
            GridKind::Probabilities | GridKind::Scores | GridKind::Sets => self.classes,
            GridKind::Labels | GridKind::Mask => 1,
        };
        self.height * self.width * per_pixel
    }
}

/// A grid type that can live in a container.
pub trait Container: Sized {
    const KIND: GridKind;

    /// Dtypes accepted on load; the first is the one written by default.
    const DTYPES: &'static [Dtype];

    fn encode(&self, dtype: Dtype) -> (GridMeta, Vec<u8>);

    fn decode(meta: &GridMeta, payload: &[u8]) -> Result<Self>;

    fn from_csv(_rows: Vec<Vec<i64>>) -> Result<Self> {
        Err(Error::InvalidConfig(format!("{:?} grids cannot be read from csv", Self::KIND)))
    }
}

/// Writes `grid` as a container directory at `dir` in its canonical dtype.
pub fn save_grid<G: Container>(grid: &G, dir: impl AsRef<Path>) -> Result<()> {
    save_grid_as(grid, dir, G::DTYPES[0])
}

/// Writes `grid` with an explicit payload dtype.
pub fn save_grid_as<G: Container>(grid: &G, dir: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let dir = dir.as_ref();
    if !G::DTYPES.contains(&dtype) {
        return Err(Error::InvalidConfig(format!("{:?} grids cannot be stored as {dtype:?}", G::KIND)));
    }
    let (meta, payload) = grid.encode(dtype);
    let write_err = |path: PathBuf| move |source| Error::Io { path, source };
    fs::create_dir_all(dir).map_err(write_err(dir.to_path_buf()))?;
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serialises");
    fs::write(dir.join(META_FILE), meta_json + "\n").map_err(write_err(dir.join(META_FILE)))?;
    fs::write(dir.join(PAYLOAD_FILE), payload).map_err(write_err(dir.join(PAYLOAD_FILE)))?;
    Ok(())
}

/// Reads a container directory, or a `.csv` file for labels and masks.
pub fn load_grid<G: Container>(path: impl AsRef<Path>) -> Result<G> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return G::from_csv(read_csv(path)?);
    }
    let meta = read_meta(path)?;
    if meta.kind != G::KIND {
        return Err(Error::InvariantViolation(format!(
            "{} holds {:?}, expected {:?}",
            path.display(),
            meta.kind,
            G::KIND
        )));
    }
    if !G::DTYPES.contains(&meta.dtype) {
        return Err(Error::InvariantViolation(format!(
            "dtype {:?} not allowed for {:?}",
            meta.dtype,
            G::KIND
        )));
    }
    if meta.layout != "row-major" {
        return Err(Error::InvariantViolation(format!("unsupported layout {:?}", meta.layout)));
    }
    let payload_path = path.join(PAYLOAD_FILE);
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = meta.elements() * meta.dtype.size();
    if payload.len() != expected {
        return Err(Error::HeaderPayloadMismatch { expected, actual: payload.len() });
    }
    G::decode(&meta, &payload)
}

pub fn read_meta(dir: &Path) -> Result<GridMeta> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: meta_path, source })
}

fn read_csv(path: &Path) -> Result<Vec<Vec<i64>>> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field.parse::<i64>().map_err(|_| {
                    Error::InvariantViolation(format!("csv cell ({r}, {c}) is not an integer: {field:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if let Some(first) = rows.first() {
        if let Some(r) = rows.iter().position(|row| row.len() != first.len()) {
            return Err(Error::ShapeMismatch(format!(
                "csv row {r} has {} columns, row 0 has {}",
                rows[r].len(),
                first.len()
            )));
        }
    }
    Ok(rows)
}

fn csv_shape(rows: &[Vec<i64>]) -> (usize, usize) {
    (rows.len(), rows.first().map_or(0, Vec::len))
}

fn decode_f64(meta: &GridMeta, payload: &[u8]) -> Vec<f64> {
    match meta.dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        Dtype::I32 => payload
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| b as f64).collect(),
    }
}

fn decode_int(meta: &GridMeta, payload: &[u8]) -> Vec<i64> {
    match meta.dtype {
        Dtype::I32 => payload
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().unwrap()) as i64)
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| b as i64).collect(),
        Dtype::F32 | Dtype::F64 => unreachable!("integer grids never carry float dtypes"),
    }
}

fn encode_f64(values: &[f64], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        Dtype::I32 | Dtype::U8 => unreachable!("float grids never carry integer dtypes"),
    }
}

impl Container for ProbabilityGrid {
    const KIND: GridKind = GridKind::Probabilities;
    const DTYPES: &'static [Dtype] = &[Dtype::F64, Dtype::F32];

    fn encode(&self, dtype: Dtype) -> (GridMeta, Vec<u8>) {
        let meta = GridMeta::new(Self::KIND, self.height(), self.width(), self.num_classes(), dtype);
        (meta, encode_f64(self.values(), dtype))
    }

    fn decode(meta: &GridMeta, payload: &[u8]) -> Result<Self> {
        ProbabilityGrid::new(meta.height, meta.width, meta.classes, decode_f64(meta, payload))
    }
}

impl Container for LabelGrid {
    const KIND: GridKind = GridKind::Labels;
    const DTYPES: &'static [Dtype] = &[Dtype::I32, Dtype::U8];

    fn encode(&self, dtype: Dtype) -> (GridMeta, Vec<u8>) {
        let meta = GridMeta::new(Self::KIND, self.height(), self.width(), self.num_classes(), dtype);
        let payload = match dtype {
            Dtype::I32 => self.labels().iter().flat_map(|l| l.to_le_bytes()).collect(),
            // u8 cannot hold the -1 sentinel; unlabeled pixels become 255,
            // which load rejects unless the grid has more than 255 classes.
            Dtype::U8 => self.labels().iter().map(|&l| l as u8).collect(),
            _ => unreachable!(),
        };
        (meta, payload)
    }

    fn decode(meta: &GridMeta, payload: &[u8]) -> Result<Self> {
        let labels = decode_int(meta, payload)
            .into_iter()
            .map(|l| i32::try_from(l).unwrap_or(i32::MAX))
            .collect();
        LabelGrid::new(meta.height, meta.width, meta.classes, labels)
    }

    /// The class count of a CSV label grid is one past its largest label.
    fn from_csv(rows: Vec<Vec<i64>>) -> Result<Self> {
        let (height, width) = csv_shape(&rows);
        let labels: Vec<i32> = rows
            .into_iter()
            .flatten()
            .map(|l| i32::try_from(l).unwrap_or(i32::MIN))
            .collect();
        let classes = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        LabelGrid::new(height, width, classes, labels)
    }
}

fn roles_from_codes(height: usize, width: usize, codes: Vec<i64>) -> Result<SplitMask> {
    let roles = codes
        .iter()
        .enumerate()
        .map(|(p, &code)| {
            Role::from_code(code).ok_or_else(|| {
                Error::InvariantViolation(format!(
                    "pixel ({}, {}): mask code {code} not in 0..=3",
                    p / width.max(1),
                    p % width.max(1)
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SplitMask::new(height, width, roles)
}

impl Container for SplitMask {
    const KIND: GridKind = GridKind::Mask;
    const DTYPES: &'static [Dtype] = &[Dtype::U8, Dtype::I32];

    fn encode(&self, dtype: Dtype) -> (GridMeta, Vec<u8>) {
        let meta = GridMeta::new(Self::KIND, self.height(), self.width(), 1, dtype);
        let payload = match dtype {
            Dtype::U8 => self.roles().iter().map(|r| r.code()).collect(),
            Dtype::I32 => self.roles().iter().flat_map(|r| (r.code() as i32).to_le_bytes()).collect(),
            _ => unreachable!(),
        };
        (meta, payload)
    }

    fn decode(meta: &GridMeta, payload: &[u8]) -> Result<Self> {
        roles_from_codes(meta.height, meta.width, decode_int(meta, payload))
    }

    fn from_csv(rows: Vec<Vec<i64>>) -> Result<Self> {
        let (height, width) = csv_shape(&rows);
        roles_from_codes(height, width, rows.into_iter().flatten().collect())
    }
}

impl Container for ScoreField {
    const KIND: GridKind = GridKind::Scores;
    const DTYPES: &'static [Dtype] = &[Dtype::F64];

    /// Invalid pixels are written as NaN in every class slot.
    fn encode(&self, dtype: Dtype) -> (GridMeta, Vec<u8>) {
        let meta = GridMeta::new(Self::KIND, self.height(), self.width(), self.num_classes(), dtype);
        let mut values = self.scores().to_vec();
        for (p, px) in values.chunks_exact_mut(self.num_classes()).enumerate() {
            if !self.is_valid(p) {
                px.fill(f64::NAN);
            }
        }
        (meta, encode_f64(&values, dtype))
    }

    fn decode(meta: &GridMeta, payload: &[u8]) -> Result<Self> {
        let mut scores = decode_f64(meta, payload);
        let k = meta.classes.max(1);
        let mut valid = Vec::with_capacity(meta.height * meta.width);
        for (p, px) in scores.chunks_exact_mut(k).enumerate() {
            let nan = px.iter().filter(|v| v.is_nan()).count();
            match nan {
                0 => valid.push(true),
                n if n == k => {
                    px.fill(0.0);
                    valid.push(false);
                }
                _ => {
                    return Err(Error::InvariantViolation(format!(
                        "pixel ({}, {}): partially missing scores",
                        p / meta.width,
                        p % meta.width
                    )))
                }
            }
        }
        ScoreField::new(meta.height, meta.width, meta.classes, scores, valid)
    }
}

impl Container for PredictionSetGrid {
    const KIND: GridKind = GridKind::Sets;
    const DTYPES: &'static [Dtype] = &[Dtype::U8];

    /// One byte per (pixel, class): 1 member, 0 not, 0xFF for undefined pixels.
    fn encode(&self, dtype: Dtype) -> (GridMeta, Vec<u8>) {
        let k = self.num_classes();
        let meta = GridMeta::new(Self::KIND, self.height(), self.width(), k, dtype);
        let mut payload = Vec::with_capacity(self.num_pixels() * k);
        for p in 0..self.num_pixels() {
            if self.is_defined(p) {
                payload.extend((0..k).map(|y| self.contains(p, y) as u8));
            } else {
                payload.extend(std::iter::repeat_n(UNDEFINED_SET, k));
            }
        }
        (meta, payload)
    }

    fn decode(meta: &GridMeta, payload: &[u8]) -> Result<Self> {
        let k = meta.classes.max(1);
        let mut sets = PredictionSetGrid::empty(meta.height, meta.width, meta.classes);
        for (p, px) in payload.chunks_exact(k).enumerate() {
            if px.iter().all(|&b| b == UNDEFINED_SET) {
                continue;
            }
            sets.define(p);
            for (y, &b) in px.iter().enumerate() {
                match b {
                    0 => {}
                    1 => sets.insert(p, y),
                    other => {
                        return Err(Error::InvariantViolation(format!(
                            "pixel ({}, {}): set byte {other} not 0 or 1",
                            p / meta.width,
                            p % meta.width
                        )))
                    }
                }
            }
        }
        Ok(sets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_keys_follow_documented_order() {
        let meta = GridMeta::new(GridKind::Probabilities, 2, 3, 4, Dtype::F64);
        let json = serde_json::to_string(&meta).unwrap();
        assert_eq!(
            json,
            r#"{"height":2,"width":3,"classes":4,"dtype":"f64","layout":"row-major","kind":"probabilities"}"#
        );
    }

    #[test]
    fn elements_count_classes_only_for_class_grids() {
        assert_eq!(GridMeta::new(GridKind::Labels, 2, 3, 4, Dtype::I32).elements(), 6);
        assert_eq!(GridMeta::new(GridKind::Probabilities, 2, 3, 4, Dtype::F64).elements(), 24);
    }
}
