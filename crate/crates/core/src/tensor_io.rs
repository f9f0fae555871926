//! Embedding matrices, the NPY v1.0 array subset they are stored in, and
//! the JSON manifests that attach labels and names to them.
//!
//! Files may hold `<f4` or `<f8` data; everything is promoted to `f64` in
//! memory and always written back as `<f8`, so a save/load round trip is
//! value-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const HEADER_ALIGN: usize = 64;

/// Tolerance on row norms for matrices flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Dense row-major `rows x dim` matrix of `f64` feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Wraps row-major `data`. Requires `rows >= 1`, `dim >= 2` and finite values.
    pub fn new(data: Vec<f64>, rows: usize, dim: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::EmptyMatrix);
        }
        if dim < 2 {
            return Err(Error::Shape(format!("dimension {dim} is below 2")));
        }
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{} values do not fill {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(EmbeddingMatrix {
            data,
            rows,
            dim,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyMatrix);
        };
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(data, rows.len(), dim)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether rows were L2-normalized (and are still unit-norm).
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Divides each row by its L2 norm. Zero rows are an error.
    pub fn normalized(mut self) -> Result<Self> {
        for (i, row) in self.data.chunks_exact_mut(self.dim).enumerate() {
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(Error::ZeroNormRow(i));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.normalized = true;
        Ok(self)
    }

    /// Multiplies every value by `factor`; clears the normalized flag.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.data.iter().map(|v| v * factor).collect(),
            self.rows,
            self.dim,
        )
    }

    /// Rows `indices` in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut out = Self::new(data, indices.len(), self.dim)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Stacks matrices of equal dimension vertically.
    pub fn vstack(parts: &[&EmbeddingMatrix]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::EmptyMatrix);
        };
        let dim = first.dim;
        let mut data = Vec::new();
        for part in parts {
            if part.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: part.dim,
                });
            }
            data.extend_from_slice(&part.data);
        }
        let rows = data.len() / dim;
        let mut out = Self::new(data, rows, dim)?;
        out.normalized = parts.iter().all(|p| p.normalized);
        Ok(out)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    F32,
    F64,
}

struct NpyHeader {
    descr: ElementType,
    shape: Vec<usize>,
}

/// Reads an NPY v1.0 array, returning the values promoted to `f64` and the shape.
pub fn read_npy<R: Read>(reader: &mut R) -> Result<(Vec<f64>, Vec<usize>)> {
    let header = read_header(reader)?;
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let width = match header.descr {
        ElementType::F32 => 4,
        ElementType::F64 => 8,
    };
    let mut bytes = vec![0u8; count * width];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| Error::Format("data section shorter than shape".into()))?;
    let values = match header.descr {
        ElementType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        ElementType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((values, header.shape))
}

/// Writes a 2-D `<f8` NPY v1.0 array.
pub fn write_npy<W: Write>(writer: &mut W, data: &[f64], rows: usize, cols: usize) -> Result<()> {
    debug_assert_eq!(data.len(), rows * cols);
    let mut dict =
        format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({rows}, {cols}), }}");
    // magic(6) + version(2) + header_len(2) + dict + '\n' is padded to HEADER_ALIGN
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    let pad = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');
    let header_len = u16::try_from(dict.len())
        .map_err(|_| Error::Format("header longer than 65535 bytes".into()))?;

    let mut buf = Vec::with_capacity(10 + dict.len() + data.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[1, 0]);
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(dict.as_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer
        .write_all(&buf)
        .map_err(|e| Error::Format(format!("write failed: {e}")))
}

fn read_header<R: Read>(reader: &mut R) -> Result<NpyHeader> {
    let mut prefix = [0u8; 10];
    reader
        .read_exact(&mut prefix)
        .map_err(|_| Error::Format("file too short for header".into()))?;
    if &prefix[..6] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    if prefix[6..8] != [1, 0] {
        return Err(Error::Format(format!(
            "unsupported version {}.{}",
            prefix[6], prefix[7]
        )));
    }
    let len = u16::from_le_bytes([prefix[8], prefix[9]]) as usize;
    let mut raw = vec![0u8; len];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let text =
        std::str::from_utf8(&raw).map_err(|_| Error::Format("header is not ASCII".into()))?;
    parse_header_dict(text)
}

fn parse_header_dict(text: &str) -> Result<NpyHeader> {
    let bad = |msg: &str| Error::Format(format!("{msg} in header {:?}", text.trim()));
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| bad("missing braces"))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    for entry in split_top_level(body) {
        let entry = entry.trim();
        if entry.is_empty() {
            continue;
        }
        let (key, value) = entry.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let value = value.trim();
        match unquote(key.trim()).ok_or_else(|| bad("unquoted key"))? {
            "descr" => {
                descr = Some(match unquote(value) {
                    Some("<f4") => ElementType::F32,
                    Some("<f8") => ElementType::F64,
                    _ => return Err(Error::Format(format!("unsupported element type {value}"))),
                })
            }
            "fortran_order" => {
                fortran = Some(match value {
                    "False" => false,
                    "True" => true,
                    _ => return Err(bad("bad fortran_order")),
                })
            }
            "shape" => {
                let inner = value
                    .strip_prefix('(')
                    .and_then(|s| s.strip_suffix(')'))
                    .ok_or_else(|| bad("bad shape"))?;
                let dims = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape entry")))
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
            }
            _ => return Err(bad("unknown key")),
        }
    }
    match (descr, fortran, shape) {
        (Some(_), Some(true), Some(_)) => {
            Err(Error::Format("fortran order is not supported".into()))
        }
        (Some(descr), Some(false), Some(shape)) => Ok(NpyHeader { descr, shape }),
        _ => Err(bad("missing key")),
    }
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn unquote(s: &str) -> Option<&str> {
    s.strip_prefix('\'')
        .and_then(|s| s.strip_suffix('\''))
        .or_else(|| s.strip_prefix('"').and_then(|s| s.strip_suffix('"')))
}

/// Loads a 2-D array file, optionally L2-normalizing each row.
pub fn load_matrix(path: impl AsRef<Path>, normalize: bool) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (values, shape) = read_npy(&mut BufReader::new(file))?;
    let [rows, dim] = shape[..] else {
        return Err(Error::Shape(format!(
            "expected a 2-D array, found shape {shape:?}"
        )));
    };
    let m = EmbeddingMatrix::new(values, rows, dim)?;
    if normalize {
        m.normalized()
    } else {
        Ok(m)
    }
}

pub fn save_matrix(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_npy(&mut writer, m.as_slice(), m.rows(), m.dim())?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// An embedding matrix with optional per-row labels (0 = normal, 1 = anomalous) and names.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub embeddings: EmbeddingMatrix,
    pub labels: Option<Vec<u8>>,
    pub names: Option<Vec<String>>,
}

impl LabeledSet {
    pub fn new(
        embeddings: EmbeddingMatrix,
        labels: Option<Vec<u8>>,
        names: Option<Vec<String>>,
    ) -> Result<Self> {
        let rows = embeddings.rows();
        if let Some(labels) = &labels {
            if labels.len() != rows {
                return Err(Error::LabelLengthMismatch {
                    labels: labels.len(),
                    rows,
                });
            }
            if let Some(index) = labels.iter().position(|&l| l > 1) {
                return Err(Error::InvalidLabel {
                    index,
                    value: labels[index] as i64,
                });
            }
        }
        if let Some(names) = &names {
            if names.len() != rows {
                return Err(Error::NameLengthMismatch {
                    names: names.len(),
                    rows,
                });
            }
        }
        Ok(LabeledSet {
            embeddings,
            labels,
            names,
        })
    }

    /// (normal count, anomalous count), if labeled.
    pub fn class_counts(&self) -> Option<(usize, usize)> {
        self.labels.as_ref().map(|labels| {
            let anomalous = labels.iter().filter(|&&l| l == 1).count();
            (labels.len() - anomalous, anomalous)
        })
    }
}

/// On-disk manifest: `{"embeddings": "<relative path>", "labels": [...]?, "names": [...]?}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub embeddings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// The embeddings path resolved against the manifest's directory.
    pub fn embeddings_path(&self, manifest_path: &Path) -> PathBuf {
        match manifest_path.parent() {
            Some(dir) => dir.join(&self.embeddings),
            None => PathBuf::from(&self.embeddings),
        }
    }
}

/// Loads a manifest and its array file (rows normalized).
pub fn load_labeled_set(manifest_path: impl AsRef<Path>) -> Result<LabeledSet> {
    load_labeled_set_with(manifest_path, true)
}

pub fn load_labeled_set_with(
    manifest_path: impl AsRef<Path>,
    normalize: bool,
) -> Result<LabeledSet> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let embeddings = load_matrix(manifest.embeddings_path(manifest_path), normalize)?;
    let labels = match manifest.labels {
        None => None,
        Some(raw) => {
            if raw.len() != embeddings.rows() {
                return Err(Error::LabelLengthMismatch {
                    labels: raw.len(),
                    rows: embeddings.rows(),
                });
            }
            let mut labels = Vec::with_capacity(raw.len());
            for (index, value) in raw.into_iter().enumerate() {
                match value {
                    0 | 1 => labels.push(value as u8),
                    _ => return Err(Error::InvalidLabel { index, value }),
                }
            }
            Some(labels)
        }
    };
    LabeledSet::new(embeddings, labels, manifest.names)
}

/// Writes `set` as `<dir>/<array_name>` plus a manifest at `manifest_path`
/// referencing it by file name.
pub fn save_labeled_set(
    set: &LabeledSet,
    manifest_path: impl AsRef<Path>,
    array_name: &str,
) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    save_matrix(&set.embeddings, dir.join(array_name))?;
    Manifest {
        embeddings: array_name.to_string(),
        labels: set
            .labels
            .as_ref()
            .map(|l| l.iter().map(|&v| v as i64).collect()),
        names: set.names.clone(),
    }
    .write(manifest_path)
}
