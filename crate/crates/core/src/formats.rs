//! On-disk formats: the SVDF float tensor, 16-bit PGM instance masks,
//! `scene.json`, and JSON-lines files with sorted keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::depth::DepthSequence;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic {0:?}, expected \"SVDF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported SVDF version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated data: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("invalid PGM: {0}")]
    Pgm(String),
    #[error("{path}:{line}: {message}")]
    Json { path: PathBuf, line: usize, message: String },
    #[error("schema: {0}")]
    Schema(String),
}

pub type Result<T> = std::result::Result<T, FormatError>;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| FormatError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

pub const SVDF_MAGIC: [u8; 4] = *b"SVDF";
pub const SVDF_VERSION: u32 = 1;
const SVDF_HEADER: usize = 20;

/// Row-major `T x H x W` single-precision tensor; NaN marks invalid samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = frames * height * width;
        if data.len() != expected {
            return Err(FormatError::Schema(format!("tensor {frames}x{height}x{width} needs {expected} values, got {}", data.len())));
        }
        Ok(Tensor3 { frames, height, width, data })
    }

    pub fn from_depth(d: &DepthSequence) -> Self {
        let (frames, height, width) = d.shape();
        let data = d.values_with_nan().into_iter().map(|v| v as f32).collect();
        Tensor3 { frames, height, width, data }
    }

    pub fn to_depth(&self) -> DepthSequence {
        let values = self.data.iter().map(|&v| f64::from(v)).collect();
        DepthSequence::from_values(self.frames, self.height, self.width, values).expect("tensor length checked on construction")
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for row in m.row_iter() {
            data.extend(row.iter().map(|&v| v as f32));
        }
        Tensor3 { frames: 1, height: m.nrows(), width: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.frames != 1 {
            return Err(FormatError::Schema(format!("matrix tensor must have one frame, got {}", self.frames)));
        }
        Ok(DMatrix::from_row_iterator(self.height, self.width, self.data.iter().map(|&v| f64::from(v))))
    }
}

pub fn encode_svdf(t: &Tensor3) -> Vec<u8> {
    let mut out = Vec::with_capacity(SVDF_HEADER + 4 * t.data.len());
    out.extend_from_slice(&SVDF_MAGIC);
    out.extend_from_slice(&SVDF_VERSION.to_le_bytes());
    for dim in [t.frames, t.height, t.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

pub fn decode_svdf(bytes: &[u8]) -> Result<Tensor3> {
    if bytes.len() < SVDF_HEADER {
        return Err(FormatError::Truncated { expected: SVDF_HEADER, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != SVDF_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = le_u32(bytes, 4);
    if version != SVDF_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let (frames, height, width) = (le_u32(bytes, 8) as usize, le_u32(bytes, 12) as usize, le_u32(bytes, 16) as usize);
    let count = frames
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| FormatError::Schema("tensor shape overflows".into()))?;
    let expected = SVDF_HEADER + 4 * count;
    if bytes.len() != expected {
        return Err(FormatError::Truncated { expected, got: bytes.len() });
    }
    let data = bytes[SVDF_HEADER..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
    Ok(Tensor3 { frames, height, width, data })
}

pub fn read_svdf(path: &Path) -> Result<Tensor3> {
    decode_svdf(&read_bytes(path)?)
}

pub fn write_svdf(path: &Path, t: &Tensor3) -> Result<()> {
    write_bytes(path, &encode_svdf(t))
}

/// One frame of instance ids; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask16 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl Mask16 {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(FormatError::Pgm(format!("{width}x{height} mask needs {} samples, got {}", width * height, data.len())));
        }
        Ok(Mask16 { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Pixel coordinates `(x, y)` carrying `id`.
    pub fn pixels(&self, id: u16) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data.iter().enumerate().filter(move |(_, &v)| v == id).map(|(i, _)| (i % self.width, i / self.width))
    }

    pub fn ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

pub fn encode_pgm(mask: &Mask16) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", mask.width, mask.height).into_bytes();
    for v in &mask.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Mask16> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Pgm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(FormatError::Pgm(format!("expected P5, got {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| FormatError::Pgm(format!("bad header field {s:?}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 65535 {
        return Err(FormatError::Pgm(format!("expected maxval 65535, got {maxval}")));
    }
    let expected = pos + 2 * width * height;
    if bytes.len() != expected {
        return Err(FormatError::Truncated { expected, got: bytes.len() });
    }
    let data = bytes[pos..].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Mask16::new(width, height, data)
}

pub fn read_pgm(path: &Path) -> Result<Mask16> {
    decode_pgm(&read_bytes(path)?)
}

pub fn write_pgm(path: &Path, mask: &Mask16) -> Result<()> {
    write_bytes(path, &encode_pgm(mask))
}

/// File name of frame `t` inside a mask directory.
pub fn mask_file_name(t: usize) -> String {
    format!("{t:06}.pgm")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFiles {
    pub depth: String,
    pub depth_ref: String,
    /// Directory of per-frame PGM masks.
    pub masks: String,
    pub detections: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub source: String,
    pub indoor: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_height_m: Option<f64>,
    /// World up direction; defaults to `-y`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub up: Option<[f64; 3]>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceJson {
    #[serde(rename = "class")]
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub scene_id: String,
    pub intrinsics: IntrinsicsJson,
    pub poses: Vec<PoseJson>,
    pub files: SceneFiles,
    pub meta: SceneMeta,
    /// Mask id (decimal string) to class.
    #[serde(default)]
    pub instances: BTreeMap<String, InstanceJson>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl SceneFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        serde_json::from_slice(&bytes).map_err(|e| FormatError::Json { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
    }
}

/// 2D keypoints of one instance in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRow {
    pub frame: usize,
    pub instance: u16,
    pub points: Vec<[f64; 2]>,
}

/// Compact JSON with object keys in sorted order.
pub fn to_sorted_json<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value).expect("serializable value").to_string()
}

pub fn to_sorted_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(&serde_json::to_value(value).expect("serializable value")).expect("value serializes")
}

pub fn jsonl_string<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&to_sorted_json(r));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_bytes(path, jsonl_string(rows).as_bytes())
}

/// Parse JSON lines, skipping blank lines; errors carry the line number.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| FormatError::Json { path: path.to_path_buf(), line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| FormatError::Json { path: path.to_path_buf(), line: 0, message: e.to_string() })?;
    parse_jsonl(&text, path)
}
