//! Binary tensor files shared by the feature cache, mel targets, synthesized
//! mels and attention dumps.
//!
//! Layout (little-endian):
//! - magic `b"M2CT"`
//! - `u32` version, currently 1
//! - `u8` dtype code, 0 = `f32`
//! - `u8` rank, 1..=3
//! - `rank × u32` dims
//! - payload, row-major

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"M2CT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_FIXED: usize = 4 + 4 + 1 + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CacheTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl CacheTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::CacheFormat(format!("rank {} not in 1..=3", dims.len())));
        }
        let numel = numel(&dims)?;
        if numel != data.len() {
            return Err(Error::CacheFormat(format!(
                "dims {dims:?} need {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self {
            dims: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Rank-2 tensors map to their shape, rank-1 tensors to a single row.
    pub fn to_mat(&self) -> Result<Mat> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::CacheFormat(format!(
                    "cannot view rank-{} tensor as a matrix",
                    other.len()
                )))
            }
        };
        Ok(Mat::from_shape_vec((r, c), self.data.iter().map(|&x| x as f64).collect())
            .expect("dims validated"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_FIXED + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, offset) = parse_header(bytes)?;
        let numel = numel(&dims)?;
        let need = numel
            .checked_mul(4)
            .ok_or_else(|| Error::CacheFormat(format!("shape overflow for dims {dims:?}")))?;
        let payload = &bytes[offset..];
        if payload.len() < need {
            return Err(Error::CacheFormat(format!(
                "truncated payload: {} of {need} bytes",
                payload.len()
            )));
        }
        if payload.len() > need {
            return Err(Error::CacheFormat(format!(
                "{} trailing bytes after payload",
                payload.len() - need
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

fn numel(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
        Error::CacheFormat(format!("shape overflow for dims {dims:?}"))
    })
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::CacheFormat(format!(
            "bad magic, expected {:?} (format version {VERSION})",
            std::str::from_utf8(MAGIC).unwrap()
        )));
    }
    if bytes.len() < HEADER_FIXED {
        return Err(Error::CacheFormat("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CacheFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let dtype = bytes[8];
    if dtype != DTYPE_F32 {
        return Err(Error::CacheFormat(format!("unsupported dtype code {dtype}")));
    }
    let rank = bytes[9] as usize;
    if !(1..=3).contains(&rank) {
        return Err(Error::CacheFormat(format!("rank {rank} not in 1..=3")));
    }
    let end = HEADER_FIXED + 4 * rank;
    if bytes.len() < end {
        return Err(Error::CacheFormat("truncated dims".into()));
    }
    let dims = bytes[HEADER_FIXED..end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Ok((dims, end))
}

fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // Leave identical files untouched so repeated runs are no-ops.
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            return Ok(());
        }
    }
    let tmp = path.with_extension("m2ct.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, tensor: &CacheTensor) -> Result<()> {
    if let Some(i) = tensor.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "tensor for {} at flat index {i}",
            path.display()
        )));
    }
    if tensor.dims.is_empty() || tensor.dims.len() > 3 {
        return Err(Error::CacheFormat(format!("rank {} not in 1..=3", tensor.dims.len())));
    }
    if numel(&tensor.dims)? != tensor.data.len() {
        return Err(Error::CacheFormat(format!(
            "dims {:?} do not match {} values",
            tensor.dims,
            tensor.data.len()
        )));
    }
    if tensor.dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::CacheFormat(format!("dim exceeds u32: {:?}", tensor.dims)));
    }
    write_bytes_atomic(path, &tensor.to_bytes())
}

pub fn read_tensor(path: &Path) -> Result<CacheTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CacheTensor::from_bytes(&bytes).map_err(|e| match e {
        Error::CacheFormat(m) => Error::CacheFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads only the header to get the dims.
pub fn read_dims(path: &Path) -> Result<Vec<usize>> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; HEADER_FIXED + 12];
    let mut read = 0;
    loop {
        let n = f.read(&mut head[read..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        read += n;
        if read == head.len() {
            break;
        }
    }
    head.truncate(read);
    parse_header(&head)
        .map(|(d, _)| d)
        .map_err(|e| Error::CacheFormat(format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    TextUtterance,
    TextSequence,
    AcousticUtterance,
    AcousticSequence,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::TextUtterance,
        FeatureKind::TextSequence,
        FeatureKind::AcousticUtterance,
        FeatureKind::AcousticSequence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::TextUtterance => "text-utterance",
            FeatureKind::TextSequence => "text-sequence",
            FeatureKind::AcousticUtterance => "acoustic-utterance",
            FeatureKind::AcousticSequence => "acoustic-sequence",
        }
    }

    pub fn rank(self) -> usize {
        match self {
            FeatureKind::TextUtterance | FeatureKind::AcousticUtterance => 1,
            FeatureKind::TextSequence | FeatureKind::AcousticSequence => 2,
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub kind: FeatureKind,
}

impl CacheKey {
    pub fn new(dialogue_id: impl Into<String>, turn_index: usize, kind: FeatureKind) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            turn_index,
            kind,
        }
    }

    /// `<dialogue_id>/<turn_index>.<kind>.m2ct`
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(&self.dialogue_id).join(format!("{}.{}.m2ct", self.turn_index, self.kind))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}:{}", self.dialogue_id, self.turn_index, self.kind)
    }
}

pub fn write_cache(root: &Path, key: &CacheKey, tensor: &CacheTensor) -> Result<PathBuf> {
    if tensor.dims.len() != key.kind.rank() {
        return Err(Error::CacheFormat(format!(
            "{key}: rank {} tensor for a rank-{} kind",
            tensor.dims.len(),
            key.kind.rank()
        )));
    }
    let path = root.join(key.relative_path());
    write_tensor(&path, tensor)?;
    Ok(path)
}

pub fn read_cache(root: &Path, key: &CacheKey) -> Result<CacheTensor> {
    let t = read_tensor(&root.join(key.relative_path()))?;
    if t.dims.len() != key.kind.rank() {
        return Err(Error::CacheFormat(format!(
            "{key}: stored rank {} for a rank-{} kind",
            t.dims.len(),
            key.kind.rank()
        )));
    }
    Ok(t)
}
