//! Checkpoint data model and its bit-exact on-disk format.
//!
//! A [`Checkpoint`] is an immutable snapshot of named dense arrays taken at a
//! training step. The binary file layout is versioned and little-endian
//! throughout, so that a checkpoint written online and re-read for offline
//! averaging operates on identical bytes:
//!
//! ```text
//! magic "WAVG" | version u32 = 1 | step u64 | block count u32
//! per block: name len u32 | name bytes | dtype u8 (0=f32, 1=f64)
//!            | rank u8 | extents u64 x rank | raw element data
//! ```
//!
//! Files follow the `ckpt_{step:06}.bin` naming convention; averaged outputs
//! use `avg_{scheme}_{step:06}.bin`. Non-finite values are stored verbatim.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::scalar::{Dtype, Scalar};

pub const MAGIC: [u8; 4] = *b"WAVG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("checkpoint file not found: {path}")]
    NotFound { path: PathBuf },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic in {path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("unsupported format version {found} in {path} (expected {FORMAT_VERSION})")]
    BadVersion { path: PathBuf, found: u32 },
    #[error("truncated payload in {path}: needed {needed} more bytes at offset {offset}")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error("duplicate block name {name:?} in {path}")]
    DuplicateBlock { path: PathBuf, name: String },
    #[error("invalid block name {name:?}: must be non-empty UTF-8 without NUL")]
    InvalidName { name: String },
    #[error("invalid field in {path}: {what}")]
    InvalidField { path: PathBuf, what: String },
    #[error("block {name:?}: shape {shape:?} implies {expected} values, got {got}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("duplicate block name {name:?} in checkpoint")]
    DuplicateInCheckpoint { name: String },
    #[error("duplicate step {step} in {dir}: {a} and {b}")]
    DuplicateStep {
        dir: PathBuf,
        step: u64,
        a: PathBuf,
        b: PathBuf,
    },
}

pub type Result<T> = std::result::Result<T, StoreError>;

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// Dense row-major payload of a block, one variant per supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element at `i` widened to f64.
    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }

    /// Overwrite element `i`, rounding to the storage dtype.
    pub fn set_f64(&mut self, i: usize, value: f64) {
        match self {
            TensorData::F32(v) => v[i] = value as f32,
            TensorData::F64(v) => v[i] = value,
        }
    }

    pub fn iter_f64(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            TensorData::F32(v) => Box::new(v.iter().map(|&x| x as f64)),
            TensorData::F64(v) => Box::new(v.iter().copied()),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        match self {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    /// Bitwise equality, distinguishing NaN payloads and signed zeros.
    pub fn bits_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    /// Cast to `dtype`, returning a fresh buffer even when the dtype matches.
    pub fn cast(&self, dtype: Dtype) -> TensorData {
        match dtype {
            Dtype::F32 => TensorData::F32(self.iter_f64().map(|x| x as f32).collect()),
            Dtype::F64 => TensorData::F64(self.iter_f64().collect()),
        }
    }

    /// Build from f64 values, rounding to `dtype`.
    pub fn from_f64_values(values: Vec<f64>, dtype: Dtype) -> TensorData {
        match dtype {
            Dtype::F32 => TensorData::F32(values.into_iter().map(|x| x as f32).collect()),
            Dtype::F64 => TensorData::F64(values),
        }
    }

    pub fn zeros(len: usize, dtype: Dtype) -> TensorData {
        match dtype {
            Dtype::F32 => TensorData::F32(vec![0.0; len]),
            Dtype::F64 => TensorData::F64(vec![0.0; len]),
        }
    }
}

/// A named dense array: one trainable tensor of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    name: String,
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorBlock {
    /// Create a block, enforcing that the name is non-empty and NUL-free and
    /// that `shape` accounts for every stored value. An empty shape denotes a
    /// scalar holding exactly one value.
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<TensorBlock> {
        let name = name.into();
        if name.is_empty() || name.contains('\0') {
            return Err(StoreError::InvalidName { name });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(StoreError::ShapeMismatch {
                name,
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(TensorBlock { name, shape, data })
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<TensorBlock> {
        TensorBlock::new(name, shape, TensorData::F32(values))
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorBlock> {
        TensorBlock::new(name, shape, TensorData::F64(values))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut TensorData {
        &mut self.data
    }

    /// Same (shape, dtype); the premise for element-wise arithmetic.
    pub fn layout_matches(&self, other: &TensorBlock) -> bool {
        self.shape == other.shape && self.dtype() == other.dtype()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// A snapshot of all trainable parameters at training step `step`.
///
/// Blocks keep their insertion order (which the file format preserves) and
/// are unique by name. Checkpoints are plain values: cloning one yields an
/// independent snapshot, and a `&Checkpoint` is safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    step: u64,
    blocks: Vec<TensorBlock>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new(step: u64) -> Checkpoint {
        Checkpoint {
            step,
            blocks: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn push_block(&mut self, block: TensorBlock) -> Result<()> {
        if self.index.contains_key(block.name()) {
            return Err(StoreError::DuplicateInCheckpoint {
                name: block.name().to_string(),
            });
        }
        self.index.insert(block.name().to_string(), self.blocks.len());
        self.blocks.push(block);
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TensorBlock> {
        self.blocks.iter()
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut TensorBlock> {
        self.blocks.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&TensorBlock> {
        self.index.get(name).map(|&i| &self.blocks[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorBlock> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.blocks[i]),
            None => None,
        }
    }

    /// Total number of stored values across blocks.
    pub fn value_count(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// Shape compatibility: identical name sets with per-name identical
    /// (shape, dtype). This is the precondition for averaging and optimizer
    /// arithmetic, checkable in O(total names).
    pub fn shape_compatible(&self, other: &Checkpoint) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().all(|b| {
                other
                    .get(b.name())
                    .map(|o| b.layout_matches(o))
                    .unwrap_or(false)
            })
    }

    /// Field-for-field equality with bitwise comparison of data.
    pub fn bits_eq(&self, other: &Checkpoint) -> bool {
        self.step == other.step
            && self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(other.blocks.iter())
                .all(|(a, b)| {
                    a.name() == b.name() && a.shape() == b.shape() && a.data().bits_eq(b.data())
                })
    }

    /// Copy with every block cast to `dtype` and the step replaced.
    pub fn cast(&self, dtype: Dtype, step: u64) -> Checkpoint {
        let mut out = Checkpoint::new(step);
        for b in &self.blocks {
            let cast = TensorBlock {
                name: b.name.clone(),
                shape: b.shape.clone(),
                data: b.data.cast(dtype),
            };
            out.index.insert(cast.name.clone(), out.blocks.len());
            out.blocks.push(cast);
        }
        out
    }

    /// Zero-valued checkpoint with the same block layout.
    pub fn zeros_like(&self) -> Checkpoint {
        let mut out = Checkpoint::new(self.step);
        for b in &self.blocks {
            let zero = TensorBlock {
                name: b.name.clone(),
                shape: b.shape.clone(),
                data: TensorData::zeros(b.len(), b.dtype()),
            };
            out.index.insert(zero.name.clone(), out.blocks.len());
            out.blocks.push(zero);
        }
        out
    }

    /// True when every value in every block is finite.
    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data().all_finite())
    }
}

impl fmt::Display for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} ({} blocks)", self.step, self.blocks.len())
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let payload: usize = ckpt
        .blocks()
        .map(|b| 4 + b.name().len() + 2 + 8 * b.shape().len() + b.len() * b.dtype().element_size())
        .sum();
    let mut buf = Vec::with_capacity(4 + 4 + 8 + 4 + payload);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.step().to_le_bytes());
    buf.extend_from_slice(&(ckpt.block_count() as u32).to_le_bytes());
    for b in ckpt.blocks() {
        buf.extend_from_slice(&(b.name().len() as u32).to_le_bytes());
        buf.extend_from_slice(b.name().as_bytes());
        buf.push(b.dtype().tag());
        buf.push(b.shape().len() as u8);
        for &extent in b.shape() {
            buf.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        match b.data() {
            TensorData::F32(v) => {
                for &x in v {
                    x.write_le(&mut buf);
                }
            }
            TensorData::F64(v) => {
                for &x in v {
                    x.write_le(&mut buf);
                }
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(StoreError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos,
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4).map_err(|_| StoreError::BadMagic {
        path: path.to_path_buf(),
    })? != MAGIC
    {
        return Err(StoreError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(StoreError::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let step = r.u64()?;
    let block_count = r.u32()?;
    let mut ckpt = Checkpoint::new(step);
    for _ in 0..block_count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| StoreError::InvalidField {
                path: path.to_path_buf(),
                what: "block name is not valid UTF-8".to_string(),
            })?
            .to_string();
        let dtype = Dtype::from_tag(r.u8()?).ok_or_else(|| StoreError::InvalidField {
            path: path.to_path_buf(),
            what: format!("unknown dtype tag in block {name:?}"),
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * dtype.element_size())?;
        let data = match dtype {
            Dtype::F32 => TensorData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
            Dtype::F64 => TensorData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
        };
        let block = TensorBlock::new(name, shape, data)?;
        ckpt.push_block(block).map_err(|e| match e {
            StoreError::DuplicateInCheckpoint { name } => StoreError::DuplicateBlock {
                path: path.to_path_buf(),
                name,
            },
            other => other,
        })?;
    }
    Ok(ckpt)
}

/// Write `ckpt` to `path`, atomically (temp file + rename).
///
/// Reloading the file yields a checkpoint equal field-for-field and
/// bit-for-bit in data; non-finite values are written verbatim.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt);
    let io = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("bin.tmp");
    let mut file = fs::File::create(&tmp).map_err(io)?;
    file.write_all(&bytes).map_err(io)?;
    file.sync_all().map_err(io)?;
    drop(file);
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

/// Exact inverse of [`save_checkpoint`]; rejects files whose magic or
/// format version does not match.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(StoreError::NotFound {
                path: path.to_path_buf(),
            })
        }
        Err(e) => {
            return Err(StoreError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    };
    decode(&bytes, path)
}

/// Canonical file name for a raw trajectory checkpoint.
pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt_{step:06}.bin")
}

/// Canonical file name for an averaged checkpoint.
pub fn averaged_file_name(scheme: &str, step: u64) -> String {
    format!("avg_{scheme}_{step:06}.bin")
}

fn parse_checkpoint_name(name: &str) -> Option<u64> {
    let digits = name.strip_prefix("ckpt_")?.strip_suffix(".bin")?;
    // Zero-padded to at least six digits per the naming convention.
    if digits.len() < 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// List checkpoint files in `dir` that follow the naming convention, sorted
/// ascending by embedded step. Other files are ignored; two files claiming
/// the same step are an error.
pub fn scan_checkpoint_dir(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let io = |source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let file_name = entry.file_name();
        let Some(name) = file_name.to_str() else {
            continue;
        };
        if let Some(step) = parse_checkpoint_name(name) {
            found.push((step, entry.path()));
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    for pair in found.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(StoreError::DuplicateStep {
                dir: dir.to_path_buf(),
                step: pair[0].0,
                a: pair[0].1.clone(),
                b: pair[1].1.clone(),
            });
        }
    }
    Ok(found)
}
