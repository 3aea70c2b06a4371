//! Checkpoint archives on disk, and the append-only store that holds them.
//!
//! Layout of a `.wsmt` file (all integers little-endian):
//!
//! ```text
//! offset 0   "WSMT"
//! offset 4   u32 format version (1)
//! offset 8   u64 header length H
//! offset 16  H bytes of UTF-8 JSON: {"tensors": {name: meta}, "metadata": {...}}
//! offset 16+H  tensor payloads, contiguous, in name-sorted order
//! ```
//!
//! Each tensor's `offset` is relative to the start of the payload region.
//! Archives are written to a scratch name and renamed into place, and an
//! existing archive is never overwritten, so readers may scan a store while
//! a trainer is appending to it.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Element;

pub const MAGIC: &[u8; 4] = b"WSMT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: u64 = 16;

pub const MANIFEST_FILE: &str = "trajectory.json";
pub const STORE_ENV: &str = "WSM_STORE_DIR";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic bytes {found:?} at byte 0")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported format version {found} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion { path: PathBuf, found: u32 },
    #[error("{path}: truncated, expected {expected} bytes but file has {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: malformed archive at byte {position}: {detail}")]
    Format {
        path: PathBuf,
        position: u64,
        detail: String,
    },
    #[error("invalid archive contents: {0}")]
    Invalid(String),
    #[error("{path} already exists; archives are never overwritten")]
    AlreadyExists { path: PathBuf },
    #[error("{path} is incompatible with {reference}: {detail}")]
    Incompatible {
        path: PathBuf,
        reference: PathBuf,
        detail: String,
    },
    #[error("{path}: no tensor named {name:?}")]
    MissingTensor { path: PathBuf, name: String },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl StoreError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, StoreError::Io { .. } | StoreError::AlreadyExists { .. })
    }
}

type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMetadata {
    pub step: u64,
    pub tokens: u64,
    #[serde(default)]
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl ArchiveMetadata {
    pub fn new(step: u64, tokens: u64, tag: impl Into<String>) -> Self {
        ArchiveMetadata {
            step,
            tokens,
            tag: tag.into(),
            provenance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: BTreeMap<String, TensorMeta>,
    pub metadata: ArchiveMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// An in-memory tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

pub type TensorMap = BTreeMap<String, Tensor>;

/// Element types that can be viewed inside a [`TensorData`].
pub trait Stored: Element {
    fn wrap(v: Vec<Self>) -> TensorData;
    fn view(d: &TensorData) -> Option<&[Self]>;
}

impl Stored for f32 {
    fn wrap(v: Vec<Self>) -> TensorData {
        TensorData::F32(v)
    }

    fn view(d: &TensorData) -> Option<&[Self]> {
        match d {
            TensorData::F32(v) => Some(v),
            TensorData::F64(_) => None,
        }
    }
}

impl Stored for f64 {
    fn wrap(v: Vec<Self>) -> TensorData {
        TensorData::F64(v)
    }

    fn view(d: &TensorData) -> Option<&[Self]> {
        match d {
            TensorData::F64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }
}

impl Tensor {
    pub fn new<T: Stored>(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(StoreError::Invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: T::wrap(values),
        })
    }

    /// Casts `values` to `dtype`.
    pub fn from_f64(dtype: DType, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        match dtype {
            DType::F32 => Tensor::new(shape, values.iter().map(|&v| v as f32).collect()),
            DType::F64 => Tensor::new(shape, values.to_vec()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn as_slice<T: Stored>(&self) -> Option<&[T]> {
        T::view(&self.data)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn encode_le(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| x.put_le(out)),
            TensorData::F64(v) => v.iter().for_each(|x| x.put_le(out)),
        }
    }

    fn decode_le(meta: &TensorMeta, bytes: &[u8]) -> Tensor {
        let size = meta.dtype.size();
        let data = match meta.dtype {
            DType::F32 => TensorData::F32(bytes.chunks_exact(size).map(f32::get_le).collect()),
            DType::F64 => TensorData::F64(bytes.chunks_exact(size).map(f64::get_le).collect()),
        };
        Tensor {
            shape: meta.shape.clone(),
            data,
        }
    }
}

/// Assigns contiguous offsets in name order.
pub fn layout<'a>(
    tensors: impl IntoIterator<Item = (&'a str, DType, &'a [usize])>,
) -> Result<BTreeMap<String, TensorMeta>> {
    let mut metas = BTreeMap::new();
    for (name, dtype, shape) in tensors {
        if name.is_empty() {
            return Err(StoreError::Invalid("tensor names must be nonempty".into()));
        }
        let numel: usize = shape.iter().product();
        let meta = TensorMeta {
            dtype,
            shape: shape.to_vec(),
            offset: 0,
            nbytes: (numel * dtype.size()) as u64,
        };
        if metas.insert(name.to_string(), meta).is_some() {
            return Err(StoreError::Invalid(format!("duplicate tensor name {name:?}")));
        }
    }
    if metas.is_empty() {
        return Err(StoreError::Invalid("an archive needs at least one tensor".into()));
    }
    let mut offset = 0u64;
    for meta in metas.values_mut() {
        meta.offset = offset;
        offset += meta.nbytes;
    }
    Ok(metas)
}

fn scratch_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.partial"))
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], pos: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, pos)
}

#[cfg(unix)]
fn write_all_at(file: &File, buf: &[u8], pos: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.write_all_at(buf, pos)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut pos: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, pos)? {
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                pos += n as u64;
            }
        }
    }
    Ok(())
}

#[cfg(windows)]
fn write_all_at(file: &File, mut buf: &[u8], mut pos: u64) -> io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        let n = file.seek_write(buf, pos)?;
        buf = &buf[n..];
        pos += n as u64;
    }
    Ok(())
}

/// Streams tensor payloads into a new archive.
///
/// The header is written up front, so regions may be filled in any order
/// (and from several threads, since writes are positioned).
pub struct ArchiveWriter {
    file: Option<File>,
    scratch: PathBuf,
    target: PathBuf,
    header: Header,
    data_start: u64,
}

impl ArchiveWriter {
    pub fn create(
        path: impl AsRef<Path>,
        tensors: BTreeMap<String, TensorMeta>,
        metadata: ArchiveMetadata,
    ) -> Result<Self> {
        let target = path.as_ref().to_path_buf();
        if target.exists() {
            return Err(StoreError::AlreadyExists { path: target });
        }
        let header = Header { tensors, metadata };
        let json = serde_json::to_vec(&header)
            .map_err(|e| StoreError::Invalid(format!("header does not serialize: {e}")))?;
        let scratch = scratch_path(&target);
        let mut file = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(true)
            .open(&scratch)
            .map_err(|e| StoreError::io(&scratch, e))?;
        let mut preamble = Vec::with_capacity(PREAMBLE_LEN as usize + json.len());
        preamble.extend_from_slice(MAGIC);
        preamble.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        preamble.extend_from_slice(&(json.len() as u64).to_le_bytes());
        preamble.extend_from_slice(&json);
        file.write_all(&preamble)
            .map_err(|e| StoreError::io(&scratch, e))?;
        let data_start = preamble.len() as u64;
        let total: u64 = header.tensors.values().map(|m| m.nbytes).sum();
        file.set_len(data_start + total)
            .map_err(|e| StoreError::io(&scratch, e))?;
        Ok(ArchiveWriter {
            file: Some(file),
            scratch,
            target,
            header,
            data_start,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    fn handle(&self) -> &File {
        self.file.as_ref().expect("writer is open until finish")
    }

    fn meta(&self, name: &str) -> Result<&TensorMeta> {
        self.header
            .tensors
            .get(name)
            .ok_or_else(|| StoreError::MissingTensor {
                path: self.target.clone(),
                name: name.to_string(),
            })
    }

    /// Writes `values` (cast to the tensor's dtype) starting at element `start`.
    pub fn write_region(&self, name: &str, start: usize, values: &[f64]) -> Result<()> {
        let meta = self.meta(name)?;
        if start + values.len() > meta.numel() {
            return Err(StoreError::Invalid(format!(
                "region {start}..{} outside tensor {name:?} of {} elements",
                start + values.len(),
                meta.numel()
            )));
        }
        let size = meta.dtype.size();
        let mut buf = Vec::with_capacity(values.len() * size);
        match meta.dtype {
            DType::F32 => values.iter().for_each(|&v| (v as f32).put_le(&mut buf)),
            DType::F64 => values.iter().for_each(|&v| v.put_le(&mut buf)),
        }
        let pos = self.data_start + meta.offset + (start * size) as u64;
        write_all_at(self.handle(), &buf, pos).map_err(|e| StoreError::io(&self.scratch, e))
    }

    pub fn write_tensor(&self, name: &str, tensor: &Tensor) -> Result<()> {
        let meta = self.meta(name)?;
        if meta.dtype != tensor.dtype() || meta.shape != tensor.shape() {
            return Err(StoreError::Invalid(format!(
                "tensor {name:?} does not match its declared layout"
            )));
        }
        let mut buf = Vec::with_capacity(meta.nbytes as usize);
        tensor.encode_le(&mut buf);
        write_all_at(self.handle(), &buf, self.data_start + meta.offset)
            .map_err(|e| StoreError::io(&self.scratch, e))
    }

    /// Publishes the archive under its final name.
    pub fn finish(mut self) -> Result<PathBuf> {
        let file = self.file.take().expect("writer is open until finish");
        file.sync_data()
            .map_err(|e| StoreError::io(&self.scratch, e))?;
        drop(file);
        if self.target.exists() {
            return Err(StoreError::AlreadyExists {
                path: self.target.clone(),
            });
        }
        fs::rename(&self.scratch, &self.target).map_err(|e| StoreError::io(&self.target, e))?;
        Ok(self.target.clone())
    }
}

impl Drop for ArchiveWriter {
    fn drop(&mut self) {
        // Abandoned writers leave no partial file behind; after `finish` the
        // scratch path no longer exists and this is a no-op.
        let _ = fs::remove_file(&self.scratch);
    }
}

/// Writes a whole archive at once.
pub fn write_archive(
    path: impl AsRef<Path>,
    tensors: &TensorMap,
    metadata: &ArchiveMetadata,
) -> Result<PathBuf> {
    let metas = layout(
        tensors
            .iter()
            .map(|(name, t)| (name.as_str(), t.dtype(), t.shape())),
    )?;
    let writer = ArchiveWriter::create(path, metas, metadata.clone())?;
    for (name, tensor) in tensors {
        writer.write_tensor(name, tensor)?;
    }
    writer.finish()
}

/// An opened, validated archive. Tensor payloads are read on demand.
#[derive(Debug)]
pub struct CheckpointArchive {
    path: PathBuf,
    file: File,
    header: Header,
    data_start: u64,
}

/// Opens and validates an archive without reading any payload.
pub fn read_archive(path: impl AsRef<Path>) -> Result<CheckpointArchive> {
    CheckpointArchive::open(path)
}

impl CheckpointArchive {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| StoreError::io(&path, e))?;
        let file_len = file
            .metadata()
            .map_err(|e| StoreError::io(&path, e))?
            .len();
        if file_len < PREAMBLE_LEN {
            return Err(StoreError::Truncated {
                path,
                expected: PREAMBLE_LEN,
                actual: file_len,
            });
        }
        let mut preamble = [0u8; PREAMBLE_LEN as usize];
        read_exact_at(&file, &mut preamble, 0).map_err(|e| StoreError::io(&path, e))?;
        let magic: [u8; 4] = preamble[0..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(StoreError::BadMagic { path, found: magic });
        }
        let version = u32::from_le_bytes(preamble[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion {
                path,
                found: version,
            });
        }
        let header_len = u64::from_le_bytes(preamble[8..16].try_into().expect("8 bytes"));
        let data_start = PREAMBLE_LEN.checked_add(header_len).ok_or_else(|| StoreError::Format {
            path: path.clone(),
            position: 8,
            detail: format!("header length {header_len} overflows"),
        })?;
        if file_len < data_start {
            return Err(StoreError::Truncated {
                path,
                expected: data_start,
                actual: file_len,
            });
        }
        let mut json = vec![0u8; header_len as usize];
        read_exact_at(&file, &mut json, PREAMBLE_LEN).map_err(|e| StoreError::io(&path, e))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| StoreError::Format {
            path: path.clone(),
            position: PREAMBLE_LEN + e.column() as u64,
            detail: format!("header JSON: {e}"),
        })?;
        let mut expected_offset = 0u64;
        for (name, meta) in &header.tensors {
            let position = data_start + meta.offset;
            let fail = |detail: String| StoreError::Format {
                path: path.clone(),
                position,
                detail,
            };
            if name.is_empty() {
                return Err(fail("empty tensor name".into()));
            }
            let numel = meta
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| fail(format!("shape of {name:?} overflows")))?;
            if Some(meta.nbytes) != numel.checked_mul(meta.dtype.size() as u64) {
                return Err(fail(format!(
                    "tensor {name:?} declares {} bytes for shape {:?}",
                    meta.nbytes, meta.shape
                )));
            }
            if meta.offset < expected_offset {
                return Err(fail(format!("tensor {name:?} overlaps its predecessor")));
            }
            if meta.offset > expected_offset {
                return Err(fail(format!(
                    "gap before tensor {name:?} (expected offset {expected_offset})"
                )));
            }
            expected_offset += meta.nbytes;
        }
        if header.tensors.is_empty() {
            return Err(StoreError::Format {
                path,
                position: PREAMBLE_LEN,
                detail: "archive holds no tensors".into(),
            });
        }
        let expected_len = data_start + expected_offset;
        if file_len < expected_len {
            return Err(StoreError::Truncated {
                path,
                expected: expected_len,
                actual: file_len,
            });
        }
        if file_len > expected_len {
            return Err(StoreError::Format {
                path,
                position: expected_len,
                detail: format!("{} trailing bytes", file_len - expected_len),
            });
        }
        Ok(CheckpointArchive {
            path,
            file,
            header,
            data_start,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn metadata(&self) -> &ArchiveMetadata {
        &self.header.metadata
    }

    pub fn tensors(&self) -> &BTreeMap<String, TensorMeta> {
        &self.header.tensors
    }

    fn meta(&self, name: &str) -> Result<&TensorMeta> {
        self.header
            .tensors
            .get(name)
            .ok_or_else(|| StoreError::MissingTensor {
                path: self.path.clone(),
                name: name.to_string(),
            })
    }

    pub fn read_tensor(&self, name: &str) -> Result<Tensor> {
        let meta = self.meta(name)?;
        let mut bytes = vec![0u8; meta.nbytes as usize];
        read_exact_at(&self.file, &mut bytes, self.data_start + meta.offset)
            .map_err(|e| StoreError::io(&self.path, e))?;
        Ok(Tensor::decode_le(meta, &bytes))
    }

    /// Reads `out.len()` elements starting at element `start`, widened to f64.
    pub fn read_f64_range(&self, name: &str, start: usize, out: &mut [f64]) -> Result<()> {
        let meta = self.meta(name)?;
        if start + out.len() > meta.numel() {
            return Err(StoreError::Invalid(format!(
                "range {start}..{} outside tensor {name:?}",
                start + out.len()
            )));
        }
        let size = meta.dtype.size();
        let mut bytes = vec![0u8; out.len() * size];
        let pos = self.data_start + meta.offset + (start * size) as u64;
        read_exact_at(&self.file, &mut bytes, pos).map_err(|e| StoreError::io(&self.path, e))?;
        for (o, chunk) in out.iter_mut().zip(bytes.chunks_exact(size)) {
            *o = match meta.dtype {
                DType::F32 => f64::from(f32::get_le(chunk)),
                DType::F64 => f64::get_le(chunk),
            };
        }
        Ok(())
    }

    pub fn read_all(&self) -> Result<TensorMap> {
        self.header
            .tensors
            .keys()
            .map(|name| Ok((name.clone(), self.read_tensor(name)?)))
            .collect()
    }
}

/// Checks that every archive has the same tensor names, dtypes and shapes
/// as the first. Only headers are consulted.
pub fn check_compatible(archives: &[CheckpointArchive]) -> Result<()> {
    let Some(first) = archives.first() else {
        return Ok(());
    };
    for other in &archives[1..] {
        check_pair(first, other)?;
    }
    Ok(())
}

pub(crate) fn check_pair(reference: &CheckpointArchive, other: &CheckpointArchive) -> Result<()> {
    let incompatible = |detail: String| StoreError::Incompatible {
        path: other.path.clone(),
        reference: reference.path.clone(),
        detail,
    };
    let (a, b) = (reference.tensors(), other.tensors());
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(incompatible("tensor names differ".into()));
    }
    for ((name, ma), mb) in a.iter().zip(b.values()) {
        if ma.dtype != mb.dtype {
            return Err(incompatible(format!("{name:?} dtype {:?} vs {:?}", ma.dtype, mb.dtype)));
        }
        if ma.shape != mb.shape {
            return Err(incompatible(format!("{name:?} shape {:?} vs {:?}", ma.shape, mb.shape)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the store root.
    pub path: String,
    pub step: u64,
    pub tokens: u64,
    /// Archive of per-step updates since the previous entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updates: Option<String>,
}

/// Ordered record of the checkpoints a run has saved.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_tokens: Option<u64>,
    #[serde(default)]
    pub records_updates: bool,
}

/// Result of [`TrajectoryManifest::last_n`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub entries: Vec<ManifestEntry>,
    /// Fewer than the requested number of checkpoints exist.
    pub shortfall: bool,
}

impl TrajectoryManifest {
    pub fn validate(&self) -> Result<()> {
        for pair in self.entries.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(StoreError::Manifest(format!(
                    "steps must increase: {} then {}",
                    pair[0].step, pair[1].step
                )));
            }
            if let Some(interval) = self.interval_tokens {
                if pair[1].tokens.checked_sub(pair[0].tokens) != Some(interval) {
                    return Err(StoreError::Manifest(format!(
                        "token spacing between steps {} and {} is not {interval}",
                        pair[0].step, pair[1].step
                    )));
                }
            }
        }
        if self.records_updates {
            if let Some(e) = self.entries.iter().find(|e| e.updates.is_none()) {
                return Err(StoreError::Manifest(format!(
                    "step {} has no update record",
                    e.step
                )));
            }
        }
        Ok(())
    }

    pub fn push(&mut self, entry: ManifestEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.step <= last.step {
                return Err(StoreError::Manifest(format!(
                    "step {} does not follow {}",
                    entry.step, last.step
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    /// The `n` most recent entries, oldest first.
    pub fn last_n(&self, n: usize) -> Result<Window> {
        if n == 0 {
            return Err(StoreError::Manifest("window size must be at least 1".into()));
        }
        let start = self.entries.len().saturating_sub(n);
        Ok(Window {
            entries: self.entries[start..].to_vec(),
            shortfall: self.entries.len() < n,
        })
    }
}

/// A directory of archives plus its `trajectory.json`.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| StoreError::io(&root, e))?;
        Ok(Store { root })
    }

    /// Opens a store that must already exist; creates nothing.
    pub fn open_existing(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        match fs::metadata(&root) {
            Ok(m) if m.is_dir() => Ok(Store { root }),
            Ok(_) => Err(StoreError::io(
                &root,
                io::Error::new(io::ErrorKind::NotADirectory, "store root is not a directory"),
            )),
            Err(e) => Err(StoreError::io(&root, e)),
        }
    }

    /// `explicit` if given, else `$WSM_STORE_DIR`.
    pub fn resolve_root(explicit: Option<&Path>) -> Option<PathBuf> {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(STORE_ENV).map(PathBuf::from))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn checkpoint_name(step: u64) -> String {
        format!("ckpt_{step:010}.wsmt")
    }

    pub fn updates_name(step: u64) -> String {
        format!("updates/upd_{step:010}.wsmt")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn load_manifest(&self) -> Result<TrajectoryManifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(TrajectoryManifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
        let manifest: TrajectoryManifest = serde_json::from_str(&text)
            .map_err(|e| StoreError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Replaces `trajectory.json` atomically.
    pub fn save_manifest(&self, manifest: &TrajectoryManifest) -> Result<()> {
        manifest.validate()?;
        let path = self.manifest_path();
        let scratch = scratch_path(&path);
        let mut text = serde_json::to_string_pretty(manifest)
            .map_err(|e| StoreError::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(&scratch, text).map_err(|e| StoreError::io(&scratch, e))?;
        fs::rename(&scratch, &path).map_err(|e| StoreError::io(&path, e))
    }

    pub fn write(&self, relative: &str, tensors: &TensorMap, metadata: &ArchiveMetadata) -> Result<PathBuf> {
        let path = self.resolve(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
        }
        write_archive(path, tensors, metadata)
    }

    pub fn open_entry(&self, entry: &ManifestEntry) -> Result<CheckpointArchive> {
        read_archive(self.resolve(&entry.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("w".into(), Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
        m
    }

    #[test]
    fn two_by_two_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wsmt");
        let meta = ArchiveMetadata::new(0, 0, "x");
        write_archive(&path, &two_by_two(), &meta).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert_eq!(bytes.len() as u64, 16 + header_len + 32);
        assert_eq!(&bytes[0..4], b"WSMT");
        let archive = read_archive(&path).unwrap();
        assert_eq!(archive.read_all().unwrap(), two_by_two());
        assert_eq!(archive.metadata(), &meta);
        // Rewriting the same content yields the same bytes elsewhere.
        let again = dir.path().join("b.wsmt");
        write_archive(&again, &archive.read_all().unwrap(), archive.metadata()).unwrap();
        assert_eq!(fs::read(&again).unwrap(), bytes);
    }

    #[test]
    fn never_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wsmt");
        write_archive(&path, &two_by_two(), &ArchiveMetadata::default()).unwrap();
        let err = write_archive(&path, &two_by_two(), &ArchiveMetadata::default()).unwrap_err();
        assert!(matches!(err, StoreError::AlreadyExists { .. }));
    }

    #[test]
    fn empty_map_rejected_empty_shape_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_archive(dir.path().join("e.wsmt"), &TensorMap::new(), &ArchiveMetadata::default())
            .unwrap_err();
        assert!(matches!(err, StoreError::Invalid(_)));
        let mut m = TensorMap::new();
        m.insert("a".into(), Tensor::new::<f32>(vec![0], vec![]).unwrap());
        let path = write_archive(dir.path().join("z.wsmt"), &m, &ArchiveMetadata::default()).unwrap();
        let archive = read_archive(path).unwrap();
        assert_eq!(archive.tensors()["a"].nbytes, 0);
        assert_eq!(archive.read_all().unwrap(), m);
    }

    #[test]
    fn truncation_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wsmt");
        write_archive(&path, &two_by_two(), &ArchiveMetadata::default()).unwrap();
        let bytes = fs::read(&path).unwrap();

        let cut = dir.path().join("cut.wsmt");
        fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        match read_archive(&cut).unwrap_err() {
            StoreError::Truncated { expected, actual, .. } => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 5);
            }
            other => panic!("{other:?}"),
        }

        let mut v2 = bytes.clone();
        v2[4] = 2;
        let p = dir.path().join("v2.wsmt");
        fs::write(&p, v2).unwrap();
        assert!(matches!(
            read_archive(&p).unwrap_err(),
            StoreError::UnsupportedVersion { found: 2, .. }
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let p = dir.path().join("bad.wsmt");
        fs::write(&p, bad).unwrap();
        assert!(matches!(read_archive(&p).unwrap_err(), StoreError::BadMagic { .. }));
    }

    #[test]
    fn overlapping_regions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = layout([("a", DType::F64, &[2][..]), ("b", DType::F64, &[2][..])]).unwrap();
        tensors.get_mut("b").unwrap().offset = 8;
        let header = Header {
            tensors,
            metadata: ArchiveMetadata::default(),
        };
        let json = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&[0u8; 32]);
        let p = dir.path().join("o.wsmt");
        fs::write(&p, bytes).unwrap();
        match read_archive(&p).unwrap_err() {
            StoreError::Format { position, detail, .. } => {
                assert_eq!(position, 16 + json.len() as u64 + 8);
                assert!(detail.contains("overlaps"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ranged_reads_and_incompatibility() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_archive(dir.path().join("a.wsmt"), &two_by_two(), &ArchiveMetadata::default()).unwrap();
        let mut other = TensorMap::new();
        other.insert("w".into(), Tensor::new(vec![4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
        let b = write_archive(dir.path().join("b.wsmt"), &other, &ArchiveMetadata::default()).unwrap();
        let a = read_archive(a).unwrap();
        let mut out = [0.0; 2];
        a.read_f64_range("w", 1, &mut out).unwrap();
        assert_eq!(out, [2.0, 3.0]);
        assert!(a.read_f64_range("w", 3, &mut out).is_err());
        let err = check_compatible(&[a, read_archive(b).unwrap()]).unwrap_err();
        assert!(matches!(err, StoreError::Incompatible { .. }));
    }

    fn manifest(steps: &[u64]) -> TrajectoryManifest {
        TrajectoryManifest {
            entries: steps
                .iter()
                .map(|&s| ManifestEntry {
                    path: Store::checkpoint_name(s),
                    step: s,
                    tokens: s,
                    updates: None,
                })
                .collect(),
            interval_tokens: None,
            records_updates: false,
        }
    }

    #[test]
    fn last_n_windows() {
        let m = manifest(&[100, 200, 300]);
        let w = m.last_n(2).unwrap();
        assert_eq!(w.entries.iter().map(|e| e.step).collect::<Vec<_>>(), [200, 300]);
        assert!(!w.shortfall);
        assert_eq!(m.last_n(1).unwrap().entries[0].step, 300);
        let w = manifest(&[100]).last_n(4).unwrap();
        assert_eq!(w.entries.len(), 1);
        assert!(w.shortfall);
        let w = manifest(&[]).last_n(4).unwrap();
        assert!(w.entries.is_empty() && w.shortfall);
        assert!(m.last_n(0).is_err());
    }

    #[test]
    fn manifest_invariants() {
        let mut m = manifest(&[10, 20]);
        assert!(m.push(ManifestEntry { path: "x".into(), step: 20, tokens: 0, updates: None }).is_err());
        m.interval_tokens = Some(10);
        m.validate().unwrap();
        m.interval_tokens = Some(7);
        assert!(m.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let m = manifest(&[10, 20]);
        store.save_manifest(&m).unwrap();
        assert_eq!(store.load_manifest().unwrap(), m);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(0usize..4, 0..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u64>(), n)
                    .prop_map({
                        let shape = shape.clone();
                        move |bits| Tensor::new(shape.clone(), bits.into_iter().map(f64::from_bits).collect()).unwrap()
                    }),
                prop::collection::vec(any::<u32>(), n)
                    .prop_map(move |bits| Tensor::new(shape.clone(), bits.into_iter().map(f32::from_bits).collect()).unwrap()),
            ]
        })
    }

    fn bits(t: &TensorMap) -> Vec<(String, Vec<usize>, Vec<u64>)> {
        t.iter()
            .map(|(n, t)| {
                let b = match t.data() {
                    TensorData::F32(v) => v.iter().map(|x| u64::from(x.to_bits())).collect(),
                    TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
                };
                (n.clone(), t.shape().to_vec(), b)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn bit_exact_round_trip(map in prop::collection::btree_map("[a-z/._]{1,12}", arb_tensor(), 1..6), step in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.wsmt");
            let meta = ArchiveMetadata::new(step, step / 2, "fuzz");
            write_archive(&path, &map, &meta).unwrap();
            let back = read_archive(&path).unwrap();
            prop_assert_eq!(back.metadata(), &meta);
            prop_assert_eq!(bits(&back.read_all().unwrap()), bits(&map));
        }
    }
}
