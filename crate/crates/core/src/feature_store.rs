//! `.fmap` tensor container.
//!
//! Layout:
//!
//! ```text
//! offset 0   magic      b"FMAP\0\x01"                 (6 bytes)
//! offset 6   u64 LE     manifest length in bytes     (8 bytes)
//! offset 14  manifest   UTF-8 JSON                   (manifest length bytes)
//! ...        blobs      little-endian f32, row-major
//! ```
//!
//! Entry `byte_offset`s are relative to the first byte after the manifest, so
//! the absolute position of an entry is `14 + manifest_len + byte_offset`.
//! The writer lays blobs out back to back in input order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{check_shape, ShapeError, Tensor};

pub const MAGIC: [u8; 6] = *b"FMAP\0\x01";
pub const FORMAT_VERSION: u32 = 1;
/// Magic plus the manifest length prefix.
pub const HEADER_LEN: usize = MAGIC.len() + 8;

/// Free-form container metadata (layer order, labels, sample count, ...).
pub type Metadata = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: Metadata,
}

#[derive(Debug, thiserror::Error)]
pub enum FmapError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected FMAP\\0\\x01, found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("file too short for header ({len} bytes)")]
    ShortHeader { len: usize },
    #[error("manifest length {declared} exceeds remaining {available} bytes")]
    ManifestTruncated { declared: u64, available: usize },
    #[error("manifest is not valid JSON: {0}")]
    ManifestParse(#[from] serde_json::Error),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("entry `{name}`: {source}")]
    Shape {
        name: String,
        #[source]
        source: ShapeError,
    },
    #[error("entry `{name}`: byte_length {actual} does not match 4 x product(shape) = {expected}")]
    ByteLength { name: String, expected: u64, actual: u64 },
    #[error("entry `{name}`: byte range ends at {end} but blob region holds {available} bytes (truncated)")]
    OutOfBounds { name: String, end: u64, available: u64 },
    #[error("entries `{first}` and `{second}` have overlapping byte ranges")]
    Overlap { first: String, second: String },
    #[error("blob region is {actual} bytes but manifest covers {expected}")]
    TrailingBytes { expected: u64, actual: u64 },
}

impl FmapError {
    fn io(path: &Path, source: io::Error) -> Self {
        FmapError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Serializes tensors and metadata into `.fmap` bytes.
pub fn encode(tensors: &[Tensor], metadata: &Metadata) -> Result<Vec<u8>, FmapError> {
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        if !seen.insert(t.name()) {
            return Err(FmapError::DuplicateName(t.name().to_string()));
        }
        let byte_length = 4 * t.len() as u64;
        entries.push(ManifestEntry {
            name: t.name().to_string(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
            byte_length,
        });
        offset += byte_length;
    }
    let manifest = ContainerManifest {
        format_version: FORMAT_VERSION,
        entries,
        metadata: metadata.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(HEADER_LEN + manifest_bytes.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates the header and manifest. Returns the manifest and
/// the absolute offset at which the blob region starts.
pub fn decode_manifest(bytes: &[u8]) -> Result<(ContainerManifest, usize), FmapError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(FmapError::BadMagic {
            found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FmapError::ShortHeader { len: bytes.len() });
    }
    let declared = u64::from_le_bytes(bytes[MAGIC.len()..HEADER_LEN].try_into().unwrap());
    let available = bytes.len() - HEADER_LEN;
    if declared > available as u64 {
        return Err(FmapError::ManifestTruncated { declared, available });
    }
    let blob_start = HEADER_LEN + declared as usize;
    let manifest: ContainerManifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])?;
    validate_manifest(&manifest, (bytes.len() - blob_start) as u64)?;
    Ok((manifest, blob_start))
}

/// Checks every manifest invariant against a blob region of `blob_len` bytes.
pub fn validate_manifest(manifest: &ContainerManifest, blob_len: u64) -> Result<(), FmapError> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(FmapError::UnsupportedVersion(manifest.format_version));
    }
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(FmapError::DuplicateName(e.name.clone()));
        }
        check_shape(&e.name, &e.shape).map_err(|source| FmapError::Shape {
            name: e.name.clone(),
            source,
        })?;
        let expected = 4 * e.shape.iter().map(|&d| d as u64).product::<u64>();
        if e.byte_length != expected {
            return Err(FmapError::ByteLength {
                name: e.name.clone(),
                expected,
                actual: e.byte_length,
            });
        }
        let end = e.byte_offset.saturating_add(e.byte_length);
        if end > blob_len {
            return Err(FmapError::OutOfBounds {
                name: e.name.clone(),
                end,
                available: blob_len,
            });
        }
    }

    let mut ranges: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    ranges.sort_by_key(|e| (e.byte_offset, e.byte_length));
    for pair in ranges.windows(2) {
        if pair[0].byte_offset + pair[0].byte_length > pair[1].byte_offset {
            return Err(FmapError::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    let covered = ranges.last().map_or(0, |e| e.byte_offset + e.byte_length);
    if covered != blob_len {
        return Err(FmapError::TrailingBytes {
            expected: covered,
            actual: blob_len,
        });
    }
    Ok(())
}

/// Inverse of [`encode`]. Nothing is returned unless the whole manifest validates.
pub fn decode(bytes: &[u8]) -> Result<(Vec<Tensor>, Metadata), FmapError> {
    let (manifest, blob_start) = decode_manifest(bytes)?;
    let blobs = &bytes[blob_start..];
    let tensors = manifest
        .entries
        .into_iter()
        .map(|e| {
            let start = e.byte_offset as usize;
            let raw = &blobs[start..start + e.byte_length as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(e.name.clone(), e.shape, data).map_err(|source| FmapError::Shape {
                name: e.name,
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((tensors, manifest.metadata))
}

pub fn write_container(tensors: &[Tensor], metadata: &Metadata, path: impl AsRef<Path>) -> Result<(), FmapError> {
    let path = path.as_ref();
    let bytes = encode(tensors, metadata)?;
    fs::write(path, bytes).map_err(|e| FmapError::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<(Vec<Tensor>, Metadata), FmapError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FmapError::io(path, e))?;
    decode(&bytes)
}

/// Looks up a tensor by name.
pub fn find<'a>(tensors: &'a [Tensor], name: &str) -> Option<&'a Tensor> {
    tensors.iter().find(|t| t.name() == name)
}
