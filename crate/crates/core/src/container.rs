//! Binary tensor files and the per-image manifest that groups them.
//!
//! A tensor file is the 4-byte magic `UDT1`, a little-endian `u32` header
//! length, a UTF-8 JSON header `{"dtype":"f32","shape":[...],"order":"row-major"}`
//! and the little-endian `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{DecodeError, DetectionTensors, LayoutOutput};

pub const MAGIC: &[u8; 4] = b"UDT1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"UDT1\"")]
    BadMagic(Vec<u8>),
    #[error("file ends after {found} bytes, expected at least {needed}")]
    Truncated { needed: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("unsupported order {0:?}")]
    UnsupportedOrder(String),
    #[error("shape {0:?} overflows")]
    ShapeOverflow(Vec<usize>),
    #[error("payload has {found} bytes, shape requires {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error("shape {shape:?} holds {expected} values, got {found}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, FormatError> {
        let expected = element_count(&shape).ok_or_else(|| FormatError::ShapeOverflow(shape.clone()))?;
        if expected != data.len() {
            return Err(FormatError::DataLength {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Narrows each value to `f32`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, FormatError> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    order: String,
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        dtype: "f32".into(),
        shape: t.shape.clone(),
        order: "row-major".into(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let need = |needed: usize| {
        if bytes.len() < needed {
            Err(FormatError::Truncated {
                needed,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    need(8)?;
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload_start = 8usize.saturating_add(header_len);
    need(payload_start)?;
    let header: Header =
        serde_json::from_slice(&bytes[8..payload_start]).map_err(|e| FormatError::Header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(FormatError::UnsupportedDtype(header.dtype));
    }
    if header.order != "row-major" {
        return Err(FormatError::UnsupportedOrder(header.order));
    }
    let count = element_count(&header.shape)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| FormatError::ShapeOverflow(header.shape.clone()))?;
    let payload = &bytes[payload_start..];
    if payload.len() != count {
        return Err(FormatError::PayloadLength {
            expected: count,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor {
        shape: header.shape,
        data,
    })
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("{}: shape {shape:?} does not fit {tensor} ({expected})", path.display())]
    Shape {
        path: PathBuf,
        tensor: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    #[error("image {image_id}: {source}")]
    Tensors {
        image_id: String,
        #[source]
        source: DecodeError,
    },
}

impl LoadError {
    /// I/O failures as opposed to malformed content.
    pub fn is_io(&self) -> bool {
        matches!(self, LoadError::Io { .. })
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor, LoadError> {
    let bytes = fs::read(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes).map_err(|source| LoadError::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), LoadError> {
    fs::write(path, encode(t)).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One image in a manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    /// `N x H x W` soft masks.
    pub masks: String,
    /// `N` textness probabilities.
    pub textness: String,
    /// `N x N` affinity matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affinity: Option<String>,
    /// `N x C` normalized layout features, used with `tau` when no affinity
    /// file is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Original image size, for cropping upsampled masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_height: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestImage {
    pub image_id: String,
    pub tensors: DetectionTensors,
    pub image_size: Option<(usize, usize)>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest, LoadError> {
    let bytes = fs::read(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| LoadError::Manifest {
        path: path.to_path_buf(),
        message: format!("at {}: {}", e.path(), e.inner()),
    })
}

fn shaped(path: &Path, tensor: &'static str, t: &Tensor, expected: &[Option<usize>]) -> Result<(), LoadError> {
    let ok = t.shape.len() == expected.len() && t.shape.iter().zip(expected).all(|(&d, e)| e.is_none_or(|e| e == d));
    if ok {
        return Ok(());
    }
    let dims: Vec<String> = expected
        .iter()
        .map(|e| e.map_or_else(|| "*".to_string(), |d| d.to_string()))
        .collect();
    Err(LoadError::Shape {
        path: path.to_path_buf(),
        tensor,
        shape: t.shape.clone(),
        expected: format!("[{}]", dims.join(", ")),
    })
}

/// Reads and validates the tensors of one manifest entry.
pub fn load_entry(base: &Path, e: &ManifestEntry, manifest_path: &Path) -> Result<ManifestImage, LoadError> {
    let masks_path = base.join(&e.masks);
    let masks = read_tensor(&masks_path)?;
    shaped(&masks_path, "masks", &masks, &[None, None, None])?;
    let (n, h, w) = (masks.shape[0], masks.shape[1], masks.shape[2]);

    let textness_path = base.join(&e.textness);
    let textness = read_tensor(&textness_path)?;
    shaped(&textness_path, "textness", &textness, &[Some(n)])?;

    let layout = match (&e.affinity, &e.embeddings) {
        (Some(a), None) => {
            let p = base.join(a);
            let t = read_tensor(&p)?;
            shaped(&p, "affinity", &t, &[Some(n), Some(n)])?;
            LayoutOutput::Affinity(t.to_f64())
        }
        (None, Some(f)) => {
            let p = base.join(f);
            let t = read_tensor(&p)?;
            shaped(&p, "embeddings", &t, &[Some(n), None])?;
            let tau = e.tau.ok_or_else(|| LoadError::Manifest {
                path: manifest_path.to_path_buf(),
                message: format!("image {}: embeddings require tau", e.image_id),
            })?;
            LayoutOutput::Embeddings {
                channels: t.shape[1],
                features: t.to_f64(),
                tau,
            }
        }
        _ => {
            return Err(LoadError::Manifest {
                path: manifest_path.to_path_buf(),
                message: format!("image {}: exactly one of affinity or embeddings is required", e.image_id),
            })
        }
    };
    let tensors = DetectionTensors::new(n, w, h, masks.to_f64(), textness.to_f64(), layout).map_err(|source| {
        LoadError::Tensors {
            image_id: e.image_id.clone(),
            source,
        }
    })?;
    let image_size = match (e.image_width, e.image_height) {
        (Some(w), Some(h)) => Some((w, h)),
        (None, None) => None,
        _ => {
            return Err(LoadError::Manifest {
                path: manifest_path.to_path_buf(),
                message: format!("image {}: image_width and image_height go together", e.image_id),
            })
        }
    };
    Ok(ManifestImage {
        image_id: e.image_id.clone(),
        tensors,
        image_size,
    })
}

/// Loads every image of a manifest, in file order.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestImage>, LoadError> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.images.iter().map(|e| load_entry(base, e, path)).collect()
}

/// Writes tensors as `NNNN_<kind>.udt` files next to `manifest.json` in `dir`.
pub fn write_manifest(dir: &Path, images: &[ManifestImage]) -> Result<PathBuf, LoadError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| LoadError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut entries = Vec::with_capacity(images.len());
    for (k, img) in images.iter().enumerate() {
        let t = &img.tensors;
        let (w, h) = t.dims();
        let n = t.n();
        let shape_err = |source| LoadError::Format {
            path: dir.to_path_buf(),
            source,
        };
        let masks = format!("{k:04}_masks.udt");
        write_tensor(&dir.join(&masks), &Tensor::from_f64(vec![n, h, w], t.masks()).map_err(shape_err)?)?;
        let textness = format!("{k:04}_textness.udt");
        write_tensor(&dir.join(&textness), &Tensor::from_f64(vec![n], t.textness()).map_err(shape_err)?)?;
        let mut entry = ManifestEntry {
            image_id: img.image_id.clone(),
            masks,
            textness,
            affinity: None,
            embeddings: None,
            tau: None,
            image_width: img.image_size.map(|s| s.0),
            image_height: img.image_size.map(|s| s.1),
        };
        match t.layout() {
            LayoutOutput::Affinity(a) => {
                let name = format!("{k:04}_affinity.udt");
                write_tensor(&dir.join(&name), &Tensor::from_f64(vec![n, n], a).map_err(shape_err)?)?;
                entry.affinity = Some(name);
            }
            LayoutOutput::Embeddings {
                features,
                channels,
                tau,
            } => {
                let name = format!("{k:04}_embeddings.udt");
                write_tensor(
                    &dir.join(&name),
                    &Tensor::from_f64(vec![n, *channels], features).map_err(shape_err)?,
                )?;
                entry.embeddings = Some(name);
                entry.tau = Some(*tau);
            }
        }
        entries.push(entry);
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&Manifest { images: entries }).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io(&path))?;
    Ok(path)
}
