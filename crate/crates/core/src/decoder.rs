//! Inference post-processing.
//!
//! Raw query outputs (soft masks, textness, pairwise affinity) become a set of
//! disjoint entity masks grouped into paragraph clusters:
//!
//! 1. every pixel goes to its argmax query if that query's probability there
//!    exceeds `t_m` (ties to the lowest index);
//! 2. queries with fewer than `min_pixels` pixels or textness below `t_c` are
//!    dropped together with their pixels;
//! 3. surviving queries with affinity above `t_a` are linked and the connected
//!    components become clusters, labelled by their smallest query id.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disjoint_set::DisjointSet;
use crate::geometry::{self, BitMask, GeometryError, RleMask};

/// Tolerance on the per-pixel sum of query probabilities.
pub const SOFTMAX_SUM_TOLERANCE: f64 = 1e-5;
/// Tolerance on `|A[i,j] - A[j,i]|` before an affinity matrix is reported as asymmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("{tensor} has {len} values, expected {expected}")]
    Shape {
        tensor: &'static str,
        len: usize,
        expected: usize,
    },
    #[error("{tensor}[{index}] = {value} is outside [0, 1]")]
    OutOfRange {
        tensor: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{tensor}[{index}] is not finite")]
    NonFinite { tensor: &'static str, index: usize },
    #[error("query probabilities at pixel ({x}, {y}) sum to {sum}, expected 1")]
    SoftmaxSum { x: usize, y: usize, sum: f64 },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("entity id {id} is outside the {n} queries")]
    IndexOutOfRange { id: usize, n: usize },
    #[error("decode parameter {name} = {value} is invalid")]
    Param { name: &'static str, value: f64 },
    #[error("entity {id} has no cluster id")]
    MissingCluster { id: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// Thresholds applied during decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    /// Minimum pixel confidence (strict).
    pub t_m: f64,
    /// Minimum textness.
    pub t_c: f64,
    /// Affinity above which two entities are linked (strict).
    pub t_a: f64,
    /// Minimum mask area in pixels at tensor resolution.
    pub min_pixels: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            t_m: 0.4,
            t_c: 0.5,
            t_a: 0.5,
            min_pixels: 32,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("t_m", self.t_m), ("t_c", self.t_c), ("t_a", self.t_a)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DecodeError::Param { name, value });
            }
        }
        Ok(())
    }
}

/// Layout branch output: either the affinity matrix itself or normalized
/// per-query features from which it is computed.
#[derive(Debug, Clone, PartialEq)]
pub enum LayoutOutput {
    Affinity(Vec<f64>),
    Embeddings {
        features: Vec<f64>,
        channels: usize,
        tau: f64,
    },
}

/// Raw outputs of the `N` object queries at `width x height` resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTensors {
    n: usize,
    width: usize,
    height: usize,
    /// Query-major `N x H x W`.
    masks: Vec<f64>,
    textness: Vec<f64>,
    layout: LayoutOutput,
}

fn check_unit_range(tensor: &'static str, values: &[f64]) -> Result<()> {
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(DecodeError::NonFinite { tensor, index });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(DecodeError::OutOfRange {
                tensor,
                index,
                value,
            });
        }
    }
    Ok(())
}

fn check_len(tensor: &'static str, len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(DecodeError::Shape {
            tensor,
            len,
            expected,
        });
    }
    Ok(())
}

impl DetectionTensors {
    pub fn new(
        n: usize,
        width: usize,
        height: usize,
        masks: Vec<f64>,
        textness: Vec<f64>,
        layout: LayoutOutput,
    ) -> Result<Self> {
        check_len("masks", masks.len(), n * width * height)?;
        check_len("textness", textness.len(), n)?;
        check_unit_range("masks", &masks)?;
        check_unit_range("textness", &textness)?;
        let plane = width * height;
        if n > 0 {
            for p in 0..plane {
                let sum: f64 = (0..n).map(|i| masks[i * plane + p]).sum();
                if (sum - 1.0).abs() > SOFTMAX_SUM_TOLERANCE {
                    return Err(DecodeError::SoftmaxSum {
                        x: p % width,
                        y: p / width,
                        sum,
                    });
                }
            }
        }
        match &layout {
            LayoutOutput::Affinity(a) => {
                check_len("affinity", a.len(), n * n)?;
                check_unit_range("affinity", a)?;
                let asym = (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .map(|(i, j)| (a[i * n + j] - a[j * n + i]).abs())
                    .fold(0.0, f64::max);
                if asym > SYMMETRY_TOLERANCE {
                    log::warn!("affinity matrix is asymmetric by {asym}; linking uses max(A[i,j], A[j,i])");
                }
            }
            LayoutOutput::Embeddings {
                features,
                channels,
                tau,
            } => {
                check_len("embeddings", features.len(), n * channels)?;
                if !(*tau > 0.0) {
                    return Err(DecodeError::Temperature(*tau));
                }
            }
        }
        Ok(Self {
            n,
            width,
            height,
            masks,
            textness,
            layout,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn masks(&self) -> &[f64] {
        &self.masks
    }

    /// Soft mask plane of query `i`.
    pub fn mask(&self, i: usize) -> &[f64] {
        let plane = self.width * self.height;
        &self.masks[i * plane..(i + 1) * plane]
    }

    pub fn textness(&self) -> &[f64] {
        &self.textness
    }

    pub fn layout(&self) -> &LayoutOutput {
        &self.layout
    }

    /// The `N x N` affinity matrix, computing it from embeddings if needed.
    pub fn affinity(&self) -> Result<Vec<f64>> {
        match &self.layout {
            LayoutOutput::Affinity(a) => Ok(a.clone()),
            LayoutOutput::Embeddings {
                features,
                channels,
                tau,
            } => affinity_head(features, self.n, *channels, *tau),
        }
    }
}

/// Per-pixel softmax over queries of `f . g`, with `f` as `N x D` and `g` as
/// `D x H x W` (both row-major). Returns `N x H x W`.
pub fn mask_head(
    f: &[f64],
    n: usize,
    d: usize,
    g: &[f64],
    width: usize,
    height: usize,
) -> Result<Vec<f64>> {
    let plane = width * height;
    check_len("query features", f.len(), n * d)?;
    check_len("pixel features", g.len(), d * plane)?;
    if let Some(index) = f.iter().position(|v| !v.is_finite()) {
        return Err(DecodeError::NonFinite {
            tensor: "query features",
            index,
        });
    }
    if let Some(index) = g.iter().position(|v| !v.is_finite()) {
        return Err(DecodeError::NonFinite {
            tensor: "pixel features",
            index,
        });
    }
    let mut out = vec![0.0; n * plane];
    let mut logits = vec![0.0; n];
    for p in 0..plane {
        for (i, logit) in logits.iter_mut().enumerate() {
            *logit = (0..d).map(|k| f[i * d + k] * g[k * plane + p]).sum();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (i, &l) in logits.iter().enumerate() {
            let e = (l - max).exp();
            out[i * plane + p] = e;
            total += e;
        }
        for i in 0..n {
            out[i * plane + p] /= total;
        }
    }
    Ok(out)
}

/// `A[i, j] = sigmoid(h_i . h_j / tau)` for `N x C` features `h`.
pub fn affinity_head(h: &[f64], n: usize, channels: usize, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(DecodeError::Temperature(tau));
    }
    check_len("embeddings", h.len(), n * channels)?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = (0..channels)
                .map(|k| h[i * channels + k] * h[j * channels + k])
                .sum();
            let a = 1.0 / (1.0 + (-dot / tau).exp());
            out[i * n + j] = a;
            out[j * n + i] = a;
        }
    }
    Ok(out)
}

/// Scales each row to unit L2 norm; zero rows are left untouched.
pub fn normalize_rows(h: &mut [f64], channels: usize) {
    for row in h.chunks_mut(channels) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// A decoded text entity. `id` is the originating query index.
#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: usize,
    pub mask: BitMask,
    pub score: f64,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntitySet {
    pub entities: Vec<Entity>,
}

impl EntitySet {
    /// Nearest-neighbour upsampling of every mask, optionally cropped.
    pub fn upsampled(&self, factor: usize, crop: Option<(usize, usize)>) -> Self {
        Self {
            entities: self
                .entities
                .iter()
                .map(|e| Entity {
                    mask: e.mask.upsample(factor, crop),
                    ..e.clone()
                })
                .collect(),
        }
    }

    /// Entity ids grouped by cluster label, groups and members ascending.
    pub fn partition(&self) -> Result<Vec<Vec<usize>>> {
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for e in &self.entities {
            let c = e.cluster.ok_or(DecodeError::MissingCluster { id: e.id })?;
            groups.entry(c).or_default().push(e.id);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        for g in &mut out {
            g.sort_unstable();
        }
        out.sort();
        Ok(out)
    }
}

/// Pixel assignment and textness/area filtering; clusters are left unset.
pub fn decode_masks(t: &DetectionTensors, p: &DecodeParams) -> Result<EntitySet> {
    p.validate()?;
    let (width, height) = t.dims();
    let plane = width * height;
    let n = t.n();
    let mut owner = vec![usize::MAX; plane];
    let mut area = vec![0usize; n];
    for (px, slot) in owner.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for i in 0..n {
            let v = t.masks[i * plane + px];
            if v > best_value {
                best = i;
                best_value = v;
            }
        }
        if n > 0 && best_value > p.t_m {
            *slot = best;
            area[best] += 1;
        }
    }

    let keep: Vec<bool> = (0..n)
        .map(|i| area[i] > 0 && area[i] >= p.min_pixels && t.textness[i] >= p.t_c)
        .collect();
    let mut masks: Vec<Option<BitMask>> = keep
        .iter()
        .map(|&k| k.then(|| BitMask::new(width, height)))
        .collect();
    for (px, &o) in owner.iter().enumerate() {
        if o != usize::MAX {
            if let Some(m) = masks[o].as_mut() {
                m.set(px % width, px / width, true);
            }
        }
    }
    Ok(EntitySet {
        entities: masks
            .into_iter()
            .enumerate()
            .filter_map(|(id, m)| {
                m.map(|mask| Entity {
                    id,
                    mask,
                    score: t.textness[id],
                    cluster: None,
                })
            })
            .collect(),
    })
}

/// Links surviving entities whose affinity exceeds `t_a` and labels each
/// connected component by its smallest entity id.
pub fn cluster_entities(mut entities: EntitySet, affinity: &[f64], n: usize, t_a: f64) -> Result<EntitySet> {
    check_len("affinity", affinity.len(), n * n)?;
    if let Some(e) = entities.entities.iter().find(|e| e.id >= n) {
        return Err(DecodeError::IndexOutOfRange { id: e.id, n });
    }
    let ids: Vec<usize> = entities.entities.iter().map(|e| e.id).collect();
    let mut ds = DisjointSet::new(ids.len());
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            let (i, j) = (ids[a], ids[b]);
            if affinity[i * n + j].max(affinity[j * n + i]) > t_a {
                ds.union(a, b);
            }
        }
    }
    let mut smallest = vec![usize::MAX; ids.len()];
    for (a, &id) in ids.iter().enumerate() {
        let r = ds.find(a);
        smallest[r] = smallest[r].min(id);
    }
    for (a, e) in entities.entities.iter_mut().enumerate() {
        e.cluster = Some(smallest[ds.find(a)]);
    }
    Ok(entities)
}

pub fn decode(t: &DetectionTensors, p: &DecodeParams) -> Result<EntitySet> {
    let entities = decode_masks(t, p)?;
    let affinity = t.affinity()?;
    cluster_entities(entities, &affinity, t.n(), p.t_a)
}

/// Predictions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePredictions {
    pub image_id: String,
    pub entities: EntitySet,
}

/// Prediction file: every image's decoded entities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionFile {
    pub predictions: Vec<ImagePredictions>,
}

#[derive(Debug, Error)]
pub enum PredictionFileError {
    #[error("malformed prediction JSON at {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid mask for image `{image_id}` entity {id}: {source}")]
    Mask {
        image_id: String,
        id: usize,
        source: GeometryError,
    },
}

#[derive(Serialize, Deserialize)]
struct RawFile {
    predictions: Vec<RawImage>,
}

#[derive(Serialize, Deserialize)]
struct RawImage {
    image_id: String,
    entities: Vec<RawEntity>,
}

#[derive(Serialize, Deserialize)]
struct RawEntity {
    id: usize,
    mask: RleMask,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster: Option<usize>,
}

impl PredictionFile {
    /// Images ordered by id, entities by query id.
    pub fn canonicalize(&mut self) {
        self.predictions.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        for p in &mut self.predictions {
            p.entities.entities.sort_by_key(|e| e.id);
        }
    }

    pub fn to_json(&self) -> String {
        let raw = RawFile {
            predictions: self
                .predictions
                .iter()
                .map(|p| RawImage {
                    image_id: p.image_id.clone(),
                    entities: p
                        .entities
                        .entities
                        .iter()
                        .map(|e| RawEntity {
                            id: e.id,
                            mask: geometry::rle_encode(&e.mask),
                            score: e.score,
                            cluster: e.cluster,
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("predictions serialize")
    }

    pub fn from_json(bytes: &[u8]) -> std::result::Result<Self, PredictionFileError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let raw: RawFile = serde_path_to_error::deserialize(de).map_err(|e| PredictionFileError::Json {
            path: e.path().to_string(),
            source: e.into_inner(),
        })?;
        let mut predictions = Vec::with_capacity(raw.predictions.len());
        for img in raw.predictions {
            let mut entities = Vec::with_capacity(img.entities.len());
            for e in img.entities {
                let mask = geometry::rle_decode(&e.mask).map_err(|source| PredictionFileError::Mask {
                    image_id: img.image_id.clone(),
                    id: e.id,
                    source,
                })?;
                entities.push(Entity {
                    id: e.id,
                    mask,
                    score: e.score,
                    cluster: e.cluster,
                });
            }
            predictions.push(ImagePredictions {
                image_id: img.image_id,
                entities: EntitySet { entities },
            });
        }
        Ok(Self { predictions })
    }
}
