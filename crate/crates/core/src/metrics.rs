//! Panoptic Quality evaluation at word, line and paragraph level.
//!
//! A prediction and a ground truth form a true positive when their IoU exceeds
//! 0.5. When overlapping submissions make several such pairings possible the
//! pairs are chosen by maximum summed IoU. Tallies are pooled over all images
//! before the ratios are formed:
//!
//! ```text
//! PQ = sum(IoU over TP) / (TP + FP/2 + FN/2) = F1 * tightness
//! ```

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{self, GroundTruthSet, HierAnnotation, Level, RasterGrid};
use crate::assignment;
use crate::decoder::{Entity, EntitySet, ImagePredictions, PredictionFile};
use crate::disjoint_set::DisjointSet;
use crate::geometry::{self, BitMask, GeometryError};

/// A pair counts as a true positive only above this IoU.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("predictions reference unknown image ids: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
    #[error("image `{0}` appears more than once in the predictions")]
    DuplicateImage(String),
    #[error("image `{image_id}` entity {id} has no cluster id (required at paragraph level)")]
    MissingCluster { image_id: String, id: usize },
    #[error("image `{image_id}`: prediction masks are {found:?} but ground truth is rasterized at {expected:?}")]
    Resolution {
        image_id: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Ground-truth mask with its don't-care flag.
#[derive(Debug, Clone, PartialEq)]
pub struct GtMask {
    pub mask: BitMask,
    pub dont_care: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPair {
    pub pred_index: usize,
    pub gt_index: usize,
    pub iou: f64,
}

/// TP/FP/FN counts and summed TP IoU; adds associatively.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl std::ops::Add for Tally {
    type Output = Tally;
    fn add(self, o: Tally) -> Tally {
        Tally {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            iou_sum: self.iou_sum + o.iou_sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEvaluation {
    pub tally: Tally,
    /// True-positive pairs ordered by ground-truth index.
    pub pairs: Vec<EvalPair>,
    /// Unmatched predictions absorbed by don't-care regions.
    pub ignored: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub level: Level,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tightness: f64,
    pub pq: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl EvalReport {
    pub fn from_tally(level: Level, t: Tally) -> Self {
        let (tp, fp, fn_) = (t.tp as f64, t.fp as f64, t.fn_ as f64);
        Self {
            level,
            tp: t.tp,
            fp: t.fp,
            fn_: t.fn_,
            iou_sum: t.iou_sum,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            tightness: ratio(t.iou_sum, tp),
            pq: ratio(t.iou_sum, tp + fp / 2.0 + fn_ / 2.0),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn bbox_overlap(a: Option<(usize, usize, usize, usize)>, b: Option<(usize, usize, usize, usize)>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3,
        _ => false,
    }
}

/// Evaluates one image. Masks must all share the same dimensions.
pub fn evaluate_image(preds: &[BitMask], gts: &[GtMask]) -> Result<ImageEvaluation> {
    let pred_boxes: Vec<_> = preds.iter().map(BitMask::bbox).collect();
    let gt_boxes: Vec<_> = gts.iter().map(|g| g.mask.bbox()).collect();
    if let Some(first) = preds.first().or(gts.first().map(|g| &g.mask)) {
        for m in preds.iter().chain(gts.iter().map(|g| &g.mask)) {
            if m.dims() != first.dims() {
                return Err(GeometryError::DimensionMismatch {
                    left: first.dims(),
                    right: m.dims(),
                }
                .into());
            }
        }
    }

    let mut edges = Vec::new();
    for (p, pm) in preds.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            if gt.dont_care || !bbox_overlap(pred_boxes[p], gt_boxes[g]) {
                continue;
            }
            let v = geometry::iou(pm, &gt.mask)?;
            if v > MATCH_IOU {
                edges.push((p, g, v));
            }
        }
    }

    let pairs = select_pairs(preds.len(), gts.len(), &edges);
    let mut pred_matched = vec![false; preds.len()];
    let mut gt_matched = vec![false; gts.len()];
    for pair in &pairs {
        pred_matched[pair.pred_index] = true;
        gt_matched[pair.gt_index] = true;
    }

    let mut ignored = Vec::new();
    let mut fp = 0;
    for (p, pm) in preds.iter().enumerate() {
        if pred_matched[p] {
            continue;
        }
        let mut absorbed = false;
        for (g, gt) in gts.iter().enumerate() {
            if gt.dont_care
                && bbox_overlap(pred_boxes[p], gt_boxes[g])
                && geometry::iou(pm, &gt.mask)? > MATCH_IOU
            {
                absorbed = true;
                break;
            }
        }
        if absorbed {
            ignored.push(p);
        } else {
            fp += 1;
        }
    }
    let fn_ = gts
        .iter()
        .zip(&gt_matched)
        .filter(|(g, &m)| !g.dont_care && !m)
        .count() as u64;

    Ok(ImageEvaluation {
        tally: Tally {
            tp: pairs.len() as u64,
            fp,
            fn_,
            iou_sum: pairs.iter().map(|p| p.iou).sum(),
        },
        pairs,
        ignored,
    })
}

/// Maximum-IoU matching over the candidate edges, solved per connected
/// component; isolated edges are taken directly.
fn select_pairs(n_pred: usize, n_gt: usize, edges: &[(usize, usize, f64)]) -> Vec<EvalPair> {
    let mut ds = DisjointSet::new(n_pred + n_gt);
    for &(p, g, _) in edges {
        ds.union(p, n_pred + g);
    }
    let mut components: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for &e in edges {
        components.entry(ds.find(e.0)).or_default().push(e);
    }

    let mut pairs = Vec::new();
    for comp in components.values() {
        if comp.len() == 1 {
            let (p, g, iou) = comp[0];
            pairs.push(EvalPair {
                pred_index: p,
                gt_index: g,
                iou,
            });
            continue;
        }
        let mut rows: Vec<usize> = comp.iter().map(|e| e.0).collect();
        let mut cols: Vec<usize> = comp.iter().map(|e| e.1).collect();
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        let k = rows.len().max(cols.len());
        let mut w = vec![0.0; k * k];
        for &(p, g, iou) in comp {
            let r = rows.binary_search(&p).unwrap();
            let c = cols.binary_search(&g).unwrap();
            w[r * k + c] = iou;
        }
        let sigma = assignment::maximize(&w, k);
        for (r, &c) in sigma.iter().enumerate() {
            if r < rows.len() && c < cols.len() && w[r * k + c] > MATCH_IOU {
                pairs.push(EvalPair {
                    pred_index: rows[r],
                    gt_index: cols[c],
                    iou: w[r * k + c],
                });
            }
        }
    }
    pairs.sort_by_key(|p| p.gt_index);
    pairs
}

/// Resolution at which ground truth is rasterized for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resolution {
    #[default]
    Full,
    /// Integer downsampling factor, e.g. 4 for model output resolution.
    Downsampled(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    /// Treat illegible entities as ordinary targets instead of don't-care.
    pub include_illegible: bool,
    pub resolution: Resolution,
}

impl EvalOptions {
    pub fn grid(&self, a: &HierAnnotation) -> RasterGrid {
        match self.resolution {
            Resolution::Full => RasterGrid::full(a),
            Resolution::Downsampled(f) => RasterGrid::downsampled(a, f),
        }
    }
}

/// Ground-truth masks for one image at `level`, with don't-care flags.
pub fn ground_truth_masks(a: &HierAnnotation, level: Level, opts: &EvalOptions) -> Result<Vec<GtMask>> {
    let entities = annotation::derive_entities(a, level, opts.grid(a))?;
    Ok(entities
        .into_iter()
        .filter_map(|e| {
            if e.mask.is_empty() {
                if e.legible {
                    log::warn!("{}: {} {} rasterizes to zero pixels, dropped", a.image_id, level, e.index);
                }
                return None;
            }
            Some(GtMask {
                mask: e.mask,
                dont_care: !e.legible && !opts.include_illegible,
            })
        })
        .collect())
}

/// Prediction masks at `level`: entities as-is, or unions per cluster for
/// paragraphs (clusters in ascending label order).
pub fn prediction_masks(image_id: &str, entities: &[Entity], level: Level) -> Result<Vec<BitMask>> {
    if level != Level::Paragraph {
        return Ok(entities.iter().map(|e| e.mask.clone()).collect());
    }
    let mut groups: BTreeMap<usize, BitMask> = BTreeMap::new();
    for e in entities {
        let c = e.cluster.ok_or_else(|| MetricsError::MissingCluster {
            image_id: image_id.to_string(),
            id: e.id,
        })?;
        match groups.get_mut(&c) {
            Some(m) => m.union_with(&e.mask)?,
            None => {
                groups.insert(c, e.mask.clone());
            }
        }
    }
    Ok(groups.into_values().collect())
}

/// Pooled evaluation over a dataset. Images without predictions count all of
/// their ground truth as missed.
pub fn evaluate_dataset(
    preds: &PredictionFile,
    gts: &GroundTruthSet,
    level: Level,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &ImagePredictions> = HashMap::new();
    for p in &preds.predictions {
        if by_id.insert(p.image_id.as_str(), p).is_some() {
            return Err(MetricsError::DuplicateImage(p.image_id.clone()));
        }
    }
    let mut unknown: Vec<String> = preds
        .predictions
        .iter()
        .filter(|p| gts.get(&p.image_id).is_none())
        .map(|p| p.image_id.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(MetricsError::UnknownImages(unknown));
    }

    let tallies: Vec<Tally> = gts
        .annotations
        .par_iter()
        .map(|a| {
            let gt = ground_truth_masks(a, level, opts)?;
            let grid = opts.grid(a);
            let pred = match by_id.get(a.image_id.as_str()) {
                Some(p) => prediction_masks(&a.image_id, &p.entities.entities, level)?,
                None => Vec::new(),
            };
            if let Some(m) = pred.iter().find(|m| m.dims() != (grid.width, grid.height)) {
                return Err(MetricsError::Resolution {
                    image_id: a.image_id.clone(),
                    found: m.dims(),
                    expected: (grid.width, grid.height),
                });
            }
            Ok(evaluate_image(&pred, &gt)?.tally)
        })
        .collect::<Result<_>>()?;
    // Sequential reduction keeps the float sum independent of scheduling.
    let total = tallies.into_iter().fold(Tally::default(), |acc, t| acc + t);
    Ok(EvalReport::from_tally(level, total))
}

/// Ground truth recast as predictions at `level`: every non-empty entity
/// becomes a prediction with score 1 and its paragraph as cluster.
pub fn predictions_from_ground_truth(gts: &GroundTruthSet, level: Level, opts: &EvalOptions) -> Result<PredictionFile> {
    let mut predictions = Vec::with_capacity(gts.annotations.len());
    for a in &gts.annotations {
        let entities = annotation::derive_entities(a, level, opts.grid(a))?
            .into_iter()
            .filter(|e| !e.mask.is_empty())
            .map(|e| Entity {
                id: e.index,
                mask: e.mask,
                score: 1.0,
                cluster: Some(e.cluster),
            })
            .collect();
        predictions.push(ImagePredictions {
            image_id: a.image_id.clone(),
            entities: EntitySet { entities },
        });
    }
    Ok(PredictionFile { predictions })
}
