//! Training-side bipartite matching between object queries and ground truth.
//!
//! Each prediction is scored against each target by the PQ-style similarity
//! `[p*y + (1-p)(1-y)] * Dice(soft mask, target mask)` and the permutation
//! maximizing the summed similarity is found with [`assignment::maximize`].

use thiserror::Error;

use crate::annotation::{self, HierAnnotation, Level, RasterGrid};
use crate::assignment;
use crate::geometry::{self, BitMask, GeometryError, SoftMask};

/// Largest `N` accepted by [`brute_force_assign`].
pub const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("{predictions} predictions but {targets} targets; pad targets first")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("{real} ground-truth entities exceed the {n} available queries; raise N")]
    TooManyTargets { real: usize, n: usize },
    #[error("textness {0} is outside [0, 1]")]
    InvalidTextness(f64),
    #[error("brute force supports at most {BRUTE_FORCE_MAX} slots, got {0}")]
    TooLarge(usize),
    #[error("similarity matrix has {len} entries, expected {n}x{n}")]
    MatrixShape { len: usize, n: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, MatchingError>;

/// One object query: soft mask and textness probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSlot {
    pub soft_mask: SoftMask,
    pub textness: f64,
}

impl PredictionSlot {
    pub fn new(soft_mask: SoftMask, textness: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&textness) {
            return Err(MatchingError::InvalidTextness(textness));
        }
        Ok(Self {
            soft_mask,
            textness,
        })
    }
}

/// One ground-truth slot. Padding slots are non-text with an empty mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSlot {
    pub mask: BitMask,
    pub is_text: bool,
    /// Paragraph the entity belongs to; ignored for non-text slots.
    pub cluster_id: i64,
}

impl TargetSlot {
    pub fn text(mask: BitMask, cluster_id: i64) -> Self {
        Self {
            mask,
            is_text: true,
            cluster_id,
        }
    }

    pub fn padding(width: usize, height: usize) -> Self {
        Self {
            mask: BitMask::new(width, height),
            is_text: false,
            cluster_id: -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `sigma[i]` is the target matched to prediction `i`.
    pub sigma: Vec<usize>,
    pub total_similarity: f64,
}

impl Assignment {
    /// Builds an assignment, summing similarities in prediction order.
    pub fn from_sigma(sigma: Vec<usize>, similarity: &[f64]) -> Self {
        let n = sigma.len();
        let total_similarity = sigma
            .iter()
            .enumerate()
            .map(|(i, &j)| similarity[i * n + j])
            .sum();
        Self {
            sigma,
            total_similarity,
        }
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.sigma.len()];
        self.sigma
            .iter()
            .all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }
}

pub fn similarity(p: &PredictionSlot, t: &TargetSlot) -> Result<f64> {
    let y = if t.is_text { 1.0 } else { 0.0 };
    let class = p.textness * y + (1.0 - p.textness) * (1.0 - y);
    Ok(class * geometry::dice(&p.soft_mask, &t.mask)?)
}

/// Row-major `N x N` similarity matrix.
pub fn similarity_matrix(predictions: &[PredictionSlot], targets: &[TargetSlot]) -> Result<Vec<f64>> {
    check_lengths(predictions, targets)?;
    let mut out = Vec::with_capacity(predictions.len() * targets.len());
    for p in predictions {
        for t in targets {
            out.push(similarity(p, t)?);
        }
    }
    Ok(out)
}

fn check_lengths(predictions: &[PredictionSlot], targets: &[TargetSlot]) -> Result<()> {
    if predictions.len() != targets.len() {
        return Err(MatchingError::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    Ok(())
}

/// Legible entities at `level` as text targets, clustered by paragraph.
pub fn targets_from_annotation(a: &HierAnnotation, level: Level, grid: RasterGrid) -> Result<Vec<TargetSlot>> {
    Ok(annotation::derive_masks(a, level, grid)?
        .into_iter()
        .map(|e| TargetSlot::text(e.mask, e.cluster as i64))
        .collect())
}

/// Appends padding slots after the real targets until there are `n`.
pub fn pad_targets(
    mut targets: Vec<TargetSlot>,
    n: usize,
    width: usize,
    height: usize,
) -> Result<Vec<TargetSlot>> {
    if targets.len() > n {
        return Err(MatchingError::TooManyTargets {
            real: targets.len(),
            n,
        });
    }
    targets.resize_with(n, || TargetSlot::padding(width, height));
    Ok(targets)
}

/// Optimal matching of predictions to (padded) targets.
pub fn match_slots(predictions: &[PredictionSlot], targets: &[TargetSlot]) -> Result<Assignment> {
    let sim = similarity_matrix(predictions, targets)?;
    assign(&sim, predictions.len())
}

/// Optimal permutation for a precomputed row-major similarity matrix.
pub fn assign(similarity: &[f64], n: usize) -> Result<Assignment> {
    if similarity.len() != n * n {
        return Err(MatchingError::MatrixShape {
            len: similarity.len(),
            n,
        });
    }
    let sigma = assignment::maximize(similarity, n);
    Ok(Assignment::from_sigma(sigma, similarity))
}

/// Exhaustive search over all `N!` permutations; the lexicographically first
/// permutation within the tie tolerance of the best total wins.
pub fn brute_force_assign(similarity: &[f64], n: usize) -> Result<Assignment> {
    if n > BRUTE_FORCE_MAX {
        return Err(MatchingError::TooLarge(n));
    }
    if similarity.len() != n * n {
        return Err(MatchingError::MatrixShape {
            len: similarity.len(),
            n,
        });
    }
    let mut perms = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| similarity[i * n + j]).sum();
        perms.push((perm.clone(), total));
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let best = perms.iter().map(|(_, t)| *t).fold(f64::NEG_INFINITY, f64::max);
    let (sigma, _) = perms
        .into_iter()
        .find(|(_, t)| *t >= best - assignment::TIE_TOLERANCE)
        .expect("at least one permutation");
    Ok(Assignment::from_sigma(sigma, similarity))
}

pub fn brute_force_match(predictions: &[PredictionSlot], targets: &[TargetSlot]) -> Result<Assignment> {
    if predictions.len() > BRUTE_FORCE_MAX {
        return Err(MatchingError::TooLarge(predictions.len()));
    }
    let sim = similarity_matrix(predictions, targets)?;
    brute_force_assign(&sim, predictions.len())
}

/// Advances to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
