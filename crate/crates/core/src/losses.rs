//! Training objectives evaluated in double precision, with hand-derived
//! gradients and a finite-difference checker.
//!
//! Detection loss over `N` matched slots (`y` the matched target's class):
//!
//! ```text
//! L_det = 1/N sum_i (1-a)(1-y)[-log(1-p_i)] + a*y[-sg(p_i)*Dice_i - sg(Dice_i)*log p_i]
//! ```
//!
//! where `sg(.)` marks a factor held constant during differentiation. The
//! layout loss is a masked, class-balanced binary cross-entropy between the
//! predicted affinity matrix and same-paragraph indicators of the matched
//! targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BitMask;
use crate::matching::{Assignment, PredictionSlot, TargetSlot};

/// Probabilities are clamped to `[EPSILON, 1 - EPSILON]` before any log.
pub const EPSILON: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{what} has {len} entries, expected {expected}")]
    Shape {
        what: &'static str,
        len: usize,
        expected: usize,
    },
    #[error("assignment is not a permutation of 0..{0}")]
    InvalidAssignment(usize),
    #[error("loss config field {name} = {value} is invalid")]
    Config { name: &'static str, value: f64 },
    #[error("{name} is not finite")]
    NonFinite { name: &'static str },
    #[error("{what}[{index}] = {value} is within {margin} of the clamp boundary")]
    NearBoundary {
        what: &'static str,
        index: usize,
        value: f64,
        margin: f64,
    },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Weighting of positive and negative pairs in the layout loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Balancing {
    /// One normalizer over all masked pairs, no class weighting.
    Vanilla,
    /// Separate positive/negative normalizers weighted by `alpha_l`.
    #[default]
    Alpha,
    /// Alpha-balanced terms modulated by `(1 - p)^gamma` / `p^gamma`.
    Focal,
}

impl std::str::FromStr for Balancing {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "alpha" => Ok(Self::Alpha),
            "focal" => Ok(Self::Focal),
            other => Err(format!("unknown balancing `{other}` (expected vanilla, alpha or focal)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub alpha_l: f64,
    pub balancing: Balancing,
    pub focal_gamma: f64,
    /// Weights of detection, layout, segmentation and instance losses.
    pub lambdas: [f64; 4],
    /// Count self-pairs `(i, i)` in the layout loss.
    pub include_diagonal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            alpha_l: 0.5,
            balancing: Balancing::Alpha,
            focal_gamma: 2.0,
            lambdas: [3.0, 1.0, 1.0, 1.0],
            include_diagonal: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("alpha", self.alpha), ("alpha_l", self.alpha_l)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(LossError::Config { name, value });
            }
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(LossError::Config {
                name: "focal_gamma",
                value: self.focal_gamma,
            });
        }
        for (name, value) in ["lambda1", "lambda2", "lambda3", "lambda4"].into_iter().zip(self.lambdas) {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LossError::Config { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_lay: f64,
    pub l_seg: f64,
    pub l_ins: f64,
    pub total: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPSILON, 1.0 - EPSILON)
}

/// Derivative of the clamp: 1 strictly inside, 0 where clamped.
fn clamp_slope(p: f64) -> f64 {
    if (EPSILON..=1.0 - EPSILON).contains(&p) {
        1.0
    } else {
        0.0
    }
}

fn check_sigma(sigma: &Assignment, n: usize) -> Result<()> {
    if sigma.sigma.len() != n || !sigma.is_permutation() {
        return Err(LossError::InvalidAssignment(n));
    }
    Ok(())
}

/// Soft Dice of raw values against a binary mask, with partial derivatives.
fn dice_with_grad(soft: &[f64], target: &BitMask) -> (f64, Vec<f64>) {
    let sum_a: f64 = soft.iter().sum();
    let sum_b = target.count_ones() as f64;
    let denom = sum_a + sum_b;
    if denom == 0.0 {
        return (0.0, vec![0.0; soft.len()]);
    }
    let overlap: f64 = target.iter_ones().map(|i| soft[i]).sum();
    let dice = 2.0 * overlap / denom;
    let mut grad = vec![-dice / denom; soft.len()];
    for i in target.iter_ones() {
        grad[i] += 2.0 / denom;
    }
    (dice, grad)
}

/// Values of the stop-gradient factors, per prediction slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFactors {
    pub textness: Vec<f64>,
    pub dice: Vec<f64>,
}

/// Raw detection loss over plain slices so that finite differences can probe
/// arbitrary inputs. `frozen` overrides the stop-gradient factors.
fn detection_loss_raw(
    textness: &[f64],
    masks: &[&[f64]],
    targets: &[TargetSlot],
    sigma: &[usize],
    alpha: f64,
    frozen: Option<&FrozenFactors>,
) -> f64 {
    let n = textness.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let t = &targets[sigma[i]];
        let p = clamp_prob(textness[i]);
        if t.is_text {
            let (dice, _) = dice_with_grad(masks[i], &t.mask);
            let (p_const, dice_const) = match frozen {
                Some(f) => (clamp_prob(f.textness[i]), f.dice[i]),
                None => (p, dice),
            };
            total += alpha * (-p_const * dice - dice_const * p.ln());
        } else {
            total += (1.0 - alpha) * -(1.0 - p).ln();
        }
    }
    total / n as f64
}

fn detection_inputs<'a>(
    preds: &'a [PredictionSlot],
    targets: &[TargetSlot],
    sigma: &Assignment,
    cfg: &LossConfig,
) -> Result<(Vec<f64>, Vec<&'a [f64]>)> {
    cfg.validate()?;
    if targets.len() != preds.len() {
        return Err(LossError::Shape {
            what: "targets",
            len: targets.len(),
            expected: preds.len(),
        });
    }
    check_sigma(sigma, preds.len())?;
    Ok((
        preds.iter().map(|p| p.textness).collect(),
        preds.iter().map(|p| p.soft_mask.values()).collect(),
    ))
}

pub fn detection_loss(
    preds: &[PredictionSlot],
    targets: &[TargetSlot],
    sigma: &Assignment,
    cfg: &LossConfig,
) -> Result<f64> {
    let (textness, masks) = detection_inputs(preds, targets, sigma, cfg)?;
    Ok(detection_loss_raw(&textness, &masks, targets, &sigma.sigma, cfg.alpha, None))
}

/// Current values of the stop-gradient factors.
pub fn frozen_factors(preds: &[PredictionSlot], targets: &[TargetSlot], sigma: &Assignment) -> FrozenFactors {
    FrozenFactors {
        textness: preds.iter().map(|p| p.textness).collect(),
        dice: preds
            .iter()
            .zip(&sigma.sigma)
            .map(|(p, &j)| dice_with_grad(p.soft_mask.values(), &targets[j].mask).0)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGradient {
    /// dL/d(textness_i).
    pub textness: Vec<f64>,
    /// dL/d(mask_i[pixel]), row-major per slot.
    pub masks: Vec<Vec<f64>>,
}

/// Analytic gradient honoring the stop-gradient factors: for a positive slot
/// `dL/dp = -a * Dice / p / N` and `dL/dm = -a * p * dDice/dm / N`.
pub fn detection_loss_grad(
    preds: &[PredictionSlot],
    targets: &[TargetSlot],
    sigma: &Assignment,
    cfg: &LossConfig,
) -> Result<DetectionGradient> {
    detection_inputs(preds, targets, sigma, cfg)?;
    let n = preds.len() as f64;
    let mut textness = Vec::with_capacity(preds.len());
    let mut masks = Vec::with_capacity(preds.len());
    for (p, &j) in preds.iter().zip(&sigma.sigma) {
        let t = &targets[j];
        let prob = clamp_prob(p.textness);
        let slope = clamp_slope(p.textness);
        if t.is_text {
            let (dice, dice_grad) = dice_with_grad(p.soft_mask.values(), &t.mask);
            textness.push(-cfg.alpha * dice / prob * slope / n);
            masks.push(dice_grad.into_iter().map(|g| -cfg.alpha * prob * g / n).collect());
        } else {
            textness.push((1.0 - cfg.alpha) / (1.0 - prob) * slope / n);
            masks.push(vec![0.0; p.soft_mask.values().len()]);
        }
    }
    Ok(DetectionGradient { textness, masks })
}

/// Same-paragraph indicator over all slot pairs; pairs involving a non-text
/// slot are 0.
pub fn gt_affinity(targets: &[TargetSlot]) -> Vec<f64> {
    let n = targets.len();
    let mut out = vec![0.0; n * n];
    for (i, a) in targets.iter().enumerate() {
        for (j, b) in targets.iter().enumerate() {
            if a.is_text && b.is_text && a.cluster_id == b.cluster_id {
                out[i * n + j] = 1.0;
            }
        }
    }
    out
}

/// Pair mask and same-cluster indicator in prediction index space.
struct LayoutPairs {
    n: usize,
    mask: Vec<bool>,
    same: Vec<bool>,
    pos_weight: f64,
    neg_weight: f64,
}

impl LayoutPairs {
    fn new(targets: &[TargetSlot], sigma: &[usize], cfg: &LossConfig) -> Self {
        let n = sigma.len();
        let mut mask = vec![false; n * n];
        let mut same = vec![false; n * n];
        let (mut pos, mut neg) = (0usize, 0usize);
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (&targets[sigma[i]], &targets[sigma[j]]);
                if !(a.is_text && b.is_text) || (i == j && !cfg.include_diagonal) {
                    continue;
                }
                mask[i * n + j] = true;
                if a.cluster_id == b.cluster_id {
                    same[i * n + j] = true;
                    pos += 1;
                } else {
                    neg += 1;
                }
            }
        }
        let inv = |c: usize| if c == 0 { 0.0 } else { 1.0 / c as f64 };
        let (pos_weight, neg_weight) = match cfg.balancing {
            Balancing::Vanilla => (inv(pos + neg), inv(pos + neg)),
            Balancing::Alpha | Balancing::Focal => (cfg.alpha_l * inv(pos), (1.0 - cfg.alpha_l) * inv(neg)),
        };
        Self {
            n,
            mask,
            same,
            pos_weight,
            neg_weight,
        }
    }
}

fn layout_check(affinity: &[f64], targets: &[TargetSlot], sigma: &Assignment, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    let n = targets.len();
    check_sigma(sigma, n)?;
    if affinity.len() != n * n {
        return Err(LossError::Shape {
            what: "affinity",
            len: affinity.len(),
            expected: n * n,
        });
    }
    Ok(())
}

fn layout_loss_raw(affinity: &[f64], pairs: &LayoutPairs, cfg: &LossConfig) -> f64 {
    let gamma = cfg.focal_gamma;
    let mut total = 0.0;
    for k in 0..pairs.n * pairs.n {
        if !pairs.mask[k] {
            continue;
        }
        let a = clamp_prob(affinity[k]);
        total += if pairs.same[k] {
            let focus = if cfg.balancing == Balancing::Focal { (1.0 - a).powf(gamma) } else { 1.0 };
            pairs.pos_weight * focus * -a.ln()
        } else {
            let focus = if cfg.balancing == Balancing::Focal { a.powf(gamma) } else { 1.0 };
            pairs.neg_weight * focus * -(1.0 - a).ln()
        };
    }
    total
}

/// Layout loss of the predicted `N x N` affinity under matching `sigma`.
pub fn layout_loss(affinity: &[f64], targets: &[TargetSlot], sigma: &Assignment, cfg: &LossConfig) -> Result<f64> {
    layout_check(affinity, targets, sigma, cfg)?;
    let pairs = LayoutPairs::new(targets, &sigma.sigma, cfg);
    Ok(layout_loss_raw(affinity, &pairs, cfg))
}

/// dL/dA[i, j]; exactly zero on masked-out pairs.
pub fn layout_loss_grad(
    affinity: &[f64],
    targets: &[TargetSlot],
    sigma: &Assignment,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    layout_check(affinity, targets, sigma, cfg)?;
    let pairs = LayoutPairs::new(targets, &sigma.sigma, cfg);
    let gamma = cfg.focal_gamma;
    let focal = cfg.balancing == Balancing::Focal;
    Ok((0..affinity.len())
        .map(|k| {
            if !pairs.mask[k] {
                return 0.0;
            }
            let a = clamp_prob(affinity[k]);
            let slope = clamp_slope(affinity[k]);
            let g = if pairs.same[k] {
                // d/da [(1-a)^g * -ln a]
                let d = if focal {
                    let lead = if gamma == 0.0 { 0.0 } else { gamma * (1.0 - a).powf(gamma - 1.0) * a.ln() };
                    lead - (1.0 - a).powf(gamma) / a
                } else {
                    -1.0 / a
                };
                pairs.pos_weight * d
            } else {
                // d/da [a^g * -ln(1-a)]
                let d = if focal {
                    let lead = if gamma == 0.0 { 0.0 } else { -gamma * a.powf(gamma - 1.0) * (1.0 - a).ln() };
                    lead + a.powf(gamma) / (1.0 - a)
                } else {
                    1.0 / (1.0 - a)
                };
                pairs.neg_weight * d
            };
            g * slope
        })
        .collect())
}

/// Externally computed loss terms entering the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_det: f64,
    pub l_lay: f64,
    pub l_seg: f64,
    pub l_ins: f64,
}

pub fn total_loss(parts: LossParts, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    for (name, v) in [
        ("l_det", parts.l_det),
        ("l_lay", parts.l_lay),
        ("l_seg", parts.l_seg),
        ("l_ins", parts.l_ins),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite { name });
        }
    }
    let [l1, l2, l3, l4] = cfg.lambdas;
    Ok(LossBreakdown {
        l_det: parts.l_det,
        l_lay: parts.l_lay,
        l_seg: parts.l_seg,
        l_ins: parts.l_ins,
        total: l1 * parts.l_det + l2 * parts.l_lay + l3 * parts.l_seg + l4 * parts.l_ins,
    })
}

/// Finite-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Required distance of logged probabilities from 0 and 1.
    pub margin: f64,
    /// Mask pixels probed in total; evenly strided when exceeded.
    pub max_mask_samples: usize,
    /// Relative errors are measured against at least this magnitude.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            margin: 1e-3,
            max_mask_samples: 4096,
            floor: 1e-6,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: String,
    pub max_rel_error: f64,
    /// Where the largest error occurred, e.g. `textness[2]`.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Detection loss only: largest discrepancy between the analytic gradient
    /// and differences of the loss with the stop-gradient factors left live.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub live_factor_rel_error: Option<f64>,
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn check_margin(what: &'static str, values: &[f64], margin: f64) -> Result<()> {
    for (index, &value) in values.iter().enumerate() {
        if !(value > margin && value < 1.0 - margin) {
            return Err(LossError::NearBoundary {
                what,
                index,
                value,
                margin,
            });
        }
    }
    Ok(())
}

#[derive(Default)]
struct Worst {
    err: f64,
    at: String,
    checked: usize,
}

impl Worst {
    fn record(&mut self, err: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.err || self.at.is_empty() {
            self.err = self.err.max(err);
            self.at = at();
        }
    }
}

fn central_difference(x: &mut [f64], k: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[k];
    x[k] = orig + h;
    let up = f(x);
    x[k] = orig - h;
    let down = f(x);
    x[k] = orig;
    (up - down) / (2.0 * h)
}

/// Compares [`detection_loss_grad`] with central differences of the loss
/// whose stop-gradient factors are frozen at their current values.
pub fn grad_check_detection(
    preds: &[PredictionSlot],
    targets: &[TargetSlot],
    sigma: &Assignment,
    cfg: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (textness, _) = detection_inputs(preds, targets, sigma, cfg)?;
    check_margin("textness", &textness, opts.margin)?;
    let analytic = detection_loss_grad(preds, targets, sigma, cfg)?;
    let frozen = frozen_factors(preds, targets, sigma);
    let mut masks: Vec<Vec<f64>> = preds.iter().map(|p| p.soft_mask.values().to_vec()).collect();
    let sig = &sigma.sigma;
    let h = opts.step;

    let mut worst = Worst::default();
    let mut live = 0.0f64;
    let mut t = textness.clone();
    for i in 0..t.len() {
        let eval = |frozen: Option<&FrozenFactors>, t: &[f64]| {
            let views: Vec<&[f64]> = masks.iter().map(Vec::as_slice).collect();
            detection_loss_raw(t, &views, targets, sig, cfg.alpha, frozen)
        };
        let numeric = central_difference(&mut t, i, h, |t| eval(Some(&frozen), t));
        let naive = central_difference(&mut t, i, h, |t| eval(None, t));
        worst.record(rel_error(analytic.textness[i], numeric, opts.floor), || format!("textness[{i}]"));
        live = live.max(rel_error(analytic.textness[i], naive, opts.floor));
    }

    let plane = masks.first().map_or(0, Vec::len);
    let total = plane * masks.len();
    let stride = total.div_ceil(opts.max_mask_samples.max(1)).max(1);
    for flat in (0..total).step_by(stride) {
        let (i, px) = (flat / plane, flat % plane);
        let orig = masks[i][px];
        let mut eval_at = |v: f64, frozen: Option<&FrozenFactors>| {
            masks[i][px] = v;
            let views: Vec<&[f64]> = masks.iter().map(Vec::as_slice).collect();
            detection_loss_raw(&textness, &views, targets, sig, cfg.alpha, frozen)
        };
        let numeric = (eval_at(orig + h, Some(&frozen)) - eval_at(orig - h, Some(&frozen))) / (2.0 * h);
        let naive = (eval_at(orig + h, None) - eval_at(orig - h, None)) / (2.0 * h);
        masks[i][px] = orig;
        worst.record(rel_error(analytic.masks[i][px], numeric, opts.floor), || {
            format!("mask[{i}][{px}]")
        });
        live = live.max(rel_error(analytic.masks[i][px], naive, opts.floor));
    }

    Ok(GradCheckReport {
        loss: "detection".into(),
        max_rel_error: worst.err,
        worst: worst.at,
        checked: worst.checked,
        tolerance: opts.tolerance,
        passed: worst.err < opts.tolerance,
        live_factor_rel_error: Some(live),
    })
}

/// Compares [`layout_loss_grad`] with central differences on every entry of
/// the affinity matrix.
pub fn grad_check_layout(
    affinity: &[f64],
    targets: &[TargetSlot],
    sigma: &Assignment,
    cfg: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    layout_check(affinity, targets, sigma, cfg)?;
    check_margin("affinity", affinity, opts.margin)?;
    let analytic = layout_loss_grad(affinity, targets, sigma, cfg)?;
    let pairs = LayoutPairs::new(targets, &sigma.sigma, cfg);
    let n = targets.len();
    let mut a = affinity.to_vec();
    let mut worst = Worst::default();
    for k in 0..a.len() {
        let numeric = central_difference(&mut a, k, opts.step, |a| layout_loss_raw(a, &pairs, cfg));
        worst.record(rel_error(analytic[k], numeric, opts.floor), || {
            format!("affinity[{}][{}]", k / n, k % n)
        });
    }
    Ok(GradCheckReport {
        loss: format!("layout/{:?}", cfg.balancing).to_lowercase(),
        max_rel_error: worst.err,
        worst: worst.at,
        checked: worst.checked,
        tolerance: opts.tolerance,
        passed: worst.err < opts.tolerance,
        live_factor_rel_error: None,
    })
}
