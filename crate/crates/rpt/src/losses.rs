//! Segmentation cross-entropy and the three prediction-transfer
//! regularizers, each with its analytic gradient w.r.t. the logits.
//!
//! Conventions shared by all of them:
//! - probabilities come from a per-pixel softmax over the logits;
//! - patch and cluster terms punish a pixel only when its probability for
//!   the frozen target category strictly exceeds the threshold, and pull the
//!   pixel toward that category (loss `-log p`, so the sum is nonnegative);
//! - the spatial-logic term fires on whole superpixels whose logic score is
//!   strictly below the threshold and pushes every member pixel away from
//!   the voted category (loss `+log p`, so the sum is nonpositive);
//! - regularizer losses are sums, not means, matching their definitions;
//!   [`normalized_loss`] offers a per-pixel view for reporting only.
//!
//! Targets (voted categories, logic scores, retained sets) are state: they
//! stay frozen between state refreshes while the logits keep training.

use crate::error::{Result, RptError};
use crate::logic::LogicScores;
use crate::slic::SuperpixelMap;
use crate::stats::{RetainedSet, SuperpixelStats};
use crate::tensor::{LabelMap, ProbMap, IGNORE_LABEL};

/// Floor applied inside `log` so degenerate probabilities keep losses finite;
/// gradients always use the exact softmax expression.
const LOG_FLOOR: f64 = 1e-15;

/// Raw per-pixel class scores, `height x width x classes`, double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Logits> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(RptError::Invalid("logits dims must be nonzero".into()));
        }
        if data.len() != height * width * classes {
            return Err(RptError::Length(format!(
                "logits length {} does not match {height}x{width}x{classes}",
                data.len()
            )));
        }
        Ok(Logits {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel softmax probabilities, same layout as the logits.
    pub fn softmax(&self) -> Vec<f64> {
        let c = self.classes;
        let mut probs = vec![0.0f64; self.data.len()];
        for px in 0..self.pixels() {
            let row = &self.data[px * c..(px + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, &z) in row.iter().enumerate() {
                let e = (z - max).exp();
                probs[px * c + i] = e;
                sum += e;
            }
            for i in 0..c {
                probs[px * c + i] /= sum;
            }
        }
        probs
    }

    /// Softmax materialized as a storable probability map.
    pub fn prob_map(&self) -> ProbMap {
        let probs = self.softmax();
        ProbMap::new(
            self.height,
            self.width,
            self.classes,
            probs.into_iter().map(|p| p as f32).collect(),
        )
        .expect("softmax rows sum to one")
    }
}

/// A loss value with its gradient and the punished-pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// Same layout as the logits; exactly zero outside the mask.
    pub grad_logits: Vec<f64>,
    /// Pixels that contributed to the loss.
    pub mask: Vec<bool>,
    pub punished_count: usize,
    /// Set when the input had nothing to score (e.g. all pixels ignored).
    pub degenerate: bool,
}

impl LossResult {
    fn empty(logits: &Logits, degenerate: bool) -> LossResult {
        LossResult {
            loss: 0.0,
            grad_logits: vec![0.0; logits.data.len()],
            mask: vec![false; logits.pixels()],
            punished_count: 0,
            degenerate,
        }
    }
}

/// Per-punished-pixel average of a summed loss. Reporting only; training
/// always consumes the raw sum.
pub fn normalized_loss(r: &LossResult) -> f64 {
    if r.punished_count == 0 {
        0.0
    } else {
        r.loss / r.punished_count as f64
    }
}

/// Regularizer thresholds, each in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub pc: f64,
    pub cc: f64,
    pub sl: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            pc: 0.25,
            cc: 0.25,
            sl: 0.25,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("pc", self.pc), ("cc", self.cc), ("sl", self.sl)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(RptError::Invalid(format!(
                    "threshold {name} must be in (0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check_dims(logits: &Logits, h: usize, w: usize, what: &str) -> Result<()> {
    if logits.height != h || logits.width != w {
        return Err(RptError::Invalid(format!(
            "logits {}x{} do not match {what} {h}x{w}",
            logits.height, logits.width
        )));
    }
    Ok(())
}

/// Mean cross-entropy over non-ignore pixels.
///
/// Gradient per counted pixel is `(softmax - onehot(label)) / count`; ignore
/// pixels contribute nothing. An all-ignore map yields a zero, degenerate
/// result rather than an error.
pub fn seg_loss(logits: &Logits, labels: &LabelMap) -> Result<LossResult> {
    check_dims(logits, labels.height, labels.width, "labels")?;
    labels.validate_classes(logits.classes)?;
    let c = logits.classes;
    let probs = logits.softmax();
    let count = labels.data.iter().filter(|&&v| v != IGNORE_LABEL).count();
    if count == 0 {
        return Ok(LossResult::empty(logits, true));
    }
    let inv = 1.0 / count as f64;
    let mut out = LossResult::empty(logits, false);
    for px in 0..logits.pixels() {
        let y = labels.data[px];
        if y == IGNORE_LABEL {
            continue;
        }
        let y = y as usize;
        out.loss -= probs[px * c + y].max(LOG_FLOOR).ln();
        for cls in 0..c {
            let onehot = if cls == y { 1.0 } else { 0.0 };
            out.grad_logits[px * c + cls] = (probs[px * c + cls] - onehot) * inv;
        }
        out.mask[px] = true;
        out.punished_count += 1;
    }
    out.loss *= inv;
    Ok(out)
}

/// Patch-level consistency: inside every retained superpixel, pixels whose
/// probability for the superpixel's voted category strictly exceeds
/// `lambda_pc` are pulled toward that category.
pub fn pcr_loss(
    logits: &Logits,
    sp: &SuperpixelMap,
    stats: &SuperpixelStats,
    retained: &RetainedSet,
    lambda_pc: f64,
) -> Result<LossResult> {
    check_dims(logits, sp.height, sp.width, "superpixel map")?;
    check_stats(sp, stats, retained)?;
    check_lambda(lambda_pc)?;
    let targets: Vec<Option<u8>> = (0..sp.count)
        .map(|id| {
            if retained.contains(id) {
                stats.dominative[id]
            } else {
                None
            }
        })
        .collect();
    Ok(pull_toward_targets(logits, sp, &targets, lambda_pc))
}

/// Cluster-level consistency: like the patch term, but the target category
/// is the vote of the superpixel's cluster. `cluster_targets` carries one
/// entry per superpixel (`None` = invalid cluster or not retained upstream).
pub fn ccr_loss(
    logits: &Logits,
    sp: &SuperpixelMap,
    cluster_targets: &[Option<u8>],
    retained: &RetainedSet,
    lambda_cc: f64,
) -> Result<LossResult> {
    check_dims(logits, sp.height, sp.width, "superpixel map")?;
    if cluster_targets.len() != sp.count || retained.retained.len() != sp.count {
        return Err(RptError::Invalid(format!(
            "cluster targets ({}) and retained ({}) must cover {} superpixels",
            cluster_targets.len(),
            retained.retained.len(),
            sp.count
        )));
    }
    check_lambda(lambda_cc)?;
    let targets: Vec<Option<u8>> = (0..sp.count)
        .map(|id| {
            if retained.contains(id) {
                cluster_targets[id]
            } else {
                None
            }
        })
        .collect();
    Ok(pull_toward_targets(logits, sp, &targets, lambda_cc))
}

/// Shared core of the patch and cluster terms: `-sum log p(target)` over
/// pixels with `p(target) > lambda`, gradient `softmax - onehot(target)`.
fn pull_toward_targets(
    logits: &Logits,
    sp: &SuperpixelMap,
    target_per_superpixel: &[Option<u8>],
    lambda: f64,
) -> LossResult {
    let c = logits.classes;
    let probs = logits.softmax();
    let mut out = LossResult::empty(logits, false);
    for px in 0..logits.pixels() {
        let Some(y) = target_per_superpixel[sp.ids[px] as usize] else {
            continue;
        };
        let y = y as usize;
        let p = probs[px * c + y];
        if p > lambda {
            out.loss -= p.max(LOG_FLOOR).ln();
            for cls in 0..c {
                let onehot = if cls == y { 1.0 } else { 0.0 };
                out.grad_logits[px * c + cls] = probs[px * c + cls] - onehot;
            }
            out.mask[px] = true;
            out.punished_count += 1;
        }
    }
    out
}

/// Spatial-logic regularizer: a retained superpixel whose logic score is
/// strictly below `lambda_sl` is punished as a whole; every member pixel
/// contributes `+log p(voted category)` and is pushed away from it.
/// Superpixels without a logic score (uncovered by any sequence) are exempt.
pub fn slr_loss(
    logits: &Logits,
    sp: &SuperpixelMap,
    stats: &SuperpixelStats,
    scores: &LogicScores,
    retained: &RetainedSet,
    lambda_sl: f64,
) -> Result<LossResult> {
    check_dims(logits, sp.height, sp.width, "superpixel map")?;
    check_stats(sp, stats, retained)?;
    if scores.scores.len() != sp.count {
        return Err(RptError::Invalid(format!(
            "logic scores cover {} superpixels, map has {}",
            scores.scores.len(),
            sp.count
        )));
    }
    check_lambda(lambda_sl)?;
    let c = logits.classes;
    let probs = logits.softmax();
    let punished: Vec<bool> = (0..sp.count)
        .map(|id| {
            retained.contains(id)
                && stats.dominative[id].is_some()
                && matches!(scores.scores[id], Some(s) if s < lambda_sl)
        })
        .collect();
    let mut out = LossResult::empty(logits, false);
    for px in 0..logits.pixels() {
        let id = sp.ids[px] as usize;
        if !punished[id] {
            continue;
        }
        let y = stats.dominative[id].expect("punished superpixels are valid") as usize;
        let p = probs[px * c + y];
        out.loss += p.max(LOG_FLOOR).ln();
        for cls in 0..c {
            let onehot = if cls == y { 1.0 } else { 0.0 };
            out.grad_logits[px * c + cls] = onehot - probs[px * c + cls];
        }
        out.mask[px] = true;
        out.punished_count += 1;
    }
    Ok(out)
}

/// Combined regularizer: exact sum of the three component losses and
/// gradients; the mask is their union.
pub fn rpt_sum(pcr: &LossResult, ccr: &LossResult, slr: &LossResult) -> Result<LossResult> {
    if pcr.grad_logits.len() != ccr.grad_logits.len()
        || ccr.grad_logits.len() != slr.grad_logits.len()
    {
        return Err(RptError::Invalid(
            "component losses were computed on different shapes".into(),
        ));
    }
    let grad_logits: Vec<f64> = pcr
        .grad_logits
        .iter()
        .zip(&ccr.grad_logits)
        .zip(&slr.grad_logits)
        .map(|((a, b), c)| a + b + c)
        .collect();
    let mask: Vec<bool> = pcr
        .mask
        .iter()
        .zip(&ccr.mask)
        .zip(&slr.mask)
        .map(|((a, b), c)| *a || *b || *c)
        .collect();
    let punished_count = mask.iter().filter(|&&m| m).count();
    Ok(LossResult {
        loss: pcr.loss + ccr.loss + slr.loss,
        grad_logits,
        mask,
        punished_count,
        degenerate: false,
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(RptError::Invalid(format!(
            "threshold must be in (0, 1), got {lambda}"
        )));
    }
    Ok(())
}

fn check_stats(sp: &SuperpixelMap, stats: &SuperpixelStats, retained: &RetainedSet) -> Result<()> {
    if stats.count != sp.count || retained.retained.len() != sp.count {
        return Err(RptError::Invalid(format!(
            "stats ({}) and retained ({}) must cover {} superpixels",
            stats.count,
            retained.retained.len(),
            sp.count
        )));
    }
    Ok(())
}
