//! Training objectives.
//!
//! Builds the full loss family on top of the tensor kernels: supervised
//! segmentation loss (cross-entropy + Dice), temperature sharpening,
//! uncertainty-rectified pseudo supervision, cross-view consistency, and the
//! weighted totals. Stop-gradient boundaries are enforced by construction:
//! pseudo targets and rectification references enter the tape as plain
//! arrays, so no gradient can ever reach the branch that produced them.

use std::rc::Rc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Guard added inside every log and division.
pub const LOG_EPS: f64 = 1e-8;
/// Smoothing constant for the soft Dice term.
pub const DICE_EPS: f64 = 1e-5;

/// Scalar knobs shared by all loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight on the rectified pseudo supervision term.
    pub alpha: f64,
    /// Weight on the contrastive term.
    pub beta: f64,
    /// Sharpening temperature for pseudo targets.
    pub temperature_t: f64,
    /// Contrastive softmax temperature.
    pub temperature_tau: f64,
    /// Numerical guard; must lie in (0, 1e-4].
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            temperature_t: 0.5,
            temperature_tau: 0.1,
            epsilon: LOG_EPS,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64, name: &str| -> Result<()> {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
            Ok(())
        };
        nonneg(self.alpha, "alpha")?;
        nonneg(self.beta, "beta")?;
        if !self.temperature_t.is_finite() || self.temperature_t <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature_t must be > 0, got {}",
                self.temperature_t
            )));
        }
        if !self.temperature_tau.is_finite() || self.temperature_tau <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature_tau must be > 0, got {}",
                self.temperature_tau
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-4) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must lie in (0, 1e-4], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-step telemetry of every loss component.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub rectified_pseudo: f64,
    pub contrastive: f64,
    pub total_supervised: f64,
    pub total_unsupervised: f64,
    /// Mean per-voxel KL divergence between views and the reference.
    pub uncertainty_mean: f64,
}

fn same_shape<S: Scalar>(tape: &Tape<S>, a: Tensor, b: Tensor, what: &str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn channel_layout<S: Scalar>(tape: &Tape<S>, t: Tensor, what: &str) -> Result<Vec<usize>> {
    let s = tape.shape(t);
    if s.len() < 3 {
        return Err(Error::Shape(format!("{what}: expected [N, C, spatial...], got {s:?}")));
    }
    Ok(s)
}

/// Supervised segmentation loss: mean voxel cross-entropy plus soft Dice
/// averaged over scored classes.
pub fn seg_loss<S: Scalar>(
    tape: &Tape<S>,
    probs: Tensor,
    labels: Rc<ArrayD<u8>>,
    include_background: bool,
) -> Result<Tensor> {
    let shape = channel_layout(tape, probs, "seg_loss")?;
    let c = shape[1];
    let mut map_shape = shape.clone();
    map_shape.remove(1);
    if labels.shape() != map_shape.as_slice() {
        return Err(Error::Shape(format!(
            "seg_loss: labels {:?} do not match probabilities {shape:?}",
            labels.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "seg_loss: label {bad} out of range for {c} classes"
        )));
    }
    if !include_background && c < 2 {
        return Err(Error::InvalidArgument(
            "seg_loss: background-excluded Dice needs at least 2 classes".into(),
        ));
    }
    let ce = tape.mean_all(tape.hard_ce_map(probs, Rc::clone(&labels), S::from_f64(LOG_EPS)));
    let dice = tape.soft_dice_loss(probs, labels, include_background, S::from_f64(DICE_EPS));
    Ok(tape.add(ce, dice))
}

/// Temperature sharpening: per-voxel `softmax(z / t)`.
pub fn sharpen<S: Scalar>(tape: &Tape<S>, logits: Tensor, t: f64) -> Result<Tensor> {
    if !t.is_finite() || t <= 0.0 {
        return Err(Error::InvalidArgument(format!("sharpen: temperature must be > 0, got {t}")));
    }
    channel_layout(tape, logits, "sharpen")?;
    let scaled = tape.mul_scalar(logits, S::from_f64(1.0 / t));
    Ok(tape.softmax_channels(scaled))
}

/// Per-voxel soft cross-entropy of a view's prediction against the sharpened
/// pseudo target `softmax(z / t)`. The logits are detached internally, so the
/// target never carries gradient.
pub fn pseudo_sup_loss<S: Scalar>(
    tape: &Tape<S>,
    view_probs: Tensor,
    logits: Tensor,
    t: f64,
) -> Result<Tensor> {
    same_shape(tape, view_probs, logits, "pseudo_sup_loss")?;
    let target = sharpen(tape, tape.detach(logits), t)?;
    Ok(tape.soft_ce_map(view_probs, tape.value(target), S::from_f64(LOG_EPS)))
}

/// Per-voxel KL divergence of the (detached) reference from the view:
/// `sum_c ref_c * ln(ref_c / view_c)`. Gradient flows into the view only.
pub fn kl_map<S: Scalar>(
    tape: &Tape<S>,
    view_probs: Tensor,
    reference_probs: Tensor,
) -> Result<Tensor> {
    same_shape(tape, view_probs, reference_probs, "kl_map")?;
    channel_layout(tape, view_probs, "kl_map")?;
    Ok(tape.kl_map(view_probs, tape.value(reference_probs), S::from_f64(LOG_EPS)))
}

/// Uncertainty-rectified pseudo supervision: per voxel
/// `exp(-D) * L_p + D`, averaged over voxels, where `D` is the KL divergence
/// of the reference from the view and `L_p` the pseudo supervision term.
/// Voxels where the reference disagrees more with the view are both
/// down-weighted and penalised for the disagreement itself.
pub fn uncertainty_rectified_loss<S: Scalar>(
    tape: &Tape<S>,
    view_probs: Tensor,
    logits: Tensor,
    reference_probs: Tensor,
    t: f64,
) -> Result<Tensor> {
    let lp = pseudo_sup_loss(tape, view_probs, logits, t)?;
    let d = kl_map(tape, view_probs, reference_probs)?;
    let weight = tape.exp(tape.neg(d));
    let per_voxel = tape.add(tape.mul(weight, lp), d);
    Ok(tape.mean_all(per_voxel))
}

/// Cross-view consistency: mean over voxels of one minus the cosine between
/// the two channel vectors. Zero iff the views agree everywhere.
pub fn consistency_loss<S: Scalar>(tape: &Tape<S>, probs_a: Tensor, probs_b: Tensor) -> Result<Tensor> {
    same_shape(tape, probs_a, probs_b, "consistency_loss")?;
    channel_layout(tape, probs_a, "consistency_loss")?;
    let cos = tape.cosine_map(probs_a, probs_b, S::from_f64(LOG_EPS));
    let dist = tape.add_scalar(tape.neg(cos), S::one());
    Ok(tape.mean_all(dist))
}

/// Full rectified pseudo supervision objective for one image: rectified
/// pseudo losses of both views against the original prediction, plus the
/// cross-view consistency term. The original-branch logits are detached
/// before any use, so this loss sends gradient only into the views.
pub fn rectified_pseudo_loss<S: Scalar>(
    tape: &Tape<S>,
    view1_probs: Tensor,
    view2_probs: Tensor,
    logits: Tensor,
    t: f64,
) -> Result<Tensor> {
    same_shape(tape, view1_probs, view2_probs, "rectified_pseudo_loss")?;
    same_shape(tape, view1_probs, logits, "rectified_pseudo_loss")?;
    let zd = tape.detach(logits);
    let reference = tape.softmax_channels(zd);
    let l1 = uncertainty_rectified_loss(tape, view1_probs, zd, reference, t)?;
    let l2 = uncertainty_rectified_loss(tape, view2_probs, zd, reference, t)?;
    let cr = consistency_loss(tape, view1_probs, view2_probs)?;
    Ok(tape.add(tape.add(l1, l2), cr))
}

/// Assemble the per-step report. `seg` is present on the labeled branch only;
/// the unsupervised total `alpha * rp + beta * bc` applies to both branches.
pub fn total_losses(
    seg: Option<f64>,
    rectified_pseudo: f64,
    contrastive: f64,
    uncertainty_mean: f64,
    weights: &LossWeights,
) -> LossReport {
    let unsup = weights.alpha * rectified_pseudo + weights.beta * contrastive;
    LossReport {
        seg: seg.unwrap_or(0.0),
        rectified_pseudo,
        contrastive,
        total_supervised: seg.map_or(0.0, |s| s + unsup),
        total_unsupervised: unsup,
        uncertainty_mean,
    }
}
