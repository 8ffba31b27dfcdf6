//! Confident negative sampling and the bidirectional voxel contrastive loss.
//!
//! Anchors are voxel embeddings taken from two augmented views of the same
//! image at the same location (the positive pair). Negatives come from a
//! different image's embedding map, restricted to voxels whose pseudo class
//! differs from the anchor's, keeping only the most confident ones.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, ArrayViewD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Pseudo labels for one image at embedding resolution.
#[derive(Debug, Clone)]
pub struct PseudoLabelGrid<S> {
    /// Argmax class per location.
    pub classes: Array3<u8>,
    /// Max class probability per location, in [0, 1].
    pub confidence: Array3<S>,
}

impl<S: Scalar> PseudoLabelGrid<S> {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.classes.shape();
        [s[0], s[1], s[2]]
    }
}

/// Average-pools a `[N, C, D, H, W]` probability map by `stride`, then takes
/// per-location argmax (class) and max (confidence). Returns one grid per
/// batch item. Argmax ties resolve to the lowest class index.
pub fn downsample_pseudo_labels<S: Scalar>(
    probs: &ArrayD<S>,
    stride: usize,
) -> Result<Vec<PseudoLabelGrid<S>>> {
    if probs.ndim() != 5 {
        return Err(Error::Shape(format!(
            "downsample_pseudo_labels: expected [N,C,D,H,W], got {:?}",
            probs.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("downsample_pseudo_labels: stride must be >= 1".into()));
    }
    let s = probs.shape();
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    for (axis, &len) in ["depth", "height", "width"].iter().zip(&s[2..]) {
        if len % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "downsample_pseudo_labels: stride {stride} does not divide {axis} {len}"
            )));
        }
    }
    let (gd, gh, gw) = (d / stride, h / stride, w / stride);
    let flat = probs.as_slice().expect("probability map must be contiguous");
    let inv = S::from_usize(stride * stride * stride).recip();
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut classes = Array3::<u8>::zeros((gd, gh, gw));
        let mut confidence = Array3::<S>::zeros((gd, gh, gw));
        for gz in 0..gd {
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut best_c = 0usize;
                    let mut best_v = S::neg_infinity();
                    for ci in 0..c {
                        let base = (ni * c + ci) * d * h * w;
                        let mut acc = S::zero();
                        for dz in 0..stride {
                            for dy in 0..stride {
                                let row = base
                                    + (gz * stride + dz) * h * w
                                    + (gy * stride + dy) * w
                                    + gx * stride;
                                for dx in 0..stride {
                                    acc = acc + flat[row + dx];
                                }
                            }
                        }
                        let pooled = acc * inv;
                        if pooled > best_v {
                            best_v = pooled;
                            best_c = ci;
                        }
                    }
                    classes[[gz, gy, gx]] = best_c as u8;
                    confidence[[gz, gy, gx]] = best_v;
                }
            }
        }
        out.push(PseudoLabelGrid { classes, confidence });
    }
    Ok(out)
}

/// The per-class pool of negative voxels: embedding rows plus the metadata
/// used to pick them.
#[derive(Debug, Clone)]
pub struct NegativeBank<S> {
    /// One unit-norm embedding per row, `[K, E]`.
    pub embeddings: Array2<S>,
    /// Pseudo class of each row.
    pub classes: Vec<u8>,
    /// Confidence of each row, non-increasing.
    pub confidences: Vec<S>,
    /// Linear voxel index of each row in the source grid.
    pub sources: Vec<usize>,
    /// Requested maximum size.
    pub capacity: usize,
}

impl<S: Scalar> NegativeBank<S> {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Verifies the structural invariants; used by tests.
    pub fn check(&self) -> Result<()> {
        let k = self.sources.len();
        if self.embeddings.nrows() != k || self.classes.len() != k || self.confidences.len() != k {
            return Err(Error::InvalidArgument("negative bank: ragged fields".into()));
        }
        if k > self.capacity {
            return Err(Error::InvalidArgument("negative bank: over capacity".into()));
        }
        for pair in self.confidences.windows(2) {
            if pair[1] > pair[0] {
                return Err(Error::InvalidArgument("negative bank: confidences not sorted".into()));
            }
        }
        for row in self.embeddings.rows() {
            let norm = row.dot(&row).sqrt().to_f64();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::Degenerate(format!(
                    "negative bank: embedding norm {norm} is not unit"
                )));
            }
        }
        Ok(())
    }
}

/// Selects the `capacity` most confident voxels whose pseudo class differs
/// from `anchor_class`. Confidence ties resolve to the lower linear voxel
/// index. An empty eligible set yields an empty bank.
pub fn sample_confident_negatives<S: Scalar>(
    embeddings: ArrayViewD<'_, S>,
    labels: &PseudoLabelGrid<S>,
    anchor_class: u8,
    capacity: usize,
) -> Result<NegativeBank<S>> {
    if capacity == 0 {
        return Err(Error::InvalidArgument("sample_confident_negatives: capacity must be >= 1".into()));
    }
    let es = embeddings.shape();
    if es.len() != 4 {
        return Err(Error::Shape(format!(
            "sample_confident_negatives: expected [E,d,h,w] embeddings, got {es:?}"
        )));
    }
    let [gd, gh, gw] = labels.dims();
    if es[1..] != [gd, gh, gw] {
        return Err(Error::Shape(format!(
            "sample_confident_negatives: embeddings {es:?} vs label grid {:?}",
            labels.dims()
        )));
    }
    let e = es[0];
    let cls = labels.classes.as_slice().expect("label grid must be contiguous");
    let conf = labels.confidence.as_slice().expect("label grid must be contiguous");
    let mut eligible: Vec<usize> = (0..cls.len()).filter(|&v| cls[v] != anchor_class).collect();
    eligible.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap().then(a.cmp(&b)));
    eligible.truncate(capacity);

    let mut rows = Array2::<S>::zeros((eligible.len(), e));
    for (row, &v) in eligible.iter().enumerate() {
        let (z, rest) = (v / (gh * gw), v % (gh * gw));
        let (y, x) = (rest / gw, rest % gw);
        for ch in 0..e {
            rows[[row, ch]] = embeddings[[ch, z, y, x]];
        }
    }
    Ok(NegativeBank {
        embeddings: rows,
        classes: eligible.iter().map(|&v| cls[v]).collect(),
        confidences: eligible.iter().map(|&v| conf[v]).collect(),
        sources: eligible,
        capacity,
    })
}

/// Knobs for the contrastive term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Negative bank capacity per anchor class.
    pub negatives: usize,
    /// Uniform anchor subsample size; `None` uses every location.
    pub anchors_per_image: Option<usize>,
    /// Cut the gradient into the negative source map.
    pub detach_negatives: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { tau: 0.1, negatives: 400, anchors_per_image: None, detach_negatives: true }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.negatives == 0 {
            return Err(Error::InvalidArgument("negatives must be >= 1".into()));
        }
        if self.anchors_per_image == Some(0) {
            return Err(Error::InvalidArgument("anchors_per_image must be >= 1".into()));
        }
        Ok(())
    }
}

/// Bidirectional voxel InfoNCE for one image.
///
/// `view1`/`view2` are batched `[N, E, d, h, w]` embedding maps of the two
/// augmented views; the anchor image is `anchor_item` in both. Negatives are
/// taken from `negatives[negative_item]`, filtered per anchor class through
/// [`sample_confident_negatives`]. Each anchor contributes
/// `L(ψ1, ψ2) + L(ψ2, ψ1)` where
/// `L(a, p) = -ln( e^{a·p/τ} / (e^{a·p/τ} + Σ_n e^{a·ψ_n/τ}) )`,
/// and the result is the mean over anchors; anchors whose bank is empty
/// contribute zero. Embeddings are assumed unit-norm, so dot products are
/// cosines. Gradient flows into both views, and into the negative source
/// only when `detach_negatives` is off.
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_contrastive_loss<S: Scalar, R: Rng>(
    tape: &Tape<S>,
    view1: Tensor,
    view2: Tensor,
    anchor_item: usize,
    negatives: Tensor,
    negative_item: usize,
    pl: &PseudoLabelGrid<S>,
    pl_neg: &PseudoLabelGrid<S>,
    cfg: &ContrastiveConfig,
    mut rng: Option<&mut R>,
) -> Result<Tensor> {
    cfg.validate()?;
    let (s1, s2, sn) = (tape.shape(view1), tape.shape(view2), tape.shape(negatives));
    if s1 != s2 {
        return Err(Error::Shape(format!("contrastive views misaligned: {s1:?} vs {s2:?}")));
    }
    if s1.len() != 5 || sn.len() != 5 {
        return Err(Error::Shape("contrastive loss expects [N,E,d,h,w] embedding maps".into()));
    }
    if s1[1] != sn[1] {
        return Err(Error::Shape(format!(
            "embedding dims differ: anchors {} vs negatives {}",
            s1[1], sn[1]
        )));
    }
    if anchor_item >= s1[0] || negative_item >= sn[0] {
        return Err(Error::InvalidArgument("contrastive loss: batch index out of range".into()));
    }
    if s1[2..] != pl.dims() {
        return Err(Error::Shape(format!(
            "anchor grid {:?} does not match embeddings {s1:?}",
            pl.dims()
        )));
    }
    if sn[2..] != pl_neg.dims() {
        return Err(Error::Shape(format!(
            "negative grid {:?} does not match embeddings {sn:?}",
            pl_neg.dims()
        )));
    }

    let total = s1[2] * s1[3] * s1[4];
    let anchors: Vec<usize> = match cfg.anchors_per_image {
        Some(k) if k < total => {
            let rng = rng.as_deref_mut().ok_or_else(|| {
                Error::InvalidArgument("anchor subsampling requires an rng".into())
            })?;
            let mut picked = rand::seq::index::sample(rng, total, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let anchor_classes = pl.classes.as_slice().expect("label grid must be contiguous");
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for &v in &anchors {
        by_class.entry(anchor_classes[v]).or_default().push(v);
    }

    let neg_src = if cfg.detach_negatives { tape.detach(negatives) } else { negatives };
    let neg_value = tape.value(negatives);
    let neg_view = neg_value.index_axis(ndarray::Axis(0), negative_item);

    let inv_tau = S::from_f64(1.0 / cfg.tau);
    let mut acc = tape.scalar(S::zero());
    for (&class, voxels) in &by_class {
        let bank = sample_confident_negatives(neg_view.view(), pl_neg, class, cfg.negatives)?;
        if bank.is_empty() {
            continue;
        }
        let picks: Vec<(usize, usize)> = voxels.iter().map(|&v| (anchor_item, v)).collect();
        let a1 = tape.gather_voxels(view1, &picks);
        let a2 = tape.gather_voxels(view2, &picks);
        let bank_picks: Vec<(usize, usize)> =
            bank.sources.iter().map(|&v| (negative_item, v)).collect();
        let nb = tape.gather_voxels(neg_src, &bank_picks);

        let pos = tape.mul_scalar(tape.rowwise_dot(a1, a2), inv_tau);
        let epos = tape.exp(pos);
        let dir = |a: Tensor| {
            let sims = tape.mul_scalar(tape.matmul_nt(a, nb), inv_tau);
            let negsum = tape.sum_cols(tape.exp(sims));
            tape.sub(tape.ln_guarded(tape.add(epos, negsum), S::zero()), pos)
        };
        let l = tape.add(dir(a1), dir(a2));
        acc = tape.add(acc, tape.sum_all(l));
    }
    Ok(tape.mul_scalar(acc, S::from_usize(anchors.len()).recip()))
}
