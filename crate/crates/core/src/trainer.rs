//! The training loop: batch assembly, the per-step forward passes, loss
//! composition, SGD updates, schedules, logging and checkpoints.
//!
//! Each step runs up to six forwards: the original labeled batch (tracked,
//! it carries the supervised loss), the original unlabeled batch (gradient-
//! free, it only supplies pseudo targets and negative embeddings), and the
//! two intensity-augmented views of both batches. Zero-weighted loss terms
//! are skipped outright, so a run with `alpha = beta = 0` performs exactly
//! the supervised computation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use ndarray::{Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{grid_distort, make_views, GridDistortConfig, IntensityAugmentConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossWeights, LOG_EPS};
use crate::network::{save_checkpoint, CheckpointMeta, UNet3d};
use crate::sampling::{bidirectional_contrastive_loss, downsample_pseudo_labels, ContrastiveConfig, PseudoLabelGrid};
use crate::schedule::Schedules;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::volume::{extract_patch, LabelMap, Volume};

/// Everything a training run needs beyond the network itself.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Fraction of the epoch budget spent ramping alpha/beta up.
    pub warmup_fraction: f64,
    pub alpha_max: f64,
    pub beta_max: f64,
    pub seed: u64,
    pub patch_size: [usize; 3],
    /// Pseudo-target sharpening temperature.
    pub temperature_t: f64,
    /// Include the background class in the Dice term.
    pub include_background: bool,
    /// Ignore unlabeled data and the unsupervised losses entirely.
    pub supervised_only: bool,
    /// Save a checkpoint every this many epochs (the final epoch always saves).
    pub checkpoint_every: usize,
    pub intensity: IntensityAugmentConfig,
    pub distort: GridDistortConfig,
    pub contrastive: ContrastiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_labeled: 2,
            batch_unlabeled: 2,
            lr0: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            warmup_fraction: 0.2,
            alpha_max: 0.1,
            beta_max: 0.1,
            seed: 1,
            patch_size: [64, 64, 64],
            temperature_t: 0.5,
            include_background: false,
            supervised_only: false,
            checkpoint_every: 20,
            intensity: IntensityAugmentConfig::default(),
            distort: GridDistortConfig::default(),
            contrastive: ContrastiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return Err(Error::Config("weight_decay and poly_power must be >= 0".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in (0,1], got {}",
                self.warmup_fraction
            )));
        }
        if self.alpha_max < 0.0 || self.beta_max < 0.0 {
            return Err(Error::Config("alpha_max and beta_max must be >= 0".into()));
        }
        if self.patch_size.iter().any(|&p| p == 0) {
            return Err(Error::Config("patch_size must be >= 1 per axis".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        self.weights_at(0.0, 0.0).validate()?;
        self.intensity.validate()?;
        self.distort.validate()?;
        self.contrastive.validate()?;
        Ok(())
    }

    /// Current-epoch loss weights.
    fn weights_at(&self, alpha: f64, beta: f64) -> LossWeights {
        LossWeights {
            alpha,
            beta,
            temperature_t: self.temperature_t,
            temperature_tau: self.contrastive.tau,
            epsilon: LOG_EPS,
        }
    }

    /// One pass over the unlabeled set per epoch; labeled data is cycled.
    /// Supervised-only runs pace by the labeled set instead.
    pub fn steps_per_epoch(&self, n_labeled: usize, m_unlabeled: usize) -> usize {
        if self.supervised_only || m_unlabeled == 0 {
            n_labeled.div_ceil(self.batch_labeled)
        } else {
            m_unlabeled.div_ceil(self.batch_unlabeled)
        }
    }

    fn warmup_epochs(&self) -> usize {
        ((self.warmup_fraction * self.epochs as f64).ceil() as usize).max(1)
    }

    fn schedules(&self, steps_per_epoch: usize) -> Schedules {
        Schedules {
            max_steps: self.epochs * steps_per_epoch,
            lr0: self.lr0,
            poly_power: self.poly_power,
            warmup_epochs: self.warmup_epochs(),
            alpha_max: if self.supervised_only { 0.0 } else { self.alpha_max },
            beta_max: if self.supervised_only { 0.0 } else { self.beta_max },
        }
    }
}

/// One assembled step: base patches after geometric augmentation. Views are
/// drawn inside the step so the intensity perturbations land on the tape
/// inputs directly.
pub struct TrainBatch {
    pub labeled: Vec<(Volume, LabelMap)>,
    pub unlabeled: Vec<Volume>,
}

/// Where a finished run left its artifacts.
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub steps_run: usize,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

pub struct Trainer {
    pub net: UNet3d<f32>,
    cfg: TrainConfig,
    velocity: Vec<ArrayD<f32>>,
    start_epoch: usize,
}

/// Per-epoch rng; stream derivation keeps epochs independent so a resumed
/// run replays the remaining epochs bit-exactly.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn stack_images(patches: &[&Array3<f32>]) -> ArrayD<f32> {
    let s = patches[0].shape();
    let mut out = ArrayD::<f32>::zeros(vec![patches.len(), 1, s[0], s[1], s[2]]);
    for (b, p) in patches.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), b)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(p);
    }
    out
}

fn stack_labels(labels: &[&Array3<u8>]) -> ArrayD<u8> {
    let s = labels[0].shape();
    let mut out = ArrayD::<u8>::zeros(vec![labels.len(), s[0], s[1], s[2]]);
    for (b, l) in labels.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), b).assign(l);
    }
    out
}

/// Mean per-voxel KL of `reference` from `view`, mirroring the loss kernel.
fn mean_kl(view: &ArrayD<f32>, reference: &ArrayD<f32>) -> f64 {
    let (v, r) = (view.as_slice().unwrap(), reference.as_slice().unwrap());
    let c = view.shape()[1];
    let voxels = view.len() / c;
    let eps = LOG_EPS;
    let mut acc = 0.0;
    for (&q, &p) in v.iter().zip(r) {
        let (q, p) = (q as f64, p as f64);
        acc += p * ((p + eps).ln() - (q + eps).ln());
    }
    acc / voxels as f64
}

impl Trainer {
    pub fn new(net: UNet3d<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let div = net.config().spatial_divisor();
        if cfg.patch_size.iter().any(|&p| p % div != 0) {
            return Err(Error::Config(format!(
                "patch_size {:?} must be divisible by the network's spatial divisor {div}",
                cfg.patch_size
            )));
        }
        let velocity =
            (0..net.params.len()).map(|i| ArrayD::zeros(net.params.entry(i).1.shape())).collect();
        Ok(Trainer { net, cfg, velocity, start_epoch: 0 })
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::fit`];
    /// training continues at the stored epoch boundary.
    pub fn resume(path: impl AsRef<Path>, cfg: TrainConfig) -> Result<Self> {
        let (net, meta, opt_state) = crate::network::load_checkpoint::<f32>(path.as_ref(), None)?;
        if meta.seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with seed {}, config says {}",
                meta.seed, cfg.seed
            )));
        }
        let mut trainer = Trainer::new(net, cfg)?;
        trainer.start_epoch = meta.epoch as usize;
        if let Some(state) = opt_state {
            for (name, value) in state {
                let idx = (0..trainer.net.params.len())
                    .find(|&i| trainer.net.params.entry(i).0 == name)
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("optimizer state names unknown parameter '{name}'"))
                    })?;
                if trainer.velocity[idx].shape() != value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state for '{name}' has wrong shape"
                    )));
                }
                trainer.velocity[idx] = value;
            }
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimization step on an assembled batch. `weights.alpha/beta` are
    /// the already-scheduled values for the current epoch.
    pub fn train_step(
        &mut self,
        batch: &TrainBatch,
        lr: f64,
        weights: &LossWeights,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossReport> {
        if batch.labeled.is_empty() {
            return Err(Error::InvalidArgument("train_step: empty labeled batch".into()));
        }
        let unsupervised = !self.cfg.supervised_only && (weights.alpha > 0.0 || weights.beta > 0.0);
        if unsupervised && batch.unlabeled.is_empty() {
            return Err(Error::InvalidArgument("train_step: empty unlabeled batch".into()));
        }

        let tape = Tape::<f32>::new();
        let params = self.net.bind(&tape);
        let with_views = weights.alpha > 0.0 || weights.beta > 0.0;
        let with_emb = weights.beta > 0.0;
        let t_sharp = weights.temperature_t;

        // Original labeled forward: carries the supervised loss and, when the
        // contrastive term is active, one negative-source embedding map.
        let images: Vec<&Array3<f32>> = batch.labeled.iter().map(|(v, _)| &v.data).collect();
        let labels: Vec<&Array3<u8>> = batch.labeled.iter().map(|(_, y)| &y.data).collect();
        let xl = tape.leaf(stack_images(&images), false);
        let orig_l = self.net.forward(&tape, &params, xl, with_emb)?;
        let seg = losses::seg_loss(
            &tape,
            orig_l.probs,
            Rc::new(stack_labels(&labels)),
            self.cfg.include_background,
        )?;
        let mut total = seg;

        let mut rp_l = None;
        let mut rp_u = None;
        let mut bc_l = None;
        let mut bc_u = None;
        let mut kl_sum = 0.0;
        let mut kl_terms = 0usize;

        if with_views {
            // Labeled views.
            let mut v1 = Vec::with_capacity(batch.labeled.len());
            let mut v2 = Vec::with_capacity(batch.labeled.len());
            for (vol, _) in &batch.labeled {
                let (a, b) = make_views(vol, &self.cfg.intensity, rng);
                v1.push(a.data);
                v2.push(b.data);
            }
            let x1 = tape.leaf(stack_images(&v1.iter().collect::<Vec<_>>()), false);
            let x2 = tape.leaf(stack_images(&v2.iter().collect::<Vec<_>>()), false);
            let view1_l = self.net.forward(&tape, &params, x1, with_emb)?;
            let view2_l = self.net.forward(&tape, &params, x2, with_emb)?;

            // Unlabeled: gradient-free original forward on a scratch tape.
            let unl = if unsupervised {
                let imgs: Vec<&Array3<f32>> = batch.unlabeled.iter().map(|v| &v.data).collect();
                let stacked = stack_images(&imgs);
                let scratch = Tape::<f32>::no_grad();
                let sp = self.net.bind(&scratch);
                let sx = scratch.leaf(stacked, false);
                let out = self.net.forward(&scratch, &sp, sx, with_emb)?;
                let logits = scratch.value(out.logits);
                let probs = scratch.value(out.probs);
                let emb = out.embeddings.map(|e| scratch.value(e));

                let mut v1 = Vec::with_capacity(batch.unlabeled.len());
                let mut v2 = Vec::with_capacity(batch.unlabeled.len());
                for vol in &batch.unlabeled {
                    let (a, b) = make_views(vol, &self.cfg.intensity, rng);
                    v1.push(a.data);
                    v2.push(b.data);
                }
                let x1 = tape.leaf(stack_images(&v1.iter().collect::<Vec<_>>()), false);
                let x2 = tape.leaf(stack_images(&v2.iter().collect::<Vec<_>>()), false);
                let view1_u = self.net.forward(&tape, &params, x1, with_emb)?;
                let view2_u = self.net.forward(&tape, &params, x2, with_emb)?;
                Some((logits, probs, emb, view1_u, view2_u))
            } else {
                None
            };

            if weights.alpha > 0.0 {
                let l = losses::rectified_pseudo_loss(
                    &tape,
                    view1_l.probs,
                    view2_l.probs,
                    orig_l.logits,
                    t_sharp,
                )?;
                total = tape.add(total, tape.mul_scalar(l, f32::from_f64(weights.alpha)));
                rp_l = Some(tape.item(l).to_f64());
                let ref_l = tape.value(orig_l.probs);
                kl_sum += mean_kl(&tape.value(view1_l.probs), &ref_l);
                kl_sum += mean_kl(&tape.value(view2_l.probs), &ref_l);
                kl_terms += 2;

                if let Some((logits_u, probs_u, _, view1_u, view2_u)) = &unl {
                    let zu = tape.leaf_shared(Rc::clone(logits_u), false);
                    let l = losses::rectified_pseudo_loss(
                        &tape,
                        view1_u.probs,
                        view2_u.probs,
                        zu,
                        t_sharp,
                    )?;
                    total = tape.add(total, tape.mul_scalar(l, f32::from_f64(weights.alpha)));
                    rp_u = Some(tape.item(l).to_f64());
                    kl_sum += mean_kl(&tape.value(view1_u.probs), probs_u);
                    kl_sum += mean_kl(&tape.value(view2_u.probs), probs_u);
                    kl_terms += 2;
                }
            }

            if weights.beta > 0.0 {
                let stride = orig_l.embedding_stride;
                // Pooled per-item pseudo grids and negative sources, labeled
                // first. Item i draws negatives from item (i+1) mod B.
                let mut grids: Vec<PseudoLabelGrid<f32>> =
                    downsample_pseudo_labels(&tape.value(orig_l.probs), stride)?;
                let emb_l = orig_l.embeddings.expect("labeled embeddings requested");
                let n_l = batch.labeled.len();
                let mut sources: Vec<(Tensor, usize)> = (0..n_l).map(|i| (emb_l, i)).collect();
                let mut anchors: Vec<(Tensor, Tensor, usize)> = Vec::new();
                {
                    let v1 = view1_l.embeddings.expect("view embeddings requested");
                    let v2 = view2_l.embeddings.expect("view embeddings requested");
                    anchors.extend((0..n_l).map(|i| (v1, v2, i)));
                }
                if let Some((_, probs_u, emb_u, view1_u, view2_u)) = &unl {
                    grids.extend(downsample_pseudo_labels(probs_u, stride)?);
                    let eu = tape
                        .leaf_shared(Rc::clone(emb_u.as_ref().expect("unlabeled embeddings")), false);
                    let v1 = view1_u.embeddings.expect("view embeddings requested");
                    let v2 = view2_u.embeddings.expect("view embeddings requested");
                    for j in 0..batch.unlabeled.len() {
                        sources.push((eu, j));
                        anchors.push((v1, v2, j));
                    }
                }
                let b_total = sources.len();
                let mut sum_l = tape.scalar(0.0f32);
                let mut sum_u = tape.scalar(0.0f32);
                for i in 0..b_total {
                    let partner = (i + 1) % b_total;
                    let (v1, v2, local) = anchors[i];
                    let (src, src_local) = sources[partner];
                    let item = bidirectional_contrastive_loss(
                        &tape,
                        v1,
                        v2,
                        local,
                        src,
                        src_local,
                        &grids[i],
                        &grids[partner],
                        &self.cfg.contrastive,
                        Some(rng),
                    )?;
                    if i < n_l {
                        sum_l = tape.add(sum_l, item);
                    } else {
                        sum_u = tape.add(sum_u, item);
                    }
                }
                let l = tape.mul_scalar(sum_l, f32::from_usize(n_l).recip());
                total = tape.add(total, tape.mul_scalar(l, f32::from_f64(weights.beta)));
                bc_l = Some(tape.item(l).to_f64());
                if b_total > n_l {
                    let u = tape.mul_scalar(sum_u, f32::from_usize(b_total - n_l).recip());
                    total = tape.add(total, tape.mul_scalar(u, f32::from_f64(weights.beta)));
                    bc_u = Some(tape.item(u).to_f64());
                }
            }
        }

        let seg_v = tape.item(seg).to_f64();
        let total_v = tape.item(total).to_f64();
        if !total_v.is_finite() {
            return Err(Error::Degenerate(format!("loss diverged to {total_v}")));
        }

        let handles = params.handles().to_vec();
        let mut grads = tape.backward(total);
        drop(tape);
        self.apply_sgd(lr, &handles, &mut grads)?;

        let (rp_l, rp_u) = (rp_l.unwrap_or(0.0), rp_u.unwrap_or(0.0));
        let (bc_l, bc_u) = (bc_l.unwrap_or(0.0), bc_u.unwrap_or(0.0));
        Ok(LossReport {
            seg: seg_v,
            rectified_pseudo: rp_l + rp_u,
            contrastive: bc_l + bc_u,
            total_supervised: seg_v + weights.alpha * rp_l + weights.beta * bc_l,
            total_unsupervised: weights.alpha * rp_u + weights.beta * bc_u,
            uncertainty_mean: if kl_terms > 0 { kl_sum / kl_terms as f64 } else { 0.0 },
        })
    }

    /// SGD with momentum; weight decay touches conv weights only.
    fn apply_sgd(
        &mut self,
        lr: f64,
        handles: &[Tensor],
        grads: &mut crate::tensor::Grads<f32>,
    ) -> Result<()> {
        let (lr, mu, wd) =
            (lr as f32, self.cfg.momentum as f32, self.cfg.weight_decay as f32);
        for (i, &t) in handles.iter().enumerate() {
            let Some(mut g) = grads.take(t) else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Degenerate(format!(
                    "non-finite gradient for '{}'",
                    self.net.params.entry(i).0
                )));
            }
            let decay = wd > 0.0 && self.net.params.entry(i).0.ends_with(".weight");
            if decay {
                let w = Rc::clone(self.net.params.entry(i).1);
                g.zip_mut_with(&w, |gv, &wv| *gv += wd * wv);
            }
            let v = &mut self.velocity[i];
            v.zip_mut_with(&g, |vv, &gv| *vv = mu * *vv + gv);
            let step = v.mapv(|vv| lr * vv);
            self.net.params.value_mut(i).zip_mut_with(&step, |wv, &sv| *wv -= sv);
        }
        Ok(())
    }

    fn assemble_batch(
        &self,
        data: &Dataset,
        lab_order: &[usize],
        unl_order: &[usize],
        step_in_epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> TrainBatch {
        let mut labeled = Vec::with_capacity(self.cfg.batch_labeled);
        for k in 0..self.cfg.batch_labeled {
            let idx = lab_order[(step_in_epoch * self.cfg.batch_labeled + k) % lab_order.len()];
            let (vol, lab) = &data.labeled[idx];
            let (p, l) = extract_patch(vol, Some(lab), self.cfg.patch_size, rng);
            let (p, l) = grid_distort(&p, l.as_ref(), &self.cfg.distort, rng);
            labeled.push((p, l.expect("label present")));
        }
        let mut unlabeled = Vec::new();
        if !self.cfg.supervised_only && !unl_order.is_empty() {
            for k in 0..self.cfg.batch_unlabeled {
                let idx =
                    unl_order[(step_in_epoch * self.cfg.batch_unlabeled + k) % unl_order.len()];
                let (p, _) = extract_patch(&data.unlabeled[idx], None, self.cfg.patch_size, rng);
                let (p, _) = grid_distort(&p, None, &self.cfg.distort, rng);
                unlabeled.push(p);
            }
        }
        TrainBatch { labeled, unlabeled }
    }

    /// Runs the full epoch budget, appending one CSV row per step and saving
    /// periodic plus final checkpoints under `out_dir`.
    pub fn fit(&mut self, data: &Dataset, out_dir: impl AsRef<Path>) -> Result<FitSummary> {
        let out_dir = out_dir.as_ref();
        let cfg = self.cfg.clone();
        if data.n_labeled() < cfg.batch_labeled {
            return Err(Error::Config(format!(
                "need at least {} labeled volumes, have {}",
                cfg.batch_labeled,
                data.n_labeled()
            )));
        }
        if !cfg.supervised_only && data.m_unlabeled() < cfg.batch_unlabeled {
            return Err(Error::Config(format!(
                "need at least {} unlabeled volumes, have {}",
                cfg.batch_unlabeled,
                data.m_unlabeled()
            )));
        }
        if self.start_epoch >= cfg.epochs {
            return Err(Error::Config(format!(
                "checkpoint already covers all {} epochs",
                cfg.epochs
            )));
        }
        let spe = cfg.steps_per_epoch(data.n_labeled(), data.m_unlabeled());
        let sched = cfg.schedules(spe);

        std::fs::create_dir_all(out_dir.join("checkpoints"))?;
        let log_path = out_dir.join("train_log.csv");
        let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        if log.metadata()?.len() == 0 {
            writeln!(log, "step,epoch,lr,alpha,beta,seg,rp,bc,sup_total,unsup_total,kl_mean")?;
        }

        let mut steps_run = 0;
        for epoch in self.start_epoch..cfg.epochs {
            let mut rng = epoch_rng(cfg.seed, epoch);
            let mut lab_order: Vec<usize> = (0..data.n_labeled()).collect();
            lab_order.shuffle(&mut rng);
            let mut unl_order: Vec<usize> = (0..data.m_unlabeled()).collect();
            unl_order.shuffle(&mut rng);

            let weights = cfg.weights_at(sched.alpha(epoch), sched.beta(epoch));
            for s in 0..spe {
                let step = epoch * spe + s;
                let lr = sched.lr(step)?;
                let batch = self.assemble_batch(data, &lab_order, &unl_order, s, &mut rng);
                let r = self.train_step(&batch, lr, &weights, &mut rng)?;
                writeln!(
                    log,
                    "{step},{epoch},{lr},{},{},{},{},{},{},{},{}",
                    weights.alpha,
                    weights.beta,
                    r.seg,
                    r.rectified_pseudo,
                    r.contrastive,
                    r.total_supervised,
                    r.total_unsupervised,
                    r.uncertainty_mean
                )?;
                steps_run += 1;
            }

            let done = epoch + 1;
            if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
                let meta = CheckpointMeta {
                    step: (done * spe) as u64,
                    epoch: done as u64,
                    seed: cfg.seed,
                };
                let state: Vec<(String, Rc<ArrayD<f32>>)> = (0..self.net.params.len())
                    .map(|i| {
                        (self.net.params.entry(i).0.to_string(), Rc::new(self.velocity[i].clone()))
                    })
                    .collect();
                let path = out_dir.join("checkpoints").join(format!("epoch_{done:04}.ckpt"));
                save_checkpoint(&path, &self.net, &meta, Some(&state))?;
                if done == cfg.epochs {
                    let last = out_dir.join("checkpoints").join("final.ckpt");
                    save_checkpoint(&last, &self.net, &meta, Some(&state))?;
                }
            }
        }
        log.flush()?;
        Ok(FitSummary {
            steps_run,
            final_checkpoint: out_dir.join("checkpoints").join("final.ckpt"),
            log_path,
        })
    }
}
