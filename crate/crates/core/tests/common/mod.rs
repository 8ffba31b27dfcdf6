//! Brute-force reference implementations shared by the oracle test suites.
//!
//! Everything here is written as plain nested loops over flat `f64` slices,
//! straight from the loss definitions, so agreement with the tensor kernels
//! is meaningful rather than circular. Layout convention matches the crate:
//! `[N, C, spatial...]` stored row-major, voxel index `v` linear over the
//! spatial dims.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LOG_EPS: f64 = 1e-8;
pub const DICE_EPS: f64 = 1e-5;

/// Probability/logit map with explicit layout bookkeeping.
#[derive(Debug, Clone)]
pub struct Map {
    pub data: Vec<f64>,
    pub n: usize,
    pub c: usize,
    pub sp: usize,
}

impl Map {
    pub fn at(&self, ni: usize, ci: usize, v: usize) -> f64 {
        self.data[(ni * self.c + ci) * self.sp + v]
    }

    pub fn shape5(&self, d: usize, h: usize, w: usize) -> Vec<usize> {
        assert_eq!(d * h * w, self.sp);
        vec![self.n, self.c, d, h, w]
    }
}

pub fn rand_logits(rng: &mut ChaCha8Rng, n: usize, c: usize, sp: usize) -> Map {
    let data = (0..n * c * sp).map(|_| rng.random_range(-2.0..2.0)).collect();
    Map { data, n, c, sp }
}

/// Random probability map: positive raws normalised per voxel.
pub fn rand_probs(rng: &mut ChaCha8Rng, n: usize, c: usize, sp: usize) -> Map {
    let mut m = rand_logits(rng, n, c, sp);
    for ni in 0..n {
        for v in 0..sp {
            let mut z = 0.0;
            for ci in 0..c {
                let x = m.data[(ni * c + ci) * sp + v].exp();
                m.data[(ni * c + ci) * sp + v] = x;
                z += x;
            }
            for ci in 0..c {
                m.data[(ni * c + ci) * sp + v] /= z;
            }
        }
    }
    m
}

pub fn rand_labels(rng: &mut ChaCha8Rng, n: usize, c: usize, sp: usize) -> Vec<u8> {
    (0..n * sp).map(|_| rng.random_range(0..c) as u8).collect()
}

/// Per-voxel softmax of `z / t` along the channel axis.
pub fn softmax_t(z: &Map, t: f64) -> Map {
    let mut out = z.clone();
    for ni in 0..z.n {
        for v in 0..z.sp {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..z.c {
                mx = mx.max(z.at(ni, ci, v) / t);
            }
            let mut sum = 0.0;
            for ci in 0..z.c {
                let e = (z.at(ni, ci, v) / t - mx).exp();
                out.data[(ni * z.c + ci) * z.sp + v] = e;
                sum += e;
            }
            for ci in 0..z.c {
                out.data[(ni * z.c + ci) * z.sp + v] /= sum;
            }
        }
    }
    out
}

/// `-ln(q[label] + eps)` per voxel.
pub fn hard_ce_map(q: &Map, labels: &[u8]) -> Vec<f64> {
    let mut out = vec![0.0; q.n * q.sp];
    for ni in 0..q.n {
        for v in 0..q.sp {
            let lab = labels[ni * q.sp + v] as usize;
            out[ni * q.sp + v] = -(q.at(ni, lab, v) + LOG_EPS).ln();
        }
    }
    out
}

/// `-sum_c t_c ln(q_c + eps)` per voxel.
pub fn soft_ce_map(q: &Map, target: &Map) -> Vec<f64> {
    let mut out = vec![0.0; q.n * q.sp];
    for ni in 0..q.n {
        for v in 0..q.sp {
            let mut acc = 0.0;
            for ci in 0..q.c {
                acc -= target.at(ni, ci, v) * (q.at(ni, ci, v) + LOG_EPS).ln();
            }
            out[ni * q.sp + v] = acc;
        }
    }
    out
}

/// `sum_c r_c (ln(r_c + eps) - ln(q_c + eps))` per voxel.
pub fn kl_map(q: &Map, reference: &Map) -> Vec<f64> {
    let mut out = vec![0.0; q.n * q.sp];
    for ni in 0..q.n {
        for v in 0..q.sp {
            let mut acc = 0.0;
            for ci in 0..q.c {
                let r = reference.at(ni, ci, v);
                acc += r * ((r + LOG_EPS).ln() - (q.at(ni, ci, v) + LOG_EPS).ln());
            }
            out[ni * q.sp + v] = acc;
        }
    }
    out
}

/// Soft Dice loss averaged over scored classes.
pub fn dice_loss(q: &Map, labels: &[u8], include_background: bool) -> f64 {
    let first = if include_background { 0 } else { 1 };
    let mut loss = 0.0;
    for ci in first..q.c {
        let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
        for ni in 0..q.n {
            for v in 0..q.sp {
                let p = q.at(ni, ci, v);
                psum += p;
                if labels[ni * q.sp + v] as usize == ci {
                    gsum += 1.0;
                    inter += p;
                }
            }
        }
        loss += 1.0 - (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS);
    }
    loss / (q.c - first) as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Eq. 1: mean voxel cross-entropy plus soft Dice.
pub fn seg_loss(q: &Map, labels: &[u8], include_background: bool) -> f64 {
    mean(&hard_ce_map(q, labels)) + dice_loss(q, labels, include_background)
}

/// Per-voxel cosine between channel vectors, eps inside each norm.
pub fn cosine_map(a: &Map, b: &Map) -> Vec<f64> {
    let mut out = vec![0.0; a.n * a.sp];
    for ni in 0..a.n {
        for v in 0..a.sp {
            let (mut dot, mut na, mut nb) = (0.0, LOG_EPS, LOG_EPS);
            for ci in 0..a.c {
                let (x, y) = (a.at(ni, ci, v), b.at(ni, ci, v));
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            out[ni * a.sp + v] = dot / (na.sqrt() * nb.sqrt());
        }
    }
    out
}

/// Eqs. 7-8: mean of `1 - cos`.
pub fn consistency_loss(a: &Map, b: &Map) -> f64 {
    mean(&cosine_map(a, b).iter().map(|c| 1.0 - c).collect::<Vec<_>>())
}

/// Eq. 5: mean over voxels of `exp(-D) * L_p + D`, with the pseudo target
/// `softmax(z / t)` and `D` the KL of `softmax(z)` from the view.
pub fn urp_loss(view: &Map, z: &Map, t: f64) -> f64 {
    let target = softmax_t(z, t);
    let reference = softmax_t(z, 1.0);
    let lp = soft_ce_map(view, &target);
    let d = kl_map(view, &reference);
    let per: Vec<f64> = lp.iter().zip(&d).map(|(l, dk)| (-dk).exp() * l + dk).collect();
    mean(&per)
}

/// Eq. 9: both rectified view terms plus the cross-view consistency.
pub fn rp_loss(view1: &Map, view2: &Map, z: &Map, t: f64) -> f64 {
    urp_loss(view1, z, t) + urp_loss(view2, z, t) + consistency_loss(view1, view2)
}

/// One image's pseudo-label grid, flattened.
#[derive(Debug, Clone)]
pub struct Grid {
    pub classes: Vec<u8>,
    pub conf: Vec<f64>,
}

/// Confident negative pick: eligible voxels (class differs from the anchor's)
/// ordered by confidence descending, ties to the lower index, truncated.
pub fn pick_negatives(grid: &Grid, anchor_class: u8, capacity: usize) -> Vec<usize> {
    let mut eligible: Vec<usize> =
        (0..grid.classes.len()).filter(|&v| grid.classes[v] != anchor_class).collect();
    eligible.sort_by(|&a, &b| {
        grid.conf[b].partial_cmp(&grid.conf[a]).unwrap().then(a.cmp(&b))
    });
    eligible.truncate(capacity);
    eligible
}

/// Eqs. 10-12: bidirectional voxel InfoNCE averaged over every anchor
/// location; anchors whose negative set is empty contribute zero. Embedding
/// maps are `[E, sp]` slices (single image), assumed unit-norm.
pub fn infonce_loss(
    view1: &Map,
    view2: &Map,
    negs: &Map,
    pl: &Grid,
    pl_neg: &Grid,
    tau: f64,
    capacity: usize,
) -> f64 {
    let e = view1.c;
    let emb = |m: &Map, v: usize| -> Vec<f64> { (0..e).map(|ch| m.at(0, ch, v)).collect() };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for v in 0..view1.sp {
        let bank = pick_negatives(pl_neg, pl.classes[v], capacity);
        if bank.is_empty() {
            continue;
        }
        let (a1, a2) = (emb(view1, v), emb(view2, v));
        let pos = dot(&a1, &a2) / tau;
        for a in [&a1, &a2] {
            let negsum: f64 = bank.iter().map(|&nv| (dot(a, &emb(negs, nv)) / tau).exp()).sum();
            total += (pos.exp() + negsum).ln() - pos;
        }
    }
    total / view1.sp as f64
}

// ---- metrics oracles -------------------------------------------------------

/// Counting Dice over binary masks; both empty scores 1, one empty scores 0.
pub fn dsc(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let (np, ng) = (pred.iter().filter(|p| **p).count(), gt.iter().filter(|g| **g).count());
    if np + ng == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (np + ng) as f64
}

/// Boundary voxels: inside the mask with a 6-neighbour outside it, where the
/// volume border counts as outside.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let exposed = z == 0
                    || z == d - 1
                    || y == 0
                    || y == h - 1
                    || x == 0
                    || x == w - 1
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Linear-interpolated inclusive percentile at rank `q * (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// All-pairs surface distances: (HD95, ASD) over the pooled directed
/// boundary-to-boundary distances, or `None` when either mask is empty.
pub fn surface_distances(
    pred: &[bool],
    gt: &[bool],
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Option<(f64, f64)> {
    if !pred.iter().any(|&p| p) || !gt.iter().any(|&g| g) {
        return None;
    }
    let bp = boundary(pred, dims);
    let bg = boundary(gt, dims);
    let dist = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
        let mut acc = 0.0;
        for ax in 0..3 {
            let dd = (a[ax] as f64 - b[ax] as f64) * spacing[ax];
            acc += dd * dd;
        }
        acc.sqrt()
    };
    let nearest = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut pooled = nearest(&bp, &bg);
    pooled.extend(nearest(&bg, &bp));
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Some((percentile(&pooled, 0.95), asd))
}
