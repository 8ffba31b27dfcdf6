//! Fused per-voxel loss kernels with hand-derived backward passes.
//!
//! Each "map" op consumes the channel axis of a `[N, C, spatial...]`
//! probability tensor and produces a `[N, spatial...]` per-voxel loss map,
//! which composes with elementwise ops and `mean_all` to build the training
//! objective. Targets are plain arrays: gradient never flows into them.

use std::rc::Rc;

use ndarray::ArrayD;

use super::{Scalar, Tape, Tensor};

fn map_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(1);
    s
}

fn check_probs_vs_target<S: Scalar>(q: &ArrayD<S>, t: &ArrayD<S>, what: &str) {
    assert!(q.ndim() >= 3, "{what}: expected [N, C, spatial...]");
    assert_eq!(q.shape(), t.shape(), "{what}: target shape differs from probabilities");
}

impl<S: Scalar> Tape<S> {
    /// Per-voxel cross-entropy against a soft target distribution:
    /// `-sum_c t_c ln(q_c + eps)`.
    pub fn soft_ce_map(&self, q: Tensor, target: Rc<ArrayD<S>>, eps: S) -> Tensor {
        let vq = self.value(q);
        check_probs_vs_target(&vq, &target, "soft_ce_map");
        let (n, c, sp) = super::norm_dims(&vq);
        let qs = vq.as_slice().unwrap();
        let ts = target.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(map_shape(vq.shape()));
        {
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                let off = ni * c * sp;
                let ob = &mut os[ni * sp..][..sp];
                for ci in 0..c {
                    let pl = off + ci * sp;
                    for i in 0..sp {
                        ob[i] = ob[i] - ts[pl + i] * (qs[pl + i] + eps).ln();
                    }
                }
            }
        }
        let cq = Rc::clone(&vq);
        self.push(
            out,
            self.requires_grad(q),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(q, || {
                    let qs = cq.as_slice().unwrap();
                    let ts = target.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut dq = ArrayD::<S>::zeros(cq.shape());
                    let ds = dq.as_slice_mut().unwrap();
                    for ni in 0..n {
                        let off = ni * c * sp;
                        let gb = &gs[ni * sp..][..sp];
                        for ci in 0..c {
                            let pl = off + ci * sp;
                            for i in 0..sp {
                                ds[pl + i] = -ts[pl + i] / (qs[pl + i] + eps) * gb[i];
                            }
                        }
                    }
                    dq
                })
            })),
        )
    }

    /// Per-voxel KL divergence of a fixed reference distribution from `q`:
    /// `sum_c r_c (ln(r_c + eps) - ln(q_c + eps))`.
    pub fn kl_map(&self, q: Tensor, reference: Rc<ArrayD<S>>, eps: S) -> Tensor {
        let vq = self.value(q);
        check_probs_vs_target(&vq, &reference, "kl_map");
        let (n, c, sp) = super::norm_dims(&vq);
        let qs = vq.as_slice().unwrap();
        let rs = reference.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(map_shape(vq.shape()));
        {
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                let off = ni * c * sp;
                let ob = &mut os[ni * sp..][..sp];
                for ci in 0..c {
                    let pl = off + ci * sp;
                    for i in 0..sp {
                        let r = rs[pl + i];
                        ob[i] = ob[i] + r * ((r + eps).ln() - (qs[pl + i] + eps).ln());
                    }
                }
            }
        }
        let cq = Rc::clone(&vq);
        self.push(
            out,
            self.requires_grad(q),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(q, || {
                    let qs = cq.as_slice().unwrap();
                    let rs = reference.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut dq = ArrayD::<S>::zeros(cq.shape());
                    let ds = dq.as_slice_mut().unwrap();
                    for ni in 0..n {
                        let off = ni * c * sp;
                        let gb = &gs[ni * sp..][..sp];
                        for ci in 0..c {
                            let pl = off + ci * sp;
                            for i in 0..sp {
                                ds[pl + i] = -rs[pl + i] / (qs[pl + i] + eps) * gb[i];
                            }
                        }
                    }
                    dq
                })
            })),
        )
    }

    /// Per-voxel cross-entropy against integer labels: `-ln(q_label + eps)`.
    pub fn hard_ce_map(&self, q: Tensor, labels: Rc<ArrayD<u8>>, eps: S) -> Tensor {
        let vq = self.value(q);
        let (n, c, sp) = super::norm_dims(&vq);
        assert_eq!(
            labels.shape(),
            map_shape(vq.shape()).as_slice(),
            "hard_ce_map: label shape must match probabilities without channels"
        );
        let qs = vq.as_slice().unwrap();
        let ls = labels.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(map_shape(vq.shape()));
        {
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                let off = ni * c * sp;
                for i in 0..sp {
                    let lab = ls[ni * sp + i] as usize;
                    assert!(lab < c, "hard_ce_map: label {lab} out of range for {c} classes");
                    os[ni * sp + i] = -(qs[off + lab * sp + i] + eps).ln();
                }
            }
        }
        let cq = Rc::clone(&vq);
        self.push(
            out,
            self.requires_grad(q),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(q, || {
                    let qs = cq.as_slice().unwrap();
                    let ls = labels.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut dq = ArrayD::<S>::zeros(cq.shape());
                    let ds = dq.as_slice_mut().unwrap();
                    for ni in 0..n {
                        let off = ni * c * sp;
                        for i in 0..sp {
                            let lab = ls[ni * sp + i] as usize;
                            let idx = off + lab * sp + i;
                            ds[idx] = -gs[ni * sp + i] / (qs[idx] + eps);
                        }
                    }
                    dq
                })
            })),
        )
    }

    /// Per-voxel cosine similarity between the channel vectors of two maps.
    pub fn cosine_map(&self, a: Tensor, b: Tensor, eps: S) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "cosine_map: shapes differ");
        let (n, c, sp) = super::norm_dims(&va);
        let asl = va.as_slice().unwrap();
        let bsl = vb.as_slice().unwrap();
        let total = n * sp;
        let mut na = vec![eps; total];
        let mut nb = vec![eps; total];
        let mut dot = vec![S::zero(); total];
        for ni in 0..n {
            let off = ni * c * sp;
            for ci in 0..c {
                let pl = off + ci * sp;
                for i in 0..sp {
                    let j = ni * sp + i;
                    na[j] = na[j] + asl[pl + i] * asl[pl + i];
                    nb[j] = nb[j] + bsl[pl + i] * bsl[pl + i];
                    dot[j] = dot[j] + asl[pl + i] * bsl[pl + i];
                }
            }
        }
        for v in na.iter_mut() {
            *v = v.sqrt();
        }
        for v in nb.iter_mut() {
            *v = v.sqrt();
        }
        let mut out = ArrayD::<S>::zeros(map_shape(va.shape()));
        {
            let os = out.as_slice_mut().unwrap();
            for (o, ((&d, &x), &y)) in os.iter_mut().zip(dot.iter().zip(&na).zip(&nb)) {
                *o = d / (x * y);
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (cva, cvb) = (Rc::clone(&va), Rc::clone(&vb));
        let cos = Rc::new(out.clone());
        self.push(
            out,
            rg,
            Some(Box::new(move |g, gr| {
                let asl = cva.as_slice().unwrap();
                let bsl = cvb.as_slice().unwrap();
                let cs = cos.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                // d cos / d a_c = b_c / (na*nb) - cos * a_c / na^2
                gr.accumulate_with(a, || {
                    let mut da = ArrayD::<S>::zeros(cva.shape());
                    let ds = da.as_slice_mut().unwrap();
                    for ni in 0..n {
                        let off = ni * c * sp;
                        for ci in 0..c {
                            let pl = off + ci * sp;
                            for i in 0..sp {
                                let j = ni * sp + i;
                                ds[pl + i] = gs[j]
                                    * (bsl[pl + i] / (na[j] * nb[j])
                                        - cs[j] * asl[pl + i] / (na[j] * na[j]));
                            }
                        }
                    }
                    da
                });
                gr.accumulate_with(b, || {
                    let mut db = ArrayD::<S>::zeros(cvb.shape());
                    let ds = db.as_slice_mut().unwrap();
                    for ni in 0..n {
                        let off = ni * c * sp;
                        for ci in 0..c {
                            let pl = off + ci * sp;
                            for i in 0..sp {
                                let j = ni * sp + i;
                                ds[pl + i] = gs[j]
                                    * (asl[pl + i] / (na[j] * nb[j])
                                        - cs[j] * bsl[pl + i] / (nb[j] * nb[j]));
                            }
                        }
                    }
                    db
                });
            })),
        )
    }

    /// Soft Dice loss over a class subset, averaged across classes:
    /// `mean_c (1 - (2 I_c + eps) / (P_c + G_c + eps))`.
    pub fn soft_dice_loss(
        &self,
        q: Tensor,
        labels: Rc<ArrayD<u8>>,
        include_background: bool,
        eps: S,
    ) -> Tensor {
        let vq = self.value(q);
        let (n, c, sp) = super::norm_dims(&vq);
        assert_eq!(labels.shape(), map_shape(vq.shape()).as_slice(), "soft_dice_loss: label shape");
        let first_class = if include_background { 0 } else { 1 };
        assert!(c > first_class, "soft_dice_loss: no classes left to score");
        let qs = vq.as_slice().unwrap();
        let ls = labels.as_slice().unwrap();
        let ncls = c - first_class;
        let mut inter = vec![S::zero(); c];
        let mut psum = vec![S::zero(); c];
        let mut gsum = vec![S::zero(); c];
        for ni in 0..n {
            let off = ni * c * sp;
            for i in 0..sp {
                let lab = ls[ni * sp + i] as usize;
                assert!(lab < c, "soft_dice_loss: label out of range");
                gsum[lab] = gsum[lab] + S::one();
                inter[lab] = inter[lab] + qs[off + lab * sp + i];
            }
            for (ci, ps) in psum.iter_mut().enumerate() {
                let pl = off + ci * sp;
                let mut acc = S::zero();
                for &v in &qs[pl..pl + sp] {
                    acc = acc + v;
                }
                *ps = *ps + acc;
            }
        }
        let two = S::from_f64(2.0);
        let mut loss = S::zero();
        for ci in first_class..c {
            let num = two * inter[ci] + eps;
            let den = psum[ci] + gsum[ci] + eps;
            loss = loss + (S::one() - num / den);
        }
        loss = loss / S::from_usize(ncls);
        let cq = Rc::clone(&vq);
        self.push(
            ArrayD::from_elem(Vec::<usize>::new(), loss),
            self.requires_grad(q),
            Some(Box::new(move |g, gr| {
                let gval = *g.iter().next().unwrap();
                gr.accumulate_with(q, || {
                    let ls = labels.as_slice().unwrap();
                    let scale = gval / S::from_usize(ncls);
                    let mut dq = ArrayD::<S>::zeros(cq.shape());
                    let ds = dq.as_slice_mut().unwrap();
                    // d(1 - num/den)/dq_cv = (num - 2*[y=c]*den) / den^2
                    for ci in first_class..c {
                        let num = two * inter[ci] + eps;
                        let den = psum[ci] + gsum[ci] + eps;
                        let dplain = num / (den * den) * scale;
                        let dmatch = (num - two * den) / (den * den) * scale;
                        for ni in 0..n {
                            let off = ni * c * sp + ci * sp;
                            for i in 0..sp {
                                ds[off + i] = if ls[ni * sp + i] as usize == ci {
                                    dmatch
                                } else {
                                    dplain
                                };
                            }
                        }
                    }
                    dq
                })
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_ce_matches_soft_ce_with_onehot() {
        let tape = Tape::<f64>::new();
        let q = ArrayD::from_shape_fn(vec![1, 3, 1, 1, 2], |ix| match (ix[1], ix[4]) {
            (0, 0) => 0.7,
            (1, 0) => 0.2,
            (2, 0) => 0.1,
            (0, 1) => 0.1,
            (1, 1) => 0.3,
            (2, 1) => 0.6,
            _ => unreachable!(),
        });
        let labels = ArrayD::from_shape_vec(vec![1, 1, 1, 2], vec![0u8, 2]).unwrap();
        let mut onehot = ArrayD::<f64>::zeros(vec![1, 3, 1, 1, 2]);
        onehot[[0, 0, 0, 0, 0]] = 1.0;
        onehot[[0, 2, 0, 0, 1]] = 1.0;
        let qt = tape.leaf(q, false);
        let hard = tape.hard_ce_map(qt, Rc::new(labels), 1e-8);
        let soft = tape.soft_ce_map(qt, Rc::new(onehot), 1e-8);
        let vh = tape.value(hard);
        let vs = tape.value(soft);
        for (a, b) in vh.iter().zip(vs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((vh[[0, 0, 0, 0]] - (-(0.7f64 + 1e-8).ln())).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let tape = Tape::<f64>::new();
        let q = ArrayD::from_shape_fn(vec![1, 2, 1, 1, 1], |ix| if ix[1] == 0 { 0.25 } else { 0.75 });
        let qt = tape.leaf(q.clone(), false);
        let kl = tape.kl_map(qt, Rc::new(q), 0.0);
        assert!(tape.value(kl)[[0, 0, 0, 0]].abs() < 1e-12);
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        let tape = Tape::<f64>::new();
        let a = ArrayD::from_shape_fn(vec![1, 3, 1, 1, 1], |ix| (ix[1] + 1) as f64);
        let b = a.mapv(|v| v * 2.0);
        let ta = tape.leaf(a, false);
        let tb = tape.leaf(b, false);
        let cm = tape.cosine_map(ta, tb, 1e-12);
        assert!((tape.value(cm)[[0, 0, 0, 0]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dice_loss_zero_for_perfect_prediction() {
        let tape = Tape::<f64>::new();
        let labels = ArrayD::from_shape_vec(vec![1, 1, 1, 4], vec![0u8, 1, 1, 0]).unwrap();
        let q = ArrayD::from_shape_fn(vec![1, 2, 1, 1, 4], |ix| {
            let lab = [0usize, 1, 1, 0][ix[4]];
            if ix[1] == lab {
                1.0
            } else {
                0.0
            }
        });
        let qt = tape.leaf(q, false);
        let loss = tape.soft_dice_loss(qt, Rc::new(labels), false, 1e-5);
        assert!(tape.item(loss) < 1e-5);
    }
}
