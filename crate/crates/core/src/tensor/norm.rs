//! Normalisation ops: instance norm, channel softmax, channel L2-normalise.
//!
//! All of these operate on `[N, C, spatial...]` tensors and iterate over
//! channel planes sequentially, which keeps memory access contiguous.

use std::rc::Rc;

use ndarray::ArrayD;

use super::{norm_dims, Scalar, Tape, Tensor};

impl<S: Scalar> Tape<S> {
    /// Instance normalisation with learned per-channel scale and shift.
    /// Statistics are per (sample, channel), so behaviour is identical in
    /// training and inference.
    pub fn instance_norm(&self, x: Tensor, gamma: Tensor, beta: Tensor, eps: S) -> Tensor {
        let vx = self.value(x);
        let vgamma = self.value(gamma);
        let vbeta = self.value(beta);
        let (n, c, sp) = norm_dims(&vx);
        assert_eq!(vgamma.len(), c, "instance_norm: gamma length");
        assert_eq!(vbeta.len(), c, "instance_norm: beta length");
        assert!(sp > 1, "instance_norm: needs more than one voxel per channel");

        let xs = vx.as_slice().unwrap();
        let gs = vgamma.as_slice().unwrap();
        let bs = vbeta.as_slice().unwrap();
        let inv_sp = S::one() / S::from_usize(sp);
        let mut out = ArrayD::<S>::zeros(vx.shape());
        let mut stats: Vec<(S, S)> = Vec::with_capacity(n * c);
        {
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * sp;
                    let plane = &xs[off..off + sp];
                    let mut sum = S::zero();
                    for &v in plane {
                        sum = sum + v;
                    }
                    let mean = sum * inv_sp;
                    let mut var = S::zero();
                    for &v in plane {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var * inv_sp;
                    let inv_std = S::one() / (var + eps).sqrt();
                    stats.push((mean, inv_std));
                    let (gc, bc) = (gs[ci], bs[ci]);
                    for (o, &v) in os[off..off + sp].iter_mut().zip(plane) {
                        *o = (v - mean) * inv_std * gc + bc;
                    }
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let cvx = Rc::clone(&vx);
        let cvg = Rc::clone(&vgamma);
        self.push(
            out,
            rg,
            Some(Box::new(move |g, gr| {
                let xs = cvx.as_slice().unwrap();
                let gammas = cvg.as_slice().unwrap();
                let gout = g.as_slice().unwrap();
                // Shared per-(n,c) sums for all three gradients.
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx = ArrayD::<S>::zeros(cvx.shape());
                let needs_x = gr.wants(x);
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * sp;
                            let (mean, inv_std) = stats[ni * c + ci];
                            let gp = &gout[off..off + sp];
                            let xp = &xs[off..off + sp];
                            let mut sum_g = S::zero();
                            let mut sum_gx = S::zero();
                            for (&gv, &xv) in gp.iter().zip(xp) {
                                let xhat = (xv - mean) * inv_std;
                                sum_g = sum_g + gv;
                                sum_gx = sum_gx + gv * xhat;
                            }
                            dgamma[ci] = dgamma[ci] + sum_gx;
                            dbeta[ci] = dbeta[ci] + sum_g;
                            if needs_x {
                                let scale = gammas[ci] * inv_std;
                                let mg = sum_g * inv_sp;
                                let mgx = sum_gx * inv_sp;
                                for (d, (&gv, &xv)) in
                                    ds[off..off + sp].iter_mut().zip(gp.iter().zip(xp))
                                {
                                    let xhat = (xv - mean) * inv_std;
                                    *d = scale * (gv - mg - xhat * mgx);
                                }
                            }
                        }
                    }
                }
                if needs_x {
                    gr.accumulate(x, dx);
                }
                gr.accumulate_with(gamma, || ArrayD::from_shape_vec(vec![c], dgamma.clone()).unwrap());
                gr.accumulate_with(beta, || ArrayD::from_shape_vec(vec![c], dbeta.clone()).unwrap());
            })),
        )
    }

    /// Softmax over the channel axis of `[N, C, spatial...]`.
    pub fn softmax_channels(&self, x: Tensor) -> Tensor {
        let vx = self.value(x);
        let (n, c, sp) = norm_dims(&vx);
        let xs = vx.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(vx.shape());
        {
            let os = out.as_slice_mut().unwrap();
            let mut maxbuf = vec![S::neg_infinity(); sp];
            let mut sumbuf = vec![S::zero(); sp];
            for ni in 0..n {
                let off = ni * c * sp;
                maxbuf.fill(S::neg_infinity());
                for ci in 0..c {
                    for (m, &v) in maxbuf.iter_mut().zip(&xs[off + ci * sp..][..sp]) {
                        if v > *m {
                            *m = v;
                        }
                    }
                }
                sumbuf.fill(S::zero());
                for ci in 0..c {
                    let pl = off + ci * sp;
                    for i in 0..sp {
                        let e = (xs[pl + i] - maxbuf[i]).exp();
                        os[pl + i] = e;
                        sumbuf[i] = sumbuf[i] + e;
                    }
                }
                for ci in 0..c {
                    let pl = off + ci * sp;
                    for i in 0..sp {
                        os[pl + i] = os[pl + i] / sumbuf[i];
                    }
                }
            }
        }
        let out = Rc::new(out);
        let probs = Rc::clone(&out);
        self.push_rc(
            out,
            self.requires_grad(x),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(x, || {
                    let ps = probs.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut dx = ArrayD::<S>::zeros(probs.shape());
                    let ds = dx.as_slice_mut().unwrap();
                    let mut dot = vec![S::zero(); sp];
                    for ni in 0..n {
                        let off = ni * c * sp;
                        dot.fill(S::zero());
                        for ci in 0..c {
                            let pl = off + ci * sp;
                            for i in 0..sp {
                                dot[i] = dot[i] + gs[pl + i] * ps[pl + i];
                            }
                        }
                        for ci in 0..c {
                            let pl = off + ci * sp;
                            for i in 0..sp {
                                ds[pl + i] = ps[pl + i] * (gs[pl + i] - dot[i]);
                            }
                        }
                    }
                    dx
                })
            })),
        )
    }

    /// L2-normalises each voxel's channel vector: `y_c = x_c / sqrt(sum x^2 + eps)`.
    pub fn l2_normalize_channels(&self, x: Tensor, eps: S) -> Tensor {
        let vx = self.value(x);
        let (n, c, sp) = norm_dims(&vx);
        let xs = vx.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(vx.shape());
        let mut norms = vec![S::zero(); n * sp];
        {
            let os = out.as_slice_mut().unwrap();
            for ni in 0..n {
                let off = ni * c * sp;
                let nb = &mut norms[ni * sp..][..sp];
                nb.fill(eps);
                for ci in 0..c {
                    let pl = off + ci * sp;
                    for i in 0..sp {
                        nb[i] = nb[i] + xs[pl + i] * xs[pl + i];
                    }
                }
                for v in nb.iter_mut() {
                    *v = v.sqrt();
                }
                for ci in 0..c {
                    let pl = off + ci * sp;
                    for i in 0..sp {
                        os[pl + i] = xs[pl + i] / nb[i];
                    }
                }
            }
        }
        let out = Rc::new(out);
        let ys = Rc::clone(&out);
        self.push_rc(
            out,
            self.requires_grad(x),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(x, || {
                    let yv = ys.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut dx = ArrayD::<S>::zeros(ys.shape());
                    let ds = dx.as_slice_mut().unwrap();
                    let mut dot = vec![S::zero(); sp];
                    for ni in 0..n {
                        let off = ni * c * sp;
                        let nb = &norms[ni * sp..][..sp];
                        dot.fill(S::zero());
                        for ci in 0..c {
                            let pl = off + ci * sp;
                            for i in 0..sp {
                                dot[i] = dot[i] + gs[pl + i] * yv[pl + i];
                            }
                        }
                        for ci in 0..c {
                            let pl = off + ci * sp;
                            for i in 0..sp {
                                ds[pl + i] = (gs[pl + i] - yv[pl + i] * dot[i]) / nb[i];
                            }
                        }
                    }
                    dx
                })
            })),
        )
    }
}
