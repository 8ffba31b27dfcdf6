//! Spatial resampling ops: 2x max pooling and 2x trilinear upsampling.


use ndarray::ArrayD;

use super::{dims5, Scalar, Tape, Tensor};

/// Half-pixel tap table for one axis of a 2x upsample: for each output index,
/// the two source indices and their weights.
fn upsample_taps<S: Scalar>(len_in: usize) -> Vec<(usize, usize, S, S)> {
    let len_out = len_in * 2;
    (0..len_out)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let src = src.clamp(0.0, (len_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            let f = src - i0 as f64;
            (i0, i1, S::from_f64(1.0 - f), S::from_f64(f))
        })
        .collect()
}

impl<S: Scalar> Tape<S> {
    /// 2x2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn maxpool2(&self, x: Tensor) -> Tensor {
        let vx = self.value(x);
        let (n, c, d, h, w) = dims5(&vx, "maxpool2 input");
        assert!(
            d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
            "maxpool2: spatial dims must be even, got {d}x{h}x{w}"
        );
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let xs = vx.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(vec![n, c, od, oh, ow]);
        let mut argmax: Vec<usize> = Vec::with_capacity(out.len());
        {
            let os = out.as_slice_mut().unwrap();
            let mut oi = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * d * h * w;
                    for zz in 0..od {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let mut best = S::neg_infinity();
                                let mut best_idx = 0usize;
                                for dz in 0..2 {
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            let src = base
                                                + ((zz * 2 + dz) * h + (yy * 2 + dy)) * w
                                                + (xx * 2 + dx);
                                            let v = xs[src];
                                            if v > best {
                                                best = v;
                                                best_idx = src;
                                            }
                                        }
                                    }
                                }
                                os[oi] = best;
                                argmax.push(best_idx);
                                oi += 1;
                            }
                        }
                    }
                }
            }
        }
        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            self.requires_grad(x),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(x, || {
                    let mut dx = ArrayD::<S>::zeros(in_shape.as_slice());
                    let ds = dx.as_slice_mut().unwrap();
                    let gs = g.as_slice().unwrap();
                    for (oi, &src) in argmax.iter().enumerate() {
                        ds[src] = ds[src] + gs[oi];
                    }
                    dx
                })
            })),
        )
    }

    /// 2x trilinear upsampling with half-pixel alignment.
    pub fn upsample2_trilinear(&self, x: Tensor) -> Tensor {
        let vx = self.value(x);
        let (n, c, d, h, w) = dims5(&vx, "upsample2 input");
        let (td, th, tw) = (upsample_taps::<S>(d), upsample_taps::<S>(h), upsample_taps::<S>(w));
        let (od, oh, ow) = (d * 2, h * 2, w * 2);
        let xs = vx.as_slice().unwrap();
        let mut out = ArrayD::<S>::zeros(vec![n, c, od, oh, ow]);
        {
            let os = out.as_slice_mut().unwrap();
            let mut oi = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    let plane = &xs[(ni * c + ci) * d * h * w..][..d * h * w];
                    for &(z0, z1, wz0, wz1) in &td {
                        for &(y0, y1, wy0, wy1) in &th {
                            let r00 = (z0 * h + y0) * w;
                            let r01 = (z0 * h + y1) * w;
                            let r10 = (z1 * h + y0) * w;
                            let r11 = (z1 * h + y1) * w;
                            for &(x0, x1, wx0, wx1) in &tw {
                                let p00 = plane[r00 + x0] * wx0 + plane[r00 + x1] * wx1;
                                let p01 = plane[r01 + x0] * wx0 + plane[r01 + x1] * wx1;
                                let p10 = plane[r10 + x0] * wx0 + plane[r10 + x1] * wx1;
                                let p11 = plane[r11 + x0] * wx0 + plane[r11 + x1] * wx1;
                                os[oi] = wz0 * (p00 * wy0 + p01 * wy1) + wz1 * (p10 * wy0 + p11 * wy1);
                                oi += 1;
                            }
                        }
                    }
                }
            }
        }
        let in_shape = vx.shape().to_vec();
        self.push(
            out,
            self.requires_grad(x),
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(x, || {
                    let mut dx = ArrayD::<S>::zeros(in_shape.as_slice());
                    let ds = dx.as_slice_mut().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut oi = 0usize;
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * d * h * w;
                            for &(z0, z1, wz0, wz1) in &td {
                                for &(y0, y1, wy0, wy1) in &th {
                                    let r00 = off + (z0 * h + y0) * w;
                                    let r01 = off + (z0 * h + y1) * w;
                                    let r10 = off + (z1 * h + y0) * w;
                                    let r11 = off + (z1 * h + y1) * w;
                                    for &(x0, x1, wx0, wx1) in &tw {
                                        let gv = gs[oi];
                                        oi += 1;
                                        let g00 = gv * wz0 * wy0;
                                        let g01 = gv * wz0 * wy1;
                                        let g10 = gv * wz1 * wy0;
                                        let g11 = gv * wz1 * wy1;
                                        ds[r00 + x0] = ds[r00 + x0] + g00 * wx0;
                                        ds[r00 + x1] = ds[r00 + x1] + g00 * wx1;
                                        ds[r01 + x0] = ds[r01 + x0] + g01 * wx0;
                                        ds[r01 + x1] = ds[r01 + x1] + g01 * wx1;
                                        ds[r10 + x0] = ds[r10 + x0] + g10 * wx0;
                                        ds[r10 + x1] = ds[r10 + x1] + g10 * wx1;
                                        ds[r11 + x0] = ds[r11 + x0] + g11 * wx0;
                                        ds[r11 + x1] = ds[r11 + x1] + g11 * wx1;
                                    }
                                }
                            }
                        }
                    }
                    dx
                })
            })),
        )
    }
}
