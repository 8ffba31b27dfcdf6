//! 3-d convolution (stride 1, "same" padding) via chunked im2col + GEMM.
//!
//! Layouts: inputs `[N, C_in, D, H, W]`, weights `[C_out, C_in, k, k, k]`,
//! bias `[C_out]`. Kernel size must be odd so that `pad = k / 2` preserves
//! the spatial shape. The input gradient is computed as a convolution of the
//! output gradient with the channel-transposed, spatially flipped weights,
//! reusing the forward kernel.


use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewMut2, Ix5};

use super::{dims5, Scalar, Tape, Tensor};

/// Column chunk width for im2col; bounds the scratch buffer size.
const CHUNK: usize = 4096;

/// Fills `cols[(ci*k + kz)*k*k + ky*k + kx, j]` with the input value feeding
/// output voxel `v0 + j` through kernel offset `(kz, ky, kx)` of channel `ci`.
#[allow(clippy::too_many_arguments)]
fn fill_cols<S: Scalar>(
    cols: &mut ArrayViewMut2<'_, S>,
    xn: &[S],
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    v0: usize,
    v1: usize,
) {
    let pad = (k / 2) as isize;
    let len = v1 - v0;
    for ci in 0..cin {
        let plane = &xn[ci * d * h * w..][..d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let mut row = cols.row_mut(r);
                    let row = row.as_slice_mut().expect("im2col row must be contiguous");
                    let mut pos = 0usize;
                    let mut od = v0 / (h * w);
                    let mut oh = (v0 / w) % h;
                    let mut ow = v0 % w;
                    while pos < len {
                        let run = (w - ow).min(len - pos);
                        let sd = od as isize + kz as isize - pad;
                        let sh = oh as isize + ky as isize - pad;
                        if sd < 0 || sd >= d as isize || sh < 0 || sh >= h as isize {
                            row[pos..pos + run].fill(S::zero());
                        } else {
                            let src_base = (sd as usize * h + sh as usize) * w;
                            let sw0 = ow as isize + kx as isize - pad;
                            let lo = (-sw0).max(0).min(run as isize) as usize;
                            let hi = (w as isize - sw0).clamp(lo as isize, run as isize) as usize;
                            row[pos..pos + lo].fill(S::zero());
                            if hi > lo {
                                let src = (src_base as isize + sw0 + lo as isize) as usize;
                                row[pos + lo..pos + hi].copy_from_slice(&plane[src..src + (hi - lo)]);
                            }
                            row[pos + hi..pos + run].fill(S::zero());
                        }
                        pos += run;
                        ow += run;
                        if ow == w {
                            ow = 0;
                            oh += 1;
                            if oh == h {
                                oh = 0;
                                od += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward pass; also used for the input-gradient pass.
fn conv_core<S: Scalar>(x: &ArrayD<S>, weight: &ArrayD<S>, bias: Option<&ArrayD<S>>) -> ArrayD<S> {
    let (n, cin, d, h, w) = dims5(x, "conv3d input");
    let ws = weight.shape();
    assert_eq!(ws.len(), 5, "conv3d weight must be [C_out, C_in, k, k, k]");
    let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[3], k);
    assert_eq!(ws[4], k);
    assert_eq!(wcin, cin, "conv3d: weight input channels do not match input");
    assert!(k % 2 == 1, "conv3d: kernel size must be odd");
    let v = d * h * w;
    let kk = cin * k * k * k;

    let w2 = weight.view().into_shape_with_order((cout, kk)).unwrap();
    let xs = x.as_slice().unwrap();
    let mut out = ArrayD::<S>::zeros(vec![n, cout, d, h, w]);
    {
        let os = out.as_slice_mut().unwrap();
        let mut cols = Array2::<S>::zeros((kk, CHUNK.min(v)));
        for ni in 0..n {
            let xn = &xs[ni * cin * v..][..cin * v];
            if k == 1 {
                // 1x1x1: the column matrix is the input itself.
                let xmat = ndarray::ArrayView2::from_shape((cin, v), xn).unwrap();
                let mut omat =
                    ndarray::ArrayViewMut2::from_shape((cout, v), &mut os[ni * cout * v..][..cout * v])
                        .unwrap();
                general_mat_mul(S::one(), &w2, &xmat, S::zero(), &mut omat);
            } else {
                let mut v0 = 0;
                while v0 < v {
                    let v1 = (v0 + CHUNK).min(v);
                    let mut cview = cols.slice_mut(ndarray::s![.., ..v1 - v0]);
                    fill_cols(&mut cview, xn, cin, d, h, w, k, v0, v1);
                    let mut omat = ndarray::ArrayViewMut2::from_shape(
                        (cout, v),
                        &mut os[ni * cout * v..][..cout * v],
                    )
                    .unwrap();
                    let mut oslice = omat.slice_mut(ndarray::s![.., v0..v1]);
                    general_mat_mul(S::one(), &w2, &cview.view(), S::zero(), &mut oslice);
                    v0 = v1;
                }
            }
        }
        if let Some(b) = bias {
            let bs = b.as_slice().unwrap();
            assert_eq!(bs.len(), cout, "conv3d: bias length");
            for ni in 0..n {
                for co in 0..cout {
                    let bval = bs[co];
                    for o in &mut os[(ni * cout + co) * v..][..v] {
                        *o = *o + bval;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates the weight gradient `g_out (*) x` into `dw`.
fn conv_dw<S: Scalar>(x: &ArrayD<S>, g_out: &ArrayD<S>, dw: &mut ArrayD<S>, k: usize) {
    let (n, cin, d, h, w) = dims5(x, "conv3d input");
    let cout = g_out.shape()[1];
    let v = d * h * w;
    let kk = cin * k * k * k;
    let xs = x.as_slice().unwrap();
    let gs = g_out.as_slice().unwrap();
    let mut dw2 = dw.view_mut().into_shape_with_order((cout, kk)).unwrap();
    let mut cols = Array2::<S>::zeros((kk, CHUNK.min(v)));
    for ni in 0..n {
        let xn = &xs[ni * cin * v..][..cin * v];
        let gmat = ndarray::ArrayView2::from_shape((cout, v), &gs[ni * cout * v..][..cout * v]).unwrap();
        if k == 1 {
            let xmat = ndarray::ArrayView2::from_shape((cin, v), xn).unwrap();
            general_mat_mul(S::one(), &gmat, &xmat.t(), S::one(), &mut dw2);
        } else {
            let mut v0 = 0;
            while v0 < v {
                let v1 = (v0 + CHUNK).min(v);
                let mut cview = cols.slice_mut(ndarray::s![.., ..v1 - v0]);
                fill_cols(&mut cview, xn, cin, d, h, w, k, v0, v1);
                let gslice = gmat.slice(ndarray::s![.., v0..v1]);
                general_mat_mul(S::one(), &gslice, &cview.view().t(), S::one(), &mut dw2);
                v0 = v1;
            }
        }
    }
}

/// Weights for the input-gradient convolution: channel axes swapped and the
/// spatial kernel flipped.
fn flip_transpose_weight<S: Scalar>(weight: &ArrayD<S>) -> ArrayD<S> {
    let w5 = weight.view().into_dimensionality::<Ix5>().unwrap();
    let (cout, cin, k) = (w5.shape()[0], w5.shape()[1], w5.shape()[2]);
    let mut flipped = ndarray::Array5::<S>::zeros((cin, cout, k, k, k));
    for co in 0..cout {
        for ci in 0..cin {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        flipped[[ci, co, k - 1 - kz, k - 1 - ky, k - 1 - kx]] =
                            w5[[co, ci, kz, ky, kx]];
                    }
                }
            }
        }
    }
    flipped.into_dyn()
}

impl<S: Scalar> Tape<S> {
    /// Same-padding, stride-1 3-d convolution.
    pub fn conv3d(&self, x: Tensor, weight: Tensor, bias: Option<Tensor>) -> Tensor {
        let vx = self.value(x);
        let vw = self.value(weight);
        let vb = bias.map(|b| self.value(b));
        let out = conv_core(&vx, &vw, vb.as_deref());
        let rg = self.requires_grad(x)
            || self.requires_grad(weight)
            || bias.map(|b| self.requires_grad(b)).unwrap_or(false);
        let k = vw.shape()[2];
        self.push(
            out,
            rg,
            Some(Box::new(move |g, gr| {
                gr.accumulate_with(weight, || {
                    let mut dw = ArrayD::<S>::zeros(vw.shape());
                    conv_dw(&vx, g, &mut dw, k);
                    dw
                });
                if let Some(b) = bias {
                    gr.accumulate_with(b, || {
                        let cout = g.shape()[1];
                        let n = g.shape()[0];
                        let v: usize = g.shape()[2..].iter().product();
                        let gs = g.as_slice().unwrap();
                        let mut db = vec![S::zero(); cout];
                        for ni in 0..n {
                            for (co, dbco) in db.iter_mut().enumerate() {
                                let mut acc = S::zero();
                                for gval in &gs[(ni * cout + co) * v..][..v] {
                                    acc = acc + *gval;
                                }
                                *dbco = *dbco + acc;
                            }
                        }
                        ArrayD::from_shape_vec(vec![cout], db).unwrap()
                    });
                }
                gr.accumulate_with(x, || {
                    let wt = flip_transpose_weight(&vw);
                    conv_core(g, &wt, None)
                });
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution, as slow and obvious as possible.
    fn conv_naive(x: &ArrayD<f64>, w: &ArrayD<f64>, b: Option<&ArrayD<f64>>) -> ArrayD<f64> {
        let (n, cin, d, h, ww) = dims5(x, "naive");
        let cout = w.shape()[0];
        let k = w.shape()[2];
        let pad = (k / 2) as isize;
        let mut out = ArrayD::<f64>::zeros(vec![n, cout, d, h, ww]);
        for ni in 0..n {
            for co in 0..cout {
                for od in 0..d {
                    for oh in 0..h {
                        for ow in 0..ww {
                            let mut acc = b.map(|b| b[[co]]).unwrap_or(0.0);
                            for ci in 0..cin {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let sd = od as isize + kz as isize - pad;
                                            let sh = oh as isize + ky as isize - pad;
                                            let sw = ow as isize + kx as isize - pad;
                                            if sd < 0
                                                || sh < 0
                                                || sw < 0
                                                || sd >= d as isize
                                                || sh >= h as isize
                                                || sw >= ww as isize
                                            {
                                                continue;
                                            }
                                            acc += x[[ni, ci, sd as usize, sh as usize, sw as usize]]
                                                * w[[co, ci, kz, ky, kx]];
                                        }
                                    }
                                }
                            }
                            out[[ni, co, od, oh, ow]] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn im2col_matches_naive_k3() {
        let x = rand_arr(&[2, 3, 5, 4, 6], 1);
        let w = rand_arr(&[4, 3, 3, 3, 3], 2);
        let b = rand_arr(&[4], 3);
        let fast = conv_core(&x, &w, Some(&b));
        let slow = conv_naive(&x, &w, Some(&b));
        let max_err = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_err < 1e-12, "max err {max_err}");
    }

    #[test]
    fn im2col_matches_naive_k1() {
        let x = rand_arr(&[1, 4, 3, 3, 3], 4);
        let w = rand_arr(&[2, 4, 1, 1, 1], 5);
        let fast = conv_core(&x, &w, None);
        let slow = conv_naive(&x, &w, None);
        let max_err = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_err < 1e-12, "max err {max_err}");
    }

    #[test]
    fn im2col_chunk_boundaries() {
        // Volume larger than one chunk exercises the chunked path.
        let x = rand_arr(&[1, 2, 18, 17, 19], 6);
        let w = rand_arr(&[3, 2, 3, 3, 3], 7);
        let fast = conv_core(&x, &w, None);
        let slow = conv_naive(&x, &w, None);
        let max_err = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_err < 1e-11, "max err {max_err}");
    }
}
