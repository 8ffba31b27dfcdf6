//! Whole-volume inference: overlapping patch predictions merged by uniform
//! averaging, then a per-voxel argmax.

use ndarray::{Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::UNet3d;
use crate::volume::{pad_edge_replicate, LabelMap, Volume};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SlidingWindowConfig {
    pub patch_size: [usize; 3],
    /// Fraction of the patch shared between neighbouring windows.
    pub overlap: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig { patch_size: [24, 24, 24], overlap: 0.5 }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&p| p == 0) {
            return Err(Error::InvalidArgument("patch_size must be >= 1 per axis".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidArgument(format!(
                "overlap must lie in [0,1), got {}",
                self.overlap
            )));
        }
        Ok(())
    }

    fn stride(&self, axis: usize) -> usize {
        ((self.patch_size[axis] as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }
}

/// Window start offsets along one axis: a regular stride grid plus one final
/// window flush with the end, so every voxel is covered.
fn window_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    debug_assert!(dim >= patch);
    let mut origins = Vec::new();
    let mut o = 0;
    while o + patch < dim {
        origins.push(o);
        o += stride;
    }
    origins.push(dim - patch);
    origins.dedup();
    origins
}

/// Argmax over the leading (class) axis; ties resolve to the lowest class.
fn argmax_classes(probs: &Array4<f32>) -> Array3<u8> {
    let (c, d, h, w) = probs.dim();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let mut best = 0usize;
        let mut best_v = probs[[0, z, y, x]];
        for k in 1..c {
            let v = probs[[k, z, y, x]];
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        best as u8
    })
}

/// Predicts a label volume by tiling `v` with overlapping patches, averaging
/// the per-voxel class probabilities and taking the argmax. Volumes smaller
/// than the patch are padded by edge replication and cropped back.
pub fn sliding_window_predict(
    net: &UNet3d<f32>,
    v: &Volume,
    cfg: &SlidingWindowConfig,
) -> Result<LabelMap> {
    cfg.validate()?;
    let orig = v.shape();
    let padded = pad_edge_replicate(&v.data, cfg.patch_size);
    let dims = [padded.shape()[0], padded.shape()[1], padded.shape()[2]];
    let classes = net.config().num_classes;
    let [pd, ph, pw] = cfg.patch_size;

    let mut acc = Array4::<f32>::zeros((classes, dims[0], dims[1], dims[2]));
    let mut hits = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
    for &oz in &window_origins(dims[0], pd, cfg.stride(0)) {
        for &oy in &window_origins(dims[1], ph, cfg.stride(1)) {
            for &ox in &window_origins(dims[2], pw, cfg.stride(2)) {
                let patch = padded
                    .slice(ndarray::s![oz..oz + pd, oy..oy + ph, ox..ox + pw])
                    .to_owned();
                let input =
                    ArrayD::from_shape_vec(vec![1, 1, pd, ph, pw], patch.into_raw_vec_and_offset().0)
                        .expect("patch is contiguous");
                let probs = net.predict_probs(&input)?.data;
                let probs = probs.index_axis_move(Axis(0), 0);
                let mut dst =
                    acc.slice_mut(ndarray::s![.., oz..oz + pd, oy..oy + ph, ox..ox + pw]);
                dst += &probs
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("probabilities are [C,D,H,W]");
                let mut cov = hits.slice_mut(ndarray::s![oz..oz + pd, oy..oy + ph, ox..ox + pw]);
                cov += 1.0;
            }
        }
    }
    assert!(hits.iter().all(|&h| h > 0.0), "tiling left a voxel uncovered");
    for mut channel in acc.outer_iter_mut() {
        channel.zip_mut_with(&hits, |p, &h| *p /= h);
    }

    let labels = argmax_classes(&acc);
    let cropped = labels.slice(ndarray::s![..orig[0], ..orig[1], ..orig[2]]).to_owned();
    LabelMap::new(cropped, classes)
}
