//! Volumetric data types and preprocessing.

use ndarray::{Array3, Zip};
use rand::Rng;

use crate::error::{Error, Result};

/// A 3-d scalar image with voxel spacing in millimetres.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f32; 3],
    pub identifier: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f32; 3], identifier: impl Into<String>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape("volume must have at least one voxel per axis".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("volume contains NaN or infinite intensities".into()));
        }
        Ok(Volume { data, spacing, identifier: identifier.into() })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

/// Integer class labels aligned with a [`Volume`].
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub data: Array3<u8>,
    pub num_classes: usize,
}

impl LabelMap {
    pub fn new(data: Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "label map needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label value {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelMap { data, num_classes })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

/// Clips intensities to the window `[level - width/2, level + width/2]`.
pub fn window_hu(v: &Volume, level: f32, width: f32) -> Result<Volume> {
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("window width must be positive, got {width}")));
    }
    let lo = level - width / 2.0;
    let hi = level + width / 2.0;
    let data = v.data.mapv(|x| x.clamp(lo, hi));
    Ok(Volume { data, spacing: v.spacing, identifier: v.identifier.clone() })
}

/// Shifts and scales intensities to zero mean and unit variance.
///
/// A constant volume has no z-score; it is an error unless `allow_constant`
/// is set, in which case the result is all zeros.
pub fn normalize_zscore(v: &Volume, allow_constant: bool) -> Result<Volume> {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        if allow_constant {
            return Ok(Volume {
                data: Array3::zeros(v.data.raw_dim()),
                spacing: v.spacing,
                identifier: v.identifier.clone(),
            });
        }
        return Err(Error::Degenerate(format!(
            "volume '{}' is constant; z-score normalization undefined",
            v.identifier
        )));
    }
    let data = v.data.mapv(|x| ((x as f64 - mean) / std) as f32);
    Ok(Volume { data, spacing: v.spacing, identifier: v.identifier.clone() })
}

/// Inclusive per-axis bounding box of nonzero labels.
fn foreground_bbox(y: &LabelMap) -> Option<[(usize, usize); 3]> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((i, j, k), &v) in y.data.indexed_iter() {
        if v != 0 {
            any = true;
            let idx = [i, j, k];
            for a in 0..3 {
                lo[a] = lo[a].min(idx[a]);
                hi[a] = hi[a].max(idx[a]);
            }
        }
    }
    any.then(|| [(lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])])
}

/// Crops volume and labels to the foreground bounding box expanded by
/// `margin` voxels per side, clamped to the volume bounds.
pub fn crop_roi_with_margin(v: &Volume, y: &LabelMap, margin: usize) -> Result<(Volume, LabelMap)> {
    if v.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "volume shape {:?} does not match label shape {:?}",
            v.shape(),
            y.shape()
        )));
    }
    let bbox = foreground_bbox(y).ok_or_else(|| {
        Error::Degenerate("label map has no foreground; cannot locate a region of interest".into())
    })?;
    let shape = v.shape();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        lo[a] = bbox[a].0.saturating_sub(margin);
        hi[a] = (bbox[a].1 + margin).min(shape[a] - 1);
    }
    let sl = ndarray::s![lo[0]..=hi[0], lo[1]..=hi[1], lo[2]..=hi[2]];
    let vol = Volume {
        data: v.data.slice(sl).to_owned(),
        spacing: v.spacing,
        identifier: v.identifier.clone(),
    };
    let lab = LabelMap { data: y.data.slice(sl).to_owned(), num_classes: y.num_classes };
    Ok((vol, lab))
}

/// Pads `data` at the high and low ends by repeating edge values until every
/// axis reaches `target`.
pub(crate) fn pad_edge_replicate<T: Copy>(data: &Array3<T>, target: [usize; 3]) -> Array3<T> {
    let s = data.shape();
    let src = [s[0], s[1], s[2]];
    if src.iter().zip(&target).all(|(&a, &b)| a >= b) {
        return data.clone();
    }
    let out_shape = [src[0].max(target[0]), src[1].max(target[1]), src[2].max(target[2])];
    // Pad symmetrically: put the extra voxels half before, half after.
    let before = [
        (out_shape[0] - src[0]) / 2,
        (out_shape[1] - src[1]) / 2,
        (out_shape[2] - src[2]) / 2,
    ];
    Array3::from_shape_fn(out_shape, |(i, j, k)| {
        let map = |x: usize, b: usize, n: usize| x.saturating_sub(b).min(n - 1);
        data[[map(i, before[0], src[0]), map(j, before[1], src[1]), map(k, before[2], src[2])]]
    })
}

/// Extracts a random patch of the requested size; volumes smaller than the
/// patch are first grown by edge replication.
pub fn extract_patch<R: Rng>(
    v: &Volume,
    y: Option<&LabelMap>,
    patch_size: [usize; 3],
    rng: &mut R,
) -> (Volume, Option<LabelMap>) {
    assert!(patch_size.iter().all(|&p| p >= 1), "patch size must be at least 1 per axis");
    if let Some(y) = y {
        assert_eq!(v.shape(), y.shape(), "extract_patch: volume/label shape mismatch");
    }
    let vdata = pad_edge_replicate(&v.data, patch_size);
    let ydata = y.map(|y| pad_edge_replicate(&y.data, patch_size));
    let s = vdata.shape();
    let mut corner = [0usize; 3];
    for a in 0..3 {
        let max_off = s[a] - patch_size[a];
        corner[a] = if max_off == 0 { 0 } else { rng.random_range(0..=max_off) };
    }
    let sl = ndarray::s![
        corner[0]..corner[0] + patch_size[0],
        corner[1]..corner[1] + patch_size[1],
        corner[2]..corner[2] + patch_size[2]
    ];
    let vol = Volume {
        data: vdata.slice(sl).to_owned(),
        spacing: v.spacing,
        identifier: v.identifier.clone(),
    };
    let lab = ydata.map(|yd| LabelMap { data: yd.slice(sl).to_owned(), num_classes: y.unwrap().num_classes });
    (vol, lab)
}

/// Resamples a volume to isotropic spacing with trilinear interpolation.
pub fn resample_iso(v: &Volume, target_spacing: f32) -> Result<Volume> {
    if !(target_spacing > 0.0) {
        return Err(Error::InvalidArgument("target spacing must be positive".into()));
    }
    let s = v.shape();
    let mut out_shape = [0usize; 3];
    for a in 0..3 {
        out_shape[a] = (((s[a] as f64) * v.spacing[a] as f64 / target_spacing as f64).round() as usize).max(1);
    }
    let mut out = Array3::<f32>::zeros(out_shape);
    let scale: Vec<f64> = (0..3).map(|a| s[a] as f64 / out_shape[a] as f64).collect();
    Zip::indexed(&mut out).for_each(|(i, j, k), o| {
        let pos = [
            ((i as f64 + 0.5) * scale[0] - 0.5).clamp(0.0, (s[0] - 1) as f64),
            ((j as f64 + 0.5) * scale[1] - 0.5).clamp(0.0, (s[1] - 1) as f64),
            ((k as f64 + 0.5) * scale[2] - 0.5).clamp(0.0, (s[2] - 1) as f64),
        ];
        let base = [pos[0].floor() as usize, pos[1].floor() as usize, pos[2].floor() as usize];
        let frac = [pos[0] - base[0] as f64, pos[1] - base[1] as f64, pos[2] - base[2] as f64];
        let hi = [
            (base[0] + 1).min(s[0] - 1),
            (base[1] + 1).min(s[1] - 1),
            (base[2] + 1).min(s[2] - 1),
        ];
        let mut acc = 0.0f64;
        for (di, wi) in [(base[0], 1.0 - frac[0]), (hi[0], frac[0])] {
            for (dj, wj) in [(base[1], 1.0 - frac[1]), (hi[1], frac[1])] {
                for (dk, wk) in [(base[2], 1.0 - frac[2]), (hi[2], frac[2])] {
                    acc += v.data[[di, dj, dk]] as f64 * wi * wj * wk;
                }
            }
        }
        *o = acc as f32;
    });
    Volume::new(out, [target_spacing; 3], v.identifier.clone())
}

/// Nearest-neighbour label resampling matched to [`resample_iso`].
pub fn resample_labels_iso(y: &LabelMap, spacing: [f32; 3], target_spacing: f32) -> Result<LabelMap> {
    if !(target_spacing > 0.0) {
        return Err(Error::InvalidArgument("target spacing must be positive".into()));
    }
    let s = y.shape();
    let mut out_shape = [0usize; 3];
    for a in 0..3 {
        out_shape[a] = (((s[a] as f64) * spacing[a] as f64 / target_spacing as f64).round() as usize).max(1);
    }
    let scale: Vec<f64> = (0..3).map(|a| s[a] as f64 / out_shape[a] as f64).collect();
    let data = Array3::from_shape_fn(out_shape, |(i, j, k)| {
        let nearest = |x: usize, a: usize| {
            (((x as f64 + 0.5) * scale[a] - 0.5).round().clamp(0.0, (s[a] - 1) as f64)) as usize
        };
        y.data[[nearest(i, 0), nearest(j, 1), nearest(k, 2)]]
    });
    LabelMap::new(data, y.num_classes)
}
