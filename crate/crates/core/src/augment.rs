//! Data augmentation: paired intensity views and grid distortion.
//!
//! Intensity transforms never move voxels, so labels stay valid for both
//! views. Grid distortion warps image and label with one shared field.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

/// Parameters of the intensity augmentation family: random scaling, random
/// shifting and Gaussian noising, each applied independently per view.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IntensityAugmentConfig {
    pub scale_range: (f32, f32),
    pub shift_range: (f32, f32),
    pub noise_sigma_range: (f32, f32),
    pub probability: f64,
}

impl Default for IntensityAugmentConfig {
    fn default() -> Self {
        IntensityAugmentConfig {
            scale_range: (0.9, 1.1),
            shift_range: (-0.1, 0.1),
            noise_sigma_range: (0.0, 0.1),
            probability: 0.8,
        }
    }
}

impl IntensityAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f32, f32)| r.0 <= r.1;
        if !ordered(self.scale_range) || !ordered(self.shift_range) || !ordered(self.noise_sigma_range) {
            return Err(Error::Config("augmentation ranges must be well-ordered".into()));
        }
        if self.noise_sigma_range.0 < 0.0 {
            return Err(Error::Config("noise sigma cannot be negative".into()));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config("augmentation probability must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Identity configuration: views equal to the input.
    pub fn identity() -> Self {
        IntensityAugmentConfig {
            scale_range: (1.0, 1.0),
            shift_range: (0.0, 0.0),
            noise_sigma_range: (0.0, 0.0),
            probability: 1.0,
        }
    }
}

/// Grid distortion settings shared by image and label.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridDistortConfig {
    pub grid_cells: usize,
    /// Maximum control-point displacement in voxels.
    pub max_displacement: f32,
    pub probability: f64,
}

impl Default for GridDistortConfig {
    fn default() -> Self {
        GridDistortConfig { grid_cells: 4, max_displacement: 2.0, probability: 0.5 }
    }
}

impl GridDistortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_cells < 2 {
            return Err(Error::Config("grid distortion needs at least 2 cells per axis".into()));
        }
        if self.max_displacement < 0.0 {
            return Err(Error::Config("max displacement cannot be negative".into()));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config("distortion probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

fn range_sample<R: Rng>(rng: &mut R, range: (f32, f32)) -> f32 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn intensity_view<R: Rng>(x: &Volume, cfg: &IntensityAugmentConfig, rng: &mut R) -> Volume {
    let mut data = x.data.clone();
    if rng.random_bool(cfg.probability) {
        let scale = range_sample(rng, cfg.scale_range);
        data.mapv_inplace(|v| v * scale);
    }
    if rng.random_bool(cfg.probability) {
        let shift = range_sample(rng, cfg.shift_range);
        data.mapv_inplace(|v| v + shift);
    }
    if rng.random_bool(cfg.probability) {
        let sigma = range_sample(rng, cfg.noise_sigma_range);
        if sigma > 0.0 {
            let normal = Normal::new(0.0f64, sigma as f64).unwrap();
            data.mapv_inplace(|v| v + normal.sample(rng) as f32);
        }
    }
    Volume { data, spacing: x.spacing, identifier: x.identifier.clone() }
}

/// Draws the two independently augmented views of a patch.
pub fn make_views<R: Rng>(
    x: &Volume,
    cfg: &IntensityAugmentConfig,
    rng: &mut R,
) -> (Volume, Volume) {
    let v1 = intensity_view(x, cfg, rng);
    let v2 = intensity_view(x, cfg, rng);
    (v1, v2)
}

/// Piecewise-trilinear displacement field from jittered grid control points.
fn displacement_field<R: Rng>(
    shape: [usize; 3],
    cfg: &GridDistortConfig,
    rng: &mut R,
) -> [Array3<f32>; 3] {
    let g = cfg.grid_cells + 1;
    let mut ctrl = [
        Array3::<f32>::zeros((g, g, g)),
        Array3::<f32>::zeros((g, g, g)),
        Array3::<f32>::zeros((g, g, g)),
    ];
    for axis in ctrl.iter_mut() {
        for v in axis.iter_mut() {
            *v = rng.random_range(-cfg.max_displacement..=cfg.max_displacement);
        }
    }
    let interp = |ctrl: &Array3<f32>, pos: [f64; 3]| -> f32 {
        let b = [pos[0].floor() as usize, pos[1].floor() as usize, pos[2].floor() as usize];
        let f = [pos[0] - b[0] as f64, pos[1] - b[1] as f64, pos[2] - b[2] as f64];
        let h = [(b[0] + 1).min(g - 1), (b[1] + 1).min(g - 1), (b[2] + 1).min(g - 1)];
        let mut acc = 0.0f64;
        for (zi, wz) in [(b[0], 1.0 - f[0]), (h[0], f[0])] {
            for (yi, wy) in [(b[1], 1.0 - f[1]), (h[1], f[1])] {
                for (xi, wx) in [(b[2], 1.0 - f[2]), (h[2], f[2])] {
                    acc += ctrl[[zi, yi, xi]] as f64 * wz * wy * wx;
                }
            }
        }
        acc as f32
    };
    let field = |ctrl: &Array3<f32>| {
        Array3::from_shape_fn(shape, |(i, j, k)| {
            let pos = [
                i as f64 / (shape[0] - 1).max(1) as f64 * cfg.grid_cells as f64,
                j as f64 / (shape[1] - 1).max(1) as f64 * cfg.grid_cells as f64,
                k as f64 / (shape[2] - 1).max(1) as f64 * cfg.grid_cells as f64,
            ];
            interp(ctrl, pos)
        })
    };
    [field(&ctrl[0]), field(&ctrl[1]), field(&ctrl[2])]
}

fn sample_trilinear(data: &Array3<f32>, pos: [f64; 3]) -> f32 {
    let s = data.shape();
    let cl = |p: f64, n: usize| p.clamp(0.0, (n - 1) as f64);
    let pos = [cl(pos[0], s[0]), cl(pos[1], s[1]), cl(pos[2], s[2])];
    let b = [pos[0].floor() as usize, pos[1].floor() as usize, pos[2].floor() as usize];
    let f = [pos[0] - b[0] as f64, pos[1] - b[1] as f64, pos[2] - b[2] as f64];
    let h = [(b[0] + 1).min(s[0] - 1), (b[1] + 1).min(s[1] - 1), (b[2] + 1).min(s[2] - 1)];
    let mut acc = 0.0f64;
    for (zi, wz) in [(b[0], 1.0 - f[0]), (h[0], f[0])] {
        for (yi, wy) in [(b[1], 1.0 - f[1]), (h[1], f[1])] {
            for (xi, wx) in [(b[2], 1.0 - f[2]), (h[2], f[2])] {
                acc += data[[zi, yi, xi]] as f64 * wz * wy * wx;
            }
        }
    }
    acc as f32
}

fn sample_nearest(data: &Array3<u8>, pos: [f64; 3]) -> u8 {
    let s = data.shape();
    let cl = |p: f64, n: usize| (p.round().clamp(0.0, (n - 1) as f64)) as usize;
    data[[cl(pos[0], s[0]), cl(pos[1], s[1]), cl(pos[2], s[2])]]
}

/// Warps image (trilinear) and optional label (nearest) with one shared
/// random deformation field.
pub fn grid_distort<R: Rng>(
    x: &Volume,
    y: Option<&LabelMap>,
    cfg: &GridDistortConfig,
    rng: &mut R,
) -> (Volume, Option<LabelMap>) {
    if let Some(y) = y {
        assert_eq!(x.shape(), y.shape(), "grid_distort: volume/label shape mismatch");
    }
    if cfg.max_displacement == 0.0 || !rng.random_bool(cfg.probability) {
        return (x.clone(), y.cloned());
    }
    let shape = x.shape();
    let field = displacement_field(shape, cfg, rng);
    let img = Array3::from_shape_fn(shape, |(i, j, k)| {
        let pos = [
            i as f64 + field[0][[i, j, k]] as f64,
            j as f64 + field[1][[i, j, k]] as f64,
            k as f64 + field[2][[i, j, k]] as f64,
        ];
        sample_trilinear(&x.data, pos)
    });
    let lab = y.map(|y| {
        let data = Array3::from_shape_fn(shape, |(i, j, k)| {
            let pos = [
                i as f64 + field[0][[i, j, k]] as f64,
                j as f64 + field[1][[i, j, k]] as f64,
                k as f64 + field[2][[i, j, k]] as f64,
            ];
            sample_nearest(&y.data, pos)
        });
        LabelMap { data, num_classes: y.num_classes }
    });
    (
        Volume { data: img, spacing: x.spacing, identifier: x.identifier.clone() },
        lab,
    )
}
