//! Synthetic ellipsoid phantoms: deterministic, desk-scale stand-ins for CT
//! volumes with pixel-exact ground truth.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

/// Recipe for one family of phantom volumes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub volume_shape: [usize; 3],
    pub num_classes: usize,
    /// Inclusive range of ellipsoid count per foreground class.
    pub shapes_per_class: (usize, usize),
    /// Per-class mean intensity; index 0 is background.
    pub intensity_means: Vec<f32>,
    pub noise_sigma: f32,
    pub bias_field_strength: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            volume_shape: [64, 64, 64],
            num_classes: 3,
            shapes_per_class: (1, 2),
            intensity_means: vec![0.0, 0.6, -0.6],
            noise_sigma: 0.15,
            bias_field_strength: 0.4,
            seed: 17,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("phantoms need at least 2 classes".into()));
        }
        if self.intensity_means.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "expected {} intensity means, got {}",
                self.num_classes,
                self.intensity_means.len()
            )));
        }
        for i in 0..self.intensity_means.len() {
            for j in i + 1..self.intensity_means.len() {
                if self.intensity_means[i] == self.intensity_means[j] {
                    return Err(Error::InvalidArgument(format!(
                        "intensity means must be pairwise distinct; classes {i} and {j} share {}",
                        self.intensity_means[i]
                    )));
                }
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise sigma must be non-negative".into()));
        }
        if self.bias_field_strength < 0.0 {
            return Err(Error::InvalidArgument("bias field strength must be non-negative".into()));
        }
        if self.shapes_per_class.0 < 1 || self.shapes_per_class.0 > self.shapes_per_class.1 {
            return Err(Error::InvalidArgument(format!(
                "shapes_per_class range {:?} is invalid",
                self.shapes_per_class
            )));
        }
        if self.volume_shape.iter().any(|&d| d < 8) {
            return Err(Error::InvalidArgument("phantom volumes must be at least 8 voxels per axis".into()));
        }
        Ok(())
    }
}

/// Smooth multiplicative shading: a low-resolution random field upsampled
/// trilinearly to the volume shape, scaled into `1 +- strength`.
fn bias_field<R: Rng>(shape: [usize; 3], strength: f32, rng: &mut R) -> Array3<f32> {
    const GRID: usize = 5;
    let coarse = Array3::from_shape_fn((GRID, GRID, GRID), |_| rng.random_range(-1.0f32..1.0));
    Array3::from_shape_fn(shape, |(i, j, k)| {
        let pos = [
            i as f64 / (shape[0] - 1).max(1) as f64 * (GRID - 1) as f64,
            j as f64 / (shape[1] - 1).max(1) as f64 * (GRID - 1) as f64,
            k as f64 / (shape[2] - 1).max(1) as f64 * (GRID - 1) as f64,
        ];
        let b = [pos[0].floor() as usize, pos[1].floor() as usize, pos[2].floor() as usize];
        let f = [pos[0] - b[0] as f64, pos[1] - b[1] as f64, pos[2] - b[2] as f64];
        let h = [
            (b[0] + 1).min(GRID - 1),
            (b[1] + 1).min(GRID - 1),
            (b[2] + 1).min(GRID - 1),
        ];
        let mut acc = 0.0f64;
        for (zi, wz) in [(b[0], 1.0 - f[0]), (h[0], f[0])] {
            for (yi, wy) in [(b[1], 1.0 - f[1]), (h[1], f[1])] {
                for (xi, wx) in [(b[2], 1.0 - f[2]), (h[2], f[2])] {
                    acc += coarse[[zi, yi, xi]] as f64 * wz * wy * wx;
                }
            }
        }
        1.0 + strength * acc as f32
    })
}

fn synthesize<R: Rng>(spec: &PhantomSpec, identifier: String, rng: &mut R) -> (Volume, LabelMap) {
    let shape = spec.volume_shape;
    let mut img = Array3::from_elem(shape, spec.intensity_means[0]);
    let mut lab = Array3::<u8>::zeros(shape);

    for class in 1..spec.num_classes {
        let count = rng.random_range(spec.shapes_per_class.0..=spec.shapes_per_class.1);
        for _ in 0..count {
            let mut center = [0.0f64; 3];
            let mut semi = [0.0f64; 3];
            for a in 0..3 {
                let l = shape[a] as f64;
                center[a] = rng.random_range(0.2 * l..0.8 * l);
                semi[a] = rng.random_range(0.10 * l..0.22 * l).max(2.0);
            }
            let lo = [
                (center[0] - semi[0]).floor().max(0.0) as usize,
                (center[1] - semi[1]).floor().max(0.0) as usize,
                (center[2] - semi[2]).floor().max(0.0) as usize,
            ];
            let hi = [
                ((center[0] + semi[0]).ceil() as usize).min(shape[0] - 1),
                ((center[1] + semi[1]).ceil() as usize).min(shape[1] - 1),
                ((center[2] + semi[2]).ceil() as usize).min(shape[2] - 1),
            ];
            for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        let d = ((i as f64 - center[0]) / semi[0]).powi(2)
                            + ((j as f64 - center[1]) / semi[1]).powi(2)
                            + ((k as f64 - center[2]) / semi[2]).powi(2);
                        if d <= 1.0 {
                            lab[[i, j, k]] = class as u8;
                            img[[i, j, k]] = spec.intensity_means[class];
                        }
                    }
                }
            }
        }
    }

    if spec.bias_field_strength > 0.0 {
        let field = bias_field(shape, spec.bias_field_strength, rng);
        img.zip_mut_with(&field, |v, &f| *v *= f);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise_sigma as f64).unwrap();
        img.mapv_inplace(|v| v + normal.sample(rng) as f32);
    }

    let volume = Volume::new(img, [1.0; 3], identifier).expect("phantom construction is valid");
    let label = LabelMap::new(lab, spec.num_classes).expect("painted labels are in range");
    (volume, label)
}

/// Generates a deterministic phantom dataset: `count_labeled` volumes with
/// ground truth plus `count_unlabeled` without.
pub fn generate_phantoms(
    spec: &PhantomSpec,
    count_labeled: usize,
    count_unlabeled: usize,
) -> Result<Dataset> {
    spec.validate()?;
    if count_labeled + count_unlabeled == 0 {
        return Err(Error::InvalidArgument("requested an empty phantom dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labeled = Vec::with_capacity(count_labeled);
    for i in 0..count_labeled {
        labeled.push(synthesize(spec, format!("lab-{i:03}"), &mut rng));
    }
    let mut unlabeled = Vec::with_capacity(count_unlabeled);
    for i in 0..count_unlabeled {
        let (v, _) = synthesize(spec, format!("unl-{i:03}"), &mut rng);
        unlabeled.push(v);
    }
    Dataset::new(labeled, unlabeled)
}

/// Generates a training set and a held-out labelled test split in one
/// deterministic stream.
pub fn generate_split(
    spec: &PhantomSpec,
    count_labeled: usize,
    count_unlabeled: usize,
    count_test: usize,
) -> Result<(Dataset, Vec<(Volume, LabelMap)>)> {
    spec.validate()?;
    if count_labeled + count_unlabeled == 0 {
        return Err(Error::InvalidArgument("requested an empty phantom dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labeled = Vec::with_capacity(count_labeled);
    for i in 0..count_labeled {
        labeled.push(synthesize(spec, format!("lab-{i:03}"), &mut rng));
    }
    let mut unlabeled = Vec::with_capacity(count_unlabeled);
    for i in 0..count_unlabeled {
        let (v, _) = synthesize(spec, format!("unl-{i:03}"), &mut rng);
        unlabeled.push(v);
    }
    let mut test = Vec::with_capacity(count_test);
    for i in 0..count_test {
        test.push(synthesize(spec, format!("test-{i:03}"), &mut rng));
    }
    Ok((Dataset::new(labeled, unlabeled)?, test))
}
