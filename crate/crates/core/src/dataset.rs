//! Labeled/unlabeled dataset views and on-disk layout.
//!
//! A phantom dataset directory looks like:
//! ```text
//! <root>/manifest.toml
//! <root>/images/<id>.nii.gz
//! <root>/labels/<id>.nii.gz   (labeled and test cases only)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;
use crate::phantom::PhantomSpec;
use crate::volume::{LabelMap, Volume};

/// Training data: `labeled` pairs and `unlabeled` volumes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub labeled: Vec<(Volume, LabelMap)>,
    pub unlabeled: Vec<Volume>,
}

impl Dataset {
    pub fn new(labeled: Vec<(Volume, LabelMap)>, unlabeled: Vec<Volume>) -> Result<Self> {
        let ds = Dataset { labeled, unlabeled };
        ds.check_identifiers()?;
        for (v, y) in &ds.labeled {
            if v.shape() != y.shape() {
                return Err(Error::Shape(format!(
                    "volume '{}' and its labels have different shapes",
                    v.identifier
                )));
            }
        }
        Ok(ds)
    }

    fn check_identifiers(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self
            .labeled
            .iter()
            .map(|(v, _)| &v.identifier)
            .chain(self.unlabeled.iter().map(|v| &v.identifier))
        {
            if !seen.insert(id.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate volume identifier '{id}' across splits"
                )));
            }
        }
        Ok(())
    }

    /// Number of labeled cases (N).
    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    /// Number of unlabeled cases (M).
    pub fn m_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    /// Training requires at least one labeled case.
    pub fn require_trainable(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one labeled case".into()));
        }
        Ok(())
    }

    /// Moves all but the first `ceil(ratio * N)` labeled cases into the
    /// unlabeled pool, mimicking partial-annotation protocols.
    pub fn with_labeled_ratio(mut self, ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "labeled ratio must be in [0, 1], got {ratio}"
            )));
        }
        let keep = ((ratio * self.labeled.len() as f64).ceil() as usize).min(self.labeled.len());
        if keep == 0 {
            return Err(Error::InvalidArgument(
                "labeled ratio keeps zero labeled cases; training would be impossible".into(),
            ));
        }
        for (v, _) in self.labeled.split_off(keep) {
            self.unlabeled.push(v);
        }
        Dataset::new(self.labeled, self.unlabeled)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: PhantomSpec,
    train_labeled: Vec<String>,
    train_unlabeled: Vec<String>,
    test: Vec<String>,
}

fn image_path(root: &Path, id: &str) -> std::path::PathBuf {
    root.join("images").join(format!("{id}.nii.gz"))
}

fn label_path(root: &Path, id: &str) -> std::path::PathBuf {
    root.join("labels").join(format!("{id}.nii.gz"))
}

/// Persists a phantom dataset (train split plus held-out test cases).
pub fn save_phantom_dataset(
    root: impl AsRef<Path>,
    train: &Dataset,
    test: &[(Volume, LabelMap)],
    spec: &PhantomSpec,
) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root)?;
    let manifest = Manifest {
        spec: spec.clone(),
        train_labeled: train.labeled.iter().map(|(v, _)| v.identifier.clone()).collect(),
        train_unlabeled: train.unlabeled.iter().map(|v| v.identifier.clone()).collect(),
        test: test.iter().map(|(v, _)| v.identifier.clone()).collect(),
    };
    for (v, y) in train.labeled.iter().chain(test.iter()) {
        nifti::save_volume(image_path(root, &v.identifier), v)?;
        nifti::save_label(label_path(root, &v.identifier), y, v.spacing)?;
    }
    for v in &train.unlabeled {
        nifti::save_volume(image_path(root, &v.identifier), v)?;
    }
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    std::fs::write(root.join("manifest.toml"), text)?;
    Ok(())
}

fn load_case(root: &Path, id: &str, num_classes: usize, with_label: bool) -> Result<(Volume, Option<LabelMap>)> {
    let (volume, _) = nifti::load_nifti(image_path(root, id))?;
    if !with_label {
        return Ok((volume, None));
    }
    let (raw, inferred) = nifti::load_nifti(label_path(root, id))?;
    let lab = match inferred {
        Some(l) => LabelMap::new(l.data, num_classes)?,
        None => {
            let data = raw.data.mapv(|v| v as u8);
            LabelMap::new(data, num_classes)?
        }
    };
    Ok((volume, Some(lab)))
}

/// Loads a dataset written by [`save_phantom_dataset`].
pub fn load_phantom_dataset(
    root: impl AsRef<Path>,
) -> Result<(Dataset, Vec<(Volume, LabelMap)>, PhantomSpec)> {
    let root = root.as_ref();
    let text = std::fs::read_to_string(root.join("manifest.toml"))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    manifest.spec.validate()?;
    let c = manifest.spec.num_classes;

    let mut labeled = Vec::new();
    for id in &manifest.train_labeled {
        let (v, y) = load_case(root, id, c, true)?;
        labeled.push((v, y.unwrap()));
    }
    let mut unlabeled = Vec::new();
    for id in &manifest.train_unlabeled {
        let (v, _) = load_case(root, id, c, false)?;
        unlabeled.push(v);
    }
    let mut test = Vec::new();
    for id in &manifest.test {
        let (v, y) = load_case(root, id, c, true)?;
        test.push((v, y.unwrap()));
    }
    Ok((Dataset::new(labeled, unlabeled)?, test, manifest.spec))
}
