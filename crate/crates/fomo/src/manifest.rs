//! Split manifests: one JSON document per split naming the per-image
//! proposal and box tensors plus embedded annotations.
//!
//! Tensor paths are resolved relative to the manifest's directory. Loading
//! validates every invariant up front, so a returned [`Loaded`] is safe to
//! hand to any pipeline stage.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use fomo_core::geometry::BBox;
use fomo_core::linalg::{norm, Matrix};
use fomo_core::scene::{Dataset, GroundTruth, ImageRecord};
use serde::{Deserialize, Serialize};

use crate::tensorio::{self, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub embedding_dim: usize,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_file: Option<String>,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image_id: String,
    /// `P x D` proposal embeddings.
    pub proposal_tensor: String,
    /// `P x 4` proposal boxes.
    pub box_tensor: String,
    pub annotations: Vec<Annotation>,
}

/// [`GroundTruth`] with strict field checking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_index: usize,
}

impl From<Annotation> for GroundTruth {
    fn from(a: Annotation) -> Self {
        GroundTruth {
            bbox: a.bbox,
            class_index: a.class_index,
        }
    }
}

impl From<GroundTruth> for Annotation {
    fn from(g: GroundTruth) -> Self {
        Annotation {
            bbox: g.bbox,
            class_index: g.class_index,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: schema violation: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("missing tensor {}", path.display())]
    MissingTensor { path: PathBuf },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
}

/// A validated manifest together with the data it references.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub manifest: Manifest,
    pub dataset: Dataset,
    /// `N x D` attribute embeddings, when the manifest names a file.
    pub attributes: Option<Matrix>,
    pub warnings: Vec<String>,
    /// Every tensor file read, in manifest order.
    pub tensor_files: Vec<PathBuf>,
}

impl Manifest {
    /// Checks the parts that need no file access.
    fn check_schema(&self) -> Result<(), ManifestError> {
        let schema = |m: String| Err(ManifestError::Schema(m));
        if self.embedding_dim == 0 {
            return schema("embedding_dim must be >= 1".into());
        }
        if self.class_names.is_empty() {
            return schema("class_names is empty".into());
        }
        let mut seen = BTreeSet::new();
        for name in &self.class_names {
            if name.trim().is_empty() {
                return schema("class_names contains an empty name".into());
            }
            if !seen.insert(name.as_str()) {
                return schema(format!("duplicate class name `{name}`"));
            }
        }
        if matches!(&self.attribute_file, Some(p) if p.is_empty()) {
            return schema("attribute_file is empty".into());
        }
        if self.images.is_empty() {
            return schema("images is empty".into());
        }
        let mut ids = BTreeSet::new();
        for img in &self.images {
            if img.image_id.is_empty() {
                return schema("empty image_id".into());
            }
            if !ids.insert(img.image_id.as_str()) {
                return schema(format!("duplicate image_id `{}`", img.image_id));
            }
            if img.proposal_tensor.is_empty() || img.box_tensor.is_empty() {
                return schema(format!("image `{}` has an empty tensor path", img.image_id));
            }
            for a in &img.annotations {
                if a.class_index >= self.class_names.len() {
                    return schema(format!(
                        "image `{}`: class_index {} is not below {} classes",
                        img.image_id,
                        a.class_index,
                        self.class_names.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

fn read_existing(path: &Path) -> Result<Tensor, ManifestError> {
    if !path.is_file() {
        return Err(ManifestError::MissingTensor {
            path: path.to_path_buf(),
        });
    }
    Ok(tensorio::read_tensor(path)?)
}

fn matrix_with_cols(
    t: &Tensor,
    cols: usize,
    what: impl Fn() -> String,
) -> Result<Matrix, ManifestError> {
    if t.dims.len() != 2 {
        return Err(ManifestError::DimensionMismatch {
            what: format!("{} rank", what()),
            expected: 2,
            found: t.dims.len(),
        });
    }
    if t.last_dim() != cols {
        return Err(ManifestError::DimensionMismatch {
            what: what(),
            expected: cols,
            found: t.last_dim(),
        });
    }
    Ok(t.to_matrix())
}

pub fn parse_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses and validates a manifest, reading every referenced tensor.
pub fn load_manifest(path: &Path) -> Result<Loaded, ManifestError> {
    let manifest = parse_manifest(path)?;
    manifest.check_schema()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let d = manifest.embedding_dim;
    let mut tensor_files = Vec::new();

    let attributes = match &manifest.attribute_file {
        Some(rel) => {
            let p = base.join(rel);
            let m = matrix_with_cols(&read_existing(&p)?, d, || "attribute embeddings".into())?;
            if let Some(i) = m.iter_rows().position(|r| norm(r) == 0.0) {
                return Err(ManifestError::Schema(format!(
                    "attribute row {i} has zero norm"
                )));
            }
            tensor_files.push(p);
            Some(m)
        }
        None => None,
    };

    let mut images = Vec::with_capacity(manifest.images.len());
    for entry in &manifest.images {
        let id = &entry.image_id;
        let pp = base.join(&entry.proposal_tensor);
        let bp = base.join(&entry.box_tensor);
        let proposals =
            matrix_with_cols(&read_existing(&pp)?, d, || format!("proposals of `{id}`"))?;
        let raw = matrix_with_cols(&read_existing(&bp)?, 4, || format!("boxes of `{id}`"))?;
        if raw.rows() != proposals.rows() {
            return Err(ManifestError::DimensionMismatch {
                what: format!("box rows of `{id}`"),
                expected: proposals.rows(),
                found: raw.rows(),
            });
        }
        let boxes = raw
            .iter_rows()
            .map(|r| BBox::new(r[0], r[1], r[2], r[3]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ManifestError::Schema(format!("boxes of `{id}`: {e}")))?;
        tensor_files.extend([pp, bp]);
        images.push(ImageRecord {
            image_id: id.clone(),
            proposals,
            boxes,
            annotations: entry.annotations.iter().map(|&a| a.into()).collect(),
        });
    }

    let dataset = Dataset {
        embedding_dim: d,
        class_names: manifest.class_names.clone(),
        images,
    };
    dataset
        .validate()
        .map_err(|e| ManifestError::Schema(e.to_string()))?;
    let warnings = dataset
        .instance_counts()
        .iter()
        .zip(&dataset.class_names)
        .filter(|(&n, _)| n == 0)
        .map(|(_, name)| format!("class `{name}` has no annotations"))
        .collect();
    Ok(Loaded {
        manifest,
        dataset,
        attributes,
        warnings,
        tensor_files,
    })
}

/// Writes `dataset` as `<dir>/<name>.json` with tensors under
/// `<dir>/tensors/<name>/`. `attributes` is recorded as the manifest's
/// attribute file but not written. Returns the manifest path followed by
/// every tensor written.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    dataset: &Dataset,
    attributes: Option<&str>,
) -> Result<Vec<PathBuf>, ManifestError> {
    let rel_dir = format!("tensors/{name}");
    let tensor_dir = dir.join(&rel_dir);
    fs::create_dir_all(&tensor_dir).map_err(|source| ManifestError::Io {
        path: tensor_dir.clone(),
        source,
    })?;
    let mut images = Vec::with_capacity(dataset.images.len());
    let mut written = Vec::with_capacity(2 * dataset.images.len() + 1);
    for (i, img) in dataset.images.iter().enumerate() {
        let proposal_tensor = format!("{rel_dir}/{i:05}-proposals.fomo");
        let box_tensor = format!("{rel_dir}/{i:05}-boxes.fomo");
        tensorio::write_matrix(&dir.join(&proposal_tensor), &img.proposals)?;
        let rows: Vec<[f64; 4]> = img.boxes.iter().map(|&b| b.into()).collect();
        let boxes = Matrix::from_rows(&rows).map_err(|e| ManifestError::Schema(e.to_string()))?;
        tensorio::write_matrix(&dir.join(&box_tensor), &boxes)?;
        written.extend([dir.join(&proposal_tensor), dir.join(&box_tensor)]);
        images.push(ImageEntry {
            image_id: img.image_id.clone(),
            proposal_tensor,
            box_tensor,
            annotations: img.annotations.iter().map(|&a| a.into()).collect(),
        });
    }
    let manifest = Manifest {
        embedding_dim: dataset.embedding_dim,
        class_names: dataset.class_names.clone(),
        attribute_file: attributes.map(str::to_owned),
        images,
    };
    let path = dir.join(format!("{name}.json"));
    crate::persist::write_json(&path, &manifest).map_err(|source| ManifestError::Io {
        path: path.clone(),
        source,
    })?;
    written.insert(0, path);
    Ok(written)
}
