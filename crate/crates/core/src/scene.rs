//! In-memory form of a detection split: per-image proposals with their
//! visual embeddings and boxes, plus ground-truth annotations.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::linalg::Matrix;

/// One ground-truth object inside an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_index: usize,
}

/// A ground-truth object addressed by image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    /// `P x D` proposal embeddings.
    pub proposals: Matrix,
    /// One box per proposal row.
    pub boxes: Vec<BBox>,
    pub annotations: Vec<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub embedding_dim: usize,
    pub class_names: Vec<String>,
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    /// Checks the structural invariants shared by every consumer.
    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            if img.proposals.cols() != self.embedding_dim {
                return Err(Error::DimensionMismatch {
                    context: "proposal embedding",
                    expected: self.embedding_dim,
                    found: img.proposals.cols(),
                });
            }
            if img.boxes.len() != img.proposals.rows() {
                return Err(Error::DimensionMismatch {
                    context: "proposal boxes",
                    expected: img.proposals.rows(),
                    found: img.boxes.len(),
                });
            }
            for a in &img.annotations {
                if a.class_index >= self.class_names.len() {
                    return Err(Error::ClassOutOfRange {
                        index: a.class_index,
                        len: self.class_names.len(),
                        context: "dataset classes",
                    });
                }
            }
        }
        Ok(())
    }

    /// Flat list of every annotation, in image order.
    pub fn annotations(&self) -> Vec<AnnotationRecord> {
        self.images
            .iter()
            .flat_map(|img| {
                img.annotations.iter().map(move |a| AnnotationRecord {
                    image_id: img.image_id.clone(),
                    bbox: a.bbox,
                    class_index: a.class_index,
                })
            })
            .collect()
    }

    pub fn instance_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0usize; self.class_names.len()];
        for img in &self.images {
            for a in &img.annotations {
                counts[a.class_index] += 1;
            }
        }
        counts
    }
}
