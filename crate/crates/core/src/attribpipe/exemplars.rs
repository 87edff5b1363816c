use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::linalg::Matrix;
use crate::scene::Dataset;

/// Minimum IoU between a proposal box and the ground-truth box for the
/// proposal's embedding to describe that object (inclusive).
pub const EXEMPLAR_IOU: f64 = 0.8;

/// How one ground-truth object is turned into an exemplar embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarMode {
    /// The surviving proposal embedding farthest from their mean.
    Fomo,
    /// The mean of the surviving proposal embeddings.
    Average,
}

/// Few-shot exemplar embeddings grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub class_names: Vec<String>,
    /// One `shots x D` matrix per class.
    pub per_class: Vec<Matrix>,
}

impl ExemplarSet {
    pub fn new(class_names: Vec<String>, per_class: Vec<Matrix>) -> Result<Self> {
        if class_names.len() != per_class.len() {
            return Err(Error::DimensionMismatch {
                context: "exemplar classes",
                expected: class_names.len(),
                found: per_class.len(),
            });
        }
        if class_names.is_empty() {
            return Err(Error::EmptyInput("exemplar classes"));
        }
        let dim = per_class[0].cols();
        for (name, m) in class_names.iter().zip(&per_class) {
            if m.rows() == 0 {
                return Err(Error::NoExemplars {
                    class: name.clone(),
                });
            }
            if m.cols() != dim {
                return Err(Error::DimensionMismatch {
                    context: "exemplar embedding",
                    expected: dim,
                    found: m.cols(),
                });
            }
        }
        Ok(Self {
            class_names,
            per_class,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn dim(&self) -> usize {
        self.per_class[0].cols()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Matrix::rows).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `K x D` per-class arithmetic means.
    pub fn class_means(&self) -> Matrix {
        let mut out = Matrix::zeros(self.n_classes(), self.dim());
        for (c, m) in self.per_class.iter().enumerate() {
            let row = out.row_mut(c);
            for r in m.iter_rows() {
                for (o, v) in row.iter_mut().zip(r) {
                    *o += v;
                }
            }
            let n = m.rows() as f64;
            row.iter_mut().for_each(|o| *o /= n);
        }
        out
    }

    /// All exemplars stacked in class order, with one-hot labels.
    pub fn stacked(&self) -> (Matrix, Matrix) {
        let total = self.len();
        let mut x = Matrix::zeros(total, self.dim());
        let mut y = Matrix::zeros(total, self.n_classes());
        let mut r = 0;
        for (c, m) in self.per_class.iter().enumerate() {
            for row in m.iter_rows() {
                x.row_mut(r).copy_from_slice(row);
                y[(r, c)] = 1.0;
                r += 1;
            }
        }
        (x, y)
    }
}

/// Builds per-class exemplars for `classes` (dataset class indices) from
/// ground-truth boxes and the proposals overlapping them.
///
/// For every ground-truth object, proposals with IoU ≥ [`EXEMPLAR_IOU`] are
/// kept and reduced to one embedding according to `mode`. Then
/// `min(shots, available)` objects per class are sampled with `seed`.
pub fn build_exemplar_set(
    dataset: &Dataset,
    classes: &[usize],
    shots: usize,
    mode: ExemplarMode,
    seed: u64,
) -> Result<ExemplarSet> {
    if shots == 0 {
        return Err(Error::InvalidConfig("shots must be >= 1".into()));
    }
    let mut names = Vec::with_capacity(classes.len());
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in classes {
        let name = dataset
            .class_names
            .get(class)
            .ok_or(Error::ClassOutOfRange {
                index: class,
                len: dataset.class_names.len(),
                context: "dataset classes",
            })?
            .clone();
        let mut available: Vec<Vec<f64>> = Vec::new();
        for img in &dataset.images {
            for gt in img.annotations.iter().filter(|a| a.class_index == class) {
                let mut kept: Vec<usize> = Vec::new();
                for (p, b) in img.boxes.iter().enumerate() {
                    if iou(b, &gt.bbox)? >= EXEMPLAR_IOU {
                        kept.push(p);
                    }
                }
                if !kept.is_empty() {
                    available.push(reduce_proposals(&img.proposals, &kept, mode));
                }
            }
        }
        if available.is_empty() {
            return Err(Error::NoExemplars { class: name });
        }
        let take = shots.min(available.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        let mut picks = rand::seq::index::sample(&mut rng, available.len(), take).into_vec();
        picks.sort_unstable();
        let rows: Vec<&[f64]> = picks.iter().map(|&i| available[i].as_slice()).collect();
        per_class.push(Matrix::from_rows(&rows)?);
        names.push(name);
    }
    ExemplarSet::new(names, per_class)
}

fn reduce_proposals(proposals: &Matrix, kept: &[usize], mode: ExemplarMode) -> Vec<f64> {
    let dim = proposals.cols();
    let mut mean = alloc::vec![0.0; dim];
    for &p in kept {
        for (m, v) in mean.iter_mut().zip(proposals.row(p)) {
            *m += v;
        }
    }
    let n = kept.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    match mode {
        ExemplarMode::Average => mean,
        ExemplarMode::Fomo => {
            let mut best = kept[0];
            let mut best_d = f64::NEG_INFINITY;
            for &p in kept {
                let d: f64 = proposals
                    .row(p)
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                // strict: equal distances keep the lower proposal index
                if d > best_d {
                    best_d = d;
                    best = p;
                }
            }
            proposals.row(best).to_vec()
        }
    }
}
