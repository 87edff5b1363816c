use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::linalg::{dot, norm, Matrix};
use crate::scene::{Dataset, GroundTruth, ImageRecord};

/// Side length of every synthetic image.
pub const CANVAS: f64 = 640.0;
/// Side length of one object slot; an image holds `(CANVAS / CELL)²` slots.
pub const CELL: f64 = 160.0;
const GRID: usize = 4;

/// Fraction of the attribute span mixed into a distractor.
const LEAKAGE: f64 = 0.1;
/// Largest `|cos|` a distractor may have with any basis row.
const DISTRACTOR_MAX_COS: f64 = 0.2;
const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub k_known: usize,
    pub k_unknown: usize,
    /// Attribute count `N`.
    pub n_attributes: usize,
    /// Planted attributes per class.
    pub support: usize,
    /// Embedding dimension `D`.
    pub dim: usize,
    /// Isotropic noise added to object embeddings before normalization.
    pub sigma: f64,
    pub n_distractors: usize,
    pub seed: u64,
    /// Train objects per known class.
    pub train_known_instances: usize,
    /// Train objects per unknown class (rarer than any known class).
    pub train_unknown_instances: usize,
    /// Test objects per class.
    pub test_instances: usize,
    /// Weight of the shared text-side offset.
    pub text_gap: f64,
    /// Per-row text noise, relative to a unit vector.
    pub text_noise: f64,
    /// Size of the generic candidate-name vocabulary.
    pub vocab_size: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            k_known: 6,
            k_unknown: 3,
            n_attributes: 32,
            support: 2,
            dim: 64,
            sigma: 0.05,
            n_distractors: 200,
            seed: 7,
            train_known_instances: 12,
            train_unknown_instances: 4,
            test_instances: 20,
            text_gap: 0.5,
            text_noise: 0.3,
            vocab_size: 16,
        }
    }
}

impl WorldParams {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.k_known == 0 {
            v.push("k_known must be >= 1".into());
        }
        if self.support == 0 || self.support > self.n_attributes {
            v.push(format!(
                "support must lie in 1..={} (got {})",
                self.n_attributes, self.support
            ));
        }
        if self.dim < self.n_attributes {
            v.push(format!(
                "dim ({}) must be >= n_attributes ({})",
                self.dim, self.n_attributes
            ));
        }
        if self.k_known * self.support > self.n_attributes {
            v.push(format!(
                "k_known * support ({}) exceeds n_attributes ({})",
                self.k_known * self.support,
                self.n_attributes
            ));
        }
        if self.k_unknown > 0 && self.k_known < self.support {
            v.push("unknown classes need k_known >= support".into());
        }
        if self.n_distractors > 0 && self.dim == self.n_attributes {
            v.push("distractors need dim > n_attributes".into());
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            v.push(format!(
                "sigma must be finite and >= 0 (got {})",
                self.sigma
            ));
        }
        for (name, x) in [("text_gap", self.text_gap), ("text_noise", self.text_noise)] {
            if !(x.is_finite() && x >= 0.0) {
                v.push(format!("{name} must be finite and >= 0 (got {x})"));
            }
        }
        if self.train_known_instances == 0 || self.test_instances == 0 {
            v.push("train_known_instances and test_instances must be >= 1".into());
        }
        if self.train_unknown_instances >= self.train_known_instances {
            v.push("train_unknown_instances must be below train_known_instances".into());
        }
        v
    }
}

/// Planted structure retained for oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    /// `K_all x N`, one on each class's support.
    pub w_star: Matrix,
    /// Sorted support per class (dataset class order).
    pub supports: Vec<Vec<usize>>,
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
    /// Per test image and proposal: the object's class, or `None` for a
    /// distractor.
    pub test_labels: Vec<Vec<Option<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    /// `N x D` orthonormal attribute basis.
    pub basis: Matrix,
    pub train: Dataset,
    pub test: Dataset,
    pub attribute_names: Vec<String>,
    /// `N x D` text-side attribute embeddings.
    pub attribute_embeddings: Matrix,
    /// `K_all x D` text-side class-name embeddings.
    pub class_text: Matrix,
    pub generic: Vec<f64>,
    pub vocab_names: Vec<String>,
    pub vocab: Matrix,
    pub truth: WorldTruth,
}

impl SyntheticWorld {
    /// Embeddings of test proposals with their labels, in image order.
    pub fn test_items(&self) -> impl Iterator<Item = (&[f64], Option<usize>)> + '_ {
        self.test
            .images
            .iter()
            .zip(&self.truth.test_labels)
            .flat_map(|(img, labels)| img.proposals.iter_rows().zip(labels.iter().copied()))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Orthonormal rows by Gram-Schmidt (two passes) on Gaussian draws.
fn orthonormal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = gaussian(rng, d);
        for _ in 0..2 {
            for r in &rows {
                let c = dot(&v, r);
                axpy(-c, r, &mut v);
            }
        }
        if norm(&v) > 1e-6 {
            rows.push(unit(v));
        }
    }
    Matrix::from_rows(&rows)
}

/// `v` minus its projection on the row span of `basis`.
fn complement(basis: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    for b in basis.iter_rows() {
        axpy(-dot(v, b), b, &mut out);
    }
    out
}

fn in_span(basis: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for b in basis.iter_rows() {
        axpy(dot(v, b), b, &mut out);
    }
    out
}

fn distractor(rng: &mut ChaCha8Rng, basis: &Matrix) -> Result<Vec<f64>> {
    let d = basis.cols();
    for _ in 0..MAX_REJECTIONS {
        let o = unit(complement(basis, &gaussian(rng, d)));
        let i = unit(in_span(basis, &gaussian(rng, d)));
        let mut v = o;
        axpy(LEAKAGE, &i, &mut v);
        let v = unit(v);
        if basis
            .iter_rows()
            .all(|b| dot(b, &v).abs() <= DISTRACTOR_MAX_COS)
        {
            return Ok(v);
        }
    }
    Err(Error::InfeasibleWorld(format!(
        "no distractor within cos {DISTRACTOR_MAX_COS} of the basis after {MAX_REJECTIONS} draws"
    )))
}

fn noisy(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    let mut v = mean.to_vec();
    let g = gaussian(rng, mean.len());
    axpy(sigma, &g, &mut v);
    unit(v)
}

/// Text-side embedding: `normalize(v + gap·g + noise·ξ/√D)`.
fn text_side(rng: &mut ChaCha8Rng, v: &[f64], gap_dir: &[f64], p: &WorldParams) -> Vec<f64> {
    let mut out = v.to_vec();
    axpy(p.text_gap, gap_dir, &mut out);
    let xi = gaussian(rng, v.len());
    axpy(p.text_noise / libm::sqrt(v.len() as f64), &xi, &mut out);
    unit(out)
}

fn slot_box(rng: &mut ChaCha8Rng, slot: usize) -> BBox {
    let (row, col) = ((slot / GRID) as f64, (slot % GRID) as f64);
    let x1 = col * CELL + rng.gen_range(8.0..24.0);
    let y1 = row * CELL + rng.gen_range(8.0..24.0);
    let w = rng.gen_range(96.0..128.0);
    let h = rng.gen_range(96.0..128.0);
    BBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Generates a world whose class embeddings are noisy sparse combinations of
/// an orthonormal attribute basis and whose distractors lie (almost) outside
/// its span.
pub fn generate_world(p: &WorldParams) -> Result<SyntheticWorld> {
    let v = p.violations();
    if !v.is_empty() {
        return Err(Error::InfeasibleWorld(v.join("; ")));
    }
    let (n, d, ns) = (p.n_attributes, p.dim, p.support);
    let k_all = p.k_known + p.k_unknown;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let basis = orthonormal_rows(&mut rng, n, d)?;

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut supports: Vec<Vec<usize>> = (0..p.k_known)
        .map(|c| {
            let mut s = perm[c * ns..(c + 1) * ns].to_vec();
            s.sort_unstable();
            s
        })
        .collect();
    for _ in 0..p.k_unknown {
        // one attribute from each of `support` distinct known classes
        let donors = rand::seq::index::sample(&mut rng, p.k_known, ns).into_vec();
        let mut s: Vec<usize> = donors
            .iter()
            .map(|&c| supports[c][rng.gen_range(0..ns)])
            .collect();
        s.sort_unstable();
        supports.push(s);
    }
    let mut w_star = Matrix::zeros(k_all, n);
    let mut means = Matrix::zeros(k_all, d);
    for (c, s) in supports.iter().enumerate() {
        for &j in s {
            w_star[(c, j)] = 1.0;
            axpy(1.0, basis.row(j), means.row_mut(c));
        }
        let m = unit(means.row(c).to_vec());
        means.row_mut(c).copy_from_slice(&m);
    }

    let gap_dir = unit(gaussian(&mut rng, d));
    let attribute_embeddings = Matrix::from_rows(
        &basis
            .iter_rows()
            .map(|b| text_side(&mut rng, b, &gap_dir, p))
            .collect::<Vec<_>>(),
    )?;
    let class_text = Matrix::from_rows(
        &means
            .iter_rows()
            .map(|m| text_side(&mut rng, m, &gap_dir, p))
            .collect::<Vec<_>>(),
    )?;
    let mut generic = vec![0.0; d];
    for b in basis.iter_rows() {
        axpy(1.0 / libm::sqrt(n as f64), b, &mut generic);
    }
    axpy(p.text_gap, &gap_dir, &mut generic);
    let generic = unit(generic);
    let vocab_rows: Vec<Vec<f64>> = (0..p.vocab_size)
        .map(|_| {
            let m = unit(in_span(&basis, &gaussian(&mut rng, d)));
            text_side(&mut rng, &m, &gap_dir, p)
        })
        .collect();
    let vocab = if vocab_rows.is_empty() {
        Matrix::zeros(0, d)
    } else {
        Matrix::from_rows(&vocab_rows)?
    };

    let class_names: Vec<String> = (0..p.k_known)
        .map(|c| format!("k{c}"))
        .chain((0..p.k_unknown).map(|u| format!("u{u}")))
        .collect();
    let slots = GRID * GRID;

    let mut train_items: Vec<usize> = Vec::new();
    for c in 0..k_all {
        let count = if c < p.k_known {
            p.train_known_instances
        } else {
            p.train_unknown_instances
        };
        train_items.extend(core::iter::repeat_n(c, count));
    }
    train_items.shuffle(&mut rng);
    let mut train_images = Vec::new();
    for (i, chunk) in train_items.chunks(slots).enumerate() {
        let mut rows = Vec::new();
        let mut boxes = Vec::new();
        let mut annotations = Vec::new();
        for (slot, &c) in chunk.iter().enumerate() {
            let obj = noisy(&mut rng, means.row(c), p.sigma);
            let b = slot_box(&mut rng, slot);
            annotations.push(GroundTruth {
                bbox: b,
                class_index: c,
            });
            // exact box, a close jitter (IoU ≈ 0.9) and a loose shift (IoU ≈ 0.43)
            rows.push(obj.clone());
            boxes.push(b);
            rows.push(noisy(&mut rng, &obj, 0.02));
            boxes.push(b.translate(0.05 * b.width(), 0.0));
            let mut loose = obj;
            axpy(1.0, &unit(gaussian(&mut rng, d)), &mut loose);
            rows.push(unit(loose));
            boxes.push(b.translate(0.4 * b.width(), 0.0));
        }
        train_images.push(ImageRecord {
            image_id: format!("train-{i:04}"),
            proposals: Matrix::from_rows(&rows)?,
            boxes,
            annotations,
        });
    }

    let mut test_items: Vec<Option<usize>> = Vec::new();
    for c in 0..k_all {
        test_items.extend(core::iter::repeat_n(Some(c), p.test_instances));
    }
    test_items.extend(core::iter::repeat_n(None, p.n_distractors));
    test_items.shuffle(&mut rng);
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    for (i, chunk) in test_items.chunks(slots).enumerate() {
        let mut rows = Vec::new();
        let mut boxes = Vec::new();
        let mut annotations = Vec::new();
        for (slot, &item) in chunk.iter().enumerate() {
            let b = slot_box(&mut rng, slot);
            boxes.push(b);
            match item {
                Some(c) => {
                    rows.push(noisy(&mut rng, means.row(c), p.sigma));
                    annotations.push(GroundTruth {
                        bbox: b,
                        class_index: c,
                    });
                }
                None => rows.push(distractor(&mut rng, &basis)?),
            }
        }
        test_images.push(ImageRecord {
            image_id: format!("test-{i:04}"),
            proposals: Matrix::from_rows(&rows)?,
            boxes,
            annotations,
        });
        test_labels.push(chunk.to_vec());
    }

    let dataset = |images| Dataset {
        embedding_dim: d,
        class_names: class_names.clone(),
        images,
    };
    Ok(SyntheticWorld {
        params: p.clone(),
        train: dataset(train_images),
        test: dataset(test_images),
        attribute_names: (0..n).map(|j| format!("attribute {j:02}")).collect(),
        attribute_embeddings,
        class_text,
        generic,
        vocab_names: (0..p.vocab_size).map(|j| format!("thing {j:02}")).collect(),
        vocab,
        truth: WorldTruth {
            w_star,
            supports,
            known: (0..p.k_known).collect(),
            unknown: (p.k_known..k_all).collect(),
            test_labels,
        },
        basis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedspace::cosine_sim;
    use crate::geometry::iou;

    fn small() -> WorldParams {
        WorldParams {
            k_known: 3,
            k_unknown: 1,
            n_attributes: 8,
            dim: 16,
            n_distractors: 10,
            test_instances: 3,
            ..WorldParams::default()
        }
    }

    #[test]
    fn basis_is_orthonormal() {
        let w = generate_world(&small()).unwrap();
        let g = w.basis.matmul(&w.basis.transpose()).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(8)) < 1e-12);
    }

    #[test]
    fn noiseless_objects_align_with_their_combination() {
        let w = generate_world(&WorldParams {
            sigma: 0.0,
            ..small()
        })
        .unwrap();
        for (e, label) in w.test_items() {
            if let Some(c) = label {
                let dir = w.truth.w_star.select_rows(&[c]).matmul(&w.basis).unwrap();
                assert!((cosine_sim(e, dir.row(0)).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distractors_stay_off_the_basis() {
        let w = generate_world(&small()).unwrap();
        let mut seen = 0;
        for (e, label) in w.test_items() {
            if label.is_none() {
                seen += 1;
                for b in w.basis.iter_rows() {
                    assert!(cosine_sim(e, b).unwrap().abs() <= DISTRACTOR_MAX_COS);
                }
            }
        }
        assert_eq!(seen, 10);
    }

    #[test]
    fn supports_have_planted_size() {
        let w = generate_world(&small()).unwrap();
        for row in w.truth.w_star.iter_rows() {
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 2);
        }
        let counts = w.train.instance_counts();
        assert_eq!(counts, vec![12, 12, 12, 4]);
        w.train.validate().unwrap();
        w.test.validate().unwrap();
    }

    #[test]
    fn train_proposals_straddle_the_exemplar_threshold() {
        let w = generate_world(&small()).unwrap();
        let img = &w.train.images[0];
        let gt = img.annotations[0].bbox;
        assert_eq!(iou(&img.boxes[0], &gt).unwrap(), 1.0);
        assert!(iou(&img.boxes[1], &gt).unwrap() >= 0.8);
        assert!(iou(&img.boxes[2], &gt).unwrap() < 0.8);
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(
            generate_world(&small()).unwrap(),
            generate_world(&small()).unwrap()
        );
        let other = generate_world(&WorldParams { seed: 8, ..small() }).unwrap();
        assert_ne!(other.basis, generate_world(&small()).unwrap().basis);
    }

    #[test]
    fn infeasible_dims_are_rejected() {
        let bad = WorldParams {
            dim: 4,
            support: 9,
            ..small()
        };
        let Err(Error::InfeasibleWorld(msg)) = generate_world(&bad) else {
            panic!("expected an infeasible world");
        };
        assert!(msg.contains("dim") && msg.contains("support"));
    }
}
