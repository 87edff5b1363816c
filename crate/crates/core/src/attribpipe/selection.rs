use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExemplarSet, TrainConfig, TrainReport};
use crate::embedspace::attribute_scores;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softplus, Matrix};

/// Attribute-score vectors with their multi-hot class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `M x N` attribute scores.
    pub scores: Matrix,
    /// `M x K` labels in {0, 1}.
    pub labels: Matrix,
}

impl Batch {
    pub fn new(scores: Matrix, labels: Matrix) -> Result<Self> {
        if scores.rows() != labels.rows() {
            return Err(Error::DimensionMismatch {
                context: "batch labels",
                expected: scores.rows(),
                found: labels.rows(),
            });
        }
        if scores.rows() == 0 {
            return Err(Error::EmptyInput("training batch"));
        }
        Ok(Self { scores, labels })
    }

    /// Scores every exemplar against `e_att`; labels are one-hot by class.
    pub fn from_exemplars(e_att: &Matrix, exemplars: &ExemplarSet) -> Result<Self> {
        let (x, labels) = exemplars.stacked();
        let mut scores = Matrix::zeros(x.rows(), e_att.rows());
        for m in 0..x.rows() {
            let s = attribute_scores(x.row(m), e_att)?;
            scores.row_mut(m).copy_from_slice(&s);
        }
        Batch::new(scores, labels)
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, w: &Matrix) -> Result<()> {
        if w.cols() != self.scores.cols() {
            return Err(Error::DimensionMismatch {
                context: "weights vs attribute scores",
                expected: self.scores.cols(),
                found: w.cols(),
            });
        }
        if w.rows() != self.labels.cols() {
            return Err(Error::DimensionMismatch {
                context: "weights vs labels",
                expected: self.labels.cols(),
                found: w.rows(),
            });
        }
        Ok(())
    }
}

/// `W s`; `sigmoid` of each entry is the per-class probability.
pub fn class_logits(w: &Matrix, s: &[f64]) -> Result<Vec<f64>> {
    w.mul_vec(s)
}

/// `M x K` logits `S Wᵀ`.
fn batch_logits(w: &Matrix, batch: &Batch) -> Result<Matrix> {
    batch.check(w)?;
    let mut z = Matrix::zeros(batch.len(), w.rows());
    for m in 0..batch.len() {
        let s = batch.scores.row(m);
        for (k, zk) in z.row_mut(m).iter_mut().enumerate() {
            *zk = crate::linalg::dot(w.row(k), s);
        }
    }
    Ok(z)
}

/// Binary cross-entropy of `sigmoid(z)` against labels, summed over classes
/// and averaged over samples.
pub(crate) fn bce_from_logits(z: &Matrix, labels: &Matrix) -> f64 {
    let total: f64 = z
        .as_slice()
        .iter()
        .zip(labels.as_slice())
        .map(|(&z, &y)| softplus(z) - y * z)
        .sum();
    total / z.rows() as f64
}

/// The smooth part of the selection objective.
pub fn selection_bce(w: &Matrix, batch: &Batch) -> Result<f64> {
    Ok(bce_from_logits(&batch_logits(w, batch)?, &batch.labels))
}

/// Mean BCE plus `λ‖W‖₁`.
pub fn selection_loss(w: &Matrix, batch: &Batch, l1_weight: f64) -> Result<f64> {
    Ok(selection_bce(w, batch)? + l1_weight * w.l1_norm())
}

/// Gradient of the BCE term plus the `λ·sign(W)` subgradient (`sign(0) = 0`).
pub fn selection_grad(w: &Matrix, batch: &Batch, l1_weight: f64) -> Result<Matrix> {
    let z = batch_logits(w, batch)?;
    let m = batch.len() as f64;
    // residual (sigmoid(z) - y) / M, then residualᵀ S
    let mut r = z;
    for (rv, &y) in r.as_mut_slice().iter_mut().zip(batch.labels.as_slice()) {
        *rv = (sigmoid(*rv) - y) / m;
    }
    let mut g = r.t_matmul(&batch.scores)?;
    if l1_weight != 0.0 {
        for (gv, &wv) in g.as_mut_slice().iter_mut().zip(w.as_slice()) {
            *gv += l1_weight * sign(wv);
        }
    }
    Ok(g)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Class-from-attribute weights plus the pruning bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionModel {
    pub class_names: Vec<String>,
    /// `K x N` weights over the whole catalog, as trained.
    pub weights: Matrix,
    /// Per class, ascending attribute indices selected for it.
    pub selected: Vec<Vec<usize>>,
    /// Ascending union of `selected`.
    pub kept: Vec<usize>,
    pub n_hat: usize,
}

impl SelectionModel {
    /// Seeded `W ~ U(-1/√N, 1/√N)`.
    pub fn initial_weights(n_classes: usize, n_attributes: usize, seed: u64) -> Matrix {
        let bound = 1.0 / libm::sqrt(n_attributes.max(1) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n_classes, n_attributes, |_, _| rng.gen_range(-bound..bound))
    }

    /// A model that skips selection: untrained weights over every attribute.
    pub fn untrained(class_names: Vec<String>, n_attributes: usize, seed: u64) -> Self {
        let weights = Self::initial_weights(class_names.len(), n_attributes, seed);
        let all: Vec<usize> = (0..n_attributes).collect();
        Self {
            selected: alloc::vec![all.clone(); class_names.len()],
            class_names,
            weights,
            kept: all,
            n_hat: n_attributes,
        }
    }

    /// Builds the model from trained weights, keeping per class the N̂ largest
    /// positive weights.
    pub fn from_weights(class_names: Vec<String>, weights: Matrix, n_hat: usize) -> Result<Self> {
        if class_names.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                context: "class names vs weight rows",
                expected: weights.rows(),
                found: class_names.len(),
            });
        }
        let (selected, kept) = prune_top_n(&weights, n_hat);
        Ok(Self {
            class_names,
            weights,
            selected,
            kept,
            n_hat,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_attributes(&self) -> usize {
        self.weights.cols()
    }

    /// `K x |kept|` weights restricted to the kept attributes, with entries
    /// not selected for their class set to zero.
    pub fn pruned_weights(&self) -> Matrix {
        let mut w = Matrix::zeros(self.n_classes(), self.kept.len());
        for (c, sel) in self.selected.iter().enumerate() {
            for &j in sel {
                // kept is sorted and contains every selected index
                let col = self.kept.binary_search(&j).expect("selected index is kept");
                w[(c, col)] = self.weights[(c, j)];
            }
        }
        w
    }

    /// Kept rows of a full `N x D` attribute matrix.
    pub fn kept_rows(&self, e_att: &Matrix) -> Result<Matrix> {
        if e_att.rows() != self.n_attributes() {
            return Err(Error::DimensionMismatch {
                context: "attribute rows vs model",
                expected: self.n_attributes(),
                found: e_att.rows(),
            });
        }
        Ok(e_att.select_rows(&self.kept))
    }

    pub fn check_invariants(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.selected.len() != self.n_classes() || self.class_names.len() != self.n_classes() {
            return bad("per-class bookkeeping does not match the weight rows");
        }
        for sel in &self.selected {
            if sel.len() > self.n_hat {
                return bad("a class selects more than n_hat attributes");
            }
            if sel.iter().any(|j| self.kept.binary_search(j).is_err()) {
                return bad("a selected attribute is not kept");
            }
        }
        if self.kept.windows(2).any(|w| w[0] >= w[1]) {
            return bad("kept indices are not strictly ascending");
        }
        if self
            .kept
            .iter()
            .any(|j| !self.selected.iter().any(|sel| sel.contains(j)))
        {
            return bad("a kept attribute is not selected by any class");
        }
        Ok(())
    }
}

/// Per class, the `n_hat` largest strictly positive weights (ties to the lower
/// attribute index), and the ascending union over classes.
pub fn prune_top_n(weights: &Matrix, n_hat: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut selected = Vec::with_capacity(weights.rows());
    for row in weights.iter_rows() {
        let mut cand: Vec<usize> = (0..row.len()).filter(|&j| row[j] > 0.0).collect();
        // stable sort keeps lower indices first among equal weights
        cand.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        cand.truncate(n_hat);
        cand.sort_unstable();
        selected.push(cand);
    }
    let mut kept: Vec<usize> = selected.iter().flatten().copied().collect();
    kept.sort_unstable();
    kept.dedup();
    (selected, kept)
}

/// Optimizes `W` on the exemplars with `E_att` frozen, then prunes to the
/// top-N̂ attributes per class. Returns the best iterate seen, so the final
/// loss never exceeds the initial one.
pub fn select_attributes(
    e_att: &Matrix,
    exemplars: &ExemplarSet,
    cfg: &TrainConfig,
) -> Result<(SelectionModel, TrainReport)> {
    let batch = Batch::from_exemplars(e_att, exemplars)?;
    select_from_batch(exemplars.class_names.clone(), &batch, cfg)
}

/// [`select_attributes`] on precomputed attribute scores.
pub fn select_from_batch(
    class_names: Vec<String>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(SelectionModel, TrainReport)> {
    cfg.validate()?;
    if class_names.len() != batch.labels.cols() {
        return Err(Error::DimensionMismatch {
            context: "class names vs label columns",
            expected: batch.labels.cols(),
            found: class_names.len(),
        });
    }
    let w0 = SelectionModel::initial_weights(class_names.len(), batch.scores.cols(), cfg.seed);
    let (w, report) = descend_weights(w0, batch, cfg)?;
    let model = SelectionModel::from_weights(class_names, w, cfg.n_hat)?;
    Ok((model, report))
}

/// Full-batch gradient descent on `selection_loss` from `w`.
pub(crate) fn descend_weights(
    mut w: Matrix,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(Matrix, TrainReport)> {
    let lambda = cfg.l1_weight;
    let mut loss = selection_loss(&w, batch, lambda)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: "selection",
            epoch: 0,
        });
    }
    let mut losses = alloc::vec![loss];
    let mut best = (w.clone(), loss);
    for epoch in 1..=cfg.epochs {
        let g = selection_grad(&w, batch, lambda)?;
        for (wv, gv) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *wv -= cfg.learning_rate * gv;
        }
        let next = selection_loss(&w, batch, lambda)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: "selection",
                epoch,
            });
        }
        losses.push(next);
        if next < best.1 {
            best = (w.clone(), next);
        }
        let converged = (loss - next).abs() < cfg.tolerance;
        loss = next;
        if converged {
            break;
        }
    }
    let (w, final_loss) = best;
    Ok((w, TrainReport { losses, final_loss }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn batch(rows: &[&[f64]], labels: &[&[f64]]) -> Batch {
        Batch::new(
            Matrix::from_rows(rows).unwrap(),
            Matrix::from_rows(labels).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn logits_identity_and_zero() {
        let s = [0.3, -0.7, 0.2];
        assert_eq!(class_logits(&Matrix::identity(3), &s).unwrap(), s.to_vec());
        let z = class_logits(&Matrix::zeros(2, 3), &s).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        assert!(z.iter().all(|&v| sigmoid(v) == 0.5));
    }

    #[test]
    fn logits_by_hand() {
        let w = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.5]]).unwrap();
        let z = class_logits(&w, &[2.0, 4.0, 1.0]).unwrap();
        // 1 - 4 + 2, 3 + 1 - 0.5
        assert_eq!(z, vec![-1.0, 3.5]);
        assert!(class_logits(&w, &[1.0]).is_err());
    }

    #[test]
    fn bce_vanishes_for_saturated_logits() {
        // logits +-20 against matching labels
        let w = Matrix::from_rows(&[[20.0], [-20.0]]).unwrap();
        let b = batch(&[&[1.0]], &[&[1.0, 0.0]]);
        assert!(selection_bce(&w, &b).unwrap() < 1e-8);
    }

    #[test]
    fn bce_at_zero_weights_is_k_ln2() {
        let k = 3;
        let b = batch(
            &[&[0.2, 0.5], &[0.9, -0.1]],
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 1.0]],
        );
        let loss = selection_loss(&Matrix::zeros(k, 2), &b, 0.7).unwrap();
        assert_relative_eq!(
            loss,
            k as f64 * core::f64::consts::LN_2,
            max_relative = 1e-14
        );
    }

    #[test]
    fn l1_term_of_all_ones() {
        let (k, n) = (3, 4);
        let b = batch(&[&[0.0; 4]], &[&[0.0; 3]]);
        let w = Matrix::from_fn(k, n, |_, _| 1.0);
        let bce = selection_bce(&w, &b).unwrap();
        assert_relative_eq!(selection_loss(&w, &b, 1.0).unwrap() - bce, (k * n) as f64);
    }

    #[test]
    fn gradient_at_zero_is_minus_half_s_for_positive_class() {
        let s = [0.4, -0.3, 0.8];
        let b = batch(&[&s], &[&[1.0, 0.0]]);
        let g = selection_grad(&Matrix::zeros(2, 3), &b, 0.0).unwrap();
        for j in 0..3 {
            assert_relative_eq!(g[(0, j)], -0.5 * s[j]);
            assert_relative_eq!(g[(1, j)], 0.5 * s[j]);
        }
    }

    #[test]
    fn l1_subgradient_adds_lambda_on_positive_entries() {
        let b = batch(&[&[0.4, -0.3]], &[&[1.0]]);
        let w = Matrix::from_rows(&[[0.3, 0.9]]).unwrap();
        let g0 = selection_grad(&w, &b, 0.0).unwrap();
        let g1 = selection_grad(&w, &b, 0.25).unwrap();
        for j in 0..2 {
            assert_relative_eq!(g1[(0, j)] - g0[(0, j)], 0.25, max_relative = 1e-12);
        }
        // sign(0) = 0
        let gz = selection_grad(&Matrix::zeros(1, 2), &b, 0.25).unwrap();
        let gz0 = selection_grad(&Matrix::zeros(1, 2), &b, 0.0).unwrap();
        assert_eq!(gz, gz0);
    }

    #[test]
    fn pruning_prefers_large_positive_weights_and_lower_index_on_ties() {
        let w = Matrix::from_rows(&[[0.5, 0.9, 0.5, -2.0], [-0.1, -0.2, 0.0, 0.3]]).unwrap();
        let (sel, kept) = prune_top_n(&w, 2);
        assert_eq!(sel, vec![vec![0, 1], vec![3]]);
        assert_eq!(kept, vec![0, 1, 3]);
        let model = SelectionModel::from_weights(vec!["a".into(), "b".into()], w, 2).unwrap();
        model.check_invariants().unwrap();
        let p = model.pruned_weights();
        assert_eq!(p.as_slice(), &[0.5, 0.9, 0.0, 0.0, 0.0, 0.3]);
    }

    #[test]
    fn untrained_model_keeps_everything() {
        let m = SelectionModel::untrained(vec!["a".into(), "b".into()], 5, 3);
        m.check_invariants().unwrap();
        assert_eq!(m.kept, (0..5).collect::<Vec<_>>());
        assert_eq!(m.pruned_weights(), m.weights);
        let bound = 1.0 / libm::sqrt(5.0);
        assert!(m.weights.as_slice().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn invariant_check_catches_orphan_kept_attribute() {
        let mut m = SelectionModel::from_weights(
            vec!["a".into()],
            Matrix::from_rows(&[[1.0, 0.5]]).unwrap(),
            1,
        )
        .unwrap();
        m.kept.push(1);
        assert!(m.check_invariants().is_err());
    }
}
