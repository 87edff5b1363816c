use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::SelectionModel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Consecutive objective increases tolerated before giving up.
const DIVERGENCE_STREAK: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Stop once the objective changes by less than this.
    pub tolerance: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            tolerance: 1e-14,
        }
    }
}

impl AdaptConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.steps == 0 {
            v.push("adaptation steps must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            v.push(alloc::format!(
                "adaptation learning_rate must be finite and >= 0 (got {})",
                self.learning_rate
            ));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            v.push("adaptation tolerance must be finite and >= 0".into());
        }
        v
    }
}

/// Result of [`adapt_embeddings`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    /// The adapted rows (best iterate seen).
    pub rows: Matrix,
    /// `‖W E − T‖²` before the first step and after each step.
    pub objectives: Vec<f64>,
    pub final_objective: f64,
}

/// `‖W E − T‖²_F`
fn objective(w: &Matrix, e: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let mut r = w.matmul(e)?;
    for (rv, tv) in r.as_mut_slice().iter_mut().zip(target.as_slice()) {
        *rv -= tv;
    }
    Ok((r.frobenius_sq(), r))
}

/// Gradient descent on `‖W E − T‖²` over `E` with `W` frozen.
///
/// `e` is `N x D`, `w` is `K x N`, `target` is `K x D`.
pub fn adapt_embeddings(
    e: &Matrix,
    w: &Matrix,
    target: &Matrix,
    cfg: &AdaptConfig,
) -> Result<Adaptation> {
    if w.cols() != e.rows() {
        return Err(Error::DimensionMismatch {
            context: "adaptation weights vs rows",
            expected: e.rows(),
            found: w.cols(),
        });
    }
    if target.rows() != w.rows() || target.cols() != e.cols() {
        return Err(Error::DimensionMismatch {
            context: "adaptation target",
            expected: w.rows() * e.cols(),
            found: target.rows() * target.cols(),
        });
    }
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v.join("; ")));
    }
    let mut e = e.clone();
    let (mut obj, mut resid) = objective(w, &e, target)?;
    let mut objectives = alloc::vec![obj];
    let mut best = (e.clone(), obj);
    let mut streak = 0;
    for step in 1..=cfg.steps {
        // d/dE ‖WE − T‖² = 2 Wᵀ (WE − T)
        let g = w.t_matmul(&resid)?;
        for (ev, gv) in e.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *ev -= 2.0 * cfg.learning_rate * gv;
        }
        let (next, r) = objective(w, &e, target)?;
        if !next.is_finite() {
            return Err(Error::Diverged { step });
        }
        let converged = (obj - next).abs() <= cfg.tolerance;
        if converged && next > obj {
            // a rounding-level rise at the floor is rejected, not recorded
            break;
        }
        objectives.push(next);
        streak = if next > obj { streak + 1 } else { 0 };
        if streak >= DIVERGENCE_STREAK {
            return Err(Error::Diverged { step });
        }
        if next < best.1 {
            best = (e.clone(), next);
        }
        obj = next;
        resid = r;
        if converged {
            break;
        }
    }
    Ok(Adaptation {
        rows: best.0,
        objectives,
        final_objective: best.1,
    })
}

/// Aligns the kept attribute rows of `e_att` with per-class visual means
/// using the model's pruned weights. Unkept rows are returned unchanged.
pub fn adapt_attributes(
    e_att: &Matrix,
    model: &SelectionModel,
    class_means: &Matrix,
    cfg: &AdaptConfig,
) -> Result<(Matrix, Adaptation)> {
    let rows = model.kept_rows(e_att)?;
    let adapted = adapt_embeddings(&rows, &model.pruned_weights(), class_means, cfg)?;
    let mut out = e_att.clone();
    for (i, &j) in model.kept.iter().enumerate() {
        out.row_mut(j).copy_from_slice(adapted.rows.row(i));
    }
    Ok((out, adapted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn already_optimal_is_a_fixed_point() {
        let e = Matrix::from_rows(&[[0.2, 0.5], [-1.0, 0.3]]).unwrap();
        let a = adapt_embeddings(&e, &Matrix::identity(2), &e, &AdaptConfig::default()).unwrap();
        assert_eq!(a.rows, e);
        assert_eq!(a.final_objective, 0.0);
    }

    #[test]
    fn identity_weights_converge_to_target() {
        let e = Matrix::from_rows(&[[0.2, 0.5, 0.1], [-1.0, 0.3, 0.7]]).unwrap();
        let t = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.4, 0.4, -0.9]]).unwrap();
        let cfg = AdaptConfig {
            steps: 2000,
            learning_rate: 0.1,
            tolerance: 0.0,
        };
        let a = adapt_embeddings(&e, &Matrix::identity(2), &t, &cfg).unwrap();
        assert!(a.rows.max_abs_diff(&t) < 1e-6);
        assert!(a.objectives.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn oversized_step_reports_divergence() {
        let e = Matrix::from_rows(&[[1.0]]).unwrap();
        let t = Matrix::from_rows(&[[0.0]]).unwrap();
        let cfg = AdaptConfig {
            steps: 100,
            learning_rate: 5.0,
            tolerance: 0.0,
        };
        assert!(matches!(
            adapt_embeddings(&e, &Matrix::identity(1), &t, &cfg),
            Err(Error::Diverged { step: 10 })
        ));
    }

    #[test]
    fn adapt_attributes_only_moves_kept_rows() {
        let model = SelectionModel::from_weights(
            alloc::vec!["a".into()],
            Matrix::from_rows(&[[1.0, -1.0, 0.0]]).unwrap(),
            1,
        )
        .unwrap();
        let e = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]).unwrap();
        let target = Matrix::from_rows(&[[0.0, 2.0]]).unwrap();
        let w_before = model.weights.clone();
        let (out, a) = adapt_attributes(&e, &model, &target, &AdaptConfig::default()).unwrap();
        assert_eq!(out.row(1), e.row(1));
        assert_eq!(out.row(2), e.row(2));
        assert!(a.final_objective < 1e-10);
        assert_eq!(model.weights, w_before);
    }
}
