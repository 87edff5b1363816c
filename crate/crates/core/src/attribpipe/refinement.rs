use alloc::vec::Vec;

use super::selection::bce_from_logits;
use super::{ExemplarSet, SelectionModel, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, normalized, sigmoid, Matrix};

fn unit_rows(m: &Matrix, context: &'static str) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm { context });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

fn check_shapes(rows: &Matrix, w: &Matrix, x: &Matrix, labels: &Matrix) -> Result<()> {
    if w.cols() != rows.rows() {
        return Err(Error::DimensionMismatch {
            context: "refinement weights vs rows",
            expected: rows.rows(),
            found: w.cols(),
        });
    }
    if x.cols() != rows.cols() {
        return Err(Error::DimensionMismatch {
            context: "refinement embeddings",
            expected: rows.cols(),
            found: x.cols(),
        });
    }
    if labels.rows() != x.rows() || labels.cols() != w.rows() {
        return Err(Error::DimensionMismatch {
            context: "refinement labels",
            expected: x.rows() * w.rows(),
            found: labels.rows() * labels.cols(),
        });
    }
    if x.rows() == 0 {
        return Err(Error::EmptyInput("refinement exemplars"));
    }
    Ok(())
}

/// Scores `s = x̂ · ê` as an `M x N` matrix.
fn cosine_scores(x_unit: &Matrix, e_unit: &Matrix) -> Matrix {
    Matrix::from_fn(x_unit.rows(), e_unit.rows(), |m, j| {
        dot(x_unit.row(m), e_unit.row(j))
    })
}

/// BCE of `sigmoid(W s(E))` over visual embeddings `x` (`M x D`) with labels
/// (`M x K`), as a function of the attribute rows `rows` (`N x D`).
pub fn refinement_loss(rows: &Matrix, w: &Matrix, x: &Matrix, labels: &Matrix) -> Result<f64> {
    check_shapes(rows, w, x, labels)?;
    let (e_unit, _) = unit_rows(rows, "attribute row")?;
    let (x_unit, _) = unit_rows(x, "visual embedding")?;
    let z = cosine_scores(&x_unit, &e_unit).matmul(&w.transpose())?;
    Ok(bce_from_logits(&z, labels))
}

/// Gradient of [`refinement_loss`] with respect to `rows`, back-propagated
/// through the cosine normalization.
pub fn refinement_grad(rows: &Matrix, w: &Matrix, x: &Matrix, labels: &Matrix) -> Result<Matrix> {
    check_shapes(rows, w, x, labels)?;
    let (e_unit, e_norms) = unit_rows(rows, "attribute row")?;
    let (x_unit, _) = unit_rows(x, "visual embedding")?;
    let s = cosine_scores(&x_unit, &e_unit);
    let mut r = s.matmul(&w.transpose())?;
    let m = x.rows() as f64;
    for (rv, &y) in r.as_mut_slice().iter_mut().zip(labels.as_slice()) {
        *rv = (sigmoid(*rv) - y) / m;
    }
    // dL/dS = R W, dL/dÊ = (dL/dS)ᵀ X̂
    let d_s = r.matmul(w)?;
    let d_unit = d_s.t_matmul(&x_unit)?;
    let mut g = d_unit;
    for (j, &len) in e_norms.iter().enumerate() {
        let e = e_unit.row(j).to_vec();
        let row = g.row_mut(j);
        let radial = dot(row, &e);
        for (gv, ev) in row.iter_mut().zip(&e) {
            *gv = (*gv - radial * ev) / len;
        }
    }
    Ok(g)
}

/// Optimizes the kept attribute rows on the exemplars' BCE with the model's
/// pruned weights frozen. Unkept rows are returned unchanged; the best
/// iterate is returned, so the final loss never exceeds the initial one.
pub fn refine_attributes(
    e_att: &Matrix,
    model: &SelectionModel,
    exemplars: &ExemplarSet,
    cfg: &TrainConfig,
) -> Result<(Matrix, TrainReport)> {
    cfg.validate()?;
    let w = model.pruned_weights();
    let mut rows = model.kept_rows(e_att)?;
    let (x, labels) = exemplars.stacked();
    for r in x.iter_rows() {
        normalized(r, "visual embedding")?;
    }
    let mut loss = refinement_loss(&rows, &w, &x, &labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: "refinement",
            epoch: 0,
        });
    }
    let mut losses = alloc::vec![loss];
    let mut best = (rows.clone(), loss);
    for epoch in 1..=cfg.epochs {
        let g = refinement_grad(&rows, &w, &x, &labels)?;
        for (ev, gv) in rows.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *ev -= cfg.learning_rate * gv;
        }
        let next = refinement_loss(&rows, &w, &x, &labels).map_err(|_| Error::NonFiniteLoss {
            stage: "refinement",
            epoch,
        })?;
        if !next.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: "refinement",
                epoch,
            });
        }
        losses.push(next);
        if next < best.1 {
            best = (rows.clone(), next);
        }
        let converged = (loss - next).abs() < cfg.tolerance;
        loss = next;
        if converged {
            break;
        }
    }
    let mut out = e_att.clone();
    for (i, &j) in model.kept.iter().enumerate() {
        out.row_mut(j).copy_from_slice(best.0.row(i));
    }
    Ok((
        out,
        TrainReport {
            losses,
            final_loss: best.1,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toy() -> (Matrix, SelectionModel, ExemplarSet) {
        let e_att =
            Matrix::from_rows(&[[1.0, 0.1, 0.0], [0.0, 1.0, 0.2], [0.3, 0.3, 0.3]]).unwrap();
        let model = SelectionModel::from_weights(
            vec!["a".into(), "b".into()],
            Matrix::from_rows(&[[2.0, -0.5, 0.0], [-0.5, 2.0, 0.0]]).unwrap(),
            1,
        )
        .unwrap();
        let ex = ExemplarSet::new(
            vec!["a".into(), "b".into()],
            vec![
                Matrix::from_rows(&[[0.9, 0.2, 0.1], [1.0, -0.1, 0.0]]).unwrap(),
                Matrix::from_rows(&[[0.1, 0.8, 0.3]]).unwrap(),
            ],
        )
        .unwrap();
        (e_att, model, ex)
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (e, model, ex) = toy();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::refinement()
        };
        let (out, _) = refine_attributes(&e, &model, &ex, &cfg).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn refinement_lowers_loss_and_leaves_unkept_rows() {
        let (e, model, ex) = toy();
        assert_eq!(model.kept, vec![0, 1]);
        let (out, report) = refine_attributes(&e, &model, &ex, &TrainConfig::refinement()).unwrap();
        assert!(report.final_loss <= report.initial_loss());
        assert_eq!(out.row(2), e.row(2));
    }
}
