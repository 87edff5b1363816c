//! Independent reference implementations used to check the library.
//!
//! Nothing here calls into the matching, AP or optimization code under test.

#![allow(dead_code)]

use fomo_core::geometry::BBox;
use fomo_core::inference::{Detection, DetectionSet};
use fomo_core::linalg::Matrix;
use fomo_core::owdeval::{GroundTruthSet, TaskSpec};
use fomo_core::scene::GroundTruth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain IoU written out independently of the library's geometry.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / union
}

/// Per-detection `(IoU, -gt index)` ranking key of one assignment.
type Key = Vec<(f64, i64)>;

/// Exhaustive search over every partial one-to-one assignment of detections
/// (in score order) to ground truth with IoU at least `thr`. The chosen
/// assignment is the lexicographic maximum of the per-detection key
/// `(IoU, -gt index)`, unassigned ranking below every assignment.
pub fn brute_force_match(dets: &[BBox], gts: &[BBox], thr: f64) -> Vec<bool> {
    fn key(dets: &[BBox], gts: &[BBox], assign: &[Option<usize>]) -> Vec<(f64, i64)> {
        assign
            .iter()
            .zip(dets)
            .map(|(a, d)| match a {
                Some(g) => (iou(d, &gts[*g]), -(*g as i64)),
                None => (-1.0, 0),
            })
            .collect()
    }
    fn better(a: &[(f64, i64)], b: &[(f64, i64)]) -> bool {
        for (x, y) in a.iter().zip(b) {
            if x.0 != y.0 {
                return x.0 > y.0;
            }
            if x.1 != y.1 {
                return x.1 > y.1;
            }
        }
        false
    }
    fn search(
        i: usize,
        dets: &[BBox],
        gts: &[BBox],
        thr: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<(Key, Vec<Option<usize>>)>,
    ) {
        if i == dets.len() {
            let k = key(dets, gts, cur);
            if best.as_ref().is_none_or(|(bk, _)| better(&k, bk)) {
                *best = Some((k, cur.clone()));
            }
            return;
        }
        cur.push(None);
        search(i + 1, dets, gts, thr, used, cur, best);
        cur.pop();
        for g in 0..gts.len() {
            if !used[g] && iou(&dets[i], &gts[g]) >= thr {
                used[g] = true;
                cur.push(Some(g));
                search(i + 1, dets, gts, thr, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut best = None;
    search(
        0,
        dets,
        gts,
        thr,
        &mut vec![false; gts.len()],
        &mut Vec::new(),
        &mut best,
    );
    best.map(|(_, a)| a.iter().map(Option::is_some).collect())
        .unwrap_or_default()
}

/// `(1/n_gt) Σ_{i: tp_i} max_{j ≥ i} precision_j`.
pub fn oracle_ap(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut prec = Vec::new();
    let mut hits = 0.0;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1.0;
        }
        prec.push(hits / (i + 1) as f64);
    }
    let mut total = 0.0;
    for i in 0..tp.len() {
        if tp[i] {
            total += prec[i..].iter().cloned().fold(0.0, f64::max);
        }
    }
    Some(total / n_gt as f64)
}

/// A small random evaluation problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub n_classes: usize,
    pub task: TaskSpec,
    /// Per image: (box, dataset class).
    pub gts: Vec<Vec<(BBox, usize)>>,
    /// Per image: (box, detection class, score).
    pub dets: Vec<Vec<(BBox, usize, f64)>>,
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.gen_range(0..8) as f64;
    let y1 = rng.gen_range(0..8) as f64;
    BBox::new(
        x1,
        y1,
        x1 + rng.gen_range(1..5) as f64,
        y1 + rng.gen_range(1..5) as f64,
    )
    .unwrap()
}

/// At most 5 images, 4 classes (one of them unknown when there are at least
/// two), 6 ground-truth and 6 detected boxes per image; scores are distinct.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = rng.gen_range(1..=4);
    let n_unknown = if n_classes > 1 {
        rng.gen_range(0..n_classes).min(2)
    } else {
        0
    };
    let known: Vec<usize> = (0..n_classes - n_unknown).collect();
    let unknown: Vec<usize> = (n_classes - n_unknown..n_classes).collect();
    let n_known = known.len();
    let n_images = rng.gen_range(1..=5);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    for _ in 0..n_images {
        let g: Vec<(BBox, usize)> = (0..rng.gen_range(0..=6))
            .map(|_| (random_box(&mut rng), rng.gen_range(0..n_classes)))
            .collect();
        let mut d = Vec::new();
        for _ in 0..rng.gen_range(0..=6) {
            // half the detections are perturbed copies of ground truth
            let b = if !g.is_empty() && rng.gen_bool(0.5) {
                let (gb, _): (BBox, usize) = g[rng.gen_range(0..g.len())];
                let dx = rng.gen_range(-1..=1) as f64;
                BBox::new(
                    gb.x1 + dx,
                    gb.y1,
                    gb.x2 + dx,
                    gb.y2 + rng.gen_range(0..=1) as f64,
                )
                .unwrap()
            } else {
                random_box(&mut rng)
            };
            let mut s: f64 = rng.gen();
            while scores.contains(&s) {
                s = rng.gen();
            }
            scores.push(s);
            d.push((b, rng.gen_range(0..=n_known), s));
        }
        gts.push(g);
        dets.push(d);
    }
    Instance {
        n_classes,
        task: TaskSpec::T1 { known, unknown },
        gts,
        dets,
    }
}

impl Instance {
    pub fn truth(&self) -> GroundTruthSet {
        GroundTruthSet {
            class_names: (0..self.n_classes).map(|c| format!("c{c}")).collect(),
            images: self
                .gts
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    (
                        format!("img{i}"),
                        g.iter()
                            .map(|&(bbox, class_index)| GroundTruth { bbox, class_index })
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn detection_sets(&self) -> Vec<DetectionSet> {
        self.dets
            .iter()
            .enumerate()
            .map(|(i, d)| DetectionSet {
                image_id: format!("img{i}"),
                detections: d
                    .iter()
                    .map(|&(bbox, class_index, score)| Detection {
                        image_id: format!("img{i}"),
                        bbox,
                        class_index,
                        score,
                    })
                    .collect(),
            })
            .collect()
    }

    /// TP flags in global score order for detections labeled `label`
    /// against ground truth of `classes`, plus the GT count.
    fn flags(&self, label: usize, classes: &[usize]) -> (Vec<bool>, usize) {
        let mut ranked: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0;
        for (g, d) in self.gts.iter().zip(&self.dets) {
            let gt_boxes: Vec<BBox> = g
                .iter()
                .filter(|x| classes.contains(&x.1))
                .map(|x| x.0)
                .collect();
            n_gt += gt_boxes.len();
            let mut mine: Vec<&(BBox, usize, f64)> = d.iter().filter(|x| x.1 == label).collect();
            mine.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
            let boxes: Vec<BBox> = mine.iter().map(|x| x.0).collect();
            let tp = brute_force_match(&boxes, &gt_boxes, 0.5);
            ranked.extend(mine.iter().zip(tp).map(|(x, t)| (x.2, t)));
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        (ranked.into_iter().map(|x| x.1).collect(), n_gt)
    }

    /// Per-known-class AP, known mAP and U-Recall.
    pub fn oracle(&self) -> (Vec<Option<f64>>, Option<f64>, Option<f64>) {
        let TaskSpec::T1 { known, unknown } = &self.task else {
            unreachable!()
        };
        let aps: Vec<Option<f64>> = known
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let (tp, n) = self.flags(k + 1, &[c]);
                oracle_ap(&tp, n)
            })
            .collect();
        let defined: Vec<f64> = aps.iter().flatten().copied().collect();
        let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let recall = if unknown.is_empty() {
            None
        } else {
            let (tp, n) = self.flags(0, unknown);
            (n > 0).then(|| tp.iter().filter(|&&t| t).count() as f64 / n as f64)
        };
        (aps, map, recall)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&Matrix) -> f64, x: &Matrix, eps: f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - eps;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        g.as_mut_slice()[i] = (up - down) / (2.0 * eps);
    }
    g
}

/// Largest elementwise `|a − b| / max(|a|, |b|)`, with entries below
/// `floor` in magnitude compared absolutely against `floor`.
pub fn max_relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Least-squares `E = argmin ‖W E − T‖²_F` through the normal equations
/// `(WᵀW) E = WᵀT`, solved by Gauss-Jordan elimination with partial pivoting.
pub fn least_squares(w: &Matrix, t: &Matrix) -> Matrix {
    let n = w.cols();
    let d = t.cols();
    let mut a = vec![vec![0.0; n + d]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = (0..w.rows()).map(|k| w[(k, i)] * w[(k, j)]).sum();
        }
        for j in 0..d {
            a[i][n + j] = (0..w.rows()).map(|k| w[(k, i)] * t[(k, j)]).sum();
        }
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        for v in a[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    Matrix::from_fn(n, d, |i, j| a[i][n + j])
}

/// `‖W E − T‖²_F` computed with explicit loops.
pub fn residual(w: &Matrix, e: &Matrix, t: &Matrix) -> f64 {
    let mut total = 0.0;
    for k in 0..w.rows() {
        for j in 0..e.cols() {
            let v: f64 = (0..w.cols()).map(|i| w[(k, i)] * e[(i, j)]).sum::<f64>() - t[(k, j)];
            total += v * v;
        }
    }
    total
}
