//! Open-world detection metrics: greedy matching, all-point AP, known and
//! unknown mAP, U-Recall, Wilderness Impact and absolute open-set error.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::geometry::iou;
use crate::geometry::BBox;
use crate::inference::{DetectionSet, UNKNOWN_CLASS};
use crate::scene::{Dataset, GroundTruth};

/// Per-detection and per-ground-truth outcome of [`match_detections`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Greedy single-match of `dets` (sorted by score, descending) against
/// `gts`. Each detection takes its best-IoU unmatched GT when that IoU is at
/// least `iou_thresh`; IoU ties go to the lower GT index.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_thresh: f64) -> Result<MatchResult> {
    let mut gt_matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for d in dets {
        tp.push(match_one(d, gts, &mut gt_matched, iou_thresh)?.is_some());
    }
    Ok(MatchResult { tp, gt_matched })
}

fn match_one(d: &BBox, gts: &[BBox], taken: &mut [bool], iou_thresh: f64) -> Result<Option<usize>> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if taken[g] {
            continue;
        }
        let o = iou(d, gt)?;
        if best.is_none_or(|(_, b)| o > b) {
            best = Some((g, o));
        }
    }
    match best {
        Some((g, o)) if o >= iou_thresh => {
            taken[g] = true;
            Ok(Some(g))
        }
        _ => Ok(None),
    }
}

/// All-point interpolated AP of a score-ordered TP/FP sequence.
///
/// Returns `None` when `n_gt == 0`; such classes are excluded from means.
pub fn average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    // envelope: precision made monotone non-increasing from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    T1,
    T2,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::T1 => "t1",
            Stage::T2 => "t2",
        }
    }
}

/// The class partition for one evaluation stage, as dataset class indices.
///
/// Detection class `k + 1` refers to the `k`-th entry of
/// [`TaskSpec::stage_classes`]; class `0` is unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum TaskSpec {
    T1 {
        known: Vec<usize>,
        unknown: Vec<usize>,
    },
    T2 {
        prev_known: Vec<usize>,
        curr_known: Vec<usize>,
    },
}

impl TaskSpec {
    pub fn stage(&self) -> Stage {
        match self {
            TaskSpec::T1 { .. } => Stage::T1,
            TaskSpec::T2 { .. } => Stage::T2,
        }
    }

    /// Known classes in detection order.
    pub fn stage_classes(&self) -> Vec<usize> {
        match self {
            TaskSpec::T1 { known, .. } => known.clone(),
            TaskSpec::T2 {
                prev_known,
                curr_known,
            } => prev_known.iter().chain(curr_known).copied().collect(),
        }
    }

    pub fn unknown_classes(&self) -> &[usize] {
        match self {
            TaskSpec::T1 { unknown, .. } => unknown,
            TaskSpec::T2 { .. } => &[],
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let (a, b, what) = match self {
            TaskSpec::T1 { known, unknown } => (known, unknown, "known/unknown"),
            TaskSpec::T2 {
                prev_known,
                curr_known,
            } => (prev_known, curr_known, "previously/currently known"),
        };
        if a.is_empty() {
            return Err(Error::InvalidTask(format!(
                "{} has no known classes",
                self.stage().as_str()
            )));
        }
        let mut seen = vec![false; n_classes];
        for &c in a.iter().chain(b) {
            if c >= n_classes {
                return Err(Error::ClassOutOfRange {
                    index: c,
                    len: n_classes,
                    context: "task classes",
                });
            }
            if seen[c] {
                return Err(Error::InvalidTask(format!(
                    "class {c} appears twice in the {what} sets"
                )));
            }
            seen[c] = true;
        }
        if self.stage() == Stage::T2 {
            if let Some(c) = seen.iter().position(|s| !s) {
                return Err(Error::InvalidTask(format!("t2 does not cover class {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Known-class recall level at which Wilderness Impact is read off.
    pub wi_recall: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            wi_recall: 0.8,
        }
    }
}

impl EvalConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            v.push(format!(
                "iou_threshold must lie in (0, 1] (got {})",
                self.iou_threshold
            ));
        }
        if !(self.wi_recall > 0.0 && self.wi_recall <= 1.0) {
            v.push(format!(
                "wi_recall must lie in (0, 1] (got {})",
                self.wi_recall
            ));
        }
        v
    }
}

/// Ground-truth boxes for every evaluated image, including images with no
/// objects.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub class_names: Vec<String>,
    pub images: Vec<(String, Vec<GroundTruth>)>,
}

impl GroundTruthSet {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            class_names: ds.class_names.clone(),
            images: ds
                .images
                .iter()
                .map(|img| (img.image_id.clone(), img.annotations.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_index: usize,
    pub name: String,
    pub n_gt: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: Stage,
    pub per_class: Vec<ClassAp>,
    /// T1 known mAP.
    pub known_map: Option<f64>,
    /// T2 previously-known mAP.
    pub prev_known_map: Option<f64>,
    /// T2 currently-known mAP.
    pub curr_known_map: Option<f64>,
    /// T2 mAP over all known classes.
    pub both_map: Option<f64>,
    pub unknown_map: Option<f64>,
    pub unknown_recall: Option<f64>,
    /// `None` when there are no known-labeled detections.
    pub wilderness_impact: Option<f64>,
    pub absolute_open_set_error: usize,
    /// Classes with no ground truth, left out of every mean.
    pub excluded: Vec<usize>,
}

/// A detection flattened for cross-image ranking.
#[derive(Clone, Copy)]
struct Ranked {
    image: usize,
    order: usize,
    bbox: BBox,
    class_index: usize,
    score: f64,
}

fn by_score(a: &Ranked, b: &Ranked) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.image.cmp(&b.image))
        .then(a.order.cmp(&b.order))
}

/// Greedy single-match of globally ranked detections against per-image GT
/// boxes; matching only ever pairs boxes from the same image.
fn match_ranked(dets: &[Ranked], gts: &[Vec<BBox>], iou_thresh: f64) -> Result<(Vec<bool>, usize)> {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    let mut matched = 0;
    for d in dets {
        let hit = match_one(&d.bbox, &gts[d.image], &mut taken[d.image], iou_thresh)?.is_some();
        matched += usize::from(hit);
        tp.push(hit);
    }
    Ok((tp, matched))
}

struct Prepared {
    dets: Vec<Ranked>,
    n_images: usize,
}

fn prepare(
    detections: &[DetectionSet],
    truth: &GroundTruthSet,
    n_stage: usize,
) -> Result<Prepared> {
    let index: BTreeMap<&str, usize> = truth
        .images
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();
    let mut dets = Vec::new();
    for set in detections {
        let image = *index
            .get(set.image_id.as_str())
            .ok_or_else(|| Error::UnknownImage(set.image_id.clone()))?;
        for (order, d) in set.detections.iter().enumerate() {
            if d.class_index > n_stage {
                return Err(Error::ClassOutOfRange {
                    index: d.class_index,
                    len: n_stage + 1,
                    context: "detection class",
                });
            }
            dets.push(Ranked {
                image,
                order,
                bbox: d.bbox,
                class_index: d.class_index,
                score: d.score,
            });
        }
    }
    // every set shares one ranking; multiple sets for one image keep arrival order
    for (i, d) in dets.iter_mut().enumerate() {
        d.order = i;
    }
    dets.sort_by(by_score);
    Ok(Prepared {
        dets,
        n_images: truth.images.len(),
    })
}

fn gt_boxes(truth: &GroundTruthSet, classes: &[usize]) -> Vec<Vec<BBox>> {
    truth
        .images
        .iter()
        .map(|(_, anns)| {
            anns.iter()
                .filter(|a| classes.contains(&a.class_index))
                .map(|a| a.bbox)
                .collect()
        })
        .collect()
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores one stage's detections against ground truth.
pub fn evaluate_task(
    detections: &[DetectionSet],
    truth: &GroundTruthSet,
    task: &TaskSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::InvalidConfig(v.join("; ")));
    }
    let n_classes = truth.class_names.len();
    task.validate(n_classes)?;
    for (_, anns) in &truth.images {
        for a in anns {
            if a.class_index >= n_classes {
                return Err(Error::ClassOutOfRange {
                    index: a.class_index,
                    len: n_classes,
                    context: "ground-truth class",
                });
            }
        }
    }
    let stage_classes = task.stage_classes();
    let prep = prepare(detections, truth, stage_classes.len())?;

    let mut per_class = Vec::with_capacity(stage_classes.len());
    let mut excluded = Vec::new();
    let mut known_gts = vec![Vec::new(); prep.n_images];
    let mut known_tp = vec![false; prep.dets.len()];
    for (k, &c) in stage_classes.iter().enumerate() {
        let gts = gt_boxes(truth, &[c]);
        let n_gt: usize = gts.iter().map(Vec::len).sum();
        let idx: Vec<usize> = (0..prep.dets.len())
            .filter(|&i| prep.dets[i].class_index == k + 1)
            .collect();
        let dets: Vec<Ranked> = idx.iter().map(|&i| prep.dets[i]).collect();
        let (tp, _) = match_ranked(&dets, &gts, cfg.iou_threshold)?;
        for (&i, &t) in idx.iter().zip(&tp) {
            known_tp[i] = t;
        }
        for (all, g) in known_gts.iter_mut().zip(gts) {
            all.extend(g);
        }
        let ap = average_precision(&tp, n_gt);
        if ap.is_none() {
            excluded.push(c);
        }
        per_class.push(ClassAp {
            class_index: c,
            name: truth.class_names[c].clone(),
            n_gt,
            ap,
        });
    }

    let unknown = task.unknown_classes();
    let unknown_gts = gt_boxes(truth, unknown);
    let n_unknown_gt: usize = unknown_gts.iter().map(Vec::len).sum();
    let (unknown_map, unknown_recall) = if unknown.is_empty() {
        (None, None)
    } else {
        let dets: Vec<Ranked> = prep
            .dets
            .iter()
            .filter(|d| d.class_index == UNKNOWN_CLASS)
            .copied()
            .collect();
        let (tp, matched) = match_ranked(&dets, &unknown_gts, cfg.iou_threshold)?;
        let recall = (n_unknown_gt > 0).then(|| matched as f64 / n_unknown_gt as f64);
        (average_precision(&tp, n_unknown_gt), recall)
    };

    let n_known_gt: usize = known_gts.iter().map(Vec::len).sum();
    let known: Vec<(Ranked, bool)> = prep
        .dets
        .iter()
        .zip(&known_tp)
        .filter(|(d, _)| d.class_index != UNKNOWN_CLASS)
        .map(|(d, &t)| (*d, t))
        .collect();
    let wilderness_impact = match wi_from_ranked(&known, n_known_gt, &unknown_gts, cfg) {
        Ok(v) => Some(v),
        Err(Error::NoKnownDetections) => None,
        Err(e) => return Err(e),
    };
    let known_only: Vec<Ranked> = known.iter().map(|(d, _)| *d).collect();
    let (_, absolute_open_set_error) = match_ranked(&known_only, &unknown_gts, cfg.iou_threshold)?;

    let aps = |range: core::ops::Range<usize>| mean(per_class[range].iter().map(|c| c.ap));
    let n_stage = per_class.len();
    let (known_map, prev_known_map, curr_known_map, both_map) = match task {
        TaskSpec::T1 { .. } => (aps(0..n_stage), None, None, None),
        TaskSpec::T2 { prev_known, .. } => {
            let p = prev_known.len();
            (None, aps(0..p), aps(p..n_stage), aps(0..n_stage))
        }
    };
    Ok(EvalReport {
        stage: task.stage(),
        per_class,
        known_map,
        prev_known_map,
        curr_known_map,
        both_map,
        unknown_map,
        unknown_recall,
        wilderness_impact,
        absolute_open_set_error,
        excluded,
    })
}

/// `known` is score-ordered and carries each detection's own-class TP flag.
fn wi_from_ranked(
    known: &[(Ranked, bool)],
    n_known_gt: usize,
    unknown_gts: &[Vec<BBox>],
    cfg: &EvalConfig,
) -> Result<f64> {
    if known.is_empty() {
        return Err(Error::NoKnownDetections);
    }
    let mut taken: Vec<Vec<bool>> = unknown_gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp, mut unk) = (0usize, 0usize, 0usize);
    for (d, is_tp) in known {
        if *is_tp {
            tp += 1;
        } else if match_one(
            &d.bbox,
            &unknown_gts[d.image],
            &mut taken[d.image],
            cfg.iou_threshold,
        )?
        .is_some()
        {
            unk += 1;
        } else {
            fp += 1;
        }
        if n_known_gt > 0 && tp as f64 / n_known_gt as f64 >= cfg.wi_recall {
            break;
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p_k = tp as f64 / (tp + fp) as f64;
    let p_ku = tp as f64 / (tp + fp + unk) as f64;
    Ok(p_k / p_ku - 1.0)
}

/// Wilderness Impact `P_K / P_{K∪U} − 1` of the known-labeled detections,
/// read at the first rank where known recall reaches `cfg.wi_recall` (or
/// over all detections if it never does).
///
/// A detection that misses its own class but lands on an unknown object
/// counts against `P_{K∪U}` only; every other miss counts against both.
pub fn wilderness_impact(
    detections: &[DetectionSet],
    truth: &GroundTruthSet,
    knowns: &[usize],
    unknowns: &[usize],
    cfg: &EvalConfig,
) -> Result<f64> {
    let task = TaskSpec::T1 {
        known: knowns.to_vec(),
        unknown: unknowns.to_vec(),
    };
    task.validate(truth.class_names.len())?;
    let prep = prepare(detections, truth, knowns.len())?;
    let mut tp_flags = vec![false; prep.dets.len()];
    let mut n_known_gt = 0;
    for (k, &c) in knowns.iter().enumerate() {
        let gts = gt_boxes(truth, &[c]);
        n_known_gt += gts.iter().map(Vec::len).sum::<usize>();
        let idx: Vec<usize> = (0..prep.dets.len())
            .filter(|&i| prep.dets[i].class_index == k + 1)
            .collect();
        let dets: Vec<Ranked> = idx.iter().map(|&i| prep.dets[i]).collect();
        let (tp, _) = match_ranked(&dets, &gts, cfg.iou_threshold)?;
        for (&i, t) in idx.iter().zip(tp) {
            tp_flags[i] = t;
        }
    }
    let known: Vec<(Ranked, bool)> = prep
        .dets
        .iter()
        .zip(&tp_flags)
        .filter(|(d, _)| d.class_index != UNKNOWN_CLASS)
        .map(|(d, &t)| (*d, t))
        .collect();
    wi_from_ranked(&known, n_known_gt, &gt_boxes(truth, unknowns), cfg)
}

/// Number of known-labeled detections matched (greedy, single-match) to an
/// unknown-class ground-truth box.
pub fn absolute_open_set_error(
    detections: &[DetectionSet],
    truth: &GroundTruthSet,
    unknowns: &[usize],
    iou_thresh: f64,
) -> Result<usize> {
    let n_stage = detections
        .iter()
        .flat_map(|s| s.detections.iter().map(|d| d.class_index))
        .max()
        .unwrap_or(0);
    let prep = prepare(detections, truth, n_stage)?;
    let known: Vec<Ranked> = prep
        .dets
        .into_iter()
        .filter(|d| d.class_index != UNKNOWN_CLASS)
        .collect();
    Ok(match_ranked(&known, &gt_boxes(truth, unknowns), iou_thresh)?.1)
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}", 100.0 * v),
        None => String::from("-"),
    }
}

/// Aligned plain-text rendering; metrics are shown ×100.
pub fn render_report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let header: Vec<(&str, String)> = match report.stage {
        Stage::T1 => vec![
            ("U-Recall", pct(report.unknown_recall)),
            ("U-mAP", pct(report.unknown_map)),
            ("K-mAP", pct(report.known_map)),
            (
                "WI",
                report
                    .wilderness_impact
                    .map_or("-".into(), |w| format!("{w:.4}")),
            ),
            ("A-OSE", format!("{}", report.absolute_open_set_error)),
        ],
        Stage::T2 => vec![
            ("PK-mAP", pct(report.prev_known_map)),
            ("CK-mAP", pct(report.curr_known_map)),
            ("Both", pct(report.both_map)),
        ],
    };
    let _ = writeln!(out, "stage {}", report.stage.as_str());
    let widths: Vec<usize> = header.iter().map(|(h, v)| h.len().max(v.len())).collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let _ = writeln!(out, "{}", line(header.iter().map(|(h, _)| *h).collect()));
    let _ = writeln!(
        out,
        "{}",
        line(header.iter().map(|(_, v)| v.as_str()).collect())
    );
    let name_w = report
        .per_class
        .iter()
        .map(|c| c.name.len())
        .max()
        .unwrap_or(0)
        .max(5);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<name_w$}  {:>6}  {:>5}", "class", "n_gt", "AP");
    for c in &report.per_class {
        let _ = writeln!(out, "{:<name_w$}  {:>6}  {:>5}", c.name, c.n_gt, pct(c.ap));
    }
    if !report.excluded.is_empty() {
        let names: Vec<String> = report
            .per_class
            .iter()
            .filter(|c| c.ap.is_none())
            .map(|c| c.name.clone())
            .collect();
        let _ = writeln!(out, "excluded (no ground truth): {}", names.join(", "));
    }
    out
}
