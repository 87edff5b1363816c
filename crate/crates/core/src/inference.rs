//! Per-proposal scoring (known-class probabilities and the unknown score)
//! for FOMO and the five baselines, and assembly of capped per-image
//! detection lists.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribpipe::SelectionModel;
use crate::embedspace::{attribute_scores, cosine_sim, normalize_text};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::linalg::{sigmoid, Matrix};

/// Detections kept per image unless configured otherwise.
pub const DEFAULT_CAP: usize = 100;

/// Class index reserved for the unknown class.
pub const UNKNOWN_CLASS: usize = 0;

/// `1 − max softmax(logits)`; lies in `[0, 1 − 1/K]`.
pub fn p_ood(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // the max term contributes exactly 1; the rest is the out-of-distribution mass
    let mut rest = 0.0;
    let mut seen_max = false;
    for &z in logits {
        if z == m && !seen_max {
            seen_max = true;
            continue;
        }
        rest += libm::exp(z - m);
    }
    Ok(rest / (1.0 + rest))
}

/// `max sigmoid(s)` over attribute scores.
pub fn p_id(scores: &[f64]) -> Result<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return Err(Error::EmptyInput("attribute scores"));
    }
    Ok(sigmoid(m))
}

/// `p_ood(logits) · p_id(s)`.
pub fn unknown_score(logits: &[f64], scores: &[f64]) -> Result<f64> {
    Ok(p_ood(logits)? * p_id(scores)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Fomo,
    BaseGeneric,
    ImagenetNames,
    LlmNames,
    GtNames,
    FewShot,
}

impl ScorerKind {
    /// Short command-line name.
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Fomo => "fomo",
            ScorerKind::BaseGeneric => "base",
            ScorerKind::ImagenetNames => "imagenet",
            ScorerKind::LlmNames => "llm",
            ScorerKind::GtNames => "gt",
            ScorerKind::FewShot => "fs",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fomo" => ScorerKind::Fomo,
            "base" | "base_generic" => ScorerKind::BaseGeneric,
            "imagenet" | "imagenet_names" => ScorerKind::ImagenetNames,
            "llm" | "llm_names" => ScorerKind::LlmNames,
            "gt" | "gt_names" => ScorerKind::GtNames,
            "fs" | "few_shot" => ScorerKind::FewShot,
            other => {
                return Err(Error::InvalidConfig(alloc::format!(
                    "unknown scorer `{other}` (expected fomo, base, imagenet, llm, gt or fs)"
                )))
            }
        })
    }
}

/// Names with their text embeddings (one row per name).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedEmbeddings {
    pub names: Vec<String>,
    pub embeddings: Matrix,
}

/// Inputs for one scorer kind. Which fields are required depends on `kind`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    /// Known class names, in stage order.
    pub class_names: Vec<String>,
    /// `K x D` text embeddings of the known class names.
    pub class_embeddings: Option<Matrix>,
    /// Text embedding of the generic object prompt.
    pub generic_embedding: Option<Vec<f64>>,
    /// Candidate unknown names (ImageNet vocabulary, LLM proposals or the
    /// ground-truth unknown names).
    pub unknown_names: Option<NamedEmbeddings>,
    /// `K x D` per-class average exemplar embeddings.
    pub exemplar_means: Option<Matrix>,
    pub selection: Option<SelectionModel>,
    /// Full `N x D` attribute embeddings matching `selection`.
    pub attributes: Option<Matrix>,
}

impl ScorerSpec {
    pub fn new(kind: ScorerKind, class_names: Vec<String>) -> Self {
        Self {
            kind,
            class_names,
            class_embeddings: None,
            generic_embedding: None,
            unknown_names: None,
            exemplar_means: None,
            selection: None,
            attributes: None,
        }
    }
}

/// A validated, ready-to-run scorer.
#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Fomo {
        /// `K x |kept|` pruned weights.
        weights: Matrix,
        /// `|kept| x D` attribute rows.
        attributes: Matrix,
    },
    Text {
        class_embeddings: Matrix,
        unknown: UnknownRule,
    },
    FewShot {
        exemplar_means: Matrix,
        generic: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum UnknownRule {
    Generic(Vec<f64>),
    /// Max over the (known-filtered) candidate names.
    Names(Matrix),
}

/// Per-proposal scores: sigmoid probabilities for each known class plus the
/// unknown score.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalScore {
    pub known: Vec<f64>,
    pub unknown: f64,
}

impl Scorer {
    pub fn from_spec(spec: ScorerSpec) -> Result<Self> {
        let kind = spec.kind.as_str();
        let k = spec.class_names.len();
        if k == 0 {
            return Err(Error::EmptyInput("known classes"));
        }
        let need = |what: &'static str| Error::MissingInput { kind, what };
        let check_rows = |m: &Matrix, context: &'static str| {
            if m.rows() == k {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context,
                    expected: k,
                    found: m.rows(),
                })
            }
        };
        match spec.kind {
            ScorerKind::Fomo => {
                let model = spec.selection.ok_or_else(|| need("selection model"))?;
                let e_att = spec
                    .attributes
                    .ok_or_else(|| need("attribute embeddings"))?;
                if model.n_classes() != k {
                    return Err(Error::DimensionMismatch {
                        context: "selection model classes",
                        expected: k,
                        found: model.n_classes(),
                    });
                }
                if model.kept.is_empty() {
                    return Err(Error::EmptyInput("kept attributes"));
                }
                let attributes = model.kept_rows(&e_att)?;
                attribute_scores(&alloc::vec![1.0; attributes.cols()], &attributes)?;
                Ok(Scorer::Fomo {
                    weights: model.pruned_weights(),
                    attributes,
                })
            }
            ScorerKind::FewShot => {
                let exemplar_means = spec.exemplar_means.ok_or_else(|| need("exemplar means"))?;
                check_rows(&exemplar_means, "exemplar means")?;
                let generic = spec
                    .generic_embedding
                    .ok_or_else(|| need("generic prompt embedding"))?;
                Ok(Scorer::FewShot {
                    exemplar_means,
                    generic,
                })
            }
            ScorerKind::BaseGeneric => {
                let class_embeddings = spec
                    .class_embeddings
                    .ok_or_else(|| need("class embeddings"))?;
                check_rows(&class_embeddings, "class embeddings")?;
                let generic = spec
                    .generic_embedding
                    .ok_or_else(|| need("generic prompt embedding"))?;
                Ok(Scorer::Text {
                    class_embeddings,
                    unknown: UnknownRule::Generic(generic),
                })
            }
            ScorerKind::ImagenetNames | ScorerKind::LlmNames | ScorerKind::GtNames => {
                let class_embeddings = spec
                    .class_embeddings
                    .ok_or_else(|| need("class embeddings"))?;
                check_rows(&class_embeddings, "class embeddings")?;
                let names = spec
                    .unknown_names
                    .ok_or_else(|| need("unknown name embeddings"))?;
                let filtered = filter_known_names(&names, &spec.class_names)?;
                Ok(Scorer::Text {
                    class_embeddings,
                    unknown: UnknownRule::Names(filtered.embeddings),
                })
            }
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Scorer::Fomo { weights, .. } => weights.rows(),
            Scorer::Text {
                class_embeddings, ..
            } => class_embeddings.rows(),
            Scorer::FewShot { exemplar_means, .. } => exemplar_means.rows(),
        }
    }

    /// Known-class probabilities for one visual embedding.
    pub fn score_known(&self, e_v: &[f64]) -> Result<Vec<f64>> {
        match self {
            Scorer::Fomo {
                weights,
                attributes,
            } => {
                let s = attribute_scores(e_v, attributes)?;
                Ok(weights.mul_vec(&s)?.into_iter().map(sigmoid).collect())
            }
            Scorer::Text {
                class_embeddings: m,
                ..
            }
            | Scorer::FewShot {
                exemplar_means: m, ..
            } => sigmoid_cosines(e_v, m),
        }
    }

    /// Unknown score for one visual embedding.
    pub fn score_unknown(&self, e_v: &[f64]) -> Result<f64> {
        match self {
            Scorer::Fomo {
                weights,
                attributes,
            } => {
                let s = attribute_scores(e_v, attributes)?;
                unknown_score(&weights.mul_vec(&s)?, &s)
            }
            Scorer::Text { unknown, .. } => match unknown {
                UnknownRule::Generic(g) => Ok(sigmoid(cosine_sim(e_v, g)?)),
                UnknownRule::Names(names) => max_name_score(e_v, names),
            },
            Scorer::FewShot { generic, .. } => Ok(sigmoid(cosine_sim(e_v, generic)?)),
        }
    }

    pub fn score(&self, e_v: &[f64]) -> Result<ProposalScore> {
        match self {
            Scorer::Fomo {
                weights,
                attributes,
            } => {
                // shares the attribute scores between both heads
                let s = attribute_scores(e_v, attributes)?;
                let logits = weights.mul_vec(&s)?;
                Ok(ProposalScore {
                    unknown: unknown_score(&logits, &s)?,
                    known: logits.into_iter().map(sigmoid).collect(),
                })
            }
            _ => Ok(ProposalScore {
                known: self.score_known(e_v)?,
                unknown: self.score_unknown(e_v)?,
            }),
        }
    }
}

fn sigmoid_cosines(e_v: &[f64], m: &Matrix) -> Result<Vec<f64>> {
    Ok(attribute_scores(e_v, m)?.into_iter().map(sigmoid).collect())
}

fn max_name_score(e_v: &[f64], names: &Matrix) -> Result<f64> {
    let s = attribute_scores(e_v, names)?;
    p_id(&s)
}

/// Drops candidate names that coincide (after text normalization) with a
/// known class name.
pub fn filter_known_names(names: &NamedEmbeddings, known: &[String]) -> Result<NamedEmbeddings> {
    if names.names.len() != names.embeddings.rows() {
        return Err(Error::DimensionMismatch {
            context: "unknown name embeddings",
            expected: names.names.len(),
            found: names.embeddings.rows(),
        });
    }
    let known: Vec<String> = known.iter().map(|k| normalize_text(k)).collect();
    let keep: Vec<usize> = (0..names.names.len())
        .filter(|&i| !known.contains(&normalize_text(&names.names[i])))
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyProposalNames);
    }
    Ok(NamedEmbeddings {
        names: keep.iter().map(|&i| names.names[i].clone()).collect(),
        embeddings: names.embeddings.select_rows(&keep),
    })
}

/// Unknown score of a text-conditioned baseline.
pub fn score_unknown_baseline(e_v: &[f64], spec: &ScorerSpec) -> Result<f64> {
    if spec.kind == ScorerKind::Fomo {
        return Err(Error::InvalidConfig("fomo is not a baseline scorer".into()));
    }
    Scorer::from_spec(spec.clone())?.score_unknown(e_v)
}

/// Known-class probabilities under `spec`.
pub fn score_known(e_v: &[f64], spec: &ScorerSpec) -> Result<Vec<f64>> {
    Scorer::from_spec(spec.clone())?.score_known(e_v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyPolicy {
    /// Rank every (proposal, class) and (proposal, unknown) pair together.
    Joint,
    /// Keep the top `known` known-labeled and top `unknown` unknown-labeled
    /// detections separately.
    Split { known: usize, unknown: usize },
}

impl AssemblyPolicy {
    /// The few-shot baseline's split.
    pub const FEW_SHOT: AssemblyPolicy = AssemblyPolicy::Split {
        known: 50,
        unknown: 50,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// `0` is unknown; known class `k` (0-based in stage order) is `k + 1`.
    pub class_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

struct Candidate {
    proposal: usize,
    class_index: usize,
    score: f64,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.proposal.cmp(&b.proposal))
        .then(a.class_index.cmp(&b.class_index))
}

/// Turns per-proposal scores into a ranked, capped detection list.
///
/// Output is sorted by score descending; ties break by proposal index, then
/// class index.
pub fn assemble_detections(
    image_id: &str,
    boxes: &[BBox],
    scores: &[ProposalScore],
    cap: usize,
    policy: AssemblyPolicy,
) -> Result<DetectionSet> {
    if cap == 0 {
        return Err(Error::InvalidConfig("detection cap must be >= 1".into()));
    }
    if boxes.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            context: "proposal boxes vs scores",
            expected: scores.len(),
            found: boxes.len(),
        });
    }
    let mut known = Vec::new();
    let mut unknown = Vec::new();
    for (p, ps) in scores.iter().enumerate() {
        unknown.push(Candidate {
            proposal: p,
            class_index: UNKNOWN_CLASS,
            score: clamp_score(ps.unknown),
        });
        for (k, &s) in ps.known.iter().enumerate() {
            known.push(Candidate {
                proposal: p,
                class_index: k + 1,
                score: clamp_score(s),
            });
        }
    }
    let mut chosen = match policy {
        AssemblyPolicy::Joint => {
            known.append(&mut unknown);
            known.sort_by(rank);
            known.truncate(cap);
            known
        }
        AssemblyPolicy::Split {
            known: k_known,
            unknown: k_unk,
        } => {
            known.sort_by(rank);
            known.truncate(k_known);
            unknown.sort_by(rank);
            unknown.truncate(k_unk);
            known.append(&mut unknown);
            known.sort_by(rank);
            known.truncate(cap);
            known
        }
    };
    chosen.retain(|c| c.score.is_finite());
    Ok(DetectionSet {
        image_id: image_id.into(),
        detections: chosen
            .into_iter()
            .map(|c| Detection {
                image_id: image_id.into(),
                bbox: boxes[c.proposal],
                class_index: c.class_index,
                score: c.score,
            })
            .collect(),
    })
}

#[inline]
fn clamp_score(s: f64) -> f64 {
    if s.is_nan() {
        s
    } else {
        s.clamp(0.0, 1.0)
    }
}
