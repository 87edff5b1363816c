//! Benchmark construction: frequency-based class splits, few-shot sampling
//! and a synthetic embedding world with planted attribute structure.

mod world;

pub use world::{generate_world, SyntheticWorld, WorldParams, WorldTruth, CANVAS, CELL};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::owdeval::{Stage, TaskSpec};
use crate::scene::AnnotationRecord;

/// Known/unknown partition of a dataset's classes by train-split frequency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub dataset: String,
    pub class_names: Vec<String>,
    /// Ground-truth instance count per class in the train split.
    pub counts: Vec<usize>,
    /// Dataset class indices, most frequent first.
    pub t1_known: Vec<usize>,
    pub t1_unknown: Vec<usize>,
    pub warnings: Vec<String>,
}

impl SplitPlan {
    /// T1 evaluates `t1_known` against `t1_unknown`; T2 adds the unknowns as
    /// currently-known classes.
    pub fn task(&self, stage: Stage) -> TaskSpec {
        match stage {
            Stage::T1 => TaskSpec::T1 {
                known: self.t1_known.clone(),
                unknown: self.t1_unknown.clone(),
            },
            Stage::T2 => TaskSpec::T2 {
                prev_known: self.t1_known.clone(),
                curr_known: self.t1_unknown.clone(),
            },
        }
    }
}

/// Sorts classes by descending instance count (ties to the lower index) and
/// gives the first `⌈K/2⌉` to the known half.
pub fn build_split(dataset: &str, class_names: &[String], counts: &[usize]) -> Result<SplitPlan> {
    if class_names.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            context: "split class counts",
            expected: class_names.len(),
            found: counts.len(),
        });
    }
    if class_names.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "a split needs at least 2 classes (got {})",
            class_names.len()
        )));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let warnings = order
        .iter()
        .filter(|&&c| counts[c] == 0)
        .map(|&c| {
            format!(
                "class `{}` has no train instances; placed last",
                class_names[c]
            )
        })
        .collect();
    let n_known = order.len().div_ceil(2);
    Ok(SplitPlan {
        dataset: dataset.into(),
        class_names: class_names.to_vec(),
        counts: counts.to_vec(),
        t1_unknown: order.split_off(n_known),
        t1_known: order,
        warnings,
    })
}

/// Uniformly samples `min(shots, available)` annotations of every known
/// class. The result is grouped by class in `t1_known` order and keeps
/// dataset order within a class.
pub fn sample_shots(
    annotations: &[AnnotationRecord],
    plan: &SplitPlan,
    shots: usize,
    seed: u64,
) -> Result<Vec<AnnotationRecord>> {
    if shots == 0 {
        return Err(Error::InvalidConfig("shots must be >= 1".into()));
    }
    let mut out = Vec::new();
    for &class in &plan.t1_known {
        let pool: Vec<&AnnotationRecord> = annotations
            .iter()
            .filter(|a| a.class_index == class)
            .collect();
        if pool.is_empty() {
            return Err(Error::ZeroInstances {
                class: plan.class_names[class].clone(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        let mut picks =
            rand::seq::index::sample(&mut rng, pool.len(), shots.min(pool.len())).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| pool[i].clone()));
    }
    Ok(out)
}
