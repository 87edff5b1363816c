//! Run configuration: one JSON document per experiment. Relative paths are
//! resolved against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fomo_core::attribpipe::{AdaptConfig, ExemplarMode, TrainConfig};
use fomo_core::inference::{AssemblyPolicy, ScorerKind, DEFAULT_CAP};
use fomo_core::owdeval::{EvalConfig, Stage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Joint,
    Split,
}

/// Text-side embeddings of candidate names: a JSON list of strings plus a
/// tensor with one row per name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamesRef {
    pub names: PathBuf,
    pub embeddings: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// `N x D` attribute embeddings; overrides the train manifest's file.
    pub attributes: Option<PathBuf>,
    /// Task specification per stage.
    pub tasks: BTreeMap<Stage, PathBuf>,
    /// Class-name text embeddings, one row per dataset class.
    pub class_text: Option<PathBuf>,
    /// Generic "object" prompt embedding.
    pub generic_text: Option<PathBuf>,
    /// Candidate unknown names per scorer (`imagenet`, `llm`, `gt`).
    pub names: BTreeMap<String, NamesRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory; overrides the seeds inside the stage configs.
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_exemplar_mode")]
    pub exemplar_mode: ExemplarMode,
    #[serde(default)]
    pub selection: TrainConfig,
    #[serde(default)]
    pub adaptation: AdaptConfig,
    #[serde(default = "TrainConfig::refinement")]
    pub refinement: TrainConfig,
    #[serde(default = "default_scorer")]
    pub scorer: ScorerKind,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    /// Per-image budgets under the split policy.
    #[serde(default = "default_split_budget")]
    pub split_known: usize,
    #[serde(default = "default_split_budget")]
    pub split_unknown: usize,
    #[serde(default = "default_stage")]
    pub stage: Stage,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_shots() -> usize {
    10
}
fn default_exemplar_mode() -> ExemplarMode {
    ExemplarMode::Fomo
}
fn default_scorer() -> ScorerKind {
    ScorerKind::Fomo
}
fn default_cap() -> usize {
    DEFAULT_CAP
}
fn default_policy() -> PolicyKind {
    PolicyKind::Joint
}
fn default_split_budget() -> usize {
    50
}
fn default_stage() -> Stage {
    Stage::T1
}
fn default_workers() -> usize {
    1
}

/// Inputs a command needs from the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Need {
    TrainManifest,
    TestManifest,
    Task,
    ScorerInputs,
}

impl RunConfig {
    /// A config with every default and no paths.
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    /// Reads `path` and rebases its relative paths onto the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        self.map_paths(|p| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.to_path_buf()
            }
        });
    }

    fn map_paths(&mut self, f: impl Fn(&Path) -> PathBuf) {
        let paths = &mut self.paths;
        let fix = |p: &mut PathBuf| *p = f(p);
        for p in [
            &mut paths.train_manifest,
            &mut paths.test_manifest,
            &mut paths.attributes,
            &mut paths.class_text,
            &mut paths.generic_text,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        paths.tasks.values_mut().for_each(fix);
        for r in paths.names.values_mut() {
            fix(&mut r.names);
            fix(&mut r.embeddings);
        }
    }

    /// The effective config as JSON with paths relative to `out_dir`, for
    /// provenance records.
    pub fn echo(&self, out_dir: &Path) -> serde_json::Value {
        let mut c = self.clone();
        c.map_paths(|p| PathBuf::from(crate::persist::relative(p, out_dir)));
        serde_json::to_value(c).expect("config serializes")
    }

    pub fn policy(&self) -> AssemblyPolicy {
        match self.policy {
            PolicyKind::Joint => AssemblyPolicy::Joint,
            PolicyKind::Split => AssemblyPolicy::Split {
                known: self.split_known,
                unknown: self.split_unknown,
            },
        }
    }

    /// Selection config with the run seed applied.
    pub fn selection(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.selection.clone()
        }
    }

    pub fn refinement(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.refinement.clone()
        }
    }

    pub fn task_path(&self) -> Option<&Path> {
        self.paths.tasks.get(&self.stage).map(PathBuf::as_path)
    }

    /// Every violated constraint for a command needing `needs`.
    pub fn violations(&self, needs: &[Need]) -> Vec<String> {
        let mut v = Vec::new();
        if self.shots == 0 {
            v.push("shots must be >= 1".into());
        }
        if self.cap == 0 {
            v.push("cap must be >= 1".into());
        }
        if self.workers == 0 {
            v.push("workers must be >= 1".into());
        }
        v.extend(
            self.selection
                .violations()
                .into_iter()
                .map(|m| format!("selection: {m}")),
        );
        v.extend(
            self.adaptation
                .violations()
                .into_iter()
                .map(|m| format!("adaptation: {m}")),
        );
        v.extend(
            self.refinement
                .violations()
                .into_iter()
                .map(|m| format!("refinement: {m}")),
        );
        v.extend(
            self.eval
                .violations()
                .into_iter()
                .map(|m| format!("eval: {m}")),
        );

        let mut file = |label: &str, p: Option<&Path>| match p {
            None => v.push(format!("{label} is required")),
            Some(p) if !p.is_file() => v.push(format!("{label} {} does not exist", p.display())),
            Some(_) => {}
        };
        for need in needs {
            match need {
                Need::TrainManifest => {
                    file("paths.train_manifest", self.paths.train_manifest.as_deref())
                }
                Need::TestManifest => {
                    file("paths.test_manifest", self.paths.test_manifest.as_deref())
                }
                Need::Task => file(
                    &format!("paths.tasks.{}", self.stage.as_str()),
                    self.task_path(),
                ),
                Need::ScorerInputs => match self.scorer {
                    ScorerKind::Fomo => {}
                    ScorerKind::FewShot => {
                        file("paths.train_manifest", self.paths.train_manifest.as_deref());
                        file("paths.generic_text", self.paths.generic_text.as_deref());
                    }
                    ScorerKind::BaseGeneric => {
                        file("paths.class_text", self.paths.class_text.as_deref());
                        file("paths.generic_text", self.paths.generic_text.as_deref());
                    }
                    kind => {
                        file("paths.class_text", self.paths.class_text.as_deref());
                        let key = kind.as_str();
                        let r = self.paths.names.get(key);
                        file(
                            &format!("paths.names.{key}.names"),
                            r.map(|r| r.names.as_path()),
                        );
                        file(
                            &format!("paths.names.{key}.embeddings"),
                            r.map(|r| r.embeddings.as_path()),
                        );
                    }
                },
            }
        }
        if let Some(p) = &self.paths.attributes {
            file("paths.attributes", Some(p));
        }
        v
    }

    pub fn validate(&self, needs: &[Need]) -> anyhow::Result<()> {
        let v = self.violations(needs);
        if v.is_empty() {
            Ok(())
        } else {
            anyhow::bail!("invalid configuration:\n  - {}", v.join("\n  - "))
        }
    }
}
