//! On-disk artifacts: model directories, detection files, reports and
//! provenance records. Every writer is byte-deterministic for equal inputs.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fomo_core::attribpipe::SelectionModel;
use fomo_core::inference::DetectionSet;
use fomo_core::linalg::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensorio;

pub const WEIGHTS_FILE: &str = "weights.fomo";
pub const ATTRIBUTES_FILE: &str = "attributes.fomo";
pub const MODEL_FILE: &str = "model.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const SPLIT_FILE: &str = "split.json";
pub const SHOTS_FILE: &str = "shots.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const CATALOG_FILE: &str = "attributes.json";
pub const TASK_T1_FILE: &str = "task_t1.json";
pub const TASK_T2_FILE: &str = "task_t2.json";

/// Bumped whenever an artifact layout changes.
pub const FORMAT_VERSION: u32 = 1;

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// What a model directory records besides its two tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format_version: u32,
    pub class_names: Vec<String>,
    /// Dataset class index of each model class.
    pub dataset_classes: Vec<usize>,
    pub n_hat: usize,
    pub selected: Vec<Vec<usize>>,
    pub kept: Vec<usize>,
    pub n_attributes: usize,
    pub embedding_dim: usize,
    /// Stages applied so far, in order.
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub steps: usize,
}

/// A selection model plus the attribute embeddings it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub meta: ModelMeta,
    pub selection: SelectionModel,
    /// Full `N x D` attribute embeddings.
    pub attributes: Matrix,
}

impl StoredModel {
    pub fn new(
        selection: SelectionModel,
        attributes: Matrix,
        dataset_classes: Vec<usize>,
        stage: StageRecord,
    ) -> Self {
        let meta = ModelMeta {
            format_version: FORMAT_VERSION,
            class_names: selection.class_names.clone(),
            dataset_classes,
            n_hat: selection.n_hat,
            selected: selection.selected.clone(),
            kept: selection.kept.clone(),
            n_attributes: attributes.rows(),
            embedding_dim: attributes.cols(),
            stages: vec![stage],
        };
        Self {
            meta,
            selection,
            attributes,
        }
    }

    /// Replaces the attribute embeddings and logs the stage.
    pub fn with_attributes(mut self, attributes: Matrix, stage: StageRecord) -> Self {
        self.attributes = attributes;
        self.meta.stages.push(stage);
        self
    }

    /// Returns the written file names.
    pub fn save(&self, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let files = [WEIGHTS_FILE, ATTRIBUTES_FILE, MODEL_FILE].map(|f| dir.join(f));
        tensorio::write_matrix(&files[0], &self.selection.weights)?;
        tensorio::write_matrix(&files[1], &self.attributes)?;
        write_json(&files[2], &self.meta)?;
        Ok(files.to_vec())
    }

    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let meta: ModelMeta = read_json(&dir.join(MODEL_FILE))?;
        if meta.format_version != FORMAT_VERSION {
            bail!(
                "{}: format version {} is not {FORMAT_VERSION}",
                dir.display(),
                meta.format_version
            );
        }
        let weights = tensorio::read_matrix(&dir.join(WEIGHTS_FILE))?;
        let attributes = tensorio::read_matrix(&dir.join(ATTRIBUTES_FILE))?;
        let k = meta.class_names.len();
        if weights.rows() != k || weights.cols() != meta.n_attributes {
            bail!(
                "{}: weights are {}x{}, model.json says {k}x{}",
                dir.display(),
                weights.rows(),
                weights.cols(),
                meta.n_attributes
            );
        }
        if attributes.rows() != meta.n_attributes || attributes.cols() != meta.embedding_dim {
            bail!(
                "{}: attributes are {}x{}, model.json says {}x{}",
                dir.display(),
                attributes.rows(),
                attributes.cols(),
                meta.n_attributes,
                meta.embedding_dim
            );
        }
        if meta.dataset_classes.len() != k {
            bail!(
                "{}: dataset_classes has {} entries for {k} classes",
                dir.display(),
                meta.dataset_classes.len()
            );
        }
        let selection = SelectionModel {
            class_names: meta.class_names.clone(),
            weights,
            selected: meta.selected.clone(),
            kept: meta.kept.clone(),
            n_hat: meta.n_hat,
        };
        if let Some(&j) = selection.kept.iter().find(|&&j| j >= meta.n_attributes) {
            bail!("{}: kept attribute {j} is out of range", dir.display());
        }
        selection
            .check_invariants()
            .with_context(|| format!("{}: inconsistent selection", dir.display()))?;
        Ok(Self {
            meta,
            selection,
            attributes,
        })
    }
}

/// One JSON object per line, one line per image.
pub fn write_detections(path: &Path, sets: &[DetectionSet]) -> anyhow::Result<()> {
    let mut out = io::BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for set in sets {
        serde_json::to_writer(&mut out, set)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> anyhow::Result<Vec<DetectionSet>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut sets = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: DetectionSet =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if let Some(d) = set.detections.iter().find(|d| d.image_id != set.image_id) {
            bail!(
                "{}:{}: detection for `{}` filed under `{}`",
                path.display(),
                i + 1,
                d.image_id,
                set.image_id
            );
        }
        sets.push(set);
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the directory holding the provenance record.
    pub path: String,
    pub sha256: String,
}

/// Machine-readable record of how a command's outputs were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub format_version: u32,
    pub command: String,
    pub seed: Option<u64>,
    /// The effective configuration, defaults filled in.
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// `path` relative to `base`; falls back to the path as given.
pub fn relative(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let rel = pathdiff::diff_paths(abs(path), abs(base)).unwrap_or_else(|| path.to_path_buf());
    rel.to_string_lossy().replace('\\', "/")
}

impl Provenance {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            format_version: FORMAT_VERSION,
            command: command.into(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn hash(files: &[PathBuf], out_dir: &Path) -> anyhow::Result<Vec<FileHash>> {
        files
            .iter()
            .map(|f| {
                Ok(FileHash {
                    path: relative(f, out_dir),
                    sha256: sha256_file(f)?,
                })
            })
            .collect()
    }

    fn merge(into: &mut Vec<FileHash>, more: Vec<FileHash>) {
        into.extend(more);
        into.sort_by(|a, b| a.path.cmp(&b.path));
        into.dedup();
    }

    /// Hashes `files` now, before a command may overwrite them. `out_dir`
    /// must already exist.
    pub fn add_inputs(&mut self, files: &[PathBuf], out_dir: &Path) -> anyhow::Result<()> {
        Self::merge(&mut self.inputs, Self::hash(files, out_dir)?);
        Ok(())
    }

    /// Hashes inputs and outputs and writes `provenance.json` into `out_dir`.
    pub fn write(
        mut self,
        out_dir: &Path,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> anyhow::Result<PathBuf> {
        self.add_inputs(inputs, out_dir)?;
        Self::merge(&mut self.outputs, Self::hash(outputs, out_dir)?);
        let path = out_dir.join(PROVENANCE_FILE);
        write_json(&path, &self)?;
        Ok(path)
    }
}
