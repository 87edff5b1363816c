//! Stage-separated commands. Each one reads its inputs, writes fixed file
//! names under `--out` and finishes with a provenance record.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Context};
use clap::{Args, Parser, Subcommand};
use fomo_core::attribpipe::{
    adapt_attributes, build_exemplar_set, refine_attributes, select_attributes, ExemplarSet,
    SelectionModel,
};
use fomo_core::benchkit::{build_split, generate_world, sample_shots, WorldParams};
use fomo_core::embedspace::{
    ingest_attribute_responses, render_llm_requests, AttributeEntry, AttributeResponse, Category,
};
use fomo_core::inference::{
    assemble_detections, DetectionSet, NamedEmbeddings, Scorer, ScorerKind, ScorerSpec,
};
use fomo_core::linalg::Matrix;
use fomo_core::owdeval::{evaluate_task, render_report_table, GroundTruthSet, Stage, TaskSpec};
use fomo_core::scene::Dataset;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{NamesRef, Need, PolicyKind, RunConfig};
use crate::manifest::{load_manifest, write_dataset, Loaded};
use crate::persist::{self, read_json, write_json, Provenance, StageRecord, StoredModel};
use crate::tensorio;

#[derive(Debug, Parser)]
#[command(
    name = "fomo",
    version,
    about = "Attribute-based open-world detection pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split classes into known and unknown halves by train frequency.
    Split(SplitArgs),
    /// Render the LLM attribute requests.
    Prompts(PromptsArgs),
    /// Turn LLM responses into an attribute catalog.
    Ingest(IngestArgs),
    /// Learn class-from-attribute weights and prune to the top attributes.
    Select(SelectArgs),
    /// Align the kept attribute embeddings with the visual class means.
    Adapt(ModelStageArgs),
    /// Refine the kept attribute embeddings with the weights frozen.
    Refine(ModelStageArgs),
    /// Score test proposals and write ranked detections.
    Infer(InferArgs),
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic benchmark directory.
    Synth(SynthArgs),
}

/// Overrides shared by the config-driven commands.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyKind>,
    #[arg(long, value_parser = parse_stage)]
    pub stage: Option<Stage>,
    #[arg(long, value_parser = parse_scorer)]
    pub scorer: Option<ScorerKind>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    match s {
        "t1" => Ok(Stage::T1),
        "t2" => Ok(Stage::T2),
        other => Err(format!("unknown stage `{other}` (expected t1 or t2)")),
    }
}

fn parse_scorer(s: &str) -> Result<ScorerKind, String> {
    s.parse().map_err(|e: fomo_core::Error| e.to_string())
}

fn parse_category(s: &str) -> Result<Category, String> {
    s.parse().map_err(|e: fomo_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Train-split manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dataset name recorded in the plan; defaults to the manifest stem.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Also sample this many shots per known class.
    #[arg(long, requires = "seed")]
    pub shots: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    /// Comma-separated class names.
    #[arg(
        long,
        value_delimiter = ',',
        conflicts_with = "manifest",
        required_unless_present = "manifest"
    )]
    pub classes: Vec<String>,
    /// Take the class names from a manifest instead.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated attribute categories.
    #[arg(long, value_delimiter = ',', value_parser = parse_category)]
    pub categories: Vec<Category>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Parsed LLM responses.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Skip training: keep every attribute with seeded initial weights.
    #[arg(long)]
    pub no_train: bool,
}

#[derive(Debug, Args)]
pub struct ModelStageArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Input model directory.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Model directory (fomo scorer only).
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub detections: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// World parameters as JSON; missing fields take their defaults.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Split(a) => cmd_split(&a),
        Command::Prompts(a) => cmd_prompts(&a),
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Select(a) => cmd_select(&a),
        Command::Adapt(a) => cmd_model_stage(&a, ModelStage::Adapt),
        Command::Refine(a) => cmd_model_stage(&a, ModelStage::Refine),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn load_checked(path: &Path) -> anyhow::Result<Loaded> {
    let loaded =
        load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    for w in &loaded.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(loaded)
}

fn manifest_inputs(path: &Path, loaded: &Loaded) -> Vec<PathBuf> {
    let mut v = vec![path.to_path_buf()];
    v.extend(loaded.tensor_files.iter().cloned());
    v
}

fn load_config(a: &RunArgs, needs: &[Need]) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(c) = a.cap {
        cfg.cap = c;
    }
    if let Some(p) = a.policy {
        cfg.policy = p;
    }
    if let Some(s) = a.stage {
        cfg.stage = s;
    }
    if let Some(s) = a.scorer {
        cfg.scorer = s;
    }
    cfg.validate(needs)?;
    Ok(cfg)
}

fn load_task(cfg: &RunConfig, n_classes: usize) -> anyhow::Result<(TaskSpec, PathBuf)> {
    let path = cfg
        .task_path()
        .ok_or_else(|| anyhow!("no task for stage {}", cfg.stage.as_str()))?;
    let task: TaskSpec = read_json(path)?;
    ensure!(
        task.stage() == cfg.stage,
        "{} is a {} task but the run stage is {}",
        path.display(),
        task.stage().as_str(),
        cfg.stage.as_str()
    );
    task.validate(n_classes)
        .with_context(|| format!("validating {}", path.display()))?;
    Ok((task, path.to_path_buf()))
}

/// Training inputs shared by select, adapt and refine.
struct TrainInputs {
    exemplars: ExemplarSet,
    classes: Vec<usize>,
    e_att: Matrix,
    inputs: Vec<PathBuf>,
}

fn train_inputs(cfg: &RunConfig) -> anyhow::Result<TrainInputs> {
    let path = cfg.paths.train_manifest.as_deref().expect("validated");
    let loaded = load_checked(path)?;
    let mut inputs = manifest_inputs(path, &loaded);
    let e_att = match &cfg.paths.attributes {
        Some(p) => {
            inputs.push(p.clone());
            tensorio::read_matrix(p)?
        }
        None => loaded.attributes.clone().ok_or_else(|| {
            anyhow!(
                "no attribute embeddings: set paths.attributes or the manifest's attribute_file"
            )
        })?,
    };
    ensure!(
        e_att.cols() == loaded.dataset.embedding_dim,
        "attribute embeddings have dimension {}, the manifest {}",
        e_att.cols(),
        loaded.dataset.embedding_dim
    );
    let (task, task_path) = load_task(cfg, loaded.dataset.class_names.len())?;
    inputs.push(task_path);
    let classes = task.stage_classes();
    let exemplars = build_exemplar_set(
        &loaded.dataset,
        &classes,
        cfg.shots,
        cfg.exemplar_mode,
        cfg.seed,
    )?;
    Ok(TrainInputs {
        exemplars,
        classes,
        e_att,
        inputs,
    })
}

fn cmd_select(a: &SelectArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a.run, &[Need::TrainManifest, Need::Task])?;
    let t = train_inputs(&cfg)?;
    let names = t.exemplars.class_names.clone();
    let (selection, record) = if a.no_train {
        let model = SelectionModel::untrained(names, t.e_att.rows(), cfg.seed);
        let record = StageRecord {
            stage: "untrained".into(),
            initial_objective: 0.0,
            final_objective: 0.0,
            steps: 0,
        };
        (model, record)
    } else {
        let (model, report) = select_attributes(&t.e_att, &t.exemplars, &cfg.selection())?;
        let record = StageRecord {
            stage: "select".into(),
            initial_objective: report.initial_loss(),
            final_objective: report.final_loss,
            steps: report.losses.len().saturating_sub(1),
        };
        (model, record)
    };
    let out = &a.run.out;
    create_out(out)?;
    let stored = StoredModel::new(selection, t.e_att, t.classes, record);
    let files = stored.save(out)?;
    let mut inputs = t.inputs;
    inputs.push(a.run.config.clone());
    Provenance::new(
        if a.no_train {
            "select --no-train"
        } else {
            "select"
        },
        Some(cfg.seed),
        cfg.echo(out),
    )
    .write(out, &inputs, &files)?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum ModelStage {
    Adapt,
    Refine,
}

fn cmd_model_stage(a: &ModelStageArgs, stage: ModelStage) -> anyhow::Result<()> {
    let cfg = load_config(&a.run, &[Need::TrainManifest, Need::Task])?;
    let model = StoredModel::load(&a.model)?;
    let t = train_inputs(&cfg)?;
    ensure!(
        model.meta.dataset_classes == t.classes,
        "model classes {:?} differ from the task's {:?}",
        model.meta.dataset_classes,
        t.classes
    );
    ensure!(
        model.attributes.cols() == t.e_att.cols(),
        "model attributes have dimension {}, the manifest {}",
        model.attributes.cols(),
        t.e_att.cols()
    );
    let (attributes, record, name) = match stage {
        ModelStage::Adapt => {
            let (e, r) = adapt_attributes(
                &model.attributes,
                &model.selection,
                &t.exemplars.class_means(),
                &cfg.adaptation,
            )?;
            let record = StageRecord {
                stage: "adapt".into(),
                initial_objective: r.objectives[0],
                final_objective: r.final_objective,
                steps: r.objectives.len() - 1,
            };
            (e, record, "adapt")
        }
        ModelStage::Refine => {
            let (e, r) = refine_attributes(
                &model.attributes,
                &model.selection,
                &t.exemplars,
                &cfg.refinement(),
            )?;
            let record = StageRecord {
                stage: "refine".into(),
                initial_objective: r.initial_loss(),
                final_objective: r.final_loss,
                steps: r.losses.len().saturating_sub(1),
            };
            (e, record, "refine")
        }
    };
    let out = &a.run.out;
    create_out(out)?;
    let mut prov = Provenance::new(name, Some(cfg.seed), cfg.echo(out));
    // hashed before saving: `--out` may be the input model directory
    let model_files: Vec<PathBuf> = [
        persist::WEIGHTS_FILE,
        persist::ATTRIBUTES_FILE,
        persist::MODEL_FILE,
    ]
    .iter()
    .map(|f| a.model.join(f))
    .collect();
    prov.add_inputs(&model_files, out)?;
    let files = model.with_attributes(attributes, record).save(out)?;
    let mut inputs = t.inputs;
    inputs.push(a.run.config.clone());
    prov.write(out, &inputs, &files)?;
    Ok(())
}

fn named_embeddings(r: &NamesRef) -> anyhow::Result<NamedEmbeddings> {
    let names: Vec<String> = read_json(&r.names)?;
    let embeddings = tensorio::read_matrix(&r.embeddings)?;
    ensure!(
        names.len() == embeddings.rows(),
        "{} lists {} names but {} has {} rows",
        r.names.display(),
        names.len(),
        r.embeddings.display(),
        embeddings.rows()
    );
    Ok(NamedEmbeddings { names, embeddings })
}

fn generic_vector(path: &Path) -> anyhow::Result<Vec<f64>> {
    let t = tensorio::read_tensor(path)?;
    ensure!(
        t.dims.len() == 1 || t.dims[0] == 1,
        "{}: generic embedding must be one vector, got dims {:?}",
        path.display(),
        t.dims
    );
    Ok(t.to_vector())
}

fn build_scorer(
    cfg: &RunConfig,
    model_dir: Option<&Path>,
    test: &Dataset,
    classes: &[usize],
    inputs: &mut Vec<PathBuf>,
) -> anyhow::Result<Scorer> {
    let names: Vec<String> = classes
        .iter()
        .map(|&c| test.class_names[c].clone())
        .collect();
    let mut spec = ScorerSpec::new(cfg.scorer, names);
    let d = test.embedding_dim;
    let check_dim = |what: &str, cols: usize| {
        ensure!(cols == d, "{what} have dimension {cols}, the manifest {d}");
        Ok(())
    };
    match cfg.scorer {
        ScorerKind::Fomo => {
            let dir = model_dir.ok_or_else(|| anyhow!("the fomo scorer needs --model"))?;
            let model = StoredModel::load(dir)?;
            ensure!(
                model.meta.dataset_classes == classes,
                "model classes {:?} differ from the task's {:?}",
                model.meta.dataset_classes,
                classes
            );
            check_dim("model attributes", model.attributes.cols())?;
            for f in [
                persist::WEIGHTS_FILE,
                persist::ATTRIBUTES_FILE,
                persist::MODEL_FILE,
            ] {
                inputs.push(dir.join(f));
            }
            spec.selection = Some(model.selection);
            spec.attributes = Some(model.attributes);
        }
        ScorerKind::FewShot => {
            let path = cfg.paths.train_manifest.as_deref().expect("validated");
            let train = load_checked(path)?;
            inputs.extend(manifest_inputs(path, &train));
            let ex = build_exemplar_set(
                &train.dataset,
                classes,
                cfg.shots,
                cfg.exemplar_mode,
                cfg.seed,
            )?;
            check_dim("exemplars", ex.dim())?;
            spec.exemplar_means = Some(ex.class_means());
        }
        _ => {
            let p = cfg.paths.class_text.as_deref().expect("validated");
            let text = tensorio::read_matrix(p)?;
            ensure!(
                text.rows() == test.class_names.len(),
                "{} has {} rows for {} dataset classes",
                p.display(),
                text.rows(),
                test.class_names.len()
            );
            check_dim("class text embeddings", text.cols())?;
            inputs.push(p.to_path_buf());
            spec.class_embeddings = Some(text.select_rows(classes));
            if cfg.scorer != ScorerKind::BaseGeneric {
                let r = &cfg.paths.names[cfg.scorer.as_str()];
                let named = named_embeddings(r)?;
                check_dim("name embeddings", named.embeddings.cols())?;
                inputs.extend([r.names.clone(), r.embeddings.clone()]);
                spec.unknown_names = Some(named);
            }
        }
    }
    if matches!(cfg.scorer, ScorerKind::BaseGeneric | ScorerKind::FewShot) {
        let p = cfg.paths.generic_text.as_deref().expect("validated");
        let g = generic_vector(p)?;
        check_dim("the generic embedding", g.len())?;
        inputs.push(p.to_path_buf());
        spec.generic_embedding = Some(g);
    }
    Ok(Scorer::from_spec(spec)?)
}

fn cmd_infer(a: &InferArgs) -> anyhow::Result<()> {
    let cfg = load_config(
        &a.run,
        &[Need::TestManifest, Need::Task, Need::ScorerInputs],
    )?;
    let path = cfg.paths.test_manifest.as_deref().expect("validated");
    let test = load_checked(path)?;
    let mut inputs = manifest_inputs(path, &test);
    let (task, task_path) = load_task(&cfg, test.dataset.class_names.len())?;
    inputs.push(task_path);
    let classes = task.stage_classes();
    let scorer = build_scorer(
        &cfg,
        a.model.as_deref(),
        &test.dataset,
        &classes,
        &mut inputs,
    )?;
    let policy = cfg.policy();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .context("building the worker pool")?;
    // indexed collect keeps image order for any pool size
    let sets: Vec<DetectionSet> = pool.install(|| {
        test.dataset
            .images
            .par_iter()
            .map(|img| {
                let scores = img
                    .proposals
                    .iter_rows()
                    .map(|e| scorer.score(e))
                    .collect::<fomo_core::Result<Vec<_>>>()?;
                assemble_detections(&img.image_id, &img.boxes, &scores, cfg.cap, policy)
            })
            .collect::<fomo_core::Result<Vec<_>>>()
    })?;
    let out = &a.run.out;
    create_out(out)?;
    let det_path = out.join(persist::DETECTIONS_FILE);
    persist::write_detections(&det_path, &sets)?;
    inputs.push(a.run.config.clone());
    let command = format!("infer --scorer {}", cfg.scorer);
    Provenance::new(&command, Some(cfg.seed), cfg.echo(out)).write(out, &inputs, &[det_path])?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a.run, &[Need::TestManifest, Need::Task])?;
    let path = cfg.paths.test_manifest.as_deref().expect("validated");
    let test = load_checked(path)?;
    let mut inputs = manifest_inputs(path, &test);
    let (task, task_path) = load_task(&cfg, test.dataset.class_names.len())?;
    inputs.push(task_path);
    let sets = persist::read_detections(&a.detections)?;
    inputs.push(a.detections.clone());
    let report = evaluate_task(
        &sets,
        &GroundTruthSet::from_dataset(&test.dataset),
        &task,
        &cfg.eval,
    )?;
    let out = &a.run.out;
    create_out(out)?;
    let json = out.join(persist::REPORT_JSON);
    let txt = out.join(persist::REPORT_TXT);
    write_json(&json, &report)?;
    fs::write(&txt, render_report_table(&report))?;
    inputs.push(a.run.config.clone());
    Provenance::new("eval", Some(cfg.seed), cfg.echo(out)).write(out, &inputs, &[json, txt])?;
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> anyhow::Result<()> {
    let loaded = load_checked(&a.manifest)?;
    let ds = &loaded.dataset;
    let name = match &a.dataset {
        Some(n) => n.clone(),
        None => a
            .manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
    };
    let plan = build_split(&name, &ds.class_names, &ds.instance_counts())?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    let out = &a.out;
    create_out(out)?;
    let mut files = vec![
        out.join(persist::SPLIT_FILE),
        out.join(persist::TASK_T1_FILE),
        out.join(persist::TASK_T2_FILE),
    ];
    write_json(&files[0], &plan)?;
    write_json(&files[1], &plan.task(Stage::T1))?;
    write_json(&files[2], &plan.task(Stage::T2))?;
    if let Some(shots) = a.shots {
        let seed = a.seed.expect("clap enforces --seed with --shots");
        let picked = sample_shots(&ds.annotations(), &plan, shots, seed)?;
        let f = out.join(persist::SHOTS_FILE);
        write_json(&f, &picked)?;
        files.push(f);
    }
    let config = serde_json::json!({ "dataset": name, "shots": a.shots });
    Provenance::new("split", a.seed, config).write(
        out,
        &manifest_inputs(&a.manifest, &loaded),
        &files,
    )?;
    Ok(())
}

fn cmd_prompts(a: &PromptsArgs) -> anyhow::Result<()> {
    let mut inputs = Vec::new();
    let classes = match &a.manifest {
        Some(m) => {
            let manifest = crate::manifest::parse_manifest(m)?;
            inputs.push(m.clone());
            manifest.class_names
        }
        None => a.classes.clone(),
    };
    let categories = if a.categories.is_empty() {
        Category::DEFAULT.to_vec()
    } else {
        a.categories.clone()
    };
    let request = render_llm_requests(&classes, &categories)?;
    create_out(&a.out)?;
    let f = a.out.join(persist::PROMPTS_FILE);
    write_json(&f, &request)?;
    let cats: Vec<&str> = categories.iter().map(|c| c.as_str()).collect();
    let config = serde_json::json!({ "classes": classes, "categories": cats });
    Provenance::new("prompts", None, config).write(&a.out, &inputs, &[f])?;
    Ok(())
}

/// Parsed LLM answers as delivered by the extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseFile {
    pub responses: Vec<AttributeResponse>,
}

/// The attribute catalog plus the text-encoder prompt for each entry, in
/// row order of the attribute embedding tensor the extractor produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogFile {
    pub entries: Vec<AttributeEntry>,
    pub prompts: Vec<String>,
}

fn cmd_ingest(a: &IngestArgs) -> anyhow::Result<()> {
    let file: ResponseFile = read_json(&a.responses)?;
    let catalog = ingest_attribute_responses(&file.responses)?;
    let doc = CatalogFile {
        prompts: catalog.prompts()?,
        entries: catalog.entries,
    };
    create_out(&a.out)?;
    let f = a.out.join(persist::CATALOG_FILE);
    write_json(&f, &doc)?;
    Provenance::new("ingest", None, serde_json::json!({})).write(
        &a.out,
        std::slice::from_ref(&a.responses),
        &[f],
    )?;
    Ok(())
}

/// File names inside a synthetic benchmark directory.
pub mod synth_files {
    pub const TRAIN: &str = "train.json";
    pub const TEST: &str = "test.json";
    pub const ATTRIBUTES: &str = "attribute_embeddings.fomo";
    pub const CLASS_TEXT: &str = "class_text.fomo";
    pub const GENERIC: &str = "generic_text.fomo";
    pub const GT_NAMES: &str = "names_gt.json";
    pub const GT_EMBEDDINGS: &str = "names_gt.fomo";
    pub const VOCAB_NAMES: &str = "names_imagenet.json";
    pub const VOCAB_EMBEDDINGS: &str = "names_imagenet.fomo";
    pub const TRUTH: &str = "truth.json";
    pub const PARAMS: &str = "params.json";
    pub const CONFIG: &str = "config.json";
}

fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    use synth_files as sf;
    let mut inputs = Vec::new();
    let mut params: WorldParams = match &a.params {
        Some(p) => {
            inputs.push(p.clone());
            read_json(p)?
        }
        None => WorldParams::default(),
    };
    if let Some(s) = a.seed {
        params.seed = s;
    }
    let world = generate_world(&params)?;
    let out = &a.out;
    create_out(out)?;
    let mut files = write_dataset(out, "train", &world.train, Some(sf::ATTRIBUTES))?;
    files.extend(write_dataset(out, "test", &world.test, None)?);
    let put = |name: &str, m: &Matrix| -> anyhow::Result<PathBuf> {
        let p = out.join(name);
        tensorio::write_matrix(&p, m)?;
        Ok(p)
    };
    files.push(put(sf::ATTRIBUTES, &world.attribute_embeddings)?);
    files.push(put(sf::CLASS_TEXT, &world.class_text)?);
    let generic = out.join(sf::GENERIC);
    tensorio::write_vector(&generic, &world.generic)?;
    files.push(generic);
    let unknown_names: Vec<String> = world
        .truth
        .unknown
        .iter()
        .map(|&c| world.train.class_names[c].clone())
        .collect();
    files.push(put(
        sf::GT_EMBEDDINGS,
        &world.class_text.select_rows(&world.truth.unknown),
    )?);
    files.push(put(sf::VOCAB_EMBEDDINGS, &world.vocab)?);
    for (name, value) in [
        (sf::GT_NAMES, serde_json::to_value(&unknown_names)?),
        (sf::VOCAB_NAMES, serde_json::to_value(&world.vocab_names)?),
        (sf::TRUTH, serde_json::to_value(&world.truth)?),
        (sf::PARAMS, serde_json::to_value(&world.params)?),
    ] {
        let p = out.join(name);
        write_json(&p, &value)?;
        files.push(p);
    }
    let t1 = TaskSpec::T1 {
        known: world.truth.known.clone(),
        unknown: world.truth.unknown.clone(),
    };
    let t2 = TaskSpec::T2 {
        prev_known: world.truth.known.clone(),
        curr_known: world.truth.unknown.clone(),
    };
    for (name, task) in [(persist::TASK_T1_FILE, &t1), (persist::TASK_T2_FILE, &t2)] {
        let p = out.join(name);
        write_json(&p, task)?;
        files.push(p);
    }
    let config = serde_json::json!({
        "seed": world.params.seed,
        "paths": {
            "train_manifest": sf::TRAIN,
            "test_manifest": sf::TEST,
            "tasks": { "t1": persist::TASK_T1_FILE, "t2": persist::TASK_T2_FILE },
            "class_text": sf::CLASS_TEXT,
            "generic_text": sf::GENERIC,
            "names": {
                "gt": { "names": sf::GT_NAMES, "embeddings": sf::GT_EMBEDDINGS },
                "imagenet": { "names": sf::VOCAB_NAMES, "embeddings": sf::VOCAB_EMBEDDINGS }
            }
        },
        "selection": { "n_hat": world.params.support }
    });
    // round-trip through the schema so the written config is complete
    let mut full: RunConfig = serde_json::from_value(config)?;
    full.selection.seed = world.params.seed;
    full.refinement.seed = world.params.seed;
    let p = out.join(sf::CONFIG);
    write_json(&p, &full)?;
    files.push(p);
    Provenance::new(
        "synth",
        Some(world.params.seed),
        serde_json::to_value(&world.params)?,
    )
    .write(out, &inputs, &files)?;
    Ok(())
}

/// Entry point shared by the binary and in-process tests.
pub fn main_with_args<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| anyhow!(e.to_string()))?;
    run(cli)
}
