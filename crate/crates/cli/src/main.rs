//! `tss`: reproducible driver for the task-step-state pipeline.
//!
//! Commands compose through file artifacts only: `synth` writes a corpus
//! directory, `build-kb` validates a knowledge base and fills in state
//! triples, `cluster` turns text stores into semantic node spaces,
//! `gen-labels` emits per-clip pseudo-labels, `pretrain` / `mix-train` fit
//! the bottleneck adapter, `fuse` merges pathway adapters into per-segment
//! features, `eval` fine-tunes a downstream head, and `report` prints the
//! accuracy table. Every command ends by writing a run manifest holding
//! sha256 hashes of the files it read and wrote.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
//! Errors print as one line: `tss: error[kind]: message`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tss_core::artifact::{sha256_bytes, RunManifest};
use tss_core::autodiff::AdamConfig;
use tss_core::checkpoint::{load_meta, ParamSet};
use tss_core::clustering::{build_node_space, NodeSpace, DEFAULT_THRESHOLD};
use tss_core::corpus::{attach_states, FileProvider, KnowledgeBase, StateProvider, TemplateStub};
use tss_core::curriculum::{
    parse_pathway, run_mix_train, run_pathway, save_metrics, Family, LabelDims, StateHeadMode,
    TrainConfig,
};
use tss_core::embeddings::{ids_path, ClipStore, Level, TextStore};
use tss_core::eval::{
    build_samples, class_maps, features_from_adapter, features_from_clips, features_from_fused,
    load_annotations, load_results, EvalConfig, FeatureMap, HeadKind, ResultRow, TaskKind,
};
use tss_core::fusion::{fuse_store, FuseMode, FusedStore};
use tss_core::labeling::{generate_all, load_labels, save_labels, LabelContext, StateType, DEFAULT_K};
use tss_core::model::MlpOrder;
use tss_core::synthetic::{self, corpus_paths, CorpusPaths, SynthSpec};
use tss_core::{Error, Result};

/// Adapter bottleneck width (feature dim -> this -> feature dim).
const DEFAULT_ADAPTER_HIDDEN: usize = 128;
const LABELS_FILE: &str = "labels.jsonl";
const METRICS_FILE: &str = "metrics.jsonl";
const RESULTS_FILE: &str = "results.jsonl";
const REPORT_FILE: &str = "report.txt";

#[derive(Parser)]
#[command(name = "tss", version, about = "Task-step-state procedural representation pipeline")]
struct Cli {
    /// Output root for default artifact paths (falls back to $TSS_OUT, then "tss-out").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted synthetic corpus.
    Synth(SynthArgs),
    /// Validate a knowledge base and attach state triples.
    BuildKb(BuildKbArgs),
    /// Cluster per-level texts into semantic node spaces.
    Cluster(ClusterArgs),
    /// Generate the five pseudo-label families for every clip.
    GenLabels(GenLabelsArgs),
    /// Pre-train the adapter along a staged pathway.
    Pretrain(PretrainArgs),
    /// Joint-training baseline supervised by all label families at once.
    MixTrain(MixTrainArgs),
    /// Fuse task/step/state adapters into per-segment features.
    Fuse(FuseArgs),
    /// Fine-tune a downstream head and append one result row.
    Eval(EvalArgs),
    /// Aggregate eval results into the accuracy table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus output directory (default <out>/corpus).
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Generation seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of tasks (default 20).
    #[arg(long)]
    tasks: Option<usize>,
    /// Ordered steps per task (default 5).
    #[arg(long)]
    steps_per_task: Option<usize>,
    /// Videos per task, one segment per step (default 10).
    #[arg(long)]
    clips_per_step: Option<usize>,
    /// Matching-space dimension (default 512).
    #[arg(long)]
    match_dim: Option<usize>,
    /// Clustering-space dimension (default 768).
    #[arg(long)]
    cluster_dim: Option<usize>,
    /// Clip noise scale (default 0.05).
    #[arg(long)]
    noise: Option<f64>,
    /// Step perturbation magnitude (default 1.0).
    #[arg(long)]
    step_scale: Option<f64>,
    /// State perturbation magnitude (default 0.5).
    #[arg(long)]
    state_scale: Option<f64>,
}

#[derive(Args)]
struct BuildKbArgs {
    /// Input knowledge-base JSONL (tasks and steps; states optional).
    #[arg(long)]
    input: PathBuf,
    /// Output knowledge-base JSONL (default <out>/kb.jsonl).
    #[arg(long)]
    output: Option<PathBuf>,
    /// State source when triples are missing: "template" or a JSONL file path.
    #[arg(long, default_value = "template")]
    states: String,
}

#[derive(Args)]
struct ClusterArgs {
    /// Corpus directory holding the per-level text stores (default <out>/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Node-space output directory (default <out>/nodes).
    #[arg(long)]
    nodes: Option<PathBuf>,
    /// Merge threshold on average-linkage cosine distance (default 0.09).
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct GenLabelsArgs {
    /// Corpus directory (default <out>/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Node-space directory from `cluster` (default <out>/nodes).
    #[arg(long)]
    nodes: Option<PathBuf>,
    /// Output labels JSONL (default <out>/labels.jsonl).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Top-k kept by the video-node-matching families (default 3).
    #[arg(long)]
    k: Option<usize>,
}

/// Flags shared by `pretrain` and `mix-train`. Every key of the JSON run
/// config file has a matching flag; flags override file values.
#[derive(Args)]
struct TrainFlags {
    /// JSON run-config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pseudo-label JSONL from gen-labels (default <out>/labels.jsonl).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Corpus directory with clip features (default <out>/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Node-space directory from cluster (default <out>/nodes).
    #[arg(long)]
    nodes: Option<PathBuf>,
    /// Checkpoint/metrics output directory.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Epochs per stage (default 10).
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size (default 256).
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate (default 1e-4).
    #[arg(long)]
    lr: Option<f64>,
    /// Adam weight decay (default 0).
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Root seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Adapter bottleneck width (default 128).
    #[arg(long)]
    d_hidden: Option<usize>,
    /// stateVNM head layout: union | per-type (default union).
    #[arg(long)]
    state_head: Option<String>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Stage sequence: path1..path6 or an explicit list like "task,step,state".
    #[arg(long)]
    pathway: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct MixTrainArgs {
    /// Per-family loss weight, e.g. --weight stepVNM=0.5 (repeatable; default 1).
    #[arg(long = "weight", value_name = "FAMILY=W")]
    weights: Vec<String>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct FuseArgs {
    /// Checkpoint providing the task-stage adapter.
    #[arg(long)]
    task_ckpt: PathBuf,
    /// Checkpoint providing the step-stage adapter.
    #[arg(long)]
    step_ckpt: PathBuf,
    /// Checkpoint providing the state-stage adapter.
    #[arg(long)]
    state_ckpt: PathBuf,
    /// Corpus directory with clip features (default <out>/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Fusion mode: concat | avgpool.
    #[arg(long, default_value = "concat")]
    mode: String,
    /// Output feature file (default <out>/fused.<mode>.tssfeat).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Feature source: raw | adapter | fused.
    #[arg(long, default_value = "adapter")]
    source: String,
    /// Adapter checkpoint (required when source = adapter).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Fused feature file (required when source = fused).
    #[arg(long)]
    fused: Option<PathBuf>,
    /// Corpus directory with clips and annotations (default <out>/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Downstream head: mlp | transformer.
    #[arg(long, default_value = "mlp")]
    head: String,
    /// Downstream task: tr | sr | sf.
    #[arg(long, default_value = "sr")]
    task: String,
    /// Row label in the results table (default derived from the source).
    #[arg(long)]
    name: Option<String>,
    /// Results JSONL, appended to (default <out>/results.jsonl).
    #[arg(long)]
    results: Option<PathBuf>,
    /// Fine-tuning seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Mini-batch size (default 16).
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate (default 1e-4).
    #[arg(long)]
    lr: Option<f64>,
    /// Adam weight decay (default 1e-3).
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Early-stop patience in epochs (default 50).
    #[arg(long)]
    patience: Option<usize>,
    /// Epoch cap (default 1000).
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Forecasting history window (default 16).
    #[arg(long)]
    max_history: Option<usize>,
    /// MLP layer order: literal | standard (default literal).
    #[arg(long)]
    mlp_order: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results JSONL from eval (default <out>/results.jsonl).
    #[arg(long)]
    results: Option<PathBuf>,
    /// Rendered table output file (default <out>/report.txt).
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code, msg) = match &e {
                Error::Config(s) => ("config", 2, s.clone()),
                Error::Numeric(s) => ("numeric", 4, s.clone()),
                other => ("data", 3, other.to_string()),
            };
            eprintln!("tss: error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = out_root(cli.out);
    match cli.command {
        Command::Synth(a) => cmd_synth(a, &root),
        Command::BuildKb(a) => cmd_build_kb(a, &root),
        Command::Cluster(a) => cmd_cluster(a, &root),
        Command::GenLabels(a) => cmd_gen_labels(a, &root),
        Command::Pretrain(a) => cmd_pretrain(a, &root),
        Command::MixTrain(a) => cmd_mix_train(a, &root),
        Command::Fuse(a) => cmd_fuse(a, &root),
        Command::Eval(a) => cmd_eval(a, &root),
        Command::Report(a) => cmd_report(a, &root),
    }
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("TSS_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("tss-out"))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn manifest_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("manifest.{tag}.json"))
}

fn config_hash(config: &serde_json::Value) -> String {
    sha256_bytes(config.to_string().as_bytes())
}

/// Record every regular file in `dir` as an output, except manifests.
fn record_dir_outputs(m: &mut RunManifest, dir: &Path) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_file() && !name.starts_with("manifest.") {
            paths.push(path);
        }
    }
    paths.sort();
    for p in &paths {
        m.record_output(p)?;
    }
    Ok(())
}

/// Record a feature file plus its ids sidecar as inputs.
fn record_feature_input(m: &mut RunManifest, path: &Path) -> Result<()> {
    m.record_input(path)?;
    m.record_input(&ids_path(path))
}

fn text_store_files(base: &Path) -> [PathBuf; 2] {
    [suffixed(base, ".match.tssfeat"), suffixed(base, ".cluster.tssfeat")]
}

fn space_files(base: &Path) -> (PathBuf, PathBuf) {
    (suffixed(base, ".nodes.jsonl"), suffixed(base, ".centroids.tssfeat"))
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    base.with_file_name(name)
}

fn record_text_store_inputs(m: &mut RunManifest, base: &Path) -> Result<()> {
    for f in text_store_files(base) {
        record_feature_input(m, &f)?;
    }
    Ok(())
}

fn record_space_inputs(m: &mut RunManifest, base: &Path) -> Result<()> {
    let (members, centroids) = space_files(base);
    m.record_input(&members)?;
    record_feature_input(m, &centroids)
}

fn space_base(dir: &Path, level: Level) -> PathBuf {
    let name = match level {
        Level::Task => "nodes.task",
        Level::Step => "nodes.step",
        Level::StateBefore => "nodes.state_b",
        Level::StateMid => "nodes.state_m",
        Level::StateAfter => "nodes.state_a",
    };
    dir.join(name)
}

fn load_texts(paths: &CorpusPaths) -> Result<(TextStore, TextStore, BTreeMap<StateType, TextStore>)> {
    let task = TextStore::load(&paths.task_texts, Level::Task)?;
    let step = TextStore::load(&paths.step_texts, Level::Step)?;
    let mut states = BTreeMap::new();
    for (ty, base) in StateType::ALL.iter().zip(&paths.state_texts) {
        states.insert(*ty, TextStore::load(base, ty.level())?);
    }
    Ok((task, step, states))
}

fn load_spaces(dir: &Path) -> Result<(NodeSpace, NodeSpace, BTreeMap<StateType, NodeSpace>)> {
    let task = NodeSpace::load(&space_base(dir, Level::Task))?;
    let step = NodeSpace::load(&space_base(dir, Level::Step))?;
    let mut states = BTreeMap::new();
    for ty in StateType::ALL {
        states.insert(ty, NodeSpace::load(&space_base(dir, ty.level()))?);
    }
    Ok((task, step, states))
}

fn label_dims(task: &NodeSpace, step: &NodeSpace, states: &BTreeMap<StateType, NodeSpace>) -> LabelDims {
    LabelDims {
        task_nodes: task.node_count,
        step_nodes: step.node_count,
        state_nodes: [
            states[&StateType::Before].node_count,
            states[&StateType::Mid].node_count,
            states[&StateType::After].node_count,
        ],
    }
}

fn parse_state_head(text: &str) -> Result<StateHeadMode> {
    match text.trim().to_lowercase().replace('-', "").as_str() {
        "union" => Ok(StateHeadMode::Union),
        "pertype" => Ok(StateHeadMode::PerType),
        other => Err(Error::Config(format!("unknown state-head mode {other:?}"))),
    }
}

fn parse_mlp_order(text: &str) -> Result<MlpOrder> {
    match text.trim().to_lowercase().as_str() {
        "literal" => Ok(MlpOrder::Literal),
        "standard" => Ok(MlpOrder::Standard),
        other => Err(Error::Config(format!("unknown mlp order {other:?}"))),
    }
}

fn cmd_synth(a: SynthArgs, root: &Path) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_tasks: a.tasks.unwrap_or(d.n_tasks),
        steps_per_task: a.steps_per_task.unwrap_or(d.steps_per_task),
        clips_per_step: a.clips_per_step.unwrap_or(d.clips_per_step),
        match_dim: a.match_dim.unwrap_or(d.match_dim),
        cluster_dim: a.cluster_dim.unwrap_or(d.cluster_dim),
        noise: a.noise.unwrap_or(d.noise),
        step_scale: a.step_scale.unwrap_or(d.step_scale),
        state_scale: a.state_scale.unwrap_or(d.state_scale),
        seed: a.seed.unwrap_or(d.seed),
    };
    let dir = a.dir.unwrap_or_else(|| root.join("corpus"));
    let corpus = synthetic::generate(&spec)?;
    corpus.save(&dir)?;
    let config = serde_json::json!({"spec": spec, "dir": dir.display().to_string()});
    let mut m = RunManifest::new("synth", &config_hash(&config), spec.seed);
    record_dir_outputs(&mut m, &dir)?;
    m.save(&manifest_path(&dir, "synth"))?;
    println!(
        "synth: {} clips, {} tasks, {} steps -> {}",
        spec.clip_count(),
        spec.n_tasks,
        spec.n_tasks * spec.steps_per_task,
        dir.display()
    );
    Ok(())
}

fn cmd_build_kb(a: BuildKbArgs, root: &Path) -> Result<()> {
    let output = a.output.unwrap_or_else(|| root.join("kb.jsonl"));
    ensure_parent(&output)?;
    let base = KnowledgeBase::load(&a.input)?;
    let states_file = match a.states.trim() {
        "template" => None,
        path => Some(PathBuf::from(path)),
    };
    let complete = base.require_states().is_ok();
    let kb = if complete {
        base
    } else {
        let provider: Box<dyn StateProvider> = match &states_file {
            None => Box::new(TemplateStub),
            Some(p) => Box::new(FileProvider::open(p)?),
        };
        attach_states(base, provider.as_ref())?
    };
    kb.require_states()?;
    kb.save(&output)?;
    let config = serde_json::json!({
        "input": a.input.display().to_string(),
        "output": output.display().to_string(),
        "states": a.states,
    });
    let mut m = RunManifest::new("build-kb", &config_hash(&config), 0);
    m.record_input(&a.input)?;
    if let Some(p) = &states_file {
        if !complete {
            m.record_input(p)?;
        }
    }
    m.record_output(&output)?;
    let dir = output.parent().unwrap_or(Path::new("."));
    m.save(&manifest_path(dir, "build-kb"))?;
    println!(
        "build-kb: {} tasks, {} steps, {} state triples -> {}",
        kb.tasks.len(),
        kb.steps.len(),
        kb.states.len(),
        output.display()
    );
    Ok(())
}

fn cmd_cluster(a: ClusterArgs, root: &Path) -> Result<()> {
    let corpus_dir = a.corpus.unwrap_or_else(|| root.join("corpus"));
    let nodes_dir = a.nodes.unwrap_or_else(|| root.join("nodes"));
    let threshold = a.threshold.unwrap_or(DEFAULT_THRESHOLD);
    ensure_dir(&nodes_dir)?;
    let paths = corpus_paths(&corpus_dir);
    let (task_texts, step_texts, state_texts) = load_texts(&paths)?;
    let config = serde_json::json!({
        "corpus": corpus_dir.display().to_string(),
        "nodes": nodes_dir.display().to_string(),
        "threshold": threshold,
    });
    let mut m = RunManifest::new("cluster", &config_hash(&config), 0);
    record_text_store_inputs(&mut m, &paths.task_texts)?;
    record_text_store_inputs(&mut m, &paths.step_texts)?;
    for base in &paths.state_texts {
        record_text_store_inputs(&mut m, base)?;
    }
    let mut summary = Vec::new();
    let mut build = |level: Level, texts: &TextStore| -> Result<()> {
        let space = build_node_space(level, texts, threshold)?;
        space.save(&space_base(&nodes_dir, level))?;
        summary.push(format!("{}: {} nodes / {} texts", level.as_str(), space.node_count, texts.len()));
        Ok(())
    };
    build(Level::Task, &task_texts)?;
    build(Level::Step, &step_texts)?;
    for ty in StateType::ALL {
        build(ty.level(), &state_texts[&ty])?;
    }
    record_dir_outputs(&mut m, &nodes_dir)?;
    m.save(&manifest_path(&nodes_dir, "cluster"))?;
    for line in summary {
        println!("cluster: {line}");
    }
    Ok(())
}

fn cmd_gen_labels(a: GenLabelsArgs, root: &Path) -> Result<()> {
    let corpus_dir = a.corpus.unwrap_or_else(|| root.join("corpus"));
    let nodes_dir = a.nodes.unwrap_or_else(|| root.join("nodes"));
    let output = a.output.unwrap_or_else(|| root.join(LABELS_FILE));
    let k = a.k.unwrap_or(DEFAULT_K);
    ensure_parent(&output)?;
    let paths = corpus_paths(&corpus_dir);
    let kb = KnowledgeBase::load(&paths.kb)?;
    let store = ClipStore::load(&paths.clips)?;
    let (task_texts, step_texts, state_texts) = load_texts(&paths)?;
    let (task_space, step_space, state_spaces) = load_spaces(&nodes_dir)?;
    let ctx = LabelContext {
        base: &kb,
        task_space: &task_space,
        step_space: &step_space,
        state_spaces: &state_spaces,
        task_texts: &task_texts,
        step_texts: &step_texts,
        state_texts: &state_texts,
    };
    let records = generate_all(&store, &ctx, k)?;
    save_labels(&output, &records, k)?;
    let config = serde_json::json!({
        "corpus": corpus_dir.display().to_string(),
        "nodes": nodes_dir.display().to_string(),
        "output": output.display().to_string(),
        "k": k,
    });
    let mut m = RunManifest::new("gen-labels", &config_hash(&config), 0);
    m.record_input(&paths.kb)?;
    record_feature_input(&mut m, &paths.clips)?;
    record_text_store_inputs(&mut m, &paths.task_texts)?;
    record_text_store_inputs(&mut m, &paths.step_texts)?;
    for base in &paths.state_texts {
        record_text_store_inputs(&mut m, base)?;
    }
    for level in Level::ALL {
        record_space_inputs(&mut m, &space_base(&nodes_dir, level))?;
    }
    m.record_output(&output)?;
    let dir = output.parent().unwrap_or(Path::new("."));
    m.save(&manifest_path(dir, "gen-labels"))?;
    println!("gen-labels: {} clips labeled (k={k}) -> {}", records.len(), output.display());
    Ok(())
}

/// Resolved training settings: flag > config file > default.
#[derive(Debug)]
struct TrainSettings {
    labels: PathBuf,
    corpus: PathBuf,
    nodes: PathBuf,
    dir: Option<PathBuf>,
    cfg: TrainConfig,
    seed: u64,
    d_hidden: usize,
    pathway: Option<String>,
    weights: BTreeMap<String, f64>,
}

/// JSON run-config file schema; every key has a matching CLI flag.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    pathway: Option<String>,
    labels: Option<PathBuf>,
    corpus: Option<PathBuf>,
    nodes: Option<PathBuf>,
    dir: Option<PathBuf>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    seed: Option<u64>,
    d_hidden: Option<usize>,
    state_head: Option<String>,
    weights: Option<BTreeMap<String, f64>>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn known_family(label: &str) -> bool {
    Family::ALL.iter().any(|f| f.label() == label)
}

fn resolve_train(
    flags: TrainFlags,
    pathway_flag: Option<String>,
    weight_flags: &[String],
    root: &Path,
) -> Result<TrainSettings> {
    let file = load_file_config(flags.config.as_deref())?;
    let base = TrainConfig::default();
    let adam = AdamConfig::default();
    let state_head = match flags.state_head.or(file.state_head) {
        Some(s) => parse_state_head(&s)?,
        None => StateHeadMode::Union,
    };
    let mut weights = file.weights.unwrap_or_default();
    for w in weight_flags {
        let (label, value) = w
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("loss weight {w:?} is not FAMILY=W")))?;
        let value: f64 = value
            .parse()
            .map_err(|e| Error::Config(format!("loss weight {w:?}: {e}")))?;
        weights.insert(label.to_string(), value);
    }
    for label in weights.keys() {
        if !known_family(label) {
            return Err(Error::Config(format!("unknown label family {label:?}")));
        }
    }
    Ok(TrainSettings {
        labels: flags.labels.or(file.labels).unwrap_or_else(|| root.join(LABELS_FILE)),
        corpus: flags.corpus.or(file.corpus).unwrap_or_else(|| root.join("corpus")),
        nodes: flags.nodes.or(file.nodes).unwrap_or_else(|| root.join("nodes")),
        dir: flags.dir.or(file.dir),
        cfg: TrainConfig {
            epochs: flags.epochs.or(file.epochs).unwrap_or(base.epochs),
            batch: flags.batch.or(file.batch).unwrap_or(base.batch),
            optimizer: AdamConfig {
                lr: flags.lr.or(file.lr).unwrap_or(adam.lr),
                weight_decay: flags.weight_decay.or(file.weight_decay).unwrap_or(adam.weight_decay),
                ..adam
            },
            state_head,
        },
        seed: flags.seed.or(file.seed).unwrap_or(0),
        d_hidden: flags.d_hidden.or(file.d_hidden).unwrap_or(DEFAULT_ADAPTER_HIDDEN),
        pathway: pathway_flag.or(file.pathway),
        weights,
    })
}

fn state_head_str(mode: StateHeadMode) -> &'static str {
    match mode {
        StateHeadMode::Union => "union",
        StateHeadMode::PerType => "per-type",
    }
}

fn train_config_json(s: &TrainSettings, command: &str) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "pathway": s.pathway,
        "labels": s.labels.display().to_string(),
        "corpus": s.corpus.display().to_string(),
        "nodes": s.nodes.display().to_string(),
        "epochs": s.cfg.epochs,
        "batch": s.cfg.batch,
        "lr": s.cfg.optimizer.lr,
        "weight_decay": s.cfg.optimizer.weight_decay,
        "seed": s.seed,
        "d_hidden": s.d_hidden,
        "state_head": state_head_str(s.cfg.state_head),
        "weights": s.weights,
    })
}

/// Shared pretrain/mix-train loading: labels, clips, and label dims.
fn load_train_inputs(
    s: &TrainSettings,
    m: &mut RunManifest,
) -> Result<(Vec<tss_core::labeling::PseudoLabelRecord>, ClipStore, LabelDims)> {
    let (records, _k) = load_labels(&s.labels)?;
    let clips_path = corpus_paths(&s.corpus).clips;
    let store = ClipStore::load(&clips_path)?;
    let (task_space, step_space, state_spaces) = load_spaces(&s.nodes)?;
    let dims = label_dims(&task_space, &step_space, &state_spaces);
    m.record_input(&s.labels)?;
    record_feature_input(m, &clips_path)?;
    for level in Level::ALL {
        record_space_inputs(m, &space_base(&s.nodes, level))?;
    }
    Ok((records, store, dims))
}

fn cmd_pretrain(a: PretrainArgs, root: &Path) -> Result<()> {
    let s = resolve_train(a.train, a.pathway, &[], root)?;
    let Some(pathway_text) = s.pathway.clone() else {
        return Err(Error::Config("no pathway given (flag --pathway or config file)".into()));
    };
    let pathway = parse_pathway(&pathway_text)?;
    let dir = s
        .dir
        .clone()
        .unwrap_or_else(|| root.join(format!("pretrain.{}", pathway.name)));
    ensure_dir(&dir)?;
    let config = train_config_json(&s, "pretrain");
    let mut m = RunManifest::new("pretrain", &config_hash(&config), s.seed);
    let (records, store, dims) = load_train_inputs(&s, &mut m)?;
    let (artifacts, metrics) =
        run_pathway(&pathway, &records, &store, dims, &s.cfg, s.seed, s.d_hidden, &dir)?;
    save_metrics(&dir.join(METRICS_FILE), &metrics)?;
    record_dir_outputs(&mut m, &dir)?;
    m.save(&manifest_path(&dir, "pretrain"))?;
    for art in &artifacts {
        let last = metrics
            .iter()
            .filter(|e| e.stage == art.meta.stage_index)
            .last();
        let loss = last.map_or(f64::NAN, |e| e.total_loss);
        println!(
            "pretrain: stage {} [{}] loss {:.6} -> {}",
            art.meta.stage_index,
            art.meta.stage_level,
            loss,
            art.ckpt_path.display()
        );
    }
    Ok(())
}

fn cmd_mix_train(a: MixTrainArgs, root: &Path) -> Result<()> {
    let s = resolve_train(a.train, None, &a.weights, root)?;
    let dir = s.dir.clone().unwrap_or_else(|| root.join("mix"));
    ensure_dir(&dir)?;
    let config = train_config_json(&s, "mix-train");
    let mut m = RunManifest::new("mix-train", &config_hash(&config), s.seed);
    let (records, store, dims) = load_train_inputs(&s, &mut m)?;
    let (artifact, metrics) =
        run_mix_train(&s.weights, &records, &store, dims, &s.cfg, s.seed, s.d_hidden, &dir)?;
    save_metrics(&dir.join(METRICS_FILE), &metrics)?;
    record_dir_outputs(&mut m, &dir)?;
    m.save(&manifest_path(&dir, "mix-train"))?;
    let loss = metrics.last().map_or(f64::NAN, |e| e.total_loss);
    println!("mix-train: loss {:.6} -> {}", loss, artifact.ckpt_path.display());
    Ok(())
}

fn cmd_fuse(a: FuseArgs, root: &Path) -> Result<()> {
    let mode = FuseMode::parse(&a.mode)?;
    let corpus_dir = a.corpus.unwrap_or_else(|| root.join("corpus"));
    let output = a
        .output
        .unwrap_or_else(|| root.join(format!("fused.{}.tssfeat", mode.as_str())));
    ensure_parent(&output)?;
    let clips_path = corpus_paths(&corpus_dir).clips;
    let store = ClipStore::load(&clips_path)?;
    let task_params = ParamSet::load(&a.task_ckpt)?;
    let step_params = ParamSet::load(&a.step_ckpt)?;
    let state_params = ParamSet::load(&a.state_ckpt)?;
    let fused = fuse_store(&task_params, &step_params, &state_params, &store, mode)?;
    fused.save(&output)?;
    let config = serde_json::json!({
        "task_ckpt": a.task_ckpt.display().to_string(),
        "step_ckpt": a.step_ckpt.display().to_string(),
        "state_ckpt": a.state_ckpt.display().to_string(),
        "corpus": corpus_dir.display().to_string(),
        "mode": mode.as_str(),
        "output": output.display().to_string(),
    });
    let mut m = RunManifest::new("fuse", &config_hash(&config), 0);
    for ckpt in [&a.task_ckpt, &a.step_ckpt, &a.state_ckpt] {
        m.record_input(ckpt)?;
    }
    record_feature_input(&mut m, &clips_path)?;
    m.record_output(&output)?;
    m.record_output(&ids_path(&output))?;
    let dir = output.parent().unwrap_or(Path::new("."));
    m.save(&manifest_path(dir, "fuse"))?;
    println!(
        "fuse: {} rows, dim {}, mode {} -> {}",
        fused.entries().len(),
        fused.dim(),
        mode.as_str(),
        output.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs, root: &Path) -> Result<()> {
    let corpus_dir = a.corpus.clone().unwrap_or_else(|| root.join("corpus"));
    let results = a.results.clone().unwrap_or_else(|| root.join(RESULTS_FILE));
    ensure_parent(&results)?;
    let paths = corpus_paths(&corpus_dir);
    let kind = TaskKind::parse(&a.task)?;
    let head = HeadKind::parse(&a.head)?;
    let adam = AdamConfig::default();
    let base = EvalConfig::default();
    let cfg = EvalConfig {
        head,
        batch: a.batch.unwrap_or(base.batch),
        optimizer: AdamConfig {
            lr: a.lr.unwrap_or(base.optimizer.lr),
            weight_decay: a.weight_decay.unwrap_or(base.optimizer.weight_decay),
            ..adam
        },
        patience: a.patience.unwrap_or(base.patience),
        max_epochs: a.max_epochs.unwrap_or(base.max_epochs),
        mlp_order: match &a.mlp_order {
            Some(s) => parse_mlp_order(s)?,
            None => base.mlp_order,
        },
        max_history: a.max_history.unwrap_or(base.max_history),
    };
    let seed = a.seed.unwrap_or(0);

    let annotations = load_annotations(&paths.annotations)?;
    let classes = class_maps(&annotations);
    let config = serde_json::json!({
        "source": a.source,
        "ckpt": a.ckpt.as_ref().map(|p| p.display().to_string()),
        "fused": a.fused.as_ref().map(|p| p.display().to_string()),
        "corpus": corpus_dir.display().to_string(),
        "head": head.as_str(),
        "task": kind.as_str(),
        "seed": seed,
        "batch": cfg.batch,
        "lr": cfg.optimizer.lr,
        "weight_decay": cfg.optimizer.weight_decay,
        "patience": cfg.patience,
        "max_epochs": cfg.max_epochs,
        "max_history": cfg.max_history,
    });
    let mut m = RunManifest::new("eval", &config_hash(&config), seed);
    m.record_input(&paths.annotations)?;

    let (features, default_name): (FeatureMap, String) = match a.source.trim() {
        "raw" => {
            let store = ClipStore::load(&paths.clips)?;
            record_feature_input(&mut m, &paths.clips)?;
            (features_from_clips(&store), "raw".into())
        }
        "adapter" => {
            let ckpt = a
                .ckpt
                .ok_or_else(|| Error::Config("--ckpt is required when source = adapter".into()))?;
            let params = ParamSet::load(&ckpt)?;
            let store = ClipStore::load(&paths.clips)?;
            m.record_input(&ckpt)?;
            record_feature_input(&mut m, &paths.clips)?;
            let name = match load_meta(&ckpt) {
                Ok(meta) => format!("{}.stage{}", meta.pathway, meta.stage_index),
                Err(_) => ckpt
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "adapter".into()),
            };
            (features_from_adapter(&params, &store)?, name)
        }
        "fused" => {
            let path = a
                .fused
                .ok_or_else(|| Error::Config("--fused is required when source = fused".into()))?;
            let fused = FusedStore::load(&path)?;
            record_feature_input(&mut m, &path)?;
            let name = format!("fused.{}", fused.mode.as_str());
            (features_from_fused(&fused), name)
        }
        other => return Err(Error::Config(format!("unknown feature source {other:?}"))),
    };
    let name = a.name.unwrap_or(default_name);

    let samples = build_samples(&features, &annotations, &classes, kind, cfg.max_history)?;
    let n_classes = match kind {
        TaskKind::Tr => classes.tasks.len(),
        TaskKind::Sr | TaskKind::Sf => classes.steps.len(),
    };
    let outcome = tss_core::eval::finetune_and_test(&samples, n_classes, kind, &cfg, seed)?;
    let row = ResultRow {
        features: name.clone(),
        head: head.as_str().into(),
        task: kind.as_str().into(),
        test_accuracy: outcome.test_accuracy,
        val_accuracy: outcome.val_accuracy,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        n_test: outcome.n_test,
    };
    tss_core::eval::append_result(&results, &row)?;
    m.record_output(&results)?;
    let dir = results.parent().unwrap_or(Path::new("."));
    m.save(&manifest_path(dir, &format!("eval.{}.{}.{}", name, row.head, row.task)))?;
    println!(
        "eval: {} {} {} test {:.4} val {:.4} (best epoch {} of {}, {} test samples)",
        name,
        row.head,
        row.task,
        row.test_accuracy,
        row.val_accuracy,
        row.best_epoch,
        row.epochs_run,
        row.n_test
    );
    Ok(())
}

/// Render the accuracy grid: one row per (features, head), columns TR/SR/SF,
/// cells in percent. The latest result line wins a cell. Returns the table
/// and the number of filled cells.
fn render_report(rows: &[ResultRow]) -> (String, usize) {
    let mut cells: BTreeMap<(String, String), BTreeMap<String, f64>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.features.clone(), r.head.clone()))
            .or_default()
            .insert(r.task.clone(), r.test_accuracy);
    }
    let fw = cells
        .keys()
        .map(|(f, _)| f.len())
        .chain(["features".len()])
        .max()
        .unwrap();
    let hw = cells
        .keys()
        .map(|(_, h)| h.len())
        .chain(["head".len()])
        .max()
        .unwrap();
    let mut out = format!("{:<fw$}  {:<hw$}  {:>6}  {:>6}  {:>6}\n", "features", "head", "TR", "SR", "SF");
    let mut filled = 0usize;
    for ((features, head), by_task) in &cells {
        out.push_str(&format!("{features:<fw$}  {head:<hw$}"));
        for task in ["tr", "sr", "sf"] {
            match by_task.get(task) {
                Some(acc) => {
                    out.push_str(&format!("  {:>6.2}", acc * 100.0));
                    filled += 1;
                }
                None => out.push_str(&format!("  {:>6}", "-")),
            }
        }
        out.push('\n');
    }
    (out, filled)
}

fn cmd_report(a: ReportArgs, root: &Path) -> Result<()> {
    let results = a.results.unwrap_or_else(|| root.join(RESULTS_FILE));
    let output = a.output.unwrap_or_else(|| root.join(REPORT_FILE));
    ensure_parent(&output)?;
    let rows = load_results(&results)?;
    let (table, filled) = render_report(&rows);
    tss_core::artifact::write_atomic(&output, table.as_bytes())?;
    let config = serde_json::json!({
        "results": results.display().to_string(),
        "output": output.display().to_string(),
    });
    let mut m = RunManifest::new("report", &config_hash(&config), 0);
    m.record_input(&results)?;
    m.record_output(&output)?;
    let dir = output.parent().unwrap_or(Path::new("."));
    m.save(&manifest_path(dir, "report"))?;
    print!("{table}");
    println!("{filled} accuracy cells");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn weight_flag_parsing() {
        let flags = TrainFlags {
            config: None,
            labels: None,
            corpus: None,
            nodes: None,
            dir: None,
            epochs: None,
            batch: None,
            lr: None,
            weight_decay: None,
            seed: None,
            d_hidden: None,
            state_head: None,
        };
        let s = resolve_train(
            flags,
            None,
            &["stepVNM=0.5".into(), "taskVNM=2".into()],
            Path::new("out"),
        )
        .unwrap();
        assert_eq!(s.weights["stepVNM"], 0.5);
        assert_eq!(s.weights["taskVNM"], 2.0);
    }

    #[test]
    fn weight_flag_rejects_unknown_family() {
        let flags = TrainFlags {
            config: None,
            labels: None,
            corpus: None,
            nodes: None,
            dir: None,
            epochs: None,
            batch: None,
            lr: None,
            weight_decay: None,
            seed: None,
            d_hidden: None,
            state_head: None,
        };
        let err = resolve_train(flags, None, &["bogus=1".into()], Path::new("out")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn config_file_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.json");
        fs::write(&cfg, r#"{"epochs": 3, "lr": 0.5, "pathway": "path2"}"#).unwrap();
        let flags = TrainFlags {
            config: Some(cfg),
            labels: None,
            corpus: None,
            nodes: None,
            dir: None,
            epochs: Some(7),
            batch: None,
            lr: None,
            weight_decay: None,
            seed: None,
            d_hidden: None,
            state_head: None,
        };
        let s = resolve_train(flags, None, &[], Path::new("out")).unwrap();
        assert_eq!(s.cfg.epochs, 7); // flag wins
        assert_eq!(s.cfg.optimizer.lr, 0.5); // file fills the gap
        assert_eq!(s.pathway.as_deref(), Some("path2"));
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.json");
        fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
        let flags = TrainFlags {
            config: Some(cfg),
            labels: None,
            corpus: None,
            nodes: None,
            dir: None,
            epochs: None,
            batch: None,
            lr: None,
            weight_decay: None,
            seed: None,
            d_hidden: None,
            state_head: None,
        };
        let err = resolve_train(flags, None, &[], Path::new("out")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn report_renders_grid_and_counts_cells() {
        let row = |f: &str, h: &str, t: &str, acc: f64| ResultRow {
            features: f.into(),
            head: h.into(),
            task: t.into(),
            test_accuracy: acc,
            val_accuracy: acc,
            best_epoch: 1,
            epochs_run: 1,
            n_test: 10,
        };
        let rows = vec![
            row("fused.concat", "mlp", "tr", 0.5),
            row("fused.concat", "mlp", "sr", 0.25),
            row("fused.concat", "transformer", "sf", 0.1),
            // later line overrides the first
            row("fused.concat", "mlp", "tr", 0.75),
        ];
        let (table, filled) = render_report(&rows);
        assert_eq!(filled, 3);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3); // header + 2 grid rows
        assert!(lines[1].contains("75.00"));
        assert!(lines[1].contains("25.00"));
        assert!(lines[2].contains("10.00"));
        assert!(lines[2].contains('-'));
    }

    #[test]
    fn out_root_precedence() {
        assert_eq!(out_root(Some(PathBuf::from("x"))), PathBuf::from("x"));
    }

    #[test]
    fn state_head_and_mlp_order_parsing() {
        assert_eq!(parse_state_head("union").unwrap(), StateHeadMode::Union);
        assert_eq!(parse_state_head("per-type").unwrap(), StateHeadMode::PerType);
        assert!(parse_state_head("three").is_err());
        assert!(matches!(parse_mlp_order("literal").unwrap(), MlpOrder::Literal));
        assert!(matches!(parse_mlp_order("standard").unwrap(), MlpOrder::Standard));
        assert!(parse_mlp_order("reverse").is_err());
    }
}
