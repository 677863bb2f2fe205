//! Progressive pre-training: pathway parsing, per-stage training with fresh
//! heads, bitwise adapter carryover between stages, and the Mix-Train
//! joint baseline.
//!
//! Stage i+1's adapter starts from stage i's persisted values (f32
//! checkpoint precision), so the carryover contract holds bitwise against
//! the saved snapshot. Heads are re-initialized every stage from seeds
//! derived from (run seed, stage index, family), and discarded afterward
//! except for persistence in that stage's checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph};
use crate::checkpoint::{save_meta, CheckpointMeta, ParamSet};
use crate::embeddings::{ClipKey, ClipStore};
use crate::labeling::{PseudoLabelRecord, StateType};
use crate::model::{self, multi_hot};
use crate::rng::{derive_seed, label_hash, StreamRng};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Semantic level a stage trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageLevel {
    Task,
    Step,
    State,
}

impl StageLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            StageLevel::Task => "task",
            StageLevel::Step => "step",
            StageLevel::State => "state",
        }
    }
}

/// One supervision family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    TaskVnm,
    StepVnm,
    StepNrlIn,
    StepNrlOut,
    StepTcl,
    StateVnm,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::TaskVnm,
        Family::StepVnm,
        Family::StepNrlIn,
        Family::StepNrlOut,
        Family::StepTcl,
        Family::StateVnm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::TaskVnm => "taskVNM",
            Family::StepVnm => "stepVNM",
            Family::StepNrlIn => "stepNRL-in",
            Family::StepNrlOut => "stepNRL-out",
            Family::StepTcl => "stepTCL",
            Family::StateVnm => "stateVNM",
        }
    }

    pub fn of_level(level: StageLevel) -> &'static [Family] {
        match level {
            StageLevel::Task => &[Family::TaskVnm],
            StageLevel::Step => &[
                Family::StepVnm,
                Family::StepNrlIn,
                Family::StepNrlOut,
                Family::StepTcl,
            ],
            StageLevel::State => &[Family::StateVnm],
        }
    }
}

/// Ordered training stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pathway {
    pub name: String,
    pub stages: Vec<StageLevel>,
}

/// Parse a preset name (`path1`..`path6`) or explicit comma/arrow-separated
/// levels (`task,step,state` or `task->step`).
pub fn parse_pathway(text: &str) -> Result<Pathway> {
    let norm = text.trim().to_lowercase().replace('-', "");
    let preset = |name: &str, levels: &[StageLevel]| Pathway {
        name: name.to_string(),
        stages: levels.to_vec(),
    };
    use StageLevel::{State, Step, Task};
    match norm.as_str() {
        "path1" => return Ok(preset("path1", &[Task])),
        "path2" => return Ok(preset("path2", &[Task, Step])),
        "path3" => return Ok(preset("path3", &[Task, Step, State])),
        "path4" => return Ok(preset("path4", &[Task, Step, State, Task])),
        "path5" => return Ok(preset("path5", &[Task, Step, State, Step])),
        "path6" => return Ok(preset("path6", &[Task, Step, State, Step, Task])),
        _ => {}
    }
    let mut stages = Vec::new();
    for part in text.replace("->", ",").split(',') {
        let part = part.trim().to_lowercase();
        let level = match part.as_str() {
            "task" => StageLevel::Task,
            "step" => StageLevel::Step,
            "state" => StageLevel::State,
            other => return Err(Error::Config(format!("unknown pathway level {other:?}"))),
        };
        stages.push(level);
    }
    if stages.is_empty() {
        return Err(Error::Config("empty pathway".into()));
    }
    Ok(Pathway { name: text.trim().to_lowercase(), stages })
}

/// Classification space sizes per family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelDims {
    pub task_nodes: usize,
    pub step_nodes: usize,
    /// before / mid / after node counts.
    pub state_nodes: [usize; 3],
}

impl LabelDims {
    pub fn state_total(&self) -> usize {
        self.state_nodes.iter().sum()
    }

    fn family_dim(&self, family: Family) -> usize {
        match family {
            Family::TaskVnm => self.task_nodes,
            Family::StepVnm | Family::StepNrlIn | Family::StepNrlOut | Family::StepTcl => {
                self.step_nodes
            }
            Family::StateVnm => self.state_total(),
        }
    }

    fn state_offset(&self, ty: StateType) -> usize {
        match ty {
            StateType::Before => 0,
            StateType::Mid => self.state_nodes[0],
            StateType::After => self.state_nodes[0] + self.state_nodes[1],
        }
    }
}

/// How stateVNM logits are headed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateHeadMode {
    /// One head over the union of the three type spaces, loss masked to the
    /// record's own type block.
    #[default]
    Union,
    /// Three per-type heads, each trained on its type's records only.
    PerType,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub state_head: StateHeadMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 256,
            optimizer: AdamConfig::default(),
            state_head: StateHeadMode::Union,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub stage: usize,
    pub level: String,
    pub epoch: usize,
    pub total_loss: f64,
    pub family_loss: BTreeMap<String, f64>,
}

pub struct StageOutcome {
    pub adapter: ParamSet,
    pub heads: ParamSet,
    pub optimizer: ParamSet,
    pub optimizer_steps: u64,
    pub metrics: Vec<EpochMetrics>,
}

fn adapter_seed(seed: u64) -> u64 {
    derive_seed(seed, &[label_hash("adapter")])
}

fn head_seed(seed: u64, stage: usize, family_tag: &str) -> u64 {
    derive_seed(seed, &[label_hash("head"), stage as u64, label_hash(family_tag)])
}

fn shuffle_seed(seed: u64, stage: usize, epoch: usize) -> u64 {
    derive_seed(seed, &[label_hash("shuffle"), stage as u64, epoch as u64])
}

/// Freshly initialized adapter for stage 0 of a run.
pub fn initial_adapter(seed: u64, d_in: usize, d_hidden: usize) -> ParamSet {
    let mut params = ParamSet::new();
    let mut rng = StreamRng::new(adapter_seed(seed));
    model::init_adapter(&mut params, &mut rng, "adapter", d_in, d_hidden);
    params
}

fn head_prefixes(family: Family, stage: usize, mode: StateHeadMode) -> Vec<(String, StateHeadSlot)> {
    if family == Family::StateVnm && mode == StateHeadMode::PerType {
        StateType::ALL
            .iter()
            .map(|ty| {
                (
                    format!("head.{}-{}.{stage}", family.label(), ty.as_str()),
                    StateHeadSlot::Type(*ty),
                )
            })
            .collect()
    } else {
        vec![(format!("head.{}.{stage}", family.label()), StateHeadSlot::Whole)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StateHeadSlot {
    Whole,
    Type(StateType),
}

struct FamilyHead {
    family: Family,
    weight: f64,
    prefix: String,
    slot: StateHeadSlot,
    d_out: usize,
}

/// Train one stage: fresh heads over a carried-over adapter, all family
/// losses summed, one Adam optimizer over everything.
///
/// `weights` scales each family's loss; weight-0 families are skipped
/// entirely (no head, no loss term), which makes a degenerate Mix-Train
/// bitwise equal to the corresponding single-family stage.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    families: &[(Family, f64)],
    level: StageLevel,
    stage_index: usize,
    adapter_in: &ParamSet,
    records: &[PseudoLabelRecord],
    store: &ClipStore,
    dims: LabelDims,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StageOutcome> {
    if records.is_empty() {
        return Err(Error::MissingData("no pseudo-label records to train on".into()));
    }
    let d_in = store.dim();
    let mut features = Vec::with_capacity(records.len());
    for r in records {
        let key = ClipKey { video: r.video, segment: r.segment };
        let f = store.feature(key).ok_or_else(|| {
            Error::MissingData(format!("no clip feature for labeled clip {key:?}"))
        })?;
        features.push(f);
    }

    let mut params = adapter_in.clone();
    let mut heads = Vec::new();
    for &(family, weight) in families {
        if weight == 0.0 {
            continue;
        }
        for (prefix, slot) in head_prefixes(family, stage_index, cfg.state_head) {
            let d_out = match slot {
                StateHeadSlot::Whole => dims.family_dim(family),
                StateHeadSlot::Type(ty) => dims.state_nodes[match ty {
                    StateType::Before => 0,
                    StateType::Mid => 1,
                    StateType::After => 2,
                }],
            };
            if d_out == 0 {
                return Err(Error::Config(format!(
                    "family {} has zero-sized label space",
                    family.label()
                )));
            }
            let mut rng = StreamRng::new(head_seed(seed, stage_index, &prefix));
            model::init_head(&mut params, &mut rng, &prefix, d_in, d_out);
            heads.push(FamilyHead { family, weight, prefix, slot, d_out });
        }
    }
    if heads.is_empty() {
        return Err(Error::Config("stage has no active label family".into()));
    }

    let mut adam = AdamState::new(cfg.optimizer.clone());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let n = records.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        StreamRng::new(shuffle_seed(seed, stage_index, epoch)).shuffle(&mut order);
        let mut family_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch.max(1)) {
            let mut g = Graph::new();
            let binding = model::bind(&mut g, &params);
            let mut x_data = Vec::with_capacity(batch.len() * d_in);
            for &i in batch {
                x_data.extend_from_slice(features[i]);
            }
            let x = g.constant(Tensor::matrix(batch.len(), d_in, x_data)?);
            let fv = model::adapter_forward(&mut g, &binding, "adapter", x)?;
            let mut total: Option<crate::autodiff::NodeId> = None;
            let mut batch_family: BTreeMap<String, f64> = BTreeMap::new();
            for head in &heads {
                let loss = head_loss(&mut g, &binding, head, fv, batch, records, dims, cfg)?;
                let Some(loss) = loss else { continue };
                let value = g.value(loss).item();
                *batch_family.entry(head.family.label().to_string()).or_insert(0.0) += value;
                let weighted = if head.weight == 1.0 {
                    loss
                } else {
                    g.scale(loss, head.weight)?
                };
                total = Some(match total {
                    None => weighted,
                    Some(t) => g.add(t, weighted)?,
                });
            }
            let total_node = total.ok_or_else(|| {
                Error::Config("batch produced no loss term".into())
            })?;
            g.backward(total_node)?;
            let grads = model::grads_of(&g, &binding);
            adam.step(&mut params, &grads)?;
            let bsz = batch.len() as f64;
            total_sum += g.value(total_node).item() * bsz;
            for (k, v) in batch_family {
                *family_sums.entry(k).or_insert(0.0) += v * bsz;
            }
            seen += batch.len();
        }
        let denom = seen.max(1) as f64;
        metrics.push(EpochMetrics {
            stage: stage_index,
            level: level.as_str().to_string(),
            epoch,
            total_loss: total_sum / denom,
            family_loss: family_sums.into_iter().map(|(k, v)| (k, v / denom)).collect(),
        });
    }

    let adapter_out = params.subset("adapter.");
    let heads_out = params.subset("head.");
    let mut optimizer = ParamSet::new();
    for name in params.names() {
        let shape = params.get(&name).unwrap().shape().to_vec();
        if let Some(m) = adam.moment_m(&name) {
            optimizer.insert(&format!("opt.m.{name}"), Tensor::new(shape.clone(), m.to_vec())?);
        }
        if let Some(v) = adam.moment_v(&name) {
            optimizer.insert(&format!("opt.v.{name}"), Tensor::new(shape, v.to_vec())?);
        }
    }
    Ok(StageOutcome {
        adapter: adapter_out,
        heads: heads_out,
        optimizer,
        optimizer_steps: adam.step_count(),
        metrics,
    })
}

/// Loss node for one head over one batch; None when the head's sub-batch is
/// empty (per-type state heads with no records of that type).
#[allow(clippy::too_many_arguments)]
fn head_loss(
    g: &mut Graph,
    binding: &model::Binding,
    head: &FamilyHead,
    fv: crate::autodiff::NodeId,
    batch: &[usize],
    records: &[PseudoLabelRecord],
    dims: LabelDims,
    cfg: &TrainConfig,
) -> Result<Option<crate::autodiff::NodeId>> {
    match head.slot {
        StateHeadSlot::Whole if head.family == Family::StateVnm => {
            let logits = model::head_forward(g, binding, &head.prefix, fv)?;
            let d = head.d_out;
            let mut targets = vec![0.0f64; batch.len() * d];
            let mut mask = vec![0.0f64; batch.len() * d];
            for (row, &i) in batch.iter().enumerate() {
                let r = &records[i];
                let off = dims.state_offset(r.state_type);
                let width = dims.state_nodes[match r.state_type {
                    StateType::Before => 0,
                    StateType::Mid => 1,
                    StateType::After => 2,
                }];
                for j in 0..width {
                    mask[row * d + off + j] = 1.0;
                }
                for &id in &r.state_vnm {
                    targets[row * d + off + id] = 1.0;
                }
            }
            let t = Tensor::matrix(batch.len(), d, targets)?;
            let m = Tensor::matrix(batch.len(), d, mask)?;
            Ok(Some(g.bce_with_logits_masked(logits, &t, &m)?))
        }
        StateHeadSlot::Type(ty) => {
            let rows: Vec<usize> = batch
                .iter()
                .enumerate()
                .filter(|(_, &i)| records[i].state_type == ty)
                .map(|(row, _)| row)
                .collect();
            if rows.is_empty() {
                return Ok(None);
            }
            let picked: Vec<crate::autodiff::NodeId> = rows
                .iter()
                .map(|&row| g.row(fv, row))
                .collect::<Result<_>>()?;
            let sub = g.concat(&picked)?;
            let logits = model::head_forward(g, binding, &head.prefix, sub)?;
            let d = head.d_out;
            let mut targets = vec![0.0f64; rows.len() * d];
            for (out_row, &row) in rows.iter().enumerate() {
                let r = &records[batch[row]];
                for &id in &r.state_vnm {
                    targets[out_row * d + id] = 1.0;
                }
            }
            let t = Tensor::matrix(rows.len(), d, targets)?;
            Ok(Some(g.bce_with_logits(logits, &t)?))
        }
        StateHeadSlot::Whole => {
            let logits = model::head_forward(g, binding, &head.prefix, fv)?;
            let d = head.d_out;
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let r = &records[i];
                let ids: &[usize] = match head.family {
                    Family::TaskVnm => &r.task_vnm,
                    Family::StepVnm => &r.step_vnm,
                    Family::StepNrlIn => &r.nrl_in,
                    Family::StepNrlOut => &r.nrl_out,
                    Family::StepTcl => &r.step_tcl,
                    Family::StateVnm => unreachable!(),
                };
                targets.push(multi_hot(ids, d));
            }
            let mut flat = Vec::with_capacity(batch.len() * d);
            for t in &targets {
                flat.extend_from_slice(t.data());
            }
            let t = Tensor::matrix(batch.len(), d, flat)?;
            let _ = cfg;
            Ok(Some(g.bce_with_logits(logits, &t)?))
        }
    }
}

pub fn stage_ckpt_path(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("ckpt.stage{stage}.tssckpt"))
}

pub fn mix_ckpt_path(dir: &Path) -> PathBuf {
    dir.join("ckpt.mix.tssckpt")
}

pub struct StageArtifact {
    pub ckpt_path: PathBuf,
    pub meta: CheckpointMeta,
}

/// Run every stage of a pathway, persisting one checkpoint per stage.
/// Returns the artifacts and all epoch metrics.
#[allow(clippy::too_many_arguments)]
pub fn run_pathway(
    pathway: &Pathway,
    records: &[PseudoLabelRecord],
    store: &ClipStore,
    dims: LabelDims,
    cfg: &TrainConfig,
    seed: u64,
    d_hidden: usize,
    out_dir: &Path,
) -> Result<(Vec<StageArtifact>, Vec<EpochMetrics>)> {
    let mut adapter = initial_adapter(seed, store.dim(), d_hidden);
    let mut artifacts = Vec::new();
    let mut all_metrics = Vec::new();
    for (i, &level) in pathway.stages.iter().enumerate() {
        let families: Vec<(Family, f64)> = Family::of_level(level)
            .iter()
            .map(|&f| (f, 1.0))
            .collect();
        let outcome = run_stage(
            &families, level, i, &adapter, records, store, dims, cfg, seed,
        )?;
        let path = stage_ckpt_path(out_dir, i);
        let mut full = outcome.adapter.clone();
        full.extend(&outcome.heads);
        full.extend(&outcome.optimizer);
        full.save(&path)?;
        let meta = CheckpointMeta {
            format_version: 1,
            pathway: pathway.name.clone(),
            stage_index: i,
            stage_level: level.as_str().to_string(),
            families: families.iter().map(|(f, _)| f.label().to_string()).collect(),
            epochs: cfg.epochs,
            seed,
            optimizer_steps: outcome.optimizer_steps,
        };
        save_meta(&path, &meta)?;
        artifacts.push(StageArtifact { ckpt_path: path, meta });
        all_metrics.extend(outcome.metrics);
        // carry the adapter forward at checkpoint precision
        adapter = outcome.adapter.quantized();
    }
    Ok((artifacts, all_metrics))
}

/// Joint baseline: one stage supervised by every family at once.
#[allow(clippy::too_many_arguments)]
pub fn run_mix_train(
    weights: &BTreeMap<String, f64>,
    records: &[PseudoLabelRecord],
    store: &ClipStore,
    dims: LabelDims,
    cfg: &TrainConfig,
    seed: u64,
    d_hidden: usize,
    out_dir: &Path,
) -> Result<(StageArtifact, Vec<EpochMetrics>)> {
    let mut families = Vec::new();
    for f in Family::ALL {
        let w = weights.get(f.label()).copied().unwrap_or(1.0);
        if w < 0.0 {
            return Err(Error::Config(format!("negative loss weight for {}", f.label())));
        }
        families.push((f, w));
    }
    let adapter = initial_adapter(seed, store.dim(), d_hidden);
    // level tag is informational here; mix-train spans all levels
    let outcome = run_stage(
        &families,
        StageLevel::Task,
        0,
        &adapter,
        records,
        store,
        dims,
        cfg,
        seed,
    )?;
    let path = mix_ckpt_path(out_dir);
    let mut full = outcome.adapter.clone();
    full.extend(&outcome.heads);
    full.extend(&outcome.optimizer);
    full.save(&path)?;
    let meta = CheckpointMeta {
        format_version: 1,
        pathway: "mix".into(),
        stage_index: 0,
        stage_level: "mix".into(),
        families: families
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(f, _)| f.label().to_string())
            .collect(),
        epochs: cfg.epochs,
        seed,
        optimizer_steps: outcome.optimizer_steps,
    };
    save_meta(&path, &meta)?;
    Ok((StageArtifact { ckpt_path: path, meta }, outcome.metrics))
}

pub fn save_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut body = String::new();
    for m in metrics {
        body.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        body.push('\n');
    }
    crate::artifact::write_atomic(path, body.as_bytes())
}
