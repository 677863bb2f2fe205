//! Planted-hierarchy synthetic corpus: tasks on the unit sphere, steps as
//! perturbed task prototypes, before/mid/after states as perturbed step
//! prototypes, and clips as noisy state prototypes. Everything is written
//! in the pipeline's own formats so each stage is testable end to end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::corpus::{KnowledgeBase, StateTriple};
use crate::embeddings::{ClipKey, ClipStore, Level, TextStore, TextVectors};
use crate::eval::{save_annotations, Annotation};
use crate::labeling::StateType;
use crate::rng::StreamRng;
use crate::{Error, Result};

pub const KB_FILE: &str = "kb.jsonl";
pub const CLIPS_FILE: &str = "clips.tssfeat";
pub const TASK_TEXT_BASE: &str = "texts.task";
pub const STEP_TEXT_BASE: &str = "texts.step";
pub const STATE_TEXT_BASES: [&str; 3] = ["texts.state_b", "texts.state_m", "texts.state_a"];
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_tasks: usize,
    pub steps_per_task: usize,
    /// Videos per task; video v enacts its task once, one segment per step.
    pub clips_per_step: usize,
    pub match_dim: usize,
    pub cluster_dim: usize,
    /// Gaussian noise scale added to each clip before renormalization.
    pub noise: f64,
    /// Magnitude of the step perturbation away from the task prototype.
    pub step_scale: f64,
    /// Magnitude of the state perturbation away from the step prototype.
    pub state_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_tasks: 20,
            steps_per_task: 5,
            clips_per_step: 10,
            match_dim: 512,
            cluster_dim: 768,
            noise: 0.05,
            step_scale: 1.0,
            state_scale: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_tasks", self.n_tasks),
            ("steps_per_task", self.steps_per_task),
            ("clips_per_step", self.clips_per_step),
            ("match_dim", self.match_dim),
            ("cluster_dim", self.cluster_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.noise < 0.0 {
            return Err(Error::Config(format!("noise must be ≥ 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn clip_count(&self) -> usize {
        self.n_tasks * self.steps_per_task * self.clips_per_step
    }
}

/// The generating (task, step, state) of one clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub video: u64,
    pub segment: u64,
    pub task: u64,
    pub step: u64,
    pub state: StateType,
}

pub struct SynthCorpus {
    pub kb: KnowledgeBase,
    pub clips: ClipStore,
    pub task_texts: TextStore,
    pub step_texts: TextStore,
    pub state_texts: BTreeMap<StateType, TextStore>,
    pub annotations: Vec<Annotation>,
    pub truth: Vec<TruthRecord>,
}

fn unit(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn perturb(rng: &mut StreamRng, base: &[f64], scale: f64) -> Vec<f64> {
    let dir = unit(rng, base.len());
    let mut v: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + scale * d).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = StreamRng::new(spec.seed);
    let (dm, dc) = (spec.match_dim, spec.cluster_dim);

    let mut kb = KnowledgeBase::default();
    let mut task_texts = BTreeMap::new();
    let mut step_texts = BTreeMap::new();
    let mut state_entries: BTreeMap<StateType, BTreeMap<u64, TextVectors>> =
        StateType::ALL.iter().map(|ty| (*ty, BTreeMap::new())).collect();
    // state prototypes in the match space, indexed [task][step][phase]
    let mut state_protos: Vec<Vec<[Vec<f64>; 3]>> = Vec::with_capacity(spec.n_tasks);

    for t in 0..spec.n_tasks {
        let task_id = t as u64;
        kb.insert_task(task_id, &format!("Procedure {t}"))?;
        let task_m = unit(&mut rng, dm);
        let task_c = unit(&mut rng, dc);
        task_texts.insert(task_id, TextVectors { match_vec: task_m.clone(), cluster_vec: task_c.clone() });
        let mut task_states = Vec::with_capacity(spec.steps_per_task);
        for j in 0..spec.steps_per_task {
            let step_id = (t * spec.steps_per_task + j) as u64;
            kb.insert_step(step_id, task_id, j, &format!("perform action {j} of procedure {t}"))?;
            let step_m = perturb(&mut rng, &task_m, spec.step_scale);
            let step_c = perturb(&mut rng, &task_c, spec.step_scale);
            step_texts.insert(step_id, TextVectors { match_vec: step_m.clone(), cluster_vec: step_c.clone() });
            kb.insert_state(StateTriple {
                step_id,
                before: format!("Setup for action {j} of procedure {t} is untouched."),
                mid: format!("Action {j} of procedure {t} is in progress."),
                after: format!("Action {j} of procedure {t} is complete."),
            })?;
            let mut phases: Vec<Vec<f64>> = Vec::with_capacity(3);
            for ty in StateType::ALL {
                let state_m = perturb(&mut rng, &step_m, spec.state_scale);
                let state_c = perturb(&mut rng, &step_c, spec.state_scale);
                state_entries.get_mut(&ty).unwrap().insert(
                    step_id,
                    TextVectors { match_vec: state_m.clone(), cluster_vec: state_c },
                );
                phases.push(state_m);
            }
            let [b, m, a]: [Vec<f64>; 3] = phases.try_into().expect("3 phases");
            task_states.push([b, m, a]);
        }
        state_protos.push(task_states);
    }
    // KnowledgeBase::from_parts re-validates; rebuild to populate step lists
    let kb = {
        let tasks = kb.tasks.values().map(|t| (t.task_id, t.title.clone())).collect();
        let steps = kb
            .steps
            .values()
            .map(|s| (s.step_id, s.task_id, s.order_index, s.headline.clone()))
            .collect();
        let states = kb.states.values().cloned().collect();
        KnowledgeBase::from_parts(tasks, steps, states)?
    };

    let mut entries = Vec::with_capacity(spec.clip_count());
    let mut annotations = Vec::with_capacity(spec.clip_count());
    let mut truth = Vec::with_capacity(spec.clip_count());
    for t in 0..spec.n_tasks {
        for r in 0..spec.clips_per_step {
            let video = (t * spec.clips_per_step + r) as u64;
            for j in 0..spec.steps_per_task {
                let phase = (r + j) % 3;
                let state = StateType::ALL[phase];
                let proto = &state_protos[t][j][phase];
                let mut row: Vec<f64> = proto
                    .iter()
                    .map(|p| p + spec.noise * rng.normal())
                    .collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Numeric("degenerate zero clip feature".into()));
                }
                for x in &mut row {
                    *x /= norm;
                }
                let segment = j as u64;
                let step_id = (t * spec.steps_per_task + j) as u64;
                entries.push((ClipKey { video, segment }, row));
                annotations.push(Annotation { video, segment, step: step_id, task: t as u64 });
                truth.push(TruthRecord { video, segment, task: t as u64, step: step_id, state });
            }
        }
    }
    annotations.sort_by_key(|a| (a.video, a.segment));
    truth.sort_by_key(|r| (r.video, r.segment));

    Ok(SynthCorpus {
        kb,
        clips: ClipStore::from_rows(dm, entries)?,
        task_texts: TextStore::new(Level::Task, task_texts)?,
        step_texts: TextStore::new(Level::Step, step_texts)?,
        state_texts: state_entries
            .into_iter()
            .map(|(ty, e)| Ok((ty, TextStore::new(ty.level(), e)?)))
            .collect::<Result<_>>()?,
        annotations,
        truth,
    })
}

pub fn save_truth(path: &Path, truth: &[TruthRecord]) -> Result<()> {
    let mut body = String::new();
    for r in truth {
        body.push_str(&serde_json::to_string(r).expect("truth serialize"));
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

pub fn load_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?,
        );
    }
    Ok(out)
}

/// Paths of the corpus files inside an output directory.
pub fn corpus_paths(dir: &Path) -> CorpusPaths {
    CorpusPaths {
        kb: dir.join(KB_FILE),
        clips: dir.join(CLIPS_FILE),
        task_texts: dir.join(TASK_TEXT_BASE),
        step_texts: dir.join(STEP_TEXT_BASE),
        state_texts: STATE_TEXT_BASES.map(|b| dir.join(b)),
        annotations: dir.join(ANNOTATIONS_FILE),
        truth: dir.join(TRUTH_FILE),
    }
}

pub struct CorpusPaths {
    pub kb: PathBuf,
    pub clips: PathBuf,
    pub task_texts: PathBuf,
    pub step_texts: PathBuf,
    /// before / mid / after text-store bases.
    pub state_texts: [PathBuf; 3],
    pub annotations: PathBuf,
    pub truth: PathBuf,
}

impl SynthCorpus {
    /// Write every piece in the pipeline's interchange formats.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = corpus_paths(dir);
        self.kb.save(&paths.kb)?;
        self.clips.save(&paths.clips)?;
        self.task_texts.save(&paths.task_texts)?;
        self.step_texts.save(&paths.step_texts)?;
        for (ty, base) in StateType::ALL.iter().zip(&paths.state_texts) {
            self.state_texts[ty].save(base)?;
        }
        save_annotations(&paths.annotations, &self.annotations)?;
        save_truth(&paths.truth, &self.truth)
    }
}
