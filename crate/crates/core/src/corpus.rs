//! The three-level knowledge base: tasks, ordered steps, per-step state
//! triples, plus the prompt that elicits state descriptions and the
//! pluggable providers that supply them.
//!
//! Interchange format is JSONL with tagged records:
//! `{"kind":"task",...}`, `{"kind":"step",...}`, `{"kind":"state",...}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskEntry {
    pub task_id: u64,
    pub title: String,
    /// Step ids in order_index order.
    pub step_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepEntry {
    pub step_id: u64,
    pub task_id: u64,
    pub headline: String,
    pub order_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateTriple {
    pub step_id: u64,
    pub before: String,
    pub mid: String,
    pub after: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub tasks: BTreeMap<u64, TaskEntry>,
    pub steps: BTreeMap<u64, StepEntry>,
    pub states: BTreeMap<u64, StateTriple>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Task { id: u64, title: String },
    Step { id: u64, task: u64, order: usize, headline: String },
    State { step: u64, before: String, mid: String, after: String },
}

impl KnowledgeBase {
    pub fn insert_task(&mut self, task_id: u64, title: &str) -> Result<()> {
        if self.tasks.contains_key(&task_id) {
            return Err(Error::Integrity(format!("duplicate task id {task_id}")));
        }
        self.tasks.insert(
            task_id,
            TaskEntry { task_id, title: title.trim().to_string(), step_ids: Vec::new() },
        );
        Ok(())
    }

    pub fn insert_step(&mut self, step_id: u64, task_id: u64, order_index: usize, headline: &str) -> Result<()> {
        if self.steps.contains_key(&step_id) {
            return Err(Error::Integrity(format!("duplicate step id {step_id}")));
        }
        if !self.tasks.contains_key(&task_id) {
            return Err(Error::Integrity(format!(
                "step {step_id} references missing task {task_id}"
            )));
        }
        self.steps.insert(
            step_id,
            StepEntry {
                step_id,
                task_id,
                headline: headline.trim().to_string(),
                order_index,
            },
        );
        Ok(())
    }

    pub fn insert_state(&mut self, triple: StateTriple) -> Result<()> {
        if !self.steps.contains_key(&triple.step_id) {
            return Err(Error::Integrity(format!(
                "state references missing step {}",
                triple.step_id
            )));
        }
        if self.states.contains_key(&triple.step_id) {
            return Err(Error::Integrity(format!(
                "duplicate state triple for step {}",
                triple.step_id
            )));
        }
        if triple.before.is_empty() || triple.mid.is_empty() || triple.after.is_empty() {
            return Err(Error::Integrity(format!(
                "empty state text for step {}",
                triple.step_id
            )));
        }
        self.states.insert(triple.step_id, triple);
        Ok(())
    }

    /// Re-derive per-task step lists and check ordering invariants.
    fn finalize(&mut self) -> Result<()> {
        for task in self.tasks.values_mut() {
            task.step_ids.clear();
        }
        let mut by_task: BTreeMap<u64, Vec<(usize, u64)>> = BTreeMap::new();
        for step in self.steps.values() {
            by_task
                .entry(step.task_id)
                .or_default()
                .push((step.order_index, step.step_id));
        }
        for (task_id, mut pairs) in by_task {
            pairs.sort();
            for (want, (got, step_id)) in pairs.iter().enumerate() {
                if *got != want {
                    return Err(Error::Integrity(format!(
                        "task {task_id}: step {step_id} has order_index {got}, expected {want}"
                    )));
                }
            }
            let task = self.tasks.get_mut(&task_id).unwrap();
            task.step_ids = pairs.into_iter().map(|(_, id)| id).collect();
        }
        if let Some(task) = self.tasks.values().find(|t| t.step_ids.is_empty()) {
            return Err(Error::Integrity(format!("task {} has no steps", task.task_id)));
        }
        Ok(())
    }

    /// Error unless every step carries exactly one state triple.
    pub fn require_states(&self) -> Result<()> {
        for step_id in self.steps.keys() {
            if !self.states.contains_key(step_id) {
                return Err(Error::MissingData(format!("step {step_id} has no state triple")));
            }
        }
        Ok(())
    }

    pub fn state_text_count(&self) -> usize {
        self.states.len() * 3
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        let mut push = |r: &Record| {
            body.push_str(&serde_json::to_string(r).expect("record serializes"));
            body.push('\n');
        };
        for task in self.tasks.values() {
            push(&Record::Task { id: task.task_id, title: task.title.clone() });
        }
        for step in self.steps.values() {
            push(&Record::Step {
                id: step.step_id,
                task: step.task_id,
                order: step.order_index,
                headline: step.headline.clone(),
            });
        }
        for state in self.states.values() {
            push(&Record::State {
                step: state.step_id,
                before: state.before.clone(),
                mid: state.mid.clone(),
                after: state.after.clone(),
            });
        }
        write_atomic(path, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tasks = Vec::new();
        let mut steps = Vec::new();
        let mut states = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            match record {
                Record::Task { .. } => tasks.push((i + 1, record)),
                Record::Step { .. } => steps.push((i + 1, record)),
                Record::State { .. } => states.push((i + 1, record)),
            }
        }
        let mut base = KnowledgeBase::default();
        let located = |line: usize, e: Error| match e {
            Error::Integrity(msg) => Error::parse(path, line, msg),
            other => other,
        };
        for (line, r) in tasks {
            if let Record::Task { id, title } = r {
                base.insert_task(id, &title).map_err(|e| located(line, e))?;
            }
        }
        for (line, r) in steps {
            if let Record::Step { id, task, order, headline } = r {
                base.insert_step(id, task, order, &headline)
                    .map_err(|e| located(line, e))?;
            }
        }
        for (line, r) in states {
            if let Record::State { step, before, mid, after } = r {
                base.insert_state(StateTriple { step_id: step, before, mid, after })
                    .map_err(|e| located(line, e))?;
            }
        }
        base.finalize()?;
        Ok(base)
    }

    /// Build from in-memory parts, validating invariants.
    pub fn from_parts(
        tasks: Vec<(u64, String)>,
        steps: Vec<(u64, u64, usize, String)>,
        states: Vec<StateTriple>,
    ) -> Result<Self> {
        let mut base = KnowledgeBase::default();
        for (id, title) in tasks {
            base.insert_task(id, &title)?;
        }
        for (id, task, order, headline) in steps {
            base.insert_step(id, task, order, &headline)?;
        }
        for state in states {
            base.insert_state(state)?;
        }
        base.finalize()?;
        Ok(base)
    }
}

/// Render the state-description prompt for one (task, step) pair.
///
/// The template asks for one verb-led description, three sentences covering
/// before/transitioning/after, and common-sense constraints, then shows one
/// worked exemplar before the actual query. `[word]` is the step's first
/// whitespace token.
pub fn render_state_prompt(task: &str, step: &str) -> Result<String> {
    if task.trim().is_empty() || step.trim().is_empty() {
        return Err(Error::Config("prompt requires non-empty task and step".into()));
    }
    let word = step.split(' ').next().unwrap_or(step);
    Ok(format!(
        "First, describe details of [step] for [goal] with one verb. \
Second, use 3 sentences to describe status changes of objects before, transitioning, and after [step], avoiding using [word]. \
Additionally, apply common-sense constraints to the before/after states based on [last step] and [next step].\n\
\n\
[goal]: Make Kimchi Fried Rice\n\
[step]: add ham\n\
[word]: add\n\
Description:\n\
Add diced ham into the fried rice\n\
\n\
Before:\n\
- The diced ham is separate from the pan.\n\
- The pan contains fried rice.\n\
- The pan has no ham on it.\n\
\n\
Transitioning:\n\
- The diced ham is picked up from outside the pan ...\n\
- The diced ham is sprinkled into the pan ...\n\
- The diced ham gradually mixes ...\n\
\n\
After:\n\
- The diced ham is mixed with the fried rice.\n\
- The ham is on the pan.\n\
- The pan contains ham.\n\
\n\
[goal]: {task}\n\
[step]: {step}\n\
[word]: {word}\n"
    ))
}

/// Supplies one state triple per step.
pub trait StateProvider {
    fn states(&self, task: &TaskEntry, step: &StepEntry) -> Result<StateTriple>;
}

/// Deterministic offline stub: templated texts derived from the headline.
pub struct TemplateStub;

impl StateProvider for TemplateStub {
    fn states(&self, _task: &TaskEntry, step: &StepEntry) -> Result<StateTriple> {
        let h = &step.headline;
        Ok(StateTriple {
            step_id: step.step_id,
            before: format!("The objects involved in '{h}' are still in their initial arrangement."),
            mid: format!("The objects involved in '{h}' are partway through changing."),
            after: format!("The objects involved in '{h}' have reached their final arrangement."),
        })
    }
}

/// Reads pre-generated triples from a JSONL file of
/// `{"kind":"state","step":...}` records.
pub struct FileProvider {
    by_step: BTreeMap<u64, StateTriple>,
}

impl FileProvider {
    pub fn open(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut by_step = BTreeMap::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if let Record::State { step, before, mid, after } = record {
                by_step.insert(step, StateTriple { step_id: step, before, mid, after });
            }
        }
        Ok(FileProvider { by_step })
    }
}

impl StateProvider for FileProvider {
    fn states(&self, _task: &TaskEntry, step: &StepEntry) -> Result<StateTriple> {
        self.by_step
            .get(&step.step_id)
            .cloned()
            .ok_or_else(|| Error::MissingData(format!("no state triple for step {}", step.step_id)))
    }
}

/// Fill in a state triple for every step via `provider`. Any provider
/// failure aborts, naming the step.
pub fn attach_states(mut base: KnowledgeBase, provider: &dyn StateProvider) -> Result<KnowledgeBase> {
    base.states.clear();
    let steps: Vec<StepEntry> = base.steps.values().cloned().collect();
    for step in steps {
        let task = base.tasks.get(&step.task_id).cloned().ok_or_else(|| {
            Error::Integrity(format!("step {} references missing task", step.step_id))
        })?;
        let triple = provider
            .states(&task, &step)
            .map_err(|e| Error::MissingData(format!("state generation for step {}: {e}", step.step_id)))?;
        if triple.step_id != step.step_id {
            return Err(Error::Integrity(format!(
                "provider returned triple for step {} when asked for {}",
                triple.step_id, step.step_id
            )));
        }
        base.insert_state(triple)?;
    }
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_base() -> KnowledgeBase {
        KnowledgeBase::from_parts(
            vec![(0, "Make Tea".into())],
            vec![
                (10, 0, 0, "boil water".into()),
                (11, 0, 1, "steep leaves".into()),
            ],
            Vec::new(),
        )
        .unwrap()
    }

    #[test]
    fn minimal_base_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"kind\":\"task\",\"id\":0,\"title\":\"Make Tea\"}\n",
                "{\"kind\":\"step\",\"id\":10,\"task\":0,\"order\":0,\"headline\":\"boil water\"}\n",
                "{\"kind\":\"step\",\"id\":11,\"task\":0,\"order\":1,\"headline\":\"steep leaves\"}\n",
            ),
        )
        .unwrap();
        let base = KnowledgeBase::load(&path).unwrap();
        assert_eq!(base.tasks.len(), 1);
        assert_eq!(base.steps.len(), 2);
        assert_eq!(base.tasks[&0].step_ids, vec![10, 11]);
    }

    #[test]
    fn step_with_unknown_task_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        fs::write(
            &path,
            "{\"kind\":\"step\",\"id\":10,\"task\":99,\"order\":0,\"headline\":\"x\"}\n",
        )
        .unwrap();
        let err = KnowledgeBase::load(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn order_index_gap_rejected() {
        let err = KnowledgeBase::from_parts(
            vec![(0, "t".into())],
            vec![(1, 0, 0, "a".into()), (2, 0, 2, "b".into())],
            Vec::new(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let base = attach_states(tiny_base(), &TemplateStub).unwrap();
        base.save(&path).unwrap();
        assert_eq!(KnowledgeBase::load(&path).unwrap(), base);
    }

    #[test]
    fn prompt_word_is_first_token() {
        let p = render_state_prompt("Make Kimchi Fried Rice", "add ham").unwrap();
        assert!(p.ends_with("[goal]: Make Kimchi Fried Rice\n[step]: add ham\n[word]: add\n"));
        let p = render_state_prompt("T", "cut oranges").unwrap();
        assert!(p.contains("\n[word]: cut\n"));
        let p = render_state_prompt("T", "stir").unwrap();
        assert!(p.ends_with("[word]: stir\n"));
    }

    #[test]
    fn prompt_is_pure() {
        let a = render_state_prompt("Task", "step one").unwrap();
        let b = render_state_prompt("Task", "step one").unwrap();
        assert_eq!(a, b);
        assert!(render_state_prompt("", "x").is_err());
    }

    #[test]
    fn attach_states_covers_every_step() {
        let base = attach_states(tiny_base(), &TemplateStub).unwrap();
        base.require_states().unwrap();
        assert_eq!(base.state_text_count(), 3 * base.steps.len());
    }

    #[test]
    fn file_provider_missing_step_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("states.jsonl");
        fs::write(
            &path,
            "{\"kind\":\"state\",\"step\":10,\"before\":\"b\",\"mid\":\"m\",\"after\":\"a\"}\n",
        )
        .unwrap();
        let provider = FileProvider::open(&path).unwrap();
        let err = attach_states(tiny_base(), &provider).unwrap_err();
        assert!(err.to_string().contains("11"), "{err}");
    }
}
