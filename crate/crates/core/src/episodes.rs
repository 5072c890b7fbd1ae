//! Task streams for class-incremental evaluation and meta-training episodes.
//!
//! A [`TaskStream`] fixes one base task and an ordered list of N-way novel
//! tasks with disjoint class sets. A [`MetaEpisode`] partitions the base
//! classes into an ordered sequence of pseudo-tasks that mimic the stream.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::graph::GraphDataset;
use crate::RunRng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EpisodeError {
    #[error("class {class} has {have} nodes, need at least {need}")]
    ClassTooSmall { class: usize, have: usize, need: usize },
    #[error("stream needs {need} classes but the dataset has {have}")]
    NotEnoughClasses { need: usize, have: usize },
    #[error("pseudo-task width {n_way} exceeds the {base} base classes")]
    WayExceedsBase { n_way: usize, base: usize },
    #[error("invalid split config: {0}")]
    InvalidConfig(&'static str),
}

/// Episode shape and class budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub r_query: usize,
    pub base_class_count: usize,
    /// Number of novel tasks; all remaining classes are used when unset.
    #[serde(default)]
    pub num_novel_tasks: Option<usize>,
    /// Per-class query size inside meta-training episodes.
    #[serde(default = "default_meta_query_cap")]
    pub meta_query_cap: usize,
    pub seed: u64,
}

fn default_meta_query_cap() -> usize {
    25
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.n_way < 2 {
            return Err(EpisodeError::InvalidConfig("n_way must be at least 2"));
        }
        if self.k_shot < 1 || self.r_query < 1 {
            return Err(EpisodeError::InvalidConfig("k_shot and r_query must be at least 1"));
        }
        if self.meta_query_cap < 1 {
            return Err(EpisodeError::InvalidConfig("meta_query_cap must be at least 1"));
        }
        Ok(())
    }
}

/// One task: its classes and per-class support/query node lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub classes: Vec<usize>,
    pub support: BTreeMap<usize, Vec<usize>>,
    pub query: BTreeMap<usize, Vec<usize>>,
}

impl TaskSpec {
    /// Support nodes with labels, class by class.
    pub fn support_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.classes, &self.support)
    }

    pub fn query_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.classes, &self.query)
    }
}

fn flatten(classes: &[usize], map: &BTreeMap<usize, Vec<usize>>) -> (Vec<usize>, Vec<usize>) {
    let mut nodes = Vec::new();
    let mut labels = Vec::new();
    for c in classes {
        for &n in map.get(c).map(Vec::as_slice).unwrap_or(&[]) {
            nodes.push(n);
            labels.push(*c);
        }
    }
    (nodes, labels)
}

/// Base task plus ordered novel tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub base: TaskSpec,
    pub novel: Vec<TaskSpec>,
    pub n_way: usize,
    pub k_shot: usize,
    pub r_query: usize,
}

impl TaskStream {
    /// Base followed by the novel tasks.
    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        core::iter::once(&self.base).chain(&self.novel)
    }

    pub fn total_classes(&self) -> usize {
        self.tasks().map(|t| t.classes.len()).sum()
    }
}

/// Splits the dataset's classes into a base task and consecutive N-way novel
/// tasks. Class order and per-class node order are shuffled by `cfg.seed`.
pub fn build_task_stream(dataset: &GraphDataset, cfg: &SplitConfig) -> Result<TaskStream, EpisodeError> {
    cfg.validate()?;
    let have = dataset.num_classes();
    if cfg.base_class_count > have {
        return Err(EpisodeError::NotEnoughClasses { need: cfg.base_class_count, have });
    }
    let n_tasks = cfg.num_novel_tasks.unwrap_or((have - cfg.base_class_count) / cfg.n_way);
    let need = cfg.base_class_count + n_tasks * cfg.n_way;
    if need > have {
        return Err(EpisodeError::NotEnoughClasses { need, have });
    }
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..have).collect();
    order.shuffle(&mut rng);
    let by_class = dataset.nodes_by_class();
    let min_size = cfg.k_shot + cfg.r_query;
    for &c in &order[..need] {
        if by_class[c].len() < min_size {
            return Err(EpisodeError::ClassTooSmall { class: c, have: by_class[c].len(), need: min_size });
        }
    }

    let mut base = TaskSpec { classes: order[..cfg.base_class_count].to_vec(), ..empty_task() };
    for &c in &base.classes {
        let mut nodes = by_class[c].clone();
        nodes.shuffle(&mut rng);
        let support = nodes.split_off(cfg.r_query);
        base.query.insert(c, nodes);
        base.support.insert(c, support);
    }
    let mut novel = Vec::with_capacity(n_tasks);
    for chunk in order[cfg.base_class_count..need].chunks(cfg.n_way) {
        let mut task = TaskSpec { classes: chunk.to_vec(), ..empty_task() };
        for &c in chunk {
            let mut nodes = by_class[c].clone();
            nodes.shuffle(&mut rng);
            task.support.insert(c, nodes[..cfg.k_shot].to_vec());
            task.query.insert(c, nodes[cfg.k_shot..min_size].to_vec());
        }
        novel.push(task);
    }
    Ok(TaskStream { base, novel, n_way: cfg.n_way, k_shot: cfg.k_shot, r_query: cfg.r_query })
}

fn empty_task() -> TaskSpec {
    TaskSpec { classes: Vec::new(), support: BTreeMap::new(), query: BTreeMap::new() }
}

/// One step of a meta-training episode.
pub type PseudoTask = TaskSpec;

/// Ordered partition of the base classes into pseudo-tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEpisode {
    pub sequence: Vec<PseudoTask>,
}

/// Shuffles the base classes into `ceil(|Y0| / N)` pseudo-tasks (the last one
/// takes the remainder) and draws K support plus up to
/// `min(R, meta_query_cap)` query nodes per class from the base support pool.
pub fn sample_meta_episode(base: &TaskSpec, cfg: &SplitConfig, rng: &mut RunRng) -> Result<MetaEpisode, EpisodeError> {
    if cfg.n_way > base.classes.len() {
        return Err(EpisodeError::WayExceedsBase { n_way: cfg.n_way, base: base.classes.len() });
    }
    let mut classes = base.classes.clone();
    classes.shuffle(rng);
    let query_cap = cfg.r_query.min(cfg.meta_query_cap);
    let mut sequence = Vec::with_capacity(classes.len().div_ceil(cfg.n_way));
    for chunk in classes.chunks(cfg.n_way) {
        let mut task = TaskSpec { classes: chunk.to_vec(), ..empty_task() };
        for &c in chunk {
            let mut pool = base.support.get(&c).cloned().unwrap_or_default();
            if pool.len() <= cfg.k_shot {
                return Err(EpisodeError::ClassTooSmall { class: c, have: pool.len(), need: cfg.k_shot + 1 });
            }
            pool.shuffle(rng);
            let q = query_cap.min(pool.len() - cfg.k_shot);
            task.query.insert(c, pool[cfg.k_shot..cfg.k_shot + q].to_vec());
            pool.truncate(cfg.k_shot);
            task.support.insert(c, pool);
        }
        sequence.push(task);
    }
    Ok(MetaEpisode { sequence })
}

/// Structural problems found by [`check_task`], [`check_stream`] or
/// [`check_episode`]; empty when the invariants hold.
pub fn check_task(task: &TaskSpec, labels: &[usize]) -> Vec<&'static str> {
    let mut problems = Vec::new();
    let mut seen = BTreeSet::new();
    for c in &task.classes {
        for n in task.support.get(c).into_iter().chain(task.query.get(c)).flatten() {
            if labels.get(*n) != Some(c) {
                problems.push("node label disagrees with its class");
            }
            if !seen.insert(*n) {
                problems.push("node listed twice within a task");
            }
        }
    }
    problems
}

pub fn check_stream(stream: &TaskStream, labels: &[usize]) -> Vec<&'static str> {
    let mut problems = Vec::new();
    let mut classes = BTreeSet::new();
    for task in stream.tasks() {
        problems.extend(check_task(task, labels));
        for c in &task.classes {
            if !classes.insert(*c) {
                problems.push("class shared between tasks");
            }
        }
    }
    for task in &stream.novel {
        if task.classes.len() != stream.n_way {
            problems.push("novel task width differs from N");
        }
        for c in &task.classes {
            if task.support.get(c).map_or(0, Vec::len) != stream.k_shot {
                problems.push("novel support size differs from K");
            }
            if task.query.get(c).map_or(0, Vec::len) != stream.r_query {
                problems.push("novel query size differs from R");
            }
        }
    }
    for c in &stream.base.classes {
        if stream.base.query.get(c).map_or(0, Vec::len) != stream.r_query {
            problems.push("base query size differs from R");
        }
    }
    problems
}

pub fn check_episode(episode: &MetaEpisode, base: &TaskSpec, labels: &[usize]) -> Vec<&'static str> {
    let mut problems = Vec::new();
    let mut union = BTreeSet::new();
    for task in &episode.sequence {
        problems.extend(check_task(task, labels));
        for c in &task.classes {
            if !union.insert(*c) {
                problems.push("pseudo-task classes overlap");
            }
        }
    }
    if union != base.classes.iter().copied().collect() {
        problems.push("pseudo-task classes do not cover the base classes");
    }
    problems
}
