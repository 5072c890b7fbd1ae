use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::RunRng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BufferError {
    #[error("class {0} has an empty support set")]
    EmptySupport(usize),
    #[error("class {0} is already stored in the incremental buffer")]
    DuplicateClass(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferScope {
    /// Rebuilt inside each meta epoch and cleared when it ends.
    MetaEpoch,
    /// Grows across the incremental stage; classes are never replaced.
    IncrementalStage,
}

/// Single-instance replay store: at most one node per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    scope: BufferScope,
    entries: BTreeMap<usize, usize>,
}

impl ReplayBuffer {
    pub fn new(scope: BufferScope) -> Self {
        Self { scope, entries: BTreeMap::new() }
    }

    pub fn scope(&self) -> BufferScope {
        self.scope
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn node_for(&self, class: usize) -> Option<usize> {
        self.entries.get(&class).copied()
    }

    /// Stored `(class, node)` pairs in class order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|(&c, &n)| (c, n))
    }

    /// Stored nodes and their labels, in class order.
    pub fn rows(&self) -> (Vec<usize>, Vec<usize>) {
        self.entries.iter().map(|(&c, &n)| (n, c)).unzip()
    }
}

/// Stores one uniformly drawn support node for every class of the task.
/// Nothing is inserted if any class fails validation.
pub fn update_buffer(
    buffer: &mut ReplayBuffer,
    support: &BTreeMap<usize, Vec<usize>>,
    rng: &mut RunRng,
) -> Result<(), BufferError> {
    for (&class, nodes) in support {
        if nodes.is_empty() {
            return Err(BufferError::EmptySupport(class));
        }
        if buffer.scope == BufferScope::IncrementalStage && buffer.entries.contains_key(&class) {
            return Err(BufferError::DuplicateClass(class));
        }
    }
    for (&class, nodes) in support {
        let node = *nodes.choose(rng).expect("checked non-empty");
        buffer.entries.insert(class, node);
    }
    Ok(())
}

/// Problems with a buffer against the dataset labels; empty when every
/// stored node carries its class label and no node is stored twice.
pub fn check_buffer(buffer: &ReplayBuffer, labels: &[usize]) -> Vec<&'static str> {
    let mut problems = Vec::new();
    let mut nodes = alloc::collections::BTreeSet::new();
    for (class, node) in buffer.entries() {
        if labels.get(node) != Some(&class) {
            problems.push("buffered node label disagrees with its class");
        }
        if !nodes.insert(node) {
            problems.push("node buffered for two classes");
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn support(classes: &[(usize, Vec<usize>)]) -> BTreeMap<usize, Vec<usize>> {
        classes.iter().cloned().collect()
    }

    #[test]
    fn grows_by_class_count() {
        let mut b = ReplayBuffer::new(BufferScope::IncrementalStage);
        let s = support(&[(0, vec![1, 2, 3]), (4, vec![5, 6, 7]), (9, vec![8, 10, 11])]);
        update_buffer(&mut b, &s, &mut crate::seeded_rng(0)).unwrap();
        assert_eq!(b.len(), 3);
        for (c, n) in b.entries() {
            assert!(s[&c].contains(&n));
        }
        assert_eq!(update_buffer(&mut b, &s, &mut crate::seeded_rng(0)), Err(BufferError::DuplicateClass(0)));
    }

    #[test]
    fn single_shot_is_forced() {
        let mut b = ReplayBuffer::new(BufferScope::MetaEpoch);
        update_buffer(&mut b, &support(&[(2, vec![42])]), &mut crate::seeded_rng(3)).unwrap();
        assert_eq!(b.node_for(2), Some(42));
        // meta scope may overwrite
        update_buffer(&mut b, &support(&[(2, vec![7])]), &mut crate::seeded_rng(3)).unwrap();
        assert_eq!(b.node_for(2), Some(7));
    }

    #[test]
    fn empty_support_is_rejected() {
        let mut b = ReplayBuffer::new(BufferScope::MetaEpoch);
        let s = support(&[(0, vec![1]), (1, vec![])]);
        assert_eq!(update_buffer(&mut b, &s, &mut crate::seeded_rng(0)), Err(BufferError::EmptySupport(1)));
        assert!(b.is_empty());
    }

    #[test]
    fn choice_is_uniform() {
        // chi-square with 2 degrees of freedom; 13.8 is the 0.999 quantile
        let mut counts = [0usize; 3];
        let mut rng = crate::seeded_rng(2024);
        let s = support(&[(0, vec![10, 11, 12])]);
        for _ in 0..1000 {
            let mut b = ReplayBuffer::new(BufferScope::MetaEpoch);
            update_buffer(&mut b, &s, &mut rng).unwrap();
            counts[b.node_for(0).unwrap() - 10] += 1;
        }
        let expected = 1000.0 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected) * (c as f64 - expected) / expected).sum();
        assert!(chi2 < 13.8, "counts {counts:?}, chi2 {chi2}");
    }
}
