mod common;

use std::collections::BTreeSet;

use gfscil_core::episodes::*;
use gfscil_core::graph::GraphDataset;
use gfscil_core::seeded_rng;
use gfscil_core::trainer::{check_buffer, update_buffer, BufferError, BufferScope, ReplayBuffer};
use proptest::prelude::*;

fn split(n_way: usize, k_shot: usize, r_query: usize, base: usize, seed: u64) -> SplitConfig {
    SplitConfig { n_way, k_shot, r_query, base_class_count: base, num_novel_tasks: None, meta_query_cap: 25, seed }
}

fn class_nodes(ds: &GraphDataset, c: usize) -> BTreeSet<usize> {
    (0..ds.num_nodes()).filter(|&n| ds.labels()[n] == c).collect()
}

#[test]
fn clothing_shaped_stream_has_nine_tasks() {
    // 50 meta-train classes and 27 evaluation classes, 3-way
    let ds = common::sbm(77, 6, 8, 3);
    let stream = build_task_stream(&ds, &split(3, 3, 2, 50, 0)).unwrap();
    assert_eq!(stream.novel.len(), 9);
    assert_eq!(stream.tasks().count(), 10);
    assert!(check_stream(&stream, ds.labels()).is_empty());
}

#[test]
fn remainder_becomes_a_smaller_last_pseudo_task() {
    let ds = common::sbm(7, 8, 4, 1);
    let s = split(3, 2, 2, 7, 5);
    let stream = build_task_stream(&ds, &s).unwrap();
    let ep = sample_meta_episode(&stream.base, &s, &mut seeded_rng(0)).unwrap();
    let widths: Vec<usize> = ep.sequence.iter().map(|t| t.classes.len()).collect();
    assert_eq!(widths, vec![3, 3, 1]);
    assert!(check_episode(&ep, &stream.base, ds.labels()).is_empty());
}

#[test]
fn reshuffled_episodes_keep_the_partition() {
    let ds = common::sbm(6, 10, 4, 2);
    let s = split(3, 2, 3, 6, 1);
    let stream = build_task_stream(&ds, &s).unwrap();
    let a = sample_meta_episode(&stream.base, &s, &mut seeded_rng(1)).unwrap();
    let b = sample_meta_episode(&stream.base, &s, &mut seeded_rng(2)).unwrap();
    assert_ne!(a, b);
    for ep in [&a, &b] {
        assert_eq!(ep.sequence.len(), 2);
        assert!(check_episode(ep, &stream.base, ds.labels()).is_empty());
    }
}

#[test]
fn incremental_buffer_refuses_a_stored_class() {
    let mut buf = ReplayBuffer::new(BufferScope::IncrementalStage);
    let mut rng = seeded_rng(0);
    update_buffer(&mut buf, &[(0, vec![1, 2]), (1, vec![3])].into_iter().collect(), &mut rng).unwrap();
    let before = buf.clone();
    let err = update_buffer(&mut buf, &[(2, vec![4]), (1, vec![5])].into_iter().collect(), &mut rng).unwrap_err();
    assert_eq!(err, BufferError::DuplicateClass(1));
    assert_eq!(buf, before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streams_partition_the_classes(
        classes in 4usize..16,
        extra in 0usize..4,
        n_way in 2usize..4,
        k in 1usize..4,
        r in 1usize..4,
        base_frac in 0.2f64..0.9,
        seed in 0u64..10_000,
    ) {
        let ds = common::sbm(classes, k + r + 1 + extra, 4, seed);
        let base = ((classes as f64 * base_frac) as usize).max(n_way);
        prop_assume!(base <= classes);
        let s = split(n_way, k, r, base, seed);
        let stream = build_task_stream(&ds, &s).unwrap();
        prop_assert!(check_stream(&stream, ds.labels()).is_empty());
        prop_assert_eq!(stream.novel.len(), (classes - base) / n_way);
        prop_assert_eq!(&stream, &build_task_stream(&ds, &s).unwrap());

        let mut all = BTreeSet::new();
        for task in stream.tasks() {
            for c in &task.classes {
                prop_assert!(all.insert(*c));
                let sup: BTreeSet<usize> = task.support[c].iter().copied().collect();
                let qry: BTreeSet<usize> = task.query[c].iter().copied().collect();
                prop_assert!(sup.is_disjoint(&qry));
            }
        }
        prop_assert_eq!(all.len(), base + stream.novel.len() * n_way);
        for task in &stream.novel {
            prop_assert_eq!(task.support_pairs().0.len(), n_way * k);
        }
        // base support takes everything that is not query
        for c in &stream.base.classes {
            let both: BTreeSet<usize> =
                stream.base.support[c].iter().chain(&stream.base.query[c]).copied().collect();
            prop_assert_eq!(both, class_nodes(&ds, *c));
        }
    }

    #[test]
    fn episodes_partition_the_base_classes(
        base in 2usize..12,
        n_way in 2usize..5,
        k in 1usize..4,
        cap in 1usize..6,
        seed in 0u64..10_000,
    ) {
        prop_assume!(n_way <= base);
        let ds = common::sbm(base, k + 8, 4, seed);
        let s = SplitConfig { meta_query_cap: cap, ..split(n_way, k, 3, base, seed) };
        let stream = build_task_stream(&ds, &s).unwrap();
        let ep = sample_meta_episode(&stream.base, &s, &mut seeded_rng(seed)).unwrap();
        prop_assert!(check_episode(&ep, &stream.base, ds.labels()).is_empty());
        prop_assert_eq!(ep.sequence.len(), base.div_ceil(n_way));
        prop_assert_eq!(&ep, &sample_meta_episode(&stream.base, &s, &mut seeded_rng(seed)).unwrap());
        for task in &ep.sequence {
            for c in &task.classes {
                prop_assert_eq!(task.support[c].len(), k);
                prop_assert_eq!(task.query[c].len(), cap.min(3).min(stream.base.support[c].len() - k));
                let pool: BTreeSet<usize> = stream.base.support[c].iter().copied().collect();
                prop_assert!(task.support[c].iter().chain(&task.query[c]).all(|n| pool.contains(n)));
            }
        }
    }

    #[test]
    fn meta_buffer_holds_one_node_per_class_and_clears(base in 2usize..10, seed in 0u64..10_000) {
        let ds = common::sbm(base, 8, 4, seed);
        let s = split(2, 3, 2, base, seed);
        let stream = build_task_stream(&ds, &s).unwrap();
        let mut rng = seeded_rng(seed);
        let mut buf = ReplayBuffer::new(BufferScope::MetaEpoch);
        for _epoch in 0..2 {
            let ep = sample_meta_episode(&stream.base, &s, &mut rng).unwrap();
            let mut seen = 0;
            for task in &ep.sequence {
                update_buffer(&mut buf, &task.support, &mut rng).unwrap();
                seen += task.classes.len();
                prop_assert_eq!(buf.len(), seen);
                prop_assert!(check_buffer(&buf, ds.labels()).is_empty());
                for (c, n) in buf.entries() {
                    prop_assert!(ep.sequence.iter().any(|t| t.support.get(&c).is_some_and(|s| s.contains(&n))));
                }
            }
            buf.clear();
            prop_assert!(buf.is_empty());
        }
    }
}
