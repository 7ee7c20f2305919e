use std::collections::HashSet;

use bico_core::data::{
    build_pools, generate_bundle, generate_facts, scan_reverse_leaks, templates, DataConfig, TaskKind, BOS, EOS,
    FACT_STREAM, PAD, UNK,
};
use bico_core::numeric::RngStream;
use proptest::prelude::*;

fn config(task: TaskKind) -> DataConfig {
    DataConfig {
        task,
        ..DataConfig::default()
    }
}

#[test]
fn default_scale_facts_are_a_bijection() {
    let cfg = config(TaskKind::N2d);
    let pools = build_pools(&cfg, &templates(TaskKind::N2d)).unwrap();
    let facts = generate_facts(300, &pools.name, &pools.description, &mut RngStream::substream(0, FACT_STREAM)).unwrap();
    let names: HashSet<_> = facts.iter().map(|f| f.name.clone()).collect();
    let descs: HashSet<_> = facts.iter().map(|f| f.description.clone()).collect();
    assert_eq!(names.len(), 300);
    assert_eq!(descs.len(), 300);
    let name_tokens: HashSet<u32> = facts.iter().flat_map(|f| f.name.clone()).collect();
    assert!(facts.iter().flat_map(|f| &f.description).all(|t| !name_tokens.contains(t)));
    for f in &facts {
        assert_eq!(f.name.len(), 2);
        assert!((4..=8).contains(&f.description.len()));
    }
}

#[test]
fn default_bundle_counts() {
    let b = generate_bundle(&config(TaskKind::N2d), 0).unwrap();
    assert_eq!(b.train.len(), 1200);
    assert_eq!(b.paraphrase_test.len(), 100);
    assert_eq!(b.reverse_test.len(), 100);
    assert!(b.max_sequence_len() <= 32);
}

#[test]
fn seed_controls_the_whole_bundle() {
    let cfg = config(TaskKind::N2d);
    let a = generate_bundle(&cfg, 1).unwrap();
    assert_eq!(a, generate_bundle(&cfg, 1).unwrap());
    let b = generate_bundle(&cfg, 2).unwrap();
    let same = a.facts.iter().zip(&b.facts).filter(|(x, y)| x.name == y.name && x.description == y.description).count();
    assert!(same < 5, "{same} identical facts across seeds");
}

#[test]
fn reverse_items_ask_for_the_other_side() {
    for task in [TaskKind::N2d, TaskKind::D2n, TaskKind::Translation] {
        let b = generate_bundle(&config(task), 3).unwrap();
        for (f, item) in b.facts.iter().zip(&b.reverse_test) {
            let (given, asked) = match task {
                TaskKind::D2n => (&f.name, &f.description),
                _ => (&f.description, &f.name),
            };
            assert_eq!(&item.completion, asked, "{task}");
            assert!(item.prompt.windows(given.len()).any(|w| w == given.as_slice()), "{task}");
            assert_eq!(item.prompt[0], BOS);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn bundles_hold_their_invariants(seed in any::<u64>(), task_index in 0usize..3, n_facts in 1usize..120) {
        let task = [TaskKind::N2d, TaskKind::D2n, TaskKind::Translation][task_index];
        let cfg = DataConfig { n_facts, test_items: n_facts.min(100), ..config(task) };
        let b = generate_bundle(&cfg, seed).unwrap();

        prop_assert!(scan_reverse_leaks(&b.train, &b.facts, task).is_empty());

        let names: HashSet<_> = b.facts.iter().map(|f| &f.name).collect();
        let descs: HashSet<_> = b.facts.iter().map(|f| &f.description).collect();
        prop_assert_eq!(names.len(), n_facts);
        prop_assert_eq!(descs.len(), n_facts);

        let train: HashSet<&Vec<u32>> = b.train.iter().collect();
        for item in &b.paraphrase_test {
            let mut full = item.prompt.clone();
            full.extend(&item.completion);
            prop_assert!(!train.contains(&full));
            prop_assert!(!train.iter().any(|s| s.starts_with(&item.prompt)));
        }

        for s in &b.train {
            prop_assert_eq!(s[0], BOS);
            prop_assert_eq!(*s.last().unwrap(), EOS);
            prop_assert!(s.iter().all(|&t| t != PAD && t != UNK && (t as usize) < b.vocab.len()));
            prop_assert_eq!(b.vocab.tokenize(&b.vocab.detokenize(s)), s.clone());
        }
        for item in b.paraphrase_test.iter().chain(&b.reverse_test) {
            prop_assert!(item.completion.iter().chain([&item.stop]).all(|&t| t != UNK && (t as usize) < b.vocab.len()));
        }
    }
}
