use std::collections::BTreeSet;

use kgbridge::corpus::{leave_one_out_split, perturb_kg_sparsity, ItemVocabulary, KnowledgeGraph, Triple, UserSequence};
use kgbridge::evaluation::{compute_metrics, rank_target, read_reports_csv, write_reports_csv, RankingResult};
use kgbridge::kge::{init_kge, score_triple, transe_loss, KgeConfig};
use kgbridge::promptbank::{PromptBank, PromptKind};
use kgbridge::tensor::Matrix;
use kgbridge::training::disentanglement_loss;
use proptest::prelude::*;

fn graph(n: usize) -> KnowledgeGraph {
    let triples = (0..n).map(|i| Triple::new(format!("h{}", i % 7), format!("r{}", i % 3), format!("t{i}"))).collect();
    KnowledgeGraph::from_domains([("A", triples)]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_counts_only_candidates(
        scores in prop::collection::vec(-3i8..3, 2..40),
        target_seed in any::<usize>(),
        exclude_mask in any::<u64>(),
    ) {
        let scores: Vec<f32> = scores.into_iter().map(f32::from).collect();
        let target = target_seed % scores.len();
        let excluded: BTreeSet<usize> = (0..scores.len()).filter(|&i| i != target && exclude_mask >> (i % 64) & 1 == 1).collect();
        let rank = rank_target(&scores, target, &excluded).unwrap();
        prop_assert!(rank >= 1 && rank <= scores.len() - excluded.len());
        let mut without = excluded.clone();
        without.clear();
        prop_assert!(rank_target(&scores, target, &without).unwrap() >= rank);
    }

    #[test]
    fn metrics_are_bounded_and_monotone(ranks in prop::collection::vec(1usize..60, 1..50)) {
        let results: Vec<RankingResult> = ranks.iter().enumerate().map(|(user, &target_rank)| RankingResult { user, target_rank }).collect();
        let ks = [1, 3, 5, 10, 20];
        let report = compute_metrics(&results, &ks, 0).unwrap();
        let mut prev = (0.0, 0.0);
        for k in ks {
            let (r, n) = report.per_k[&k];
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&n));
            prop_assert!(n <= r + 1e-12);
            prop_assert!(r >= prev.0 && n >= prev.1);
            prev = (r, n);
        }
    }

    #[test]
    fn report_csv_round_trips(values in prop::collection::vec((0u32..1_000_000, 0u32..1_000_000), 1..5), seed in 0u64..100) {
        let results: Vec<RankingResult> = values.iter().enumerate().map(|(u, (a, _))| RankingResult { user: u, target_rank: 1 + *a as usize % 30 }).collect();
        let report = compute_metrics(&results, &[3, 10], seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_reports_csv(&path, [("full", &report)]).unwrap();
        let back = read_reports_csv(&path).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(back[0].1.seed, seed);
        for (k, (r, n)) in &report.per_k {
            let (br, bn) = back[0].1.per_k[k];
            prop_assert!((br - r).abs() <= 5e-7 && (bn - n).abs() <= 5e-7);
        }
    }

    #[test]
    fn sparsity_removes_rounded_share(n in 1usize..200, ratio in 0.0f64..1.0, seed in any::<u64>()) {
        let kg = graph(n);
        let thin = perturb_kg_sparsity(&kg, ratio, seed).unwrap();
        prop_assert_eq!(n - thin.num_triples(), (n as f64 * ratio).round() as usize);
    }

    #[test]
    fn transe_loss_is_non_negative(seed in any::<u64>(), margin in 0.0f64..3.0) {
        let kg = graph(12);
        let model = init_kge(&kg, &KgeConfig { dim: 8, seed, ..Default::default() }).unwrap();
        let pos = kg.triples.clone();
        let neg: Vec<Triple> = pos.iter().map(|t| Triple::new(t.tail.clone(), t.relation.clone(), t.head.clone())).collect();
        prop_assert!(transe_loss(&model, &pos, &neg, margin).unwrap() >= 0.0);
        for t in &pos {
            prop_assert!(score_triple(&model, t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn disentanglement_ignores_row_scale(
        data in prop::collection::vec(0.1f64..2.0, 12),
        signs in prop::collection::vec(any::<bool>(), 12),
        scale in 0.1f64..10.0,
    ) {
        let v: Vec<f64> = data.iter().zip(&signs).map(|(x, s)| if *s { *x } else { -x }).collect();
        let bank = |kind, xs: &[f64]| PromptBank::new(kind, Matrix::from_vec(2, 3, xs.to_vec()).unwrap());
        let shared = bank(PromptKind::Shared, &v[..6]);
        let spec = bank(PromptKind::Specific, &v[6..]);
        let scaled: Vec<f64> = v[6..].iter().map(|x| x * scale).collect();
        let a = disentanglement_loss(&shared, &spec, 0.2).unwrap();
        let b = disentanglement_loss(&shared, &bank(PromptKind::Specific, &scaled), 0.2).unwrap();
        prop_assert!(a >= 0.0 && a.is_finite());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn split_and_vocabulary_round_trip(lens in prop::collection::vec(3usize..10, 1..12), items in 3usize..15) {
        let seqs: Vec<UserSequence> = lens
            .iter()
            .enumerate()
            .map(|(u, &len)| UserSequence {
                user: format!("u{u}"),
                items: (0..len).map(|k| format!("i{}", (u + 3 * k) % items)).collect(),
                domain: "A".into(),
            })
            .collect();
        let split = leave_one_out_split(&seqs).unwrap();
        for s in &seqs {
            prop_assert_eq!(split.reconstruct(&s.user).unwrap(), s.items.clone());
        }
        let vocab = ItemVocabulary::from_splits([&split]);
        for s in &split.train_sequences {
            let ids = vocab.encode("A", &s.items).unwrap();
            prop_assert!(ids.iter().all(|&i| i >= 1 && i <= vocab.len()));
            let names: Vec<String> = ids.iter().map(|&i| vocab.entry(i).unwrap().1.clone()).collect();
            prop_assert_eq!(&names, &s.items);
        }
    }
}
