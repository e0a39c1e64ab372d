use aart_core::corpus::{
    generate_planted_corpus, inject_synthetic_annotators, majority_label, stratified_split, AnnotationRecord, Corpus,
    PlantedCorpusSpec, SyntheticPolicy, DEFAULT_SPLIT,
};
use aart_core::metrics::{
    annotator_level_f1, macro_f1, nearest_rank, parity_gap, pearson, Correlation, Prediction, PredictionSet,
};
use aart_core::objective::{build_contrastive_pairs, info_nce, l2_penalty, Batch, Normalization, PairMode};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn labels(max_len: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1..max_len).prop_flat_map(|n| (prop::collection::vec(0..4usize, n), prop::collection::vec(0..4usize, n)))
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn planted(items: usize, annotators: usize, per_item: usize, q: usize, seed: u64) -> Corpus {
    generate_planted_corpus(&PlantedCorpusSpec {
        noise_rate: 0.1,
        ..PlantedCorpusSpec::uniform(items, annotators, per_item, q, seed)
    })
    .unwrap()
    .corpus
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn macro_f1_is_bounded_and_order_free((truth, pred) in labels(40), seed in any::<u64>()) {
        let f = macro_f1(&truth, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let order = permutation(truth.len(), seed);
        let t2: Vec<usize> = order.iter().map(|&k| truth[k]).collect();
        let p2: Vec<usize> = order.iter().map(|&k| pred[k]).collect();
        prop_assert!((macro_f1(&t2, &p2).unwrap() - f).abs() < 1e-12);
        prop_assert_eq!(macro_f1(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn annotator_f1_ignores_pair_order((truth, pred) in labels(60), seed in any::<u64>()) {
        let pairs: Vec<Prediction> = truth
            .iter()
            .zip(&pred)
            .enumerate()
            .map(|(k, (&t, &p))| Prediction { item: k / 3, annotator: k % 3, truth: t, predicted: p })
            .collect();
        let base = annotator_level_f1(&PredictionSet::new(pairs.clone()).unwrap()).unwrap();
        let order = permutation(pairs.len(), seed);
        let shuffled = PredictionSet::new(order.iter().map(|&k| pairs[k]).collect()).unwrap();
        prop_assert!((annotator_level_f1(&shuffled).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        xy in (2..30usize).prop_flat_map(|n| (prop::collection::vec(-10.0..10.0f64, n), prop::collection::vec(-10.0..10.0f64, n))),
        scale in 0.1..10.0f64,
        shift in -5.0..5.0f64,
    ) {
        let (x, y) = xy;
        match pearson(&x, &y).unwrap() {
            Correlation::Undefined => prop_assert_eq!(pearson(&y, &x).unwrap(), Correlation::Undefined),
            Correlation::Defined(r) => {
                prop_assert!(r.abs() <= 1.0 + 1e-12);
                prop_assert!((pearson(&y, &x).unwrap().value().unwrap() - r).abs() < 1e-9);
                let moved: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
                if let Correlation::Defined(r2) = pearson(&moved, &y).unwrap() {
                    prop_assert!((r2 - r).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn nearest_rank_picks_a_member_and_is_monotone(
        values in prop::collection::vec(-100.0..100.0f64, 1..50),
        p in 0.0..100.0f64,
        q in 0.0..100.0f64,
    ) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = nearest_rank(&values, lo).unwrap();
        let b = nearest_rank(&values, hi).unwrap();
        prop_assert!(values.contains(&a));
        prop_assert!(a <= b);
    }

    #[test]
    fn parity_groups_partition_the_annotators(
        truth_pred in prop::collection::vec((0..3usize, 0..3usize), 40),
        stat in prop::collection::vec(0.0..1.0f64, 8),
    ) {
        let pairs: Vec<Prediction> = truth_pred
            .iter()
            .enumerate()
            .map(|(k, &(t, p))| Prediction { item: k / 8, annotator: k % 8, truth: t, predicted: p })
            .collect();
        let set = PredictionSet::new(pairs).unwrap();
        let statistic: Vec<Option<f64>> = stat.into_iter().map(Some).collect();
        if let Ok(report) = parity_gap(&set, &statistic, 25.0) {
            prop_assert!((0.0..=1.0).contains(&report.gap));
            prop_assert_eq!(report.minority.len() + report.majority.len(), 8);
            prop_assert!(report.minority.iter().all(|a| !report.majority.contains(a)));
            prop_assert!(report.minority.iter().all(|&a| statistic[a].unwrap() <= report.threshold));
            prop_assert!(report.majority.iter().all(|&a| statistic[a].unwrap() > report.threshold));
        }
    }

    #[test]
    fn l2_penalty_is_absolutely_homogeneous(
        values in prop::collection::vec(-3.0..3.0f64, 12),
        c in -4.0..4.0f64,
    ) {
        let f = Array2::from_shape_vec((4, 3), values).unwrap();
        let scaled = f.mapv(|v| c * v);
        prop_assert!((l2_penalty(&scaled) - c.abs() * l2_penalty(&f)).abs() < 1e-9);
    }

    #[test]
    fn info_nce_is_translation_invariant(
        values in prop::collection::vec(-2.0..2.0f64, 15),
        offset in prop::collection::vec(-2.0..2.0f64, 3),
        labels in prop::collection::vec(0..2usize, 10),
        tau in 0.1..2.0f64,
    ) {
        let f = Array2::from_shape_vec((5, 3), values).unwrap();
        let mut moved = f.clone();
        for mut row in moved.rows_mut() {
            for (v, o) in row.iter_mut().zip(&offset) {
                *v += o;
            }
        }
        let records = labels
            .iter()
            .enumerate()
            .map(|(k, &label)| AnnotationRecord { item: k / 5, annotator: k % 5, label })
            .collect();
        let pairs = build_contrastive_pairs(&Batch::new(records), PairMode::Ordered);
        for norm in [Normalization::Mean, Normalization::Sum] {
            let a = info_nce(&f, &pairs, tau, norm).unwrap();
            let b = info_nce(&moved, &pairs, tau, norm).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_a_deterministic_covering_partition(
        items in 20..80usize,
        annotators in 3..10usize,
        q in 2..4usize,
        seed in any::<u64>(),
    ) {
        let corpus = planted(items, annotators, 3.min(annotators), q, seed);
        let split = stratified_split(&corpus, DEFAULT_SPLIT, seed).unwrap();
        prop_assert!(split.is_partition(corpus.num_items()));
        prop_assert!(split.unseen_annotators(&corpus).is_empty());
        prop_assert_eq!(stratified_split(&corpus, DEFAULT_SPLIT, seed).unwrap(), split);
    }

    #[test]
    fn corpus_jsonl_round_trips(items in 1..40usize, annotators in 1..6usize, seed in any::<u64>()) {
        let corpus = planted(items, annotators, 1, 3, seed);
        let text = corpus.to_jsonl_string();
        let back = Corpus::read_jsonl(text.as_bytes()).unwrap();
        prop_assert_eq!(back.to_jsonl_string(), text);
    }

    #[test]
    fn injected_annotators_follow_their_policy(items in 8..60usize, per_set in 1..5usize, seed in any::<u64>()) {
        let base = planted(items, 5, 3, 3, seed);
        let corpus = inject_synthetic_annotators(&base, per_set, seed).unwrap();
        prop_assert_eq!(corpus.num_annotators(), base.num_annotators() + 2 * per_set);
        for item in 0..base.num_items() {
            let majority = majority_label(base.item_labels(item)).unwrap();
            let synthetic: Vec<_> = corpus.item_records(item).filter(|r| corpus.is_synthetic(r.annotator)).collect();
            prop_assert_eq!(synthetic.len(), 2);
            for r in synthetic {
                let expected = match corpus.synthetic_policy(r.annotator).unwrap() {
                    SyntheticPolicy::Majority => majority,
                    SyntheticPolicy::AntiMajority => (majority + 1) % base.num_labels(),
                };
                prop_assert_eq!(r.label, expected);
            }
        }
    }
}
