//! Reproducible verification: random gradient checks and the acceptance
//! suite, one pass/fail result per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{annotator_embeddings, separation_score, synthetic_groups};
use crate::corpus::{
    generate_planted_corpus, inject_synthetic_annotators, stratified_split, stratified_split_detailed,
    AnnotationRecord, Corpus, DataSplit, PlantedAnnotator, PlantedCorpusSpec, DEFAULT_SPLIT,
};
use crate::encoder::{EmbeddingBag, Encoder, FixedVectors, TextInput};
use crate::metrics::{
    self, annotator_level_f1, disagreement_correlation, global_level_f1, grouping_statistic, parity_gap,
    per_annotator_f1, Correlation, Grouping, MetricsError, Prediction, PredictionSet,
};
use crate::model::{Activation, Combiner, Model, ModelKind, ModelShape, SingleTaskParams};
use crate::objective::{finite_difference_check, Batch, GradCheck, Normalization, ObjectiveConfig, PairMode};
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// A random small model, batch and objective for gradient checking.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub model: Model,
    pub tokens: Vec<Vec<usize>>,
    pub batch: Batch,
    pub objective: ObjectiveConfig,
}

/// Draws a case from `seed`. `(α, λ)` cycles through `{0, 0.2} × {0, 0.1}`
/// with the seed, so any four consecutive seeds cover every combination.
pub fn gradcheck_case(seed: u64) -> GradcheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (alpha, lambda) = [(0.0, 0.0), (0.2, 0.0), (0.0, 0.1), (0.2, 0.1)][(seed % 4) as usize];
    let m = rng.random_range(1..=6);
    let d = rng.random_range(1..=5);
    let q = rng.random_range(2..=3);
    let n_items = rng.random_range(1..=5);
    let vocab = rng.random_range(2..=8);
    let token_dim = rng.random_range(1..=4);
    let kind = [ModelKind::Aart, ModelKind::Aart, ModelKind::Multi, ModelKind::Single][rng.random_range(0..4)];
    let combiner = if rng.random_bool(0.25) {
        Combiner::ConcatOneHot
    } else {
        Combiner::Sum
    };

    let encoder = if rng.random_bool(0.2) {
        Encoder::Fixed(FixedVectors {
            vectors: Array2::from_shape_fn((n_items, d), |_| rng.random_range(-1.0..1.0)),
        })
    } else {
        Encoder::Bag(EmbeddingBag::init(vocab, token_dim, d, 6, &mut rng))
    };
    let shape = ModelShape {
        kind,
        combiner,
        num_annotators: m,
        num_labels: q,
        head_hidden: rng.random_range(0..=3),
        activation: if rng.random_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Relu
        },
        zero_annotator_init: false,
    };
    let mut model = Model::init(shape, encoder, &mut rng);
    for (_, t) in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let tokens: Vec<Vec<usize>> = (0..n_items)
        .map(|_| {
            let len = rng.random_range(1..=6);
            (0..len).map(|_| rng.random_range(0..vocab)).collect()
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (0..n_items).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    pairs.shuffle(&mut rng);
    let size = rng.random_range(1..=pairs.len().min(12));
    let records = pairs[..size]
        .iter()
        .map(|&(item, annotator)| AnnotationRecord {
            item,
            annotator,
            label: rng.random_range(0..q),
        })
        .collect();
    let objective = ObjectiveConfig {
        alpha,
        lambda,
        tau: [0.07, 0.5, 1.0][rng.random_range(0..3)],
        pairs: if rng.random_bool(0.5) {
            PairMode::Ordered
        } else {
            PairMode::Unordered
        },
        normalization: if rng.random_bool(0.5) {
            Normalization::Mean
        } else {
            Normalization::Sum
        },
    };
    GradcheckCase {
        model,
        tokens,
        batch: Batch::new(records),
        objective,
    }
}

pub fn run_gradcheck(seed: u64) -> Result<GradCheck, crate::objective::ObjectiveError> {
    let case = gradcheck_case(seed);
    finite_difference_check(
        &case.model,
        &case.tokens,
        &case.batch,
        &case.objective,
        crate::objective::DEFAULT_FD_STEP,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] criterion {}: {} ({:.1}s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed(id: u32, name: &str, run: impl FnOnce() -> (bool, String)) -> CriterionResult {
    let start = Instant::now();
    let (passed, detail) = run();
    CriterionResult {
        id,
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Seeds for the multi-seed criteria and the required number of passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    pub required: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: (1..=5).collect(),
            required: 4,
        }
    }
}

pub const SUITE_BUDGET_SECONDS: f64 = 15.0 * 60.0;

/// Runs every criterion in order; the last entry times the whole suite.
pub fn run_acceptance(options: &SuiteOptions) -> Vec<CriterionResult> {
    run_acceptance_with(options, |_| {})
}

/// As [`run_acceptance`], calling `report` after each criterion.
pub fn run_acceptance_with(options: &SuiteOptions, mut report: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut push = |r: CriterionResult| {
        report(&r);
        results.push(r);
    };
    push(gradient_correctness(100));
    push(metric_oracles(50));
    push(contrarian_recovery(options));
    push(sparse_annotator_fairness(options));
    push(synthetic_separation(options));
    push(disagreement_sign(options));
    push(degenerate_equivalence());
    push(split_protocol(50));
    let elapsed = start.elapsed().as_secs_f64();
    let all = results.iter().all(|r| r.passed);
    let r = CriterionResult {
        id: 9,
        name: "full suite".into(),
        passed: all && elapsed < SUITE_BUDGET_SECONDS,
        detail: format!(
            "{} of 8 criteria passed in {elapsed:.1}s (budget {SUITE_BUDGET_SECONDS}s)",
            results.iter().filter(|r| r.passed).count()
        ),
        seconds: elapsed,
    };
    report(&r);
    results.push(r);
    results
}

pub fn gradient_correctness(cases: u64) -> CriterionResult {
    timed(1, "gradient correctness", || {
        let mut worst = 0.0f64;
        let mut worst_seed = 0;
        let mut scalars = 0;
        for seed in 0..cases {
            match run_gradcheck(seed) {
                Ok(c) => {
                    scalars += c.scalars_checked;
                    if c.max_relative_error > worst {
                        worst = c.max_relative_error;
                        worst_seed = seed;
                    }
                }
                Err(e) => return (false, format!("seed {seed}: {e}")),
            }
        }
        (
            worst <= GRADCHECK_TOLERANCE,
            format!("{cases} configurations, {scalars} scalars, max relative error {worst:.3e} (seed {worst_seed}, tolerance {GRADCHECK_TOLERANCE:e})"),
        )
    })
}

// Brute-force metric oracles, written without the metrics module.

fn oracle_macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let mut labels: Vec<usize> = truth.iter().chain(pred).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    let mut f1s = Vec::new();
    for &c in &labels {
        let mut confusion = [[0usize; 2]; 2];
        for k in 0..truth.len() {
            confusion[usize::from(truth[k] == c)][usize::from(pred[k] == c)] += 1;
        }
        let tp = confusion[1][1] as f64;
        let predicted = (confusion[0][1] + confusion[1][1]) as f64;
        let actual = (confusion[1][0] + confusion[1][1]) as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        f1s.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

fn oracle_disagreement(labels: &[usize]) -> f64 {
    let max_label = *labels.iter().max().expect("non-empty");
    let mut counts = vec![0usize; max_label + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    let majority = counts.iter().position(|&c| c == top).expect("present");
    labels.iter().filter(|&&l| l != majority).count() as f64 / labels.len() as f64
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0]) {
        return None;
    }
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    Some((n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt()))
}

/// Gap, or `None` when a group would have fewer than two annotators.
fn oracle_parity(pairs: &[Prediction], stat: &[f64]) -> Option<f64> {
    let annotators: BTreeSet<usize> = pairs.iter().map(|p| p.annotator).collect();
    let mut values: Vec<f64> = annotators.iter().map(|&a| stat[a]).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let rank = (values.len() as f64 * 0.25).ceil().max(1.0) as usize;
    let threshold = values[rank - 1];
    let minority: BTreeSet<usize> = annotators.iter().copied().filter(|&a| stat[a] <= threshold).collect();
    if minority.len() < 2 || annotators.len() - minority.len() < 2 {
        return None;
    }
    let (mut hit, mut tot) = ([0usize; 2], [0usize; 2]);
    for p in pairs {
        let g = usize::from(minority.contains(&p.annotator));
        tot[g] += 1;
        hit[g] += usize::from(p.truth == p.predicted);
    }
    Some((hit[0] as f64 / tot[0] as f64 - hit[1] as f64 / tot[1] as f64).abs())
}

fn random_fixture(rng: &mut ChaCha8Rng) -> (Vec<Prediction>, Vec<f64>, usize) {
    let m = rng.random_range(2..=10);
    let n = rng.random_range(2..=20);
    let q = rng.random_range(2..=4);
    let accuracy = rng.random_range(0.3..1.0);
    let mut pairs = Vec::new();
    for item in 0..n {
        let mut annotators: Vec<usize> = (0..m).collect();
        annotators.shuffle(rng);
        let k = rng.random_range(1..=m);
        for &annotator in &annotators[..k] {
            let truth = rng.random_range(0..q);
            let predicted = if rng.random_bool(accuracy) {
                truth
            } else {
                rng.random_range(0..q)
            };
            pairs.push(Prediction {
                item,
                annotator,
                truth,
                predicted,
            });
        }
    }
    pairs.shuffle(rng);
    // Coarse values so threshold ties occur.
    let stat = (0..m).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
    (pairs, stat, m)
}

pub fn metric_oracles(fixtures: u64) -> CriterionResult {
    timed(2, "metric oracle equivalence", || {
        let tol = 1e-12;
        let mut worst = 0.0f64;
        let mut checks = 0usize;
        for seed in 0..fixtures {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let (pairs, stat, _) = random_fixture(&mut rng);
            let set = PredictionSet::new(pairs.clone()).expect("unique pairs");
            let mut note = |got: f64, want: f64| {
                worst = worst.max((got - want).abs());
                checks += 1;
            };

            let mut by_annotator: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
            let mut by_item: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
            for p in &pairs {
                let a = by_annotator.entry(p.annotator).or_default();
                a.0.push(p.truth);
                a.1.push(p.predicted);
                let i = by_item.entry(p.item).or_default();
                i.0.push(p.truth);
                i.1.push(p.predicted);
            }
            let per: Vec<f64> = by_annotator.values().map(|(t, p)| oracle_macro_f1(t, p)).collect();
            note(
                annotator_level_f1(&set).expect("non-empty"),
                per.iter().sum::<f64>() / per.len() as f64,
            );
            let truths: Vec<usize> = pairs.iter().map(|p| p.truth).collect();
            let preds: Vec<usize> = pairs.iter().map(|p| p.predicted).collect();
            note(
                global_level_f1(&set).expect("non-empty"),
                oracle_macro_f1(&truths, &preds),
            );

            let rows = metrics::item_disagreements(&set);
            let true_d: Vec<f64> = by_item.values().map(|(t, _)| oracle_disagreement(t)).collect();
            let pred_d: Vec<f64> = by_item.values().map(|(_, p)| oracle_disagreement(p)).collect();
            for (k, row) in rows.iter().enumerate() {
                note(row.1, true_d[k]);
                note(row.2, pred_d[k]);
            }
            match (
                disagreement_correlation(&set).expect(">= 2 items"),
                oracle_pearson(&true_d, &pred_d),
            ) {
                (Correlation::Defined(r), Some(o)) => note(r, o.clamp(-1.0, 1.0)),
                (Correlation::Undefined, None) => note(0.0, 0.0),
                (got, want) => return (false, format!("fixture {seed}: correlation {got:?} vs oracle {want:?}")),
            }

            let stat_opt: Vec<Option<f64>> = stat.iter().map(|&s| Some(s)).collect();
            match (parity_gap(&set, &stat_opt, 25.0), oracle_parity(&pairs, &stat)) {
                (Ok(r), Some(o)) => note(r.gap, o),
                (Err(MetricsError::Grouping(_)), None) => note(0.0, 0.0),
                (got, want) => return (false, format!("fixture {seed}: parity {got:?} vs oracle {want:?}")),
            }
        }
        (
            worst <= tol,
            format!("{fixtures} fixtures, {checks} comparisons, max abs deviation {worst:.2e} (tolerance {tol:e})"),
        )
    })
}

/// Training settings shared by the qualitative criteria.
pub fn acceptance_config(kind: ModelKind, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 32,
        max_epochs: 20,
        alpha: 0.1,
        lambda: 0.0,
        dim: 32,
        token_dim: 32,
        seed,
        model_kind: kind,
        ..Default::default()
    }
}

fn spread_thresholds(n: usize, low: f64, high: f64) -> Vec<f64> {
    (0..n)
        .map(|j| {
            if n == 1 {
                0.5
            } else {
                low + (high - low) * j as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn test_predictions(outcome: &TrainOutcome, corpus: &Corpus, split: &DataSplit) -> PredictionSet {
    let tokens = outcome.checkpoint.tokenize(corpus);
    PredictionSet::from_model(&outcome.checkpoint.model, corpus, &tokens, &split.test).expect("model covers corpus")
}

fn planted(spec: &PlantedCorpusSpec) -> (Corpus, Vec<usize>, DataSplit) {
    let p = generate_planted_corpus(spec).expect("valid planted spec");
    let split = stratified_split(&p.corpus, DEFAULT_SPLIT, spec.seed).expect("valid fractions");
    (p.corpus, p.contrarians, split)
}

fn tally(options: &SuiteOptions, per_seed: Vec<(bool, String)>) -> (bool, String) {
    let passes = per_seed.iter().filter(|r| r.0).count();
    let lines: Vec<String> = options
        .seeds
        .iter()
        .zip(&per_seed)
        .map(|(s, (ok, d))| format!("seed {s} {}: {d}", if *ok { "ok" } else { "miss" }))
        .collect();
    (
        passes >= options.required,
        format!("{passes}/{} seeds [{}]", per_seed.len(), lines.join("; ")),
    )
}

pub fn contrarian_spec(seed: u64) -> PlantedCorpusSpec {
    let mut annotators = vec![PlantedAnnotator::new(0.5, 0.0); 18];
    annotators.extend([PlantedAnnotator::new(0.5, 1.0), PlantedAnnotator::new(0.5, 1.0)]);
    PlantedCorpusSpec {
        num_items: 500,
        annotations_per_item: 5,
        num_labels: 2,
        annotators,
        noise_rate: 0.05,
        seed,
    }
}

pub fn contrarian_recovery(options: &SuiteOptions) -> CriterionResult {
    timed(3, "contrarian-annotator recovery", || {
        let per_seed = options
            .seeds
            .iter()
            .map(|&seed| {
                let start = Instant::now();
                let (corpus, contrarians, split) = planted(&contrarian_spec(seed));
                let aart = train(&corpus, &split, &acceptance_config(ModelKind::Aart, seed)).expect("training");
                let single = train(&corpus, &split, &acceptance_config(ModelKind::Single, seed)).expect("training");
                let fa = per_annotator_f1(&test_predictions(&aart, &corpus, &split)).expect("scores");
                let fs = per_annotator_f1(&test_predictions(&single, &corpus, &split)).expect("scores");
                let secs = start.elapsed().as_secs_f64();
                let mut ok = secs < 300.0 && contrarians.len() == 2;
                let mut parts = Vec::new();
                for c in &contrarians {
                    let (a, s) = (fa.get(c).copied(), fs.get(c).copied());
                    ok &= a.is_some_and(|v| v >= 0.8) && s.is_some_and(|v| v <= 0.2);
                    parts.push(format!(
                        "{}: aart {:.3} single {:.3}",
                        corpus.annotator_id(*c),
                        a.unwrap_or(f64::NAN),
                        s.unwrap_or(f64::NAN)
                    ));
                }
                (ok, format!("{} ({secs:.0}s)", parts.join(", ")))
            })
            .collect();
        tally(options, per_seed)
    })
}

pub fn sparse_spec(seed: u64) -> PlantedCorpusSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let annotators = (0..40)
        .map(|j| PlantedAnnotator {
            max_annotations: (j < 10).then_some(10),
            ..PlantedAnnotator::new(rng.random_range(0.4..0.6), 0.0)
        })
        .collect();
    PlantedCorpusSpec {
        num_items: 1000,
        annotations_per_item: 5,
        num_labels: 3,
        annotators,
        noise_rate: 0.05,
        seed,
    }
}

pub fn sparse_annotator_fairness(options: &SuiteOptions) -> CriterionResult {
    timed(4, "sparse-annotator fairness", || {
        let per_seed = options
            .seeds
            .iter()
            .map(|&seed| {
                let (corpus, _, split) = planted(&sparse_spec(seed));
                let stat = grouping_statistic(&corpus, &split.train, Grouping::Contribution);
                let gap = |kind| {
                    let out = train(&corpus, &split, &acceptance_config(kind, seed)).expect("training");
                    parity_gap(&test_predictions(&out, &corpus, &split), &stat, 25.0).map(|r| r.gap)
                };
                match (gap(ModelKind::Aart), gap(ModelKind::Multi)) {
                    (Ok(a), Ok(m)) => (a <= m, format!("aart gap {a:.3}, multi gap {m:.3}")),
                    (a, m) => (false, format!("grouping failed: {a:?} / {m:?}")),
                }
            })
            .collect();
        tally(options, per_seed)
    })
}

pub fn heterogeneous_spec(seed: u64) -> PlantedCorpusSpec {
    let annotators = spread_thresholds(20, 0.3, 0.7)
        .into_iter()
        .map(|t| PlantedAnnotator::new(t, 0.0))
        .collect();
    PlantedCorpusSpec {
        num_items: 500,
        annotations_per_item: 5,
        num_labels: 2,
        annotators,
        noise_rate: 0.05,
        seed,
    }
}

pub fn synthetic_separation(options: &SuiteOptions) -> CriterionResult {
    timed(5, "synthetic-annotator separation", || {
        let per_seed = options
            .seeds
            .iter()
            .map(|&seed| {
                let base = generate_planted_corpus(&heterogeneous_spec(seed)).expect("valid spec");
                let corpus = inject_synthetic_annotators(&base.corpus, 8, seed).expect("injection");
                let split = stratified_split(&corpus, DEFAULT_SPLIT, seed).expect("split");
                let out = train(&corpus, &split, &acceptance_config(ModelKind::Aart, seed)).expect("training");
                let f = annotator_embeddings(&out.checkpoint.model).expect("aart model");
                let (maj, anti) = synthetic_groups(&corpus);
                match separation_score(f.view(), &maj, &anti) {
                    Ok(s) => (
                        s == 1.0,
                        format!("{:.0}/{} separated", s * 16.0, maj.len() + anti.len()),
                    ),
                    Err(e) => (false, e.to_string()),
                }
            })
            .collect();
        tally(options, per_seed)
    })
}

pub fn disagreement_sign(options: &SuiteOptions) -> CriterionResult {
    timed(6, "disagreement correlation sign", || {
        let per_seed = options
            .seeds
            .iter()
            .map(|&seed| {
                let (corpus, _, split) = planted(&heterogeneous_spec(seed));
                let r = |kind| {
                    let out = train(&corpus, &split, &acceptance_config(kind, seed)).expect("training");
                    disagreement_correlation(&test_predictions(&out, &corpus, &split)).expect(">= 2 test items")
                };
                let (a, s) = (r(ModelKind::Aart), r(ModelKind::Single));
                let ok = matches!(a, Correlation::Defined(v) if v > 0.2) && s == Correlation::Undefined;
                (ok, format!("aart {a:?}, single {s:?}"))
            })
            .collect();
        tally(options, per_seed)
    })
}

pub fn degenerate_equivalence() -> CriterionResult {
    timed(7, "degenerate equivalence", || {
        let spec = PlantedCorpusSpec {
            annotators: spread_thresholds(8, 0.35, 0.65)
                .into_iter()
                .map(|t| PlantedAnnotator::new(t, 0.0))
                .collect(),
            ..PlantedCorpusSpec::uniform(100, 8, 3, 2, 7)
        };
        let (corpus, _, split) = planted(&spec);
        let cfg = TrainConfig {
            zero_annotator_init: true,
            freeze_annotator_embeddings: true,
            max_epochs: 5,
            alpha: 0.2,
            lambda: 0.1,
            ..acceptance_config(ModelKind::Aart, 7)
        };
        let out = train(&corpus, &split, &cfg).expect("training");
        let Model::Aart(p) = &out.checkpoint.model else {
            return (false, "expected an AART checkpoint".into());
        };
        if p.annotators.iter().any(|&v| v != 0.0) {
            return (false, "frozen embeddings moved".into());
        }
        let single = Model::Single(SingleTaskParams {
            head: p.head.clone(),
            encoder: p.encoder.clone(),
        });
        let tokens = out.checkpoint.tokenize(&corpus);
        let mut mismatches = 0;
        for r in corpus.records() {
            let x = TextInput {
                item: r.item,
                tokens: &tokens[r.item],
            };
            let a = out.checkpoint.model.predict(x, r.annotator).expect("known annotator");
            let s = single.predict(x, r.annotator).expect("single");
            mismatches += usize::from(a != s);
        }
        (
            mismatches == 0,
            format!(
                "{mismatches} mismatches over {} item-annotator pairs",
                corpus.records().len()
            ),
        )
    })
}

fn random_split_corpus(rng: &mut ChaCha8Rng, seed: u64) -> Corpus {
    let m = rng.random_range(3..=15);
    let annotators = (0..m)
        .map(|_| PlantedAnnotator {
            weight: rng.random_range(0.2..2.0),
            ..PlantedAnnotator::new(rng.random_range(0.2..0.8), rng.random_range(0.0..0.3))
        })
        .collect();
    let spec = PlantedCorpusSpec {
        num_items: rng.random_range(10..=200),
        annotations_per_item: rng.random_range(1..=m.min(5)),
        num_labels: rng.random_range(2..=4),
        annotators,
        noise_rate: rng.random_range(0.0..0.3),
        seed,
    };
    generate_planted_corpus(&spec).expect("valid spec").corpus
}

pub fn split_protocol(corpora: u64) -> CriterionResult {
    timed(8, "split protocol", || {
        let mut failures = Vec::new();
        let mut transferred = 0;
        for k in 0..corpora {
            let mut rng = ChaCha8Rng::seed_from_u64(20_000 + k);
            let corpus = random_split_corpus(&mut rng, k);
            let seed = rng.random();
            let out = stratified_split_detailed(&corpus, DEFAULT_SPLIT, seed).expect("split");
            transferred += out.transferred.len();
            let n = corpus.num_items();
            if !out.split.is_partition(n) {
                failures.push(format!("corpus {k}: not a partition"));
            }
            // Every dev/test annotator must have a train record.
            let train_annotators: BTreeSet<usize> = out
                .split
                .train
                .iter()
                .flat_map(|&i| corpus.item_records(i).map(|r| r.annotator))
                .collect();
            let unseen = out
                .split
                .dev
                .iter()
                .chain(&out.split.test)
                .flat_map(|&i| corpus.item_records(i).map(|r| r.annotator))
                .any(|a| !train_annotators.contains(&a));
            if unseen {
                failures.push(format!("corpus {k}: unseen dev/test annotator"));
            }
            // Strata by the exact disagreement value.
            let mut strata: BTreeMap<u64, [usize; 4]> = BTreeMap::new();
            let place = |i: usize| {
                if out.initial.train.binary_search(&i).is_ok() {
                    0
                } else if out.initial.dev.binary_search(&i).is_ok() {
                    1
                } else {
                    2
                }
            };
            for i in 0..n {
                let d = oracle_disagreement(&corpus.item_labels(i));
                let s = strata.entry(d.to_bits()).or_default();
                s[place(i)] += 1;
                s[3] += 1;
            }
            for (key, s) in &strata {
                for (slot, frac) in DEFAULT_SPLIT.iter().enumerate() {
                    if (s[slot] as f64 - frac * s[3] as f64).abs() > 1.0 {
                        failures.push(format!(
                            "corpus {k}: stratum {} slot {slot} has {} of {}",
                            f64::from_bits(*key),
                            s[slot],
                            s[3]
                        ));
                    }
                }
            }
            let again = stratified_split(&corpus, DEFAULT_SPLIT, seed).expect("split");
            if again.to_json(&corpus) != out.split.to_json(&corpus) {
                failures.push(format!("corpus {k}: rerun differs"));
            }
        }
        (
            failures.is_empty(),
            if failures.is_empty() {
                format!("{corpora} corpora: partition, coverage, proportions and determinism hold ({transferred} items transferred)")
            } else {
                failures.join("; ")
            },
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_cases_cover_every_weight_combination() {
        let combos: BTreeSet<(u64, u64)> = (0..4)
            .map(|s| {
                let c = gradcheck_case(s);
                (c.objective.alpha.to_bits(), c.objective.lambda.to_bits())
            })
            .collect();
        assert_eq!(combos.len(), 4);
        assert!(run_gradcheck(1).unwrap().max_relative_error <= GRADCHECK_TOLERANCE);
    }

    #[test]
    fn oracles_agree_on_hand_cases() {
        assert_eq!(oracle_macro_f1(&[0, 0, 1, 1], &[0, 1, 0, 1]), 0.5);
        assert_eq!(oracle_disagreement(&[1, 0, 1]), 1.0 / 3.0);
        assert_eq!(oracle_disagreement(&[0, 1]), 0.5);
        assert!((oracle_pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(oracle_pearson(&[1.0, 1.0], &[2.0, 4.0]), None);
    }
}
