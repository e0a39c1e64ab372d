//! Training objective: cross-entropy, the L2 norm penalty on annotator
//! embeddings and an InfoNCE term over annotators sharing an item, with
//! analytic gradients and a central finite-difference checker.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AnnotationRecord;
use crate::encoder::TextInput;
use crate::model::{Combiner, Model, ModelError, TensorRole};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// How positive pairs are enumerated on an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Both `(j, j')` and `(j', j)`.
    #[default]
    Ordered,
    /// One pair per unordered couple, anchored at the earlier batch entry.
    Unordered,
}

/// Reduction of the per-pair contrastive losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide the sum by the number of positive pairs.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Contrastive weight.
    pub alpha: f64,
    /// L2 penalty weight.
    pub lambda: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub pairs: PairMode,
    pub normalization: Normalization,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda: 0.0,
            tau: 0.07,
            pairs: PairMode::Ordered,
            normalization: Normalization::Mean,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ObjectiveError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(ObjectiveError::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ObjectiveError::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l2: f64,
    pub contrastive: f64,
    pub total: f64,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
}

/// A mini-batch of training examples. Single-task batches carry the
/// aggregated label and ignore the annotator field.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub records: Vec<AnnotationRecord>,
}

impl Batch {
    pub fn new(records: Vec<AnnotationRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Batch positions grouped by item, items in order of first appearance.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut order: Vec<usize> = Vec::new();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, r) in self.records.iter().enumerate() {
            let slot = groups.entry(r.item).or_default();
            if slot.is_empty() {
                order.push(r.item);
            }
            slot.push(pos);
        }
        order
            .into_iter()
            .map(|item| {
                let g = groups.remove(&item).unwrap_or_default();
                (item, g)
            })
            .collect()
    }
}

/// Contrastive pairs formed on one item.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemPairs {
    pub item: usize,
    /// `(anchor, positive)` annotator pairs that gave the same label.
    pub positives: Vec<(usize, usize)>,
    /// Annotators on the item that disagree with each anchor.
    pub negatives: BTreeMap<usize, Vec<usize>>,
}

impl ItemPairs {
    pub fn negative_count(&self) -> usize {
        self.negatives.values().map(Vec::len).sum()
    }
}

/// Positive and negative annotator sets for every item of the batch with at
/// least two annotators in the batch.
pub fn build_contrastive_pairs(batch: &Batch, mode: PairMode) -> Vec<ItemPairs> {
    let mut out = Vec::new();
    for (item, positions) in batch.groups() {
        if positions.len() < 2 {
            continue;
        }
        let members: Vec<(usize, usize)> = positions
            .iter()
            .map(|&p| (batch.records[p].annotator, batch.records[p].label))
            .collect();
        let mut pairs = ItemPairs {
            item,
            ..Default::default()
        };
        for (a_pos, &(a, a_label)) in members.iter().enumerate() {
            for (b_pos, &(b, b_label)) in members.iter().enumerate() {
                if a_pos == b_pos {
                    continue;
                }
                if a_label == b_label {
                    if mode == PairMode::Ordered || a_pos < b_pos {
                        pairs.positives.push((a, b));
                    }
                } else {
                    pairs.negatives.entry(a).or_default().push(b);
                }
            }
            pairs.negatives.entry(a).or_default();
        }
        out.push(pairs);
    }
    out
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> Result<f64> {
    cross_entropy_with_grad(logits, label).map(|(loss, _)| loss)
}

/// Cross-entropy and its gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy_with_grad(logits: &Array1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(ObjectiveError::InvalidInput(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ObjectiveError::Numerical(format!("non-finite logits {logits}")));
    }
    let lse = log_sum_exp(logits.as_slice().expect("contiguous"));
    let loss = lse - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `Σ_j ‖F[j]‖₂` (plain, not squared, norms).
pub fn l2_penalty(embeddings: &Array2<f64>) -> f64 {
    embeddings.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum()
}

/// Adds `scale · ∂/∂F Σ_j ‖F[j]‖` into `grad`; zero rows get the zero
/// subgradient.
pub fn l2_penalty_grad(embeddings: &Array2<f64>, scale: f64, grad: &mut Array2<f64>) {
    for (row, mut g) in embeddings.rows().into_iter().zip(grad.rows_mut()) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            g.scaled_add(scale / norm, &row);
        }
    }
}

fn squared_distance(embeddings: &Array2<f64>, a: usize, b: usize) -> f64 {
    embeddings
        .row(a)
        .iter()
        .zip(embeddings.row(b).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// InfoNCE over annotator embedding rows.
pub fn info_nce(embeddings: &Array2<f64>, pairs: &[ItemPairs], tau: f64, normalization: Normalization) -> Result<f64> {
    contrastive(embeddings, pairs, tau, normalization, None)
}

/// InfoNCE value, adding `scale · ∂/∂F` into `grad`.
pub fn info_nce_with_grad(
    embeddings: &Array2<f64>,
    pairs: &[ItemPairs],
    tau: f64,
    normalization: Normalization,
    scale: f64,
    grad: &mut Array2<f64>,
) -> Result<f64> {
    contrastive(embeddings, pairs, tau, normalization, Some((scale, grad)))
}

fn contrastive(
    embeddings: &Array2<f64>,
    pairs: &[ItemPairs],
    tau: f64,
    normalization: Normalization,
    mut grad: Option<(f64, &mut Array2<f64>)>,
) -> Result<f64> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ObjectiveError::Config(format!("tau must be > 0, got {tau}")));
    }
    let count: usize = pairs.iter().map(|p| p.positives.len()).sum();
    if count == 0 {
        return Ok(0.0);
    }
    let norm = match normalization {
        Normalization::Mean => count as f64,
        Normalization::Sum => 1.0,
    };
    let mut total = 0.0;
    let mut candidates = Vec::new();
    let mut scores = Vec::new();
    for item in pairs {
        for &(anchor, positive) in &item.positives {
            candidates.clear();
            candidates.extend(item.negatives.get(&anchor).into_iter().flatten().copied());
            candidates.push(positive);
            scores.clear();
            scores.extend(
                candidates
                    .iter()
                    .map(|&k| -squared_distance(embeddings, anchor, k) / tau),
            );
            let lse = log_sum_exp(&scores);
            let loss = lse - scores[scores.len() - 1];
            if !loss.is_finite() {
                return Err(ObjectiveError::Numerical(format!(
                    "contrastive loss for pair ({anchor}, {positive}) is {loss}"
                )));
            }
            total += loss;
            if let Some((scale, g)) = grad.as_mut() {
                // dL/ds_k = p_k - [k = positive]; ds_k/dF[a] = -2 (F[a]-F[k]) / tau.
                let last = candidates.len() - 1;
                for (idx, (&k, &s)) in candidates.iter().zip(&scores).enumerate() {
                    let mut ds = (s - lse).exp();
                    if idx == last {
                        ds -= 1.0;
                    }
                    let coeff = *scale * ds * 2.0 / (tau * norm);
                    if coeff == 0.0 {
                        continue;
                    }
                    let diff = &embeddings.row(anchor) - &embeddings.row(k);
                    g.row_mut(anchor).scaled_add(-coeff, &diff);
                    g.row_mut(k).scaled_add(coeff, &diff);
                }
            }
        }
    }
    Ok(total / norm)
}

fn embedding_terms_apply(model: &Model) -> Option<&Array2<f64>> {
    match model {
        Model::Aart(p) if p.combiner == Combiner::Sum => Some(&p.annotators),
        _ => None,
    }
}

fn input<'a>(tokens: &'a [Vec<usize>], item: usize) -> Result<TextInput<'a>> {
    let t = tokens
        .get(item)
        .ok_or_else(|| ObjectiveError::InvalidInput(format!("no tokens for item #{item}")))?;
    Ok(TextInput { item, tokens: t })
}

/// Loss only, without gradients.
pub fn total_loss(model: &Model, tokens: &[Vec<usize>], batch: &Batch, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    evaluate(model, tokens, batch, cfg, None)
}

/// Loss breakdown and analytic gradients of
/// `ce + λ·Σ‖F[j]‖ + α·contrastive` with respect to every parameter.
pub fn total_loss_and_gradients(
    model: &Model,
    tokens: &[Vec<usize>],
    batch: &Batch,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Model)> {
    let mut grads = model.zeros_like();
    let loss = evaluate(model, tokens, batch, cfg, Some(&mut grads))?;
    Ok((loss, grads))
}

fn evaluate(
    model: &Model,
    tokens: &[Vec<usize>],
    batch: &Batch,
    cfg: &ObjectiveConfig,
    mut grads: Option<&mut Model>,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut ce_sum = 0.0;
    for r in &batch.records {
        let x = input(tokens, r.item)?;
        let e = model.encoder().encode(x).map_err(ModelError::from)?;
        let trace = model.trace_from_embedding(&e, r.annotator)?;
        let (loss, mut dlogits) = cross_entropy_with_grad(trace.logits(), r.label)?;
        ce_sum += loss;
        if let Some(g) = grads.as_deref_mut() {
            dlogits *= scale;
            model.accumulate_backward(x, r.annotator, &trace, &dlogits, g)?;
        }
    }
    let ce = ce_sum * scale;

    let mut breakdown = LossBreakdown {
        ce,
        ..Default::default()
    };
    if let Some(embeddings) = embedding_terms_apply(model) {
        breakdown.l2 = l2_penalty(embeddings);
        let embedding_grad = grads.map(|g| match g {
            Model::Aart(p) => &mut p.annotators,
            _ => unreachable!("gradient buffer follows the model layout"),
        });
        let pairs = if cfg.alpha != 0.0 {
            build_contrastive_pairs(batch, cfg.pairs)
        } else {
            Vec::new()
        };
        breakdown.positive_pairs = pairs.iter().map(|p| p.positives.len()).sum();
        breakdown.negative_pairs = pairs.iter().map(ItemPairs::negative_count).sum();
        match embedding_grad {
            Some(g) => {
                if cfg.lambda != 0.0 {
                    l2_penalty_grad(embeddings, cfg.lambda, g);
                }
                if cfg.alpha != 0.0 {
                    breakdown.contrastive =
                        info_nce_with_grad(embeddings, &pairs, cfg.tau, cfg.normalization, cfg.alpha, g)?;
                }
            }
            None if cfg.alpha != 0.0 => {
                breakdown.contrastive = info_nce(embeddings, &pairs, cfg.tau, cfg.normalization)?;
            }
            None => {}
        }
    }
    breakdown.total = breakdown.ce + cfg.lambda * breakdown.l2 + cfg.alpha * breakdown.contrastive;
    if !breakdown.total.is_finite() {
        return Err(ObjectiveError::Numerical(format!("total loss is {}", breakdown.total)));
    }
    Ok(breakdown)
}

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub role: Option<TensorRole>,
    pub scalars_checked: usize,
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Perturbs every scalar parameter by `±eps` and compares the central
/// difference of the total loss with the analytic gradient.
pub fn finite_difference_check(
    model: &Model,
    tokens: &[Vec<usize>],
    batch: &Batch,
    cfg: &ObjectiveConfig,
    eps: f64,
) -> Result<GradCheck> {
    let (_, grads) = total_loss_and_gradients(model, tokens, batch, cfg)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
    let mut probe = model.clone();
    let roles: Vec<TensorRole> = probe.tensors_mut().into_iter().map(|(r, _)| r).collect();
    let mut worst = GradCheck {
        max_relative_error: 0.0,
        tensor: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        role: None,
        scalars_checked: 0,
    };
    for (t, role) in roles.iter().enumerate() {
        for k in 0..analytic[t].len() {
            let original = probe.tensors_mut()[t].1[k];
            probe.tensors_mut()[t].1[k] = original + eps;
            let plus = total_loss(&probe, tokens, batch, cfg)?.total;
            probe.tensors_mut()[t].1[k] = original - eps;
            let minus = total_loss(&probe, tokens, batch, cfg)?.total;
            probe.tensors_mut()[t].1[k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t][k];
            let rel = relative_error(a, numeric);
            worst.scalars_checked += 1;
            if rel > worst.max_relative_error || worst.role.is_none() {
                worst = GradCheck {
                    max_relative_error: rel.max(worst.max_relative_error),
                    tensor: t,
                    index: k,
                    analytic: a,
                    numeric,
                    role: Some(*role),
                    scalars_checked: worst.scalars_checked,
                };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EmbeddingBag, Encoder};
    use crate::model::{Activation, ModelKind, ModelShape};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(item: usize, annotator: usize, label: usize) -> AnnotationRecord {
        AnnotationRecord { item, annotator, label }
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&array![0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(&array![100.0, 0.0], 0).unwrap() <= 1e-40);
        assert!(matches!(
            cross_entropy(&array![f64::NAN, 0.0], 0),
            Err(ObjectiveError::Numerical(_))
        ));
        // Direct formula on moderate logits.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let logits: Array1<f64> = Array1::from_shape_fn(4, |_| rng.random_range(-5.0..5.0));
            let label = rng.random_range(0..4);
            let direct = -(logits[label].exp() / logits.mapv(f64::exp).sum()).ln();
            assert!((cross_entropy(&logits, label).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_penalty(&Array2::zeros((3, 2))), 0.0);
        assert_eq!(l2_penalty(&array![[3.0, 4.0]]), 5.0);
        let mut g = Array2::zeros((2, 2));
        l2_penalty_grad(&array![[0.0, 0.0], [3.0, 4.0]], 2.0, &mut g);
        let expected = array![[0.0, 0.0], [1.2, 1.6]];
        assert!(g.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn pair_enumeration() {
        let batch = Batch::new(vec![rec(0, 1, 0), rec(0, 2, 0), rec(0, 3, 1), rec(1, 1, 0)]);
        let pairs = build_contrastive_pairs(&batch, PairMode::Ordered);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].positives, vec![(1, 2), (2, 1)]);
        assert_eq!(pairs[0].negatives[&1], vec![3]);
        assert_eq!(pairs[0].negatives[&3], vec![1, 2]);
        let unordered = build_contrastive_pairs(&batch, PairMode::Unordered);
        assert_eq!(unordered[0].positives, vec![(1, 2)]);

        let all_same = Batch::new(vec![rec(4, 0, 1), rec(4, 1, 1), rec(4, 2, 1)]);
        let p = build_contrastive_pairs(&all_same, PairMode::Ordered);
        assert_eq!(p[0].positives.len(), 6);
        assert!(p[0].negatives.values().all(Vec::is_empty));
    }

    #[test]
    fn info_nce_examples() {
        let f = array![[0.1, 0.2], [0.4, -0.3], [0.1, 0.2]];
        let single = ItemPairs {
            item: 0,
            positives: vec![(0, 1)],
            negatives: BTreeMap::from([(0, vec![])]),
        };
        assert!(info_nce(&f, &[single], 0.07, Normalization::Mean).unwrap().abs() < 1e-15);

        let equal = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let with_neg = ItemPairs {
            item: 0,
            positives: vec![(0, 1)],
            negatives: BTreeMap::from([(0, vec![2])]),
        };
        let l = info_nce(&equal, &[with_neg], 0.07, Normalization::Mean).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            info_nce(&equal, &[], 0.0, Normalization::Mean),
            Err(ObjectiveError::Config(_))
        ));
    }

    #[test]
    fn info_nce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let f: Array2<f64> = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..2)).collect();
            let batch = Batch::new((0..4).map(|j| rec(0, j, labels[j])).collect());
            let pairs = build_contrastive_pairs(&batch, PairMode::Ordered);
            let tau = 0.5;
            let mut sum = 0.0;
            let mut count = 0;
            for j in 0..4 {
                for jp in 0..4 {
                    if j == jp || labels[j] != labels[jp] {
                        continue;
                    }
                    let sim = |k: usize| {
                        let d: f64 = (0..3).map(|c| (f[[j, c]] - f[[k, c]]).powi(2)).sum();
                        (-d / tau).exp()
                    };
                    let denom: f64 = (0..4).filter(|&k| labels[k] != labels[j]).map(sim).sum::<f64>() + sim(jp);
                    sum += -(sim(jp) / denom).ln();
                    count += 1;
                }
            }
            let expected = if count == 0 { 0.0 } else { sum / count as f64 };
            let got = info_nce(&f, &pairs, tau, Normalization::Mean).unwrap();
            assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }

    #[test]
    fn info_nce_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let shifted = &f + &array![3.0, -2.0, 0.5];
        let batch = Batch::new(vec![
            rec(0, 0, 1),
            rec(0, 1, 1),
            rec(0, 2, 0),
            rec(0, 3, 1),
            rec(0, 4, 0),
        ]);
        let pairs = build_contrastive_pairs(&batch, PairMode::Ordered);
        let a = info_nce(&f, &pairs, 0.3, Normalization::Sum).unwrap();
        let b = info_nce(&shifted, &pairs, 0.3, Normalization::Sum).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    fn small_model(kind: ModelKind, seed: u64) -> (Model, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::Bag(EmbeddingBag {
            embeddings: Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0)),
            projection: Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)),
            max_seq_len: 10,
        });
        let mut model = Model::init(
            ModelShape {
                kind,
                combiner: Combiner::Sum,
                num_annotators: 5,
                num_labels: 3,
                head_hidden: 3,
                activation: Activation::Tanh,
                zero_annotator_init: false,
            },
            enc,
            &mut rng,
        );
        for (_, t) in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let tokens = vec![vec![0, 1, 2], vec![3, 3], vec![4, 5, 6, 1]];
        (model, tokens)
    }

    fn mixed_batch() -> Batch {
        Batch::new(vec![
            rec(0, 0, 1),
            rec(0, 1, 1),
            rec(0, 2, 0),
            rec(1, 0, 2),
            rec(1, 3, 2),
            rec(2, 1, 0),
            rec(2, 3, 1),
        ])
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let (model, tokens) = small_model(ModelKind::Aart, 4);
        for alpha in [0.0, 0.2] {
            for lambda in [0.0, 0.1] {
                let cfg = ObjectiveConfig {
                    alpha,
                    lambda,
                    ..Default::default()
                };
                let l = total_loss(&model, &tokens, &mixed_batch(), &cfg).unwrap();
                assert_eq!(l.total, l.ce + lambda * l.l2 + alpha * l.contrastive);
                if alpha == 0.0 {
                    assert_eq!((l.positive_pairs, l.negative_pairs), (0, 0));
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_ce_gradients() {
        let (model, tokens) = small_model(ModelKind::Aart, 5);
        let cfg = ObjectiveConfig {
            alpha: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let (_, g) = total_loss_and_gradients(&model, &tokens, &mixed_batch(), &cfg).unwrap();
        let mut ce_only = model.zeros_like();
        let scale = 1.0 / mixed_batch().len() as f64;
        for r in &mixed_batch().records {
            let x = TextInput {
                item: r.item,
                tokens: &tokens[r.item],
            };
            let e = model.encoder().encode(x).unwrap();
            let trace = model.trace_from_embedding(&e, r.annotator).unwrap();
            let (_, d) = cross_entropy_with_grad(trace.logits(), r.label).unwrap();
            model
                .accumulate_backward(x, r.annotator, &trace, &(d * scale), &mut ce_only)
                .unwrap();
        }
        assert_eq!(g, ce_only);
    }

    #[test]
    fn unused_annotator_only_feels_the_penalty() {
        let (model, tokens) = small_model(ModelKind::Aart, 6);
        let cfg = ObjectiveConfig {
            alpha: 0.2,
            lambda: 0.1,
            ..Default::default()
        };
        let (_, g) = total_loss_and_gradients(&model, &tokens, &mixed_batch(), &cfg).unwrap();
        let (Model::Aart(p), Model::Aart(gp)) = (&model, &g) else {
            unreachable!()
        };
        // Annotator 4 never appears in the batch.
        let row = p.annotators.row(4);
        let expected = &row * (0.1 / row.dot(&row).sqrt());
        assert_eq!(gp.annotators.row(4), expected);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [ModelKind::Aart, ModelKind::Multi, ModelKind::Single] {
            for seed in 0..5 {
                let (model, tokens) = small_model(kind, 10 + seed);
                let cfg = ObjectiveConfig {
                    alpha: 0.2,
                    lambda: 0.1,
                    tau: 0.5,
                    ..Default::default()
                };
                let check = finite_difference_check(&model, &tokens, &mixed_batch(), &cfg, DEFAULT_FD_STEP).unwrap();
                assert!(check.max_relative_error <= 1e-5, "{kind}: {check:?}");
            }
        }
    }

    #[test]
    fn contrastive_step_pulls_positive_pair_together() {
        // Anchor 0 and positive 1 share a label; negative 2 sits farther away.
        let f = array![[0.0, 0.0], [0.6, 0.0], [0.0, 1.5]];
        let pairs = vec![ItemPairs {
            item: 0,
            positives: vec![(0, 1), (1, 0)],
            negatives: BTreeMap::from([(0, vec![2]), (1, vec![2]), (2, vec![0, 1])]),
        }];
        let mut g = Array2::zeros((3, 2));
        info_nce_with_grad(&f, &pairs, 0.5, Normalization::Mean, 1.0, &mut g).unwrap();
        let stepped = &f - &(&g * 0.05);
        let dist = |m: &Array2<f64>| squared_distance(m, 0, 1).sqrt();
        assert!(dist(&stepped) < dist(&f));
    }

    #[test]
    fn swapping_equivalent_annotators_swaps_gradients() {
        let (model, tokens) = small_model(ModelKind::Aart, 21);
        // Annotators 0 and 1 play identical roles on mirrored items.
        let batch = Batch::new(vec![rec(0, 0, 1), rec(0, 2, 0), rec(1, 1, 1), rec(1, 2, 0)]);
        let mut tokens = tokens;
        tokens[1] = tokens[0].clone();
        let cfg = ObjectiveConfig {
            alpha: 0.2,
            lambda: 0.1,
            tau: 0.5,
            ..Default::default()
        };
        let (_, g) = total_loss_and_gradients(&model, &tokens, &batch, &cfg).unwrap();
        let mut swapped = model.clone();
        let Model::Aart(p) = &mut swapped else { unreachable!() };
        let row0 = p.annotators.row(0).to_owned();
        let row1 = p.annotators.row(1).to_owned();
        p.annotators.row_mut(0).assign(&row1);
        p.annotators.row_mut(1).assign(&row0);
        let (_, gs) = total_loss_and_gradients(&swapped, &tokens, &batch, &cfg).unwrap();
        let (Model::Aart(a), Model::Aart(b)) = (&g, &gs) else {
            unreachable!()
        };
        for c in 0..a.annotators.ncols() {
            assert!((a.annotators[[0, c]] - b.annotators[[1, c]]).abs() < 1e-12);
            assert!((a.annotators[[1, c]] - b.annotators[[0, c]]).abs() < 1e-12);
            for j in 2..5 {
                assert!((a.annotators[[j, c]] - b.annotators[[j, c]]).abs() < 1e-12);
            }
        }
    }
}
