//! Evaluation metrics: macro F1 at annotator and global level, item
//! disagreement correlation, aggregated-label F1 and statistical parity.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{disagreement, majority_label, Corpus, DataSplit};
use crate::encoder::TextInput;
use crate::model::{AggregationSet, Model, ModelError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub item: usize,
    pub annotator: usize,
    pub truth: usize,
    pub predicted: usize,
}

/// Predictions for item-annotator pairs, at most one per pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pairs: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(pairs: Vec<Prediction>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if !seen.insert((p.item, p.annotator)) {
                return Err(MetricsError::InvalidInput(format!(
                    "pair (item #{}, annotator #{}) appears twice",
                    p.item, p.annotator
                )));
            }
        }
        Ok(Self { pairs })
    }

    /// Predictions of `model` for every record on `items`.
    pub fn from_model(model: &Model, corpus: &Corpus, tokens: &[Vec<usize>], items: &[usize]) -> Result<Self> {
        let mut pairs = Vec::new();
        for &item in items {
            let input = TextInput {
                item,
                tokens: &tokens[item],
            };
            for r in corpus.item_records(item) {
                pairs.push(Prediction {
                    item,
                    annotator: r.annotator,
                    truth: r.label,
                    predicted: model.predict(input, r.annotator)?,
                });
            }
        }
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[Prediction] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn truths(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.truth).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.predicted).collect()
    }

    pub fn by_annotator(&self) -> BTreeMap<usize, Vec<Prediction>> {
        let mut out: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
        for p in &self.pairs {
            out.entry(p.annotator).or_default().push(*p);
        }
        out
    }

    pub fn by_item(&self) -> BTreeMap<usize, Vec<Prediction>> {
        let mut out: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
        for p in &self.pairs {
            out.entry(p.item).or_default().push(*p);
        }
        out
    }
}

/// Macro F1 over the labels present in either vector; a class with no
/// predicted or no true members contributes 0.
pub fn macro_f1(truths: &[usize], predictions: &[usize]) -> Result<f64> {
    if truths.len() != predictions.len() {
        return Err(MetricsError::InvalidInput(format!(
            "{} truths but {} predictions",
            truths.len(),
            predictions.len()
        )));
    }
    if truths.is_empty() {
        return Err(MetricsError::InvalidInput("macro F1 of no pairs".into()));
    }
    let labels: BTreeSet<usize> = truths.iter().chain(predictions).copied().collect();
    let mut total = 0.0;
    for &c in &labels {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&t, &p) in truths.iter().zip(predictions) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        // 2PR/(P+R) simplifies to 2tp/(2tp+fp+fn), which is 0 when tp = 0.
        if tp > 0 {
            total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        }
    }
    Ok(total / labels.len() as f64)
}

/// Macro F1 of each annotator's own pairs.
pub fn per_annotator_f1(set: &PredictionSet) -> Result<BTreeMap<usize, f64>> {
    set.by_annotator()
        .into_iter()
        .map(|(a, pairs)| {
            let t: Vec<usize> = pairs.iter().map(|p| p.truth).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.predicted).collect();
            Ok((a, macro_f1(&t, &p)?))
        })
        .collect()
}

/// Unweighted mean of per-annotator macro F1.
pub fn annotator_level_f1(set: &PredictionSet) -> Result<f64> {
    if set.is_empty() {
        return Err(MetricsError::InvalidInput("empty prediction set".into()));
    }
    let scores = per_annotator_f1(set)?;
    Ok(scores.values().sum::<f64>() / scores.len() as f64)
}

/// Macro F1 over all pooled pairs.
pub fn global_level_f1(set: &PredictionSet) -> Result<f64> {
    if set.is_empty() {
        return Err(MetricsError::InvalidInput("empty prediction set".into()));
    }
    macro_f1(&set.truths(), &set.predictions())
}

/// Pearson correlation, or `Undefined` when either side is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(r) => Some(r),
            Correlation::Undefined => None,
        }
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MetricsError::InvalidInput(format!(
            "pearson needs two equal vectors of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Ok(Correlation::Undefined);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(Correlation::Defined(r.clamp(-1.0, 1.0)))
}

/// True and predicted disagreement of each item, both computed over the
/// annotators with a ground-truth label on that item.
pub fn item_disagreements(set: &PredictionSet) -> Vec<(usize, f64, f64)> {
    set.by_item()
        .into_iter()
        .map(|(item, pairs)| {
            let t: Vec<usize> = pairs.iter().map(|p| p.truth).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.predicted).collect();
            (
                item,
                disagreement(&t).expect("item has pairs"),
                disagreement(&p).expect("item has pairs"),
            )
        })
        .collect()
}

/// Pearson correlation between true and predicted item disagreement.
pub fn disagreement_correlation(set: &PredictionSet) -> Result<Correlation> {
    let rows = item_disagreements(set);
    if rows.len() < 2 {
        return Err(MetricsError::InvalidInput(format!(
            "disagreement correlation needs >= 2 items, got {}",
            rows.len()
        )));
    }
    let t: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let p: Vec<f64> = rows.iter().map(|r| r.2).collect();
    pearson(&t, &p)
}

/// Macro F1 between item majority votes and the model's aggregated
/// predictions.
pub fn aggregated_f1(
    corpus: &Corpus,
    model: &Model,
    tokens: &[Vec<usize>],
    items: &[usize],
    set: AggregationSet,
) -> Result<f64> {
    let all: Vec<usize> = (0..corpus.num_annotators()).collect();
    let mut truths = Vec::with_capacity(items.len());
    let mut preds = Vec::with_capacity(items.len());
    for &item in items {
        let annotators = match set {
            AggregationSet::ItemAnnotators => corpus.item_annotators(item),
            AggregationSet::AllAnnotators => all.clone(),
        };
        let truth = majority_label(corpus.item_labels(item))
            .ok_or_else(|| MetricsError::InvalidInput(format!("item #{item} has no labels")))?;
        let input = TextInput {
            item,
            tokens: &tokens[item],
        };
        truths.push(truth);
        preds.push(model.predict_aggregated(input, &annotators)?);
    }
    macro_f1(&truths, &preds)
}

/// Annotator statistic used to pick the fairness minority group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Similarity,
    Contribution,
}

/// Per-annotator grouping statistic over `items` (the train split);
/// `None` for annotators without records there.
pub fn grouping_statistic(corpus: &Corpus, items: &[usize], grouping: Grouping) -> Vec<Option<f64>> {
    let stats = corpus.annotator_statistics(items);
    match grouping {
        Grouping::Similarity => stats.similarity,
        Grouping::Contribution => stats
            .contributions
            .iter()
            .map(|&c| (c > 0).then_some(c as f64))
            .collect(),
    }
}

pub const DEFAULT_PERCENTILE: f64 = 25.0;

/// Nearest-rank percentile: the `ceil(p/100 · n)`-th smallest value.
pub fn nearest_rank(values: &[f64], percentile: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&percentile) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.max(1) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub gap: f64,
    pub threshold: f64,
    pub minority_accuracy: f64,
    pub majority_accuracy: f64,
    pub minority: Vec<usize>,
    pub majority: Vec<usize>,
    pub minority_pairs: usize,
    pub majority_pairs: usize,
}

/// `|acc(majority pairs) − acc(minority pairs)|`, the minority being the
/// annotators of `set` at or below the nearest-rank percentile of
/// `statistic`.
pub fn parity_gap(set: &PredictionSet, statistic: &[Option<f64>], percentile: f64) -> Result<ParityReport> {
    let by_annotator = set.by_annotator();
    let mut scored = Vec::with_capacity(by_annotator.len());
    for &a in by_annotator.keys() {
        let value = statistic
            .get(a)
            .copied()
            .flatten()
            .ok_or_else(|| MetricsError::Grouping(format!("annotator #{a} has no grouping statistic")))?;
        scored.push((a, value));
    }
    let values: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let threshold =
        nearest_rank(&values, percentile).ok_or_else(|| MetricsError::Grouping("no annotators to group".into()))?;
    let (minority, majority) = scored.iter().copied().partition::<Vec<_>, _>(|s| s.1 <= threshold);
    let minority: Vec<usize> = minority.into_iter().map(|s| s.0).collect();
    let majority: Vec<usize> = majority.into_iter().map(|s| s.0).collect();
    if minority.len() < 2 || majority.len() < 2 {
        return Err(MetricsError::Grouping(format!(
            "need >= 2 annotators per group, got {} minority and {} majority",
            minority.len(),
            majority.len()
        )));
    }
    let accuracy = |group: &[usize]| {
        let mut correct = 0usize;
        let mut total = 0usize;
        for a in group {
            for p in &by_annotator[a] {
                total += 1;
                correct += usize::from(p.truth == p.predicted);
            }
        }
        (correct as f64 / total as f64, total)
    };
    let (minority_accuracy, minority_pairs) = accuracy(&minority);
    let (majority_accuracy, majority_pairs) = accuracy(&majority);
    Ok(ParityReport {
        gap: (majority_accuracy - minority_accuracy).abs(),
        threshold,
        minority_accuracy,
        majority_accuracy,
        minority,
        majority,
        minority_pairs,
        majority_pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorScore {
    pub annotator: String,
    pub f1: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemDisagreement {
    pub item: String,
    pub truth: f64,
    pub predicted: f64,
}

/// Every test metric with its breakdowns. Parity fields are `None` when the
/// test annotators cannot be split into two groups of at least two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub annotator_level_f1: f64,
    pub global_level_f1: f64,
    /// `None` when either disagreement vector is constant.
    pub disagreement_pearson: Option<f64>,
    pub aggregated_f1: f64,
    pub parity_similarity: Option<ParityReport>,
    pub parity_contribution: Option<ParityReport>,
    pub per_annotator: Vec<AnnotatorScore>,
    pub per_item: Vec<ItemDisagreement>,
    pub num_pairs: usize,
}

/// Scores `model` on the test split. Grouping statistics come from the train
/// split.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    split: &DataSplit,
    tokens: &[Vec<usize>],
    aggregation: AggregationSet,
) -> Result<EvalReport> {
    let set = PredictionSet::from_model(model, corpus, tokens, &split.test)?;
    let counts = set.by_annotator();
    let per_annotator = per_annotator_f1(&set)?
        .into_iter()
        .map(|(a, f1)| AnnotatorScore {
            annotator: corpus.annotator_id(a).to_string(),
            f1,
            pairs: counts[&a].len(),
        })
        .collect();
    let per_item = item_disagreements(&set)
        .into_iter()
        .map(|(i, truth, predicted)| ItemDisagreement {
            item: corpus.item_id(i).to_string(),
            truth,
            predicted,
        })
        .collect();
    let parity = |g: Grouping| -> Result<Option<ParityReport>> {
        match parity_gap(&set, &grouping_statistic(corpus, &split.train, g), DEFAULT_PERCENTILE) {
            Ok(r) => Ok(Some(r)),
            Err(MetricsError::Grouping(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(EvalReport {
        annotator_level_f1: annotator_level_f1(&set)?,
        global_level_f1: global_level_f1(&set)?,
        disagreement_pearson: disagreement_correlation(&set)?.value(),
        aggregated_f1: aggregated_f1(corpus, model, tokens, &split.test, aggregation)?,
        parity_similarity: parity(Grouping::Similarity)?,
        parity_contribution: parity(Grouping::Contribution)?,
        per_annotator,
        per_item,
        num_pairs: set.len(),
    })
}

/// Writes `annotator,f1,pairs` rows.
pub fn write_annotator_csv<W: Write>(report: &EvalReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in &report.per_annotator {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
