//! Multi-annotator corpora: (item, annotator, label) triplets with derived
//! statistics, stratified splitting, synthetic annotator injection and a
//! planted-bias generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TOOL_VERSION;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate annotation for item `{item}` by annotator `{annotator}`")]
    DuplicateAnnotation { item: String, annotator: String },
    #[error("duplicate item id `{0}`")]
    DuplicateItem(String),
    #[error("label {label} out of range for {num_labels} classes")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("annotation references unknown item `{0}`")]
    DanglingItem(String),
    #[error("item `{0}` has no annotations")]
    EmptyItem(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// One observed label: annotator `annotator` assigned `label` to item `item`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item: usize,
    pub annotator: usize,
    pub label: usize,
}

/// Scripted behaviour of an injected annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticPolicy {
    /// Always answers the item's majority vote.
    Majority,
    /// Always answers `(majority + 1) mod Q`.
    AntiMajority,
}

/// Most frequent label; ties go to the smallest label.
pub fn majority_label<I: IntoIterator<Item = usize>>(labels: I) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for label in labels {
        *counts.entry(label).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (&label, &count) in &counts {
        match best {
            Some((_, c)) if c >= count => {}
            _ => best = Some((label, count)),
        }
    }
    best.map(|(label, _)| label)
}

/// Fraction of votes that differ from the majority vote.
pub fn disagreement(labels: &[usize]) -> Option<f64> {
    let majority = majority_label(labels.iter().copied())?;
    let differing = labels.iter().filter(|&&l| l != majority).count();
    Some(differing as f64 / labels.len() as f64)
}

/// Disagreement as a reduced fraction `(differing, total)`, used as an exact
/// stratification key.
fn disagreement_key(labels: &[usize]) -> (usize, usize) {
    let majority = majority_label(labels.iter().copied()).unwrap_or(0);
    let differing = labels.iter().filter(|&&l| l != majority).count();
    let total = labels.len();
    let g = gcd(differing, total).max(1);
    (differing / g, total / g)
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// A validated multi-annotator corpus with dense ids.
///
/// Items and annotators are addressed by contiguous indices; the original
/// string ids are kept alongside so output files can use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    item_ids: Vec<String>,
    texts: Vec<String>,
    annotator_ids: Vec<String>,
    synthetic: Vec<Option<SyntheticPolicy>>,
    num_labels: usize,
    records: Vec<AnnotationRecord>,
    by_item: Vec<Vec<usize>>,
    by_annotator: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(
        item_ids: Vec<String>,
        texts: Vec<String>,
        annotator_ids: Vec<String>,
        synthetic: Vec<Option<SyntheticPolicy>>,
        num_labels: usize,
        records: Vec<AnnotationRecord>,
    ) -> Result<Self> {
        if item_ids.is_empty() {
            return Err(CorpusError::Config("corpus needs at least one item".into()));
        }
        if item_ids.len() != texts.len() {
            return Err(CorpusError::Config("item ids and texts differ in length".into()));
        }
        if annotator_ids.is_empty() {
            return Err(CorpusError::Config("corpus needs at least one annotator".into()));
        }
        if synthetic.len() != annotator_ids.len() {
            return Err(CorpusError::Config(
                "synthetic flags and annotator ids differ in length".into(),
            ));
        }
        if num_labels < 2 {
            return Err(CorpusError::Config(format!("need at least 2 labels, got {num_labels}")));
        }
        let mut seen_items = HashSet::new();
        for id in &item_ids {
            if !seen_items.insert(id.as_str()) {
                return Err(CorpusError::DuplicateItem(id.clone()));
            }
        }
        let mut seen_annotators = HashSet::new();
        for id in &annotator_ids {
            if !seen_annotators.insert(id.as_str()) {
                return Err(CorpusError::Config(format!("duplicate annotator id `{id}`")));
            }
        }

        let mut by_item = vec![Vec::new(); item_ids.len()];
        let mut by_annotator = vec![Vec::new(); annotator_ids.len()];
        let mut pairs = HashSet::with_capacity(records.len());
        for (idx, r) in records.iter().enumerate() {
            if r.item >= item_ids.len() {
                return Err(CorpusError::DanglingItem(format!("#{}", r.item)));
            }
            if r.annotator >= annotator_ids.len() {
                return Err(CorpusError::NotFound(format!("annotator #{}", r.annotator)));
            }
            if r.label >= num_labels {
                return Err(CorpusError::LabelOutOfRange {
                    label: r.label,
                    num_labels,
                });
            }
            if !pairs.insert((r.item, r.annotator)) {
                return Err(CorpusError::DuplicateAnnotation {
                    item: item_ids[r.item].clone(),
                    annotator: annotator_ids[r.annotator].clone(),
                });
            }
            by_item[r.item].push(idx);
            by_annotator[r.annotator].push(idx);
        }
        if let Some(empty) = by_item.iter().position(|v| v.is_empty()) {
            return Err(CorpusError::EmptyItem(item_ids[empty].clone()));
        }

        Ok(Self {
            item_ids,
            texts,
            annotator_ids,
            synthetic,
            num_labels,
            records,
            by_item,
            by_annotator,
        })
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_annotators(&self) -> usize {
        self.annotator_ids.len()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn text(&self, item: usize) -> &str {
        &self.texts[item]
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn item_id(&self, item: usize) -> &str {
        &self.item_ids[item]
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn annotator_id(&self, annotator: usize) -> &str {
        &self.annotator_ids[annotator]
    }

    pub fn annotator_ids(&self) -> &[String] {
        &self.annotator_ids
    }

    pub fn synthetic_policy(&self, annotator: usize) -> Option<SyntheticPolicy> {
        self.synthetic[annotator]
    }

    pub fn is_synthetic(&self, annotator: usize) -> bool {
        self.synthetic[annotator].is_some()
    }

    pub fn find_item(&self, id: &str) -> Option<usize> {
        self.item_ids.iter().position(|s| s == id)
    }

    pub fn find_annotator(&self, id: &str) -> Option<usize> {
        self.annotator_ids.iter().position(|s| s == id)
    }

    /// Records of one item, in corpus order.
    pub fn item_records(&self, item: usize) -> impl Iterator<Item = &AnnotationRecord> + '_ {
        self.by_item[item].iter().map(move |&i| &self.records[i])
    }

    /// Records of one annotator, in corpus order.
    pub fn annotator_records(&self, annotator: usize) -> impl Iterator<Item = &AnnotationRecord> + '_ {
        self.by_annotator[annotator].iter().map(move |&i| &self.records[i])
    }

    pub fn item_labels(&self, item: usize) -> Vec<usize> {
        self.item_records(item).map(|r| r.label).collect()
    }

    pub fn item_annotators(&self, item: usize) -> Vec<usize> {
        self.item_records(item).map(|r| r.annotator).collect()
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.num_items() {
            Err(CorpusError::NotFound(format!("item #{item}")))
        } else {
            Ok(())
        }
    }

    pub fn majority_vote(&self, item: usize) -> Result<usize> {
        self.check_item(item)?;
        majority_label(self.item_records(item).map(|r| r.label))
            .ok_or_else(|| CorpusError::NotFound(format!("records for item #{item}")))
    }

    /// Majority vote of every item, indexed by item.
    pub fn majority_votes(&self) -> Vec<usize> {
        (0..self.num_items())
            .map(|i| majority_label(self.item_records(i).map(|r| r.label)).unwrap_or(0))
            .collect()
    }

    pub fn item_disagreement(&self, item: usize) -> Result<f64> {
        self.check_item(item)?;
        disagreement(&self.item_labels(item)).ok_or_else(|| CorpusError::NotFound(format!("records for item #{item}")))
    }

    /// Fraction of the annotator's labels matching the majority vote of the
    /// items they labelled (majorities over all records currently present).
    pub fn similarity_to_majority(&self, annotator: usize) -> Result<f64> {
        if annotator >= self.num_annotators() || self.by_annotator[annotator].is_empty() {
            return Err(CorpusError::NotFound(format!("records for annotator #{annotator}")));
        }
        let records = &self.by_annotator[annotator];
        let matching = records
            .iter()
            .map(|&i| self.records[i])
            .filter(|r| majority_label(self.item_records(r.item).map(|x| x.label)) == Some(r.label))
            .count();
        Ok(matching as f64 / records.len() as f64)
    }

    pub fn contribution_count(&self, annotator: usize) -> usize {
        self.by_annotator.get(annotator).map_or(0, Vec::len)
    }

    /// Per-annotator statistics restricted to the records of `items`.
    pub fn annotator_statistics(&self, items: &[usize]) -> AnnotatorStatistics {
        let mut matching = vec![0usize; self.num_annotators()];
        let mut contributions = vec![0usize; self.num_annotators()];
        for &item in items {
            let labels = self.item_labels(item);
            let majority = majority_label(labels.iter().copied());
            for r in self.item_records(item) {
                contributions[r.annotator] += 1;
                if Some(r.label) == majority {
                    matching[r.annotator] += 1;
                }
            }
        }
        let similarity = matching
            .iter()
            .zip(&contributions)
            .map(|(&m, &c)| (c > 0).then(|| m as f64 / c as f64))
            .collect();
        AnnotatorStatistics {
            similarity,
            contributions,
        }
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut num_labels: Option<usize> = None;
        let mut item_ids = Vec::new();
        let mut texts = Vec::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut annotator_ids: Vec<String> = Vec::new();
        let mut synthetic = Vec::new();
        let mut annotator_index: HashMap<String, usize> = HashMap::new();
        // Annotations may precede their items in the file.
        let mut pending: Vec<(usize, String, String, usize)> = Vec::new();

        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if num_labels.is_none() && !matches!(parsed, Line::Meta { .. }) {
                return Err(CorpusError::Parse {
                    line: line_no,
                    message: "first record must be the meta header".into(),
                });
            }
            match parsed {
                Line::Meta { num_labels: q, .. } => {
                    if num_labels.is_some() {
                        return Err(CorpusError::Parse {
                            line: line_no,
                            message: "duplicate meta header".into(),
                        });
                    }
                    num_labels = Some(q);
                }
                Line::Item { id, text } => {
                    if item_index.contains_key(&id) {
                        return Err(CorpusError::DuplicateItem(id));
                    }
                    item_index.insert(id.clone(), item_ids.len());
                    item_ids.push(id);
                    texts.push(text);
                }
                Line::Annotator { id, synthetic: policy } => {
                    if annotator_index.contains_key(&id) {
                        return Err(CorpusError::Parse {
                            line: line_no,
                            message: format!("annotator `{id}` declared twice or after use"),
                        });
                    }
                    annotator_index.insert(id.clone(), annotator_ids.len());
                    annotator_ids.push(id);
                    synthetic.push(policy);
                }
                Line::Annotation { item, annotator, label } => {
                    if !annotator_index.contains_key(&annotator) {
                        annotator_index.insert(annotator.clone(), annotator_ids.len());
                        annotator_ids.push(annotator.clone());
                        synthetic.push(None);
                    }
                    pending.push((line_no, item, annotator, label));
                }
            }
        }
        let num_labels = num_labels.ok_or(CorpusError::Parse {
            line: 0,
            message: "missing meta header".into(),
        })?;

        let mut records = Vec::with_capacity(pending.len());
        for (_, item, annotator, label) in pending {
            let item_idx = *item_index
                .get(&item)
                .ok_or_else(|| CorpusError::DanglingItem(item.clone()))?;
            records.push(AnnotationRecord {
                item: item_idx,
                annotator: annotator_index[&annotator],
                label,
            });
        }
        Corpus::new(item_ids, texts, annotator_ids, synthetic, num_labels, records)
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        let mut emit = |line: &Line| -> Result<()> {
            let text = serde_json::to_string(line).map_err(|e| CorpusError::Parse {
                line: 0,
                message: e.to_string(),
            })?;
            writer.write_all(text.as_bytes())?;
            writer.write_all(b"\n")?;
            Ok(())
        };
        emit(&Line::Meta {
            num_labels: self.num_labels,
            tool_version: Some(TOOL_VERSION.to_string()),
        })?;
        for (id, policy) in self.annotator_ids.iter().zip(&self.synthetic) {
            emit(&Line::Annotator {
                id: id.clone(),
                synthetic: *policy,
            })?;
        }
        for (id, text) in self.item_ids.iter().zip(&self.texts) {
            emit(&Line::Item {
                id: id.clone(),
                text: text.clone(),
            })?;
        }
        for r in &self.records {
            emit(&Line::Annotation {
                item: self.item_ids[r.item].clone(),
                annotator: self.annotator_ids[r.annotator].clone(),
                label: r.label,
            })?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = BufWriter::new(File::create(path)?);
        self.write_jsonl(&mut writer)?;
        writer.flush()?;
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("corpus output is UTF-8")
    }
}

/// Read a JSONL corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let file = File::open(path)?;
    Corpus::read_jsonl(BufReader::new(file))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Line {
    Meta {
        num_labels: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tool_version: Option<String>,
    },
    Annotator {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        synthetic: Option<SyntheticPolicy>,
    },
    Item {
        id: String,
        text: String,
    },
    Annotation {
        item: String,
        annotator: String,
        label: usize,
    },
}

/// Per-annotator similarity-to-majority and contribution counts over a subset
/// of items. `similarity[j]` is `None` when annotator `j` has no records there.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorStatistics {
    pub similarity: Vec<Option<f64>>,
    pub contributions: Vec<usize>,
}

/// Train/dev/test assignment of item indices. Each list is sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    tool_version: String,
    train: Vec<String>,
    dev: Vec<String>,
    test: Vec<String>,
}

impl DataSplit {
    fn sort(&mut self) {
        self.train.sort_unstable();
        self.dev.sort_unstable();
        self.test.sort_unstable();
    }

    /// Checks the three sets partition `0..num_items`.
    pub fn is_partition(&self, num_items: usize) -> bool {
        let mut seen = vec![false; num_items];
        for &i in self.train.iter().chain(&self.dev).chain(&self.test) {
            if i >= num_items || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Annotators of dev or test items that never appear on a train item.
    pub fn unseen_annotators(&self, corpus: &Corpus) -> Vec<usize> {
        let seen = annotators_of(corpus, &self.train);
        let mut unseen: Vec<usize> = annotators_of(corpus, &self.dev)
            .union(&annotators_of(corpus, &self.test))
            .filter(|a| !seen.contains(a))
            .copied()
            .collect();
        unseen.sort_unstable();
        unseen
    }

    pub fn to_json(&self, corpus: &Corpus) -> String {
        let names = |items: &[usize]| items.iter().map(|&i| corpus.item_id(i).to_string()).collect();
        let file = SplitFile {
            tool_version: TOOL_VERSION.to_string(),
            train: names(&self.train),
            dev: names(&self.dev),
            test: names(&self.test),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("split serializes");
        text.push('\n');
        text
    }

    pub fn from_json(corpus: &Corpus, text: &str) -> Result<Self> {
        let file: SplitFile = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let lookup: HashMap<&str, usize> = corpus
            .item_ids()
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let resolve = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    lookup
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| CorpusError::DanglingItem(id.clone()))
                })
                .collect()
        };
        let mut split = DataSplit {
            train: resolve(&file.train)?,
            dev: resolve(&file.dev)?,
            test: resolve(&file.test)?,
        };
        split.sort();
        if !split.is_partition(corpus.num_items()) {
            return Err(CorpusError::Config("split does not partition the corpus items".into()));
        }
        Ok(split)
    }

    pub fn load(corpus: &Corpus, path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(corpus, &text)
    }
}

fn annotators_of(corpus: &Corpus, items: &[usize]) -> HashSet<usize> {
    items
        .iter()
        .flat_map(|&i| corpus.item_records(i).map(|r| r.annotator))
        .collect()
}

/// Full result of [`stratified_split_detailed`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOutcome {
    /// Assignment after the unseen-annotator transfer.
    pub split: DataSplit,
    /// Stratified assignment before any transfer.
    pub initial: DataSplit,
    /// Items moved from dev/test into train, in move order.
    pub transferred: Vec<usize>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.5, 0.25, 0.25];

/// Stratified train/dev/test split followed by the unseen-annotator transfer.
pub fn stratified_split(corpus: &Corpus, fractions: [f64; 3], seed: u64) -> Result<DataSplit> {
    stratified_split_detailed(corpus, fractions, seed).map(|o| o.split)
}

pub fn stratified_split_detailed(corpus: &Corpus, fractions: [f64; 3], seed: u64) -> Result<SplitOutcome> {
    let initial = initial_stratified_assignment(corpus, fractions, seed)?;
    let (split, transferred) = transfer_unseen_annotators(corpus, &initial);
    Ok(SplitOutcome {
        split,
        initial,
        transferred,
    })
}

/// Buckets items by exact disagreement value, shuffles each bucket and
/// apportions it by largest remainder.
pub fn initial_stratified_assignment(corpus: &Corpus, fractions: [f64; 3], seed: u64) -> Result<DataSplit> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for item in 0..corpus.num_items() {
        strata
            .entry(disagreement_key(&corpus.item_labels(item)))
            .or_default()
            .push(item);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DataSplit::default();
    for items in strata.values_mut() {
        items.shuffle(&mut rng);
        let counts = largest_remainder(items.len(), &fractions);
        let (train, rest) = items.split_at(counts[0]);
        let (dev, test) = rest.split_at(counts[1]);
        split.train.extend_from_slice(train);
        split.dev.extend_from_slice(dev);
        split.test.extend_from_slice(test);
    }
    split.sort();
    Ok(split)
}

/// Integer apportionment of `n` by `fractions`; leftover units go to the
/// largest fractional parts, earlier slots first on ties.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Moves every dev/test item touched by an annotator without train records
/// into train, repeating until no such annotator remains.
pub fn transfer_unseen_annotators(corpus: &Corpus, split: &DataSplit) -> (DataSplit, Vec<usize>) {
    let mut split = split.clone();
    let mut transferred = Vec::new();
    loop {
        let seen = annotators_of(corpus, &split.train);
        let unseen = |item: &usize| corpus.item_records(*item).any(|r| !seen.contains(&r.annotator));
        let moving: Vec<usize> = split
            .dev
            .iter()
            .chain(&split.test)
            .filter(|i| unseen(i))
            .copied()
            .collect();
        if moving.is_empty() {
            break;
        }
        let moving_set: HashSet<usize> = moving.iter().copied().collect();
        split.dev.retain(|i| !moving_set.contains(i));
        split.test.retain(|i| !moving_set.contains(i));
        split.train.extend_from_slice(&moving);
        transferred.extend_from_slice(&moving);
    }
    split.sort();
    (split, transferred)
}

/// Appends two sets of `per_set` scripted annotators: one always giving the
/// item's majority vote over real records, one always giving
/// `(majority + 1) mod Q`. Within each set the items are dealt into
/// `per_set` disjoint folds, one per annotator.
pub fn inject_synthetic_annotators(corpus: &Corpus, per_set: usize, seed: u64) -> Result<Corpus> {
    if per_set == 0 {
        return Err(CorpusError::Config("per_set must be at least 1".into()));
    }
    if corpus.synthetic.iter().any(Option::is_some) {
        return Err(CorpusError::Config(
            "corpus already contains synthetic annotators".into(),
        ));
    }
    let n = corpus.num_items();
    if n < per_set {
        return Err(CorpusError::Config(format!(
            "need at least {per_set} items to build {per_set} folds, corpus has {n}"
        )));
    }
    let majorities: Vec<usize> = (0..n)
        .map(|i| {
            majority_label(
                corpus
                    .item_records(i)
                    .filter(|r| !corpus.is_synthetic(r.annotator))
                    .map(|r| r.label),
            )
            .unwrap_or(0)
        })
        .collect();

    let mut annotator_ids = corpus.annotator_ids.clone();
    let mut synthetic = corpus.synthetic.clone();
    let mut records = corpus.records.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = corpus.num_labels;

    for (policy, prefix) in [
        (SyntheticPolicy::Majority, "synthetic-majority"),
        (SyntheticPolicy::AntiMajority, "synthetic-anti"),
    ] {
        let base = annotator_ids.len();
        for k in 0..per_set {
            let id = format!("{prefix}-{k}");
            if corpus.find_annotator(&id).is_some() {
                return Err(CorpusError::Config(format!("annotator id `{id}` already in use")));
            }
            annotator_ids.push(id);
            synthetic.push(Some(policy));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (pos, &item) in order.iter().enumerate() {
            let label = match policy {
                SyntheticPolicy::Majority => majorities[item],
                SyntheticPolicy::AntiMajority => (majorities[item] + 1) % q,
            };
            records.push(AnnotationRecord {
                item,
                annotator: base + pos % per_set,
                label,
            });
        }
    }

    Corpus::new(
        corpus.item_ids.clone(),
        corpus.texts.clone(),
        annotator_ids,
        synthetic,
        q,
        records,
    )
}

/// Labelling rule of one planted annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedAnnotator {
    /// Decision threshold on the item latent.
    pub threshold: f64,
    /// Probability of replacing the rule's label `y` by `(y + 1) mod Q`.
    pub flip_probability: f64,
    /// Relative sampling rate when annotators are drawn for an item.
    #[serde(default = "one")]
    pub weight: f64,
    /// Hard cap on the number of items this annotator labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_annotations: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl PlantedAnnotator {
    pub fn new(threshold: f64, flip_probability: f64) -> Self {
        Self {
            threshold,
            flip_probability,
            weight: 1.0,
            max_annotations: None,
        }
    }

    /// Rule label before flips and noise: the latent shifted by
    /// `0.5 - threshold`, quantized into `q` equal bins.
    pub fn rule_label(&self, latent: f64, q: usize) -> usize {
        let shifted = (latent - self.threshold + 0.5).clamp(0.0, 1.0);
        ((shifted * q as f64).floor() as usize).min(q - 1)
    }
}

/// Parameters of a planted-bias corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCorpusSpec {
    pub num_items: usize,
    pub annotations_per_item: usize,
    pub num_labels: usize,
    pub annotators: Vec<PlantedAnnotator>,
    /// Probability that a label is replaced by a uniformly random one.
    pub noise_rate: f64,
    pub seed: u64,
}

impl PlantedCorpusSpec {
    /// `num_annotators` identical annotators with threshold 0.5 and no flips.
    pub fn uniform(
        num_items: usize,
        num_annotators: usize,
        annotations_per_item: usize,
        num_labels: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_items,
            annotations_per_item,
            num_labels,
            annotators: vec![PlantedAnnotator::new(0.5, 0.0); num_annotators],
            noise_rate: 0.0,
            seed,
        }
    }

    pub fn num_real_annotators(&self) -> usize {
        self.annotators.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CorpusError::Config(msg));
        if self.num_items == 0 {
            return bad("num_items must be positive".into());
        }
        if self.num_labels < 2 {
            return bad("num_labels must be at least 2".into());
        }
        if self.annotators.is_empty() {
            return bad("need at least one annotator".into());
        }
        if self.annotations_per_item == 0 || self.annotations_per_item > self.annotators.len() {
            return bad(format!(
                "annotations_per_item {} must lie in 1..={}",
                self.annotations_per_item,
                self.annotators.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        for (j, a) in self.annotators.iter().enumerate() {
            if !(0.0..=1.0).contains(&a.flip_probability) {
                return bad(format!("annotator {j}: flip_probability outside [0, 1]"));
            }
            if !(0.0..=1.0).contains(&a.threshold) {
                return bad(format!("annotator {j}: threshold outside [0, 1]"));
            }
            if !(a.weight.is_finite() && a.weight > 0.0) {
                return bad(format!("annotator {j}: weight must be positive"));
            }
        }
        Ok(())
    }
}

/// A generated corpus plus the ground truth used to build it.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub corpus: Corpus,
    /// Latent scalar of every item.
    pub latents: Vec<f64>,
    /// Annotators whose flip probability is at least 0.9.
    pub contrarians: Vec<usize>,
}

const LATENT_BINS: usize = 20;
const WORDS_PER_BIN: usize = 4;
const FILLER_WORDS: usize = 40;
const MIN_TOKENS: usize = 10;
const MAX_TOKENS: usize = 18;
const SIGNAL_FRACTION: f64 = 0.75;
const LATENT_JITTER: f64 = 0.08;

pub const CONTRARIAN_FLIP: f64 = 0.9;

pub fn generate_planted_corpus(spec: &PlantedCorpusSpec) -> Result<PlantedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.annotators.len();
    let q = spec.num_labels;

    let mut latents = Vec::with_capacity(spec.num_items);
    let mut texts = Vec::with_capacity(spec.num_items);
    for _ in 0..spec.num_items {
        let z: f64 = rng.random();
        latents.push(z);
        texts.push(planted_text(z, &mut rng));
    }

    let mut used = vec![0usize; m];
    let mut records = Vec::with_capacity(spec.num_items * spec.annotations_per_item);
    for (item, &z) in latents.iter().enumerate() {
        let mut available: Vec<usize> = (0..m)
            .filter(|&j| spec.annotators[j].max_annotations.is_none_or(|cap| used[j] < cap))
            .collect();
        if available.len() < spec.annotations_per_item {
            return Err(CorpusError::Config(format!(
                "annotator capacity exhausted at item {item}"
            )));
        }
        for _ in 0..spec.annotations_per_item {
            let total: f64 = available.iter().map(|&j| spec.annotators[j].weight).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = available.len() - 1;
            for (pos, &j) in available.iter().enumerate() {
                u -= spec.annotators[j].weight;
                if u < 0.0 {
                    pick = pos;
                    break;
                }
            }
            let j = available.remove(pick);
            used[j] += 1;
            let annotator = &spec.annotators[j];
            let mut label = annotator.rule_label(z, q);
            if rng.random::<f64>() < annotator.flip_probability {
                label = (label + 1) % q;
            }
            if rng.random::<f64>() < spec.noise_rate {
                label = rng.random_range(0..q);
            }
            records.push(AnnotationRecord {
                item,
                annotator: j,
                label,
            });
        }
    }

    let corpus = Corpus::new(
        (0..spec.num_items).map(|i| format!("i{i}")).collect(),
        texts,
        (0..m).map(|j| format!("a{j}")).collect(),
        vec![None; m],
        q,
        records,
    )?;
    let contrarians = spec
        .annotators
        .iter()
        .enumerate()
        .filter(|(_, a)| a.flip_probability >= CONTRARIAN_FLIP)
        .map(|(j, _)| j)
        .collect();
    Ok(PlantedCorpus {
        corpus,
        latents,
        contrarians,
    })
}

/// Bag of words whose signal tokens come from latent bins near `z`.
fn planted_text(z: f64, rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(MIN_TOKENS..=MAX_TOKENS);
    let mut words = Vec::with_capacity(len);
    for _ in 0..len {
        if rng.random::<f64>() < SIGNAL_FRACTION {
            let jittered = z + rng.random_range(-LATENT_JITTER..LATENT_JITTER);
            let bin = ((jittered.clamp(0.0, 1.0) * LATENT_BINS as f64) as usize).min(LATENT_BINS - 1);
            let k = rng.random_range(0..WORDS_PER_BIN);
            words.push(format!("t{bin}w{k}"));
        } else {
            words.push(format!("f{}", rng.random_range(0..FILLER_WORDS)));
        }
    }
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[&[usize]], q: usize) -> Corpus {
        let m = labels.iter().map(|l| l.len()).max().unwrap();
        let mut records = Vec::new();
        for (i, item) in labels.iter().enumerate() {
            for (j, &label) in item.iter().enumerate() {
                records.push(AnnotationRecord {
                    item: i,
                    annotator: j,
                    label,
                });
            }
        }
        Corpus::new(
            (0..labels.len()).map(|i| format!("i{i}")).collect(),
            vec!["x".into(); labels.len()],
            (0..m).map(|j| format!("a{j}")).collect(),
            vec![None; m],
            q,
            records,
        )
        .unwrap()
    }

    #[test]
    fn majority_and_disagreement_examples() {
        let c = toy(&[&[0, 1, 0, 1, 1], &[1, 1, 1], &[0, 1], &[0, 0, 1, 1]], 2);
        assert_eq!(c.majority_vote(0).unwrap(), 1);
        assert_eq!(c.majority_vote(1).unwrap(), 1);
        assert_eq!(c.majority_vote(2).unwrap(), 0);
        assert!((c.item_disagreement(0).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(c.item_disagreement(1).unwrap(), 0.0);
        assert_eq!(c.item_disagreement(3).unwrap(), 0.5);
        assert!(matches!(c.majority_vote(9), Err(CorpusError::NotFound(_))));
        assert!(matches!(c.item_disagreement(9), Err(CorpusError::NotFound(_))));
    }

    #[test]
    fn two_vote_tie_break_matches_enumeration() {
        // Every ordered two-vote ballot over three labels.
        for a in 0..3 {
            for b in 0..3 {
                let expected = if a == b { a } else { a.min(b) };
                assert_eq!(majority_label([a, b]), Some(expected));
            }
        }
    }

    #[test]
    fn similarity_and_contributions() {
        // Annotator 0 agrees with the majority on 3 of 4 items.
        let c = toy(&[&[1, 1, 1], &[0, 0, 0], &[1, 1, 1], &[0, 1, 1]], 2);
        assert_eq!(c.similarity_to_majority(0).unwrap(), 0.75);
        assert_eq!(c.contribution_count(0), 4);
        assert_eq!(c.contribution_count(42), 0);
        let total: usize = (0..c.num_annotators()).map(|j| c.contribution_count(j)).sum();
        assert_eq!(total, c.records().len());
    }

    #[test]
    fn similarity_requires_records() {
        let c = Corpus::new(
            vec!["i0".into()],
            vec!["t".into()],
            vec!["a0".into(), "a1".into()],
            vec![None, None],
            2,
            vec![AnnotationRecord {
                item: 0,
                annotator: 0,
                label: 1,
            }],
        )
        .unwrap();
        assert_eq!(c.similarity_to_majority(0).unwrap(), 1.0);
        assert!(matches!(c.similarity_to_majority(1), Err(CorpusError::NotFound(_))));
    }

    #[test]
    fn jsonl_loading_and_errors() {
        let good = r#"{"kind":"meta","num_labels":2}
{"kind":"item","id":"x","text":"hello world"}
{"kind":"item","id":"y","text":"bye"}
{"kind":"annotation","item":"x","annotator":"p","label":0}
{"kind":"annotation","item":"x","annotator":"q","label":1}
{"kind":"annotation","item":"y","annotator":"q","label":1}
{"kind":"annotation","item":"y","annotator":"r","label":0}
{"kind":"annotation","item":"y","annotator":"p","label":0}
"#;
        let c = Corpus::read_jsonl(good.as_bytes()).unwrap();
        assert_eq!((c.num_items(), c.num_annotators(), c.records().len()), (2, 3, 5));
        assert_eq!(c.annotator_id(2), "r");

        let dup = good.replace(r#""annotator":"r""#, r#""annotator":"q""#);
        assert!(matches!(
            Corpus::read_jsonl(dup.as_bytes()),
            Err(CorpusError::DuplicateAnnotation { .. })
        ));
        let bad_label = good.replace(r#""annotator":"r","label":0"#, r#""annotator":"r","label":2"#);
        assert!(matches!(
            Corpus::read_jsonl(bad_label.as_bytes()),
            Err(CorpusError::LabelOutOfRange { label: 2, .. })
        ));
        let dangling = format!(
            "{good}{}\n",
            r#"{"kind":"annotation","item":"z","annotator":"p","label":0}"#
        );
        assert!(matches!(
            Corpus::read_jsonl(dangling.as_bytes()),
            Err(CorpusError::DanglingItem(id)) if id == "z"
        ));
        let headless = good.lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            Corpus::read_jsonl(headless.as_bytes()),
            Err(CorpusError::Parse { .. })
        ));
    }

    #[test]
    fn jsonl_round_trip_keeps_synthetic_policy() {
        let spec = PlantedCorpusSpec::uniform(16, 4, 2, 2, 3);
        let c = generate_planted_corpus(&spec).unwrap().corpus;
        let injected = inject_synthetic_annotators(&c, 8, 1).unwrap();
        let back = Corpus::read_jsonl(injected.to_jsonl_string().as_bytes()).unwrap();
        assert_eq!(back, injected);
    }

    #[test]
    fn largest_remainder_is_within_one() {
        for n in 0..40 {
            let counts = largest_remainder(n, &DEFAULT_SPLIT);
            assert_eq!(counts.iter().sum::<usize>(), n);
            for (c, f) in counts.iter().zip(DEFAULT_SPLIT) {
                assert!((*c as f64 - f * n as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let c = toy(&[&[0, 1], &[1, 1]], 2);
        assert!(matches!(
            stratified_split(&c, [0.5, 0.3, 0.3], 0),
            Err(CorpusError::Config(_))
        ));
    }

    #[test]
    fn lone_dev_annotator_is_transferred() {
        // Annotator 4 only labels item 7.
        let mut records = Vec::new();
        for item in 0..12 {
            for annotator in 0..4 {
                records.push(AnnotationRecord {
                    item,
                    annotator,
                    label: (item + annotator) % 2,
                });
            }
        }
        records.push(AnnotationRecord {
            item: 7,
            annotator: 4,
            label: 1,
        });
        let c = Corpus::new(
            (0..12).map(|i| format!("i{i}")).collect(),
            vec!["t".into(); 12],
            (0..5).map(|j| format!("a{j}")).collect(),
            vec![None; 5],
            2,
            records,
        )
        .unwrap();
        for seed in 0..20 {
            let split = stratified_split(&c, DEFAULT_SPLIT, seed).unwrap();
            assert!(split.train.contains(&7));
            assert!(split.unseen_annotators(&c).is_empty());
            assert!(split.is_partition(12));
        }
    }

    #[test]
    fn injection_counts_and_labels() {
        let mut spec = PlantedCorpusSpec::uniform(800, 50, 5, 2, 11);
        spec.noise_rate = 0.2;
        let c = generate_planted_corpus(&spec).unwrap().corpus;
        let before = c.majority_votes();
        let injected = inject_synthetic_annotators(&c, 8, 5).unwrap();
        assert_eq!(injected.num_annotators(), 66);
        for j in 50..66 {
            assert_eq!(injected.contribution_count(j), 100);
            for r in injected.annotator_records(j) {
                match injected.synthetic_policy(j).unwrap() {
                    SyntheticPolicy::Majority => assert_eq!(r.label, before[r.item]),
                    SyntheticPolicy::AntiMajority => assert_ne!(r.label, before[r.item]),
                }
            }
        }
        assert!(matches!(
            inject_synthetic_annotators(&injected, 8, 5),
            Err(CorpusError::Config(_))
        ));
    }

    #[test]
    fn injection_needs_enough_items() {
        let c = toy(&[&[0usize, 1][..]; 7], 2);
        assert!(matches!(
            inject_synthetic_annotators(&c, 8, 0),
            Err(CorpusError::Config(_))
        ));
    }

    #[test]
    fn planted_degenerate_agreement() {
        let spec = PlantedCorpusSpec::uniform(60, 6, 4, 2, 9);
        let c = generate_planted_corpus(&spec).unwrap().corpus;
        for i in 0..c.num_items() {
            assert_eq!(c.item_disagreement(i).unwrap(), 0.0);
        }
    }

    #[test]
    fn planted_contrarian_disagrees_with_majority() {
        let mut spec = PlantedCorpusSpec::uniform(300, 10, 5, 2, 4);
        spec.annotators[3].flip_probability = 1.0;
        let planted = generate_planted_corpus(&spec).unwrap();
        assert_eq!(planted.contrarians, vec![3]);
        let c = &planted.corpus;
        // Oracle: recount majorities from raw records.
        let mut agree = 0;
        let mut total = 0;
        for r in c.records().iter().filter(|r| r.annotator == 3) {
            let labels: Vec<usize> = c
                .records()
                .iter()
                .filter(|x| x.item == r.item)
                .map(|x| x.label)
                .collect();
            let ones = labels.iter().filter(|&&l| l == 1).count();
            let majority = usize::from(2 * ones > labels.len());
            agree += usize::from(majority == r.label);
            total += 1;
        }
        let oracle = agree as f64 / total as f64;
        assert_eq!(c.similarity_to_majority(3).unwrap(), oracle);
        assert!(oracle < 0.05, "similarity {oracle}");
    }

    #[test]
    fn planted_is_deterministic_and_validated() {
        let mut spec = PlantedCorpusSpec::uniform(50, 8, 3, 3, 21);
        spec.noise_rate = 0.3;
        let a = generate_planted_corpus(&spec).unwrap().corpus.to_jsonl_string();
        let b = generate_planted_corpus(&spec).unwrap().corpus.to_jsonl_string();
        assert_eq!(a, b);
        spec.noise_rate = 1.5;
        assert!(matches!(generate_planted_corpus(&spec), Err(CorpusError::Config(_))));
    }

    #[test]
    fn planted_caps_contributions() {
        let mut spec = PlantedCorpusSpec::uniform(100, 8, 3, 2, 2);
        spec.annotators[0].max_annotations = Some(5);
        let c = generate_planted_corpus(&spec).unwrap().corpus;
        assert!(c.contribution_count(0) <= 5);
    }
}
