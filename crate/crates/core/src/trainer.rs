//! Mini-batch training with Adam and decoupled weight decay, best-epoch
//! selection on dev annotator-level F1, checkpoints and the α×λ grid.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotationRecord, Corpus, DataSplit};
use crate::encoder::{tokenize_corpus, EmbeddingBag, Encoder, FixedVectors, Vocabulary};
use crate::metrics::{self, MetricsError, PredictionSet};
use crate::model::{Activation, Combiner, Model, ModelError, ModelKind, ModelShape, TensorRole};
use crate::objective::{
    total_loss_and_gradients, Batch, LossBreakdown, Normalization, ObjectiveConfig, ObjectiveError, PairMode,
};
use crate::TOOL_VERSION;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical error at epoch {epoch}, batch {batch}: {source}")]
    Numerical {
        epoch: usize,
        batch: usize,
        source: ObjectiveError,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn default_learning_rate() -> f64 {
    5e-5
}
fn default_batch_size() -> usize {
    100
}
fn default_max_epochs() -> usize {
    20
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    0.1
}
fn default_tau() -> f64 {
    0.07
}
fn default_dim() -> usize {
    32
}
fn default_max_seq_len() -> usize {
    crate::encoder::DEFAULT_MAX_SEQ_LEN
}
fn default_vocab_cap() -> usize {
    crate::encoder::DEFAULT_VOCAB_CAP
}
fn default_model_kind() -> ModelKind {
    ModelKind::Aart
}
fn default_alpha_grid() -> Vec<f64> {
    vec![0.1, 0.2, 0.3]
}
fn default_lambda_grid() -> Vec<f64> {
    vec![0.0, 0.1, 0.2]
}

/// Training hyperparameters. Every field has a default, so a JSON config
/// only needs the fields it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub pairs: PairMode,
    #[serde(default)]
    pub normalization: Normalization,
    /// Text and annotator embedding width.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Token embedding width of the bag encoder.
    #[serde(default = "default_dim")]
    pub token_dim: usize,
    /// Hidden width of the classification head; `None` means `dim` and 0
    /// gives a purely linear head.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_vocab_cap")]
    pub vocab_cap: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model_kind")]
    pub model_kind: ModelKind,
    #[serde(default)]
    pub combiner: Combiner,
    #[serde(default)]
    pub zero_annotator_init: bool,
    #[serde(default)]
    pub freeze_annotator_embeddings: bool,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.dim == 0 || self.token_dim == 0 {
            return bad("dim and token_dim must be >= 1".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be >= 1".into());
        }
        self.objective()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            tau: self.tau,
            pairs: self.pairs,
            normalization: self.normalization,
        }
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.dim)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per tensor plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_shapes(lens: &[usize]) -> Self {
        Self {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One Adam update over parallel lists of tensors. Tensors with
/// `trainable[k] == false` are left untouched, moments included.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    trainable: &[bool],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let shapes_match = params.len() == grads.len()
        && params.len() == trainable.len()
        && params.len() == state.m.len()
        && params.len() == state.v.len()
        && params
            .iter()
            .zip(grads)
            .zip(state.m.iter().zip(&state.v))
            .all(|((p, g), (m, v))| p.len() == g.len() && p.len() == m.len() && p.len() == v.len());
    if !shapes_match {
        return Err(TrainError::InvalidInput(
            "parameter, gradient and moment shapes differ".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for k in 0..params.len() {
        if !trainable[k] {
            continue;
        }
        let (p, g, m, v) = (&mut *params[k], grads[k], &mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            p[i] -= cfg.learning_rate * cfg.weight_decay * p[i];
            p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

fn model_adam_step(
    model: &mut Model,
    grads: &Model,
    state: &mut AdamState,
    cfg: &AdamConfig,
    freeze_annotators: bool,
) -> Result<()> {
    let grads = grads.tensors();
    let g: Vec<&[f64]> = grads.iter().map(|(_, t)| *t).collect();
    let trainable: Vec<bool> = grads
        .iter()
        .map(|(role, _)| !(freeze_annotators && *role == TensorRole::AnnotatorEmbeddings))
        .collect();
    let mut params: Vec<&mut [f64]> = model.tensors_mut().into_iter().map(|(_, t)| t).collect();
    adam_step(&mut params, &g, &trainable, state, cfg)
}

/// Per-epoch training log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Batch-size weighted averages; pair counts are epoch totals.
    pub loss: LossBreakdown,
    pub dev_annotator_f1: f64,
    pub seconds: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tool_version: String,
    pub config: TrainConfig,
    /// Epochs completed when the parameters were captured.
    pub epoch: usize,
    pub dev_annotator_f1: f64,
    pub annotator_ids: Vec<String>,
    /// `None` for fixed-vector encoders.
    pub vocabulary: Option<Vocabulary>,
    pub model: Model,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Token ids for every corpus item under this checkpoint's vocabulary.
    pub fn tokenize(&self, corpus: &Corpus) -> Vec<Vec<usize>> {
        tokenize_corpus(corpus, self.vocabulary.as_ref(), self.config.max_seq_len)
    }

    /// Fails unless `corpus` has the annotators the model was trained on.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if self.annotator_ids != corpus.annotator_ids() {
            return Err(TrainError::Data(
                "corpus annotators differ from the ones the checkpoint was trained on".into(),
            ));
        }
        if let Encoder::Fixed(f) = self.model.encoder() {
            if f.vectors.nrows() != corpus.num_items() {
                return Err(TrainError::Data(format!(
                    "fixed vectors cover {} items, corpus has {}",
                    f.vectors.nrows(),
                    corpus.num_items()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<EpochReport>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Replaces the trainable bag encoder with frozen per-item vectors.
    pub fixed_vectors: Option<FixedVectors>,
    /// Continues from these parameters at the checkpoint's epoch, with fresh
    /// optimizer moments.
    pub resume: Option<Checkpoint>,
}

/// Training examples: every train annotation, or for single-task one
/// majority-vote example per train item.
pub fn training_records(corpus: &Corpus, split: &DataSplit, kind: ModelKind) -> Vec<AnnotationRecord> {
    match kind {
        ModelKind::Single => split
            .train
            .iter()
            .map(|&item| AnnotationRecord {
                item,
                annotator: 0,
                label: corpus.majority_vote(item).expect("items are never empty"),
            })
            .collect(),
        _ => split
            .train
            .iter()
            .flat_map(|&item| corpus.item_records(item).copied())
            .collect(),
    }
}

/// Annotator-level F1 over the dev split.
pub fn dev_annotator_f1(model: &Model, corpus: &Corpus, split: &DataSplit, tokens: &[Vec<usize>]) -> Result<f64> {
    let set = PredictionSet::from_model(model, corpus, tokens, &split.dev)?;
    Ok(metrics::annotator_level_f1(&set)?)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn check_split(corpus: &Corpus, split: &DataSplit) -> Result<()> {
    if !split.is_partition(corpus.num_items()) {
        return Err(TrainError::Data("split is not a partition of the corpus items".into()));
    }
    if !split.unseen_annotators(corpus).is_empty() {
        return Err(TrainError::Data(
            "split has dev/test annotators absent from train".into(),
        ));
    }
    if split.train.is_empty() || split.dev.is_empty() {
        return Err(TrainError::Data("train and dev splits must be non-empty".into()));
    }
    Ok(())
}

pub fn train(corpus: &Corpus, split: &DataSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, split, config, TrainOptions::default())
}

pub fn train_with(
    corpus: &Corpus,
    split: &DataSplit,
    config: &TrainConfig,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_split(corpus, split)?;

    let (mut model, vocabulary, start_epoch) = match options.resume {
        Some(ckpt) => {
            ckpt.check_corpus(corpus)?;
            if ckpt.model.kind() != config.model_kind {
                return Err(TrainError::Config(format!(
                    "checkpoint holds a {} model, config asks for {}",
                    ckpt.model.kind(),
                    config.model_kind
                )));
            }
            (ckpt.model, ckpt.vocabulary, ckpt.epoch)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let (encoder, vocabulary) = match options.fixed_vectors {
                Some(f) => {
                    if f.vectors.nrows() != corpus.num_items() {
                        return Err(TrainError::Data(format!(
                            "fixed vectors cover {} items, corpus has {}",
                            f.vectors.nrows(),
                            corpus.num_items()
                        )));
                    }
                    (Encoder::Fixed(f), None)
                }
                None => {
                    let vocab = Vocabulary::build(split.train.iter().map(|&i| corpus.text(i)), config.vocab_cap);
                    let bag =
                        EmbeddingBag::init(vocab.len(), config.token_dim, config.dim, config.max_seq_len, &mut rng);
                    (Encoder::Bag(bag), Some(vocab))
                }
            };
            let shape = ModelShape {
                kind: config.model_kind,
                combiner: config.combiner,
                num_annotators: corpus.num_annotators(),
                num_labels: corpus.num_labels(),
                head_hidden: config.head_hidden(),
                activation: config.activation,
                zero_annotator_init: config.zero_annotator_init,
            };
            (Model::init(shape, encoder, &mut rng), vocabulary, 0)
        }
    };

    let tokens = tokenize_corpus(corpus, vocabulary.as_ref(), config.max_seq_len);
    let checkpoint = |model: &Model, epoch: usize, dev: f64| Checkpoint {
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        epoch,
        dev_annotator_f1: dev,
        annotator_ids: corpus.annotator_ids().to_vec(),
        vocabulary: vocabulary.clone(),
        model: model.clone(),
    };

    let mut best: Option<Checkpoint> = None;
    let mut reports = Vec::new();
    let mut records = training_records(corpus, split, config.model_kind);
    let lens: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::for_shapes(&lens);
    let adam_cfg = config.adam();
    let objective = config.objective();

    for epoch in start_epoch..config.max_epochs {
        let started = Instant::now();
        // Shuffle from the canonical order so a resumed run sees the same
        // batches as an uninterrupted one.
        records.sort_unstable_by_key(|r| (r.item, r.annotator));
        records.shuffle(&mut epoch_rng(config.seed, epoch));
        let mut sum = LossBreakdown::default();
        for (b, chunk) in records.chunks(config.batch_size).enumerate() {
            let batch = Batch::new(chunk.to_vec());
            let (loss, grads) = total_loss_and_gradients(&model, &tokens, &batch, &objective).map_err(|source| {
                TrainError::Numerical {
                    epoch,
                    batch: b,
                    source,
                }
            })?;
            let w = chunk.len() as f64;
            sum.ce += w * loss.ce;
            sum.l2 += w * loss.l2;
            sum.contrastive += w * loss.contrastive;
            sum.total += w * loss.total;
            sum.positive_pairs += loss.positive_pairs;
            sum.negative_pairs += loss.negative_pairs;
            model_adam_step(
                &mut model,
                &grads,
                &mut adam,
                &adam_cfg,
                config.freeze_annotator_embeddings,
            )?;
            if !model.is_finite() {
                return Err(TrainError::Numerical {
                    epoch,
                    batch: b,
                    source: ObjectiveError::Numerical("parameters became non-finite".into()),
                });
            }
        }
        let n = records.len() as f64;
        sum.ce /= n;
        sum.l2 /= n;
        sum.contrastive /= n;
        sum.total /= n;
        let dev = dev_annotator_f1(&model, corpus, split, &tokens)?;
        let is_best = best.as_ref().is_none_or(|b| dev > b.dev_annotator_f1);
        if is_best {
            best = Some(checkpoint(&model, epoch + 1, dev));
        }
        reports.push(EpochReport {
            epoch,
            loss: sum,
            dev_annotator_f1: dev,
            seconds: started.elapsed().as_secs_f64(),
            is_best,
        });
    }

    let checkpoint = match best {
        Some(c) => c,
        None => {
            let dev = dev_annotator_f1(&model, corpus, split, &tokens)?;
            checkpoint(&model, start_epoch, dev)
        }
    };
    Ok(TrainOutcome { checkpoint, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub lambda: f64,
    pub dev_annotator_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    /// Row-major over `alpha_grid × lambda_grid`.
    pub cells: Vec<GridCell>,
    pub best: usize,
    pub outcome: TrainOutcome,
}

impl GridOutcome {
    pub fn best_config(&self) -> &TrainConfig {
        &self.outcome.checkpoint.config
    }
}

/// Index of the best cell: highest dev F1, ties toward smaller α then λ.
pub fn select_cell(cells: &[GridCell]) -> Option<usize> {
    (0..cells.len()).reduce(|best, k| {
        let (a, b) = (&cells[k], &cells[best]);
        let better = a.dev_annotator_f1 > b.dev_annotator_f1
            || (a.dev_annotator_f1 == b.dev_annotator_f1
                && (a.alpha < b.alpha || (a.alpha == b.alpha && a.lambda < b.lambda)));
        if better {
            k
        } else {
            best
        }
    })
}

/// Trains one cell per `(α, λ)` of the config's grids on up to `jobs`
/// threads.
pub fn grid_search(
    corpus: &Corpus,
    split: &DataSplit,
    base: &TrainConfig,
    options: &TrainOptions,
    jobs: usize,
) -> Result<GridOutcome> {
    if base.alpha_grid.is_empty() || base.lambda_grid.is_empty() {
        return Err(TrainError::Config(
            "alpha_grid and lambda_grid must be non-empty".into(),
        ));
    }
    let configs: Vec<TrainConfig> = base
        .alpha_grid
        .iter()
        .flat_map(|&alpha| {
            base.lambda_grid.iter().map(move |&lambda| TrainConfig {
                alpha,
                lambda,
                ..base.clone()
            })
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let outcomes: Vec<Result<TrainOutcome>> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| train_with(corpus, split, c, options.clone()))
            .collect()
    });
    let outcomes: Vec<TrainOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let cells: Vec<GridCell> = configs
        .iter()
        .zip(&outcomes)
        .map(|(c, o)| GridCell {
            alpha: c.alpha,
            lambda: c.lambda,
            dev_annotator_f1: o.checkpoint.dev_annotator_f1,
        })
        .collect();
    let best = select_cell(&cells).expect("grid is non-empty");
    let outcome = outcomes.into_iter().nth(best).expect("best index is in range");
    Ok(GridOutcome { cells, best, outcome })
}
