//! Text representation `e(x) ∈ R^d`: a trainable mean-pooled embedding bag,
//! or frozen precomputed vectors loaded from disk.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no vector for item `{0}`")]
    MissingVector(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const DEFAULT_VOCAB_CAP: usize = 20_000;
pub const DEFAULT_MAX_SEQ_LEN: usize = 100;
pub const INIT_RANGE: f64 = 0.05;

/// Lowercased words of `text`; any non-alphanumeric character separates words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Token -> index map. Index 0 is the shared unknown token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Frequency-ranked vocabulary (ties broken lexicographically), capped
    /// at `cap` entries including the unknown token.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        counts.remove(UNKNOWN_TOKEN);
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![UNKNOWN_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().take(cap.saturating_sub(1)).map(|(w, _)| w));
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unknown(&self) -> usize {
        0
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }
}

/// Token indices of `text`, truncated to `max_seq_len`; never empty.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = words(text).take(max_seq_len.max(1)).map(|w| vocab.get(&w)).collect();
    if out.is_empty() {
        out.push(vocab.unknown());
    }
    out
}

/// Input to the encoder: the item index (used by fixed vectors) and its
/// token sequence (used by the embedding bag).
#[derive(Debug, Clone, Copy)]
pub struct TextInput<'a> {
    pub item: usize,
    pub tokens: &'a [usize],
}

/// `e = W_p · mean_t E[t] + b_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBag {
    /// V × h token embedding table.
    pub embeddings: Array2<f64>,
    /// d × h projection.
    pub projection: Array2<f64>,
    /// d bias.
    pub bias: Array1<f64>,
    pub max_seq_len: usize,
}

impl EmbeddingBag {
    pub fn init<R: Rng>(vocab_size: usize, token_dim: usize, dim: usize, max_seq_len: usize, rng: &mut R) -> Self {
        Self {
            embeddings: uniform_matrix(vocab_size, token_dim, rng),
            projection: uniform_matrix(dim, token_dim, rng),
            bias: Array1::from_shape_fn(dim, |_| rng.random_range(-INIT_RANGE..INIT_RANGE)),
            max_seq_len,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(EncoderError::InvalidInput("empty token sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.embeddings.nrows()) {
            return Err(EncoderError::InvalidInput(format!(
                "token {t} outside vocabulary of {}",
                self.embeddings.nrows()
            )));
        }
        Ok(())
    }

    fn pooled(&self, tokens: &[usize]) -> Array1<f64> {
        let mut pooled = Array1::zeros(self.token_dim());
        for &t in tokens {
            pooled += &self.embeddings.row(t);
        }
        pooled / tokens.len() as f64
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        self.check_tokens(tokens)?;
        Ok(self.projection.dot(&self.pooled(tokens)) + &self.bias)
    }

    /// Adds the gradients of `upstream · e(tokens)` into `grads`.
    pub fn accumulate_backward(
        &self,
        tokens: &[usize],
        upstream: &Array1<f64>,
        grads: &mut EmbeddingBag,
    ) -> Result<()> {
        self.check_tokens(tokens)?;
        if upstream.len() != self.dim() {
            return Err(EncoderError::InvalidInput(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                self.dim()
            )));
        }
        let pooled = self.pooled(tokens);
        for (r, &u) in upstream.iter().enumerate() {
            grads.projection.row_mut(r).scaled_add(u, &pooled);
        }
        grads.bias += upstream;
        let d_pooled = self.projection.t().dot(upstream) / tokens.len() as f64;
        for &t in tokens {
            grads.embeddings.row_mut(t).scaled_add(1.0, &d_pooled);
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embeddings: Array2::zeros(self.embeddings.raw_dim()),
            projection: Array2::zeros(self.projection.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            max_seq_len: self.max_seq_len,
        }
    }
}

/// Frozen per-item vectors, rows indexed by corpus item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedVectors {
    pub vectors: Array2<f64>,
}

/// Parses a TSV of `item_id \t v1 ... vd` rows and aligns it with the
/// corpus items. Blank lines and `#` comments are skipped.
pub fn parse_fixed_vectors(text: &str, corpus: &Corpus) -> Result<FixedVectors> {
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let values = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| EncoderError::Parse {
                    line: n + 1,
                    message: format!("bad float `{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::Parse {
                line: n + 1,
                message: "non-finite value".into(),
            });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(EncoderError::Dimension(format!(
                    "line {} has {} values, expected {d}",
                    n + 1,
                    values.len()
                )))
            }
            _ => {}
        }
        rows.insert(id, values);
    }
    let dim = dim.unwrap_or(0);
    if dim == 0 {
        return Err(EncoderError::Dimension("vectors have no components".into()));
    }
    let mut vectors = Array2::zeros((corpus.num_items(), dim));
    for (i, id) in corpus.item_ids().iter().enumerate() {
        let row = rows.get(id).ok_or_else(|| EncoderError::MissingVector(id.clone()))?;
        vectors.row_mut(i).assign(&Array1::from(row.clone()));
    }
    Ok(FixedVectors { vectors })
}

pub fn load_fixed_vectors(path: impl AsRef<Path>, corpus: &Corpus) -> Result<FixedVectors> {
    parse_fixed_vectors(&std::fs::read_to_string(path)?, corpus)
}

/// The text encoder shared by all three architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    Bag(EmbeddingBag),
    Fixed(FixedVectors),
}

impl Encoder {
    pub fn dim(&self) -> usize {
        match self {
            Encoder::Bag(bag) => bag.dim(),
            Encoder::Fixed(f) => f.vectors.ncols(),
        }
    }

    pub fn encode(&self, input: TextInput<'_>) -> Result<Array1<f64>> {
        match self {
            Encoder::Bag(bag) => bag.encode(input.tokens),
            Encoder::Fixed(f) => {
                if input.item >= f.vectors.nrows() {
                    return Err(EncoderError::MissingVector(format!("#{}", input.item)));
                }
                Ok(f.vectors.row(input.item).to_owned())
            }
        }
    }

    /// Accumulates parameter gradients; frozen vectors contribute nothing.
    pub fn accumulate_backward(&self, input: TextInput<'_>, upstream: &Array1<f64>, grads: &mut Encoder) -> Result<()> {
        match (self, grads) {
            (Encoder::Bag(bag), Encoder::Bag(g)) => bag.accumulate_backward(input.tokens, upstream, g),
            (Encoder::Fixed(f), Encoder::Fixed(_)) => {
                if upstream.len() != f.vectors.ncols() {
                    return Err(EncoderError::InvalidInput("upstream gradient length".into()));
                }
                Ok(())
            }
            _ => Err(EncoderError::InvalidInput("gradient buffer kind mismatch".into())),
        }
    }

    /// Gradients of `upstream · e(input)` as a fresh buffer.
    pub fn backward(&self, input: TextInput<'_>, upstream: &Array1<f64>) -> Result<Encoder> {
        let mut grads = self.zeros_like();
        self.accumulate_backward(input, upstream, &mut grads)?;
        Ok(grads)
    }

    pub fn zeros_like(&self) -> Encoder {
        match self {
            Encoder::Bag(bag) => Encoder::Bag(bag.zeros_like()),
            // Frozen: the gradient buffer carries no tensors.
            Encoder::Fixed(_) => Encoder::Fixed(FixedVectors {
                vectors: Array2::zeros((0, 0)),
            }),
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Encoder::Bag(bag) => vec![
                slice_mut(&mut bag.embeddings),
                slice_mut(&mut bag.projection),
                bag.bias.as_slice_mut().expect("contiguous bias"),
            ],
            Encoder::Fixed(_) => Vec::new(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Encoder::Bag(bag) => vec![
                bag.embeddings.as_slice().expect("contiguous"),
                bag.projection.as_slice().expect("contiguous"),
                bag.bias.as_slice().expect("contiguous"),
            ],
            Encoder::Fixed(_) => Vec::new(),
        }
    }

    pub fn max_seq_len(&self) -> Option<usize> {
        match self {
            Encoder::Bag(bag) => Some(bag.max_seq_len),
            Encoder::Fixed(_) => None,
        }
    }
}

pub(crate) fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn uniform_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-INIT_RANGE..INIT_RANGE))
}

/// Tokenizes every corpus item; empty sequences for fixed encoders.
pub fn tokenize_corpus(corpus: &Corpus, vocab: Option<&Vocabulary>, max_seq_len: usize) -> Vec<Vec<usize>> {
    match vocab {
        Some(v) => corpus.texts().iter().map(|t| tokenize(t, v, max_seq_len)).collect(),
        None => vec![Vec::new(); corpus.num_items()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnnotationRecord;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_bag(rows: Array2<f64>) -> EmbeddingBag {
        let h = rows.ncols();
        EmbeddingBag {
            embeddings: rows,
            projection: Array2::eye(h),
            bias: Array1::zeros(h),
            max_seq_len: 100,
        }
    }

    #[test]
    fn tokenize_examples() {
        let vocab = Vocabulary::build(["hello world", "world"], 100);
        assert_eq!(vocab.token(1), "world");
        let t = tokenize("Hello, world", &vocab, 100);
        assert_eq!(t, vec![vocab.get("hello"), vocab.get("world")]);
        assert_eq!(tokenize("", &vocab, 100), vec![vocab.unknown()]);
        assert_eq!(tokenize("?!", &vocab, 100), vec![vocab.unknown()]);
        let long = vec!["w"; 150].join(" ");
        assert_eq!(tokenize(&long, &vocab, 100).len(), 100);
        assert_eq!(tokenize("unseen", &vocab, 100), vec![0]);
    }

    #[test]
    fn vocabulary_cap_and_round_trip() {
        let vocab = Vocabulary::build(["b a a c c c"], 3);
        assert_eq!(vocab.len(), 3);
        assert_eq!(vocab.token(1), "c");
        assert_eq!(vocab.token(2), "a");
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.get("a"), 2);
    }

    #[test]
    fn encode_identity_cases() {
        let bag = identity_bag(array![[1.0, 2.0], [3.0, -4.0]]);
        assert_eq!(bag.encode(&[1]).unwrap(), array![3.0, -4.0]);
        assert_eq!(bag.encode(&[0, 1]).unwrap(), array![2.0, -1.0]);
        assert!(matches!(bag.encode(&[]), Err(EncoderError::InvalidInput(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let bag = identity_bag(array![[1.0, 2.0], [3.0, -4.0]]);
        let mut g = bag.zeros_like();
        bag.accumulate_backward(&[0, 1], &array![0.0, 0.0], &mut g).unwrap();
        assert!(g
            .embeddings
            .iter()
            .chain(g.projection.iter())
            .chain(g.bias.iter())
            .all(|&x| x == 0.0));

        let mut g = bag.zeros_like();
        bag.accumulate_backward(&[1], &array![0.5, -2.0], &mut g).unwrap();
        assert_eq!(g.embeddings.row(1), array![0.5, -2.0]);
        assert_eq!(g.embeddings.row(0), array![0.0, 0.0]);

        let mut g = bag.zeros_like();
        assert!(matches!(
            bag.accumulate_backward(&[1], &array![1.0], &mut g),
            Err(EncoderError::InvalidInput(_))
        ));
    }

    fn random_bag(seed: u64, v: usize, h: usize, d: usize) -> EmbeddingBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingBag {
            embeddings: Array2::from_shape_fn((v, h), |_| rng.random_range(-1.0..1.0)),
            projection: Array2::from_shape_fn((d, h), |_| rng.random_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)),
            max_seq_len: 100,
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        for seed in 0..20 {
            let bag = random_bag(seed, 6, 4, 3);
            let tokens = [1, 4, 4, 0, 5];
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let u = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let mut grads = bag.zeros_like();
            bag.accumulate_backward(&tokens, &u, &mut grads).unwrap();
            let f = |b: &EmbeddingBag| b.encode(&tokens).unwrap().dot(&u);
            // The output is affine in each scalar, so a wide step only
            // reduces roundoff.
            let eps = 1e-4;
            let mut worst: f64 = 0.0;
            let mut probe = Encoder::Bag(bag.clone());
            let analytic = Encoder::Bag(grads);
            let analytic = analytic.tensors();
            let n_tensors = probe.tensors_mut().len();
            for t in 0..n_tensors {
                let len = probe.tensors_mut()[t].len();
                for k in 0..len {
                    let orig = probe.tensors_mut()[t][k];
                    probe.tensors_mut()[t][k] = orig + eps;
                    let Encoder::Bag(b) = &probe else { unreachable!() };
                    let plus = f(b);
                    probe.tensors_mut()[t][k] = orig - eps;
                    let Encoder::Bag(b) = &probe else { unreachable!() };
                    let minus = f(b);
                    probe.tensors_mut()[t][k] = orig;
                    let numeric = (plus - minus) / (2.0 * eps);
                    let a = analytic[t][k];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
            }
            assert!(worst <= 1e-6, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn encode_norm_bound_holds() {
        for seed in 0..50 {
            let bag = random_bag(seed, 8, 5, 4);
            let tokens = [0, 3, 7, 7, 2];
            let e = bag.encode(&tokens).unwrap();
            let norm = |v: ndarray::ArrayView1<f64>| v.dot(&v).sqrt();
            // Frobenius norm bounds the operator norm.
            let wp = bag.projection.iter().map(|x| x * x).sum::<f64>().sqrt();
            let max_row = tokens.iter().map(|&t| norm(bag.embeddings.row(t))).fold(0.0, f64::max);
            assert!(e.iter().all(|x| x.is_finite()));
            assert!(norm(e.view()) <= wp * max_row + norm(bag.bias.view()) + 1e-12);
        }
    }

    fn two_item_corpus() -> Corpus {
        Corpus::new(
            vec!["x".into(), "y".into()],
            vec!["a".into(), "b".into()],
            vec!["p".into()],
            vec![None],
            2,
            vec![
                AnnotationRecord {
                    item: 0,
                    annotator: 0,
                    label: 0,
                },
                AnnotationRecord {
                    item: 1,
                    annotator: 0,
                    label: 1,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn fixed_vectors_load_and_freeze() {
        let corpus = two_item_corpus();
        let fixed = parse_fixed_vectors("y\t3\t4\nx\t1\t2\n", &corpus).unwrap();
        let enc = Encoder::Fixed(fixed);
        assert_eq!(enc.dim(), 2);
        assert_eq!(
            enc.encode(TextInput { item: 1, tokens: &[] }).unwrap(),
            array![3.0, 4.0]
        );
        let g = enc
            .backward(TextInput { item: 0, tokens: &[] }, &array![1.0, 1.0])
            .unwrap();
        let mut g = g;
        assert!(g.tensors_mut().is_empty());

        assert!(matches!(
            parse_fixed_vectors("x\t1\t2\n", &corpus),
            Err(EncoderError::MissingVector(id)) if id == "y"
        ));
        assert!(matches!(
            parse_fixed_vectors("x\t1\t2\ny\t1\n", &corpus),
            Err(EncoderError::Dimension(_))
        ));
    }

    proptest! {
        #[test]
        fn encode_is_order_invariant(perm_seed in 0u64..1000, len in 1usize..12) {
            let bag = random_bag(7, 10, 4, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..10)).collect();
            let mut shuffled = tokens.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let a = bag.encode(&tokens).unwrap();
            let b = bag.encode(&shuffled).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn truncation_ignores_tail(extra in "[a-z ]{0,40}") {
            let vocab = Vocabulary::build(["a b c d e f g h"], 50);
            let head = "a b c d e";
            let bag = random_bag(3, vocab.len(), 4, 2);
            let base = bag.encode(&tokenize(head, &vocab, 5)).unwrap();
            let longer = bag.encode(&tokenize(&format!("{head} {extra}"), &vocab, 5)).unwrap();
            prop_assert_eq!(base, longer);
        }
    }
}
