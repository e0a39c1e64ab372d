//! The three architectures: AART (text embedding plus annotator embedding
//! into a shared head), multi-task (one head per annotator) and single-task
//! (one head predicting the aggregated label).

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::majority_label;
use crate::encoder::{slice_mut, uniform_matrix, Encoder, EncoderError, TextInput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("annotator #{0} not in model")]
    UnknownAnnotator(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Fully connected layer `W·x + b` with `W: out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Self { weight, bias }
    }

    /// Uniform weights, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_matrix(outputs, inputs, rng),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.ncols(), self.weight.nrows())
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` and returns `Wᵀ dy`.
    fn backward(&self, x: &Array1<f64>, dy: &Array1<f64>, grads: &mut Linear) -> Array1<f64> {
        for (r, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                grads.weight.row_mut(r).scaled_add(g, x);
            }
        }
        grads.bias += dy;
        self.weight.t().dot(dy)
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            slice_mut(&mut self.weight),
            self.bias.as_slice_mut().expect("contiguous"),
        ]
    }

    fn tensors(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("contiguous"),
            self.bias.as_slice().expect("contiguous"),
        ]
    }
}

/// Nonlinearity between the hidden and output layers of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    #[default]
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation output; 0 at the ReLU kink.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Classification head: `out(act(hidden(g)))`, or `out(g)` when there is
/// no hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: Option<Linear>,
    pub output: Linear,
    #[serde(default)]
    pub activation: Activation,
}

/// Intermediate values of one head evaluation.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub activation: Option<Array1<f64>>,
    pub logits: Array1<f64>,
}

impl Head {
    pub fn linear(output: Linear) -> Self {
        Self {
            hidden: None,
            output,
            activation: Activation::default(),
        }
    }

    pub fn init<R: Rng>(inputs: usize, hidden: usize, num_labels: usize, activation: Activation, rng: &mut R) -> Self {
        if hidden == 0 {
            Self::linear(Linear::init(inputs, num_labels, rng))
        } else {
            Self {
                hidden: Some(Linear::init(inputs, hidden, rng)),
                output: Linear::init(hidden, num_labels, rng),
                activation,
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.output).weight.ncols()
    }

    pub fn num_labels(&self) -> usize {
        self.output.weight.nrows()
    }

    /// First layer seen by the combined representation.
    pub fn first_layer(&self) -> &Linear {
        self.hidden.as_ref().unwrap_or(&self.output)
    }

    pub fn first_layer_mut(&mut self) -> &mut Linear {
        self.hidden.as_mut().unwrap_or(&mut self.output)
    }

    pub fn trace(&self, g: &Array1<f64>) -> HeadTrace {
        match &self.hidden {
            None => HeadTrace {
                activation: None,
                logits: self.output.forward(g),
            },
            Some(hidden) => {
                let act = self.activation;
                let a = hidden.forward(g).mapv(|v| act.apply(v));
                let logits = self.output.forward(&a);
                HeadTrace {
                    activation: Some(a),
                    logits,
                }
            }
        }
    }

    pub fn forward(&self, g: &Array1<f64>) -> Array1<f64> {
        self.trace(g).logits
    }

    /// Accumulates head gradients and returns the gradient w.r.t. `g`.
    pub fn backward(&self, g: &Array1<f64>, trace: &HeadTrace, dlogits: &Array1<f64>, grads: &mut Head) -> Array1<f64> {
        match (&self.hidden, &trace.activation, &mut grads.hidden) {
            (None, _, _) => self.output.backward(g, dlogits, &mut grads.output),
            (Some(hidden), Some(a), Some(gh)) => {
                let da = self.output.backward(a, dlogits, &mut grads.output);
                let act = self.activation;
                let dpre = &da * &a.mapv(|v| act.derivative_from_output(v));
                hidden.backward(g, &dpre, gh)
            }
            _ => unreachable!("trace and gradient buffers follow the head layout"),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.as_ref().map(Linear::zeros_like),
            output: self.output.zeros_like(),
            activation: self.activation,
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4);
        if let Some(h) = &mut self.hidden {
            out.extend(h.tensors_mut());
        }
        out.extend(self.output.tensors_mut());
        out
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4);
        if let Some(h) = &self.hidden {
            out.extend(h.tensors());
        }
        out.extend(self.output.tensors());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    /// `g = e(x) + f(a)`.
    #[default]
    Sum,
    /// `g = [e(x); onehot(a)]`, the ablation without learned embeddings.
    ConcatOneHot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Single,
    Multi,
    Aart,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Single => "single",
            ModelKind::Multi => "multi",
            ModelKind::Aart => "aart",
        })
    }
}

/// AART parameters. Under [`Combiner::Sum`], row `j` of `annotators` is the
/// embedding of annotator `j`; under [`Combiner::ConcatOneHot`] the matrix
/// has zero columns and the head takes `d + M` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AartParams {
    pub annotators: Array2<f64>,
    pub head: Head,
    pub combiner: Combiner,
    pub encoder: Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskParams {
    pub heads: Vec<Head>,
    pub encoder: Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTaskParams {
    pub head: Head,
    pub encoder: Encoder,
}

impl AartParams {
    pub fn num_annotators(&self) -> usize {
        self.annotators.nrows()
    }

    /// Combined representation `g(x, a)` from a precomputed text embedding.
    pub fn combine(&self, e: &Array1<f64>, annotator: usize) -> Result<Array1<f64>> {
        if annotator >= self.num_annotators() {
            return Err(ModelError::UnknownAnnotator(annotator));
        }
        Ok(match self.combiner {
            Combiner::Sum => e + &self.annotators.row(annotator),
            Combiner::ConcatOneHot => {
                let d = e.len();
                let mut g = Array1::zeros(d + self.num_annotators());
                g.slice_mut(s![..d]).assign(e);
                g[d + annotator] = 1.0;
                g
            }
        })
    }

    pub fn forward(&self, input: TextInput<'_>, annotator: usize) -> Result<Array1<f64>> {
        let e = self.encoder.encode(input)?;
        Ok(self.head.forward(&self.combine(&e, annotator)?))
    }
}

impl MultiTaskParams {
    pub fn forward(&self, input: TextInput<'_>, annotator: usize) -> Result<Array1<f64>> {
        let head = self
            .heads
            .get(annotator)
            .ok_or(ModelError::UnknownAnnotator(annotator))?;
        Ok(head.forward(&self.encoder.encode(input)?))
    }
}

impl SingleTaskParams {
    pub fn forward(&self, input: TextInput<'_>) -> Result<Array1<f64>> {
        Ok(self.head.forward(&self.encoder.encode(input)?))
    }
}

/// Architecture sizes used by [`Model::init`].
#[derive(Debug, Clone, Copy)]
pub struct ModelShape {
    pub kind: ModelKind,
    pub combiner: Combiner,
    pub num_annotators: usize,
    pub num_labels: usize,
    pub head_hidden: usize,
    pub activation: Activation,
    pub zero_annotator_init: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Single(SingleTaskParams),
    Multi(MultiTaskParams),
    Aart(AartParams),
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub combined: Array1<f64>,
    pub head: HeadTrace,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array1<f64> {
        &self.head.logits
    }
}

/// Argmax with smallest-index tie-break.
pub fn predict_label(logits: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Which annotators vote in aggregated prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationSet {
    /// Annotators with ground-truth records on the item.
    #[default]
    ItemAnnotators,
    /// Every annotator known to the model.
    AllAnnotators,
}

impl Model {
    /// Draws initial parameters around `encoder`.
    pub fn init<R: Rng>(shape: ModelShape, encoder: Encoder, rng: &mut R) -> Self {
        let d = encoder.dim();
        let q = shape.num_labels;
        match shape.kind {
            ModelKind::Single => Model::Single(SingleTaskParams {
                head: Head::init(d, shape.head_hidden, q, shape.activation, rng),
                encoder,
            }),
            ModelKind::Multi => Model::Multi(MultiTaskParams {
                heads: (0..shape.num_annotators)
                    .map(|_| Head::init(d, shape.head_hidden, q, shape.activation, rng))
                    .collect(),
                encoder,
            }),
            ModelKind::Aart => {
                let (annotators, inputs) = match shape.combiner {
                    Combiner::Sum if shape.zero_annotator_init => (Array2::zeros((shape.num_annotators, d)), d),
                    Combiner::Sum => (uniform_matrix(shape.num_annotators, d, rng), d),
                    Combiner::ConcatOneHot => (Array2::zeros((shape.num_annotators, 0)), d + shape.num_annotators),
                };
                Model::Aart(AartParams {
                    annotators,
                    head: Head::init(inputs, shape.head_hidden, q, shape.activation, rng),
                    combiner: shape.combiner,
                    encoder,
                })
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Single(_) => ModelKind::Single,
            Model::Multi(_) => ModelKind::Multi,
            Model::Aart(_) => ModelKind::Aart,
        }
    }

    pub fn encoder(&self) -> &Encoder {
        match self {
            Model::Single(p) => &p.encoder,
            Model::Multi(p) => &p.encoder,
            Model::Aart(p) => &p.encoder,
        }
    }

    pub fn encoder_mut(&mut self) -> &mut Encoder {
        match self {
            Model::Single(p) => &mut p.encoder,
            Model::Multi(p) => &mut p.encoder,
            Model::Aart(p) => &mut p.encoder,
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            Model::Single(p) => p.head.num_labels(),
            Model::Multi(p) => p.heads.first().map_or(0, Head::num_labels),
            Model::Aart(p) => p.head.num_labels(),
        }
    }

    /// Number of annotators the model distinguishes; `None` for single-task.
    pub fn num_annotators(&self) -> Option<usize> {
        match self {
            Model::Single(_) => None,
            Model::Multi(p) => Some(p.heads.len()),
            Model::Aart(p) => Some(p.num_annotators()),
        }
    }

    /// Logits for `(item, annotator)`. Single-task ignores the annotator.
    pub fn logits(&self, input: TextInput<'_>, annotator: usize) -> Result<Array1<f64>> {
        match self {
            Model::Single(p) => p.forward(input),
            Model::Multi(p) => p.forward(input, annotator),
            Model::Aart(p) => p.forward(input, annotator),
        }
    }

    pub fn predict(&self, input: TextInput<'_>, annotator: usize) -> Result<usize> {
        Ok(predict_label(&self.logits(input, annotator)?))
    }

    /// Majority of the per-annotator predictions over `annotators`.
    /// Single-task returns its own prediction and ignores the set.
    pub fn predict_aggregated(&self, input: TextInput<'_>, annotators: &[usize]) -> Result<usize> {
        if let Model::Single(p) = self {
            return Ok(predict_label(&p.forward(input)?));
        }
        if annotators.is_empty() {
            return Err(ModelError::InvalidInput("empty annotator set".into()));
        }
        let e = self.encoder().encode(input)?;
        let mut votes = Vec::with_capacity(annotators.len());
        for &a in annotators {
            let logits = match self {
                Model::Multi(p) => p.heads.get(a).ok_or(ModelError::UnknownAnnotator(a))?.forward(&e),
                Model::Aart(p) => p.head.forward(&p.combine(&e, a)?),
                Model::Single(_) => unreachable!(),
            };
            votes.push(predict_label(&logits));
        }
        Ok(majority_label(votes).expect("non-empty votes"))
    }

    /// Forward pass from a precomputed text embedding, keeping the values the
    /// backward pass needs.
    pub fn trace_from_embedding(&self, e: &Array1<f64>, annotator: usize) -> Result<ForwardTrace> {
        let (combined, head) = match self {
            Model::Single(p) => (e.clone(), &p.head),
            Model::Multi(p) => (
                e.clone(),
                p.heads.get(annotator).ok_or(ModelError::UnknownAnnotator(annotator))?,
            ),
            Model::Aart(p) => (p.combine(e, annotator)?, &p.head),
        };
        let head = head.trace(&combined);
        Ok(ForwardTrace { combined, head })
    }

    /// Backpropagates `dlogits` through the head, the combiner and the
    /// encoder, accumulating into `grads` (a buffer from [`Model::zeros_like`]).
    pub fn accumulate_backward(
        &self,
        input: TextInput<'_>,
        annotator: usize,
        trace: &ForwardTrace,
        dlogits: &Array1<f64>,
        grads: &mut Model,
    ) -> Result<()> {
        let de = match (self, &mut *grads) {
            (Model::Single(p), Model::Single(g)) => p.head.backward(&trace.combined, &trace.head, dlogits, &mut g.head),
            (Model::Multi(p), Model::Multi(g)) => {
                let head = p.heads.get(annotator).ok_or(ModelError::UnknownAnnotator(annotator))?;
                head.backward(&trace.combined, &trace.head, dlogits, &mut g.heads[annotator])
            }
            (Model::Aart(p), Model::Aart(g)) => {
                let dg = p.head.backward(&trace.combined, &trace.head, dlogits, &mut g.head);
                match p.combiner {
                    Combiner::Sum => {
                        g.annotators.row_mut(annotator).scaled_add(1.0, &dg);
                        dg
                    }
                    Combiner::ConcatOneHot => dg.slice(s![..p.encoder.dim()]).to_owned(),
                }
            }
            _ => return Err(ModelError::InvalidInput("gradient buffer kind mismatch".into())),
        };
        self.encoder().accumulate_backward(input, &de, grads.encoder_mut())?;
        Ok(())
    }

    /// A gradient buffer with the same layout and all entries zero.
    pub fn zeros_like(&self) -> Model {
        match self {
            Model::Single(p) => Model::Single(SingleTaskParams {
                head: p.head.zeros_like(),
                encoder: p.encoder.zeros_like(),
            }),
            Model::Multi(p) => Model::Multi(MultiTaskParams {
                heads: p.heads.iter().map(Head::zeros_like).collect(),
                encoder: p.encoder.zeros_like(),
            }),
            Model::Aart(p) => Model::Aart(AartParams {
                annotators: Array2::zeros(p.annotators.raw_dim()),
                head: p.head.zeros_like(),
                combiner: p.combiner,
                encoder: p.encoder.zeros_like(),
            }),
        }
    }

    /// Every trainable tensor in a fixed order: annotator embeddings (AART),
    /// head tensors, encoder tensors.
    pub fn tensors_mut(&mut self) -> Vec<(TensorRole, &mut [f64])> {
        let mut out = Vec::new();
        let encoder = match self {
            Model::Single(p) => {
                out.extend(p.head.tensors_mut().into_iter().map(|t| (TensorRole::Head, t)));
                &mut p.encoder
            }
            Model::Multi(p) => {
                for head in &mut p.heads {
                    out.extend(head.tensors_mut().into_iter().map(|t| (TensorRole::Head, t)));
                }
                &mut p.encoder
            }
            Model::Aart(p) => {
                out.push((TensorRole::AnnotatorEmbeddings, slice_mut(&mut p.annotators)));
                out.extend(p.head.tensors_mut().into_iter().map(|t| (TensorRole::Head, t)));
                &mut p.encoder
            }
        };
        out.extend(encoder.tensors_mut().into_iter().map(|t| (TensorRole::Encoder, t)));
        out
    }

    pub fn tensors(&self) -> Vec<(TensorRole, &[f64])> {
        let mut out = Vec::new();
        let encoder = match self {
            Model::Single(p) => {
                out.extend(p.head.tensors().into_iter().map(|t| (TensorRole::Head, t)));
                &p.encoder
            }
            Model::Multi(p) => {
                for head in &p.heads {
                    out.extend(head.tensors().into_iter().map(|t| (TensorRole::Head, t)));
                }
                &p.encoder
            }
            Model::Aart(p) => {
                out.push((
                    TensorRole::AnnotatorEmbeddings,
                    p.annotators.as_slice().expect("contiguous"),
                ));
                out.extend(p.head.tensors().into_iter().map(|t| (TensorRole::Head, t)));
                &p.encoder
            }
        };
        out.extend(encoder.tensors().into_iter().map(|t| (TensorRole::Encoder, t)));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    AnnotatorEmbeddings,
    Head,
    Encoder,
}
