//! Next-place prediction network.
//!
//! Each step's input is the place embedding concatenated with day-of-week,
//! time-of-day and duration embeddings. A stack of LSTM layers runs over the
//! sequence; the hidden states of all layers are concatenated and mapped by a
//! tanh readout to width `d`. Logits are `readout · Eᵀ + b`, where `E` is the
//! place embedding matrix itself (the output layer owns only its bias).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    add_column_sums, affine, affine_backward, embedding_backward, embedding_lookup_into, gemm,
    lstm_backward, lstm_forward, softmax_cross_entropy_rows, Adam, EngineError, GradCheck,
    LstmParams, LstmTrace, Op, Packing, Parameter, Scalar, Tensor,
};
use crate::grid::{CellIndex, GridSpec, HierarchicalVocabulary};
use crate::hier_embedding::{make_partition, EmbeddingError, HierEmbedding, Method};
use crate::trajectories::{BucketConfig, Step, TokenizedTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("place token {token} is outside the vocabulary of {vocab} places")]
    TokenOutOfRange { token: u32, vocab: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub method: Method,
    /// Place embedding width.
    pub d: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Readout width; must equal `d` for the tied output layer.
    pub readout: usize,
    pub dow_dim: usize,
    pub tod_dim: usize,
    pub dur_dim: usize,
    pub epochs: usize,
    /// Optimizer steps between slice averagings.
    pub avg_interval: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub optimizer: Adam,
    pub clip_norm: f64,
    /// Embedding tables start uniform in `[-embed_init, embed_init]`.
    pub embed_init: f64,
    pub average_moments: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            method: Method::Hier,
            d: 64,
            hidden: 128,
            layers: 2,
            readout: 64,
            dow_dim: 4,
            tod_dim: 8,
            dur_dim: 4,
            epochs: 40,
            avg_interval: 10,
            batch_size: 32,
            optimizer: Adam {
                lr: 3e-3,
                ..Adam::default()
            },
            clip_norm: 5.0,
            embed_init: 0.5,
            average_moments: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.readout != self.d {
            return bad("readout width must equal the embedding width d for weight tying");
        }
        if self.d == 0 || self.hidden == 0 || self.layers == 0 {
            return bad("d, hidden and layers must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.avg_interval == 0 {
            return bad("epochs, batch_size and avg_interval must be positive");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0)
        {
            return bad("invalid Adam settings");
        }
        if !(self.clip_norm > 0.0) || !(self.embed_init >= 0.0) {
            return bad("clip_norm must be positive and embed_init non-negative");
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.d + self.dow_dim + self.tod_dim + self.dur_dim
    }
}

/// Vocabulary sizes of the attribute tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSizes {
    pub dow: usize,
    pub tod: usize,
    pub dur: usize,
}

impl From<&BucketConfig> for AttributeSizes {
    fn from(b: &BucketConfig) -> Self {
        Self {
            dow: b.dow_count(),
            tod: b.tod_count(),
            dur: b.dur_count(),
        }
    }
}

/// Flattened, length-sorted batch ready for the packed LSTM.
#[derive(Debug, Clone)]
pub struct Batch {
    pub packing: Packing,
    pub places: Vec<u32>,
    pub dow: Vec<u32>,
    pub tod: Vec<u32>,
    pub dur: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    /// Input step `t` of a sequence predicts its place at `t + 1`.
    pub fn new(seqs: &[&TokenizedTrajectory]) -> Result<Self, ModelError> {
        let mut order: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].len() >= 2).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(seqs[i].len()));
        let lengths: Vec<usize> = order.iter().map(|&i| seqs[i].len() - 1).collect();
        let packing = Packing::from_sorted_lengths(&lengths)?;
        let n = packing.total_rows();
        let mut b = Batch {
            packing,
            places: Vec::with_capacity(n),
            dow: Vec::with_capacity(n),
            tod: Vec::with_capacity(n),
            dur: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
        };
        for t in 0..b.packing.steps() {
            for &i in &order[..b.packing.batch_size(t)] {
                let s = &seqs[i].steps;
                b.places.push(s[t].place);
                b.dow.push(u32::from(s[t].dow));
                b.tod.push(u32::from(s[t].tod));
                b.dur.push(u32::from(s[t].dur));
                b.targets.push(s[t + 1].place);
            }
        }
        Ok(b)
    }

    pub fn predictions(&self) -> usize {
        self.targets.len()
    }
}

struct ForwardPass<F> {
    input: Tensor<F>,
    traces: Vec<LstmTrace<F>>,
    concat: Tensor<F>,
    readout: Tensor<F>,
    logits: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct NextPlaceModel<F> {
    cfg: ModelConfig,
    attrs: AttributeSizes,
    pub places: HierEmbedding<F>,
    pub dow: Parameter<F>,
    pub tod: Parameter<F>,
    pub dur: Parameter<F>,
    pub layers: Vec<LstmParams<F>>,
    pub readout_w: Parameter<F>,
    pub readout_b: Parameter<F>,
    pub output_bias: Parameter<F>,
}

fn uniform<F: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor<F> {
    Tensor::from_fn(rows, cols, |_, _| {
        F::from_f64_lossy(rng.random_range(-bound..=bound))
    })
}

impl<F: Scalar> NextPlaceModel<F> {
    pub fn new<R: Rng>(
        cfg: &ModelConfig,
        vocab: Arc<HierarchicalVocabulary>,
        attrs: AttributeSizes,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let partition = make_partition(cfg.method, cfg.d, vocab.spec().num_levels())?;
        let v = vocab.len();
        let e = cfg.embed_init;
        let mut places = HierEmbedding::random(partition, vocab, e, rng)?;
        places.average_moments = cfg.average_moments;
        let dow = Parameter::new("dow", uniform(rng, attrs.dow, cfg.dow_dim, e));
        let tod = Parameter::new("tod", uniform(rng, attrs.tod, cfg.tod_dim, e));
        let dur = Parameter::new("dur", uniform(rng, attrs.dur, cfg.dur_dim, e));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 {
                cfg.input_width()
            } else {
                cfg.hidden
            };
            layers.push(LstmParams::new(&format!("lstm{l}"), input, cfg.hidden, rng));
        }
        let fan_in = cfg.layers * cfg.hidden;
        let readout_w = Parameter::new(
            "readout.weight",
            uniform(rng, fan_in, cfg.readout, 1.0 / (fan_in as f64).sqrt()),
        );
        Ok(Self {
            cfg: cfg.clone(),
            attrs,
            places,
            dow,
            tod,
            dur,
            layers,
            readout_w,
            readout_b: Parameter::new("readout.bias", Tensor::zeros(1, cfg.readout)),
            output_bias: Parameter::new("output.bias", Tensor::zeros(1, v)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn attributes(&self) -> AttributeSizes {
        self.attrs
    }

    pub fn vocab_size(&self) -> usize {
        self.places.vocab().len()
    }

    /// Weight matrix of the output layer: the place embedding itself.
    pub fn output_weight(&self) -> &Parameter<F> {
        &self.places.matrix
    }

    pub fn parameters(&self) -> Vec<&Parameter<F>> {
        let mut out = vec![&self.places.matrix, &self.dow, &self.tod, &self.dur];
        for l in &self.layers {
            out.extend(l.parameters());
        }
        out.extend([&self.readout_w, &self.readout_b, &self.output_bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut out = vec![
            &mut self.places.matrix,
            &mut self.dow,
            &mut self.tod,
            &mut self.dur,
        ];
        for l in &mut self.layers {
            out.extend(l.parameters_mut());
        }
        out.extend([
            &mut self.readout_w,
            &mut self.readout_b,
            &mut self.output_bias,
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn check_tokens(&self, batch: &Batch) -> Result<(), ModelError> {
        let v = self.vocab_size();
        if let Some(&token) = batch
            .places
            .iter()
            .chain(&batch.targets)
            .find(|&&t| t as usize >= v)
        {
            return Err(ModelError::TokenOutOfRange { token, vocab: v });
        }
        Ok(())
    }

    fn forward(&self, batch: &Batch) -> Result<ForwardPass<F>, ModelError> {
        self.check_tokens(batch)?;
        let n = batch.predictions();
        let cfg = &self.cfg;
        let width = cfg.input_width();
        let mut input = Tensor::zeros(n, width);
        let mut offset = 0;
        for (table, ids) in [
            (&self.places.matrix.value, &batch.places),
            (&self.dow.value, &batch.dow),
            (&self.tod.value, &batch.tod),
            (&self.dur.value, &batch.dur),
        ] {
            embedding_lookup_into(table, ids, input.data_mut(), width, offset)?;
            offset += table.cols();
        }

        let mut traces: Vec<LstmTrace<F>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = if l == 0 {
                &input
            } else {
                &traces[l - 1].hidden
            };
            let trace = lstm_forward(layer, x, &batch.packing)?;
            traces.push(trace);
        }

        let h = cfg.hidden;
        let lh = h * self.layers.len();
        let mut concat = Tensor::zeros(n, lh);
        for r in 0..n {
            let row = concat.row_mut(r);
            for (l, trace) in traces.iter().enumerate() {
                row[l * h..(l + 1) * h].copy_from_slice(trace.hidden.row(r));
            }
        }
        let mut readout = affine(&concat, &self.readout_w, &self.readout_b)?;
        F::tanh_in_place(readout.data_mut());

        let v = self.vocab_size();
        let e = &self.places.matrix.value;
        let mut logits = Tensor::zeros(n, v);
        for r in 0..n {
            logits
                .row_mut(r)
                .copy_from_slice(self.output_bias.value.data());
        }
        gemm(
            n,
            cfg.d,
            v,
            F::one(),
            readout.data(),
            Op::N,
            e.data(),
            Op::T,
            F::one(),
            logits.data_mut(),
        );
        Ok(ForwardPass {
            input,
            traces,
            concat,
            readout,
            logits,
        })
    }

    /// Summed cross entropy over the batch's predictions, no gradients.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        if batch.predictions() == 0 {
            return Ok(0.0);
        }
        let mut pass = self.forward(batch)?;
        Ok(softmax_cross_entropy_rows(
            &mut pass.logits,
            &batch.targets,
            None,
        )?)
    }

    /// Logits for every prediction row of the batch (row order of the packing).
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<F>, ModelError> {
        Ok(self.forward(batch)?.logits)
    }

    /// Accumulates gradients of `scale * summed loss` and returns the summed loss.
    pub fn loss_and_grad(&mut self, batch: &Batch, scale: f64) -> Result<f64, ModelError> {
        if batch.predictions() == 0 {
            return Ok(0.0);
        }
        let ForwardPass {
            input,
            traces,
            concat,
            readout,
            mut logits,
        } = self.forward(batch)?;
        let total = softmax_cross_entropy_rows(
            &mut logits,
            &batch.targets,
            Some(F::from_f64_lossy(scale)),
        )?;
        let d_logits = logits;
        let n = batch.predictions();
        let (d, v, h) = (self.cfg.d, self.vocab_size(), self.cfg.hidden);

        // Tied output layer.
        let mut d_readout = Tensor::zeros(n, d);
        gemm(
            n,
            v,
            d,
            F::one(),
            d_logits.data(),
            Op::N,
            self.places.matrix.value.data(),
            Op::N,
            F::zero(),
            d_readout.data_mut(),
        );
        gemm(
            v,
            n,
            d,
            F::one(),
            d_logits.data(),
            Op::T,
            readout.data(),
            Op::N,
            F::one(),
            self.places.matrix.grad.data_mut(),
        );
        add_column_sums(&d_logits, self.output_bias.grad.data_mut());
        drop(d_logits);

        for (g, &y) in d_readout.data_mut().iter_mut().zip(readout.data()) {
            *g *= F::one() - y * y;
        }
        let d_concat = affine_backward(
            &concat,
            &d_readout,
            &mut self.readout_w,
            &mut self.readout_b,
        );

        let mut d_above: Option<Tensor<F>> = None;
        for l in (0..self.layers.len()).rev() {
            let mut d_hidden = Tensor::from_fn(n, h, |r, c| d_concat.get(r, l * h + c));
            if let Some(above) = d_above.take() {
                for (a, b) in d_hidden.data_mut().iter_mut().zip(above.data()) {
                    *a += *b;
                }
            }
            let x = if l == 0 {
                &input
            } else {
                &traces[l - 1].hidden
            };
            let dx = lstm_backward(
                &mut self.layers[l],
                x,
                &traces[l],
                &d_hidden,
                &batch.packing,
            );
            d_above = Some(dx);
        }
        let d_input = d_above.expect("at least one layer");
        let width = self.cfg.input_width();
        let mut offset = 0;
        for (param, ids) in [
            (&mut self.places.matrix, &batch.places),
            (&mut self.dow, &batch.dow),
            (&mut self.tod, &batch.tod),
            (&mut self.dur, &batch.dur),
        ] {
            let cols = param.value.cols();
            embedding_backward(&mut param.grad, ids, d_input.data(), width, offset);
            offset += cols;
        }
        Ok(total)
    }

    /// Copies of all parameter values, in [`parameters`](Self::parameters) order.
    pub fn snapshot(&self) -> Vec<Tensor<F>> {
        self.parameters().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<F>]) {
        for (p, v) in self.parameters_mut().into_iter().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "snapshot shape of `{}`", p.name);
            p.value = v.clone();
        }
    }
}

/// Summed loss and prediction count over `seqs`, in chunks of `chunk` sequences.
pub fn total_loss<F: Scalar>(
    model: &NextPlaceModel<F>,
    seqs: &[TokenizedTrajectory],
    chunk: usize,
) -> Result<(f64, usize), ModelError> {
    let mut total = 0.0;
    let mut count = 0;
    for part in seqs.chunks(chunk.max(1)) {
        let refs: Vec<&TokenizedTrajectory> = part.iter().collect();
        let batch = Batch::new(&refs)?;
        total += model.batch_loss(&batch)?;
        count += batch.predictions();
    }
    Ok((total, count))
}

/// Mean cross entropy per predicted step (log-perplexity, nats).
pub fn evaluate<F: Scalar>(
    model: &NextPlaceModel<F>,
    seqs: &[TokenizedTrajectory],
) -> Result<f64, ModelError> {
    let (total, count) = total_loss(model, seqs, 64)?;
    if count == 0 {
        return Err(ModelError::Config("no predictions to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// A model in 64-bit precision with a fixed batch, for gradient checking.
pub struct ModelGradFragment {
    pub model: NextPlaceModel<f64>,
    pub batch: Batch,
}

impl ModelGradFragment {
    /// A random instance: `places` tokens scattered over a few regions,
    /// `sequences` random sequences of `steps` stays, and parameters drawn
    /// from the model initializer plus uniform noise.
    pub fn random(
        cfg: &ModelConfig,
        places: usize,
        sequences: usize,
        steps: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec::default();
        let finest = spec.finest();
        let side = spec.ratio(0, finest) * 2;
        let mut cells = std::collections::BTreeSet::new();
        while cells.len() < places.max(1) {
            // Clustered draws so that upper-level regions hold several places.
            let c = rng.random_range(0..side / 8) * 8 + rng.random_range(0..3);
            let r = rng.random_range(0..side / 8) * 8 + rng.random_range(0..3);
            cells.insert(CellIndex::new(finest, c, r));
        }
        let vocab = Arc::new(
            HierarchicalVocabulary::build(cells, &spec)
                .map_err(|e| ModelError::Config(e.to_string()))?,
        );
        let attrs = AttributeSizes::from(&BucketConfig::default());
        let mut model = NextPlaceModel::<f64>::new(cfg, vocab, attrs, &mut rng)?;
        for p in model.parameters_mut() {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|x| *x += rng.random_range(-0.2..0.2));
        }
        let v = places.max(1) as u32;
        let seqs: Vec<TokenizedTrajectory> = (0..sequences.max(1))
            .map(|_| TokenizedTrajectory {
                steps: (0..steps.max(2))
                    .map(|_| Step {
                        place: rng.random_range(0..v),
                        dow: rng.random_range(0..attrs.dow as u8),
                        tod: rng.random_range(0..attrs.tod as u8),
                        dur: rng.random_range(0..attrs.dur as u8),
                    })
                    .collect(),
            })
            .collect();
        let refs: Vec<&TokenizedTrajectory> = seqs.iter().collect();
        let batch = Batch::new(&refs)?;
        Ok(Self { model, batch })
    }
}

impl GradCheck for ModelGradFragment {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        self.model.parameters_mut()
    }

    fn loss(&mut self) -> f64 {
        let n = self.batch.predictions() as f64;
        self.model.batch_loss(&self.batch).expect("valid batch") / n
    }

    fn loss_and_grad(&mut self) -> f64 {
        let n = self.batch.predictions() as f64;
        self.model
            .loss_and_grad(&self.batch, 1.0 / n)
            .expect("valid batch")
            / n
    }
}
