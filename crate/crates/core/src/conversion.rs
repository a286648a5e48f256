//! Length-matched seq2seq mel predictor.
//!
//! Content features (phonetic + prosody) are encoded, the speaker embedding
//! is appended to every encoder row, and an autoregressive decoder emits one
//! mel frame per input frame. Attention at decoder step `t` only sees the
//! encoder rows `[c - left, c + right]` around a window centre `c`, and there
//! is no stop-token head: decoding always runs for exactly `T` steps.

use crate::acoustic::adopt_store;
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::nn::{BiLstm, BoundConv1d, BoundLinear, BoundLstm, Conv1d, Linear, Lstm, LstmState, Normalizer};
use crate::speaker::SpeakerEmbedding;
use clvc_autograd::{Adam, Graph, Matrix, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Where the attention window is centred at each decoder step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowCenter {
    /// At the decoder step index; input and output are frame-synchronous.
    #[default]
    Step,
    /// At the argmax of the previous step's alignment.
    PreviousArgmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    pub content_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_kernel: usize,
    pub encoder_dim: usize,
    pub encoder_blstm: bool,
    pub speaker_dim: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub dropout_at_inference: bool,
    pub attention_rnn_dim: usize,
    pub decoder_dim: usize,
    pub postnet_layers: usize,
    pub postnet_dim: usize,
    pub postnet_kernel: usize,
    pub mel_dim: usize,
    pub window_left: usize,
    pub window_right: usize,
    pub window_center: WindowCenter,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            content_dim: 72,
            encoder_conv_layers: 3,
            encoder_kernel: 5,
            encoder_dim: 512,
            encoder_blstm: true,
            speaker_dim: 256,
            attention_dim: 128,
            location_filters: 32,
            location_kernel: 31,
            prenet_dims: vec![256, 256],
            prenet_dropout: 0.5,
            dropout_at_inference: true,
            attention_rnn_dim: 1024,
            decoder_dim: 1024,
            postnet_layers: 5,
            postnet_dim: 512,
            postnet_kernel: 5,
            mel_dim: 80,
            window_left: 30,
            window_right: 30,
            window_center: WindowCenter::Step,
            learning_rate: 1e-3,
            clip_norm: 5.0,
        }
    }
}

impl ConversionConfig {
    /// Width of an encoder-state row: encoder output plus speaker vector.
    pub fn memory_dim(&self) -> usize {
        self.encoder_dim + self.speaker_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.content_dim,
            self.encoder_dim,
            self.speaker_dim,
            self.attention_dim,
            self.location_filters,
            self.location_kernel,
            self.attention_rnn_dim,
            self.decoder_dim,
            self.mel_dim,
        ];
        if positive.contains(&0) || self.prenet_dims.is_empty() || self.prenet_dims.contains(&0) {
            return Err(Error::Invalid("conversion model dimensions must be positive".into()));
        }
        if self.encoder_conv_layers == 0 {
            return Err(Error::Invalid("encoder needs at least one convolution".into()));
        }
        if self.encoder_blstm && self.encoder_dim % 2 != 0 {
            return Err(Error::Invalid("BLSTM encoder needs an even encoder_dim".into()));
        }
        if self.postnet_layers == 1 {
            return Err(Error::Invalid("postnet needs 0 or at least 2 layers".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Invalid("prenet dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Support `[start, end)` of the window centred at `center` in a
    /// sequence of length `len`.
    pub fn window(&self, center: usize, len: usize) -> (usize, usize) {
        let start = center.saturating_sub(self.window_left);
        let end = (center + self.window_right + 1).min(len);
        (start, end)
    }
}

/// Encoder outputs with the speaker vector appended to every row.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub values: Matrix,
    pub encoder_dim: usize,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }
}

/// Attention weights of one decoder step over its window.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionAlignment {
    pub step: usize,
    pub center: usize,
    /// First encoder index covered by `weights`.
    pub start: usize,
    pub weights: Vec<f64>,
}

impl AttentionAlignment {
    pub fn end(&self) -> usize {
        self.start + self.weights.len()
    }

    /// Dense weights over `0..len`.
    pub fn full(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        out[self.start..self.end()].copy_from_slice(&self.weights);
        out
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        self.start + best
    }

    /// Positions with nonzero mass outside `[center - left, center + right]`,
    /// plus one if the weights are negative or not normalized to `1 ± 1e-6`.
    pub fn violations(&self, left: usize, right: usize) -> usize {
        let lo = self.center.saturating_sub(left);
        let hi = self.center + right;
        let outside = self
            .weights
            .iter()
            .enumerate()
            .filter(|&(i, &w)| {
                let j = self.start + i;
                w != 0.0 && (j < lo || j > hi)
            })
            .count();
        let sum: f64 = self.weights.iter().sum();
        let malformed = self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-6;
        outside + usize::from(malformed)
    }
}

/// A finished conversion.
#[derive(Clone, Debug)]
pub struct Conversion {
    /// Post-net output in log-mel units.
    pub mel: MelSpectrogram,
    /// Decoder output before the post-net, log-mel units.
    pub pre_postnet: Matrix,
    pub alignments: Vec<AttentionAlignment>,
}

/// One training example; `target` is a raw log-mel matrix with the same
/// number of rows as `content`.
#[derive(Clone, Debug)]
pub struct ConversionItem {
    pub content: Matrix,
    pub speaker: SpeakerEmbedding,
    pub target: Matrix,
}

#[derive(Clone, Debug)]
struct Layers {
    encoder_convs: Vec<Conv1d>,
    encoder_blstm: Option<BiLstm>,
    memory: Linear,
    query: Linear,
    location_conv: Linear,
    location_dense: Linear,
    energy: Linear,
    prenet: Vec<Linear>,
    attention_rnn: Lstm,
    decoder_rnn: Lstm,
    projection: Linear,
    postnet: Vec<Conv1d>,
}

/// Layers copied onto one graph.
struct Bound {
    encoder_convs: Vec<BoundConv1d>,
    memory: BoundLinear,
    query: BoundLinear,
    location_conv: BoundLinear,
    location_dense: BoundLinear,
    energy: BoundLinear,
    prenet: Vec<BoundLinear>,
    attention_rnn: BoundLstm,
    decoder_rnn: BoundLstm,
    projection: BoundLinear,
    postnet: Vec<BoundConv1d>,
}

/// Encoder states and their attention projection, computed once per utterance.
#[derive(Clone, Copy)]
struct Memory {
    states: Var,
    keys: Var,
    len: usize,
}

#[derive(Clone, Copy)]
struct StepState {
    attention: LstmState,
    decoder: LstmState,
    prev_frame: Var,
    prev_context: Var,
    prev_alignment: Var,
    cum_alignment: Var,
    prev_argmax: usize,
    t: usize,
}

#[derive(Clone, Debug)]
pub struct ConversionModel {
    pub config: ConversionConfig,
    pub store: ParamStore,
    pub content_norm: Normalizer,
    pub mel_norm: Normalizer,
    layers: Layers,
}

impl ConversionModel {
    pub fn new(config: ConversionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = &config;
        let mem = c.memory_dim();

        let mut encoder_convs = Vec::new();
        let mut width = c.content_dim;
        for l in 0..c.encoder_conv_layers {
            encoder_convs.push(Conv1d::new(&mut s, &format!("cm/enc/conv{l}"), width, c.encoder_dim, c.encoder_kernel, &mut rng));
            width = c.encoder_dim;
        }
        let encoder_blstm = c
            .encoder_blstm
            .then(|| BiLstm::new(&mut s, "cm/enc/blstm", c.encoder_dim, c.encoder_dim / 2, 1, &mut rng));

        let memory = Linear::new(&mut s, "cm/att/memory", mem, c.attention_dim, &mut rng);
        let query = Linear::new(&mut s, "cm/att/query", c.attention_rnn_dim, c.attention_dim, &mut rng);
        let location_conv = Linear::new(&mut s, "cm/att/loc_conv", 2 * c.location_kernel, c.location_filters, &mut rng);
        let location_dense = Linear::new(&mut s, "cm/att/loc_dense", c.location_filters, c.attention_dim, &mut rng);
        let energy = Linear::new(&mut s, "cm/att/v", c.attention_dim, 1, &mut rng);

        let mut prenet = Vec::new();
        let mut width = c.mel_dim;
        for (i, &d) in c.prenet_dims.iter().enumerate() {
            prenet.push(Linear::new(&mut s, &format!("cm/dec/prenet{i}"), width, d, &mut rng));
            width = d;
        }
        let attention_rnn = Lstm::new(&mut s, "cm/dec/att_rnn", width + mem, c.attention_rnn_dim, &mut rng);
        let decoder_rnn = Lstm::new(&mut s, "cm/dec/dec_rnn", c.attention_rnn_dim + mem, c.decoder_dim, &mut rng);
        let projection = Linear::new(&mut s, "cm/dec/proj", c.decoder_dim + mem, c.mel_dim, &mut rng);

        let mut postnet = Vec::new();
        for l in 0..c.postnet_layers {
            let input = if l == 0 { c.mel_dim } else { c.postnet_dim };
            let output = if l + 1 == c.postnet_layers { c.mel_dim } else { c.postnet_dim };
            postnet.push(Conv1d::new(&mut s, &format!("cm/postnet/conv{l}"), input, output, c.postnet_kernel, &mut rng));
        }

        Ok(Self {
            content_norm: Normalizer::identity(c.content_dim),
            mel_norm: Normalizer::identity(c.mel_dim),
            layers: Layers {
                encoder_convs,
                encoder_blstm,
                memory,
                query,
                location_conv,
                location_dense,
                energy,
                prenet,
                attention_rnn,
                decoder_rnn,
                projection,
                postnet,
            },
            config,
            store: s,
        })
    }

    pub fn from_store(
        config: ConversionConfig,
        store: ParamStore,
        content_norm: Normalizer,
        mel_norm: Normalizer,
    ) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        adopt_store(&mut model.store, store)?;
        if content_norm.dim() != model.config.content_dim || mel_norm.dim() != model.config.mel_dim {
            return Err(Error::Shape("conversion normalizer width".into()));
        }
        model.content_norm = content_norm;
        model.mel_norm = mel_norm;
        Ok(model)
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(&self.store, self.config.learning_rate).with_clip(Some(self.config.clip_norm))
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> Bound {
        let l = &self.layers;
        Bound {
            encoder_convs: l.encoder_convs.iter().map(|c| c.bind(g, store)).collect(),
            memory: l.memory.bind(g, store),
            query: l.query.bind(g, store),
            location_conv: l.location_conv.bind(g, store),
            location_dense: l.location_dense.bind(g, store),
            energy: l.energy.bind(g, store),
            prenet: l.prenet.iter().map(|p| p.bind(g, store)).collect(),
            attention_rnn: l.attention_rnn.bind(g, store),
            decoder_rnn: l.decoder_rnn.bind(g, store),
            projection: l.projection.bind(g, store),
            postnet: l.postnet.iter().map(|c| c.bind(g, store)).collect(),
        }
    }

    fn check_inputs(&self, content: &Matrix, speaker: &SpeakerEmbedding) -> Result<()> {
        let c = &self.config;
        if content.cols() != c.content_dim {
            return Err(Error::Shape(format!(
                "converter was built for {}-dim content, got {} columns",
                c.content_dim,
                content.cols()
            )));
        }
        if content.rows() == 0 {
            return Err(Error::Shape("content has no frames".into()));
        }
        if !content.all_finite() {
            return Err(Error::Invalid("content contains non-finite values".into()));
        }
        if speaker.dim() != c.speaker_dim {
            return Err(Error::Shape(format!(
                "converter expects {}-dim speaker embeddings, got {}",
                c.speaker_dim,
                speaker.dim()
            )));
        }
        if (speaker.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("speaker embedding norm {} is not 1", speaker.norm())));
        }
        Ok(())
    }

    fn encode_graph(&self, g: &mut Graph, store: &ParamStore, b: &Bound, content: &Matrix, speaker: &SpeakerEmbedding) -> Var {
        let mut h = g.constant(self.content_norm.apply(content));
        for conv in &b.encoder_convs {
            let y = conv.apply(g, h);
            h = g.relu(y);
        }
        if let Some(blstm) = &self.layers.encoder_blstm {
            h = blstm.forward(g, store, h);
        }
        let t = content.rows();
        let spk = g.constant(Matrix::from_fn(t, speaker.dim(), |_, c| speaker.vector[c]));
        g.concat_cols(&[h, spk])
    }

    fn memory(&self, g: &mut Graph, b: &Bound, states: Var) -> Memory {
        let keys = b.memory.apply(g, states);
        Memory {
            states,
            keys,
            len: g.shape(states).0,
        }
    }

    /// Content encoder; the last `speaker_dim` columns of every row are the
    /// speaker vector.
    pub fn encode_content(&self, content: &Matrix, speaker: &SpeakerEmbedding) -> Result<EncoderStates> {
        self.check_inputs(content, speaker)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.store);
        let states = self.encode_graph(&mut g, &self.store, &b, content, speaker);
        Ok(EncoderStates {
            values: g.value(states).clone(),
            encoder_dim: self.config.encoder_dim,
        })
    }

    fn window_center(&self, state: &StepState) -> usize {
        match self.config.window_center {
            WindowCenter::Step => state.t,
            WindowCenter::PreviousArgmax => state.prev_argmax,
        }
    }

    /// Location-sensitive attention restricted to the window around `center`.
    /// Returns the context row, the `1 × W` window weights and the support.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph,
        b: &Bound,
        mem: &Memory,
        query_h: Var,
        prev_alignment: Var,
        cum_alignment: Var,
        center: usize,
    ) -> (Var, Var, usize, usize) {
        let (start, end) = self.config.window(center, mem.len);
        let width = end - start;
        let k = self.config.location_kernel;

        let q = b.query.apply(g, query_h);
        let keys = g.slice_rows(mem.keys, start, width);
        let aligns = g.concat_cols(&[prev_alignment, cum_alignment]);
        let loc = g.unfold(aligns, k, k / 2, start, width);
        let loc = b.location_conv.apply(g, loc);
        let loc = g.matmul(loc, b.location_dense.w);
        let loc = g.add_row(loc, b.location_dense.b);
        let pre = g.add(keys, loc);
        let pre = g.add_row(pre, q);
        let act = g.tanh(pre);
        let energies = b.energy.apply(g, act);
        let energies = g.transpose(energies);
        let weights = g.softmax_rows(energies);
        let values = g.slice_rows(mem.states, start, width);
        let context = g.matmul(weights, values);
        (context, weights, start, end)
    }

    fn prenet(&self, g: &mut Graph, b: &Bound, frame: Var, rng: &mut ChaCha8Rng, dropout: bool) -> Var {
        let p = self.config.prenet_dropout;
        let mut h = frame;
        for layer in &b.prenet {
            let y = layer.apply(g, h);
            h = g.relu(y);
            if dropout && p > 0.0 {
                let width = g.shape(h).1;
                let keep = 1.0 / (1.0 - p);
                let mask = Matrix::from_fn(1, width, |_, _| if rng.gen::<f64>() < p { 0.0 } else { keep });
                let m = g.constant(mask);
                h = g.mul(h, m);
            }
        }
        h
    }

    fn initial_state(&self, g: &mut Graph, b: &Bound, len: usize) -> StepState {
        StepState {
            attention: b.attention_rnn.zero_state(g, 1),
            decoder: b.decoder_rnn.zero_state(g, 1),
            prev_frame: g.constant(Matrix::zeros(1, self.config.mel_dim)),
            prev_context: g.constant(Matrix::zeros(1, self.config.memory_dim())),
            prev_alignment: g.constant(Matrix::zeros(len, 1)),
            cum_alignment: g.constant(Matrix::zeros(len, 1)),
            prev_argmax: 0,
            t: 0,
        }
    }

    /// One decoder step; `prev_frame` in `state` is the (normalized) frame fed
    /// to the prenet.
    fn step(
        &self,
        g: &mut Graph,
        b: &Bound,
        mem: &Memory,
        state: StepState,
        rng: &mut ChaCha8Rng,
        dropout: bool,
    ) -> (Var, StepState, AttentionAlignment) {
        let pre = self.prenet(g, b, state.prev_frame, rng, dropout);
        let att_in = g.concat_cols(&[pre, state.prev_context]);
        let attention = b.attention_rnn.step(g, att_in, state.attention);
        let center = self.window_center(&state);
        let (context, weights, start, end) =
            self.attend(g, b, mem, attention.h, state.prev_alignment, state.cum_alignment, center);
        let dec_in = g.concat_cols(&[attention.h, context]);
        let decoder = b.decoder_rnn.step(g, dec_in, state.decoder);
        let proj_in = g.concat_cols(&[decoder.h, context]);
        let frame = b.projection.apply(g, proj_in);

        let column = g.transpose(weights);
        let full = g.pad_rows(column, start, mem.len - end);
        let cum = g.add(state.cum_alignment, full);

        let alignment = AttentionAlignment {
            step: state.t,
            center,
            start,
            weights: g.value(weights).data().to_vec(),
        };
        let next = StepState {
            attention,
            decoder,
            prev_frame: frame,
            prev_context: context,
            prev_alignment: full,
            cum_alignment: cum,
            prev_argmax: alignment.argmax(),
            t: state.t + 1,
        };
        (frame, next, alignment)
    }

    fn postnet(&self, g: &mut Graph, b: &Bound, pre: Var) -> Var {
        let n = b.postnet.len();
        if n == 0 {
            return pre;
        }
        let mut h = pre;
        for (i, conv) in b.postnet.iter().enumerate() {
            let y = conv.apply(g, h);
            h = if i + 1 < n { g.tanh(y) } else { y };
        }
        g.add(pre, h)
    }

    /// Runs `T` decoder steps. With `teacher` (normalized targets) the
    /// previous ground-truth frame is fed back; otherwise the previous
    /// prediction is.
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: &Bound,
        content: &Matrix,
        speaker: &SpeakerEmbedding,
        teacher: Option<Var>,
        seed: u64,
        dropout: bool,
    ) -> (Var, Var, Vec<AttentionAlignment>) {
        let states = self.encode_graph(g, store, b, content, speaker);
        let mem = self.memory(g, b, states);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.initial_state(g, b, mem.len);
        let mut frames = Vec::with_capacity(mem.len);
        let mut alignments = Vec::with_capacity(mem.len);
        for t in 0..mem.len {
            if let (Some(target), true) = (teacher, t > 0) {
                state.prev_frame = g.slice_rows(target, t - 1, 1);
            }
            let (frame, next, alignment) = self.step(g, b, &mem, state, &mut rng, dropout);
            frames.push(frame);
            alignments.push(alignment);
            state = next;
        }
        let pre = g.concat_rows(&frames);
        let post = self.postnet(g, b, pre);
        (pre, post, alignments)
    }

    fn denormalize(&self, m: &Matrix) -> Matrix {
        let n = &self.mel_norm;
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mean), std) in out.row_mut(r).iter_mut().zip(&n.mean).zip(&n.std) {
                *v = *v * std + mean;
            }
        }
        out
    }

    /// Free-running conversion: exactly `content.rows()` decoder steps.
    pub fn convert(&self, content: &Matrix, speaker: &SpeakerEmbedding, seed: u64) -> Result<Conversion> {
        self.check_inputs(content, speaker)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.store);
        let dropout = self.config.dropout_at_inference;
        let (pre, post, alignments) = self.decode(&mut g, &self.store, &b, content, speaker, None, seed, dropout);
        Ok(Conversion {
            mel: MelSpectrogram {
                values: self.denormalize(g.value(post)),
            },
            pre_postnet: self.denormalize(g.value(pre)),
            alignments,
        })
    }

    /// Teacher-forced losses `(pre-postnet MSE, post-postnet MSE)` in
    /// normalized mel units, without updating.
    pub fn teacher_forced_loss(&self, item: &ConversionItem, seed: u64) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let (pre, post, _) = self.item_loss(&mut g, &self.store, item, seed)?;
        Ok((g.scalar(pre), g.scalar(post)))
    }

    fn item_loss(&self, g: &mut Graph, store: &ParamStore, item: &ConversionItem, seed: u64) -> Result<(Var, Var, Var)> {
        self.check_inputs(&item.content, &item.speaker)?;
        if item.target.rows() != item.content.rows() || item.target.cols() != self.config.mel_dim {
            return Err(Error::Shape(format!(
                "target mel is {}x{}, content has {} frames and the model emits {} channels",
                item.target.rows(),
                item.target.cols(),
                item.content.rows(),
                self.config.mel_dim
            )));
        }
        let b = self.bind(g, store);
        let target = g.constant(self.mel_norm.apply(&item.target));
        let (pre, post, _) = self.decode(g, store, &b, &item.content, &item.speaker, Some(target), seed, true);
        let loss_pre = g.mse(pre, target);
        let loss_post = g.mse(post, target);
        let total = g.add(loss_pre, loss_post);
        Ok((loss_pre, loss_post, total))
    }

    /// Summed dual-MSE loss of a batch on `g`, for gradient checks.
    pub fn batch_loss(&self, g: &mut Graph, store: &ParamStore, batch: &[ConversionItem], seed: u64) -> Result<(Var, f64, f64)> {
        let mut totals = Vec::with_capacity(batch.len());
        let (mut sum_pre, mut sum_post) = (0.0, 0.0);
        for (i, item) in batch.iter().enumerate() {
            let (pre, post, total) = self.item_loss(g, store, item, item_seed(seed, i))?;
            sum_pre += g.scalar(pre);
            sum_post += g.scalar(post);
            totals.push(total);
        }
        let stacked = g.concat_rows(&totals);
        let loss = g.mean(stacked);
        let n = batch.len() as f64;
        Ok((loss, sum_pre / n, sum_post / n))
    }

    /// Teacher-forced update. Returns mean `(loss_pre, loss_post)` before the update.
    pub fn train_step(&mut self, batch: &[ConversionItem], opt: &mut Adam, step: usize, seed: u64) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty conversion batch".into()));
        }
        let mut g = Graph::new();
        let (loss, pre, post) = self.batch_loss(&mut g, &self.store, batch, seed)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "conversion model MSE".into(),
            });
        }
        let grads = g.backward(loss).param_grads(&self.store);
        opt.step(&mut self.store, &grads)?;
        Ok((pre, post))
    }

    /// Step-by-step decoding session over one utterance.
    pub fn session(&self, content: &Matrix, speaker: &SpeakerEmbedding, seed: u64) -> Result<DecoderSession<'_>> {
        self.check_inputs(content, speaker)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.store);
        let states = self.encode_graph(&mut g, &self.store, &b, content, speaker);
        let mem = self.memory(&mut g, &b, states);
        let state = self.initial_state(&mut g, &b, mem.len);
        Ok(DecoderSession {
            model: self,
            g,
            bound: b,
            mem,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Attention for a single step computed from explicit inputs: the
    /// attention-RNN output `query`, encoder `states`, and the previous and
    /// cumulative alignments (length `T`). Window centre is `center`.
    pub fn local_attention_step(
        &self,
        query: &[f64],
        states: &EncoderStates,
        center: usize,
        prev_alignment: &[f64],
        cum_alignment: &[f64],
    ) -> Result<(Vec<f64>, AttentionAlignment)> {
        let t = states.len();
        if query.len() != self.config.attention_rnn_dim
            || states.values.cols() != self.config.memory_dim()
            || prev_alignment.len() != t
            || cum_alignment.len() != t
        {
            return Err(Error::Shape("attention inputs do not match the model".into()));
        }
        if center >= t {
            return Err(Error::Invalid(format!("window centre {center} outside 0..{t}")));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.store);
        let sv = g.constant(states.values.clone());
        let mem = self.memory(&mut g, &b, sv);
        let q = g.constant(Matrix::row_vector(query.to_vec()));
        let pa = g.constant(Matrix::column_vector(prev_alignment.to_vec()));
        let ca = g.constant(Matrix::column_vector(cum_alignment.to_vec()));
        let (context, weights, start, _) = self.attend(&mut g, &b, &mem, q, pa, ca, center);
        Ok((
            g.value(context).data().to_vec(),
            AttentionAlignment {
                step: center,
                center,
                start,
                weights: g.value(weights).data().to_vec(),
            },
        ))
    }

    /// Scalar count implied by the configuration, with no stop-token head.
    pub fn expected_param_count(config: &ConversionConfig) -> usize {
        let c = config;
        let lin = |i: usize, o: usize| i * o + o;
        let lstm = |i: usize, h: usize| (i + h + 1) * 4 * h;
        let mem = c.memory_dim();
        let mut n = lin(c.content_dim * c.encoder_kernel, c.encoder_dim)
            + (c.encoder_conv_layers - 1) * lin(c.encoder_dim * c.encoder_kernel, c.encoder_dim);
        if c.encoder_blstm {
            n += 2 * lstm(c.encoder_dim, c.encoder_dim / 2);
        }
        n += lin(mem, c.attention_dim)
            + lin(c.attention_rnn_dim, c.attention_dim)
            + lin(2 * c.location_kernel, c.location_filters)
            + lin(c.location_filters, c.attention_dim)
            + lin(c.attention_dim, 1);
        let mut width = c.mel_dim;
        for &d in &c.prenet_dims {
            n += lin(width, d);
            width = d;
        }
        n += lstm(width + mem, c.attention_rnn_dim) + lstm(c.attention_rnn_dim + mem, c.decoder_dim);
        n += lin(c.decoder_dim + mem, c.mel_dim);
        for l in 0..c.postnet_layers {
            let i = if l == 0 { c.mel_dim } else { c.postnet_dim };
            let o = if l + 1 == c.postnet_layers { c.mel_dim } else { c.postnet_dim };
            n += lin(i * c.postnet_kernel, o);
        }
        n
    }
}

/// Per-item dropout seed within a batch.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// One mel frame produced by [`DecoderSession::step`].
#[derive(Clone, Debug)]
pub struct DecodedFrame {
    /// Decoder output (pre-postnet), log-mel units.
    pub frame: Vec<f64>,
    pub alignment: AttentionAlignment,
}

/// Incremental decoder over one utterance.
pub struct DecoderSession<'m> {
    model: &'m ConversionModel,
    g: Graph,
    bound: Bound,
    mem: Memory,
    state: StepState,
    rng: ChaCha8Rng,
}

impl DecoderSession<'_> {
    pub fn len(&self) -> usize {
        self.mem.len
    }

    pub fn is_empty(&self) -> bool {
        self.mem.len == 0
    }

    pub fn position(&self) -> usize {
        self.state.t
    }

    /// Decodes the next frame. `prev_frame` (log-mel units) overrides the
    /// fed-back frame, as in teacher forcing; `None` feeds back the previous
    /// prediction. Fails once `T` frames have been produced.
    pub fn step(&mut self, prev_frame: Option<&[f64]>) -> Result<DecodedFrame> {
        if self.state.t >= self.mem.len {
            return Err(Error::Invalid(format!(
                "decoder step {} beyond source length {}",
                self.state.t, self.mem.len
            )));
        }
        let model = self.model;
        if let Some(prev) = prev_frame {
            if prev.len() != model.config.mel_dim {
                return Err(Error::Shape("previous frame width".into()));
            }
            let normalized = model.mel_norm.apply(&Matrix::row_vector(prev.to_vec()));
            self.state.prev_frame = self.g.constant(normalized);
        }
        let dropout = model.config.dropout_at_inference;
        let (frame, next, alignment) = model.step(&mut self.g, &self.bound, &self.mem, self.state, &mut self.rng, dropout);
        self.state = next;
        Ok(DecodedFrame {
            frame: model.denormalize(self.g.value(frame)).into_vec(),
            alignment,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro() -> ConversionConfig {
        ConversionConfig {
            content_dim: 5,
            encoder_conv_layers: 1,
            encoder_kernel: 3,
            encoder_dim: 4,
            encoder_blstm: true,
            speaker_dim: 3,
            attention_dim: 4,
            location_filters: 2,
            location_kernel: 3,
            prenet_dims: vec![4, 4],
            attention_rnn_dim: 5,
            decoder_dim: 5,
            postnet_layers: 2,
            postnet_dim: 4,
            postnet_kernel: 3,
            mel_dim: 4,
            window_left: 2,
            window_right: 2,
            ..Default::default()
        }
    }

    fn speaker(dim: usize, seed: u64) -> SpeakerEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpeakerEmbedding::from_unnormalized((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn content(t: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::uniform(t, dim, 1.0, &mut rng)
    }

    #[test]
    fn speaker_columns_are_broadcast() {
        let model = ConversionModel::new(micro(), 1).unwrap();
        let x = content(7, 5, 2);
        let a = model.encode_content(&x, &speaker(3, 3)).unwrap();
        let b = model.encode_content(&x, &speaker(3, 4)).unwrap();
        assert_eq!(a.values.shape(), (7, 7));
        for r in 0..7 {
            assert_eq!(&a.values.row(r)[..4], &b.values.row(r)[..4]);
            assert_eq!(&a.values.row(r)[4..], &speaker(3, 3).vector[..]);
        }
    }

    #[test]
    fn parameter_audit_has_no_stop_head() {
        for cfg in [micro(), ConversionConfig::default()] {
            let model = ConversionModel::new(cfg.clone(), 0).unwrap();
            assert_eq!(model.store.num_scalars(), ConversionModel::expected_param_count(&cfg));
            assert!(model.store.iter().all(|(name, _)| !name.contains("stop") && !name.contains("gate")));
        }
    }

    #[test]
    fn window_support_clips_at_edges() {
        let cfg = ConversionConfig::default();
        assert_eq!(cfg.window(0, 100), (0, 31));
        assert_eq!(cfg.window(50, 100), (20, 81));
        assert_eq!(cfg.window(99, 100), (69, 100));
        assert_eq!(cfg.window(0, 1), (0, 1));
    }

    #[test]
    fn decoding_stops_at_source_length() {
        let model = ConversionModel::new(micro(), 5).unwrap();
        let mut s = model.session(&content(3, 5, 6), &speaker(3, 7), 0).unwrap();
        for _ in 0..3 {
            assert_eq!(s.step(None).unwrap().frame.len(), 4);
        }
        assert!(s.step(None).is_err());
    }

    #[test]
    fn teacher_forced_and_free_running_steps_agree() {
        let model = ConversionModel::new(micro(), 8).unwrap();
        let x = content(6, 5, 9);
        let spk = speaker(3, 10);
        let mut free = model.session(&x, &spk, 42).unwrap();
        let mut forced = model.session(&x, &spk, 42).unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for _ in 0..6 {
            let a = free.step(None).unwrap();
            let b = forced.step(prev.as_deref()).unwrap();
            assert_eq!(a.frame, b.frame);
            prev = Some(a.frame);
        }
    }

    #[test]
    fn input_guards() {
        let model = ConversionModel::new(micro(), 1).unwrap();
        assert!(model.convert(&content(4, 6, 1), &speaker(3, 1), 0).is_err());
        assert!(model.convert(&content(4, 5, 1), &speaker(4, 1), 0).is_err());
        let not_unit = SpeakerEmbedding { vector: vec![1.0, 1.0, 0.0] };
        assert!(model.convert(&content(4, 5, 1), &not_unit, 0).is_err());
        let item = ConversionItem {
            content: content(4, 5, 1),
            speaker: speaker(3, 1),
            target: Matrix::zeros(5, 4),
        };
        assert!(model.teacher_forced_loss(&item, 0).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_loss() {
        let mut cfg = micro();
        cfg.prenet_dropout = 0.0;
        let model = ConversionModel::new(cfg, 3).unwrap();
        let x = content(5, 5, 4);
        let spk = speaker(3, 5);
        // Without dropout, teacher forcing on the free-running output reproduces it.
        let out = model.convert(&x, &spk, 0).unwrap();
        let pre_item = ConversionItem {
            content: x.clone(),
            speaker: spk.clone(),
            target: out.pre_postnet.clone(),
        };
        let (pre, _) = model.teacher_forced_loss(&pre_item, 0).unwrap();
        assert!(pre < 1e-28, "{pre}");
    }

    #[test]
    fn previous_argmax_centering_keeps_invariants() {
        let mut cfg = micro();
        cfg.window_center = WindowCenter::PreviousArgmax;
        let model = ConversionModel::new(cfg.clone(), 12).unwrap();
        let out = model.convert(&content(9, 5, 13), &speaker(3, 14), 1).unwrap();
        assert_eq!(out.alignments.len(), 9);
        assert_eq!(out.alignments[0].center, 0);
        for (i, a) in out.alignments.iter().enumerate().skip(1) {
            assert_eq!(a.center, out.alignments[i - 1].argmax());
            assert_eq!(a.violations(cfg.window_left, cfg.window_right), 0);
        }
    }
}
