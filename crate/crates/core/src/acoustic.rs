//! Speaker-independent phoneme recognizer and the content features it emits.
//!
//! A stack of bidirectional LSTMs reads context-stacked MFCCs. The last
//! layer's concatenated hidden states are the deep phonetic feature (DPF);
//! a softmax output layer on top gives the monolingual phonetic
//! posteriorgram (mPPG).

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::FrontEnd;
use crate::nn::{BiLstm, Linear, Normalizer};
use clvc_autograd::{softmax_rows, Adam, Graph, Matrix, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcousticModelConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    pub hidden_per_direction: usize,
    pub num_phonemes: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for AcousticModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 600,
            num_layers: 3,
            hidden_per_direction: 512,
            num_phonemes: 70,
            learning_rate: 1e-3,
            clip_norm: 5.0,
        }
    }
}

impl AcousticModelConfig {
    pub fn dpf_dim(&self) -> usize {
        2 * self.hidden_per_direction
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.num_layers == 0
            || self.hidden_per_direction == 0
            || self.num_phonemes == 0
        {
            return Err(Error::Invalid("acoustic model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Which tap of the acoustic model feeds the converter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Mppg,
    Dpf,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Mppg => "mppg",
            FeatureMode::Dpf => "dpf",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mppg" => Ok(FeatureMode::Mppg),
            "dpf" => Ok(FeatureMode::Dpf),
            other => Err(Error::Invalid(format!("unknown feature mode `{other}`"))),
        }
    }
}

/// Per-frame content representation.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneticFeatures {
    pub mode: FeatureMode,
    /// `T × 70` posteriors (mPPG) or `T × 1024` hidden states (DPF).
    pub values: Matrix,
}

/// Both taps of one forward pass.
#[derive(Clone, Debug)]
pub struct AcousticOutputs {
    pub mppg: Matrix,
    pub dpf: Matrix,
}

impl AcousticOutputs {
    pub fn select(&self, mode: FeatureMode) -> PhoneticFeatures {
        let values = match mode {
            FeatureMode::Mppg => self.mppg.clone(),
            FeatureMode::Dpf => self.dpf.clone(),
        };
        PhoneticFeatures { mode, values }
    }

    /// Most likely phoneme per frame.
    pub fn predicted_labels(&self) -> Vec<usize> {
        (0..self.mppg.rows()).map(|t| self.mppg.argmax_row(t)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: AcousticModelConfig,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    blstm: BiLstm,
    output: Linear,
}

impl AcousticModel {
    pub fn new(config: AcousticModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blstm = BiLstm::new(
            &mut store,
            "am/blstm",
            config.input_dim,
            config.hidden_per_direction,
            config.num_layers,
            &mut rng,
        );
        let output = Linear::new(
            &mut store,
            "am/out",
            config.dpf_dim(),
            config.num_phonemes,
            &mut rng,
        );
        Ok(Self {
            normalizer: Normalizer::identity(config.input_dim),
            config,
            store,
            blstm,
            output,
        })
    }

    /// Rebuilds the layer layout and installs `store`, which must have the
    /// exact names and shapes `new` would create.
    pub fn from_store(
        config: AcousticModelConfig,
        store: ParamStore,
        normalizer: Normalizer,
    ) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        adopt_store(&mut model.store, store)?;
        if normalizer.dim() != model.config.input_dim {
            return Err(Error::Shape("acoustic normalizer width".into()));
        }
        model.normalizer = normalizer;
        Ok(model)
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "acoustic model expects {} input columns, got {}",
                self.config.input_dim,
                x.cols()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::Shape("acoustic model input has no frames".into()));
        }
        Ok(())
    }

    /// Records `(logits, dpf)` for already normalized input on `g`.
    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Var) -> (Var, Var) {
        let dpf = self.blstm.forward(g, store, x);
        let logits = self.output.bind(g, store).apply(g, dpf);
        (logits, dpf)
    }

    /// Forward pass on raw (unnormalized) context MFCCs.
    pub fn forward(&self, x: &Matrix) -> Result<AcousticOutputs> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(self.normalizer.apply(x));
        let (logits, dpf) = self.forward_graph(&mut g, &self.store, xv);
        Ok(AcousticOutputs {
            mppg: softmax_rows(g.value(logits)),
            dpf: g.value(dpf).clone(),
        })
    }

    /// Mean per-frame cross-entropy over a batch of (context MFCC, labels).
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[(Matrix, Vec<usize>)],
    ) -> Result<Var> {
        let mut all_logits = Vec::with_capacity(batch.len());
        let mut all_labels = Vec::new();
        for (x, labels) in batch {
            self.check_input(x)?;
            if labels.len() != x.rows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} frames",
                    labels.len(),
                    x.rows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_phonemes) {
                return Err(Error::Invalid(format!("phoneme id {bad} out of range")));
            }
            let xv = g.constant(self.normalizer.apply(x));
            let (logits, _) = self.forward_graph(g, store, xv);
            all_logits.push(logits);
            all_labels.extend_from_slice(labels);
        }
        let logits = g.concat_rows(&all_logits);
        Ok(g.cross_entropy(logits, &all_labels))
    }

    /// One optimizer update; returns the loss before the update.
    pub fn train_step(
        &mut self,
        batch: &[(Matrix, Vec<usize>)],
        opt: &mut Adam,
        step: usize,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.batch_loss(&mut g, &self.store, batch)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "acoustic model cross-entropy".into(),
            });
        }
        let grads = g.backward(loss).param_grads(&self.store);
        opt.step(&mut self.store, &grads)?;
        Ok(value)
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(&self.store, self.config.learning_rate).with_clip(Some(self.config.clip_norm))
    }

    /// Fraction of frames whose argmax matches the label.
    pub fn frame_accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let out = self.forward(x)?;
        let hits = out
            .predicted_labels()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Copies every tensor of `src` into `dst`, requiring identical names and shapes.
pub(crate) fn adopt_store(dst: &mut ParamStore, src: ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Shape(format!(
            "parameter count {} does not match expected {}",
            src.len(),
            dst.len()
        )));
    }
    for (name, value) in src.iter() {
        dst.assign(name, value.clone())?;
    }
    Ok(())
}

/// Runs the front end and the acoustic model, then appends the two prosody
/// columns. The result has one row per mel frame of `clip`.
pub fn extract_phonetic_features(
    clip: &AudioClip,
    mode: FeatureMode,
    front_end: &FrontEnd,
    model: &AcousticModel,
) -> Result<Matrix> {
    let analysis = front_end.analyze(clip)?;
    let out = model.forward(&analysis.context.values)?;
    let phonetic = out.select(mode);
    Ok(append_columns(&phonetic.values, &analysis.prosody.values))
}

pub fn append_columns(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows(), "row count mismatch");
    Matrix::from_fn(a.rows(), a.cols() + b.cols(), |r, c| {
        if c < a.cols() {
            a.get(r, c)
        } else {
            b.get(r, c - a.cols())
        }
    })
}

/// Collapses runs of repeated labels: `[a, a, b, b, a] → [a, b, a]`.
pub fn collapse_repeats(labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(labels.len());
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between the repeat-collapsed sequences divided by the
/// collapsed reference length.
pub fn phoneme_error_rate(pred: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("empty reference sequence".into()));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("empty prediction sequence".into()));
    }
    let p = collapse_repeats(pred);
    let r = collapse_repeats(reference);
    Ok(levenshtein(&p, &r) as f64 / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Lstm;
    use proptest::prelude::*;

    fn micro() -> AcousticModelConfig {
        AcousticModelConfig {
            input_dim: 6,
            num_layers: 2,
            hidden_per_direction: 3,
            num_phonemes: 5,
            ..Default::default()
        }
    }

    #[test]
    fn full_size_dimensions() {
        let cfg = AcousticModelConfig::default();
        assert_eq!(cfg.dpf_dim(), 1024);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let out = Linear::new(&mut store, "o", cfg.dpf_dim(), cfg.num_phonemes, &mut rng);
        assert_eq!(store.get(out.w).shape(), (1024, 70));
    }

    #[test]
    fn zero_output_layer_gives_uniform_posteriors() {
        let mut model = AcousticModel::new(micro(), 1).unwrap();
        let (w, b) = (model.output.w, model.output.b);
        model.store.get_mut(w).scale_in_place(0.0);
        model.store.get_mut(b).scale_in_place(0.0);
        let x = Matrix::from_fn(4, 6, |r, c| (r as f64 - c as f64) * 0.3);
        let out = model.forward(&x).unwrap();
        assert!(out.mppg.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert_eq!(out.dpf.shape(), (4, 6));
    }

    #[test]
    fn uniform_prediction_cross_entropy_is_ln_70() {
        let mut g = Graph::new();
        let logits = g.constant(Matrix::zeros(1, 70));
        let ce = g.cross_entropy(logits, &[13]);
        assert!((g.scalar(ce) - 70f64.ln()).abs() < 1e-12);
        assert!((g.scalar(ce) - 4.2485).abs() < 1e-4);
    }

    #[test]
    fn mppg_is_affine_softmax_of_dpf() {
        let model = AcousticModel::new(micro(), 2).unwrap();
        let x = Matrix::from_fn(5, 6, |r, c| ((r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
        let out = model.forward(&x).unwrap();
        let w = model.store.get(model.output.w);
        let b = model.store.get(model.output.b);
        let mut logits = out.dpf.matmul(w);
        for r in 0..logits.rows() {
            for (v, bb) in logits.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        assert!(softmax_rows(&logits).max_abs_diff(&out.mppg) < 1e-14);
        // Determinism.
        assert_eq!(model.forward(&x).unwrap().dpf, out.dpf);
    }

    #[test]
    fn reversal_symmetry_of_one_bidirectional_layer() {
        // Running on reversed input equals swapping the two directions'
        // parameters, up to reversing time and swapping the output halves.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = Lstm::new(&mut store, "a", 3, 2, &mut rng);
        let b = Lstm::new(&mut store, "b", 3, 2, &mut rng);
        let x = Matrix::uniform(6, 3, 1.0, &mut rng);
        let reversed = Matrix::from_fn(6, 3, |r, c| x.get(5 - r, c));

        let run = |fwd: &Lstm, bwd: &Lstm, input: &Matrix| {
            let mut g = Graph::new();
            let xv = g.constant(input.clone());
            let f = fwd.bind(&mut g, &store);
            let bw = bwd.bind(&mut g, &store);
            let hf = f.run(&mut g, xv, false);
            let hb = bw.run(&mut g, xv, true);
            let h = g.concat_cols(&[hf, hb]);
            g.value(h).clone()
        };
        let on_reversed = run(&a, &b, &reversed);
        let swapped = run(&b, &a, &x);
        for t in 0..6 {
            for c in 0..4 {
                let expect = swapped.get(5 - t, (c + 2) % 4);
                assert!((on_reversed.get(t, c) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn train_step_validates_labels() {
        let mut model = AcousticModel::new(micro(), 3).unwrap();
        let mut opt = model.optimizer();
        let x = Matrix::zeros(3, 6);
        assert!(model.train_step(&[(x.clone(), vec![0, 1])], &mut opt, 0).is_err());
        assert!(model.train_step(&[(x.clone(), vec![0, 1, 9])], &mut opt, 0).is_err());
        assert!(model.train_step(&[(Matrix::zeros(3, 5), vec![0, 1, 2])], &mut opt, 0).is_err());
        let loss = model.train_step(&[(x, vec![0, 1, 2])], &mut opt, 0).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn per_examples() {
        assert_eq!(phoneme_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        let (a, b, c) = (0, 1, 2);
        let per = phoneme_error_rate(&[a, a, c, c, c], &[a, a, b, b, c]).unwrap();
        assert!((per - 1.0 / 3.0).abs() < 1e-15);
        let reference = [4, 4, 2, 9, 9, 9, 1];
        let doubled: Vec<usize> = reference.iter().flat_map(|&x| [x, x]).collect();
        assert_eq!(phoneme_error_rate(&doubled, &reference).unwrap(), 0.0);
        assert!(phoneme_error_rate(&[1], &[]).is_err());
    }

    #[test]
    fn levenshtein_small_cases() {
        assert_eq!(levenshtein(&[], &[1, 2]), 2);
        assert_eq!(levenshtein(&[1, 2, 3], &[2, 3, 4]), 2);
        assert_eq!(levenshtein(&[5, 6], &[5, 6]), 0);
    }

    proptest! {
        #[test]
        fn per_bounds_and_collapse_invariance(
            p in prop::collection::vec(0usize..4, 1..20),
            r in prop::collection::vec(0usize..4, 1..20),
            k in 1usize..4,
        ) {
            let per = phoneme_error_rate(&p, &r).unwrap();
            let lp = collapse_repeats(&p).len() as f64;
            let lr = collapse_repeats(&r).len() as f64;
            prop_assert!(per >= 0.0);
            prop_assert!(per <= (lp + lr) / lr);
            prop_assert_eq!(phoneme_error_rate(&r, &r).unwrap(), 0.0);
            let expand = |s: &[usize]| s.iter().flat_map(|&x| std::iter::repeat(x).take(k)).collect::<Vec<_>>();
            prop_assert_eq!(phoneme_error_rate(&expand(&p), &expand(&r)).unwrap(), per);
        }

        #[test]
        fn mppg_rows_are_on_the_simplex(seed in 0u64..1000, t in 1usize..8, scale in 0.1f64..50.0) {
            let model = AcousticModel::new(micro(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let x = Matrix::uniform(t, 6, scale, &mut rng);
            let out = model.forward(&x).unwrap();
            for r in 0..t {
                let row = out.mppg.row(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
}
