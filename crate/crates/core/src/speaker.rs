//! d-vector speaker encoder trained with the generalized end-to-end loss.

use crate::acoustic::adopt_store;
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::{FrontEnd, MelSpectrogram};
use crate::nn::{Linear, Lstm, Normalizer};
use clvc_autograd::{Adam, Graph, Matrix, ParamId, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerEncoderConfig {
    pub n_mels: usize,
    pub num_layers: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
    /// Shortest accepted input window, in frames.
    pub min_frames: usize,
    /// Window length used for GE2E training batches, in frames.
    pub train_frames: usize,
    pub speakers_per_batch: usize,
    pub utterances_per_speaker: usize,
    pub w_init: f64,
    pub b_init: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub segment_secs: f64,
    pub enroll_segments: usize,
}

impl Default for SpeakerEncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            num_layers: 3,
            hidden: 256,
            embedding_dim: 256,
            min_frames: 160,
            train_frames: 160,
            speakers_per_batch: 4,
            utterances_per_speaker: 5,
            w_init: 10.0,
            b_init: -5.0,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            segment_secs: 10.0,
            enroll_segments: 5,
        }
    }
}

/// Unit-norm speaker vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
}

impl SpeakerEmbedding {
    /// Normalizes `v` to unit length.
    pub fn from_unnormalized(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Invalid("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self {
            vector: v.into_iter().map(|x| x / n).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        cosine(&self.vector, &other.vector)
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(self.vector.clone())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnrollmentSet {
    pub speaker_id: String,
    /// Sample offsets of each segment within the concatenated enrollment audio.
    pub offsets: Vec<usize>,
    pub segments: Vec<SpeakerEmbedding>,
    pub aggregate: SpeakerEmbedding,
}

#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub config: SpeakerEncoderConfig,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    layers: Vec<Lstm>,
    projection: Linear,
    w: ParamId,
    b: ParamId,
}

impl SpeakerEncoder {
    pub fn new(config: SpeakerEncoderConfig, seed: u64) -> Result<Self> {
        if config.n_mels == 0 || config.num_layers == 0 || config.hidden == 0 || config.embedding_dim == 0 {
            return Err(Error::Invalid("speaker encoder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut width = config.n_mels;
        for l in 0..config.num_layers {
            layers.push(Lstm::new(&mut store, &format!("se/lstm/{l}"), width, config.hidden, &mut rng));
            width = config.hidden;
        }
        let projection = Linear::new(&mut store, "se/proj", config.hidden, config.embedding_dim, &mut rng);
        let w = store.add("se/ge2e/w", Matrix::scalar(config.w_init));
        let b = store.add("se/ge2e/b", Matrix::scalar(config.b_init));
        Ok(Self {
            normalizer: Normalizer::identity(config.n_mels),
            config,
            store,
            layers,
            projection,
            w,
            b,
        })
    }

    pub fn from_store(config: SpeakerEncoderConfig, store: ParamStore, normalizer: Normalizer) -> Result<Self> {
        let mut enc = Self::new(config, 0)?;
        adopt_store(&mut enc.store, store)?;
        if normalizer.dim() != enc.config.n_mels {
            return Err(Error::Shape("speaker normalizer width".into()));
        }
        enc.normalizer = normalizer;
        Ok(enc)
    }

    pub fn similarity_scale(&self) -> (f64, f64) {
        (self.store.get(self.w).data()[0], self.store.get(self.b).data()[0])
    }

    fn check_window(&self, mel: &Matrix) -> Result<()> {
        if mel.cols() != self.config.n_mels {
            return Err(Error::Shape(format!(
                "speaker encoder expects {} mel channels, got {}",
                self.config.n_mels,
                mel.cols()
            )));
        }
        if mel.rows() < self.config.min_frames {
            return Err(Error::Invalid(format!(
                "window of {} frames is shorter than the {}-frame minimum",
                mel.rows(),
                self.config.min_frames
            )));
        }
        Ok(())
    }

    /// Embeds a batch of equal-length windows; returns `B × embedding_dim`
    /// unit rows on the tape.
    pub fn embed_graph(&self, g: &mut Graph, store: &ParamStore, windows: &[Matrix]) -> Var {
        let frames = windows[0].rows();
        let normalized: Vec<Matrix> = windows.iter().map(|w| self.normalizer.apply(w)).collect();
        let mut steps: Vec<Var> = (0..frames)
            .map(|t| {
                let rows: Vec<Vec<f64>> = normalized.iter().map(|w| w.row(t).to_vec()).collect();
                g.constant(Matrix::from_rows(&rows))
            })
            .collect();
        for layer in &self.layers {
            let bound = layer.bind(g, store);
            steps = bound.run_batch(g, &steps);
        }
        let last = *steps.last().expect("at least one frame");
        let proj = self.projection.bind(g, store).apply(g, last);
        g.l2_normalize_rows(proj)
    }

    /// d-vector of one mel window (final LSTM state → projection → L2 norm).
    pub fn embed(&self, mel: &MelSpectrogram) -> Result<SpeakerEmbedding> {
        self.embed_matrix(&mel.values)
    }

    pub fn embed_matrix(&self, mel: &Matrix) -> Result<SpeakerEmbedding> {
        self.check_window(mel)?;
        let mut g = Graph::new();
        let e = self.embed_graph(&mut g, &self.store, std::slice::from_ref(mel));
        Ok(SpeakerEmbedding {
            vector: g.value(e).data().to_vec(),
        })
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(&self.store, self.config.learning_rate).with_clip(Some(self.config.clip_norm))
    }

    /// One GE2E update on `windows[speaker][utterance]`, all of equal length.
    pub fn train_step(&mut self, windows: &[Vec<Matrix>], opt: &mut Adam, step: usize) -> Result<f64> {
        let n = windows.len();
        let m = windows.first().map_or(0, Vec::len);
        if n < 2 || m < 2 || windows.iter().any(|w| w.len() != m) {
            return Err(Error::Invalid(format!(
                "GE2E needs at least 2 speakers with an equal count (>= 2) of windows; got {n} x {m}"
            )));
        }
        let flat: Vec<Matrix> = windows.iter().flatten().cloned().collect();
        let len = flat[0].rows();
        for w in &flat {
            self.check_window(w)?;
            if w.rows() != len {
                return Err(Error::Shape("GE2E windows must share one length".into()));
            }
        }
        let mut g = Graph::new();
        let emb = self.embed_graph(&mut g, &self.store, &flat);
        let w = g.param(&self.store, self.w);
        let b = g.param(&self.store, self.b);
        let loss = ge2e_graph(&mut g, emb, n, m, w, b);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "GE2E".into(),
            });
        }
        let grads = g.backward(loss).param_grads(&self.store);
        opt.step(&mut self.store, &grads)?;
        // The similarity scale must stay positive.
        let wv = self.store.get_mut(self.w);
        wv.data_mut()[0] = wv.data()[0].max(1e-6);
        Ok(value)
    }
}

/// Softmax GE2E loss on the tape.
///
/// `emb` holds `n·m` rows ordered speaker-major. Each row is scored against
/// every speaker centroid by `w·cos + b`; for its own speaker the centroid
/// excludes the row itself. The loss is the mean over rows of
/// `-log softmax(scores)[own speaker]`.
pub fn ge2e_graph(g: &mut Graph, emb: Var, n: usize, m: usize, w: Var, b: Var) -> Var {
    let rows = n * m;
    let averaging = Matrix::from_fn(n, rows, |k, r| if r / m == k { 1.0 / m as f64 } else { 0.0 });
    let exclusive = Matrix::from_fn(rows, rows, |r, c| {
        if r / m == c / m && r != c {
            1.0 / (m - 1) as f64
        } else {
            0.0
        }
    });
    let own_mask = Matrix::from_fn(rows, n, |r, k| if r / m == k { 1.0 } else { 0.0 });
    let other_mask = own_mask.map(|x| 1.0 - x);

    let a = g.constant(averaging);
    let centroids = g.matmul(a, emb);
    let centroids = g.l2_normalize_rows(centroids);
    let e = g.l2_normalize_rows(emb);
    let ct = g.transpose(centroids);
    let all = g.matmul(e, ct);

    let ex = g.constant(exclusive);
    let own_centroids = g.matmul(ex, emb);
    let own_centroids = g.l2_normalize_rows(own_centroids);
    let prod = g.mul(e, own_centroids);
    let own = g.sum_cols(prod);
    let ones = g.constant(Matrix::filled(1, n, 1.0));
    let own = g.matmul(own, ones);

    let om = g.constant(own_mask);
    let xm = g.constant(other_mask);
    let others = g.mul(all, xm);
    let own = g.mul(own, om);
    let sim = g.add(others, own);
    let scaled = g.scale_by(sim, w);
    let logits = g.add_by(scaled, b);
    let labels: Vec<usize> = (0..rows).map(|r| r / m).collect();
    g.cross_entropy(logits, &labels)
}

/// GE2E loss of `embeddings[speaker][utterance]` with similarity scale `w`
/// and offset `b`.
pub fn ge2e_loss(embeddings: &[Vec<SpeakerEmbedding>], w: f64, b: f64) -> Result<f64> {
    let n = embeddings.len();
    let m = embeddings.first().map_or(0, Vec::len);
    if n < 2 || m < 2 || embeddings.iter().any(|s| s.len() != m) {
        return Err(Error::Invalid(format!(
            "GE2E needs N >= 2 speakers with M >= 2 utterances each; got {n} x {m}"
        )));
    }
    if w <= 0.0 {
        return Err(Error::Invalid("GE2E scale w must be positive".into()));
    }
    for e in embeddings.iter().flatten() {
        if (e.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("embedding norm {} is not 1", e.norm())));
        }
    }
    let rows: Vec<Vec<f64>> = embeddings.iter().flatten().map(|e| e.vector.clone()).collect();
    let mut g = Graph::new();
    let emb = g.constant(Matrix::from_rows(&rows));
    let wv = g.constant(Matrix::scalar(w));
    let bv = g.constant(Matrix::scalar(b));
    let loss = ge2e_graph(&mut g, emb, n, m, wv, bv);
    Ok(g.scalar(loss))
}

/// Embeds up to `max_segments` randomly placed segments of the concatenated
/// clips and averages them.
pub fn enroll_speaker(
    speaker_id: &str,
    clips: &[AudioClip],
    encoder: &SpeakerEncoder,
    front_end: &FrontEnd,
    seed: u64,
) -> Result<EnrollmentSet> {
    let cfg = &encoder.config;
    let Some(first) = clips.first() else {
        return Err(Error::InsufficientData(format!("no audio for speaker {speaker_id}")));
    };
    let sr = first.sample_rate;
    if clips.iter().any(|c| c.sample_rate != sr) {
        return Err(Error::Invalid("enrollment clips mix sample rates".into()));
    }
    let audio: Vec<f64> = clips.iter().flat_map(|c| c.samples.iter().copied()).collect();
    let seg = (cfg.segment_secs * sr as f64).round() as usize;
    if seg == 0 || audio.len() < seg {
        return Err(Error::InsufficientData(format!(
            "speaker {speaker_id} has {:.2} s of audio; enrollment needs {:.2} s",
            audio.len() as f64 / sr as f64,
            cfg.segment_secs
        )));
    }
    let k = (audio.len() / seg).min(cfg.enroll_segments.max(1));
    let offsets = segment_offsets(audio.len(), seg, k, seed);
    let mut segments = Vec::with_capacity(k);
    for &off in &offsets {
        let clip = AudioClip::new(audio[off..off + seg].to_vec(), sr)?;
        let mel = front_end.mel_spectrogram(&clip)?;
        segments.push(encoder.embed(&mel)?);
    }
    let aggregate = aggregate_embeddings(&segments)?;
    Ok(EnrollmentSet {
        speaker_id: speaker_id.to_string(),
        offsets,
        segments,
        aggregate,
    })
}

/// Renormalized mean.
pub fn aggregate_embeddings(segments: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    let dim = segments
        .first()
        .ok_or_else(|| Error::InsufficientData("no segment embeddings".into()))?
        .dim();
    let mut mean = vec![0.0; dim];
    for s in segments {
        for (m, v) in mean.iter_mut().zip(&s.vector) {
            *m += v / segments.len() as f64;
        }
    }
    SpeakerEmbedding::from_unnormalized(mean)
}

/// Equal error rate of verification `scores` (higher = more likely same
/// speaker), with `labels[i]` true for same-speaker trials.
///
/// Thresholds sweep every distinct score plus +∞ (accept iff `score >= θ`).
/// FAR falls and FRR rises along the sweep; the EER is where the linear
/// interpolation between adjacent operating points crosses `FAR = FRR`.
pub fn equal_error_rate(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("one label per score".into()));
    }
    let n_same = labels.iter().filter(|&&l| l).count();
    let n_diff = labels.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(Error::InsufficientData("EER needs both same and different trials".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Operating points for θ = each distinct score (ascending), then +∞.
    let mut points = Vec::with_capacity(scores.len() + 1);
    let mut rejected_same = 0usize;
    let mut rejected_diff = 0usize;
    let mut i = 0;
    while i < order.len() {
        let theta = scores[order[i]];
        points.push((
            (n_diff - rejected_diff) as f64 / n_diff as f64,
            rejected_same as f64 / n_same as f64,
        ));
        while i < order.len() && scores[order[i]] == theta {
            if labels[order[i]] {
                rejected_same += 1;
            } else {
                rejected_diff += 1;
            }
            i += 1;
        }
    }
    points.push((0.0, 1.0));

    for pair in points.windows(2) {
        let (far0, frr0) = pair[0];
        let (far1, frr1) = pair[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            return Ok(far0);
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let alpha = d0 / (d0 - d1);
            return Ok(far0 + alpha * (far1 - far0));
        }
    }
    unreachable!("the sweep always ends at FAR=0, FRR=1")
}

/// Per-segment offsets are a pure function of the seed and audio length.
pub fn segment_offsets(total: usize, seg: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = total.saturating_sub(seg);
    (0..k)
        .map(|_| if span == 0 { 0 } else { rng.gen_range(0..=span) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> SpeakerEmbedding {
        SpeakerEmbedding::from_unnormalized(v).unwrap()
    }

    #[test]
    fn orthogonal_speakers_closed_form() {
        let a = unit(vec![1.0, 0.0, 0.0]);
        let b = unit(vec![0.0, 1.0, 0.0]);
        let loss = ge2e_loss(&[vec![a.clone(), a.clone()], vec![b.clone(), b]], 10.0, 0.0).unwrap();
        let expect = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-15);
        assert!((loss - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn identical_embeddings_give_ln_n() {
        let e = unit(vec![0.3, -0.2, 0.9]);
        for n in [2usize, 3, 5] {
            let set: Vec<Vec<SpeakerEmbedding>> = (0..n).map(|_| vec![e.clone(); 3]).collect();
            let loss = ge2e_loss(&set, 10.0, -5.0).unwrap();
            assert!((loss - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ge2e_rejects_bad_input() {
        let e = unit(vec![1.0, 0.0]);
        assert!(ge2e_loss(&[vec![e.clone(), e.clone()]], 10.0, 0.0).is_err());
        assert!(ge2e_loss(&[vec![e.clone()], vec![e.clone()]], 10.0, 0.0).is_err());
        let off = SpeakerEmbedding { vector: vec![2.0, 0.0] };
        assert!(ge2e_loss(&[vec![e.clone(), off], vec![e.clone(), e.clone()]], 10.0, 0.0).is_err());
        assert!(ge2e_loss(&[vec![e.clone(), e.clone()], vec![e.clone(), e]], 0.0, 0.0).is_err());
    }

    #[test]
    fn eer_examples() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5];
        let labels = [true, true, false, false, false];
        assert_eq!(equal_error_rate(&scores, &labels).unwrap(), 0.0);
        let flat = [0.5; 6];
        let labels = [true, false, true, false, true, false];
        assert!((equal_error_rate(&flat, &labels).unwrap() - 0.5).abs() < 1e-15);
        assert!(equal_error_rate(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn eer_hand_set() {
        // same: .9 .8 .7 .4 .35 ; diff: .6 .5 .3 .2 .1
        // θ = 0.5 → FRR = 2/5, FAR = 2/5.
        let scores = [0.9, 0.8, 0.7, 0.4, 0.35, 0.6, 0.5, 0.3, 0.2, 0.1];
        let labels = [true, true, true, true, true, false, false, false, false, false];
        assert!((equal_error_rate(&scores, &labels).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn forward_is_unit_norm_and_checks_length() {
        let cfg = SpeakerEncoderConfig {
            n_mels: 6,
            num_layers: 2,
            hidden: 5,
            embedding_dim: 4,
            min_frames: 8,
            ..Default::default()
        };
        let enc = SpeakerEncoder::new(cfg, 11).unwrap();
        let mel = Matrix::from_fn(10, 6, |r, c| ((r * 3 + c) % 7) as f64 - 3.0);
        let e = enc.embed_matrix(&mel).unwrap();
        assert_eq!(e.dim(), 4);
        assert!((e.norm() - 1.0).abs() < 1e-12);
        assert_eq!(enc.embed_matrix(&mel).unwrap(), e);
        assert!(enc.embed_matrix(&mel.slice_rows(0, 7)).is_err());
    }

    #[test]
    fn aggregate_is_renormalized_mean() {
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.0, 1.0]);
        let agg = aggregate_embeddings(&[a, b]).unwrap();
        let s = 0.5f64.sqrt();
        assert!((agg.vector[0] - s).abs() < 1e-15 && (agg.vector[1] - s).abs() < 1e-15);
        assert!(aggregate_embeddings(&[]).is_err());
    }

    #[test]
    fn offsets_follow_the_seed() {
        assert_eq!(segment_offsets(1000, 100, 5, 3), segment_offsets(1000, 100, 5, 3));
        assert_ne!(segment_offsets(1000, 100, 5, 3), segment_offsets(1000, 100, 5, 4));
        assert_eq!(segment_offsets(100, 100, 1, 9), vec![0]);
    }
}
