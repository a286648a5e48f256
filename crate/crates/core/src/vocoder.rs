//! Mel-to-waveform synthesis: Griffin-Lim and a small affine-coupling flow.

use crate::acoustic::adopt_store;
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::{frame_count, hann_window, mel_filterbank, FeatureConfig, MelSpectrogram};
use crate::nn::{Conv1d, Linear, Normalizer};
use clvc_autograd::{Adam, Graph, Matrix, ParamId, ParamStore, Var};
use nalgebra::{DMatrix, RealField};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

/// Samples produced for `frames` mel frames.
pub fn output_length(frames: usize, win: usize, hop: usize) -> usize {
    if frames == 0 {
        0
    } else {
        frames * hop + (win - hop)
    }
}

struct Stft {
    n_fft: usize,
    win: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl Stft {
    fn new(cfg: &FeatureConfig) -> Self {
        let n_fft = cfg.n_fft();
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            n_fft,
            win: cfg.win_samples(),
            hop: cfg.hop_samples(),
            window: hann_window(cfg.win_samples()),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn analyze(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let t = frame_count(x.len(), self.win, self.hop).unwrap_or(0);
        let mut input = self.forward.make_input_vec();
        let mut spectrum = self.forward.make_output_vec();
        let mut out = Vec::with_capacity(t * self.bins());
        for f in 0..t {
            input.fill(0.0);
            let frame = &x[f * self.hop..f * self.hop + self.win];
            for ((i, s), w) in input.iter_mut().zip(frame).zip(&self.window) {
                *i = s * w;
            }
            self.forward
                .process(&mut input, &mut spectrum)
                .expect("fft buffers sized by the plan");
            out.extend_from_slice(&spectrum);
        }
        out
    }

    /// Least-squares overlap-add inverse of `frames` spectra.
    fn synthesize(&self, spectra: &[Complex<f64>], frames: usize) -> Vec<f64> {
        let bins = self.bins();
        let len = output_length(frames, self.win, self.hop);
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut spectrum = self.inverse.make_input_vec();
        let mut buffer = self.inverse.make_output_vec();
        let scale = 1.0 / self.n_fft as f64;
        for f in 0..frames {
            spectrum.copy_from_slice(&spectra[f * bins..(f + 1) * bins]);
            spectrum[0].im = 0.0;
            spectrum[bins - 1].im = 0.0;
            self.inverse
                .process(&mut spectrum, &mut buffer)
                .expect("fft buffers sized by the plan");
            let offset = f * self.hop;
            for (i, w) in self.window.iter().enumerate() {
                out[offset + i] += w * buffer[i] * scale;
                norm[offset + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            *o = if *n > 1e-10 { *o / n } else { 0.0 };
        }
        out
    }
}

/// Linear-frequency magnitudes from log-mel frames via the filterbank
/// pseudo-inverse, clamped at zero.
pub fn mel_to_magnitude(mel: &MelSpectrogram, cfg: &FeatureConfig) -> Result<Matrix> {
    let fb = mel_filterbank(cfg.sample_rate, cfg.n_fft(), cfg.n_mels);
    let dm = DMatrix::from_row_slice(fb.rows(), fb.cols(), fb.data());
    let pinv = dm
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Invalid(format!("filterbank pseudo-inverse: {e}")))?;
    let bins = fb.cols();
    let mut out = Matrix::zeros(mel.num_frames(), bins);
    for t in 0..mel.num_frames() {
        let power: Vec<f64> = mel.values.row(t).iter().map(|v| v.exp()).collect();
        for (k, o) in out.row_mut(t).iter_mut().enumerate() {
            let p: f64 = (0..cfg.n_mels).map(|m| pinv[(k, m)] * power[m]).sum();
            *o = p.max(0.0).sqrt();
        }
    }
    Ok(out)
}

/// Griffin-Lim reconstruction. Output has `T·hop + (win − hop)` samples.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &FeatureConfig, n_iters: usize) -> Result<AudioClip> {
    Ok(griffin_lim_trace(mel, cfg, n_iters)?.0)
}

/// Like [`griffin_lim`], also returning the spectral convergence
/// `‖|STFT(x)| − S‖ / ‖S‖` measured at each iteration.
pub fn griffin_lim_trace(mel: &MelSpectrogram, cfg: &FeatureConfig, n_iters: usize) -> Result<(AudioClip, Vec<f64>)> {
    cfg.validate()?;
    if mel.n_mels() != cfg.n_mels || mel.num_frames() == 0 {
        return Err(Error::Shape(format!(
            "expected a non-empty {}-band mel, got {}x{}",
            cfg.n_mels,
            mel.num_frames(),
            mel.n_mels()
        )));
    }
    if !mel.values.all_finite() {
        return Err(Error::Invalid("mel contains non-finite values".into()));
    }
    let stft = Stft::new(cfg);
    let mag = mel_to_magnitude(mel, cfg)?;
    let frames = mel.num_frames();
    let target_norm = mag.squared_norm().sqrt().max(f64::MIN_POSITIVE);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut phase: Vec<Complex<f64>> = (0..mag.len())
        .map(|_| Complex::from_polar(1.0, rng.gen_range(-PI..PI)))
        .collect();
    let apply = |phase: &[Complex<f64>]| -> Vec<Complex<f64>> {
        mag.data().iter().zip(phase).map(|(m, p)| p * *m).collect()
    };
    let mut audio = stft.synthesize(&apply(&phase), frames);
    let mut trace = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let spec = stft.analyze(&audio);
        let err: f64 = spec.iter().zip(mag.data()).map(|(c, m)| (c.norm() - m).powi(2)).sum();
        trace.push(err.sqrt() / target_norm);
        for (p, c) in phase.iter_mut().zip(&spec) {
            let n = c.norm();
            *p = if n > 0.0 { c / n } else { Complex::new(1.0, 0.0) };
        }
        audio = stft.synthesize(&apply(&phase), frames);
    }
    Ok((AudioClip::new(audio, cfg.sample_rate)?, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub n_flows: usize,
    pub squeeze_group: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub cond_dim: usize,
    pub mel_dim: usize,
    pub hop: usize,
    pub win: usize,
    pub sigma_train: f64,
    pub sigma_synth: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Mel frames per training segment.
    pub segment_frames: usize,
    /// Largest accepted condition number of a channel mix.
    pub max_condition: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_flows: 4,
            squeeze_group: 8,
            hidden: 32,
            kernel: 3,
            cond_dim: 16,
            mel_dim: 80,
            hop: 240,
            win: 768,
            sigma_train: 1.0,
            sigma_synth: 0.6,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            segment_frames: 16,
            max_condition: 1e6,
        }
    }
}

impl FlowConfig {
    pub fn half(&self) -> usize {
        self.squeeze_group / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_flows == 0 {
            return Err(Error::Invalid("flow needs at least one step".into()));
        }
        if self.squeeze_group < 2 || self.squeeze_group % 2 != 0 {
            return Err(Error::Invalid("squeeze_group must be even and at least 2".into()));
        }
        if [self.hidden, self.kernel, self.cond_dim, self.mel_dim, self.hop, self.segment_frames].contains(&0) {
            return Err(Error::Invalid("flow dimensions must be positive".into()));
        }
        if self.win < self.hop {
            return Err(Error::Invalid("window shorter than hop".into()));
        }
        if self.sigma_train <= 0.0 || self.sigma_synth < 0.0 {
            return Err(Error::Invalid("flow sigma must be positive".into()));
        }
        Ok(())
    }

    /// Mel frame conditioning squeezed row `n`.
    pub fn frame_of_row(&self, n: usize, frames: usize) -> usize {
        ((n * self.squeeze_group) / self.hop).min(frames - 1)
    }

    fn check_segment(&self, samples: usize, frames: usize) -> Result<()> {
        if samples == 0 || samples % self.squeeze_group != 0 {
            return Err(Error::Shape(format!(
                "segment length {samples} is not a positive multiple of {}",
                self.squeeze_group
            )));
        }
        if frames == 0 || (samples - 1) / self.hop >= frames + self.win.div_ceil(self.hop) {
            return Err(Error::Shape(format!("{frames} mel frames do not cover {samples} samples")));
        }
        Ok(())
    }
}

/// Output of the audio-to-latent direction.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T = f64> {
    /// Squeezed latent, row-major `N × squeeze_group`.
    pub z: Vec<T>,
    pub log_det: T,
}

#[derive(Clone, Debug)]
struct FlowStep {
    lower: ParamId,
    upper: ParamId,
    log_scale: ParamId,
    coupling_in: Conv1d,
    coupling_out: Linear,
}

/// One audio/mel training pair. `audio.len()` must be a multiple of the
/// squeeze group and `mel` must cover it.
#[derive(Clone, Debug)]
pub struct VocoderItem {
    pub audio: Vec<f64>,
    pub mel: Matrix,
}

#[derive(Clone, Debug)]
pub struct FlowVocoder {
    pub config: FlowConfig,
    pub store: ParamStore,
    /// Fixed permutations (`perm{i}`) and signs (`sign{i}`) of the channel mixes.
    pub buffers: ParamStore,
    pub mel_norm: Normalizer,
    cond: Linear,
    steps: Vec<FlowStep>,
}

fn strict_mask(g: usize, lower: bool) -> Matrix {
    Matrix::from_fn(g, g, |r, c| if (lower && r > c) || (!lower && r < c) { 1.0 } else { 0.0 })
}

impl FlowVocoder {
    fn build(config: FlowConfig, seed: u64, identity: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut buffers = ParamStore::new();
        let g = config.squeeze_group;
        let h = config.half();
        let cond = Linear::new(&mut store, "voc/cond", config.mel_dim, config.cond_dim, &mut rng);
        let mut steps = Vec::with_capacity(config.n_flows);
        for i in 0..config.n_flows {
            let mut perm: Vec<usize> = (0..g).collect();
            let mut sign = vec![1.0; g];
            let (mut lower, mut upper) = (Matrix::zeros(g, g), Matrix::zeros(g, g));
            if !identity {
                perm.shuffle(&mut rng);
                for s in &mut sign {
                    if rng.gen_bool(0.5) {
                        *s = -1.0;
                    }
                }
                let scale = 0.5 / (g as f64).sqrt();
                lower = Matrix::uniform(g, g, scale, &mut rng).zip_map(&strict_mask(g, true), |a, m| a * m);
                upper = Matrix::uniform(g, g, scale, &mut rng).zip_map(&strict_mask(g, false), |a, m| a * m);
            }
            buffers.add(format!("perm{i}"), Matrix::row_vector(perm.iter().map(|&p| p as f64).collect()));
            buffers.add(format!("sign{i}"), Matrix::row_vector(sign));
            let lower = store.add(format!("voc/flow{i}/mix/lower"), lower);
            let upper = store.add(format!("voc/flow{i}/mix/upper"), upper);
            let log_scale = store.add(format!("voc/flow{i}/mix/log_scale"), Matrix::zeros(1, g));
            let coupling_in = Conv1d::new(
                &mut store,
                &format!("voc/flow{i}/coupling/in"),
                h + config.cond_dim,
                config.hidden,
                config.kernel,
                &mut rng,
            );
            let coupling_out = Linear::zeros(&mut store, &format!("voc/flow{i}/coupling/out"), config.hidden, 2 * h);
            steps.push(FlowStep {
                lower,
                upper,
                log_scale,
                coupling_in,
                coupling_out,
            });
        }
        Ok(Self {
            mel_norm: Normalizer::identity(config.mel_dim),
            config,
            store,
            buffers,
            cond,
            steps,
        })
    }

    /// Random channel mixes; couplings start as the identity.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// Identity mixes and identity couplings: the flow maps audio to itself.
    pub fn identity(config: FlowConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    pub fn from_parts(config: FlowConfig, store: ParamStore, buffers: ParamStore, mel_norm: Normalizer) -> Result<Self> {
        let mut model = Self::build(config, 0, true)?;
        adopt_store(&mut model.store, store)?;
        adopt_store(&mut model.buffers, buffers)?;
        for i in 0..model.config.n_flows {
            model.permutation(i)?;
        }
        if mel_norm.dim() != model.config.mel_dim {
            return Err(Error::Shape("vocoder mel normalizer width".into()));
        }
        model.mel_norm = mel_norm;
        Ok(model)
    }

    pub fn optimizer(&self) -> Adam {
        Adam::new(&self.store, self.config.learning_rate).with_clip(Some(self.config.clip_norm))
    }

    fn permutation(&self, i: usize) -> Result<Vec<usize>> {
        let g = self.config.squeeze_group;
        let row = self
            .buffers
            .by_name(&format!("perm{i}"))
            .ok_or_else(|| Error::Invalid(format!("missing permutation {i}")))?;
        let perm: Vec<usize> = row.data().iter().map(|&v| v as usize).collect();
        let mut seen = vec![false; g];
        for (&p, &v) in perm.iter().zip(row.data()) {
            if p >= g || p as f64 != v || seen[p] {
                return Err(Error::Invalid(format!("permutation {i} is not a permutation")));
            }
            seen[p] = true;
        }
        if perm.len() != g {
            return Err(Error::Invalid(format!("permutation {i} has the wrong length")));
        }
        Ok(perm)
    }

    fn sign(&self, i: usize) -> &Matrix {
        self.buffers.by_name(&format!("sign{i}")).expect("sign buffer")
    }

    fn permutation_matrix(&self, i: usize) -> Matrix {
        let perm = self.permutation(i).expect("validated permutation");
        let g = perm.len();
        Matrix::from_fn(g, g, |r, c| if perm[r] == c { 1.0 } else { 0.0 })
    }

    /// Dense channel-mix matrix of flow step `i`.
    pub fn mix_matrix(&self, i: usize) -> Matrix {
        let s = &self.steps[i];
        let g = self.config.squeeze_group;
        let lower = self.store.get(s.lower);
        let upper = self.store.get(s.upper);
        let log_scale = self.store.get(s.log_scale);
        let sign = self.sign(i);
        let l = Matrix::from_fn(g, g, |r, c| match r.cmp(&c) {
            std::cmp::Ordering::Greater => lower.get(r, c),
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        });
        let u = Matrix::from_fn(g, g, |r, c| match r.cmp(&c) {
            std::cmp::Ordering::Less => upper.get(r, c),
            std::cmp::Ordering::Equal => sign.get(0, c) * log_scale.get(0, c).exp(),
            std::cmp::Ordering::Greater => 0.0,
        });
        self.permutation_matrix(i).matmul(&l).matmul(&u)
    }

    fn squeeze(&self, audio: &[f64]) -> Matrix {
        let g = self.config.squeeze_group;
        Matrix::from_vec(audio.len() / g, g, audio.to_vec())
    }

    fn row_frames(&self, rows: usize, frames: usize) -> Vec<Option<usize>> {
        (0..rows).map(|n| Some(self.config.frame_of_row(n, frames))).collect()
    }

    /// Negative log-likelihood per element of one item on `g`.
    fn nll_graph(&self, g: &mut Graph, store: &ParamStore, item: &VocoderItem, sigma: f64) -> Result<(Var, Var)> {
        let c = &self.config;
        c.check_segment(item.audio.len(), item.mel.rows())?;
        if item.mel.cols() != c.mel_dim {
            return Err(Error::Shape(format!("vocoder expects {}-band mels", c.mel_dim)));
        }
        let gs = c.squeeze_group;
        let h = c.half();
        let rows = item.audio.len() / gs;

        let mel = g.constant(self.mel_norm.apply(&item.mel));
        let cond_layer = self.cond.bind(g, store);
        let cond = cond_layer.apply(g, mel);
        let cond = g.gather_rows(cond, &self.row_frames(rows, item.mel.rows()));

        let mut x = g.constant(self.squeeze(&item.audio));
        let mut log_dets = Vec::new();
        for (i, s) in self.steps.iter().enumerate() {
            let lower = g.param(store, s.lower);
            let upper = g.param(store, s.upper);
            let log_scale = g.param(store, s.log_scale);
            let lmask = g.constant(strict_mask(gs, true));
            let umask = g.constant(strict_mask(gs, false));
            let eye = g.constant(Matrix::identity(gs));
            let sign = g.constant(self.sign(i).clone());
            let perm = g.constant(self.permutation_matrix(i));

            let l = g.mul(lower, lmask);
            let l = g.add(l, eye);
            let scale = g.exp(log_scale);
            let scale = g.mul(scale, sign);
            let diag = g.diag(scale);
            let u = g.mul(upper, umask);
            let u = g.add(u, diag);
            let w = g.matmul(perm, l);
            let w = g.matmul(w, u);
            let wt = g.transpose(w);
            x = g.matmul(x, wt);
            let mix_ld = g.sum(log_scale);
            log_dets.push(g.scale(mix_ld, rows as f64));

            let xa = g.slice_cols(x, 0, h);
            let xb = g.slice_cols(x, h, h);
            let input = g.concat_cols(&[xa, cond]);
            let bin = s.coupling_in.bind(g, store);
            let hid = bin.apply(g, input);
            let hid = g.tanh(hid);
            let bout = s.coupling_out.bind(g, store);
            let out = bout.apply(g, hid);
            let ls = g.slice_cols(out, 0, h);
            let shift = g.slice_cols(out, h, h);
            let es = g.exp(ls);
            let zb = g.mul(xb, es);
            let zb = g.add(zb, shift);
            log_dets.push(g.sum(ls));
            x = g.concat_cols(&[xa, zb]);
        }
        let n = item.audio.len() as f64;
        let sq = g.square(x);
        let sq = g.sum(sq);
        let quad = g.scale(sq, 0.5 / (sigma * sigma));
        let ld = g.concat_rows(&log_dets);
        let ld = g.sum(ld);
        let nll = g.sub(quad, ld);
        let nll = g.add_scalar(nll, 0.5 * n * (2.0 * PI * sigma * sigma).ln());
        let nll = g.scale(nll, 1.0 / n);
        Ok((nll, ld))
    }

    /// Mean per-element NLL of a batch on `g`, at the training sigma.
    pub fn batch_nll(&self, g: &mut Graph, store: &ParamStore, batch: &[VocoderItem]) -> Result<Var> {
        let mut parts = Vec::with_capacity(batch.len());
        for item in batch {
            parts.push(self.nll_graph(g, store, item, self.config.sigma_train)?.0);
        }
        let stacked = g.concat_rows(&parts);
        Ok(g.mean(stacked))
    }

    /// Per-element NLL of one item at `sigma`, without updating.
    pub fn nll(&self, item: &VocoderItem, sigma: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (nll, _) = self.nll_graph(&mut g, &self.store, item, sigma)?;
        Ok(g.scalar(nll))
    }

    /// Maximum-likelihood update. Returns the batch NLL before the update.
    pub fn train_step(&mut self, batch: &[VocoderItem], opt: &mut Adam, step: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty vocoder batch".into()));
        }
        let mut g = Graph::new();
        let loss = self.batch_nll(&mut g, &self.store, batch)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "flow vocoder NLL".into(),
            });
        }
        let grads = g.backward(loss).param_grads(&self.store);
        opt.step(&mut self.store, &grads)?;
        Ok(value)
    }

    /// Inference network in precision `T`. Fails if a channel mix is
    /// numerically singular.
    pub fn runner<T: RealField + Copy>(&self) -> Result<FlowRunner<T>> {
        let c = &self.config;
        let cast = |m: &Matrix| -> DMatrix<T> {
            DMatrix::from_row_slice(m.rows(), m.cols(), m.data()).map(|v| nalgebra::convert::<f64, T>(v))
        };
        let mut layers = Vec::with_capacity(self.steps.len());
        for (i, s) in self.steps.iter().enumerate() {
            let w = self.mix_matrix(i);
            let wd = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
            let sv = wd.clone().singular_values();
            let (smax, smin) = (sv.max(), sv.min());
            if !(smin > 0.0 && smax / smin <= c.max_condition) {
                return Err(Error::Invalid(format!(
                    "channel mix {i} is ill-conditioned (condition {})",
                    smax / smin
                )));
            }
            let inv = wd.try_inverse().ok_or_else(|| Error::Invalid(format!("channel mix {i} is singular")))?;
            let log_det: f64 = self.store.get(s.log_scale).sum();
            layers.push(RunnerLayer {
                w_t: cast(&w.transpose()),
                w_inv_t: inv.transpose().map(|v| nalgebra::convert::<f64, T>(v)),
                mix_log_det: nalgebra::convert::<f64, T>(log_det),
                in_w: cast(self.store.get(s.coupling_in.linear.w)),
                in_b: cast(self.store.get(s.coupling_in.linear.b)),
                out_w: cast(self.store.get(s.coupling_out.w)),
                out_b: cast(self.store.get(s.coupling_out.b)),
            });
        }
        Ok(FlowRunner {
            config: c.clone(),
            mel_norm: self.mel_norm.clone(),
            cond_w: self.store.get(self.cond.w).clone(),
            cond_b: self.store.get(self.cond.b).clone(),
            layers,
        })
    }

    /// Samples `T·hop + (win − hop)` audio samples from a `T`-frame mel with
    /// latent noise of standard deviation `sigma`.
    pub fn synthesize(&self, mel: &MelSpectrogram, sigma: f64, seed: u64, sample_rate: u32) -> Result<AudioClip> {
        let c = &self.config;
        let frames = mel.num_frames();
        if frames == 0 || mel.n_mels() != c.mel_dim {
            return Err(Error::Shape(format!("vocoder expects a non-empty {}-band mel", c.mel_dim)));
        }
        if !mel.values.all_finite() {
            return Err(Error::Invalid("mel contains non-finite values".into()));
        }
        let len = output_length(frames, c.win, c.hop);
        let padded = len.div_ceil(c.squeeze_group) * c.squeeze_group;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..padded)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                sigma * e
            })
            .collect();
        let mut audio = self.runner::<f64>()?.inverse(&z, &mel.values)?;
        audio.truncate(len);
        AudioClip::new(audio, sample_rate)
    }
}

struct RunnerLayer<T: RealField + Copy> {
    w_t: DMatrix<T>,
    w_inv_t: DMatrix<T>,
    mix_log_det: T,
    in_w: DMatrix<T>,
    in_b: DMatrix<T>,
    out_w: DMatrix<T>,
    out_b: DMatrix<T>,
}

/// Flow evaluated in a fixed floating-point precision, outside the tape.
pub struct FlowRunner<T: RealField + Copy> {
    config: FlowConfig,
    mel_norm: Normalizer,
    cond_w: Matrix,
    cond_b: Matrix,
    layers: Vec<RunnerLayer<T>>,
}

impl<T: RealField + Copy> FlowRunner<T> {
    fn conditioning(&self, mel: &Matrix, rows: usize) -> Result<DMatrix<T>> {
        let c = &self.config;
        if mel.cols() != c.mel_dim || mel.rows() == 0 {
            return Err(Error::Shape(format!("vocoder expects a non-empty {}-band mel", c.mel_dim)));
        }
        let frame_cond = self.mel_norm.apply(mel).matmul(&self.cond_w);
        Ok(DMatrix::from_fn(rows, c.cond_dim, |n, k| {
            let f = c.frame_of_row(n, mel.rows());
            nalgebra::convert::<f64, T>(frame_cond.get(f, k) + self.cond_b.get(0, k))
        }))
    }

    /// Returns `(log_s, shift)` of the coupling given the pass-through half.
    fn coupling(&self, layer: &RunnerLayer<T>, xa: &DMatrix<T>, cond: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
        let rows = xa.nrows();
        let width = xa.ncols() + cond.ncols();
        let k = self.config.kernel;
        let pad = k / 2;
        let mut unfolded = DMatrix::<T>::zeros(rows, k * width);
        for j in 0..rows {
            for tap in 0..k {
                let src = (j + tap) as isize - pad as isize;
                if src < 0 || src as usize >= rows {
                    continue;
                }
                let src = src as usize;
                for col in 0..xa.ncols() {
                    unfolded[(j, tap * width + col)] = xa[(src, col)];
                }
                for col in 0..cond.ncols() {
                    unfolded[(j, tap * width + xa.ncols() + col)] = cond[(src, col)];
                }
            }
        }
        let mut hid = unfolded * &layer.in_w;
        for mut row in hid.row_iter_mut() {
            row += layer.in_b.row(0);
        }
        let hid = hid.map(|v| v.tanh());
        let mut out = hid * &layer.out_w;
        for mut row in out.row_iter_mut() {
            row += layer.out_b.row(0);
        }
        let h = self.config.half();
        (out.columns(0, h).into_owned(), out.columns(h, h).into_owned())
    }

    fn squeezed(&self, x: &[T]) -> Result<DMatrix<T>> {
        let g = self.config.squeeze_group;
        if x.is_empty() || x.len() % g != 0 {
            return Err(Error::Shape(format!("length {} is not a positive multiple of {g}", x.len())));
        }
        Ok(DMatrix::from_row_slice(x.len() / g, g, x))
    }

    fn flatten(m: &DMatrix<T>) -> Vec<T> {
        m.transpose().as_slice().to_vec()
    }

    /// Audio to latent, with the total log-determinant.
    pub fn forward(&self, audio: &[T], mel: &Matrix) -> Result<LatentCode<T>> {
        let mut x = self.squeezed(audio)?;
        let rows = x.nrows();
        let c = &self.config;
        c.check_segment(audio.len(), mel.rows())?;
        let cond = self.conditioning(mel, rows)?;
        let h = c.half();
        let mut log_det = T::zero();
        for layer in &self.layers {
            x = &x * &layer.w_t;
            log_det += layer.mix_log_det * nalgebra::convert::<f64, T>(rows as f64);
            let xa = x.columns(0, h).into_owned();
            let (ls, shift) = self.coupling(layer, &xa, &cond);
            let zb = x.columns(h, h).component_mul(&ls.map(|v| v.exp())) + shift;
            log_det += ls.sum();
            x.columns_mut(h, h).copy_from(&zb);
        }
        Ok(LatentCode {
            z: Self::flatten(&x),
            log_det,
        })
    }

    /// Latent to audio; exact layer-by-layer inverse of [`FlowRunner::forward`].
    pub fn inverse(&self, z: &[T], mel: &Matrix) -> Result<Vec<T>> {
        let mut x = self.squeezed(z)?;
        let rows = x.nrows();
        let cond = self.conditioning(mel, rows)?;
        let h = self.config.half();
        for layer in self.layers.iter().rev() {
            let za = x.columns(0, h).into_owned();
            let (ls, shift) = self.coupling(layer, &za, &cond);
            let xb = (x.columns(h, h) - shift).component_mul(&ls.map(|v| (-v).exp()));
            x.columns_mut(h, h).copy_from(&xb);
            x = &x * &layer.w_inv_t;
        }
        Ok(Self::flatten(&x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> FlowConfig {
        FlowConfig {
            n_flows: 2,
            squeeze_group: 4,
            hidden: 5,
            kernel: 3,
            cond_dim: 3,
            mel_dim: 3,
            hop: 8,
            win: 8,
            ..Default::default()
        }
    }

    #[test]
    fn output_length_law() {
        for t in [1, 10, 100] {
            assert_eq!(output_length(t, 768, 240), 240 * t + 528);
        }
    }

    #[test]
    fn identity_flow_passes_audio_through() {
        let model = FlowVocoder::identity(micro(), 3).unwrap();
        let audio: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let mel = Matrix::filled(2, 3, -2.0);
        let code = model.runner::<f64>().unwrap().forward(&audio, &mel).unwrap();
        assert_eq!(code.z, audio);
        assert_eq!(code.log_det, 0.0);
        for i in 0..2 {
            assert_eq!(model.mix_matrix(i), Matrix::identity(4));
        }
    }

    #[test]
    fn zero_audio_nll_is_gaussian_constant() {
        let model = FlowVocoder::identity(micro(), 1).unwrap();
        let item = VocoderItem {
            audio: vec![0.0; 16],
            mel: Matrix::zeros(2, 3),
        };
        for sigma in [1.0, 0.6] {
            let expected = 0.5 * (2.0 * PI * sigma * sigma).ln();
            assert!((model.nll(&item, sigma).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_segment_is_rejected() {
        let model = FlowVocoder::new(micro(), 1).unwrap();
        let item = VocoderItem {
            audio: vec![0.0; 15],
            mel: Matrix::zeros(2, 3),
        };
        assert!(model.nll(&item, 1.0).is_err());
        assert!(model.runner::<f64>().unwrap().forward(&[0.0; 15], &item.mel).is_err());
    }

    #[test]
    fn ill_conditioned_mix_is_refused() {
        let mut model = FlowVocoder::new(micro(), 1).unwrap();
        let id = model.store.id("voc/flow0/mix/log_scale").unwrap();
        model.store.get_mut(id).data_mut()[0] = -40.0;
        assert!(model.runner::<f64>().is_err());
    }

    #[test]
    fn floor_mel_griffin_lim_is_quiet() {
        let cfg = FeatureConfig::default();
        let mel = MelSpectrogram {
            values: Matrix::filled(10, 80, cfg.floor_eps.ln()),
        };
        let clip = griffin_lim(&mel, &cfg, 5).unwrap();
        assert_eq!(clip.len(), 10 * 240 + 528);
        assert!(clip.rms() < 1e-3);
    }
}
