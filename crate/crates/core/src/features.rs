//! DSP front end: silence trimming, framing, log-mel, MFCC with context
//! stacking, and per-frame prosody. Every stream uses the same window and hop,
//! so frame counts always agree for a given clip.

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use clvc_autograd::Matrix;
use realfft::{RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub context_left: usize,
    pub context_right: usize,
    pub floor_eps: f64,
    pub trim_threshold_db: f64,
    pub trim_frame_ms: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            win_ms: 32.0,
            hop_ms: 10.0,
            n_mels: 80,
            n_mfcc: 40,
            context_left: 7,
            context_right: 7,
            floor_eps: 1e-10,
            trim_threshold_db: -40.0,
            trim_frame_ms: 25.0,
        }
    }
}

impl FeatureConfig {
    pub fn win_samples(&self) -> usize {
        crate::audio::ms_to_samples(self.win_ms, self.sample_rate)
    }

    pub fn hop_samples(&self) -> usize {
        crate::audio::ms_to_samples(self.hop_ms, self.sample_rate)
    }

    pub fn n_fft(&self) -> usize {
        self.win_samples().next_power_of_two()
    }

    /// Width of a context-stacked MFCC row.
    pub fn context_dim(&self) -> usize {
        self.n_mfcc * (self.context_left + 1 + self.context_right)
    }

    /// Frames produced for `len` samples, or `None` when shorter than a window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        frame_count(len, self.win_samples(), self.hop_samples())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.win_samples() == 0 || self.hop_samples() == 0 {
            return Err(Error::Invalid("window, hop and sample rate must be positive".into()));
        }
        if self.n_mfcc > self.n_mels || self.n_mels == 0 {
            return Err(Error::Invalid(format!(
                "n_mfcc ({}) must not exceed n_mels ({})",
                self.n_mfcc, self.n_mels
            )));
        }
        if self.trim_threshold_db >= 0.0 {
            return Err(Error::Invalid("trim threshold must be below 0 dB".into()));
        }
        Ok(())
    }

    pub fn check_rate(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate != self.sample_rate {
            return Err(Error::SampleRate {
                expected: self.sample_rate,
                found: clip.sample_rate,
            });
        }
        Ok(())
    }
}

/// `1 + floor((len - win) / hop)` for `len >= win`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    (len >= win && win > 0 && hop > 0).then(|| 1 + (len - win) / hop)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hann,
    Rectangular,
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    /// `T × win`, one frame per row.
    pub frames: Matrix,
    pub hop: usize,
    pub win: usize,
    pub window: Window,
}

impl FrameMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Splits `clip` into frames starting at `t * hop`.
pub fn frame_signal(clip: &AudioClip, win_ms: f64, hop_ms: f64, window: Window) -> Result<FrameMatrix> {
    let win = clip.ms_to_samples(win_ms);
    let hop = clip.ms_to_samples(hop_ms);
    frame_samples(&clip.samples, win, hop, window)
}

pub fn frame_samples(samples: &[f64], win: usize, hop: usize, window: Window) -> Result<FrameMatrix> {
    if hop == 0 || win == 0 {
        return Err(Error::Invalid("window and hop must be positive".into()));
    }
    let t = frame_count(samples.len(), win, hop).ok_or(Error::TooShort {
        len: samples.len(),
        win,
    })?;
    let taper = match window {
        Window::Hann => hann_window(win),
        Window::Rectangular => vec![1.0; win],
    };
    let mut frames = Matrix::zeros(t, win);
    for i in 0..t {
        let src = &samples[i * hop..i * hop + win];
        for ((dst, &x), &w) in frames.row_mut(i).iter_mut().zip(src).zip(&taper) {
            *dst = x * w;
        }
    }
    Ok(FrameMatrix {
        frames,
        hop,
        win,
        window,
    })
}

/// Removes leading and trailing scan frames whose RMS falls below
/// `peak_rms * 10^(threshold_db / 20)`. Scan frames are non-overlapping; the
/// last one may be partial.
pub fn trim_silence(clip: &AudioClip, threshold_db: f64, frame_ms: f64) -> Result<AudioClip> {
    if threshold_db >= 0.0 {
        return Err(Error::Invalid(format!(
            "trim threshold must be negative dB, got {threshold_db}"
        )));
    }
    let frame = clip.ms_to_samples(frame_ms).max(1);
    let rms: Vec<f64> = clip
        .samples
        .chunks(frame)
        .map(|c| (c.iter().map(|x| x * x).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let peak = rms.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::AllSilent);
    }
    let threshold = peak * 10f64.powf(threshold_db / 20.0);
    let first = rms.iter().position(|&r| r >= threshold).ok_or(Error::AllSilent)?;
    let last = rms.iter().rposition(|&r| r >= threshold).ok_or(Error::AllSilent)?;
    let start = first * frame;
    let end = ((last + 1) * frame).min(clip.samples.len());
    AudioClip::new(clip.samples[start..end].to_vec(), clip.sample_rate)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of `n_mels` triangular filters spanning 0 Hz..Nyquist.
pub fn mel_band_edges(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// `n_mels × (n_fft/2 + 1)` triangular filterbank on the HTK mel scale,
/// unnormalized (peak weight 1).
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Matrix {
    let edges = mel_band_edges(sample_rate, n_mels);
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Matrix::from_fn(n_mels, n_bins, |m, k| {
        let f = k as f64 * bin_hz;
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rise = (f - lo) / (centre - lo);
        let fall = (hi - f) / (hi - centre);
        rise.min(fall).max(0.0)
    })
}

/// Orthonormal DCT-II basis as an `n_in × n_out` matrix, so `x · D` gives the
/// first `n_out` coefficients.
pub fn dct_matrix(n_in: usize, n_out: usize) -> Matrix {
    let n = n_in as f64;
    Matrix::from_fn(n_in, n_out, |i, k| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
    })
}

/// `T × n_mels` natural-log mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Matrix,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }
}

/// `T × (n_mfcc · (left + 1 + right))` stacked MFCCs.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMfcc {
    pub values: Matrix,
}

/// `T × 2`: log energy, zero-crossing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodyFeatures {
    pub values: Matrix,
}

/// Cached FFT plan, filterbank and DCT basis for one configuration.
#[derive(Clone)]
pub struct FrontEnd {
    cfg: FeatureConfig,
    fft: Arc<dyn RealToComplex<f64>>,
    filterbank: Matrix,
    dct: Matrix,
}

impl std::fmt::Debug for FrontEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrontEnd").field("cfg", &self.cfg).finish()
    }
}

impl FrontEnd {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.n_fft();
        let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            fft,
            filterbank: mel_filterbank(cfg.sample_rate, n_fft, cfg.n_mels),
            dct: dct_matrix(cfg.n_mels, cfg.n_mfcc),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    pub fn trim(&self, clip: &AudioClip) -> Result<AudioClip> {
        self.cfg.check_rate(clip)?;
        trim_silence(clip, self.cfg.trim_threshold_db, self.cfg.trim_frame_ms)
    }

    pub fn frames(&self, clip: &AudioClip, window: Window) -> Result<FrameMatrix> {
        self.cfg.check_rate(clip)?;
        frame_samples(
            &clip.samples,
            self.cfg.win_samples(),
            self.cfg.hop_samples(),
            window,
        )
    }

    /// `T × (n_fft/2 + 1)` power spectrogram of Hann-windowed frames.
    pub fn power_spectrogram(&self, clip: &AudioClip) -> Result<Matrix> {
        let frames = self.frames(clip, Window::Hann)?;
        Ok(self.power_of_frames(&frames.frames))
    }

    pub fn power_of_frames(&self, frames: &Matrix) -> Matrix {
        let n_fft = self.cfg.n_fft();
        let mut input = self.fft.make_input_vec();
        let mut spectrum = self.fft.make_output_vec();
        let mut out = Matrix::zeros(frames.rows(), n_fft / 2 + 1);
        for t in 0..frames.rows() {
            input.fill(0.0);
            input[..frames.cols()].copy_from_slice(frames.row(t));
            self.fft
                .process(&mut input, &mut spectrum)
                .expect("fft buffers sized by the plan");
            for (o, c) in out.row_mut(t).iter_mut().zip(&spectrum) {
                *o = c.norm_sqr();
            }
        }
        out
    }

    /// Power spectrogram → mel filterbank → `ln(max(·, floor_eps))`.
    pub fn mel_from_power(&self, power: &Matrix) -> MelSpectrogram {
        let eps = self.cfg.floor_eps;
        let mel = power.matmul_t(&self.filterbank).map(|x| x.max(eps).ln());
        MelSpectrogram { values: mel }
    }

    pub fn mel_spectrogram(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        Ok(self.mel_from_power(&self.power_spectrogram(clip)?))
    }

    /// `T × n_mfcc` orthonormal DCT-II of the log-mel rows.
    pub fn mfcc_from_mel(&self, mel: &MelSpectrogram) -> Matrix {
        mel.values.matmul(&self.dct)
    }

    pub fn mfcc(&self, clip: &AudioClip) -> Result<Matrix> {
        Ok(self.mfcc_from_mel(&self.mel_spectrogram(clip)?))
    }

    pub fn context_mfcc(&self, clip: &AudioClip) -> Result<ContextMfcc> {
        stack_context(&self.mfcc(clip)?, self.cfg.context_left, self.cfg.context_right)
    }

    pub fn prosody(&self, clip: &AudioClip) -> Result<ProsodyFeatures> {
        Ok(prosody(&self.frames(clip, Window::Rectangular)?, self.cfg.floor_eps))
    }

    /// Everything the acoustic model and the converter need from one clip.
    pub fn analyze(&self, clip: &AudioClip) -> Result<Analysis> {
        let mel = self.mel_spectrogram(clip)?;
        let mfcc = self.mfcc_from_mel(&mel);
        let context = stack_context(&mfcc, self.cfg.context_left, self.cfg.context_right)?;
        let prosody = self.prosody(clip)?;
        debug_assert_eq!(prosody.values.rows(), mel.num_frames());
        Ok(Analysis {
            mel,
            context,
            prosody,
        })
    }
}

/// Frame-aligned features of one clip.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub mel: MelSpectrogram,
    pub context: ContextMfcc,
    pub prosody: ProsodyFeatures,
}

/// Row `t` concatenates frames `t-left ..= t+right`, clamping indices to
/// `[0, T-1]`.
pub fn stack_context(mfcc: &Matrix, left: usize, right: usize) -> Result<ContextMfcc> {
    let t = mfcc.rows();
    if t == 0 {
        return Err(Error::Invalid("cannot stack context of an empty sequence".into()));
    }
    let d = mfcc.cols();
    let span = left + 1 + right;
    let mut out = Matrix::zeros(t, span * d);
    for row in 0..t {
        for k in 0..span {
            let src = (row + k).saturating_sub(left).min(t - 1);
            out.row_mut(row)[k * d..(k + 1) * d].copy_from_slice(mfcc.row(src));
        }
    }
    Ok(ContextMfcc { values: out })
}

/// Per-frame `ln(max(Σx², eps))` and zero-crossing rate over *unwindowed* frames.
/// Zero samples count as positive.
pub fn prosody(frames: &FrameMatrix, floor_eps: f64) -> ProsodyFeatures {
    debug_assert_eq!(frames.window, Window::Rectangular, "prosody expects raw frames");
    let m = &frames.frames;
    let mut out = Matrix::zeros(m.rows(), 2);
    for t in 0..m.rows() {
        let (energy, zcr) = frame_energy_zcr(m.row(t), floor_eps);
        out.set(t, 0, energy);
        out.set(t, 1, zcr);
    }
    ProsodyFeatures { values: out }
}

pub fn frame_energy_zcr(frame: &[f64], floor_eps: f64) -> (f64, f64) {
    let energy = frame.iter().map(|x| x * x).sum::<f64>().max(floor_eps).ln();
    let zcr = if frame.len() < 2 {
        0.0
    } else {
        let changes = frame
            .windows(2)
            .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
            .count();
        changes as f64 / (frame.len() - 1) as f64
    };
    (energy, zcr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f64>, sr: u32) -> AudioClip {
        AudioClip::new(samples, sr).unwrap()
    }

    fn tone(freq: f64, secs: f64, sr: u32, amp: f64) -> Vec<f64> {
        let n = (secs * sr as f64) as usize;
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn framing_geometry_at_24k() {
        let c = clip(vec![0.1; 24_000], 24_000);
        let f = frame_signal(&c, 32.0, 10.0, Window::Hann).unwrap();
        assert_eq!((f.win, f.hop), (768, 240));
        // 1 + floor((24000 - 768) / 240)
        assert_eq!(f.num_frames(), 97);
        let exact = clip(vec![0.1; 768], 24_000);
        assert_eq!(frame_signal(&exact, 32.0, 10.0, Window::Hann).unwrap().num_frames(), 1);
        let short = clip(vec![0.1; 767], 24_000);
        assert!(matches!(
            frame_signal(&short, 32.0, 10.0, Window::Hann),
            Err(Error::TooShort { len: 767, win: 768 })
        ));
    }

    #[test]
    fn frames_match_direct_slices() {
        let samples: Vec<f64> = (0..3000).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
        let c = clip(samples.clone(), 16_000);
        let f = frame_signal(&c, 32.0, 10.0, Window::Hann).unwrap();
        let (win, hop) = (512, 160);
        for t in 0..f.num_frames() {
            for n in 0..win {
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos();
                assert_eq!(f.frames.get(t, n), samples[t * hop + n] * w);
            }
        }
    }

    #[test]
    fn trim_exact_zero_edges() {
        let sr = 16_000;
        let mut s = vec![0.0; sr as usize / 2];
        let body = tone(440.0, 1.0, sr, 0.5);
        s.extend(&body);
        s.extend(vec![0.0; sr as usize / 2]);
        let trimmed = trim_silence(&clip(s, sr), -40.0, 25.0).unwrap();
        let frame = 400;
        assert!((trimmed.len() as i64 - body.len() as i64).abs() <= frame);
    }

    #[test]
    fn trim_without_quiet_edges_is_identity() {
        let c = clip(tone(300.0, 0.5, 16_000, 0.3), 16_000);
        // A sine frame never drops 40 dB below the loudest frame.
        let out = trim_silence(&c, -40.0, 25.0).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn trim_rejects_silence() {
        let c = clip(vec![0.0; 1000], 16_000);
        assert!(matches!(trim_silence(&c, -40.0, 25.0), Err(Error::AllSilent)));
        assert!(trim_silence(&c, 3.0, 25.0).is_err());
    }

    #[test]
    fn trim_ramp_matches_frame_scan() {
        let n = 16_000;
        let s: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let c = clip(s.clone(), 16_000);
        let out = trim_silence(&c, -30.0, 25.0).unwrap();
        // Brute force: RMS of every 400-sample frame, first above peak·10^(-1.5).
        let frame = 400;
        let rms: Vec<f64> = (0..n / frame)
            .map(|f| {
                let e: f64 = (f * frame..(f + 1) * frame).map(|i| s[i] * s[i]).sum();
                (e / frame as f64).sqrt()
            })
            .collect();
        let peak = rms.iter().cloned().fold(0.0, f64::max);
        let first = rms.iter().position(|&r| r >= peak * 10f64.powf(-1.5)).unwrap();
        assert_eq!(out.len(), n - first * frame);
        assert_eq!(out.samples[0], s[first * frame]);
    }

    #[test]
    fn silent_mel_is_floor() {
        let fe = FrontEnd::new(&FeatureConfig::default()).unwrap();
        let mel = fe.mel_spectrogram(&clip(vec![0.0; 4800], 24_000)).unwrap();
        assert_eq!(mel.n_mels(), 80);
        assert!(mel.values.data().iter().all(|&v| v == 1e-10f64.ln()));
    }

    #[test]
    fn sine_at_filter_centre_peaks_there() {
        let cfg = FeatureConfig::default();
        let fe = FrontEnd::new(&cfg).unwrap();
        let edges = mel_band_edges(cfg.sample_rate, cfg.n_mels);
        for m in [20usize, 40, 60, 75] {
            let centre = edges[m + 1];
            let mel = fe.mel_spectrogram(&clip(tone(centre, 0.3, 24_000, 0.5), 24_000)).unwrap();
            for t in 1..mel.num_frames() - 1 {
                assert_eq!(mel.values.argmax_row(t), m, "filter {m}, frame {t}");
            }
        }
    }

    #[test]
    fn mfcc_of_constant_mel_is_c0_only() {
        let fe = FrontEnd::new(&FeatureConfig::default()).unwrap();
        let mel = MelSpectrogram {
            values: Matrix::filled(3, 80, -2.5),
        };
        let c = fe.mfcc_from_mel(&mel);
        assert_eq!(c.cols(), 40);
        for t in 0..3 {
            assert!((c.get(t, 0) - (-2.5 * 80f64.sqrt())).abs() < 1e-9);
            for k in 1..40 {
                assert!(c.get(t, k).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn context_edges_replicate() {
        let single = Matrix::from_fn(1, 40, |_, c| c as f64);
        let s = stack_context(&single, 7, 7).unwrap();
        assert_eq!(s.values.shape(), (1, 600));
        for k in 0..15 {
            assert_eq!(&s.values.row(0)[k * 40..(k + 1) * 40], single.row(0));
        }
        let constant = Matrix::filled(9, 40, 1.25);
        let s = stack_context(&constant, 7, 7).unwrap();
        assert!(s.values.data().iter().all(|&v| v == 1.25));
        assert!(stack_context(&Matrix::zeros(0, 40), 7, 7).is_err());
    }

    #[test]
    fn prosody_definitions() {
        let f = frame_samples(&[1.0, -1.0, 1.0, -1.0], 4, 4, Window::Rectangular).unwrap();
        let p = prosody(&f, 1e-10);
        assert_eq!(p.values.get(0, 1), 1.0);
        let f = frame_samples(&[1.0, 1.0, 1.0, 1.0], 4, 4, Window::Rectangular).unwrap();
        let p = prosody(&f, 1e-10);
        assert_eq!(p.values.get(0, 1), 0.0);
        assert!((p.values.get(0, 0) - 4f64.ln()).abs() < 1e-12);
        let f = frame_samples(&[0.0, -0.5, 0.0, 0.0], 4, 4, Window::Rectangular).unwrap();
        // zeros count as positive: + - + + → 2 changes out of 3
        assert!((prosody(&f, 1e-10).values.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn frame_counts_agree_across_streams() {
        let fe = FrontEnd::new(&FeatureConfig::default()).unwrap();
        for len in [768usize, 1000, 5000, 24_017] {
            let s: Vec<f64> = (0..len).map(|i| ((i * 13) % 17) as f64 / 17.0 - 0.5).collect();
            let a = fe.analyze(&clip(s, 24_000)).unwrap();
            let t = a.mel.num_frames();
            assert_eq!(a.context.values.rows(), t);
            assert_eq!(a.prosody.values.rows(), t);
            assert_eq!(Some(t), fe.config().frame_count(len));
        }
    }

    #[test]
    fn sample_rate_mismatch_is_rejected() {
        let fe = FrontEnd::new(&FeatureConfig::default()).unwrap();
        assert!(matches!(
            fe.mel_spectrogram(&clip(vec![0.0; 2000], 16_000)),
            Err(Error::SampleRate { expected: 24_000, found: 16_000 })
        ));
    }
}
