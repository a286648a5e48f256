//! Synthetic corpora for desk-scale training and tests.
//!
//! Speakers differ in F0, formant scaling and spectral tilt; phonemes are
//! formant patterns on a harmonic source. Frame labels come from the
//! phoneme active at each analysis frame centre.

use crate::audio::{save_audio, AudioClip};
use crate::conversion::ConversionItem;
use crate::error::{Error, Result};
use crate::features::{frame_count, FeatureConfig};
use crate::manifest::{DatasetManifest, ManifestRecord};
use crate::speaker::SpeakerEmbedding;
use clvc_autograd::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

const LANGUAGES: [&str; 4] = ["en", "fi", "de", "zh"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyVoice {
    pub speaker_id: String,
    pub language: String,
    pub f0: f64,
    pub formant_scale: f64,
    pub tilt: f64,
}

impl ToyVoice {
    /// Voice `k` of a corpus; neighbouring voices differ in every parameter.
    pub fn numbered(k: usize) -> Self {
        Self {
            speaker_id: format!("spk{k}"),
            language: LANGUAGES[k % LANGUAGES.len()].to_string(),
            f0: 95.0 + 47.0 * (k % 5) as f64,
            formant_scale: 0.82 + 0.09 * (k % 4) as f64,
            tilt: 0.6 + 0.35 * ((k * 3) % 4) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub sample_rate: u32,
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub n_phonemes: usize,
    pub segments_per_utterance: usize,
    pub min_segment_ms: f64,
    pub max_segment_ms: f64,
    pub peak: f64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            n_speakers: 4,
            utterances_per_speaker: 4,
            n_phonemes: 6,
            segments_per_utterance: 8,
            min_segment_ms: 80.0,
            max_segment_ms: 160.0,
            peak: 0.5,
        }
    }
}

/// Formant frequencies (Hz) of phoneme `p`.
pub fn phoneme_formants(p: usize) -> [f64; 3] {
    const TABLE: [[f64; 3]; 8] = [
        [300.0, 2300.0, 3000.0],
        [700.0, 1200.0, 2600.0],
        [400.0, 800.0, 2500.0],
        [550.0, 1800.0, 2700.0],
        [800.0, 1500.0, 2900.0],
        [350.0, 1400.0, 2300.0],
        [650.0, 2000.0, 3200.0],
        [450.0, 1000.0, 2800.0],
    ];
    if p < TABLE.len() {
        TABLE[p]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
        [
            rng.gen_range(250.0..900.0),
            rng.gen_range(900.0..2400.0),
            rng.gen_range(2400.0..3400.0),
        ]
    }
}

fn harmonic_amplitudes(voice: &ToyVoice, phoneme: usize, f0: f64, n: usize) -> Vec<f64> {
    let formants = phoneme_formants(phoneme);
    (1..=n)
        .map(|h| {
            let f = h as f64 * f0;
            let env: f64 = formants
                .iter()
                .enumerate()
                .map(|(i, &fm)| {
                    let centre = fm * voice.formant_scale;
                    let bw = 60.0 + 0.08 * centre;
                    let gain = [1.0, 0.6, 0.3][i];
                    gain / (1.0 + ((f - centre) / bw).powi(2))
                })
                .sum();
            env * (h as f64).powf(-voice.tilt) + 1e-3
        })
        .collect()
}

/// Renders `segments` of `(phoneme, samples)`; returns the waveform and the
/// phoneme active at every sample.
pub fn synthesize(voice: &ToyVoice, segments: &[(usize, usize)], sample_rate: u32, peak: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let sr = sample_rate as f64;
    let total: usize = segments.iter().map(|s| s.1).sum();
    let n_harm = ((0.45 * sr) / (voice.f0 * 1.1)).floor().max(1.0) as usize;
    let fade = (0.005 * sr) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let amps: Vec<Vec<f64>> = segments
        .iter()
        .map(|&(p, _)| harmonic_amplitudes(voice, p, voice.f0, n_harm))
        .collect();
    let mut out = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (s, &(p, len)) in segments.iter().enumerate() {
        for i in 0..len {
            let t = out.len() as f64 / sr;
            let f0 = voice.f0 * (1.0 + 0.03 * (2.0 * PI * 4.0 * t).sin());
            // Crossfade into the next segment's envelope over its last `fade` samples.
            let mix = if s + 1 < segments.len() && i + fade >= len {
                (i + fade - len) as f64 / fade as f64 * 0.5
            } else if s > 0 && i < fade {
                0.5 - i as f64 / fade as f64 * 0.5
            } else {
                0.0
            };
            let other = if s + 1 < segments.len() && i + fade >= len {
                &amps[s + 1]
            } else if s > 0 && i < fade {
                &amps[s - 1]
            } else {
                &amps[s]
            };
            let mut v = 0.0;
            for (h, ph) in phases.iter_mut().enumerate() {
                let a = (1.0 - mix) * amps[s][h] + mix * other[h];
                v += a * ph.sin();
                *ph += 2.0 * PI * f0 * (h + 1) as f64 / sr;
                if *ph > 2.0 * PI {
                    *ph -= 2.0 * PI;
                }
            }
            let noise: f64 = rng.sample(StandardNormal);
            out.push(v + 1e-4 * noise);
            labels.push(p);
        }
    }
    let max = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for v in &mut out {
        *v *= peak / max;
    }
    (out, labels)
}

/// Label of each analysis frame: the phoneme at the frame centre.
pub fn frame_labels(sample_labels: &[usize], win: usize, hop: usize) -> Vec<usize> {
    let t = frame_count(sample_labels.len(), win, hop).unwrap_or(0);
    (0..t).map(|f| sample_labels[f * hop + win / 2]).collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: Vec<String> = labels.iter().map(usize::to_string).collect();
    std::fs::write(path, text.join(" ") + "\n").map_err(|e| Error::io(path, e))
}

/// Writes WAVs, frame-label files and `manifest.jsonl` under `dir`; returns
/// the manifest path.
pub fn generate_corpus(dir: &Path, cfg: &ToyCorpusConfig, features: &FeatureConfig, seed: u64) -> Result<PathBuf> {
    if cfg.n_phonemes == 0 || cfg.segments_per_utterance == 0 || cfg.min_segment_ms > cfg.max_segment_ms {
        return Err(Error::Invalid("toy corpus needs phonemes and segments".into()));
    }
    if cfg.sample_rate != features.sample_rate {
        return Err(Error::SampleRate {
            expected: features.sample_rate,
            found: cfg.sample_rate,
        });
    }
    for sub in ["wav", "labels"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = cfg.sample_rate as f64;
    let mut records = Vec::new();
    for k in 0..cfg.n_speakers {
        let voice = ToyVoice::numbered(k);
        for u in 0..cfg.utterances_per_speaker {
            let segments: Vec<(usize, usize)> = (0..cfg.segments_per_utterance)
                .map(|_| {
                    let ms = rng.gen_range(cfg.min_segment_ms..=cfg.max_segment_ms);
                    (rng.gen_range(0..cfg.n_phonemes), (ms / 1000.0 * sr) as usize)
                })
                .collect();
            let (samples, sample_labels) = synthesize(&voice, &segments, cfg.sample_rate, cfg.peak, rng.gen());
            let labels = frame_labels(&sample_labels, features.win_samples(), features.hop_samples());
            let stem = format!("{}_{u:02}", voice.speaker_id);
            let wav = PathBuf::from("wav").join(format!("{stem}.wav"));
            let lab = PathBuf::from("labels").join(format!("{stem}.txt"));
            save_audio(&dir.join(&wav), &AudioClip::new(samples, cfg.sample_rate)?)?;
            write_labels(&dir.join(&lab), &labels)?;
            records.push(ManifestRecord {
                audio_path: wav,
                speaker_id: voice.speaker_id.clone(),
                language: voice.language.clone(),
                frame_labels_path: Some(lab),
            });
        }
    }
    let path = dir.join("manifest.jsonl");
    DatasetManifest {
        root: dir.to_path_buf(),
        records,
    }
    .write(&path)?;
    Ok(path)
}

/// Linearly separable labelled frames: class means drawn once, unit-free
/// noise added per frame, labels in contiguous runs.
pub fn separable_frames(
    n_classes: usize,
    dim: usize,
    utterances: usize,
    frames: usize,
    noise: f64,
    seed: u64,
) -> Vec<(Matrix, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    (0..utterances)
        .map(|_| {
            let mut labels = Vec::with_capacity(frames);
            while labels.len() < frames {
                let class = rng.gen_range(0..n_classes);
                let run = rng.gen_range(3..10).min(frames - labels.len());
                labels.extend(std::iter::repeat_n(class, run));
            }
            let x = Matrix::from_fn(frames, dim, |t, d| {
                let e: f64 = rng.sample(StandardNormal);
                means[labels[t]][d] + noise * e
            });
            (x, labels)
        })
        .collect()
}

/// Two-or-more-speaker conversion set: content rows are slow sinusoids and
/// the target mel is a fixed linear map of the content plus a per-speaker
/// offset.
pub fn conversion_set(
    n_speakers: usize,
    utterances_per_speaker: usize,
    frames: usize,
    content_dim: usize,
    mel_dim: usize,
    speaker_dim: usize,
    seed: u64,
) -> Result<Vec<ConversionItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = Matrix::from_fn(content_dim, mel_dim, |_, _| {
        let e: f64 = rng.sample(StandardNormal);
        e / (content_dim as f64).sqrt()
    });
    let mut items = Vec::new();
    for s in 0..n_speakers {
        let speaker = SpeakerEmbedding::from_unnormalized(
            (0..speaker_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        )?;
        let offset: Vec<f64> = (0..mel_dim)
            .map(|k| 0.8 * (2.0 * PI * (k as f64 / mel_dim as f64 + s as f64 * 0.37)).sin())
            .collect();
        for _ in 0..utterances_per_speaker {
            let periods: Vec<f64> = (0..content_dim).map(|_| rng.gen_range(20.0..60.0)).collect();
            let phases: Vec<f64> = (0..content_dim).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let content = Matrix::from_fn(frames, content_dim, |t, d| (2.0 * PI * t as f64 / periods[d] + phases[d]).sin());
            let mut target = content.matmul(&mix);
            for t in 0..frames {
                for (v, o) in target.row_mut(t).iter_mut().zip(&offset) {
                    *v += o;
                }
            }
            items.push(ConversionItem {
                content,
                speaker: speaker.clone(),
                target,
            });
        }
    }
    Ok(items)
}

/// Sine tone of `secs` seconds.
pub fn tone(freq: f64, secs: f64, sample_rate: u32, amplitude: f64) -> Vec<f64> {
    let n = (secs * sample_rate as f64).round() as usize;
    (0..n)
        .map(|i| amplitude * (2.0 * PI * freq * i as f64 / sample_rate as f64).sin())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_labels_follow_centres() {
        let samples = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        assert_eq!(frame_labels(&samples, 4, 2), vec![0, 1, 2, 2]);
    }

    #[test]
    fn synthesis_is_seeded_and_normalized() {
        let v = ToyVoice::numbered(1);
        let seg = [(0, 2400), (3, 1200)];
        let (a, la) = synthesize(&v, &seg, 24_000, 0.5, 9);
        let (b, _) = synthesize(&v, &seg, 24_000, 0.5, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3600);
        assert_eq!(la[2399], 0);
        assert_eq!(la[2400], 3);
        let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-12);
    }

    #[test]
    fn separable_runs_cover_frames() {
        let set = separable_frames(5, 7, 3, 40, 0.1, 1);
        assert_eq!(set.len(), 3);
        for (x, l) in &set {
            assert_eq!(x.shape(), (40, 7));
            assert_eq!(l.len(), 40);
            assert!(l.iter().all(|&c| c < 5));
        }
    }
}
