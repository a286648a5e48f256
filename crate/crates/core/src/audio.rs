//! Mono PCM clips and 16-bit WAV I/O.

use crate::error::{Error, Result};
use std::path::Path;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// What to do with multi-channel input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    #[default]
    Reject,
    FirstChannel,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("audio contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples per `ms` milliseconds, rounded to nearest.
    pub fn ms_to_samples(&self, ms: f64) -> usize {
        ms_to_samples(ms, self.sample_rate)
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

pub fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Reads a 16-bit PCM WAV. Samples are scaled by `1/32768`.
pub fn load_audio(path: &Path, channels: ChannelPolicy) -> Result<AudioClip> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: expected 16-bit integer PCM, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let n_channels = spec.channels as usize;
    if n_channels > 1 && channels == ChannelPolicy::Reject {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {} channels; mono required (or select the first channel)",
            path.display(),
            n_channels
        )));
    }
    let raw = reader.samples::<i16>().collect::<std::result::Result<Vec<_>, _>>()?;
    let samples: Vec<f64> = raw
        .iter()
        .step_by(n_channels.max(1))
        .map(|&s| s as f64 / 32768.0)
        .collect();
    if samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    AudioClip::new(samples, spec.sample_rate)
}

/// Quantizes to int16, clamping to the representable range.
pub fn to_i16(samples: &[f64]) -> Vec<i16> {
    samples
        .iter()
        .map(|&x| (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect()
}

pub fn save_audio(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in to_i16(&clip.samples) {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}
