//! Pipeline configuration: one JSON document covering every stage.

use crate::acoustic::{AcousticModelConfig, FeatureMode};
use crate::conversion::ConversionConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::speaker::SpeakerEncoderConfig;
use crate::vocoder::{output_length, FlowConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub am_steps: usize,
    pub am_batch: usize,
    pub am_chunk_frames: usize,
    pub se_steps: usize,
    pub cm_steps: usize,
    pub cm_batch: usize,
    pub cm_chunk_frames: usize,
    pub voc_steps: usize,
    pub voc_batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            am_steps: 20_000,
            am_batch: 8,
            am_chunk_frames: 400,
            se_steps: 20_000,
            cm_steps: 20_000,
            cm_batch: 8,
            cm_chunk_frames: 400,
            voc_steps: 20_000,
            voc_batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub features: FeatureConfig,
    pub acoustic: AcousticModelConfig,
    pub speaker: SpeakerEncoderConfig,
    pub conversion: ConversionConfig,
    pub vocoder: FlowConfig,
    pub training: TrainingConfig,
    pub griffin_lim_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            acoustic: AcousticModelConfig::default(),
            speaker: SpeakerEncoderConfig::default(),
            conversion: ConversionConfig::default(),
            vocoder: FlowConfig::default(),
            training: TrainingConfig::default(),
            griffin_lim_iters: 60,
        }
    }
}

impl PipelineConfig {
    /// Small models and short schedules for the synthetic corpus.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.acoustic.num_layers = 1;
        c.acoustic.hidden_per_direction = 512;
        c.speaker = SpeakerEncoderConfig {
            num_layers: 1,
            hidden: 64,
            min_frames: 40,
            train_frames: 40,
            speakers_per_batch: 4,
            utterances_per_speaker: 4,
            learning_rate: 3e-3,
            segment_secs: 0.5,
            ..SpeakerEncoderConfig::default()
        };
        c.conversion = ConversionConfig {
            encoder_conv_layers: 1,
            encoder_dim: 32,
            attention_dim: 16,
            location_filters: 8,
            prenet_dims: vec![32, 32],
            attention_rnn_dim: 64,
            decoder_dim: 64,
            postnet_layers: 3,
            postnet_dim: 32,
            learning_rate: 2e-3,
            ..ConversionConfig::default()
        };
        c.vocoder.segment_frames = 8;
        c.training = TrainingConfig {
            am_steps: 12,
            am_batch: 2,
            am_chunk_frames: 48,
            se_steps: 30,
            cm_steps: 30,
            cm_batch: 4,
            cm_chunk_frames: 48,
            voc_steps: 20,
            voc_batch: 2,
        };
        c.conversion.content_dim = c.content_dim(FeatureMode::Mppg);
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Converter input width for `mode`: phonetic columns plus two prosody columns.
    pub fn content_dim(&self, mode: FeatureMode) -> usize {
        2 + match mode {
            FeatureMode::Mppg => self.acoustic.num_phonemes,
            FeatureMode::Dpf => self.acoustic.dpf_dim(),
        }
    }

    /// Copy whose converter consumes `mode` features. Nothing else changes.
    pub fn for_mode(&self, mode: FeatureMode) -> Self {
        let mut c = self.clone();
        c.conversion.content_dim = self.content_dim(mode);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.acoustic.validate()?;
        self.conversion.validate()?;
        self.vocoder.validate()?;
        let f = &self.features;
        let bad = |what: &str| Err(Error::Invalid(format!("config: {what}")));
        if self.acoustic.input_dim != f.context_dim() {
            return bad("acoustic.input_dim must equal the stacked MFCC width");
        }
        if self.speaker.n_mels != f.n_mels || self.conversion.mel_dim != f.n_mels || self.vocoder.mel_dim != f.n_mels {
            return bad("speaker, conversion and vocoder mel widths must equal features.n_mels");
        }
        if self.conversion.speaker_dim != self.speaker.embedding_dim {
            return bad("conversion.speaker_dim must equal speaker.embedding_dim");
        }
        if self.vocoder.hop != f.hop_samples() || self.vocoder.win != f.win_samples() {
            return bad("vocoder hop/win must match the feature framing");
        }
        let seg = output_length(self.vocoder.segment_frames, self.vocoder.win, self.vocoder.hop);
        if seg % self.vocoder.squeeze_group != 0 {
            return bad("vocoder segment length must be a multiple of squeeze_group");
        }
        if self.speaker.train_frames < self.speaker.min_frames {
            return bad("speaker.train_frames below speaker.min_frames");
        }
        let t = &self.training;
        if t.am_batch == 0 || t.cm_batch == 0 || t.voc_batch == 0 || t.am_chunk_frames == 0 || t.cm_chunk_frames == 0 {
            return bad("batch sizes and chunk lengths must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_toy_validate() {
        PipelineConfig::default().validate().unwrap();
        PipelineConfig::toy().validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = PipelineConfig::toy();
        assert_eq!(PipelineConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        let partial = PipelineConfig::from_json(r#"{"griffin_lim_iters": 10}"#).unwrap();
        assert_eq!(partial.griffin_lim_iters, 10);
        assert!(PipelineConfig::from_json(r#"{"nonsense": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"conversion": {"mel_dim": 40}}"#).is_err());
    }

    #[test]
    fn mode_changes_only_content_dim() {
        let c = PipelineConfig::toy();
        let a = c.for_mode(FeatureMode::Mppg);
        let b = c.for_mode(FeatureMode::Dpf);
        assert_eq!(a.conversion.content_dim, 72);
        assert_eq!(b.conversion.content_dim, 1026);
        let mut b2 = b.clone();
        b2.conversion.content_dim = 72;
        assert_eq!(a, b2);
    }
}
