//! Stage-wise training, enrollment, conversion and evaluation driven by a
//! manifest and a checkpoint directory.
//!
//! Training and evaluation read audio untrimmed so frame labels stay
//! aligned; `convert` trims leading and trailing silence first.

use crate::acoustic::{append_columns, collapse_repeats, levenshtein, AcousticModel, FeatureMode};
use crate::audio::{load_audio, save_audio, AudioClip, ChannelPolicy};
use crate::checkpoint::{file_sha256, Checkpoint};
use crate::config::PipelineConfig;
use crate::conversion::{ConversionItem, ConversionModel};
use crate::error::{Error, Result};
use crate::features::{Analysis, FrontEnd};
use crate::manifest::{load_labels, DatasetManifest, ManifestRecord};
use crate::nn::Normalizer;
use crate::speaker::{enroll_speaker, equal_error_rate, SpeakerEmbedding, SpeakerEncoder};
use crate::vocoder::{griffin_lim, output_length, FlowVocoder, VocoderItem};
use clvc_autograd::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Am,
    Se,
    Cm,
    Voc,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Am, Stage::Se, Stage::Cm, Stage::Voc];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Am => "am",
            Stage::Se => "se",
            Stage::Cm => "cm",
            Stage::Voc => "voc",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.ckpt", self.as_str())
    }

    fn rng_salt(self) -> u64 {
        match self {
            Stage::Am => 0x61_6d,
            Stage::Se => 0x73_65,
            Stage::Cm => 0x63_6d,
            Stage::Voc => 0x76_6f_63,
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown stage `{s}` (am, se, cm, voc)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocoderKind {
    Gl,
    Flow,
}

impl VocoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VocoderKind::Gl => "gl",
            VocoderKind::Flow => "flow",
        }
    }
}

impl FromStr for VocoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gl" => Ok(VocoderKind::Gl),
            "flow" => Ok(VocoderKind::Flow),
            _ => Err(Error::Invalid(format!("unknown vocoder `{s}` (gl, flow)"))),
        }
    }
}

/// Conventional file names inside one checkpoint directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointDir {
    pub root: PathBuf,
}

impl CheckpointDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.file_name())
    }

    pub fn speakers(&self) -> PathBuf {
        self.root.join("speakers.json")
    }
}

/// Exclusive writer lock on a path, held as `<path>.lock` until dropped.
#[derive(Debug)]
pub struct PathLock {
    path: PathBuf,
}

impl PathLock {
    pub fn acquire(target: &Path) -> Result<Self> {
        let path = suffixed(target, ".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Invalid(format!(
                "{} is being written by another process (remove {} if stale)",
                target.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for PathLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// `path` with `suffix` appended to its file name.
pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn metrics_path(checkpoint: &Path) -> PathBuf {
    suffixed(checkpoint, ".metrics.tsv")
}

/// Seed for a named item, independent of how many other names exist.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (stage.rng_salt() << 32))
}

/// One manifest record with its audio and front-end analysis.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub record: ManifestRecord,
    pub clip: AudioClip,
    pub analysis: Analysis,
    pub labels: Option<Vec<usize>>,
}

/// Loads and analyzes every record in parallel; order follows the manifest.
pub fn load_corpus(manifest: &DatasetManifest, front_end: &FrontEnd, trim: bool) -> Result<Vec<Utterance>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let clip = load_audio(&manifest.audio_path(r), ChannelPolicy::Reject)?;
            front_end.config().check_rate(&clip)?;
            let clip = if trim { front_end.trim(&clip)? } else { clip };
            let analysis = front_end.analyze(&clip)?;
            let labels = manifest.labels_path(r).map(|p| load_labels(&p)).transpose()?;
            Ok(Utterance {
                record: r.clone(),
                clip,
                analysis,
                labels,
            })
        })
        .collect()
}

/// Phonetic features of `mode` plus the two prosody columns.
pub fn content_features(am: &AcousticModel, analysis: &Analysis, mode: FeatureMode) -> Result<Matrix> {
    let out = am.forward(&analysis.context.values)?;
    Ok(append_columns(&out.select(mode).values, &analysis.prosody.values))
}

fn chunk<R: Rng>(len: usize, max: usize, rng: &mut R) -> (usize, usize) {
    let n = max.min(len);
    (rng.gen_range(0..=len - n), n)
}

fn fit_normalizer<'a>(data: impl IntoIterator<Item = &'a Matrix>, what: &str) -> Result<Normalizer> {
    let mut norm = Normalizer::fit(data).ok_or_else(|| Error::InsufficientData(format!("no frames to fit the {what} normalizer")))?;
    norm.round_to_f32();
    Ok(norm)
}

fn metadata(stage: Stage, config: &PipelineConfig, seed: u64, extra: Vec<(&str, Value)>) -> Value {
    let mut m = json!({
        "stage": stage.as_str(),
        "seed": seed,
        "config": config.to_value(),
    });
    let obj = m.as_object_mut().expect("object literal");
    for (k, v) in extra {
        obj.insert(k.to_string(), v);
    }
    m
}

/// Per-step training log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl MetricsLog {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, step: usize, values: Vec<f64>) {
        if step % 50 == 0 {
            log::info!("step {step}: {values:?}");
        }
        self.rows.push((step, values));
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step");
        for c in &self.columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (step, values) in &self.rows {
            let _ = write!(out, "{step}");
            for v in values {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Invalid("empty metrics log".into()))?;
        let columns: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines {
            let mut cells = line.split('\t');
            let bad = || Error::Invalid(format!("bad metrics line `{line}`"));
            let step = cells.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let values = cells.map(|c| c.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
            rows.push((step, values));
        }
        Ok(Self { columns, rows })
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.rows.last().map(|(_, v)| v.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions<'a> {
    pub config: &'a PipelineConfig,
    pub manifest: &'a DatasetManifest,
    pub seed: u64,
    /// Feature tap for the conversion stage.
    pub mode: FeatureMode,
    pub checkpoints: &'a CheckpointDir,
    /// Overrides the stage's default checkpoint path.
    pub out: Option<PathBuf>,
    /// Vocoder checkpoint to fine-tune from.
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub log: MetricsLog,
}

/// Runs one stage's training loop and writes its checkpoint and metrics log.
pub fn train_stage(stage: Stage, opts: &TrainOptions) -> Result<TrainSummary> {
    opts.config.validate()?;
    let out = opts.out.clone().unwrap_or_else(|| opts.checkpoints.path(stage));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let _lock = PathLock::acquire(&out)?;
    let (ckpt, log) = match stage {
        Stage::Am => train_am(opts)?,
        Stage::Se => train_se(opts)?,
        Stage::Cm => train_cm(opts)?,
        Stage::Voc => train_voc(opts)?,
    };
    ckpt.save(&out)?;
    let metrics = metrics_path(&out);
    std::fs::write(&metrics, log.to_tsv()).map_err(|e| Error::io(&metrics, e))?;
    Ok(TrainSummary {
        checkpoint: out,
        metrics,
        log,
    })
}

fn train_am(opts: &TrainOptions) -> Result<(Checkpoint, MetricsLog)> {
    let cfg = opts.config;
    let fe = FrontEnd::new(&cfg.features)?;
    let corpus = load_corpus(opts.manifest, &fe, false)?;
    let mut data = Vec::with_capacity(corpus.len());
    for u in &corpus {
        let x = &u.analysis.context.values;
        let labels = u.labels.as_ref().ok_or_else(|| {
            Error::Invalid(format!("{}: acoustic-model training needs frame labels", u.record.audio_path.display()))
        })?;
        if labels.len() != x.rows() {
            return Err(Error::Shape(format!(
                "{}: {} frame labels for {} frames",
                u.record.audio_path.display(),
                labels.len(),
                x.rows()
            )));
        }
        data.push((x, labels));
    }
    if data.is_empty() {
        return Err(Error::InsufficientData("no labelled utterances".into()));
    }
    let mut model = AcousticModel::new(cfg.acoustic.clone(), opts.seed)?;
    model.normalizer = fit_normalizer(data.iter().map(|(x, _)| *x), "acoustic")?;
    let mut opt = model.optimizer();
    let mut rng = stage_rng(opts.seed, Stage::Am);
    let mut log = MetricsLog::new(&["loss"]);
    for step in 0..cfg.training.am_steps {
        let batch: Vec<(Matrix, Vec<usize>)> = (0..cfg.training.am_batch)
            .map(|_| {
                let (x, labels) = data[rng.gen_range(0..data.len())];
                let (s, n) = chunk(x.rows(), cfg.training.am_chunk_frames, &mut rng);
                (x.slice_rows(s, n), labels[s..s + n].to_vec())
            })
            .collect();
        let loss = model.train_step(&batch, &mut opt, step)?;
        log.push(step, vec![loss]);
    }
    let mut ckpt = Checkpoint::new(Stage::Am.as_str(), metadata(Stage::Am, cfg, opts.seed, vec![]));
    ckpt.push_store("param/", &model.store);
    ckpt.push_matrix("norm", &model.normalizer.to_matrix());
    Ok((ckpt, log))
}

fn train_se(opts: &TrainOptions) -> Result<(Checkpoint, MetricsLog)> {
    let cfg = opts.config;
    let sc = &cfg.speaker;
    let fe = FrontEnd::new(&cfg.features)?;
    let corpus = load_corpus(opts.manifest, &fe, false)?;
    let mut by_speaker: BTreeMap<&str, Vec<&Matrix>> = BTreeMap::new();
    for u in &corpus {
        let mel = &u.analysis.mel.values;
        if mel.rows() >= sc.train_frames {
            by_speaker.entry(u.record.speaker_id.as_str()).or_default().push(mel);
        }
    }
    let pools: Vec<&Vec<&Matrix>> = by_speaker.values().collect();
    if pools.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "speaker-encoder training needs 2 speakers with utterances of at least {} frames",
            sc.train_frames
        )));
    }
    let mut model = SpeakerEncoder::new(sc.clone(), opts.seed)?;
    model.normalizer = fit_normalizer(corpus.iter().map(|u| &u.analysis.mel.values), "speaker")?;
    let mut opt = model.optimizer();
    let mut rng = stage_rng(opts.seed, Stage::Se);
    let n = sc.speakers_per_batch.min(pools.len());
    let mut log = MetricsLog::new(&["loss"]);
    for step in 0..cfg.training.se_steps {
        let chosen = rand::seq::index::sample(&mut rng, pools.len(), n).into_vec();
        let windows: Vec<Vec<Matrix>> = chosen
            .iter()
            .map(|&k| {
                (0..sc.utterances_per_speaker)
                    .map(|_| {
                        let mel = pools[k][rng.gen_range(0..pools[k].len())];
                        let (s, len) = chunk(mel.rows(), sc.train_frames, &mut rng);
                        mel.slice_rows(s, len)
                    })
                    .collect()
            })
            .collect();
        let loss = model.train_step(&windows, &mut opt, step)?;
        log.push(step, vec![loss]);
    }
    let mut ckpt = Checkpoint::new(Stage::Se.as_str(), metadata(Stage::Se, cfg, opts.seed, vec![]));
    ckpt.push_store("param/", &model.store);
    ckpt.push_matrix("norm", &model.normalizer.to_matrix());
    Ok((ckpt, log))
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Prerequisite(format!(
            "{} checkpoint {} not found; run `clvc train-{}` first",
            stage.as_str(),
            path.display(),
            stage.as_str()
        )))
    }
}

/// Aggregate embeddings per speaker, enrolled from `corpus` audio.
fn enroll_corpus(corpus: &[Utterance], se: &SpeakerEncoder, fe: &FrontEnd, seed: u64) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let mut clips: BTreeMap<&str, Vec<AudioClip>> = BTreeMap::new();
    for u in corpus {
        clips.entry(u.record.speaker_id.as_str()).or_default().push(u.clip.clone());
    }
    clips
        .into_par_iter()
        .map(|(id, clips)| {
            let set = enroll_speaker(id, &clips, se, fe, name_seed(seed, id))?;
            Ok((id.to_string(), set.aggregate))
        })
        .collect()
}

fn train_cm(opts: &TrainOptions) -> Result<(Checkpoint, MetricsLog)> {
    let am_path = opts.checkpoints.path(Stage::Am);
    let se_path = opts.checkpoints.path(Stage::Se);
    require(&am_path, Stage::Am)?;
    require(&se_path, Stage::Se)?;
    let (am, am_cfg) = load_acoustic(&am_path)?;
    let (se, _) = load_speaker_encoder(&se_path)?;
    let cfg = opts.config.for_mode(opts.mode);
    if am_cfg.features != cfg.features {
        return Err(Error::Invalid("acoustic checkpoint was trained with different feature settings".into()));
    }
    let fe = FrontEnd::new(&cfg.features)?;
    let corpus = load_corpus(opts.manifest, &fe, false)?;
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty manifest".into()));
    }
    let speakers = enroll_corpus(&corpus, &se, &fe, opts.seed)?;
    let contents = corpus
        .par_iter()
        .map(|u| content_features(&am, &u.analysis, opts.mode))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<ConversionItem> = corpus
        .iter()
        .zip(contents)
        .map(|(u, content)| ConversionItem {
            content,
            speaker: speakers[&u.record.speaker_id].clone(),
            target: u.analysis.mel.values.clone(),
        })
        .collect();
    let mut model = ConversionModel::new(cfg.conversion.clone(), opts.seed)?;
    model.content_norm = fit_normalizer(items.iter().map(|i| &i.content), "content")?;
    model.mel_norm = fit_normalizer(items.iter().map(|i| &i.target), "mel")?;
    let mut opt = model.optimizer();
    let mut rng = stage_rng(opts.seed, Stage::Cm);
    let mut log = MetricsLog::new(&["loss_pre", "loss_post"]);
    for step in 0..cfg.training.cm_steps {
        let batch: Vec<ConversionItem> = (0..cfg.training.cm_batch)
            .map(|_| {
                let item = &items[rng.gen_range(0..items.len())];
                let (s, n) = chunk(item.content.rows(), cfg.training.cm_chunk_frames, &mut rng);
                ConversionItem {
                    content: item.content.slice_rows(s, n),
                    speaker: item.speaker.clone(),
                    target: item.target.slice_rows(s, n),
                }
            })
            .collect();
        let (pre, post) = model.train_step(&batch, &mut opt, step, name_seed(opts.seed, &step.to_string()))?;
        log.push(step, vec![pre, post]);
    }
    let extra = vec![
        ("mode", json!(opts.mode.as_str())),
        ("am_sha256", json!(file_sha256(&am_path)?)),
        ("se_sha256", json!(file_sha256(&se_path)?)),
    ];
    let mut ckpt = Checkpoint::new(Stage::Cm.as_str(), metadata(Stage::Cm, &cfg, opts.seed, extra));
    ckpt.push_store("param/", &model.store);
    ckpt.push_matrix("content_norm", &model.content_norm.to_matrix());
    ckpt.push_matrix("mel_norm", &model.mel_norm.to_matrix());
    Ok((ckpt, log))
}

fn train_voc(opts: &TrainOptions) -> Result<(Checkpoint, MetricsLog)> {
    let cfg = opts.config;
    let fe = FrontEnd::new(&cfg.features)?;
    let corpus = load_corpus(opts.manifest, &fe, false)?;
    let mut extra = Vec::new();
    let mut model = match &opts.init {
        Some(init) => {
            require(init, Stage::Voc)?;
            extra.push(("init_sha256", json!(file_sha256(init)?)));
            load_vocoder(init)?.0
        }
        None => {
            let mut m = FlowVocoder::new(cfg.vocoder.clone(), opts.seed)?;
            m.mel_norm = fit_normalizer(corpus.iter().map(|u| &u.analysis.mel.values), "vocoder mel")?;
            m
        }
    };
    let vc = model.config.clone();
    let seg = vc.segment_frames;
    let len = output_length(seg, vc.win, vc.hop);
    let pool: Vec<&Utterance> = corpus.iter().filter(|u| u.analysis.mel.num_frames() >= seg).collect();
    if pool.is_empty() {
        return Err(Error::InsufficientData(format!("no utterance spans {seg} frames")));
    }
    let mut opt = model.optimizer();
    let mut rng = stage_rng(opts.seed, Stage::Voc);
    let mut log = MetricsLog::new(&["nll"]);
    for step in 0..cfg.training.voc_steps {
        let batch: Vec<VocoderItem> = (0..cfg.training.voc_batch)
            .map(|_| {
                let u = pool[rng.gen_range(0..pool.len())];
                let s = rng.gen_range(0..=u.analysis.mel.num_frames() - seg);
                VocoderItem {
                    audio: u.clip.samples[s * vc.hop..s * vc.hop + len].to_vec(),
                    mel: u.analysis.mel.values.slice_rows(s, seg),
                }
            })
            .collect();
        let nll = model.train_step(&batch, &mut opt, step)?;
        log.push(step, vec![nll]);
    }
    let mut echo = cfg.clone();
    echo.vocoder = vc;
    let mut ckpt = Checkpoint::new(Stage::Voc.as_str(), metadata(Stage::Voc, &echo, opts.seed, extra));
    ckpt.push_store("param/", &model.store);
    ckpt.push_store("buffer/", &model.buffers);
    ckpt.push_matrix("mel_norm", &model.mel_norm.to_matrix());
    Ok((ckpt, log))
}

/// Loads a checkpoint, checks its stage and returns the echoed config.
pub fn load_stage(path: &Path, stage: Stage) -> Result<(Checkpoint, PipelineConfig)> {
    require(path, stage)?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.expect_stage(stage.as_str())?;
    let cfg: PipelineConfig = serde_json::from_value(ckpt.metadata["config"].clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: config: {e}", path.display())))?;
    cfg.validate()?;
    Ok((ckpt, cfg))
}

fn normalizer(ckpt: &Checkpoint, name: &str) -> Result<Normalizer> {
    Normalizer::from_matrix(&ckpt.matrix(name)?).ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` is not 2 x dim")))
}

pub fn load_acoustic(path: &Path) -> Result<(AcousticModel, PipelineConfig)> {
    let (ckpt, cfg) = load_stage(path, Stage::Am)?;
    let model = AcousticModel::from_store(cfg.acoustic.clone(), ckpt.store("param/")?, normalizer(&ckpt, "norm")?)?;
    Ok((model, cfg))
}

pub fn load_speaker_encoder(path: &Path) -> Result<(SpeakerEncoder, PipelineConfig)> {
    let (ckpt, cfg) = load_stage(path, Stage::Se)?;
    let model = SpeakerEncoder::from_store(cfg.speaker.clone(), ckpt.store("param/")?, normalizer(&ckpt, "norm")?)?;
    Ok((model, cfg))
}

pub fn load_conversion(path: &Path) -> Result<(ConversionModel, PipelineConfig, FeatureMode)> {
    let (ckpt, cfg) = load_stage(path, Stage::Cm)?;
    let mode: FeatureMode = ckpt.metadata["mode"]
        .as_str()
        .ok_or_else(|| Error::CorruptCheckpoint("conversion checkpoint has no mode".into()))?
        .parse()?;
    let model = ConversionModel::from_store(
        cfg.conversion.clone(),
        ckpt.store("param/")?,
        normalizer(&ckpt, "content_norm")?,
        normalizer(&ckpt, "mel_norm")?,
    )?;
    Ok((model, cfg, mode))
}

pub fn load_vocoder(path: &Path) -> Result<(FlowVocoder, PipelineConfig)> {
    let (ckpt, cfg) = load_stage(path, Stage::Voc)?;
    let model = FlowVocoder::from_parts(
        cfg.vocoder.clone(),
        ckpt.store("param/")?,
        ckpt.store("buffer/")?,
        normalizer(&ckpt, "mel_norm")?,
    )?;
    Ok((model, cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrolledSpeaker {
    pub language: String,
    /// Sample offsets of the embedded segments in the concatenated audio.
    pub offsets: Vec<usize>,
    pub embedding: Vec<f64>,
}

/// Enrolled target speakers, stored as `speakers.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTable {
    pub encoder_sha256: String,
    pub seed: u64,
    pub speakers: BTreeMap<String, EnrolledSpeaker>,
}

impl SpeakerTable {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Prerequisite(format!("{} not found; run `clvc enroll` first", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn embedding(&self, id: &str) -> Result<SpeakerEmbedding> {
        let s = self.speakers.get(id).ok_or_else(|| Error::UnknownSpeaker(id.to_string()))?;
        Ok(SpeakerEmbedding {
            vector: s.embedding.clone(),
        })
    }
}

/// Enrolls every manifest speaker from trimmed audio and writes the table.
pub fn enroll(manifest: &DatasetManifest, checkpoints: &CheckpointDir, seed: u64, out: Option<&Path>) -> Result<SpeakerTable> {
    let se_path = checkpoints.path(Stage::Se);
    let (se, cfg) = load_speaker_encoder(&se_path)?;
    let fe = FrontEnd::new(&cfg.features)?;
    let corpus = load_corpus(manifest, &fe, true)?;
    let mut grouped: BTreeMap<&str, (String, Vec<AudioClip>)> = BTreeMap::new();
    for u in &corpus {
        grouped
            .entry(u.record.speaker_id.as_str())
            .or_insert_with(|| (u.record.language.clone(), Vec::new()))
            .1
            .push(u.clip.clone());
    }
    let speakers = grouped
        .into_par_iter()
        .map(|(id, (language, clips))| {
            let set = enroll_speaker(id, &clips, &se, &fe, name_seed(seed, id))?;
            Ok((
                id.to_string(),
                EnrolledSpeaker {
                    language,
                    offsets: set.offsets,
                    embedding: set.aggregate.vector,
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let table = SpeakerTable {
        encoder_sha256: file_sha256(&se_path)?,
        seed,
        speakers,
    };
    let path = out.map_or_else(|| checkpoints.speakers(), Path::to_path_buf);
    let _lock = PathLock::acquire(&path)?;
    table.save(&path)?;
    Ok(table)
}

#[derive(Clone, Debug)]
pub struct ConvertRequest {
    pub source: PathBuf,
    pub target_speaker: String,
    pub mode: FeatureMode,
    pub vocoder: VocoderKind,
    pub seed: u64,
    pub out: PathBuf,
    /// Conversion checkpoint to use instead of the directory's `cm.ckpt`.
    pub cm: Option<PathBuf>,
}

/// Provenance written next to each converted WAV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertSidecar {
    pub source: PathBuf,
    pub target_speaker: String,
    pub mode: String,
    pub vocoder: String,
    pub seed: u64,
    pub frames: usize,
    pub samples: usize,
    pub sample_rate: u32,
    /// SHA-256 of every checkpoint file used, keyed by stage.
    pub checkpoints: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct ConvertOutcome {
    pub audio: AudioClip,
    pub mel: Matrix,
    pub sidecar: ConvertSidecar,
    pub sidecar_path: PathBuf,
}

fn mode_guard(content: &Matrix, mode: FeatureMode, cm: &ConversionModel, cm_mode: FeatureMode) -> Result<()> {
    if content.cols() != cm.config.content_dim {
        return Err(Error::Shape(format!(
            "{} features have {} columns but the conversion model was trained on {} features with {} columns",
            mode.as_str(),
            content.cols(),
            cm_mode.as_str(),
            cm.config.content_dim
        )));
    }
    Ok(())
}

/// trim → analysis → phonetic + prosody → conversion → vocoder → WAV.
pub fn convert(checkpoints: &CheckpointDir, req: &ConvertRequest) -> Result<ConvertOutcome> {
    let am_path = checkpoints.path(Stage::Am);
    let cm_path = req.cm.clone().unwrap_or_else(|| checkpoints.path(Stage::Cm));
    let (am, am_cfg) = load_acoustic(&am_path)?;
    let (cm, cm_cfg, cm_mode) = load_conversion(&cm_path)?;
    let table = SpeakerTable::load(&checkpoints.speakers())?;
    let speaker = table.embedding(&req.target_speaker)?;

    let fe = FrontEnd::new(&am_cfg.features)?;
    let clip = load_audio(&req.source, ChannelPolicy::Reject)?;
    let clip = fe.trim(&clip)?;
    let analysis = fe.analyze(&clip)?;
    let content = content_features(&am, &analysis, req.mode)?;
    mode_guard(&content, req.mode, &cm, cm_mode)?;
    let converted = cm.convert(&content, &speaker, req.seed)?;

    let mut hashes = BTreeMap::new();
    hashes.insert(Stage::Am.as_str().to_string(), file_sha256(&am_path)?);
    hashes.insert(Stage::Cm.as_str().to_string(), file_sha256(&cm_path)?);
    hashes.insert("speakers".to_string(), file_sha256(&checkpoints.speakers())?);
    let audio = match req.vocoder {
        VocoderKind::Gl => griffin_lim(&converted.mel, &cm_cfg.features, cm_cfg.griffin_lim_iters)?,
        VocoderKind::Flow => {
            let voc_path = checkpoints.path(Stage::Voc);
            let (voc, voc_cfg) = load_vocoder(&voc_path)?;
            hashes.insert(Stage::Voc.as_str().to_string(), file_sha256(&voc_path)?);
            voc.synthesize(&converted.mel, voc_cfg.vocoder.sigma_synth, req.seed, voc_cfg.features.sample_rate)?
        }
    };
    if let Some(parent) = req.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_audio(&req.out, &audio)?;
    let sidecar = ConvertSidecar {
        source: req.source.clone(),
        target_speaker: req.target_speaker.clone(),
        mode: req.mode.as_str().to_string(),
        vocoder: req.vocoder.as_str().to_string(),
        seed: req.seed,
        frames: converted.mel.num_frames(),
        samples: audio.len(),
        sample_rate: audio.sample_rate,
        checkpoints: hashes,
    };
    let sidecar_path = suffixed(&req.out, ".json");
    let text = serde_json::to_string_pretty(&sidecar)? + "\n";
    std::fs::write(&sidecar_path, text).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(ConvertOutcome {
        audio,
        mel: converted.mel.values,
        sidecar,
        sidecar_path,
    })
}

/// Writes one `features` checkpoint (mel, context, prosody) per record.
pub fn extract_features(config: &PipelineConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let fe = FrontEnd::new(&config.features)?;
    let corpus = load_corpus(manifest, &fe, false)?;
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let stem = u.record.audio_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let path = out_dir.join(format!("{i:05}_{stem}.feat"));
            let meta = json!({
                "audio_path": u.record.audio_path,
                "speaker_id": u.record.speaker_id,
                "language": u.record.language,
                "features": serde_json::to_value(&config.features)?,
            });
            let mut ckpt = Checkpoint::new("features", meta);
            ckpt.push_matrix("mel", &u.analysis.mel.values);
            ckpt.push_matrix("context", &u.analysis.context.values);
            ckpt.push_matrix("prosody", &u.analysis.prosody.values);
            ckpt.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Aggregated results for one (source language, target speaker) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub source_language: String,
    pub target_speaker: String,
    pub count: usize,
    /// Mean cosine between the converted speech's d-vector and the target's
    /// enrolled d-vector; absent when no output was long enough to embed.
    pub mean_speaker_cosine: Option<f64>,
    pub window_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeDump {
    pub audio_path: PathBuf,
    pub predicted: Vec<usize>,
    pub reference: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialDump {
    pub audio_path: PathBuf,
    pub enrolled_speaker: String,
    pub score: f64,
    pub same_speaker: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelErrorDump {
    pub audio_path: PathBuf,
    /// Squared-error sums in standardized log-mel units.
    pub teacher_forced_sse: f64,
    pub free_running_sse: f64,
    pub elements: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDump {
    pub audio_path: PathBuf,
    pub source_language: String,
    pub target_speaker: String,
    pub speaker_cosine: Option<f64>,
    pub window_violations: usize,
}

/// Everything the report's numbers are computed from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalIntermediates {
    pub phonemes: Vec<PhonemeDump>,
    pub trials: Vec<TrialDump>,
    pub mel_errors: Vec<MelErrorDump>,
    pub pairs: Vec<PairDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    /// Corpus-level phoneme error rate on repeat-collapsed label sequences.
    pub per: Option<f64>,
    pub eer: Option<f64>,
    pub teacher_forced_mse: Option<f64>,
    pub free_running_mse: Option<f64>,
    pub window_violations: usize,
    pub pairs: Vec<PairSummary>,
    pub intermediates: EvalIntermediates,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Corpus-level PER: total edits over total collapsed reference length.
pub fn corpus_per(dumps: &[PhonemeDump]) -> Option<f64> {
    let (mut edits, mut len) = (0usize, 0usize);
    for d in dumps {
        let p = collapse_repeats(&d.predicted);
        let r = collapse_repeats(&d.reference);
        edits += levenshtein(&p, &r);
        len += r.len();
    }
    (len > 0).then(|| edits as f64 / len as f64)
}

fn summarize_pairs(dumps: &[PairDump]) -> Vec<PairSummary> {
    let mut groups: BTreeMap<(&str, &str), Vec<&PairDump>> = BTreeMap::new();
    for d in dumps {
        groups.entry((&d.source_language, &d.target_speaker)).or_default().push(d);
    }
    groups
        .into_iter()
        .map(|((lang, spk), ds)| {
            let cos: Vec<f64> = ds.iter().filter_map(|d| d.speaker_cosine).collect();
            PairSummary {
                source_language: lang.to_string(),
                target_speaker: spk.to_string(),
                count: ds.len(),
                mean_speaker_cosine: (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64),
                window_violations: ds.iter().map(|d| d.window_violations).sum(),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub mode: FeatureMode,
    pub seed: u64,
    pub cm: Option<PathBuf>,
}

struct UtteranceEval {
    phonemes: Option<PhonemeDump>,
    trials: Vec<TrialDump>,
    mel_error: Option<MelErrorDump>,
    pairs: Vec<PairDump>,
    violations: usize,
}

/// Computes every report field over the manifest. Metrics without enough
/// data are `None`, never zero.
pub fn evaluate(manifest: &DatasetManifest, checkpoints: &CheckpointDir, req: &EvalRequest) -> Result<EvalReport> {
    let cm_path = req.cm.clone().unwrap_or_else(|| checkpoints.path(Stage::Cm));
    let (am, am_cfg) = load_acoustic(&checkpoints.path(Stage::Am))?;
    let (se, _) = load_speaker_encoder(&checkpoints.path(Stage::Se))?;
    let (cm, _, cm_mode) = load_conversion(&cm_path)?;
    let fe = FrontEnd::new(&am_cfg.features)?;
    let corpus = load_corpus(manifest, &fe, false)?;
    let enrolled: BTreeMap<String, SpeakerEmbedding> = if checkpoints.speakers().is_file() {
        let table = SpeakerTable::load(&checkpoints.speakers())?;
        table
            .speakers
            .keys()
            .map(|id| Ok((id.clone(), table.embedding(id)?)))
            .collect::<Result<_>>()?
    } else {
        enroll_corpus(&corpus, &se, &fe, req.seed)?
    };
    let (wl, wr) = (cm.config.window_left, cm.config.window_right);

    let per_utt = corpus
        .par_iter()
        .map(|u| -> Result<UtteranceEval> {
            let path = u.record.audio_path.clone();
            let out = am.forward(&u.analysis.context.values)?;
            let phonemes = match &u.labels {
                Some(labels) if !labels.is_empty() => Some(PhonemeDump {
                    audio_path: path.clone(),
                    predicted: out.predicted_labels(),
                    reference: labels.clone(),
                }),
                _ => None,
            };
            let mel = &u.analysis.mel.values;
            let mut trials = Vec::new();
            if mel.rows() >= se.config.min_frames {
                let emb = se.embed_matrix(mel)?;
                for (id, agg) in &enrolled {
                    trials.push(TrialDump {
                        audio_path: path.clone(),
                        enrolled_speaker: id.clone(),
                        score: emb.cosine(agg),
                        same_speaker: *id == u.record.speaker_id,
                    });
                }
            }
            let content = append_columns(&out.select(req.mode).values, &u.analysis.prosody.values);
            mode_guard(&content, req.mode, &cm, cm_mode)?;
            let mut mel_error = None;
            let mut pairs = Vec::new();
            let mut violations = 0;
            let target_norm = cm.mel_norm.apply(mel);
            for (id, spk) in &enrolled {
                let conv = cm.convert(&content, spk, req.seed)?;
                let v: usize = conv.alignments.iter().map(|a| a.violations(wl, wr)).sum();
                violations += v;
                if *id == u.record.speaker_id {
                    let (_, tf) = cm.teacher_forced_loss(
                        &ConversionItem {
                            content: content.clone(),
                            speaker: spk.clone(),
                            target: mel.clone(),
                        },
                        req.seed,
                    )?;
                    let fr = cm.mel_norm.apply(&conv.mel.values);
                    let sse: f64 = fr.data().iter().zip(target_norm.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                    let elements = mel.rows() * mel.cols();
                    mel_error = Some(MelErrorDump {
                        audio_path: path.clone(),
                        teacher_forced_sse: tf * elements as f64,
                        free_running_sse: sse,
                        elements,
                    });
                }
                let speaker_cosine = if conv.mel.num_frames() >= se.config.min_frames {
                    Some(se.embed(&conv.mel)?.cosine(spk))
                } else {
                    None
                };
                pairs.push(PairDump {
                    audio_path: path.clone(),
                    source_language: u.record.language.clone(),
                    target_speaker: id.clone(),
                    speaker_cosine,
                    window_violations: v,
                });
            }
            Ok(UtteranceEval {
                phonemes,
                trials,
                mel_error,
                pairs,
                violations,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut inter = EvalIntermediates::default();
    let mut window_violations = 0;
    for e in per_utt {
        inter.phonemes.extend(e.phonemes);
        inter.trials.extend(e.trials);
        inter.mel_errors.extend(e.mel_error);
        inter.pairs.extend(e.pairs);
        window_violations += e.violations;
    }
    let scores: Vec<f64> = inter.trials.iter().map(|t| t.score).collect();
    let labels: Vec<bool> = inter.trials.iter().map(|t| t.same_speaker).collect();
    let eer = match equal_error_rate(&scores, &labels) {
        Ok(e) => Some(e),
        Err(Error::InsufficientData(_)) | Err(Error::Shape(_)) => None,
        Err(e) => return Err(e),
    };
    let elements: usize = inter.mel_errors.iter().map(|m| m.elements).sum();
    let mse = |f: fn(&MelErrorDump) -> f64| (elements > 0).then(|| inter.mel_errors.iter().map(f).sum::<f64>() / elements as f64);
    Ok(EvalReport {
        mode: req.mode.as_str().to_string(),
        per: corpus_per(&inter.phonemes),
        eer,
        teacher_forced_mse: mse(|m| m.teacher_forced_sse),
        free_running_mse: mse(|m| m.free_running_sse),
        window_violations,
        pairs: summarize_pairs(&inter.pairs),
        intermediates: inter,
    })
}
