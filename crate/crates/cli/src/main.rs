use clap::{Args, Parser, Subcommand, ValueEnum};
use clvc_core::acoustic::FeatureMode;
use clvc_core::config::PipelineConfig;
use clvc_core::manifest::{load_manifest, DatasetManifest};
use clvc_core::pipeline::{self, CheckpointDir, ConvertRequest, EvalRequest, Stage, TrainOptions, VocoderKind};
use clvc_core::toy::{generate_corpus, ToyCorpusConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "clvc", version, about = "Transcription-free cross-lingual voice conversion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline configuration (JSON). Defaults to the built-in full-size settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset manifest (JSON Lines).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Mode::Mppg)]
    mode: Mode,
    #[arg(long, global = true, value_enum, default_value_t = Vocoder::Gl)]
    vocoder: Vocoder,
    /// Output path; meaning depends on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding am.ckpt, se.ckpt, cm.ckpt, voc.ckpt and speakers.json.
    #[arg(long, global = true, default_value = "checkpoints")]
    checkpoints: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Mppg,
    Dpf,
}

impl From<Mode> for FeatureMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Mppg => FeatureMode::Mppg,
            Mode::Dpf => FeatureMode::Dpf,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Vocoder {
    Gl,
    Flow,
}

impl From<Vocoder> for VocoderKind {
    fn from(v: Vocoder) -> Self {
        match v {
            Vocoder::Gl => VocoderKind::Gl,
            Vocoder::Flow => VocoderKind::Flow,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write mel, context-MFCC and prosody tensors per utterance into --out (a directory).
    Features,
    /// Train the acoustic model.
    TrainAm,
    /// Train the speaker encoder.
    TrainSe,
    /// Train the conversion model for --mode (needs am.ckpt and se.ckpt).
    TrainCm,
    /// Train the flow vocoder.
    TrainVoc {
        /// Vocoder checkpoint to fine-tune from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Enroll every manifest speaker into speakers.json.
    Enroll,
    /// Convert one utterance to a target speaker's voice.
    Convert {
        source: PathBuf,
        target_speaker: String,
        /// Conversion checkpoint to use instead of <checkpoints>/cm.ckpt.
        #[arg(long)]
        cm: Option<PathBuf>,
    },
    /// Compute the evaluation report over the manifest.
    Evaluate {
        #[arg(long)]
        cm: Option<PathBuf>,
    },
    /// Generate the synthetic corpus into a directory.
    ToyCorpus {
        dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 4)]
        utterances: usize,
    },
    /// Print a configuration document.
    Config {
        /// Small settings sized for the synthetic corpus.
        #[arg(long)]
        toy: bool,
    },
}

fn config(common: &Common) -> clvc_core::Result<PipelineConfig> {
    match &common.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn manifest(common: &Common) -> clvc_core::Result<DatasetManifest> {
    let path = common
        .manifest
        .as_deref()
        .ok_or_else(|| clvc_core::Error::Invalid("--manifest is required for this command".into()))?;
    load_manifest(path)
}

fn train(common: &Common, stage: Stage, init: Option<PathBuf>) -> clvc_core::Result<()> {
    let cfg = config(common)?;
    let manifest = manifest(common)?;
    let dir = CheckpointDir::new(&common.checkpoints);
    let summary = pipeline::train_stage(
        stage,
        &TrainOptions {
            config: &cfg,
            manifest: &manifest,
            seed: common.seed,
            mode: common.mode.into(),
            checkpoints: &dir,
            out: common.out.clone(),
            init,
        },
    )?;
    println!(
        "{}: wrote {} ({} steps, last {:?})",
        stage.as_str(),
        summary.checkpoint.display(),
        summary.log.rows.len(),
        summary.log.last().unwrap_or(&[])
    );
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> clvc_core::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| clvc_core::Error::Invalid(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> clvc_core::Result<()> {
    let c = &cli.common;
    let dir = CheckpointDir::new(&c.checkpoints);
    match cli.command {
        Command::Features => {
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("features"));
            let files = pipeline::extract_features(&config(c)?, &manifest(c)?, &out)?;
            println!("wrote {} feature files to {}", files.len(), out.display());
        }
        Command::TrainAm => train(c, Stage::Am, None)?,
        Command::TrainSe => train(c, Stage::Se, None)?,
        Command::TrainCm => train(c, Stage::Cm, None)?,
        Command::TrainVoc { init } => train(c, Stage::Voc, init)?,
        Command::Enroll => {
            let table = pipeline::enroll(&manifest(c)?, &dir, c.seed, c.out.as_deref())?;
            println!("enrolled {} speakers", table.speakers.len());
        }
        Command::Convert {
            source,
            target_speaker,
            cm,
        } => {
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("converted.wav"));
            let outcome = pipeline::convert(
                &dir,
                &ConvertRequest {
                    source,
                    target_speaker,
                    mode: c.mode.into(),
                    vocoder: c.vocoder.into(),
                    seed: c.seed,
                    out: out.clone(),
                    cm,
                },
            )?;
            println!(
                "wrote {} ({} frames, {} samples)",
                out.display(),
                outcome.sidecar.frames,
                outcome.sidecar.samples
            );
        }
        Command::Evaluate { cm } => {
            let report = pipeline::evaluate(
                &manifest(c)?,
                &dir,
                &EvalRequest {
                    mode: c.mode.into(),
                    seed: c.seed,
                    cm,
                },
            )?;
            match &c.out {
                Some(p) => report.save(p)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            log::info!(
                "PER {:?} EER {:?} TF {:?} FR {:?} violations {}",
                report.per,
                report.eer,
                report.teacher_forced_mse,
                report.free_running_mse,
                report.window_violations
            );
        }
        Command::ToyCorpus {
            dir,
            speakers,
            utterances,
        } => {
            let cfg = config(c)?;
            let toy = ToyCorpusConfig {
                sample_rate: cfg.features.sample_rate,
                n_speakers: speakers,
                utterances_per_speaker: utterances,
                ..ToyCorpusConfig::default()
            };
            let path = generate_corpus(&dir, &toy, &cfg.features, c.seed)?;
            println!("wrote {}", path.display());
        }
        Command::Config { toy } => {
            let cfg = if toy { PipelineConfig::toy() } else { config(c)? };
            write_or_print(c.out.as_deref(), &(cfg.to_json()? + "\n"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
