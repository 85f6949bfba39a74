//! Experiment harness: data synthesis, training, generation, loss
//! profiling, and evaluation, driven by a JSON config with flag overrides.
//!
//! Exit codes: 0 success, 2 validation error, 3 artifact incompatibility,
//! 1 internal error. Every command validates its inputs before producing
//! any artifact.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datagen::{self, DatasetHeader, PairSample, PairSpec};
use crate::diffusion::{Denoiser, Modality};
use crate::error::{Error, Result};
use crate::jointmodel::{
    load_checkpoint, train, AdamState, BranchConfig, GuidanceWeights, InjectMode, JointModel,
    JointModelConfig, LossOpts, SaveOpts, ScheduleParams, TrainOpts,
};
use crate::metrics::{
    av_align_modified, detect_motion_peaks, detect_onsets, moment_distance, DEFAULT_MATCH_WINDOW,
    DEFAULT_PEAK_THRESHOLD,
};
use crate::numerics::Rng;
use crate::schedule::{profile_loss, TimestepMap};

pub const CONFIG_VERSION: u32 = 1;

// ---- config file -----------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub schedules: Option<SchedulesSection>,
    #[serde(default)]
    pub timestep_map: Option<MapSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub generate: Option<GenerateSection>,
    #[serde(default)]
    pub paths: Option<PathsSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_frames: usize,
    pub video_dim: usize,
    pub audio_frames: usize,
    pub audio_dim: usize,
    pub max_events: usize,
    pub jitter: f64,
    pub n_labels: usize,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_inject_sites: usize,
    pub inject_mode: InjectMode,
    pub label_dim: usize,
    pub time_dim: usize,
    pub connector_hidden: usize,
    pub connector_out: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulesSection {
    pub video: ScheduleParams,
    pub audio: ScheduleParams,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSection {
    pub t_global: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub save_every: usize,
    #[serde(default)]
    pub freeze_core_after: Option<usize>,
    #[serde(default = "default_self_cond_prob")]
    pub self_cond_prob: f64,
    #[serde(default = "default_label_drop_prob")]
    pub label_drop_prob: f64,
}

fn default_self_cond_prob() -> f64 {
    0.5
}

fn default_label_drop_prob() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub n_samples: usize,
    pub guidance_v: f64,
    pub guidance_a: f64,
    pub seed: u64,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub t_steps: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub loss_csv: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if cfg.version != CONFIG_VERSION {
        return Err(Error::Config(format!(
            "{}: config version {} unsupported (expected {CONFIG_VERSION})",
            path.display(),
            cfg.version
        )));
    }
    Ok(cfg)
}

fn need<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| Error::Config(format!("config section '{name}' is required")))
}

impl DataSection {
    fn template(&self, seed_override: Option<u64>) -> PairSpec {
        PairSpec {
            n_frames: self.n_frames,
            video_dim: self.video_dim,
            audio_frames: self.audio_frames,
            audio_dim: self.audio_dim,
            n_events: self.max_events,
            jitter: self.jitter,
            label: 0,
            seed: seed_override.unwrap_or(self.seed),
        }
    }
}

fn model_config(data: &DataSection, model: &ModelSection, mode: InjectMode) -> JointModelConfig {
    JointModelConfig {
        video: BranchConfig {
            modality: Modality::Video,
            frames: data.n_frames,
            latent_dim: data.video_dim,
            hidden_dim: model.hidden_dim,
            n_layers: model.n_layers,
            n_inject_sites: model.n_inject_sites,
        },
        audio: BranchConfig {
            modality: Modality::Audio,
            frames: data.audio_frames,
            latent_dim: data.audio_dim,
            hidden_dim: model.hidden_dim,
            n_layers: model.n_layers,
            n_inject_sites: model.n_inject_sites,
        },
        inject_mode: mode,
        n_labels: data.n_labels,
        label_dim: model.label_dim,
        time_dim: model.time_dim,
        connector_hidden: model.connector_hidden,
        connector_out: model.connector_out,
    }
}

// ---- command line ----------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "avjoint",
    version,
    about = "Joint audio-video latent diffusion toy harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a paired dataset from the config's data section.
    MakeData {
        #[arg(long)]
        config: PathBuf,
        /// Override the data seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output path (default: paths.dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the joint model on an existing dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the injection mode (cmc_pe | cross_attention).
        #[arg(long)]
        inject_mode: Option<String>,
        /// Override the dataset path.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Resume from a checkpoint, continuing its epoch numbering.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the number of epochs to run.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate paired samples from a checkpoint and score them.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Timestep-adjustment strength (default: checkpoint's, 1.5).
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Video guidance strength (default 7.5).
        #[arg(long)]
        guidance_v: Option<f64>,
        /// Audio guidance strength (default 2.5).
        #[arg(long)]
        guidance_a: Option<f64>,
        /// Fix the class label (default: cycle through all labels).
        #[arg(long)]
        label: Option<usize>,
        /// Number of global steps (default: checkpoint's, 25).
        #[arg(long)]
        t_steps: Option<usize>,
        /// Match window for the automatic alignment metrics.
        #[arg(long)]
        window: Option<usize>,
        /// Relative detection threshold for the automatic metrics.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Profile per-modality noise-prediction loss over global timesteps.
    ProfileLoss {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_bins: Option<usize>,
        #[arg(long)]
        samples_per_bin: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score an existing sample file (alignment metrics, optional
    /// distribution distance against a reference dataset).
    Eval {
        #[arg(long)]
        samples: PathBuf,
        /// Reference dataset for the moment distance.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Write the JSON report here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Data(_) => 2,
        Error::Incompat(_) => 3,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::MakeData { config, seed, out } => cmd_make_data(&config, seed, out),
        Command::Train {
            config,
            seed,
            inject_mode,
            dataset,
            resume,
            epochs,
        } => cmd_train(&config, seed, inject_mode, dataset, resume, epochs),
        Command::Generate {
            checkpoint,
            out_dir,
            n_samples,
            gamma,
            seed,
            guidance_v,
            guidance_a,
            label,
            t_steps,
            window,
            threshold,
        } => cmd_generate(GenerateArgs {
            checkpoint,
            out_dir,
            n_samples,
            gamma,
            seed,
            guidance_v,
            guidance_a,
            label,
            t_steps,
            window,
            threshold,
        }),
        Command::ProfileLoss {
            checkpoint,
            dataset,
            out,
            n_bins,
            samples_per_bin,
            gamma,
            seed,
        } => cmd_profile_loss(&checkpoint, &dataset, &out, n_bins, samples_per_bin, gamma, seed),
        Command::Eval {
            samples,
            reference,
            window,
            threshold,
            out,
        } => cmd_eval(&samples, reference.as_deref(), window, threshold, out.as_deref()),
    }
}

// ---- commands --------------------------------------------------------------

fn cmd_make_data(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let data = need(&cfg.data, "data")?;
    let out_path = match out {
        Some(p) => p,
        None => need(&cfg.paths, "paths")?.dataset.clone(),
    };
    let template = data.template(seed);
    template.validate()?;
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let header = datagen::make_dataset(&template, data.n_samples, data.n_labels, &out_path)?;
    let summary = serde_json::json!({
        "dataset": out_path.display().to_string(),
        "n_samples": header.n_samples,
        "n_frames": header.n_frames,
        "video_dim": header.video_dim,
        "audio_frames": header.audio_frames,
        "audio_dim": header.audio_dim,
        "n_labels": header.n_labels,
        "seed": header.seed,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    inject_mode: Option<String>,
    dataset_override: Option<PathBuf>,
    resume: Option<PathBuf>,
    epochs_override: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let data = need(&cfg.data, "data")?;
    let model_sec = need(&cfg.model, "model")?;
    let schedules = need(&cfg.schedules, "schedules")?;
    let map_sec = need(&cfg.timestep_map, "timestep_map")?;
    let train_sec = need(&cfg.train, "train")?;
    let paths = need(&cfg.paths, "paths")?;

    let mode = match inject_mode {
        Some(s) => s.parse()?,
        None => model_sec.inject_mode,
    };
    let dataset_path = dataset_override.unwrap_or_else(|| paths.dataset.clone());
    if !dataset_path.exists() {
        return Err(Error::Config(format!(
            "dataset not found: {}",
            dataset_path.display()
        )));
    }
    let (header, samples) = datagen::load_dataset(&dataset_path)?;
    if samples.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if header.n_frames != data.n_frames
        || header.video_dim != data.video_dim
        || header.audio_frames != data.audio_frames
        || header.audio_dim != data.audio_dim
    {
        return Err(Error::Incompat(format!(
            "dataset dims do not match config (dataset {}x{} / {}x{})",
            header.n_frames, header.video_dim, header.audio_frames, header.audio_dim
        )));
    }

    let train_seed = seed.unwrap_or(train_sec.seed);
    let (model, start_epoch, adam): (JointModel, usize, Option<AdamState>) = match resume {
        Some(ckpt_path) => {
            let (model, meta, adam) = load_checkpoint(&ckpt_path)?;
            log::info!(
                "resuming from {} at epoch {}",
                ckpt_path.display(),
                meta.epochs_trained
            );
            (model, meta.epochs_trained + 1, adam)
        }
        None => {
            let jcfg = model_config(data, model_sec, mode);
            let sched_v = schedules.video.build()?;
            let sched_a = schedules.audio.build()?;
            let mut init_rng = Rng::new(train_seed).derive(0x1217);
            (
                JointModel::new(jcfg, sched_v, sched_a, &mut init_rng)?,
                1,
                None,
            )
        }
    };

    let opts = TrainOpts {
        lr: train_sec.lr,
        batch_size: train_sec.batch_size,
        epochs: epochs_override.unwrap_or(train_sec.epochs),
        seed: train_seed,
        loss: LossOpts {
            self_cond_prob: train_sec.self_cond_prob,
            label_drop_prob: train_sec.label_drop_prob,
        },
        freeze_core_after: train_sec.freeze_core_after,
        save: Some(SaveOpts {
            dir: paths.checkpoint_dir.clone(),
            every: train_sec.save_every,
        }),
        start_epoch,
        t_global_default: map_sec.t_global,
        gamma_default: map_sec.gamma,
    };
    let (report, _) = train(&model, &samples, &opts, adam)?;

    let loss_csv_path = paths
        .loss_csv
        .clone()
        .unwrap_or_else(|| paths.checkpoint_dir.join("loss.csv"));
    if let Some(dir) = loss_csv_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(&loss_csv_path, report.loss_csv()).map_err(|e| Error::io(&loss_csv_path, e))?;

    let summary = serde_json::json!({
        "param_count": report.param_count,
        "epochs": report.epoch_losses.len(),
        "first_epoch_loss": report.epoch_losses.first().map(|(_, l)| *l),
        "final_epoch_loss": report.epoch_losses.last().map(|(_, l)| *l),
        "checkpoint": report.latest_checkpoint.as_ref().map(|p| p.display().to_string()),
        "loss_csv": loss_csv_path.display().to_string(),
    });
    println!("{summary}");
    Ok(())
}

struct GenerateArgs {
    checkpoint: PathBuf,
    out_dir: PathBuf,
    n_samples: Option<usize>,
    gamma: Option<f64>,
    seed: Option<u64>,
    guidance_v: Option<f64>,
    guidance_a: Option<f64>,
    label: Option<usize>,
    t_steps: Option<usize>,
    window: Option<usize>,
    threshold: Option<f64>,
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let (model, meta, _) = load_checkpoint(&args.checkpoint)?;
    if meta.epochs_trained == 0 {
        return Err(Error::Config(
            "checkpoint has no training epochs; refusing to generate".into(),
        ));
    }
    let n_samples = args.n_samples.unwrap_or(16);
    if n_samples == 0 {
        return Err(Error::Config("generate: n_samples must be >= 1".into()));
    }
    let gamma = args.gamma.unwrap_or(meta.gamma_default);
    let t_steps = args.t_steps.unwrap_or(meta.t_global_default);
    let guidance = GuidanceWeights {
        video: args.guidance_v.unwrap_or(7.5),
        audio: args.guidance_a.unwrap_or(2.5),
    };
    let seed = args.seed.unwrap_or(0);
    if let Some(l) = args.label {
        if l >= model.config().n_labels {
            return Err(Error::Config(format!(
                "label {l} out of range (model has {} labels)",
                model.config().n_labels
            )));
        }
    }
    let map = TimestepMap::new(
        t_steps,
        model.schedule_video().t_max(),
        model.schedule_audio().t_max(),
        gamma,
    )?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;

    let root = Rng::new(seed);
    let n_labels = model.config().n_labels;
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = args.label.unwrap_or(i % n_labels);
        let mut rng = root.derive(i as u64);
        let (video, audio) = model.generate(&map, label, guidance, &mut rng, t_steps)?;
        samples.push(PairSample {
            video,
            audio,
            label,
            event_times: Vec::new(),
        });
    }

    let cfg = model.config();
    let header = DatasetHeader {
        n_samples,
        n_frames: cfg.video.frames,
        video_dim: cfg.video.latent_dim,
        audio_frames: cfg.audio.frames,
        audio_dim: cfg.audio.latent_dim,
        n_labels: cfg.n_labels,
        max_events: 0,
        jitter: 0.0,
        seed,
    };
    let samples_path = args.out_dir.join("samples.bin");
    datagen::write_samples(&header, &samples, &samples_path)?;

    let window = args.window.unwrap_or(DEFAULT_MATCH_WINDOW);
    let threshold = args.threshold.unwrap_or(DEFAULT_PEAK_THRESHOLD);
    let report = evaluate_samples(&header, &samples, window, threshold, None)?;
    let metrics_path = args.out_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("metrics encode: {e}")))?;
    std::fs::write(&metrics_path, &json).map_err(|e| Error::io(&metrics_path, e))?;

    let summary = serde_json::json!({
        "samples": samples_path.display().to_string(),
        "metrics": metrics_path.display().to_string(),
        "n_samples": n_samples,
        "gamma": gamma,
        "t_steps": t_steps,
        "mean_av_align_modified": report.mean_modified,
        "mean_av_align_official": report.mean_official,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_profile_loss(
    checkpoint: &Path,
    dataset: &Path,
    out: &Path,
    n_bins: Option<usize>,
    samples_per_bin: Option<usize>,
    gamma: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let (model, meta, _) = load_checkpoint(checkpoint)?;
    if !dataset.exists() {
        return Err(Error::Config(format!(
            "dataset not found: {}",
            dataset.display()
        )));
    }
    let (_, samples) = datagen::load_dataset(dataset)?;
    if samples.is_empty() {
        return Err(Error::Data("profile-loss: dataset is empty".into()));
    }
    let gamma = gamma.unwrap_or(meta.gamma_default);
    let map = TimestepMap::new(
        meta.t_global_default,
        model.schedule_video().t_max(),
        model.schedule_audio().t_max(),
        gamma,
    )?;
    let mut rng = Rng::new(seed.unwrap_or(0));
    let profile = profile_loss(
        &model,
        &samples,
        &map,
        n_bins.unwrap_or(13),
        samples_per_bin.unwrap_or(32),
        &mut rng,
    )?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    profile.write_csv(out)?;
    let summary = serde_json::json!({
        "profile": out.display().to_string(),
        "gamma": gamma,
        "n_bins": profile.bins.len(),
        "modality_gap": profile.modality_gap(),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_eval(
    samples_path: &Path,
    reference: Option<&Path>,
    window: Option<usize>,
    threshold: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let (header, samples) = datagen::load_dataset(samples_path)?;
    if samples.is_empty() {
        return Err(Error::Data("eval: sample file is empty".into()));
    }
    let reference = match reference {
        Some(p) => Some(datagen::load_dataset(p)?),
        None => None,
    };
    let report = evaluate_samples(
        &header,
        &samples,
        window.unwrap_or(DEFAULT_MATCH_WINDOW),
        threshold.unwrap_or(DEFAULT_PEAK_THRESHOLD),
        reference.as_ref().map(|(_, s)| s.as_slice()),
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("eval encode: {e}")))?;
    if let Some(path) = out {
        std::fs::write(path, &json).map_err(|e| Error::io(path, e))?;
    }
    println!("{json}");
    Ok(())
}

// ---- shared evaluation -----------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PairEval {
    pub label: usize,
    pub precision: f64,
    pub recall: f64,
    pub score_modified: f64,
    pub score_official: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub window: usize,
    pub threshold: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_modified: f64,
    pub mean_official: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moment_distance_video: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moment_distance_audio: Option<f64>,
    pub per_pair: Vec<PairEval>,
}

/// Detect events on every pair and score both AV-Align variants; when a
/// reference set is supplied, also report per-modality moment distances.
pub fn evaluate_samples(
    header: &DatasetHeader,
    samples: &[PairSample],
    window: usize,
    threshold: f64,
    reference: Option<&[PairSample]>,
) -> Result<EvalReport> {
    let ratio = header.audio_frames / header.n_frames.max(1);
    let mut per_pair = Vec::with_capacity(samples.len());
    for s in samples {
        let onsets = detect_onsets(&s.audio, ratio.max(1), threshold)?;
        let motion = detect_motion_peaks(&s.video, threshold)?;
        let rep = av_align_modified(&onsets, &motion, window);
        per_pair.push(PairEval {
            label: s.label,
            precision: rep.precision,
            recall: rep.recall,
            score_modified: rep.score_modified,
            score_official: rep.score_official,
        });
    }
    let n = per_pair.len() as f64;
    let (mut mp, mut mr, mut mm, mut mo) = (0.0, 0.0, 0.0, 0.0);
    for p in &per_pair {
        mp += p.precision;
        mr += p.recall;
        mm += p.score_modified;
        mo += p.score_official;
    }
    let (md_v, md_a) = match reference {
        Some(refs) if !refs.is_empty() => {
            let gen_v: Vec<_> = samples.iter().map(|s| s.video.clone()).collect();
            let gen_a: Vec<_> = samples.iter().map(|s| s.audio.clone()).collect();
            let ref_v: Vec<_> = refs.iter().map(|s| s.video.clone()).collect();
            let ref_a: Vec<_> = refs.iter().map(|s| s.audio.clone()).collect();
            (
                Some(moment_distance(&gen_v, &ref_v)?),
                Some(moment_distance(&gen_a, &ref_a)?),
            )
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        n: per_pair.len(),
        window,
        threshold,
        mean_precision: mp / n,
        mean_recall: mr / n,
        mean_modified: mm / n,
        mean_official: mo / n,
        moment_distance_video: md_v,
        moment_distance_audio: md_a,
        per_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_and_missing_fields_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");

        std::fs::write(&path, r#"{"version": 1, "nonsense": true}"#).unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("nonsense"), "{err}");

        std::fs::write(
            &path,
            r#"{"version": 1, "data": {"n_frames": 16}}"#,
        )
        .unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("missing field"), "{err}");

        std::fs::write(&path, r#"{"version": 9}"#).unwrap();
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn exit_codes_map_error_categories() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 2);
        assert_eq!(exit_code(&Error::Incompat("x".into())), 3);
        assert_eq!(exit_code(&Error::Dim("x".into())), 1);
        assert_eq!(exit_code(&Error::Diverged("x".into())), 1);
    }
}
