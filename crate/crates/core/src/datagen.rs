//! Deterministic synthetic paired audio-video latents with controllable
//! temporal correlation. Each pair shares a set of event times: the video
//! channel carries a localized impulse pattern peaking at each event frame,
//! the audio channel an exponentially decaying onset envelope starting at
//! the corresponding (optionally jittered) audio frame. The event class
//! (label) controls amplitude and decay so class conditioning is learnable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::wire;

const DATASET_MAGIC: &[u8; 4] = b"AVJD";
const DATASET_VERSION: u32 = 1;

/// Parameters for one synthetic pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSpec {
    /// Video frames F.
    pub n_frames: usize,
    /// Video channels per frame.
    pub video_dim: usize,
    /// Audio frames; must be an integer multiple of `n_frames`.
    pub audio_frames: usize,
    /// Audio channels per frame.
    pub audio_dim: usize,
    /// Number of events to place.
    pub n_events: usize,
    /// Audio-vs-video event misalignment, in video frames.
    pub jitter: f64,
    /// Event class; scales amplitude and decay.
    pub label: usize,
    pub seed: u64,
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 1 || self.video_dim < 1 || self.audio_frames < 1 || self.audio_dim < 1 {
            return Err(Error::Config("pair spec: all dims must be >= 1".into()));
        }
        if self.audio_frames % self.n_frames != 0 {
            return Err(Error::Config(format!(
                "pair spec: audio_frames {} must be a multiple of n_frames {}",
                self.audio_frames, self.n_frames
            )));
        }
        if self.n_events > self.n_frames {
            return Err(Error::Config(format!(
                "pair spec: n_events {} exceeds n_frames {}",
                self.n_events, self.n_frames
            )));
        }
        if self.jitter < 0.0 || !self.jitter.is_finite() {
            return Err(Error::Config("pair spec: jitter must be >= 0".into()));
        }
        Ok(())
    }

    /// Audio frames per video frame.
    pub fn frames_per_video_frame(&self) -> usize {
        self.audio_frames / self.n_frames
    }
}

/// One paired sample plus its ground-truth event frames (video grid).
#[derive(Debug, Clone)]
pub struct PairSample {
    pub video: Tensor,
    pub audio: Tensor,
    pub label: usize,
    pub event_times: Vec<usize>,
}

fn amplitude(label: usize) -> f64 {
    1.6 + 0.35 * label as f64
}

fn video_decay(label: usize) -> f64 {
    0.7 + 0.4 * label as f64
}

fn audio_decay(label: usize) -> f64 {
    2.0 + 1.0 * label as f64
}

/// Pick `n` event frames in [1, F-1], separated by at least 3 frames where
/// feasible (falling back to smaller gaps when the frame budget is tight).
fn place_events(n: usize, frames: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > frames - 1 {
        return Err(Error::Data(format!(
            "cannot place {n} events on {frames} frames (frame 0 is reserved)"
        )));
    }
    let mut gap = 3usize;
    while gap > 1 {
        let m = (frames - 1).saturating_sub((n - 1) * (gap - 1));
        if m >= n {
            break;
        }
        gap -= 1;
    }
    let m = frames - 1 - (n - 1) * (gap - 1);
    // Distinct sorted draw from [1, m], then spread by the gap.
    let mut pool: Vec<usize> = (1..=m).collect();
    for i in 0..n {
        let j = rng.uniform_int(i as i64, pool.len() as i64 - 1) as usize;
        pool.swap(i, j);
    }
    let mut picks: Vec<usize> = pool[..n].to_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .enumerate()
        .map(|(i, v)| v + i * (gap - 1))
        .collect())
}

/// Random-sign unit vector with equal per-channel magnitude. Equal
/// magnitudes keep event energies comparable after per-channel
/// standardization, so every event clears the relative detection threshold.
fn unit_pattern(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let s = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| if rng.uniform() < 0.5 { -s } else { s })
        .collect()
}

/// Standardize each channel (column) to zero mean, unit variance. Channels
/// with near-zero variance keep only the mean subtraction.
fn standardize(data: &mut [f64], frames: usize, dim: usize) {
    for c in 0..dim {
        let mut mean = 0.0;
        for f in 0..frames {
            mean += data[f * dim + c];
        }
        mean /= frames as f64;
        let mut var = 0.0;
        for f in 0..frames {
            let d = data[f * dim + c] - mean;
            var += d * d;
        }
        var /= frames as f64;
        let sd = var.sqrt();
        for f in 0..frames {
            data[f * dim + c] -= mean;
            if sd >= 1e-8 {
                data[f * dim + c] /= sd;
            }
        }
    }
}

/// Deterministically synthesize one pair from its spec.
pub fn make_pair(spec: &PairSpec) -> Result<PairSample> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let frames = spec.n_frames;
    let tau = spec.audio_frames;
    let ratio = spec.frames_per_video_frame();

    let events = place_events(spec.n_events, frames, &mut rng)?;
    let amp = amplitude(spec.label);
    let kv = video_decay(spec.label);
    let ka = audio_decay(spec.label) * ratio as f64 / 4.0;

    let mut video = vec![0.0f64; frames * spec.video_dim];
    let mut audio = vec![0.0f64; tau * spec.audio_dim];

    for &e in &events {
        let phi = unit_pattern(spec.video_dim, &mut rng);
        let psi = unit_pattern(spec.audio_dim, &mut rng);
        let jit = if spec.jitter > 0.0 {
            (rng.uniform() * 2.0 - 1.0) * spec.jitter
        } else {
            0.0
        };
        for f in e..frames {
            let w = amp * (-((f - e) as f64) / kv).exp();
            for (c, p) in phi.iter().enumerate() {
                video[f * spec.video_dim + c] += w * p;
            }
        }
        let a0 = ((e * ratio) as f64 + jit * ratio as f64).round() as i64;
        let a0 = a0.clamp(1, tau as i64 - 1) as usize;
        for g in a0..tau {
            let w = amp * (-((g - a0) as f64) / ka).exp();
            for (c, p) in psi.iter().enumerate() {
                audio[g * spec.audio_dim + c] += w * p;
            }
        }
    }

    standardize(&mut video, frames, spec.video_dim);
    standardize(&mut audio, tau, spec.audio_dim);

    let video = Tensor::from_vec(
        &[frames, spec.video_dim],
        video.into_iter().map(|v| v as f32).collect(),
    )?;
    let audio = Tensor::from_vec(
        &[tau, spec.audio_dim],
        audio.into_iter().map(|v| v as f32).collect(),
    )?;
    video.assert_finite("synthetic video")?;
    audio.assert_finite("synthetic audio")?;
    Ok(PairSample {
        video,
        audio,
        label: spec.label,
        event_times: events,
    })
}

/// Dataset file header (JSON, embedded in the binary container).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub n_samples: usize,
    pub n_frames: usize,
    pub video_dim: usize,
    pub audio_frames: usize,
    pub audio_dim: usize,
    pub n_labels: usize,
    pub max_events: usize,
    pub jitter: f64,
    pub seed: u64,
}

/// Write `n_samples` pairs derived from `template` (per-sample seeds,
/// labels uniform over `n_labels`, event counts uniform in
/// [1, template.n_events]).
pub fn make_dataset(
    template: &PairSpec,
    n_samples: usize,
    n_labels: usize,
    path: &Path,
) -> Result<DatasetHeader> {
    template.validate()?;
    if n_labels < 1 {
        return Err(Error::Config("dataset: n_labels must be >= 1".into()));
    }
    if template.n_events < 1 {
        return Err(Error::Config(
            "dataset: template n_events must be >= 1".into(),
        ));
    }
    let header = DatasetHeader {
        n_samples,
        n_frames: template.n_frames,
        video_dim: template.video_dim,
        audio_frames: template.audio_frames,
        audio_dim: template.audio_dim,
        n_labels,
        max_events: template.n_events,
        jitter: template.jitter,
        seed: template.seed,
    };
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    wire::write_magic(&mut w, DATASET_MAGIC, &p)?;
    wire::write_u32(&mut w, DATASET_VERSION, &p)?;
    let json = serde_json::to_string(&header)
        .map_err(|e| Error::Config(format!("dataset header encode: {e}")))?;
    wire::write_json_header(&mut w, &json, &p)?;

    let mut meta_rng = Rng::new(template.seed);
    for i in 0..n_samples {
        let label = meta_rng.uniform_int(0, n_labels as i64 - 1) as usize;
        let n_events = meta_rng.uniform_int(1, template.n_events as i64) as usize;
        let spec = PairSpec {
            label,
            n_events,
            seed: meta_rng.derive(i as u64).seed(),
            ..template.clone()
        };
        let sample = make_pair(&spec)?;
        write_sample(&mut w, &sample, &p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(header)
}

fn write_sample(w: &mut impl Write, sample: &PairSample, path: &str) -> Result<()> {
    wire::write_u32(w, sample.label as u32, path)?;
    wire::write_u32(w, sample.event_times.len() as u32, path)?;
    for &t in &sample.event_times {
        wire::write_u64(w, t as u64, path)?;
    }
    wire::write_tensor_record(w, "video", &sample.video, path)?;
    wire::write_tensor_record(w, "audio", &sample.audio, path)
}

/// Write already-materialized samples (used for generated outputs).
pub fn write_samples(header: &DatasetHeader, samples: &[PairSample], path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    wire::write_magic(&mut w, DATASET_MAGIC, &p)?;
    wire::write_u32(&mut w, DATASET_VERSION, &p)?;
    let json = serde_json::to_string(header)
        .map_err(|e| Error::Config(format!("dataset header encode: {e}")))?;
    wire::write_json_header(&mut w, &json, &p)?;
    for s in samples {
        write_sample(&mut w, s, &p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a dataset file back. Round-trips are bit-exact.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<PairSample>)> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    wire::check_magic(&mut r, DATASET_MAGIC, "dataset", &p)?;
    let version = wire::read_u32(&mut r, &p)?;
    if version != DATASET_VERSION {
        return Err(Error::Incompat(format!(
            "{p}: dataset version {version}, expected {DATASET_VERSION}"
        )));
    }
    let json = wire::read_json_header(&mut r, &p)?;
    let header: DatasetHeader = serde_json::from_str(&json)
        .map_err(|e| Error::Incompat(format!("{p}: bad dataset header: {e}")))?;
    let mut samples = Vec::with_capacity(header.n_samples);
    for _ in 0..header.n_samples {
        let label = wire::read_u32(&mut r, &p)? as usize;
        let n_events = wire::read_u32(&mut r, &p)? as usize;
        if n_events > header.n_frames {
            return Err(Error::Incompat(format!(
                "{p}: sample event count {n_events} exceeds frame count"
            )));
        }
        let mut event_times = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            event_times.push(wire::read_u64(&mut r, &p)? as usize);
        }
        let (name_v, video) = wire::read_tensor_record(&mut r, &p)?;
        let (name_a, audio) = wire::read_tensor_record(&mut r, &p)?;
        if name_v != "video" || name_a != "audio" {
            return Err(Error::Incompat(format!(
                "{p}: unexpected tensor record order ({name_v}, {name_a})"
            )));
        }
        samples.push(PairSample {
            video,
            audio,
            label,
            event_times,
        });
    }
    Ok((header, samples))
}
