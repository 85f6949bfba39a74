//! Per-modality noise schedules, the global-to-local timestep map, and the
//! loss-over-timesteps profiler used to inspect cross-modal skew.

use serde::{Deserialize, Serialize};

use crate::datagen::PairSample;
use crate::diffusion::{q_sample, Denoiser};
use crate::error::{Error, Result};
use crate::numerics::{no_grad, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas interpolated linearly between the endpoints.
    Linear,
    /// sqrt(beta) interpolated linearly, then squared.
    ScaledLinear,
}

/// Noise schedule: betas over `1..=t_max` and their cumulative
/// signal-retention products alpha_bar(t) = prod(1 - beta_s).
#[derive(Debug, Clone)]
pub struct Schedule {
    kind: ScheduleKind,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Terminal alpha_bar above this leaves the terminal marginal visibly
/// non-Gaussian; construction warns but does not fail.
pub const TERMINAL_ALPHA_BAR_WARN: f64 = 0.05;

impl Schedule {
    pub fn build(
        kind: ScheduleKind,
        t_max: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Schedule> {
        if t_max < 1 {
            return Err(Error::Config("schedule: t_max must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule: need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => linspace(beta_start, beta_end, t_max),
            ScheduleKind::ScaledLinear => linspace(beta_start.sqrt(), beta_end.sqrt(), t_max)
                .into_iter()
                .map(|b| b * b)
                .collect(),
        };
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0f64;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        if alpha_bars[t_max - 1] >= TERMINAL_ALPHA_BAR_WARN {
            log::warn!(
                "schedule terminal alpha_bar {:.4} >= {TERMINAL_ALPHA_BAR_WARN}; \
                 terminal marginal is far from Gaussian",
                alpha_bars[t_max - 1]
            );
        }
        Ok(Schedule {
            kind,
            t_max,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// beta_t for t in 1..=t_max.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max, "beta: t {t} out of range");
        self.betas[t - 1]
    }

    /// alpha_bar(t) with alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "alpha_bar: t {t} out of range");
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn terminal_alpha_bar(&self) -> f64 {
        self.alpha_bars[self.t_max - 1]
    }

    pub fn terminal_is_near_gaussian(&self) -> bool {
        self.terminal_alpha_bar() < TERMINAL_ALPHA_BAR_WARN
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Default video-branch schedule. The video side must collapse into noise
/// faster than the audio side so that its normalized loss concentrates near
/// t=0; the two default endpoint pairs come from widely used latent
/// diffusion configurations, assigned so the video curve is the skewed one.
pub fn default_video_schedule(t_max: usize) -> Schedule {
    Schedule::build(ScheduleKind::Linear, t_max, 1.5e-3, 1.95e-2).expect("valid default")
}

/// Default audio-branch schedule (slower collapse than video).
pub fn default_audio_schedule(t_max: usize) -> Schedule {
    Schedule::build(ScheduleKind::ScaledLinear, t_max, 8.5e-4, 1.2e-2).expect("valid default")
}

/// Global-to-local timestep mapping: a global step t in [0, T] drives the
/// per-modality local steps
///   m(t) = round(T_v * (t/T)^sqrt(gamma))
///   n(t) = round(T_a * (t/T)^(1/sqrt(gamma)))
/// so that, before rounding, (m/T_v) == (n/T_a)^gamma. gamma = 1 with equal
/// maxima is the identity. Rounding is half-away-from-zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepMap {
    pub t_global: usize,
    pub t_video: usize,
    pub t_audio: usize,
    pub gamma: f64,
}

impl TimestepMap {
    pub fn new(t_global: usize, t_video: usize, t_audio: usize, gamma: f64) -> Result<TimestepMap> {
        if t_global < 1 || t_video < 1 || t_audio < 1 {
            return Err(Error::Config(
                "timestep map: T, T_v, T_a must all be >= 1".into(),
            ));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Config(format!(
                "timestep map: gamma must be positive and finite, got {gamma}"
            )));
        }
        Ok(TimestepMap {
            t_global,
            t_video,
            t_audio,
            gamma,
        })
    }

    /// Unrounded local timesteps (m~, n~) for a global step.
    pub fn fractional(&self, t: usize) -> Result<(f64, f64)> {
        if t > self.t_global {
            return Err(Error::Contract(format!(
                "timestep map: t {t} out of range [0, {}]",
                self.t_global
            )));
        }
        let ratio = t as f64 / self.t_global as f64;
        let e = self.gamma.sqrt();
        Ok((
            self.t_video as f64 * ratio.powf(e),
            self.t_audio as f64 * ratio.powf(1.0 / e),
        ))
    }

    /// Rounded and clamped local timesteps (m, n).
    pub fn map(&self, t: usize) -> Result<(usize, usize)> {
        let (mf, nf) = self.fractional(t)?;
        // f64::round is half-away-from-zero.
        let m = (mf.round() as usize).min(self.t_video);
        let n = (nf.round() as usize).min(self.t_audio);
        Ok((m, n))
    }
}

/// Per-modality noise-prediction loss over binned global timesteps, each
/// curve normalized by its value at the smallest positive bin.
#[derive(Debug, Clone)]
pub struct LossProfile {
    pub bins: Vec<usize>,
    pub loss_video: Vec<f64>,
    pub loss_audio: Vec<f64>,
}

impl LossProfile {
    /// Mean absolute gap between the two normalized curves.
    pub fn modality_gap(&self) -> f64 {
        self.loss_video
            .iter()
            .zip(self.loss_audio.iter())
            .map(|(v, a)| (v - a).abs())
            .sum::<f64>()
            / self.bins.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,loss_v,loss_a\n");
        for i in 0..self.bins.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.bins[i], self.loss_video[i], self.loss_audio[i]
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Evaluate per-modality noise-prediction MSE at the mapped local timesteps
/// over `n_bins` evenly spaced global steps, averaged over `samples_per_bin`
/// draws, then normalize each curve by its first-bin value.
pub fn profile_loss(
    den: &dyn Denoiser,
    dataset: &[PairSample],
    map: &TimestepMap,
    n_bins: usize,
    samples_per_bin: usize,
    rng: &mut Rng,
) -> Result<LossProfile> {
    if dataset.is_empty() {
        return Err(Error::Data("profile_loss: empty dataset".into()));
    }
    if n_bins < 2 {
        return Err(Error::Config("profile_loss: n_bins must be >= 2".into()));
    }
    if samples_per_bin == 0 {
        return Err(Error::Data(
            "profile_loss: samples_per_bin must be positive".into(),
        ));
    }
    let t_global = map.t_global;
    let mut bins: Vec<usize> = (0..n_bins)
        .map(|i| {
            let f = i as f64 / (n_bins - 1) as f64;
            (1.0 + f * (t_global - 1) as f64).round() as usize
        })
        .collect();
    bins.dedup();

    let sched_v = den.schedule_video().clone();
    let sched_a = den.schedule_audio().clone();
    let mut loss_video = Vec::with_capacity(bins.len());
    let mut loss_audio = Vec::with_capacity(bins.len());
    for &t in &bins {
        let (m, n) = map.map(t)?;
        // Local step 0 has no noise to predict; evaluate at the first
        // noised step instead.
        let m = m.max(1);
        let n = n.max(1);
        let mut acc_v = 0.0f64;
        let mut acc_a = 0.0f64;
        for _ in 0..samples_per_bin {
            let sample = &dataset[rng.uniform_int(0, dataset.len() as i64 - 1) as usize];
            let eps_v = crate::numerics::Tensor::randn(sample.video.shape(), rng);
            let eps_a = crate::numerics::Tensor::randn(sample.audio.shape(), rng);
            let x_v = q_sample(&sample.video, m, &eps_v, &sched_v)?;
            let x_a = q_sample(&sample.audio, n, &eps_a, &sched_a)?;
            let (eh_v, eh_a) =
                no_grad(|| den.predict_noise(&x_v, &x_a, m, n, sample.label, None))?;
            acc_v += mse(&eh_v.data(), &eps_v.data());
            acc_a += mse(&eh_a.data(), &eps_a.data());
        }
        loss_video.push(acc_v / samples_per_bin as f64);
        loss_audio.push(acc_a / samples_per_bin as f64);
    }
    let norm_v = loss_video[0];
    let norm_a = loss_audio[0];
    if norm_v <= 0.0 || norm_a <= 0.0 {
        return Err(Error::Data(
            "profile_loss: degenerate first-bin loss, cannot normalize".into(),
        ));
    }
    for v in &mut loss_video {
        *v /= norm_v;
    }
    for v in &mut loss_audio {
        *v /= norm_a;
    }
    Ok(LossProfile {
        bins,
        loss_video,
        loss_audio,
    })
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}
