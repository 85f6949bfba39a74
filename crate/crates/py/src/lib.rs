//! Python bindings for the joint audio-video diffusion stack: noise
//! schedules, the timestep-adjustment map, diffusion primitives, AV-Align
//! metrics, the synthetic data generator, and checkpointed models.
//!
//! Tensors cross the boundary as per-frame nested lists
//! (`list[list[float]]`, frames outermost).

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use avjoint_core::datagen::{make_pair as core_make_pair, PairSpec};
use avjoint_core::diffusion;
use avjoint_core::error::Error;
use avjoint_core::jointmodel::{
    load_checkpoint, GuidanceWeights, InjectMode, JointModel as CoreModel,
};
use avjoint_core::metrics;
use avjoint_core::numerics::{Rng, Tensor};
use avjoint_core::schedule;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows_to_tensor(rows: &[Vec<f32>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("expected at least one frame"));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("ragged frame rows"));
    }
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(&[rows.len(), dim], flat).map_err(to_py_err)
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f32>> {
    let (frames, dim) = (t.shape()[0], t.shape()[1]);
    let data = t.to_vec();
    (0..frames)
        .map(|f| data[f * dim..(f + 1) * dim].to_vec())
        .collect()
}

/// Per-modality noise schedule with precomputed signal-retention products.
#[pyclass(name = "Schedule")]
struct PySchedule {
    inner: schedule::Schedule,
}

#[pymethods]
impl PySchedule {
    /// kind is "linear" or "scaled_linear".
    #[new]
    fn new(kind: &str, t_max: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let kind = match kind {
            "linear" => schedule::ScheduleKind::Linear,
            "scaled_linear" => schedule::ScheduleKind::ScaledLinear,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown schedule kind '{other}'"
                )))
            }
        };
        Ok(PySchedule {
            inner: schedule::Schedule::build(kind, t_max, beta_start, beta_end)
                .map_err(to_py_err)?,
        })
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.inner.t_max()
    }

    fn beta(&self, t: usize) -> f64 {
        self.inner.beta(t)
    }

    fn alpha_bar(&self, t: usize) -> f64 {
        self.inner.alpha_bar(t)
    }

    fn terminal_alpha_bar(&self) -> f64 {
        self.inner.terminal_alpha_bar()
    }
}

/// Global-to-local timestep mapping m(t), n(t) with adjustment strength
/// gamma.
#[pyclass(name = "TimestepMap")]
struct PyTimestepMap {
    inner: schedule::TimestepMap,
}

#[pymethods]
impl PyTimestepMap {
    #[new]
    fn new(t_global: usize, t_video: usize, t_audio: usize, gamma: f64) -> PyResult<Self> {
        Ok(PyTimestepMap {
            inner: schedule::TimestepMap::new(t_global, t_video, t_audio, gamma)
                .map_err(to_py_err)?,
        })
    }

    /// Rounded local steps (m, n) for a global step.
    fn map(&self, t: usize) -> PyResult<(usize, usize)> {
        self.inner.map(t).map_err(to_py_err)
    }

    /// Unrounded local steps, for proportionality checks.
    fn fractional(&self, t: usize) -> PyResult<(f64, f64)> {
        self.inner.fractional(t).map_err(to_py_err)
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }
}

/// Forward corruption of clean data at timestep t (elementwise).
#[pyfunction]
fn q_sample(x0: Vec<Vec<f32>>, t: usize, eps: Vec<Vec<f32>>, sched: &PySchedule) -> PyResult<Vec<Vec<f32>>> {
    let x0 = rows_to_tensor(&x0)?;
    let eps = rows_to_tensor(&eps)?;
    diffusion::q_sample(&x0, t, &eps, &sched.inner)
        .map(|t| tensor_to_rows(&t))
        .map_err(to_py_err)
}

/// Clean-data estimate from a noise prediction.
#[pyfunction]
fn predict_x0(
    x_t: Vec<Vec<f32>>,
    eps_hat: Vec<Vec<f32>>,
    t: usize,
    sched: &PySchedule,
) -> PyResult<Vec<Vec<f32>>> {
    let x_t = rows_to_tensor(&x_t)?;
    let eps_hat = rows_to_tensor(&eps_hat)?;
    diffusion::predict_x0(&x_t, &eps_hat, t, &sched.inner)
        .map(|t| tensor_to_rows(&t))
        .map_err(to_py_err)
}

/// Deterministic DDIM transition from t to t_prev.
#[pyfunction]
fn ddim_step(
    x_t: Vec<Vec<f32>>,
    eps_hat: Vec<Vec<f32>>,
    t: usize,
    t_prev: usize,
    sched: &PySchedule,
) -> PyResult<Vec<Vec<f32>>> {
    let x_t = rows_to_tensor(&x_t)?;
    let eps_hat = rows_to_tensor(&eps_hat)?;
    diffusion::ddim_step(&x_t, &eps_hat, t, t_prev, &sched.inner)
        .map(|t| tensor_to_rows(&t))
        .map_err(to_py_err)
}

/// Audio onset frames on the video grid.
#[pyfunction]
#[pyo3(signature = (audio, frames_per_video_frame, threshold = 0.5))]
fn detect_onsets(
    audio: Vec<Vec<f32>>,
    frames_per_video_frame: usize,
    threshold: f64,
) -> PyResult<Vec<usize>> {
    let t = rows_to_tensor(&audio)?;
    metrics::detect_onsets(&t, frames_per_video_frame, threshold)
        .map(|p| p.times().to_vec())
        .map_err(to_py_err)
}

/// Video motion-peak frames.
#[pyfunction]
#[pyo3(signature = (video, threshold = 0.5))]
fn detect_motion_peaks(video: Vec<Vec<f32>>, threshold: f64) -> PyResult<Vec<usize>> {
    let t = rows_to_tensor(&video)?;
    metrics::detect_motion_peaks(&t, threshold)
        .map(|p| p.times().to_vec())
        .map_err(to_py_err)
}

/// Official AV-Align score c / (|A| + |V| - c); can exceed 1.
#[pyfunction]
#[pyo3(signature = (audio_peaks, video_peaks, window = 1))]
fn av_align_official(audio_peaks: Vec<usize>, video_peaks: Vec<usize>, window: usize) -> f64 {
    let a = metrics::PeakSet::new(audio_peaks, metrics::PeakSource::Audio);
    let v = metrics::PeakSet::new(video_peaks, metrics::PeakSource::Video);
    metrics::av_align_official(&a, &v, window)
}

/// Precision/recall AV-Align: returns (precision, recall, score_modified,
/// score_official).
#[pyfunction]
#[pyo3(signature = (audio_peaks, video_peaks, window = 1))]
fn av_align_modified(
    audio_peaks: Vec<usize>,
    video_peaks: Vec<usize>,
    window: usize,
) -> (f64, f64, f64, f64) {
    let a = metrics::PeakSet::new(audio_peaks, metrics::PeakSource::Audio);
    let v = metrics::PeakSet::new(video_peaks, metrics::PeakSource::Video);
    let r = metrics::av_align_modified(&a, &v, window);
    (r.precision, r.recall, r.score_modified, r.score_official)
}

/// Synthesize one paired sample; returns (video, audio, event_times).
#[pyfunction]
#[pyo3(signature = (n_frames, video_dim, audio_frames, audio_dim, n_events, jitter, label, seed))]
#[allow(clippy::too_many_arguments)]
fn make_pair(
    n_frames: usize,
    video_dim: usize,
    audio_frames: usize,
    audio_dim: usize,
    n_events: usize,
    jitter: f64,
    label: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<usize>)> {
    let sample = core_make_pair(&PairSpec {
        n_frames,
        video_dim,
        audio_frames,
        audio_dim,
        n_events,
        jitter,
        label,
        seed,
    })
    .map_err(to_py_err)?;
    Ok((
        tensor_to_rows(&sample.video),
        tensor_to_rows(&sample.audio),
        sample.event_times,
    ))
}

/// A trained (or freshly initialized) joint model.
#[pyclass(name = "JointModel", unsendable)]
struct PyJointModel {
    inner: CoreModel,
    epochs_trained: usize,
    gamma_default: f64,
    t_global_default: usize,
}

#[pymethods]
impl PyJointModel {
    /// Fresh toy model (untrained) for smoke testing the full loop.
    #[new]
    #[pyo3(signature = (n_frames=16, video_dim=6, audio_frames=64, audio_dim=6,
                        hidden_dim=32, n_layers=2, n_inject_sites=2,
                        inject_mode="cmc_pe", n_labels=4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_frames: usize,
        video_dim: usize,
        audio_frames: usize,
        audio_dim: usize,
        hidden_dim: usize,
        n_layers: usize,
        n_inject_sites: usize,
        inject_mode: &str,
        n_labels: usize,
        seed: u64,
    ) -> PyResult<Self> {
        use avjoint_core::diffusion::Modality;
        use avjoint_core::jointmodel::{BranchConfig, JointModelConfig};
        let mode: InjectMode = inject_mode.parse().map_err(to_py_err)?;
        let cfg = JointModelConfig {
            video: BranchConfig {
                modality: Modality::Video,
                frames: n_frames,
                latent_dim: video_dim,
                hidden_dim,
                n_layers,
                n_inject_sites,
            },
            audio: BranchConfig {
                modality: Modality::Audio,
                frames: audio_frames,
                latent_dim: audio_dim,
                hidden_dim,
                n_layers,
                n_inject_sites,
            },
            inject_mode: mode,
            n_labels,
            label_dim: 16,
            time_dim: 16,
            connector_hidden: 32,
            connector_out: 24,
        };
        let sched_v = schedule::default_video_schedule(1000);
        let sched_a = schedule::default_audio_schedule(1000);
        let mut rng = Rng::new(seed);
        Ok(PyJointModel {
            inner: CoreModel::new(cfg, sched_v, sched_a, &mut rng).map_err(to_py_err)?,
            epochs_trained: 0,
            gamma_default: 1.5,
            t_global_default: 25,
        })
    }

    /// Load a checkpoint written by the CLI.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, meta, _) =
            load_checkpoint(std::path::Path::new(path)).map_err(to_py_err)?;
        Ok(PyJointModel {
            inner,
            epochs_trained: meta.epochs_trained,
            gamma_default: meta.gamma_default,
            t_global_default: meta.t_global_default,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    /// Generate one pair; returns (video, audio) as per-frame rows.
    #[pyo3(signature = (label=0, seed=0, gamma=None, t_steps=None, guidance_v=7.5, guidance_a=2.5))]
    fn generate(
        &self,
        label: usize,
        seed: u64,
        gamma: Option<f64>,
        t_steps: Option<usize>,
        guidance_v: f64,
        guidance_a: f64,
    ) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        use avjoint_core::diffusion::Denoiser;
        let t_steps = t_steps.unwrap_or(self.t_global_default);
        let map = schedule::TimestepMap::new(
            t_steps,
            self.inner.schedule_video().t_max(),
            self.inner.schedule_audio().t_max(),
            gamma.unwrap_or(self.gamma_default),
        )
        .map_err(to_py_err)?;
        let mut rng = Rng::new(seed);
        let (v, a) = self
            .inner
            .generate(
                &map,
                label,
                GuidanceWeights {
                    video: guidance_v,
                    audio: guidance_a,
                },
                &mut rng,
                t_steps,
            )
            .map_err(to_py_err)?;
        Ok((tensor_to_rows(&v), tensor_to_rows(&a)))
    }
}

#[pymodule]
fn avjoint(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyTimestepMap>()?;
    m.add_class::<PyJointModel>()?;
    m.add_function(wrap_pyfunction!(q_sample, m)?)?;
    m.add_function(wrap_pyfunction!(predict_x0, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_step, m)?)?;
    m.add_function(wrap_pyfunction!(detect_onsets, m)?)?;
    m.add_function(wrap_pyfunction!(detect_motion_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(av_align_official, m)?)?;
    m.add_function(wrap_pyfunction!(av_align_modified, m)?)?;
    m.add_function(wrap_pyfunction!(make_pair, m)?)?;
    Ok(())
}
