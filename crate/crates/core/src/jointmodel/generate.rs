//! Joint generation loop: both latents start as Gaussian noise at their
//! mapped terminal local steps; each global step predicts noise jointly
//! (conditional and null-label passes combined per modality), applies a
//! DDIM transition to the next mapped local step, and carries the
//! clean-data estimate forward as self-conditioning.

use crate::diffusion::{cfg_combine, clamp_x0, ddim_step, predict_x0, Denoiser};
use crate::error::{Error, Result};
use crate::numerics::{no_grad, Rng, Tensor};
use crate::schedule::TimestepMap;

/// Per-modality classifier-free guidance strengths.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceWeights {
    pub video: f64,
    pub audio: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        GuidanceWeights {
            video: 7.5,
            audio: 2.5,
        }
    }
}

/// Run the generation loop for `t_steps` global steps. The map's local
/// maxima (T_v, T_a) and gamma are kept; its global step count is replaced
/// by `t_steps`. Consecutive global steps that round to the same local step
/// leave that modality untouched for the step.
#[allow(clippy::too_many_arguments)]
pub fn joint_generate(
    den: &dyn Denoiser,
    map: &TimestepMap,
    label: usize,
    guidance: GuidanceWeights,
    rng: &mut Rng,
    t_steps: usize,
    video_shape: &[usize],
    audio_shape: &[usize],
) -> Result<(Tensor, Tensor)> {
    if t_steps < 1 {
        return Err(Error::Contract("joint_generate: t_steps must be >= 1".into()));
    }
    let sched_v = den.schedule_video().clone();
    let sched_a = den.schedule_audio().clone();
    if map.t_video != sched_v.t_max() || map.t_audio != sched_a.t_max() {
        return Err(Error::Contract(format!(
            "joint_generate: map maxima ({}, {}) disagree with schedules ({}, {})",
            map.t_video,
            map.t_audio,
            sched_v.t_max(),
            sched_a.t_max()
        )));
    }
    let map = TimestepMap::new(t_steps, map.t_video, map.t_audio, map.gamma)?;

    let mut x_v = Tensor::randn(video_shape, rng);
    let mut x_a = Tensor::randn(audio_shape, rng);
    let mut self_cond: Option<(Tensor, Tensor)> = None;

    no_grad(|| -> Result<()> {
        for t in (1..=t_steps).rev() {
            let (m, n) = map.map(t)?;
            let (m_prev, n_prev) = map.map(t - 1)?;
            let sc = self_cond.as_ref().map(|(v, a)| (v, a));
            let (ec_v, ec_a) = den.predict_noise(&x_v, &x_a, m, n, label, sc)?;
            let (eu_v, eu_a) = den.predict_noise(&x_v, &x_a, m, n, den.null_label(), sc)?;
            let e_v = cfg_combine(&ec_v, &eu_v, guidance.video)?;
            let e_a = cfg_combine(&ec_a, &eu_a, guidance.audio)?;

            // Clean-data estimates carried into the next global step.
            let sc_v = if m >= 1 {
                clamp_x0(&predict_x0(&x_v, &e_v, m, &sched_v)?)
            } else {
                x_v.detach()
            };
            let sc_a = if n >= 1 {
                clamp_x0(&predict_x0(&x_a, &e_a, n, &sched_a)?)
            } else {
                x_a.detach()
            };
            self_cond = Some((sc_v, sc_a));

            if m_prev < m {
                x_v = ddim_step(&x_v, &e_v, m, m_prev, &sched_v)?;
            }
            if n_prev < n {
                x_a = ddim_step(&x_a, &e_a, n, n_prev, &sched_a)?;
            }
        }
        Ok(())
    })?;

    x_v.assert_finite("generated video latents")?;
    x_a.assert_finite("generated audio latents")?;
    Ok((x_v, x_a))
}

impl crate::jointmodel::JointModel {
    /// Generate one pair with this model's configured latent shapes.
    pub fn generate(
        &self,
        map: &TimestepMap,
        label: usize,
        guidance: GuidanceWeights,
        rng: &mut Rng,
        t_steps: usize,
    ) -> Result<(Tensor, Tensor)> {
        self.assert_finite()
            .map_err(|e| Error::Contract(format!("model has non-finite parameters: {e}")))?;
        joint_generate(
            self,
            map,
            label,
            guidance,
            rng,
            t_steps,
            &self.video_latent_shape(),
            &self.audio_latent_shape(),
        )
    }
}
