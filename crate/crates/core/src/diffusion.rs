//! Single-modality diffusion primitives: forward corruption, clean-data
//! prediction, DDIM/DDPM reverse steps, classifier-free guidance, and the
//! noise-prediction training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
}

/// A latent at a known local timestep of one modality.
#[derive(Debug, Clone)]
pub struct NoisyState {
    pub x: Tensor,
    pub t: usize,
    pub modality: Modality,
}

/// Anything that can jointly predict per-modality noise. Implemented by the
/// trained joint model and by test oracles that recover the injected noise
/// algebraically.
pub trait Denoiser {
    fn predict_noise(
        &self,
        x_video: &Tensor,
        x_audio: &Tensor,
        t_video: usize,
        t_audio: usize,
        label: usize,
        self_cond: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Tensor, Tensor)>;

    fn schedule_video(&self) -> &Schedule;
    fn schedule_audio(&self) -> &Schedule;

    /// The reserved label used for the unconditional guidance branch.
    fn null_label(&self) -> usize;
}

/// Forward corruption: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps. t = 0 is the
/// no-noise extension and returns x0 exactly.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &Schedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Dim(format!(
            "q_sample: x0 shape {:?} vs eps shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if t > sched.t_max() {
        return Err(Error::Contract(format!(
            "q_sample: t {t} out of range [0, {}]",
            sched.t_max()
        )));
    }
    if t == 0 {
        return Ok(x0.detach());
    }
    let ab = sched.alpha_bar(t);
    x0.scale(ab.sqrt() as f32)
        .add(&eps.scale((1.0 - ab).sqrt() as f32))
}

/// Clean-data estimate from a noise prediction:
/// (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t). Requires t >= 1.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &Schedule) -> Result<Tensor> {
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::Dim(format!(
            "predict_x0: x_t shape {:?} vs eps_hat shape {:?}",
            x_t.shape(),
            eps_hat.shape()
        )));
    }
    if t == 0 || t > sched.t_max() {
        return Err(Error::Contract(format!(
            "predict_x0: t {t} out of range [1, {}]",
            sched.t_max()
        )));
    }
    let ab = sched.alpha_bar(t);
    Ok(x_t
        .sub(&eps_hat.scale((1.0 - ab).sqrt() as f32))?
        .scale((1.0 / ab.sqrt()) as f32))
}

/// Deterministic DDIM transition from local step t to t_prev < t:
/// sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev) * eps_hat, with ab(0) = 1.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &Schedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Contract(format!(
            "ddim_step: t_prev {t_prev} must be < t {t}"
        )));
    }
    let x0_hat = predict_x0(x_t, eps_hat, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    x0_hat
        .scale(ab_prev.sqrt() as f32)
        .add(&eps_hat.scale((1.0 - ab_prev).sqrt() as f32))
}

/// Stochastic ancestral (DDPM) transition. The noise term is suppressed at
/// t = 1 so the final sample is deterministic.
pub fn ddpm_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &Schedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::Dim(format!(
            "ddpm_step: x_t shape {:?} vs eps_hat shape {:?}",
            x_t.shape(),
            eps_hat.shape()
        )));
    }
    if t == 0 || t > sched.t_max() {
        return Err(Error::Contract(format!(
            "ddpm_step: t {t} out of range [1, {}]",
            sched.t_max()
        )));
    }
    let beta = sched.beta(t);
    let ab = sched.alpha_bar(t);
    let mean = x_t
        .sub(&eps_hat.scale((beta / (1.0 - ab).sqrt()) as f32))?
        .scale((1.0 / (1.0 - beta).sqrt()) as f32);
    if t == 1 {
        return Ok(mean);
    }
    let sigma = ddpm_sigma2(t, sched).sqrt();
    let z = Tensor::randn(x_t.shape(), rng);
    mean.add(&z.scale(sigma as f32))
}

/// Reverse-step variance: (1 - ab_{t-1}) / (1 - ab_t) * beta_t.
pub fn ddpm_sigma2(t: usize, sched: &Schedule) -> f64 {
    (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t)) * sched.beta(t)
}

/// Range limit for clean-data estimates used as self-conditioning input.
/// Latents are standardized to unit variance, so anything beyond this is
/// noise amplified by the 1/sqrt(ab_t) factor at high timesteps.
pub const SELF_COND_CLAMP: f32 = 5.0;

/// Detached elementwise clamp of a clean-data estimate to
/// [-SELF_COND_CLAMP, SELF_COND_CLAMP].
pub fn clamp_x0(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x
        .data()
        .iter()
        .map(|v| v.clamp(-SELF_COND_CLAMP, SELF_COND_CLAMP))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("clamp preserves shape")
}

/// Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond).
/// w = 1 and w = 0 return the respective input exactly.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::Dim(format!(
            "cfg_combine: shape mismatch {:?} vs {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_uncond.add(&eps_cond.sub(eps_uncond)?.scale(w as f32))
}

/// Mean squared error over all elements; differentiable w.r.t. eps_hat.
pub fn noise_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let diff = eps_hat.sub(eps)?;
    Ok(diff.mul(&diff)?.mean_all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::backward;
    use crate::schedule::ScheduleKind;

    fn const_beta_sched(t_max: usize) -> Schedule {
        Schedule::build(ScheduleKind::Linear, t_max, 0.02, 0.02).unwrap()
    }

    #[test]
    fn q_sample_zero_noise_endpoint() {
        let s = const_beta_sched(4);
        let mut rng = Rng::new(1);
        let x0 = Tensor::randn(&[3, 2], &mut rng);
        let eps = Tensor::randn(&[3, 2], &mut rng);
        let out = q_sample(&x0, 0, &eps, &s).unwrap();
        assert_eq!(out.to_vec(), x0.to_vec());
    }

    #[test]
    fn q_sample_linearity_in_eps() {
        let s = const_beta_sched(4);
        let mut rng = Rng::new(2);
        let x0 = Tensor::zeros(&[2, 2]);
        let eps = Tensor::randn(&[2, 2], &mut rng);
        let out = q_sample(&x0, 3, &eps, &s).unwrap();
        let c = (1.0 - s.alpha_bar(3)).sqrt() as f32;
        for (o, e) in out.to_vec().iter().zip(eps.to_vec()) {
            assert!((o - c * e).abs() < 1e-6);
        }
    }

    #[test]
    fn q_sample_direct_evaluation_oracle() {
        // Constant beta 0.02, t = 3, x0 = 1, eps = 1.
        let s = const_beta_sched(3);
        let x0 = Tensor::full(&[1, 1], 1.0);
        let eps = Tensor::full(&[1, 1], 1.0);
        let out = q_sample(&x0, 3, &eps, &s).unwrap().item() as f64;
        let ab: f64 = 0.98f64 * 0.98 * 0.98;
        let expect = ab.sqrt() + (1.0 - ab).sqrt();
        assert!((out - expect).abs() < 1e-6, "{out} vs {expect}");
        assert!((out - 1.212654).abs() < 1e-5);
    }

    #[test]
    fn q_sample_shape_and_range_errors() {
        let s = const_beta_sched(3);
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(q_sample(&a, 1, &b, &s), Err(Error::Dim(_))));
        assert!(matches!(
            q_sample(&a, 4, &a, &s),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = const_beta_sched(100);
        let mut rng = Rng::new(3);
        let mut max_err = 0.0f32;
        for i in 0..100 {
            let x0 = Tensor::randn(&[4, 3], &mut rng);
            let eps = Tensor::randn(&[4, 3], &mut rng);
            let t = 1 + (i % 100);
            let x_t = q_sample(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0(&x_t, &eps, t, &s).unwrap();
            for (a, b) in rec.to_vec().iter().zip(x0.to_vec()) {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err < 1e-4, "round-trip error {max_err}");
    }

    #[test]
    fn predict_x0_zero_eps_reduction() {
        let s = const_beta_sched(5);
        let mut rng = Rng::new(4);
        let x_t = Tensor::randn(&[2, 2], &mut rng);
        let zero = Tensor::zeros(&[2, 2]);
        let out = predict_x0(&x_t, &zero, 2, &s).unwrap();
        let c = (1.0 / s.alpha_bar(2).sqrt()) as f32;
        for (o, x) in out.to_vec().iter().zip(x_t.to_vec()) {
            assert!((o - c * x).abs() < 1e-6);
        }
        assert!(matches!(
            predict_x0(&x_t, &zero, 0, &s),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ddim_terminal_step_returns_x0_hat() {
        let s = const_beta_sched(10);
        let mut rng = Rng::new(5);
        let x0 = Tensor::randn(&[3, 2], &mut rng);
        let eps = Tensor::randn(&[3, 2], &mut rng);
        let x_t = q_sample(&x0, 7, &eps, &s).unwrap();
        let out = ddim_step(&x_t, &eps, 7, 0, &s).unwrap();
        for (a, b) in out.to_vec().iter().zip(x0.to_vec()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn ddim_consistent_with_forward_trajectory() {
        let s = const_beta_sched(10);
        let mut rng = Rng::new(6);
        let x0 = Tensor::randn(&[3, 2], &mut rng);
        let eps = Tensor::randn(&[3, 2], &mut rng);
        let x_t = q_sample(&x0, 8, &eps, &s).unwrap();
        let stepped = ddim_step(&x_t, &eps, 8, 5, &s).unwrap();
        let direct = q_sample(&x0, 5, &eps, &s).unwrap();
        for (a, b) in stepped.to_vec().iter().zip(direct.to_vec()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ddim_rejects_bad_ordering() {
        let s = const_beta_sched(10);
        let x = Tensor::zeros(&[1, 1]);
        assert!(matches!(
            ddim_step(&x, &x, 3, 3, &s),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn full_ddim_trajectory_with_oracle_reconstructs_x0() {
        let s = const_beta_sched(50);
        let mut rng = Rng::new(7);
        let x0 = Tensor::randn(&[4, 2], &mut rng);
        let eps = Tensor::randn(&[4, 2], &mut rng);
        // Oracle knows x0, so eps_hat at every step is the exact noise
        // implied by the current state.
        let mut x = q_sample(&x0, 50, &eps, &s).unwrap();
        for t in (1..=50usize).rev() {
            let ab = s.alpha_bar(t);
            let eps_hat = x
                .sub(&x0.scale(ab.sqrt() as f32))
                .unwrap()
                .scale((1.0 / (1.0 - ab).sqrt()) as f32);
            x = ddim_step(&x, &eps_hat, t, t - 1, &s).unwrap();
        }
        for (a, b) in x.to_vec().iter().zip(x0.to_vec()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn ddpm_sigma2_spot_value() {
        let s = const_beta_sched(3);
        let got = ddpm_sigma2(2, &s);
        assert!((got - 0.02 / 0.0396 * 0.02).abs() < 1e-12);
        assert!((got - 0.010101010101).abs() < 1e-9);
    }

    #[test]
    fn ddpm_final_step_is_deterministic() {
        let s = const_beta_sched(5);
        let mut rng_a = Rng::new(8);
        let mut rng_b = Rng::new(9999);
        let x = Tensor::full(&[2, 2], 0.7);
        let e = Tensor::full(&[2, 2], -0.1);
        let a = ddpm_step(&x, &e, 1, &s, &mut rng_a).unwrap();
        let b = ddpm_step(&x, &e, 1, &s, &mut rng_b).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn ddpm_monte_carlo_mean_matches_mu() {
        let s = const_beta_sched(5);
        let x = Tensor::full(&[1, 1], 0.5);
        let e = Tensor::full(&[1, 1], 0.2);
        let t = 3;
        let beta = s.beta(t);
        let ab = s.alpha_bar(t);
        let mu = (0.5 - 0.2 * (beta / (1.0 - ab).sqrt())) / (1.0 - beta).sqrt();
        let sigma = ddpm_sigma2(t, &s).sqrt();
        let n = 10_000usize;
        let mut rng = Rng::new(10);
        let mut acc = 0.0f64;
        for _ in 0..n {
            acc += ddpm_step(&x, &e, t, &s, &mut rng).unwrap().item() as f64;
        }
        let mean = acc / n as f64;
        let bound = 3.0 * sigma / (n as f64).sqrt();
        assert!((mean - mu).abs() < bound, "{mean} vs {mu} (±{bound})");
    }

    #[test]
    fn cfg_combine_degenerate_cases() {
        let mut rng = Rng::new(11);
        let c = Tensor::randn(&[2, 3], &mut rng);
        let u = Tensor::randn(&[2, 3], &mut rng);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap().to_vec(), c.to_vec());
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap().to_vec(), u.to_vec());
        let w = 7.5;
        let same = cfg_combine(&c, &c, w).unwrap();
        assert_eq!(same.to_vec(), c.to_vec());
    }

    #[test]
    fn noise_loss_values_and_gradient() {
        let mut rng = Rng::new(12);
        let e = Tensor::randn(&[3, 4], &mut rng);
        assert_eq!(noise_loss(&e, &e).unwrap().item(), 0.0);

        let shifted = e.add_scalar(1.0);
        let l = noise_loss(&shifted, &e).unwrap().item();
        assert!((l - 1.0).abs() < 1e-6);

        // Gradient w.r.t. eps_hat is 2*(eps_hat - eps)/N.
        let eh = Tensor::randn(&[3, 4], &mut rng).trainable();
        let loss = noise_loss(&eh, &e).unwrap();
        backward(&loss).unwrap();
        let g = eh.grad().unwrap();
        let n = 12.0f32;
        for i in 0..12 {
            let expect = 2.0 * (eh.data()[i] - e.data()[i]) / n;
            assert!((g[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn q_sample_marginal_statistics() {
        // Over many draws at fixed t the sample mean approaches
        // sqrt(ab)*x0 and the variance approaches 1 - ab.
        let s = const_beta_sched(20);
        let t = 12;
        let ab = s.alpha_bar(t);
        let x0v = 0.8f64;
        let x0 = Tensor::full(&[1, 1], x0v as f32);
        let n = 100_000usize;
        let mut rng = Rng::new(13);
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let eps = Tensor::randn(&[1, 1], &mut rng);
            let v = q_sample(&x0, t, &eps, &s).unwrap().item() as f64;
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let sd = (1.0 - ab).sqrt();
        let mean_bound = 3.0 * sd / (n as f64).sqrt();
        let var_bound = 3.0 * (1.0 - ab) * (2.0 / n as f64).sqrt();
        assert!((mean - ab.sqrt() * x0v).abs() < mean_bound);
        assert!((var - (1.0 - ab)).abs() < var_bound);
    }
}
