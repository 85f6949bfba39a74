//! Joint training: independently sampled per-modality local timesteps,
//! self-conditioning, label dropout for classifier-free guidance, and a
//! seeded Adam loop with per-epoch checkpoints.

use std::path::{Path, PathBuf};

use crate::datagen::PairSample;
use crate::diffusion::{clamp_x0, noise_loss, predict_x0, q_sample, Denoiser};
use crate::error::{Error, Result};
use crate::jointmodel::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::jointmodel::JointModel;
use crate::numerics::{backward, no_grad, Rng, Tensor};

/// Stochastic choices of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossOpts {
    /// Probability of running the gradient-free preliminary pass that
    /// produces the self-conditioning input.
    pub self_cond_prob: f64,
    /// Probability of replacing the class label with the null label.
    pub label_drop_prob: f64,
}

impl Default for LossOpts {
    fn default() -> Self {
        LossOpts {
            self_cond_prob: 0.5,
            label_drop_prob: 0.1,
        }
    }
}

/// Draw the two local timesteps independently and uniformly from
/// [1, t_max] of each modality.
pub fn sample_local_timesteps(rng: &mut Rng, t_video_max: usize, t_audio_max: usize) -> (usize, usize) {
    let t_v = rng.uniform_int(1, t_video_max as i64) as usize;
    let t_a = rng.uniform_int(1, t_audio_max as i64) as usize;
    (t_v, t_a)
}

/// Joint objective over a batch: per sample, corrupt each modality at its
/// own uniformly drawn local timestep with independent Gaussian noise and
/// sum the two per-modality noise-prediction MSEs; batch-mean of the sums.
///
/// Per-sample random draws happen in a fixed order (t_v, t_a, eps_v, eps_a,
/// label dropout, self-conditioning coin), so a seeded run is reproducible.
pub fn joint_loss(
    den: &dyn Denoiser,
    batch: &[&PairSample],
    opts: LossOpts,
    rng: &mut Rng,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Data("joint_loss: empty batch".into()));
    }
    let sched_v = den.schedule_video().clone();
    let sched_a = den.schedule_audio().clone();
    let mut total: Option<Tensor> = None;
    for sample in batch {
        let (t_v, t_a) = sample_local_timesteps(rng, sched_v.t_max(), sched_a.t_max());
        let eps_v = Tensor::randn(sample.video.shape(), rng);
        let eps_a = Tensor::randn(sample.audio.shape(), rng);
        let x_tv = q_sample(&sample.video, t_v, &eps_v, &sched_v)?;
        let x_ta = q_sample(&sample.audio, t_a, &eps_a, &sched_a)?;
        let label = if rng.uniform() < opts.label_drop_prob {
            den.null_label()
        } else {
            sample.label
        };
        let self_cond = if rng.uniform() < opts.self_cond_prob {
            // Preliminary pass without gradients; its clean-data estimate
            // feeds the conditioned pass.
            let (sc_v, sc_a) = no_grad(|| -> Result<(Tensor, Tensor)> {
                let (e_v, e_a) = den.predict_noise(&x_tv, &x_ta, t_v, t_a, label, None)?;
                Ok((
                    clamp_x0(&predict_x0(&x_tv, &e_v, t_v, &sched_v)?),
                    clamp_x0(&predict_x0(&x_ta, &e_a, t_a, &sched_a)?),
                ))
            })?;
            Some((sc_v, sc_a))
        } else {
            None
        };
        let sc_ref = self_cond.as_ref().map(|(v, a)| (v, a));
        let (eh_v, eh_a) = den.predict_noise(&x_tv, &x_ta, t_v, t_a, label, sc_ref)?;
        let sample_loss = noise_loss(&eh_v, &eps_v)?.add(&noise_loss(&eh_a, &eps_a)?)?;
        total = Some(match total {
            Some(t) => t.add(&sample_loss)?,
            None => sample_loss,
        });
    }
    Ok(total.unwrap().scale(1.0 / batch.len() as f32))
}

/// Adam state (first/second moments per parameter, shared step counter).
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        AdamState {
            step: 0,
            moments: params
                .iter()
                .map(|(n, t)| (n.clone(), vec![0.0; t.numel()], vec![0.0; t.numel()]))
                .collect(),
        }
    }

    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    /// One update over all parameters; `frozen` filters by name.
    fn step_params(
        &mut self,
        params: &[(String, Tensor)],
        lr: f64,
        frozen: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for ((name, t), (mn, m, v)) in params.iter().zip(self.moments.iter_mut()) {
            debug_assert_eq!(name, mn);
            if frozen(name) {
                continue;
            }
            let Some(grad) = t.grad() else { continue };
            let mut data = t.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] as f64;
                let mi = Self::BETA1 * m[i] as f64 + (1.0 - Self::BETA1) * g;
                let vi = Self::BETA2 * v[i] as f64 + (1.0 - Self::BETA2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                data[i] -= (lr * mhat / (vhat.sqrt() + Self::EPS)) as f32;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SaveOpts {
    pub dir: PathBuf,
    /// Write a numbered checkpoint every N epochs (the rolling
    /// `latest.ckpt` is refreshed every epoch).
    pub every: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossOpts,
    /// Freeze the branch cores (everything except connectors and injection
    /// sites) once this epoch index is reached.
    pub freeze_core_after: Option<usize>,
    pub save: Option<SaveOpts>,
    /// First epoch number (1-based); used when resuming.
    pub start_epoch: usize,
    /// Generation defaults recorded into checkpoints.
    pub t_global_default: usize,
    pub gamma_default: f64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            lr: 1e-4,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            loss: LossOpts::default(),
            freeze_core_after: None,
            save: None,
            start_epoch: 1,
            t_global_default: 25,
            gamma_default: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// (epoch number, mean loss) per epoch, in order.
    pub epoch_losses: Vec<(usize, f64)>,
    pub param_count: usize,
    pub latest_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (e, l) in &self.epoch_losses {
            out.push_str(&format!("{e},{l}\n"));
        }
        out
    }
}

/// Seeded mini-batch Adam over the joint objective. A non-finite loss
/// aborts with a diagnostic; previously written checkpoints are left in
/// place.
pub fn train(
    model: &JointModel,
    dataset: &[PairSample],
    opts: &TrainOpts,
    mut adam: Option<AdamState>,
) -> Result<(TrainReport, AdamState)> {
    if dataset.is_empty() {
        return Err(Error::Data("train: dataset is empty".into()));
    }
    if opts.batch_size < 1 || opts.epochs < 1 {
        return Err(Error::Config(
            "train: batch_size and epochs must be >= 1".into(),
        ));
    }
    let params = model.named_params();
    let mut adam = match adam.take() {
        Some(a) => {
            if a.moments.len() != params.len() {
                return Err(Error::Incompat(
                    "train: optimizer state does not match the model".into(),
                ));
            }
            a
        }
        None => AdamState::new(&params),
    };
    let mut rng = Rng::new(opts.seed);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut latest = None;

    for epoch_off in 0..opts.epochs {
        let epoch = opts.start_epoch + epoch_off;
        let core_frozen = opts
            .freeze_core_after
            .map(|after| epoch > after)
            .unwrap_or(false);
        // Seeded shuffle, then fixed-size batches.
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.uniform_int(0, i as i64) as usize;
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&PairSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            for (_, p) in &params {
                p.zero_grad();
            }
            let loss = joint_loss(model, &batch, opts.loss, &mut rng)?;
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch} after {seen} samples"
                )));
            }
            backward(&loss)?;
            adam.step_params(&params, opts.lr, &|name| {
                core_frozen && !JointModel::is_adapter_param(name)
            });
            epoch_loss += loss_val * batch.len() as f64;
            seen += batch.len();
        }
        model.assert_finite().map_err(|e| {
            Error::Diverged(format!("non-finite parameters after epoch {epoch}: {e}"))
        })?;
        let mean_loss = epoch_loss / seen as f64;
        epoch_losses.push((epoch, mean_loss));
        log::info!("epoch {epoch}: loss {mean_loss:.6}");

        if let Some(save) = &opts.save {
            std::fs::create_dir_all(&save.dir).map_err(|e| Error::io(&save.dir, e))?;
            let meta = CheckpointMeta {
                epochs_trained: epoch,
                adam_step: adam.step,
                t_global_default: opts.t_global_default,
                gamma_default: opts.gamma_default,
            };
            let latest_path = save.dir.join("latest.ckpt");
            atomic_save(model, &meta, Some(&adam), &latest_path)?;
            latest = Some(latest_path);
            if save.every > 0 && epoch % save.every == 0 {
                let numbered = save.dir.join(format!("epoch_{epoch:04}.ckpt"));
                atomic_save(model, &meta, Some(&adam), &numbered)?;
            }
        }
    }

    Ok((
        TrainReport {
            epoch_losses,
            param_count: model.param_count(),
            latest_checkpoint: latest,
        },
        adam,
    ))
}

/// Write to a temp file in the same directory, then rename, so an aborted
/// run never leaves a truncated checkpoint behind.
fn atomic_save(
    model: &JointModel,
    meta: &CheckpointMeta,
    adam: Option<&AdamState>,
    path: &Path,
) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    save_checkpoint(model, meta, adam, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
