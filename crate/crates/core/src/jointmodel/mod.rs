//! The two-branch joint model: per-modality toy denoisers, connectors,
//! cross-modal injection sites, label conditioning, the joint training
//! objective with independently sampled local timesteps, and the
//! global-timestep generation loop.

mod blocks;
mod checkpoint;
mod generate;
mod train;

pub use blocks::{InjectMode, CONNECTOR_RECEPTIVE_FIELD};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ScheduleParams};
pub use generate::{joint_generate, GuidanceWeights};
pub use train::{
    joint_loss, sample_local_timesteps, train, AdamState, LossOpts, SaveOpts, TrainOpts,
    TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, Modality};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::schedule::Schedule;

use blocks::{timestep_embedding, AttentionBlock, Connector, InjectBlock, Linear};

/// Architecture of one denoiser branch. The latent shape is
/// [frames x latent_dim]; injection sites are spread over the attention
/// stack round-robin.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub modality: Modality,
    pub frames: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_inject_sites: usize,
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 1
            || self.latent_dim < 1
            || self.hidden_dim < 1
            || self.n_layers < 1
            || self.n_inject_sites < 1
        {
            return Err(Error::Config(
                "branch config: all sizes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Full joint-model architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointModelConfig {
    pub video: BranchConfig,
    pub audio: BranchConfig,
    pub inject_mode: InjectMode,
    pub n_labels: usize,
    pub label_dim: usize,
    pub time_dim: usize,
    pub connector_hidden: usize,
    pub connector_out: usize,
}

impl JointModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        self.audio.validate()?;
        if self.video.modality != Modality::Video || self.audio.modality != Modality::Audio {
            return Err(Error::Config(
                "joint config: branch modalities are swapped".into(),
            ));
        }
        if self.n_labels < 1 {
            return Err(Error::Config("joint config: n_labels must be >= 1".into()));
        }
        if self.label_dim < 1 || self.connector_hidden < 1 || self.connector_out < 1 {
            return Err(Error::Config(
                "joint config: embedding sizes must be >= 1".into(),
            ));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(
                "joint config: time_dim must be even and >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// One denoiser branch: per-frame MLP encoder, temporal attention stack
/// with interleaved injection sites, per-frame decoder.
struct Branch {
    enc: Linear,
    time_proj: Linear,
    blocks: Vec<AttentionBlock>,
    injects: Vec<InjectBlock>,
    dec: Linear,
}

impl Branch {
    fn new(
        cfg: &BranchConfig,
        mode: InjectMode,
        cond_dim: usize,
        label_dim: usize,
        time_dim: usize,
        rng: &mut Rng,
    ) -> Branch {
        let h = cfg.hidden_dim;
        Branch {
            enc: Linear::new(cfg.latent_dim, h, blocks::Init::Xavier, true, rng),
            time_proj: Linear::new(2 * time_dim + label_dim, h, blocks::Init::Xavier, true, rng),
            blocks: (0..cfg.n_layers).map(|_| AttentionBlock::new(h, rng)).collect(),
            injects: (0..cfg.n_inject_sites)
                .map(|_| InjectBlock::new(mode, h, cond_dim, rng))
                .collect(),
            dec: Linear::new(h, cfg.latent_dim, blocks::Init::Xavier, true, rng),
        }
    }

    /// `emb_own`/`emb_other` are the two local-timestep embeddings (own
    /// modality first); `cond` carries the other modality's connector
    /// features.
    fn forward(
        &self,
        x: &Tensor,
        emb_own: &Tensor,
        emb_other: &Tensor,
        label_emb: &Tensor,
        cond: &Tensor,
    ) -> Result<Tensor> {
        let mut h = self.enc.forward(x)?.silu();
        let tl = emb_own.concat_cols(emb_other)?.concat_cols(label_emb)?;
        let temb = self.time_proj.forward(&tl)?.silu();
        h = h.add_row(&temb)?;
        for (layer, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            for (site, inject) in self.injects.iter().enumerate() {
                if site % self.blocks.len() == layer {
                    h = inject.inject(&h, cond)?;
                }
            }
        }
        self.dec.forward(&h)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.enc.params(&format!("{prefix}.enc"), out);
        self.time_proj.params(&format!("{prefix}.time"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.block{i}"), out);
        }
        for (i, b) in self.injects.iter().enumerate() {
            b.params(&format!("{prefix}.inject{i}"), out);
        }
        self.dec.params(&format!("{prefix}.dec"), out);
    }
}

/// Two denoiser branches coupled through connectors and injection sites,
/// plus a shared label-embedding table with a trailing null row for
/// classifier-free guidance.
pub struct JointModel {
    cfg: JointModelConfig,
    sched_video: Schedule,
    sched_audio: Schedule,
    video: Branch,
    audio: Branch,
    conn_video: Connector,
    conn_audio: Connector,
    label_table: Tensor,
}

impl JointModel {
    pub fn new(
        cfg: JointModelConfig,
        sched_video: Schedule,
        sched_audio: Schedule,
        rng: &mut Rng,
    ) -> Result<JointModel> {
        cfg.validate()?;
        let video = Branch::new(
            &cfg.video,
            cfg.inject_mode,
            cfg.connector_out,
            cfg.label_dim,
            cfg.time_dim,
            rng,
        );
        let audio = Branch::new(
            &cfg.audio,
            cfg.inject_mode,
            cfg.connector_out,
            cfg.label_dim,
            cfg.time_dim,
            rng,
        );
        let conn_video = Connector::new(cfg.video.latent_dim, cfg.connector_hidden, cfg.connector_out, rng);
        let conn_audio = Connector::new(cfg.audio.latent_dim, cfg.connector_hidden, cfg.connector_out, rng);
        let label_table = Tensor::randn(&[cfg.n_labels + 1, cfg.label_dim], rng)
            .scale(0.5)
            .detach()
            .trainable();
        Ok(JointModel {
            cfg,
            sched_video,
            sched_audio,
            video,
            audio,
            conn_video,
            conn_audio,
            label_table,
        })
    }

    pub fn config(&self) -> &JointModelConfig {
        &self.cfg
    }

    /// All trainable parameters in a stable order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.video.params("video", &mut out);
        self.audio.params("audio", &mut out);
        self.conn_video.params("conn_video", &mut out);
        self.conn_audio.params("conn_audio", &mut out);
        out.push(("label_table".into(), self.label_table.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Newly introduced adapter parameters (connectors and injection
    /// sites), as opposed to the branch cores that stand in for pretrained
    /// backbones.
    pub fn is_adapter_param(name: &str) -> bool {
        name.starts_with("conn_") || name.contains(".inject")
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, t) in self.named_params() {
            t.assert_finite(&name)?;
        }
        Ok(())
    }

    /// Zero the cross-modal pathway of every injection site; afterwards
    /// each branch is a function of its own inputs only.
    pub fn null_inject_blocks(&self) {
        for b in self.video.injects.iter().chain(self.audio.injects.iter()) {
            b.null_out();
        }
    }

    /// Connector features for one modality (exposed for probes).
    pub fn connector_encode(
        &self,
        modality: Modality,
        x_noisy: &Tensor,
        x0_self: &Tensor,
    ) -> Result<Tensor> {
        match modality {
            Modality::Video => self.conn_video.encode(x_noisy, x0_self),
            Modality::Audio => self.conn_audio.encode(x_noisy, x0_self),
        }
    }

    pub fn video_latent_shape(&self) -> [usize; 2] {
        [self.cfg.video.frames, self.cfg.video.latent_dim]
    }

    pub fn audio_latent_shape(&self) -> [usize; 2] {
        [self.cfg.audio.frames, self.cfg.audio.latent_dim]
    }

    fn check_latent(&self, x: &Tensor, cfg: &BranchConfig, what: &str) -> Result<()> {
        if x.ndim() != 2 || x.shape()[1] != cfg.latent_dim {
            return Err(Error::Dim(format!(
                "{what}: expected [frames, {}], got {:?}",
                cfg.latent_dim,
                x.shape()
            )));
        }
        Ok(())
    }
}

impl Denoiser for JointModel {
    fn predict_noise(
        &self,
        x_video: &Tensor,
        x_audio: &Tensor,
        t_video: usize,
        t_audio: usize,
        label: usize,
        self_cond: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Tensor, Tensor)> {
        self.check_latent(x_video, &self.cfg.video, "video latents")?;
        self.check_latent(x_audio, &self.cfg.audio, "audio latents")?;
        if t_video > self.sched_video.t_max() || t_audio > self.sched_audio.t_max() {
            return Err(Error::Contract(format!(
                "local timesteps ({t_video}, {t_audio}) out of range ([0, {}], [0, {}])",
                self.sched_video.t_max(),
                self.sched_audio.t_max()
            )));
        }
        if label > self.cfg.n_labels {
            return Err(Error::Contract(format!(
                "label {label} out of range (null label is {})",
                self.cfg.n_labels
            )));
        }
        let zeros_v;
        let zeros_a;
        let (sc_v, sc_a) = match self_cond {
            Some((v, a)) => (v, a),
            None => {
                zeros_v = Tensor::zeros(x_video.shape());
                zeros_a = Tensor::zeros(x_audio.shape());
                (&zeros_v, &zeros_a)
            }
        };
        let feats_video = self.conn_video.encode(x_video, sc_v)?;
        let feats_audio = self.conn_audio.encode(x_audio, sc_a)?;
        let label_emb = self.label_table.select_row(label)?;
        let emb_tv = timestep_embedding(t_video, self.sched_video.t_max(), self.cfg.time_dim);
        let emb_ta = timestep_embedding(t_audio, self.sched_audio.t_max(), self.cfg.time_dim);
        let eps_video = self
            .video
            .forward(x_video, &emb_tv, &emb_ta, &label_emb, &feats_audio)?;
        let eps_audio = self
            .audio
            .forward(x_audio, &emb_ta, &emb_tv, &label_emb, &feats_video)?;
        Ok((eps_video, eps_audio))
    }

    fn schedule_video(&self) -> &Schedule {
        &self.sched_video
    }

    fn schedule_audio(&self) -> &Schedule {
        &self.sched_audio
    }

    fn null_label(&self) -> usize {
        self.cfg.n_labels
    }
}

/// Small model configuration used across tests.
#[cfg(test)]
pub(crate) fn test_config(inject_mode: InjectMode) -> JointModelConfig {
    JointModelConfig {
        video: BranchConfig {
            modality: Modality::Video,
            frames: 8,
            latent_dim: 3,
            hidden_dim: 16,
            n_layers: 2,
            n_inject_sites: 2,
        },
        audio: BranchConfig {
            modality: Modality::Audio,
            frames: 16,
            latent_dim: 4,
            hidden_dim: 16,
            n_layers: 2,
            n_inject_sites: 2,
        },
        inject_mode,
        n_labels: 3,
        label_dim: 8,
        time_dim: 8,
        connector_hidden: 16,
        connector_out: 12,
    }
}

#[cfg(test)]
pub(crate) fn test_model(inject_mode: InjectMode, seed: u64) -> JointModel {
    use crate::schedule::ScheduleKind;
    let sv = Schedule::build(ScheduleKind::Linear, 100, 1.5e-3, 1.95e-2).unwrap();
    let sa = Schedule::build(ScheduleKind::ScaledLinear, 80, 8.5e-4, 1.2e-2).unwrap();
    let mut rng = Rng::new(seed);
    JointModel::new(test_config(inject_mode), sv, sa, &mut rng).unwrap()
}
