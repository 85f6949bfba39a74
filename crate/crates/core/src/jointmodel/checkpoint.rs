//! Versioned checkpoint container: magic, format version, JSON config
//! header, then named tensors (parameters first, optimizer moments after).
//! Round-trips are bit-exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::jointmodel::train::AdamState;
use crate::jointmodel::{JointModel, JointModelConfig};
use crate::numerics::{Rng, Tensor};
use crate::schedule::{Schedule, ScheduleKind};
use crate::wire;

const CKPT_MAGIC: &[u8; 4] = b"AVJC";
const CKPT_VERSION: u32 = 1;

/// Schedule construction parameters (the derived arrays are rebuilt
/// deterministically on load).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    pub fn of(s: &Schedule) -> ScheduleParams {
        ScheduleParams {
            kind: s.kind(),
            t_max: s.t_max(),
            beta_start: s.beta_start(),
            beta_end: s.beta_end(),
        }
    }

    pub fn build(&self) -> Result<Schedule> {
        Schedule::build(self.kind, self.t_max, self.beta_start, self.beta_end)
    }
}

/// Training provenance and generation defaults stored in the header.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointMeta {
    pub epochs_trained: usize,
    pub adam_step: u64,
    pub t_global_default: usize,
    pub gamma_default: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: JointModelConfig,
    sched_video: ScheduleParams,
    sched_audio: ScheduleParams,
    epochs_trained: usize,
    adam_step: u64,
    t_global_default: usize,
    gamma_default: f64,
    param_count: usize,
    has_optimizer_state: bool,
    n_tensors: usize,
}

pub fn save_checkpoint(
    model: &JointModel,
    meta: &CheckpointMeta,
    adam: Option<&AdamState>,
    path: &Path,
) -> Result<()> {
    let p = path.display().to_string();
    let params = model.named_params();
    let n_tensors = params.len() * if adam.is_some() { 3 } else { 1 };
    let header = Header {
        config: model.config().clone(),
        sched_video: ScheduleParams::of(model.schedule_video()),
        sched_audio: ScheduleParams::of(model.schedule_audio()),
        epochs_trained: meta.epochs_trained,
        adam_step: meta.adam_step,
        t_global_default: meta.t_global_default,
        gamma_default: meta.gamma_default,
        param_count: model.param_count(),
        has_optimizer_state: adam.is_some(),
        n_tensors,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    wire::write_magic(&mut w, CKPT_MAGIC, &p)?;
    wire::write_u32(&mut w, CKPT_VERSION, &p)?;
    let json = serde_json::to_string(&header)
        .map_err(|e| Error::Config(format!("checkpoint header encode: {e}")))?;
    wire::write_json_header(&mut w, &json, &p)?;
    for (name, t) in &params {
        wire::write_tensor_record(&mut w, name, t, &p)?;
    }
    if let Some(adam) = adam {
        for (name, m, v) in &adam.moments {
            let shape = [m.len()];
            let mt = Tensor::from_vec(&shape, m.clone())?;
            let vt = Tensor::from_vec(&shape, v.clone())?;
            wire::write_tensor_record(&mut w, &format!("adam.m.{name}"), &mt, &p)?;
            wire::write_tensor_record(&mut w, &format!("adam.v.{name}"), &vt, &p)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(JointModel, CheckpointMeta, Option<AdamState>)> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    wire::check_magic(&mut r, CKPT_MAGIC, "checkpoint", &p)?;
    let version = wire::read_u32(&mut r, &p)?;
    if version != CKPT_VERSION {
        return Err(Error::Incompat(format!(
            "{p}: checkpoint version {version}, expected {CKPT_VERSION}"
        )));
    }
    let json = wire::read_json_header(&mut r, &p)?;
    let header: Header = serde_json::from_str(&json)
        .map_err(|e| Error::Incompat(format!("{p}: bad checkpoint header: {e}")))?;
    let sched_video = header.sched_video.build()?;
    let sched_audio = header.sched_audio.build()?;
    // Parameter values are overwritten below; the init rng is irrelevant.
    let model = JointModel::new(header.config, sched_video, sched_audio, &mut Rng::new(0))?;

    let mut records: HashMap<String, Tensor> = HashMap::with_capacity(header.n_tensors);
    for _ in 0..header.n_tensors {
        let (name, t) = wire::read_tensor_record(&mut r, &p)?;
        records.insert(name, t);
    }

    let params = model.named_params();
    for (name, t) in &params {
        let stored = records.remove(name).ok_or_else(|| {
            Error::Incompat(format!("{p}: checkpoint is missing parameter '{name}'"))
        })?;
        if stored.shape() != t.shape() {
            return Err(Error::Incompat(format!(
                "{p}: parameter '{name}' has shape {:?}, expected {:?}",
                stored.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&stored.data());
    }

    let adam = if header.has_optimizer_state {
        let mut state = AdamState::new(&params);
        state.step = header.adam_step;
        for (name, m, v) in &mut state.moments {
            let mt = records.remove(&format!("adam.m.{name}")).ok_or_else(|| {
                Error::Incompat(format!("{p}: missing optimizer moment for '{name}'"))
            })?;
            let vt = records.remove(&format!("adam.v.{name}")).ok_or_else(|| {
                Error::Incompat(format!("{p}: missing optimizer moment for '{name}'"))
            })?;
            if mt.numel() != m.len() || vt.numel() != v.len() {
                return Err(Error::Incompat(format!(
                    "{p}: optimizer moment size mismatch for '{name}'"
                )));
            }
            m.copy_from_slice(&mt.data());
            v.copy_from_slice(&vt.data());
        }
        Some(state)
    } else {
        None
    };

    let meta = CheckpointMeta {
        epochs_trained: header.epochs_trained,
        adam_step: header.adam_step,
        t_global_default: header.t_global_default,
        gamma_default: header.gamma_default,
    };
    Ok((model, meta, adam))
}
