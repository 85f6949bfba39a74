//! Building blocks of the toy denoiser branches: linear layers, pre-LN
//! temporal self-attention blocks, per-timeframe connectors, and the two
//! cross-modal injection mechanisms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// How conditional features from the other modality enter a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectMode {
    /// Features are projected, time-interpolated to the target length,
    /// added like positional embeddings, then self-attended.
    CmcPe,
    /// Features are mean-pooled to a single vector used as key/value in a
    /// cross-attention block.
    CrossAttention,
}

impl std::str::FromStr for InjectMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<InjectMode> {
        match s {
            "cmc_pe" | "cmc-pe" => Ok(InjectMode::CmcPe),
            "cross_attention" | "cross-attention" => Ok(InjectMode::CrossAttention),
            other => Err(Error::Config(format!(
                "unknown inject mode '{other}' (expected cmc_pe or cross_attention)"
            ))),
        }
    }
}

pub(crate) struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

pub(crate) enum Init {
    Xavier,
    Zero,
}

impl Linear {
    pub fn new(input: usize, output: usize, init: Init, bias: bool, rng: &mut Rng) -> Linear {
        let w = match init {
            Init::Xavier => {
                let std = (2.0 / (input + output) as f64).sqrt();
                Tensor::randn(&[input, output], rng).scale(std as f32).detach()
            }
            Init::Zero => Tensor::zeros(&[input, output]),
        }
        .trainable();
        let b = bias.then(|| Tensor::zeros(&[1, output]).trainable());
        Linear { w, b }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.b"), b.clone()));
        }
    }
}

pub(crate) struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::full(&[1, dim], 1.0).trainable(),
            bias: Tensor::zeros(&[1, dim]).trainable(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(1e-5)?.mul_row(&self.gain)?.add_row(&self.bias)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.g"), self.gain.clone()));
        out.push((format!("{prefix}.b"), self.bias.clone()));
    }
}

/// Scaled dot-product attention; query comes from the target sequence,
/// keys/values from `kv` (equal to the query source for self-attention).
fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.shape()[1];
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f32).sqrt());
    scores.softmax(1)?.matmul(v)
}

/// Pre-LN transformer block with temporal self-attention. Output
/// projections start at zero, so a fresh block is an exact identity.
pub(crate) struct AttentionBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl AttentionBlock {
    pub fn new(dim: usize, rng: &mut Rng) -> AttentionBlock {
        AttentionBlock {
            ln1: LayerNorm::new(dim),
            wq: Linear::new(dim, dim, Init::Xavier, false, rng),
            wk: Linear::new(dim, dim, Init::Xavier, false, rng),
            wv: Linear::new(dim, dim, Init::Xavier, false, rng),
            wo: Linear::new(dim, dim, Init::Zero, false, rng),
            ln2: LayerNorm::new(dim),
            ff1: Linear::new(dim, dim * 2, Init::Xavier, true, rng),
            ff2: Linear::new(dim * 2, dim, Init::Zero, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let q = self.wq.forward(&h)?;
        let k = self.wk.forward(&h)?;
        let v = self.wv.forward(&h)?;
        let o = self.wo.forward(&attend(&q, &k, &v)?)?;
        let x1 = x.add(&o)?;
        let h2 = self.ln2.forward(&x1)?;
        let f = self.ff2.forward(&self.ff1.forward(&h2)?.silu())?;
        x1.add(&f)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.ff1.params(&format!("{prefix}.ff1"), out);
        self.ff2.params(&format!("{prefix}.ff2"), out);
    }
}

/// Per-timeframe encoder: own-modality noisy latents concatenated with the
/// self-conditioning channel, mapped frame-wise to feature vectors. Purely
/// frame-local, so its receptive field is zero frames.
pub(crate) struct Connector {
    l1: Linear,
    l2: Linear,
}

/// Frames of context on each side that can influence one output frame.
pub const CONNECTOR_RECEPTIVE_FIELD: usize = 0;

impl Connector {
    pub fn new(latent_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Connector {
        Connector {
            l1: Linear::new(2 * latent_dim, hidden, Init::Xavier, true, rng),
            l2: Linear::new(hidden, out_dim, Init::Xavier, true, rng),
        }
    }

    /// `x0_self` carries the current clean-data estimate (zeros when
    /// unavailable) and must match `x_noisy` in shape.
    pub fn encode(&self, x_noisy: &Tensor, x0_self: &Tensor) -> Result<Tensor> {
        if x_noisy.shape() != x0_self.shape() {
            return Err(Error::Dim(format!(
                "connector: noisy shape {:?} vs self-conditioning shape {:?}",
                x_noisy.shape(),
                x0_self.shape()
            )));
        }
        let cat = x_noisy.concat_cols(x0_self)?;
        self.l2.forward(&self.l1.forward(&cat)?.silu())
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.l1.params(&format!("{prefix}.l1"), out);
        self.l2.params(&format!("{prefix}.l2"), out);
    }
}

/// One cross-modal injection site. Both modes preserve the target shape and
/// start as exact identities (zero output projections).
pub(crate) struct InjectBlock {
    pub mode: InjectMode,
    /// cond_dim -> target_dim, bias-free so zero conditioning stays zero.
    proj: Linear,
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl InjectBlock {
    pub fn new(mode: InjectMode, target_dim: usize, cond_dim: usize, rng: &mut Rng) -> InjectBlock {
        // CMC-PE self-attends the target; cross-attention reads keys and
        // values from the pooled conditioning vector.
        let kv_dim = match mode {
            InjectMode::CmcPe => target_dim,
            InjectMode::CrossAttention => cond_dim,
        };
        InjectBlock {
            mode,
            proj: Linear::new(cond_dim, target_dim, Init::Xavier, false, rng),
            ln1: LayerNorm::new(target_dim),
            wq: Linear::new(target_dim, target_dim, Init::Xavier, false, rng),
            wk: Linear::new(kv_dim, target_dim, Init::Xavier, false, rng),
            wv: Linear::new(kv_dim, target_dim, Init::Xavier, false, rng),
            wo: Linear::new(target_dim, target_dim, Init::Zero, false, rng),
            ln2: LayerNorm::new(target_dim),
            ff1: Linear::new(target_dim, target_dim * 2, Init::Xavier, true, rng),
            ff2: Linear::new(target_dim * 2, target_dim, Init::Zero, true, rng),
        }
    }

    /// The additive CMC-PE term: conditioning projected to the target width
    /// and linearly interpolated along time to the target frame count.
    pub fn additive_term(&self, cond: &Tensor, target_frames: usize) -> Result<Tensor> {
        if self.mode != InjectMode::CmcPe {
            return Err(Error::Contract(
                "additive_term requires a cmc_pe inject block".into(),
            ));
        }
        self.proj.forward(cond)?.interp_time(target_frames)
    }

    /// CMC-PE: add interpolated conditioning like a positional embedding,
    /// then run one self-attention block over time.
    pub fn cmc_pe_inject(&self, target: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if self.mode != InjectMode::CmcPe {
            return Err(Error::Contract(
                "cmc_pe_inject called on a cross_attention block".into(),
            ));
        }
        let frames = target.shape()[0];
        let x = target.add(&self.additive_term(cond, frames)?)?;
        let h = self.ln1.forward(&x)?;
        let q = self.wq.forward(&h)?;
        let k = self.wk.forward(&h)?;
        let v = self.wv.forward(&h)?;
        let o = self.wo.forward(&attend(&q, &k, &v)?)?;
        let x1 = x.add(&o)?;
        let h2 = self.ln2.forward(&x1)?;
        let f = self.ff2.forward(&self.ff1.forward(&h2)?.silu())?;
        x1.add(&f)
    }

    /// Pooled cross-attention baseline: the conditioning sequence collapses
    /// to a single mean vector before attending, so temporal order in the
    /// conditioning cannot reach the target.
    pub fn cross_attn_inject(&self, target: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if self.mode != InjectMode::CrossAttention {
            return Err(Error::Contract(
                "cross_attn_inject called on a cmc_pe block".into(),
            ));
        }
        let pooled = cond.mean_rows()?;
        let h = self.ln1.forward(target)?;
        let q = self.wq.forward(&h)?;
        let k = self.wk.forward(&pooled)?;
        let v = self.wv.forward(&pooled)?;
        let o = self.wo.forward(&attend(&q, &k, &v)?)?;
        let x1 = target.add(&o)?;
        let h2 = self.ln2.forward(&x1)?;
        let f = self.ff2.forward(&self.ff1.forward(&h2)?.silu())?;
        x1.add(&f)
    }

    pub fn inject(&self, target: &Tensor, cond: &Tensor) -> Result<Tensor> {
        match self.mode {
            InjectMode::CmcPe => self.cmc_pe_inject(target, cond),
            InjectMode::CrossAttention => self.cross_attn_inject(target, cond),
        }
    }

    /// Zero every parameter through which conditioning can reach the
    /// target, making the block an exact identity (ablation probe).
    pub fn null_out(&self) {
        for t in [&self.proj.w, &self.wo.w, &self.ff2.w] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(b) = &self.ff2.b {
            b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.proj.params(&format!("{prefix}.proj"), out);
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.ff1.params(&format!("{prefix}.ff1"), out);
        self.ff2.params(&format!("{prefix}.ff2"), out);
    }
}

/// Sinusoidal features of a local timestep, scaled by its branch's maximum
/// so the embedding is comparable across modalities with different T_max.
pub(crate) fn timestep_embedding(t: usize, t_max: usize, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even");
    let pos = 1000.0 * t as f64 / t_max as f64;
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (-(10_000.0f64).ln() * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        data[i] = (pos * freq).sin() as f32;
        data[half + i] = (pos * freq).cos() as f32;
    }
    Tensor::from_vec(&[1, dim], data).expect("embedding shape")
}
