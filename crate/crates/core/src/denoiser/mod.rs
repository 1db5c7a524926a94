//! Modulated-GCN noise predictor.
//!
//! Architecture, per batch element:
//!
//! 1. `x_t` (`J x 3`) and the detection `y` (`J x 2`) are concatenated per
//!    joint into `J x 5` node features and lifted to `d_m` channels by an
//!    input modulated-GCN layer.
//! 2. `num_blocks` residual blocks of two modulated-GCN layers follow. After
//!    each block but the last (after the only block if there is one) a
//!    timestep-residual block adds a projection of the time embedding to
//!    every node and applies one more modulated-GCN layer residually.
//! 3. Two per-node linear heads predict the noise (`J x 3`) and the
//!    reconstructed detection (`J x 2`).
//!
//! The time embedding is a sinusoidal encoding of `t` passed through a
//! two-layer MLP (`E -> 4 d_m -> d_m`).

pub mod layers;
mod network;
mod time;

use ndarray::{Array3, ArrayView3, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::skeleton::SkeletonSpec;

pub use layers::{gcn_layer_forward, materialize_joint_weights, GcnLayer, Linear};
pub use network::{Denoiser, ForwardCache};
pub use time::sinusoidal_embedding;

/// Channels per node after fusing `x_t` and `y`.
pub const INPUT_CHANNELS: usize = 5;
pub const DEFAULT_MODEL_DIM: usize = 384;
pub const DEFAULT_NUM_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub num_blocks: usize,
    /// Width of the sinusoidal encoding; defaults to `model_dim`.
    pub time_embed_dim: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub skeleton: SkeletonSpec,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            model_dim: DEFAULT_MODEL_DIM,
            num_blocks: DEFAULT_NUM_BLOCKS,
            time_embed_dim: None,
            activation: Activation::Relu,
            skeleton: SkeletonSpec::h36m17(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 {
            return Err(Error::InvalidConfig("model_dim must be at least 1".into()));
        }
        if self.num_blocks == 0 {
            return Err(Error::InvalidConfig("num_blocks must be at least 1".into()));
        }
        if self.time_embed_dim == Some(0) {
            return Err(Error::InvalidConfig("time_embed_dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim.unwrap_or(self.model_dim)
    }

    pub fn num_time_blocks(&self) -> usize {
        self.num_blocks.saturating_sub(1).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub first: GcnLayer,
    pub second: GcnLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBlock {
    pub proj: Linear,
    pub gcn: GcnLayer,
}

/// Every trainable tensor of the network. Gradients and optimiser moments
/// use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub input: GcnLayer,
    pub blocks: Vec<ResidualBlock>,
    pub time_blocks: Vec<TimeBlock>,
    pub time_hidden: Linear,
    pub time_out: Linear,
    pub eps_head: Linear,
    pub y_head: Linear,
}

fn gcn_tensors<'a>(prefix: &str, l: &'a GcnLayer, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
    out.push((format!("{prefix}.weight"), l.weight.view().into_dyn()));
    out.push((format!("{prefix}.modulation"), l.modulation.view().into_dyn()));
    out.push((format!("{prefix}.bias"), l.bias.view().into_dyn()));
    out.push((format!("{prefix}.mask_p"), l.mask_p.view().into_dyn()));
    out.push((format!("{prefix}.mask_q"), l.mask_q.view().into_dyn()));
}

fn gcn_tensors_mut<'a>(prefix: &str, l: &'a mut GcnLayer, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
    out.push((format!("{prefix}.weight"), l.weight.view_mut().into_dyn()));
    out.push((format!("{prefix}.modulation"), l.modulation.view_mut().into_dyn()));
    out.push((format!("{prefix}.bias"), l.bias.view_mut().into_dyn()));
    out.push((format!("{prefix}.mask_p"), l.mask_p.view_mut().into_dyn()));
    out.push((format!("{prefix}.mask_q"), l.mask_q.view_mut().into_dyn()));
}

fn linear_tensors<'a>(prefix: &str, l: &'a Linear, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
    out.push((format!("{prefix}.weight"), l.weight.view().into_dyn()));
    out.push((format!("{prefix}.bias"), l.bias.view().into_dyn()));
}

fn linear_tensors_mut<'a>(prefix: &str, l: &'a mut Linear, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
    out.push((format!("{prefix}.weight"), l.weight.view_mut().into_dyn()));
    out.push((format!("{prefix}.bias"), l.bias.view_mut().into_dyn()));
}

impl DenoiserParams {
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng: StreamRng = rng::substream(seed, &[rng::domain::INIT]);
        let j = config.skeleton.num_joints();
        let d = config.model_dim;
        let e = config.time_embed_dim();
        let input = GcnLayer::new(&mut rng, j, INPUT_CHANNELS, d);
        let blocks = (0..config.num_blocks)
            .map(|_| ResidualBlock {
                first: GcnLayer::new(&mut rng, j, d, d),
                second: GcnLayer::new(&mut rng, j, d, d),
            })
            .collect();
        let time_blocks = (0..config.num_time_blocks())
            .map(|_| TimeBlock {
                proj: Linear::new(&mut rng, d, d),
                gcn: GcnLayer::new(&mut rng, j, d, d),
            })
            .collect();
        Ok(DenoiserParams {
            input,
            blocks,
            time_blocks,
            time_hidden: Linear::new(&mut rng, e, 4 * d),
            time_out: Linear::new(&mut rng, 4 * d, d),
            eps_head: Linear::new(&mut rng, d, 3),
            y_head: Linear::new(&mut rng, d, 2),
        })
    }

    pub fn zeros_like(&self) -> Self {
        DenoiserParams {
            input: self.input.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    first: b.first.zeros_like(),
                    second: b.second.zeros_like(),
                })
                .collect(),
            time_blocks: self
                .time_blocks
                .iter()
                .map(|b| TimeBlock {
                    proj: b.proj.zeros_like(),
                    gcn: b.gcn.zeros_like(),
                })
                .collect(),
            time_hidden: self.time_hidden.zeros_like(),
            time_out: self.time_out.zeros_like(),
            eps_head: self.eps_head.zeros_like(),
            y_head: self.y_head.zeros_like(),
        }
    }

    /// Named views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        gcn_tensors("input", &self.input, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            gcn_tensors(&format!("blocks.{i}.first"), &b.first, &mut out);
            gcn_tensors(&format!("blocks.{i}.second"), &b.second, &mut out);
        }
        for (i, b) in self.time_blocks.iter().enumerate() {
            linear_tensors(&format!("time_blocks.{i}.proj"), &b.proj, &mut out);
            gcn_tensors(&format!("time_blocks.{i}.gcn"), &b.gcn, &mut out);
        }
        linear_tensors("time_hidden", &self.time_hidden, &mut out);
        linear_tensors("time_out", &self.time_out, &mut out);
        linear_tensors("eps_head", &self.eps_head, &mut out);
        linear_tensors("y_head", &self.y_head, &mut out);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        gcn_tensors_mut("input", &mut self.input, &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            gcn_tensors_mut(&format!("blocks.{i}.first"), &mut b.first, &mut out);
            gcn_tensors_mut(&format!("blocks.{i}.second"), &mut b.second, &mut out);
        }
        for (i, b) in self.time_blocks.iter_mut().enumerate() {
            linear_tensors_mut(&format!("time_blocks.{i}.proj"), &mut b.proj, &mut out);
            gcn_tensors_mut(&format!("time_blocks.{i}.gcn"), &mut b.gcn, &mut out);
        }
        linear_tensors_mut("time_hidden", &mut self.time_hidden, &mut out);
        linear_tensors_mut("time_out", &mut self.time_out, &mut out);
        linear_tensors_mut("eps_head", &mut self.eps_head, &mut out);
        linear_tensors_mut("y_head", &mut self.y_head, &mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// All GCN layers in forward order, for inspection.
    pub fn gcn_layers(&self) -> Vec<(String, &GcnLayer)> {
        let mut out = vec![("input".to_string(), &self.input)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.first"), &b.first));
            out.push((format!("blocks.{i}.second"), &b.second));
            if let Some(tb) = self.time_blocks.get(i) {
                out.push((format!("time_blocks.{i}.gcn"), &tb.gcn));
            }
        }
        out
    }
}

/// Batched predictions: noise `B x J x 3` and detection `B x J x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps: Array3<f64>,
    pub y_recon: Array3<f64>,
}

/// Anything that predicts noise and a reconstructed detection from
/// `(x_t, t, y)`. Implemented by [`Denoiser`] and by test oracles.
pub trait Denoise {
    fn num_joints(&self) -> usize;

    /// `x_t` is `B x J x 3`, `t` has length `B`, `y` is `B x J x 2`.
    fn denoise(&self, x_t: ArrayView3<f64>, t: &[usize], y: ArrayView3<f64>) -> Result<DenoiserOutput>;
}
