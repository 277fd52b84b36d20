//! A small decoder-only transformer with a gated (SwiGLU) feed-forward block.
//!
//! Every layer exposes one observation and intervention site: the post-gate
//! activation `silu(x·W_gate) ⊙ (x·W_up)`, i.e. exactly the vector the
//! down-projection consumes. Taps record it, [`TapDirective`]s rewrite it.

mod checkpoint;
mod directive;
mod forward;
mod generate;
mod plant;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use directive::{CompiledDirectives, NeuronTarget, TapDirective, TapOp, TapValues};
pub use forward::{ActivationTap, ForwardOutput, KvCache};
pub use generate::{generate, GenerationSettings};
pub use plant::{plant_model, random_plant, PlantLedger, PlantOptions, PlantSpec, G_HI, PLANT_NOISE};
pub use train::{init_checkpoint, train_tiny, TrainHyper, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Width of the gated FFN, i.e. the number of neurons per layer at the tap.
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f32,
    pub rope_base: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} is below 2", self.vocab_size));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps {} must be positive", self.norm_eps));
        }
        if !(self.rope_base > 0.0) {
            return bad(format!("rope_base {} must be positive", self.rope_base));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of tap neurons across all layers.
    pub fn total_neurons(&self) -> usize {
        self.n_layers * self.d_ff
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    /// `[d_ff, d_model]`
    pub w_gate: Vec<f32>,
    /// `[d_ff, d_model]`
    pub w_up: Vec<f32>,
    /// `[d_model, d_ff]`
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// `[vocab, d_model]`
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `[vocab, d_model]`
    pub unembed: Vec<f32>,
}

/// Name and shape of every tensor, in file order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let mut out = vec![("embed".to_string(), vec![v, d])];
    for i in 0..config.n_layers {
        let p = format!("layers.{i}");
        out.push((format!("{p}.attn_norm"), vec![d]));
        out.push((format!("{p}.attn.wq"), vec![d, d]));
        out.push((format!("{p}.attn.wk"), vec![d, d]));
        out.push((format!("{p}.attn.wv"), vec![d, d]));
        out.push((format!("{p}.attn.wo"), vec![d, d]));
        out.push((format!("{p}.ffn_norm"), vec![d]));
        out.push((format!("{p}.ffn.gate"), vec![f, d]));
        out.push((format!("{p}.ffn.up"), vec![f, d]));
        out.push((format!("{p}.ffn.down"), vec![d, f]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![v, d]));
    out
}

impl Checkpoint {
    /// All-zero weights (norm gains included) for the given config.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let layer = LayerWeights {
            attn_norm: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ffn_norm: vec![0.0; d],
            w_gate: vec![0.0; f * d],
            w_up: vec![0.0; f * d],
            w_down: vec![0.0; d * f],
        };
        Ok(Checkpoint {
            layers: vec![layer; config.n_layers],
            embed: vec![0.0; v * d],
            final_norm: vec![0.0; d],
            unembed: vec![0.0; v * d],
            config,
        })
    }

    /// Tensors in file order, matching [`tensor_layout`].
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                &l.attn_norm[..],
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.unembed);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
