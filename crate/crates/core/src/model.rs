//! A small pre-norm decoder-only transformer with tied input/output
//! embeddings.
//!
//! The prunable surface is exactly the attention projections and the
//! feed-forward matrices of every block. Embeddings, biases and layer-norm
//! parameters are never pruned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::pruning::PruningMask;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Names of the prunable matrices inside one block, in canonical order.
pub const PRUNABLE_IN_BLOCK: [&str; 6] = ["w_q", "w_k", "w_v", "w_o", "w_ff1", "w_ff2"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            context_len: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One pre-norm residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_ff1", "b_ff1", "w_ff2",
    "b_ff2",
];

impl Block {
    fn fields(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
}

/// Parameter counts, optionally under a pruning mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total_params: u64,
    pub prunable_params: u64,
    pub nonzero_params: u64,
    pub sparsity: f64,
}

/// Builds a model with weights drawn from N(0, 0.02²), zero biases and unit
/// gains. The same seed always produces the same weights.
pub fn build_model(config: &ModelConfig) -> Result<TransformerModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut gaussian = |shape: &[usize]| Tensor::from_fn(shape, |_| normal.sample(&mut rng));

    let (v, d, f, c) = (config.vocab_size, config.d_model, config.d_ff, config.context_len);
    let token_embedding = gaussian(&[v, d]);
    let position_embedding = gaussian(&[c, d]);
    let blocks = (0..config.n_layers)
        .map(|_| Block {
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            w_q: gaussian(&[d, d]),
            w_k: gaussian(&[d, d]),
            w_v: gaussian(&[d, d]),
            w_o: gaussian(&[d, d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w_ff1: gaussian(&[d, f]),
            b_ff1: Tensor::zeros(&[f]),
            w_ff2: gaussian(&[f, d]),
            b_ff2: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(TransformerModel {
        config: config.clone(),
        token_embedding,
        position_embedding,
        blocks,
        ln_f_gain: Tensor::ones(&[d]),
        ln_f_bias: Tensor::zeros(&[d]),
    })
}

pub fn is_prunable_name(name: &str) -> bool {
    name.strip_prefix("layers.")
        .and_then(|rest| rest.split_once('.'))
        .is_some_and(|(_, field)| PRUNABLE_IN_BLOCK.contains(&field))
}

impl TransformerModel {
    /// Every parameter with its stable name. Order: token embedding,
    /// position embedding, each block's fields, final layer norm.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &self.ln_f_gain));
        out.push(("ln_f.bias".to_string(), &self.ln_f_bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(b.fields_mut()) {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &mut self.ln_f_gain));
        out.push(("ln_f.bias".to_string(), &mut self.ln_f_bias));
        out
    }

    /// Attention and feed-forward matrices, layer-major, then
    /// `w_q, w_k, w_v, w_o, w_ff1, w_ff2`.
    pub fn prunable_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 6);
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in PRUNABLE_IN_BLOCK
                .iter()
                .zip([&b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_ff1, &b.w_ff2])
            {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        out
    }

    pub fn prunable_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 6);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (field, t) in PRUNABLE_IN_BLOCK.iter().zip([
                &mut b.w_q,
                &mut b.w_k,
                &mut b.w_v,
                &mut b.w_o,
                &mut b.w_ff1,
                &mut b.w_ff2,
            ]) {
                out.push((format!("layers.{i}.{field}"), t));
            }
        }
        out
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.parameters()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn total_params(&self) -> u64 {
        self.parameters().iter().map(|(_, t)| t.len() as u64).sum()
    }

    pub fn prunable_params(&self) -> u64 {
        self.prunable_parameters()
            .iter()
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// Number of prunable weights that are exactly zero.
    pub fn zero_prunable_weights(&self) -> u64 {
        self.prunable_parameters()
            .iter()
            .map(|(_, t)| t.data().iter().filter(|v| **v == 0.0).count() as u64)
            .sum()
    }

    /// Copies every parameter into `g`, in [`TransformerModel::parameters`] order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Builds the forward pass for a batch of equal-length sequences.
    /// Returns logits of shape `[batch·len × vocab]`, sequence-major.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], batch: &[&[usize]]) -> Result<Var> {
        let len = batch.first().map_or(0, |s| s.len());
        for seq in batch {
            self.check_tokens(seq)?;
            if seq.len() != len {
                return Err(Error::Input("batch sequences differ in length".into()));
            }
        }
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let cfg = &self.config;
        let (d, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let rows = batch.len() * len;
        let scale = 1.0 / (dh as f64).sqrt();

        let flat: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..len).collect();
        let tok = g.gather_rows(params[0], &flat)?;
        let pos = g.gather_rows(params[1], &positions)?;
        let mut x = g.add(tok, pos)?;

        for layer in 0..self.blocks.len() {
            let p = |j: usize| params[2 + layer * BLOCK_FIELDS.len() + j];
            let h = g.layer_norm(x, p(0), p(1), LAYER_NORM_EPS)?;
            let q = g.matmul(h, p(2))?;
            let k = g.matmul(h, p(3))?;
            let v = g.matmul(h, p(4))?;
            let mut parts = Vec::with_capacity(batch.len() * heads);
            for b in 0..batch.len() {
                let r0 = b * len;
                for head in 0..heads {
                    let c0 = head * dh;
                    let qh = g.slice_block(q, r0, c0, len, dh)?;
                    let kh = g.slice_block(k, r0, c0, len, dh)?;
                    let vh = g.slice_block(v, r0, c0, len, dh)?;
                    let scores = g.matmul_nt(qh, kh)?;
                    let scores = g.scale(scores, scale);
                    let scores = g.causal_mask(scores)?;
                    let att = g.softmax(scores, 1)?;
                    let out = g.matmul(att, vh)?;
                    parts.push((out, r0, c0));
                }
            }
            let att = g.assemble(&parts, rows, d)?;
            let proj = g.matmul(att, p(5))?;
            x = g.add(x, proj)?;

            let h = g.layer_norm(x, p(6), p(7), LAYER_NORM_EPS)?;
            let f = g.matmul(h, p(8))?;
            let f = g.add_bias(f, p(9))?;
            let f = g.gelu(f);
            let f = g.matmul(f, p(10))?;
            let f = g.add_bias(f, p(11))?;
            x = g.add(x, f)?;
        }
        let n = params.len();
        let x = g.layer_norm(x, params[n - 2], params[n - 1], LAYER_NORM_EPS)?;
        g.matmul_nt(x, params[0])
    }

    /// Logits `[len × vocab]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let logits = self.forward_graph(&mut g, &params, &[tokens])?;
        Ok(g.value(logits).clone())
    }
}

/// Counts parameters. Without a mask every parameter is counted as
/// nonzero; with one, pruned positions are subtracted.
pub fn param_report(model: &TransformerModel, mask: Option<&PruningMask>) -> Result<ParamReport> {
    let total_params = model.total_params();
    let prunable_params = model.prunable_params();
    let pruned = match mask {
        Some(m) => {
            m.check_matches(model)?;
            m.pruned_count()
        }
        None => 0,
    };
    let sparsity = if prunable_params == 0 {
        0.0
    } else {
        pruned as f64 / prunable_params as f64
    };
    Ok(ParamReport {
        total_params,
        prunable_params,
        nonzero_params: total_params - pruned,
        sparsity,
    })
}
