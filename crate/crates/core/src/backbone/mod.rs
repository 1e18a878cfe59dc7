//! Decoder-only causal transformer and its tokenizer.
//!
//! Pre-norm blocks (`x + attn(ln(x))`, `x + mlp(ln(x))`), GELU MLP with 4x
//! expansion, learned absolute position embeddings added over the whole
//! input stream, and a final layer norm. The language-model head is tied to
//! the token embedding table.

mod pretrain;
pub mod vocab;

pub use pretrain::{synthetic_corpus, synthetic_pretrain, PretrainConfig, PretrainReport};
pub use vocab::Vocabulary;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Size of the timestep embedding table; global timesteps are capped to it.
    pub max_timestep: usize,
    /// Returns-to-go are divided by this before projection.
    pub rtg_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            vocab_size: Vocabulary::standard().len(),
            max_positions: 512,
            state_dim: 4,
            action_dim: 2,
            max_timestep: 300,
            rtg_scale: 300.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("max_timestep", self.max_timestep),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                format!("must divide d_model ({} % {} != 0)", self.d_model, self.n_heads),
            ));
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            return Err(Error::config("model.rtg_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Exact scalar parameter count of a [`DecisionModel`](crate::trajmod::DecisionModel)
    /// built from this config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let backbone = self.vocab_size * d + self.max_positions * d + self.n_layers * block + 2 * d;
        let encoder = d + self.state_dim * d + self.action_dim * d + self.max_timestep * d;
        let head = d * self.action_dim + self.action_dim;
        backbone + encoder + head
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

/// Hidden states of one forward pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `n_layers + 1` states: the input stream (embeddings plus positions),
    /// then the output of each block.
    pub hidden: Vec<Var>,
    /// Final-norm output of the last block.
    pub output: Var,
    /// Per layer, per head `L x L` attention probabilities (when requested).
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

impl Backbone {
    /// Registers parameters under `backbone.*`.
    pub fn new(config: &ModelConfig, params: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = config.d_model;
        let p = "backbone";
        let tok_emb = params.add(format!("{p}.tok_emb"), normal_tensor(rng, &[config.vocab_size, d], INIT_STD));
        let pos_emb = params.add(format!("{p}.pos_emb"), normal_tensor(rng, &[config.max_positions, d], INIT_STD));
        // Residual projections are scaled down with depth, GPT-2 style.
        let resid_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|l| {
                let n = |s: &str| format!("{p}.h{l}.{s}");
                Block {
                    ln1_g: params.add(n("ln1.g"), Tensor::full([d], 1.0)),
                    ln1_b: params.add(n("ln1.b"), Tensor::zeros([d])),
                    w_qkv: params.add(n("attn.w_qkv"), normal_tensor(rng, &[d, 3 * d], INIT_STD)),
                    b_qkv: params.add(n("attn.b_qkv"), Tensor::zeros([3 * d])),
                    w_o: params.add(n("attn.w_o"), normal_tensor(rng, &[d, d], resid_std)),
                    b_o: params.add(n("attn.b_o"), Tensor::zeros([d])),
                    ln2_g: params.add(n("ln2.g"), Tensor::full([d], 1.0)),
                    ln2_b: params.add(n("ln2.b"), Tensor::zeros([d])),
                    w_fc: params.add(n("mlp.w_fc"), normal_tensor(rng, &[d, 4 * d], INIT_STD)),
                    b_fc: params.add(n("mlp.b_fc"), Tensor::zeros([4 * d])),
                    w_proj: params.add(n("mlp.w_proj"), normal_tensor(rng, &[4 * d, d], resid_std)),
                    b_proj: params.add(n("mlp.b_proj"), Tensor::zeros([d])),
                }
            })
            .collect();
        let lnf_g = params.add(format!("{p}.ln_f.g"), Tensor::full([d], 1.0));
        let lnf_b = params.add(format!("{p}.ln_f.b"), Tensor::zeros([d]));
        Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Token embedding lookup, `[ids.len() x d_model]`.
    pub fn embed_tokens<T: Element>(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Result<Var> {
        let table = g.param(self.tok_emb);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(g.gather_rows(table, &idx)?)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, embeddings: Var, causal: bool) -> Result<BackboneOutput> {
        self.run(g, embeddings, causal, false, self.blocks.len())
    }

    /// Forward pass that also keeps every attention matrix.
    pub fn forward_with_attention<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        embeddings: Var,
        causal: bool,
    ) -> Result<BackboneOutput> {
        self.run(g, embeddings, causal, true, self.blocks.len())
    }

    fn run<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        embeddings: Var,
        causal: bool,
        keep_attention: bool,
        n_blocks: usize,
    ) -> Result<BackboneOutput> {
        let shape = g.shape(embeddings).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model {
            return Err(Error::Dimension(format!(
                "backbone input must be [L x {}], got {shape:?}",
                self.config.d_model
            )));
        }
        let len = shape[0];
        if len > self.config.max_positions {
            return Err(Error::Capacity {
                len,
                max: self.config.max_positions,
            });
        }
        let pos_table = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(embeddings, pos)?;
        let mut hidden = vec![x];
        let mut attention = Vec::new();
        for block in &self.blocks[..n_blocks] {
            let (next, probs) = self.block(g, block, x, causal, keep_attention)?;
            x = next;
            hidden.push(x);
            attention.push(probs);
        }
        let gain = g.param(self.lnf_g);
        let bias = g.param(self.lnf_b);
        let output = g.layer_norm(x, gain, bias, LN_EPS)?;
        Ok(BackboneOutput {
            hidden,
            output,
            attention,
        })
    }

    fn block<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        b: &Block,
        x: Var,
        causal: bool,
        keep_attention: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let (g1, b1) = (g.param(b.ln1_g), g.param(b.ln1_b));
        let h = g.layer_norm(x, g1, b1, LN_EPS)?;
        let w_qkv = g.param(b.w_qkv);
        let b_qkv = g.param(b.b_qkv);
        let qkv = g.matmul(h, w_qkv)?;
        let qkv = g.add_row(qkv, b_qkv)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut probs = Vec::new();
        for head in 0..self.config.n_heads {
            let q = g.slice_cols(qkv, head * hd, hd)?;
            let k = g.slice_cols(qkv, d + head * hd, hd)?;
            let v = g.slice_cols(qkv, 2 * d + head * hd, hd)?;
            let scores = g.matmul_bt(q, k)?;
            let scores = g.scale(scores, scale);
            let p = if causal {
                g.causal_softmax(scores)?
            } else {
                g.softmax(scores)
            };
            if keep_attention {
                probs.push(p);
            }
            heads.push(g.matmul(p, v)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let (w_o, b_o) = (g.param(b.w_o), g.param(b.b_o));
        let attn = g.matmul(merged, w_o)?;
        let attn = g.add_row(attn, b_o)?;
        let x = g.add(x, attn)?;

        let (g2, b2) = (g.param(b.ln2_g), g.param(b.ln2_b));
        let h = g.layer_norm(x, g2, b2, LN_EPS)?;
        let (w_fc, b_fc) = (g.param(b.w_fc), g.param(b.b_fc));
        let h = g.matmul(h, w_fc)?;
        let h = g.add_row(h, b_fc)?;
        let h = g.gelu(h);
        let (w_proj, b_proj) = (g.param(b.w_proj), g.param(b.b_proj));
        let h = g.matmul(h, w_proj)?;
        let h = g.add_row(h, b_proj)?;
        Ok((g.add(x, h)?, probs))
    }

    /// Attention probabilities of `layer`, stacked as `[n_heads x L x L]`.
    pub fn attention_map(&self, params: &ParamStore, embeddings: &Tensor, layer: usize, causal: bool) -> Result<Tensor> {
        if layer >= self.blocks.len() {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.blocks.len(),
            });
        }
        let mut g = Graph::<f32>::no_grad(params);
        let x = g.constant(embeddings.clone());
        let out = self.run(&mut g, x, causal, true, layer + 1)?;
        let len = embeddings.shape()[0];
        let mut data = Vec::with_capacity(self.config.n_heads * len * len);
        for &p in &out.attention[layer] {
            data.extend_from_slice(g.value(p).data());
        }
        Ok(Tensor::new([self.config.n_heads, len, len], data)?)
    }

    /// Next-token logits through the tied embedding table.
    pub fn lm_logits<T: Element>(&self, g: &mut Graph<'_, T>, hidden: Var) -> Result<Var> {
        let table = g.param(self.tok_emb);
        Ok(g.matmul_bt(hidden, table)?)
    }

    /// Names of every parameter owned by the backbone.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.w_qkv, b.b_qkv, b.w_o, b.b_o, b.ln2_g, b.ln2_b, b.w_fc, b.b_fc, b.w_proj, b.b_proj,
            ]);
        }
        ids.extend([self.lnf_g, self.lnf_b]);
        ids
    }
}
