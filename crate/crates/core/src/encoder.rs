//! Pooling block: a per-frame frontend followed by `blocks` rounds of
//! residual multi-head self-attention and residual memory lookup.
//!
//! Each block computes
//!
//! ```text
//! x' = x + MSA(x)
//! x  = x' + softmax_topk(x' · Uᴷ) · Uⱽ
//! ```
//!
//! with `MSA(x) = [H_1 ‖ … ‖ H_n] · Wᵒ`, `H_h = A_h · V_h` and
//! `A_h = softmax_rows(Q_h K_hᵀ / √d_k)`. There are no biases and no
//! normalization layers inside the blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    /// Number of MSA + memory blocks.
    pub blocks: usize,
    pub heads: usize,
    /// Per-head query/key/value width.
    pub d_k: usize,
    pub memory_size: usize,
    /// Memory keys kept per row after scoring.
    pub memory_topk: usize,
    /// Per-frame `tanh(x·W + b)` layers ahead of the blocks.
    pub frontend_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 32,
            blocks: 2,
            heads: 8,
            d_k: 4,
            memory_size: 64,
            memory_topk: 16,
            frontend_layers: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_k == 0 || self.memory_size == 0 {
            return bad("encoder extents must be at least 1".into());
        }
        if self.heads * self.d_k != self.d_model {
            return bad(format!(
                "heads ({}) x d_k ({}) must equal d_model ({})",
                self.heads, self.d_k, self.d_model
            ));
        }
        if self.memory_topk == 0 || self.memory_topk > self.memory_size {
            return bad(format!(
                "memory_topk ({}) must lie in 1..={}",
                self.memory_topk, self.memory_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsaLayer {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_out: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLayer {
    /// `d_model × memory_size`.
    pub keys: ParamId,
    /// `memory_size × d_model`.
    pub values: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub msa: MsaLayer,
    pub memory: MemoryLayer,
}

/// Attention matrices of one forward pass, indexed `[layer][head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn last_layer(&self) -> Option<&[Tensor]> {
        self.layers.last().map(Vec::as_slice)
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|a| (0..a.rows()).map(move |r| (a.row_slice(r).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Graph handles produced by one MSA layer.
#[derive(Debug, Clone)]
pub struct MsaTrace {
    pub attention: Vec<Var>,
    pub values: Vec<Var>,
    /// `[H_1 ‖ … ‖ H_n]`, before the output projection.
    pub heads: Var,
    pub out: Var,
}

#[derive(Debug, Clone, Default)]
pub struct EncoderTrace {
    pub layers: Vec<MsaTrace>,
}

impl EncoderTrace {
    pub fn attention_record(&self, g: &Graph) -> AttentionRecord {
        AttentionRecord {
            layers: self
                .layers
                .iter()
                .map(|l| l.attention.iter().map(|&a| g.value(a).clone()).collect())
                .collect(),
        }
    }

    pub fn last(&self) -> Option<&MsaTrace> {
        self.layers.last()
    }
}

/// `(Q, K, V)` of one head: `x · W_hᵠ`, `x · W_hᴷ`, `x · W_hⱽ`.
pub fn project_qkv(
    g: &mut Graph,
    x: Var,
    bound: &Bound,
    layer: &MsaLayer,
    head: usize,
) -> Result<(Var, Var, Var)> {
    if head >= layer.w_q.len() {
        return Err(Error::invalid(format!("head {head} out of {}", layer.w_q.len())));
    }
    let q = g.matmul(x, bound.var(layer.w_q[head]))?;
    let k = g.matmul(x, bound.var(layer.w_k[head]))?;
    let v = g.matmul(x, bound.var(layer.w_v[head]))?;
    Ok((q, k, v))
}

/// Row-stochastic attention matrix `softmax_rows(Q·Kᵀ / √d_k)`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let d_k = g.value(q).cols();
    if g.value(k).cols() != d_k {
        return Err(Error::shape("attention_weights", g.value(q).shape(), g.value(k).shape()));
    }
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    g.softmax(scaled, 1)
}

/// `H = A · V`.
pub fn head_output(g: &mut Graph, a: Var, v: Var) -> Result<Var> {
    g.matmul(a, v)
}

pub fn msa_forward(g: &mut Graph, x: Var, bound: &Bound, layer: &MsaLayer) -> Result<MsaTrace> {
    let heads = layer.w_q.len();
    let mut attention = Vec::with_capacity(heads);
    let mut values = Vec::with_capacity(heads);
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, k, v) = project_qkv(g, x, bound, layer, h)?;
        let a = attention_weights(g, q, k)?;
        outputs.push(head_output(g, a, v)?);
        attention.push(a);
        values.push(v);
    }
    let concat = g.concat_cols(&outputs)?;
    let out = g.matmul(concat, bound.var(layer.w_out))?;
    Ok(MsaTrace {
        attention,
        values,
        heads: concat,
        out,
    })
}

/// `x + softmax_topk(x · Uᴷ) · Uⱽ`; the residual is included.
pub fn memory_forward(
    g: &mut Graph,
    x: Var,
    bound: &Bound,
    layer: &MemoryLayer,
    topk: usize,
) -> Result<Var> {
    let scores = g.matmul(x, bound.var(layer.keys))?;
    let w = g.topk_softmax_rows(scores, topk)?;
    let read = g.matmul(w, bound.var(layer.values))?;
    g.add(x, read)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input_dim: usize,
    pub frontend: Vec<AffineLayer>,
    pub blocks: Vec<Block>,
}

impl Encoder {
    /// Registers freshly initialized parameters in `store`, each drawn
    /// uniformly from `±1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(
        config: &EncoderConfig,
        input_dim: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input width must be at least 1".into()));
        }
        if config.frontend_layers == 0 && input_dim != config.d_model {
            return Err(Error::Config(format!(
                "without frontend layers the input width ({input_dim}) must equal d_model ({})",
                config.d_model
            )));
        }
        let d = config.d_model;
        let mut uniform = |shape: &[usize], fan_in: usize| {
            Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
        };

        let mut frontend = Vec::with_capacity(config.frontend_layers);
        for l in 0..config.frontend_layers {
            let fan_in = if l == 0 { input_dim } else { d };
            let weight = store.add(format!("{prefix}frontend.{l}.weight"), uniform(&[fan_in, d], fan_in));
            let bias = store.add(format!("{prefix}frontend.{l}.bias"), uniform(&[1, d], fan_in));
            frontend.push(AffineLayer { weight, bias });
        }

        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let mut proj = |kind: &str| -> Vec<ParamId> {
                (0..config.heads)
                    .map(|h| {
                        store.add(
                            format!("{prefix}block.{b}.msa.{kind}.{h}"),
                            uniform(&[d, config.d_k], d),
                        )
                    })
                    .collect()
            };
            let w_q = proj("w_q");
            let w_k = proj("w_k");
            let w_v = proj("w_v");
            let w_out = store.add(format!("{prefix}block.{b}.msa.w_out"), uniform(&[d, d], d));
            let keys = store.add(
                format!("{prefix}block.{b}.memory.keys"),
                uniform(&[d, config.memory_size], d),
            );
            let values = store.add(
                format!("{prefix}block.{b}.memory.values"),
                uniform(&[config.memory_size, d], config.memory_size),
            );
            blocks.push(Block {
                msa: MsaLayer { w_q, w_k, w_v, w_out },
                memory: MemoryLayer { keys, values },
            });
        }

        Ok(Encoder {
            config: config.clone(),
            input_dim,
            frontend,
            blocks,
        })
    }

    /// Per-frame frontend; identity when there are no frontend layers.
    pub fn frontend_forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.input_dim {
            return Err(Error::shape("frontend", g.value(x).shape(), &[self.input_dim]));
        }
        let mut h = x;
        for layer in &self.frontend {
            let lin = g.matmul(h, bound.var(layer.weight))?;
            let lin = g.add_row(lin, bound.var(layer.bias))?;
            h = g.tanh(lin);
        }
        Ok(h)
    }

    /// The residual MSA / memory blocks applied to a `T' × d_model` sequence.
    pub fn blocks_forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<(Var, EncoderTrace)> {
        if g.value(x).cols() != self.config.d_model {
            return Err(Error::shape("encoder blocks", g.value(x).shape(), &[self.config.d_model]));
        }
        let mut trace = EncoderTrace::default();
        let mut h = x;
        for block in &self.blocks {
            let msa = msa_forward(g, h, bound, &block.msa)?;
            let after_msa = g.add(h, msa.out)?;
            h = memory_forward(g, after_msa, bound, &block.memory, self.config.memory_topk)?;
            trace.layers.push(msa);
        }
        Ok((h, trace))
    }

    /// Frontend followed by the blocks.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, seq: Var) -> Result<(Var, EncoderTrace)> {
        let x = self.frontend_forward(g, bound, seq)?;
        self.blocks_forward(g, bound, x)
    }
}
