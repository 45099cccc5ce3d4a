//! Pre-norm transformer backbone shared by the teacher and the student.

use rand::Rng;

use super::graph::{Graph, Var};
use super::optim::{Bound, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{DdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            width: 32,
            heads: 4,
            layers: 2,
            mlp_ratio: 4,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return Err(DdError::InvalidInput("transformer sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(DdError::InvalidInput(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Linear {
            w: param_id(store, &format!("{name}.w"))?,
            b: param_id(store, &format!("{name}.b"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add_row(y, p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.g"), Tensor::filled(&[width], T::one())),
            beta: store.add(format!("{name}.b"), Tensor::zeros(&[width])),
        }
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: param_id(store, &format!("{name}.g"))?,
            beta: param_id(store, &format!("{name}.b"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

pub(crate) fn param_id<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<usize> {
    store
        .id(name)
        .ok_or_else(|| DdError::Format(format!("missing parameter `{name}`")))
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: LayerNormParams,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNormParams,
    up: Linear,
    down: Linear,
}

/// Stack of pre-norm blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: TransformerConfig,
    blocks: Vec<Block>,
    ln_f: LayerNormParams,
}

impl Backbone {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, config: TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let hidden = d * config.mlp_ratio;
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = std_in / (2.0 * config.layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("block{i}");
            blocks.push(Block {
                ln1: LayerNormParams::init(store, &format!("{p}.ln1"), d),
                q: Linear::init(store, &format!("{p}.attn.q"), d, d, std_in, rng),
                k: Linear::init(store, &format!("{p}.attn.k"), d, d, std_in, rng),
                v: Linear::init(store, &format!("{p}.attn.v"), d, d, std_in, rng),
                o: Linear::init(store, &format!("{p}.attn.o"), d, d, std_out, rng),
                ln2: LayerNormParams::init(store, &format!("{p}.ln2"), d),
                up: Linear::init(store, &format!("{p}.mlp.up"), d, hidden, std_in, rng),
                down: Linear::init(store, &format!("{p}.mlp.down"), hidden, d, std_out / (config.mlp_ratio as f64).sqrt(), rng),
            });
        }
        let ln_f = LayerNormParams::init(store, "ln_f", d);
        Ok(Backbone { config, blocks, ln_f })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("block{i}");
                Ok(Block {
                    ln1: LayerNormParams::lookup(store, &format!("{p}.ln1"))?,
                    q: Linear::lookup(store, &format!("{p}.attn.q"))?,
                    k: Linear::lookup(store, &format!("{p}.attn.k"))?,
                    v: Linear::lookup(store, &format!("{p}.attn.v"))?,
                    o: Linear::lookup(store, &format!("{p}.attn.o"))?,
                    ln2: LayerNormParams::lookup(store, &format!("{p}.ln2"))?,
                    up: Linear::lookup(store, &format!("{p}.mlp.up"))?,
                    down: Linear::lookup(store, &format!("{p}.mlp.down"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNormParams::lookup(store, "ln_f")?;
        Ok(Backbone { config, blocks, ln_f })
    }

    pub fn config(&self) -> TransformerConfig {
        self.config
    }

    /// `x` is `[batch*seq, width]`; returns the normalized hidden states of the same shape.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, batch: usize, seq: usize, mask: &[bool]) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            let a_in = b.ln1.forward(g, p, h)?;
            let q = b.q.forward(g, p, a_in)?;
            let k = b.k.forward(g, p, a_in)?;
            let v = b.v.forward(g, p, a_in)?;
            let att = g.attention(q, k, v, batch, seq, self.config.heads, mask)?;
            let att = b.o.forward(g, p, att)?;
            h = g.add(h, att)?;
            let m_in = b.ln2.forward(g, p, h)?;
            let up = b.up.forward(g, p, m_in)?;
            let act = g.gelu(up);
            let down = b.down.forward(g, p, act)?;
            h = g.add(h, down)?;
        }
        self.ln_f.forward(g, p, h)
    }
}

/// Each position sees itself and every earlier position.
pub fn causal_mask(seq: usize) -> Vec<bool> {
    let mut m = vec![false; seq * seq];
    for i in 0..seq {
        for j in 0..=i {
            m[i * seq + j] = true;
        }
    }
    m
}
