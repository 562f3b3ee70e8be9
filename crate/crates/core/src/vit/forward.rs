use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::params::{BackboneConfig, BackboneParams, BlockParams, LN_EPS};
use super::AttentionMask;

/// Which backbone tensors become trainable leaves when bound to a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Every tensor is a constant.
    Frozen,
    /// Every tensor is trainable.
    Trainable,
    /// Only additive biases (linear biases and norm shifts) are trainable.
    BiasOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Backbone tensors recorded on a graph.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub patch_embed: Var,
    pub pos: Var,
    pub cls: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_g: Var,
    pub norm_b: Var,
    pub heads: usize,
    pub d_model: usize,
}

impl BackboneVars {
    /// Leaves in [`BackboneParams::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.patch_embed, self.pos, self.cls];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2,
                b.b2,
            ]);
        }
        out.push(self.norm_g);
        out.push(self.norm_b);
        out
    }
}

fn bind_block<'a, S: Scalar>(g: &mut Graph<'a, S>, b: &'a BlockParams<S>, binding: Binding) -> BlockVars {
    let w = binding == Binding::Trainable;
    let bias = binding != Binding::Frozen;
    BlockVars {
        ln1_g: g.leaf(&b.ln1_g, w),
        ln1_b: g.leaf(&b.ln1_b, bias),
        wq: g.leaf(&b.wq, w),
        bq: g.leaf(&b.bq, bias),
        wk: g.leaf(&b.wk, w),
        bk: g.leaf(&b.bk, bias),
        wv: g.leaf(&b.wv, w),
        bv: g.leaf(&b.bv, bias),
        wo: g.leaf(&b.wo, w),
        bo: g.leaf(&b.bo, bias),
        ln2_g: g.leaf(&b.ln2_g, w),
        ln2_b: g.leaf(&b.ln2_b, bias),
        w1: g.leaf(&b.w1, w),
        b1: g.leaf(&b.b1, bias),
        w2: g.leaf(&b.w2, w),
        b2: g.leaf(&b.b2, bias),
    }
}

impl<S: Scalar> BackboneParams<S> {
    /// Records the weights on `g` without copying them.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, S>, binding: Binding) -> BackboneVars {
        let w = binding == Binding::Trainable;
        let bias = binding != Binding::Frozen;
        BackboneVars {
            patch_embed: g.leaf(&self.patch_embed, w),
            pos: g.leaf(&self.pos, w),
            cls: g.leaf(&self.cls, w),
            blocks: self.blocks.iter().map(|b| bind_block(g, b, binding)).collect(),
            norm_g: g.leaf(&self.norm_g, w),
            norm_b: g.leaf(&self.norm_b, bias),
            heads: self.config().n_heads,
            d_model: self.config().d_model,
        }
    }
}

/// Cuts an `H×W×C` byte image into `[N, patch²·C]` rows scaled to [−1, 1].
///
/// Patches are taken in row-major grid order; each row is laid out as
/// `(py, px, c)`.
pub fn patchify<S: Scalar>(cfg: &BackboneConfig, image: &[u8]) -> Result<Tensor<S>> {
    if image.len() != cfg.image_bytes() {
        return Err(Error::Config(format!(
            "image has {} bytes, backbone expects {}×{}×{} = {}",
            image.len(),
            cfg.image_size,
            cfg.image_size,
            cfg.channels,
            cfg.image_bytes()
        )));
    }
    let (side, p, c) = (cfg.image_size / cfg.patch_size, cfg.patch_size, cfg.channels);
    let mut data = Vec::with_capacity(cfg.n_patches() * cfg.patch_dim());
    for gy in 0..side {
        for gx in 0..side {
            for py in 0..p {
                let y = gy * p + py;
                for px in 0..p {
                    let x = gx * p + px;
                    let base = (y * cfg.image_size + x) * c;
                    for ch in 0..c {
                        data.push(S::of(image[base + ch] as f64 / 127.5 - 1.0));
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.n_patches(), cfg.patch_dim()], data)
}

/// `z₀ = [z⁽⁰⁾; E·x⁽ⁱ⁾] + e_pos`, shape `[N+1, d]`.
pub fn embed<S: Scalar>(g: &mut Graph<'_, S>, vars: &BackboneVars, patches: Var) -> Result<Var> {
    let tokens = g.linear(patches, vars.patch_embed, None)?;
    let cls = g.reshape(vars.cls, &[1, vars.d_model])?;
    let seq = g.concat_rows(&[cls, tokens])?;
    g.add(seq, vars.pos)
}

/// Intermediate values of one block application.
#[derive(Debug, Clone, Copy)]
pub struct BlockStep {
    pub out: Var,
    /// Keys and values projected from the normed block input (and memory).
    pub keys: Var,
    pub values: Var,
}

/// Pre-norm block: `x + Attn(LN₁(x))`, then `x + MLP(LN₂(x))`.
///
/// `memory` rows are normed and projected as extra key/value tokens after
/// the rows of `x`; they never act as queries. `mask` is
/// `rows(x) × (rows(x) + rows(memory))`.
pub fn block_step<S: Scalar>(
    g: &mut Graph<'_, S>,
    b: &BlockVars,
    heads: usize,
    x: Var,
    memory: Option<Var>,
    mask: Option<&AttentionMask>,
) -> Result<BlockStep> {
    let h = g.layernorm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
    let q = g.linear(h, b.wq, Some(b.bq))?;
    let kv_in = match memory {
        Some(m) => {
            let hm = g.layernorm(m, b.ln1_g, b.ln1_b, LN_EPS)?;
            g.concat_rows(&[h, hm])?
        }
        None => h,
    };
    let keys = g.linear(kv_in, b.wk, Some(b.bk))?;
    let values = g.linear(kv_in, b.wv, Some(b.bv))?;
    let attn = g.attention(q, keys, values, heads, mask)?;
    let out = attention_residual_mlp(g, b, x, attn)?;
    Ok(BlockStep { out, keys, values })
}

/// `x + W_o·attn`, followed by the MLP sub-block.
pub(crate) fn attention_residual_mlp<S: Scalar>(g: &mut Graph<'_, S>, b: &BlockVars, x: Var, attn: Var) -> Result<Var> {
    let proj = g.linear(attn, b.wo, Some(b.bo))?;
    let x = g.add(x, proj)?;
    let h = g.layernorm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
    let h = g.linear(h, b.w1, Some(b.b1))?;
    let h = g.gelu(h);
    let h = g.linear(h, b.w2, Some(b.b2))?;
    g.add(x, h)
}

/// One block with an optional square mask over the token sequence.
pub fn block_forward<S: Scalar>(
    g: &mut Graph<'_, S>,
    vars: &BackboneVars,
    layer: usize,
    tokens: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let b = vars
        .blocks
        .get(layer)
        .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))?;
    if let Some(m) = mask {
        let n = g.value(tokens).dims2()?.0;
        if m.queries() != n || m.keys() != n {
            return Err(Error::shape("block mask", &[m.queries(), m.keys()], &[n, n]));
        }
    }
    Ok(block_step(g, b, vars.heads, tokens, None, mask)?.out)
}

pub fn final_norm<S: Scalar>(g: &mut Graph<'_, S>, vars: &BackboneVars, x: Var) -> Result<Var> {
    g.layernorm(x, vars.norm_g, vars.norm_b, LN_EPS)
}

/// Per-layer values reused by every prompt: the layer input `z_ℓ` and its
/// key/value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<S: Scalar = f32> {
    pub input: Tensor<S>,
    pub keys: Tensor<S>,
    pub values: Tensor<S>,
}

/// Result of the prompt-independent backbone pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput<S: Scalar = f32> {
    /// Final-normed token sequence `z_L`, `[N+1, d]`; row 0 is the class token.
    pub tokens: Tensor<S>,
    /// One entry per layer.
    pub layers: Vec<LayerCache<S>>,
}

impl<S: Scalar> BackboneOutput<S> {
    pub fn class_embedding(&self) -> &[S] {
        self.tokens.row(0)
    }
}

impl<S: Scalar> BackboneParams<S> {
    /// Plain forward pass, `z_L` only.
    pub fn forward_tokens(&self, image: &[u8]) -> Result<Tensor<S>> {
        let patches = patchify::<S>(self.config(), image)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Binding::Frozen);
        let p = g.constant(&patches);
        let mut x = embed(&mut g, &vars, p)?;
        for layer in 0..vars.blocks.len() {
            x = block_forward(&mut g, &vars, layer, x, None)?;
        }
        let z = final_norm(&mut g, &vars, x)?;
        Ok(g.value(z).clone())
    }

    /// Forward pass that also returns the per-layer key/value cache.
    pub fn forward_backbone(&self, image: &[u8]) -> Result<BackboneOutput<S>> {
        let patches = patchify::<S>(self.config(), image)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Binding::Frozen);
        let p = g.constant(&patches);
        let mut x = embed(&mut g, &vars, p)?;
        let mut layers = Vec::with_capacity(vars.blocks.len());
        for b in &vars.blocks {
            let step = block_step(&mut g, b, vars.heads, x, None, None)?;
            layers.push(LayerCache {
                input: g.value(x).clone(),
                keys: g.value(step.keys).clone(),
                values: g.value(step.values).clone(),
            });
            x = step.out;
        }
        let z = final_norm(&mut g, &vars, x)?;
        Ok(BackboneOutput {
            tokens: g.value(z).clone(),
            layers,
        })
    }
}
