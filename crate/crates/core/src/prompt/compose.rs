use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{
    attention_residual_mlp, block_step, embed, final_norm, patchify, AttentionMask, BackboneOutput, BackboneParams,
    BackboneVars, Binding, LN_EPS,
};

use super::{ComposedMask, SourcePromptSet};

/// Attention pattern used when prompts share a sequence with the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Inputs ignore prompts; prompts ignore each other.
    #[default]
    Structured,
    /// Every token attends every token.
    Full,
}

/// Backbone output plus one final-normed `[prompt_tokens, d]` block per
/// composed prompt, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedOutput<S: Scalar = f32> {
    pub backbone: BackboneOutput<S>,
    pub prompts: Vec<Tensor<S>>,
}

impl<S: Scalar> ComposedOutput<S> {
    pub fn z_l(&self) -> &Tensor<S> {
        &self.backbone.tokens
    }
}

fn check_fingerprints<S: Scalar>(backbone: &BackboneParams<S>, prompts: &[&SourcePromptSet<S>]) -> Result<()> {
    let expected = backbone.fingerprint();
    for p in prompts {
        if p.backbone_fingerprint != expected {
            return Err(Error::StalePrompt {
                source_id: p.source_id.clone(),
                expected,
                found: p.backbone_fingerprint.clone(),
            });
        }
        p.validate(backbone.config())?;
    }
    Ok(())
}

fn layout<S: Scalar>(n_z: usize, prompts: &[&SourcePromptSet<S>]) -> Result<ComposedMask> {
    let ids: Vec<&str> = prompts.iter().map(|p| p.source_id.as_str()).collect();
    let tokens: Vec<usize> = prompts.iter().map(|p| p.prompt_tokens()).collect();
    let memory: Vec<usize> = prompts.iter().map(|p| p.d_mem()).collect();
    ComposedMask::with_layout(n_z, &ids, &tokens, &memory)
}

/// Concatenated memory rows of `prompts` at `layer`, in prompt order.
fn memory_rows<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    prompts: &[&'a SourcePromptSet<S>],
    layer: usize,
) -> Result<Option<Var>> {
    let parts: Vec<Var> = prompts
        .iter()
        .filter_map(|p| p.memory_at(layer))
        .map(|m| g.constant(m))
        .collect();
    match parts.len() {
        0 => Ok(None),
        1 => Ok(Some(parts[0])),
        _ => g.concat_rows(&parts).map(Some),
    }
}

/// Second phase: prompt rows cross-attend the cached input keys and
/// values, their own projections and their memory.
///
/// `z_keys[l]` and `z_values[l]` hold the cached projections of every
/// input at layer `l`; `memory[l]` the concatenated memory rows. Returns
/// the final-normed prompt rows.
pub(crate) fn phase2<S: Scalar>(
    g: &mut Graph<'_, S>,
    vars: &BackboneVars,
    z_keys: &[Var],
    z_values: &[Var],
    rows: Var,
    memory: &[Option<Var>],
    mask: &AttentionMask,
) -> Result<Var> {
    let mut x = rows;
    for (l, b) in vars.blocks.iter().enumerate() {
        let h = g.layernorm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
        let q = g.linear(h, b.wq, Some(b.bq))?;
        let mut keys = vec![z_keys[l], g.linear(h, b.wk, Some(b.bk))?];
        let mut values = vec![z_values[l], g.linear(h, b.wv, Some(b.bv))?];
        if let Some(m) = memory[l] {
            let hm = g.layernorm(m, b.ln1_g, b.ln1_b, LN_EPS)?;
            keys.push(g.linear(hm, b.wk, Some(b.bk))?);
            values.push(g.linear(hm, b.wv, Some(b.bv))?);
        }
        let k = g.concat_rows(&keys)?;
        let v = g.concat_rows(&values)?;
        let attn = g.attention(q, k, v, vars.heads, Some(mask))?;
        x = attention_residual_mlp(g, b, x, attn)?;
    }
    final_norm(g, vars, x)
}

/// Single-pass forward over `[z; prompt rows]` with memory as extra keys.
/// Returns every final-normed row.
pub(crate) fn single_pass<S: Scalar>(
    g: &mut Graph<'_, S>,
    vars: &BackboneVars,
    z0: Var,
    rows: Option<Var>,
    memory: &[Option<Var>],
    mask: &AttentionMask,
) -> Result<Var> {
    let mut x = match rows {
        Some(r) => g.concat_rows(&[z0, r])?,
        None => z0,
    };
    for (l, b) in vars.blocks.iter().enumerate() {
        x = block_step(g, b, vars.heads, x, memory[l], Some(mask))?.out;
    }
    final_norm(g, vars, x)
}

/// Second phase on top of an existing backbone pass.
pub fn composed_from_cache<S: Scalar>(
    backbone: &BackboneParams<S>,
    cache: &BackboneOutput<S>,
    prompts: &[&SourcePromptSet<S>],
) -> Result<Vec<Tensor<S>>> {
    check_fingerprints(backbone, prompts)?;
    let cfg = backbone.config();
    let mask = layout(cfg.seq_len(), prompts)?;
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    if cache.layers.len() != cfg.n_layers {
        return Err(Error::shape("backbone cache", &[cache.layers.len()], &[cfg.n_layers]));
    }
    let mut g = Graph::new();
    let vars = backbone.bind(&mut g, Binding::Frozen);
    let z_keys: Vec<Var> = cache.layers.iter().map(|c| g.constant(&c.keys)).collect();
    let z_values: Vec<Var> = cache.layers.iter().map(|c| g.constant(&c.values)).collect();
    let parts: Vec<Var> = prompts.iter().map(|p| g.constant(&p.prompt)).collect();
    let rows = g.concat_rows(&parts)?;
    let memory = (0..cfg.n_layers)
        .map(|l| memory_rows(&mut g, prompts, l))
        .collect::<Result<Vec<_>>>()?;
    let out = phase2(&mut g, &vars, &z_keys, &z_values, rows, &memory, &mask.prompt_rows())?;
    let out = g.value(out);
    (0..prompts.len())
        .map(|i| {
            let r = mask.prompt_range(i);
            out.slice_rows(r.start - mask.n_z, r.end - mask.n_z)
        })
        .collect()
}

/// Two-phase composition: one backbone pass shared by every prompt, then
/// per-prompt cross-attention over the cached keys and values.
pub fn composed_forward<S: Scalar>(
    backbone: &BackboneParams<S>,
    image: &[u8],
    prompts: &[&SourcePromptSet<S>],
) -> Result<ComposedOutput<S>> {
    check_fingerprints(backbone, prompts)?;
    let cache = backbone.forward_backbone(image)?;
    let prompts = composed_from_cache(backbone, &cache, prompts)?;
    Ok(ComposedOutput {
        backbone: cache,
        prompts,
    })
}

/// Self-attention over the whole concatenation `[z, p⁽¹⁾..p⁽ᵏ⁾]` with
/// memory as extra keys, masked per `mode`. Returns `z_L` and the prompt
/// outputs.
pub fn reference_forward<S: Scalar>(
    backbone: &BackboneParams<S>,
    image: &[u8],
    prompts: &[&SourcePromptSet<S>],
    mode: AttentionMode,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    check_fingerprints(backbone, prompts)?;
    let cfg = backbone.config();
    let layout = layout(cfg.seq_len(), prompts)?;
    let mask = match mode {
        AttentionMode::Structured => layout.mask.clone(),
        AttentionMode::Full => AttentionMask::full(layout.mask.queries(), layout.mask.keys()),
    };
    let patches = patchify::<S>(cfg, image)?;
    let mut g = Graph::new();
    let vars = backbone.bind(&mut g, Binding::Frozen);
    let p = g.constant(&patches);
    let z0 = embed(&mut g, &vars, p)?;
    let rows = if prompts.is_empty() {
        None
    } else {
        let parts: Vec<Var> = prompts.iter().map(|p| g.constant(&p.prompt)).collect();
        Some(g.concat_rows(&parts)?)
    };
    let memory = (0..cfg.n_layers)
        .map(|l| memory_rows(&mut g, prompts, l))
        .collect::<Result<Vec<_>>>()?;
    let out = single_pass(&mut g, &vars, z0, rows, &memory, &mask)?;
    let out = g.value(out);
    let z_l = out.slice_rows(0, layout.n_z)?;
    let prompt_out = (0..prompts.len())
        .map(|i| {
            let r = layout.prompt_range(i);
            out.slice_rows(r.start, r.end)
        })
        .collect::<Result<_>>()?;
    Ok((z_l, prompt_out))
}

/// Prompt outputs when all tokens attend all tokens.
pub fn naive_concat_forward<S: Scalar>(
    backbone: &BackboneParams<S>,
    image: &[u8],
    prompts: &[&SourcePromptSet<S>],
) -> Result<Vec<Tensor<S>>> {
    Ok(reference_forward(backbone, image, prompts, AttentionMode::Full)?.1)
}
