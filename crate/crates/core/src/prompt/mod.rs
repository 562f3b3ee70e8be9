//! Per-source prompts, memory tokens and heads, and their composition on a
//! shared frozen backbone.

mod compose;
mod flops;
mod mask;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aptw::PrototypeSet;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Scalar, Tensor};
use crate::vit::trunc_normal;
use crate::vit::BackboneConfig;

pub use compose::{
    composed_forward, composed_from_cache, naive_concat_forward, reference_forward, AttentionMode, ComposedOutput,
};
pub(crate) use compose::{phase2, single_pass};
pub use flops::{flops_backbone, flops_composed, flops_ensemble, flops_naive};
pub(crate) use mask::cross_mask;
pub use mask::{build_mask, ComposedMask};

/// Memory tokens per layer unless overridden.
pub const DEFAULT_D_MEM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// A separate memory block at every layer.
    Deep,
    /// One memory block reused by every layer.
    DeepShared,
    /// No memory tokens.
    Shallow,
}

impl std::str::FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(Self::Deep),
            "deep_shared" | "deep-shared" => Ok(Self::DeepShared),
            "shallow" => Ok(Self::Shallow),
            other => Err(Error::Config(format!("unknown prompt variant `{other}`"))),
        }
    }
}

/// Linear classifier `W·x + b`, `W` shaped `[classes, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<S: Scalar = f32> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Head<S> {
    pub fn zeros(classes: usize, d: usize) -> Self {
        Self {
            w: Tensor::zeros(&[classes, d]),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn init(classes: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: trunc_normal(&[classes, d], rng),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn logits(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.dim() {
            return Err(Error::shape("head", self.w.shape(), &[x.len()]));
        }
        Ok((0..self.classes())
            .map(|c| crate::tensor::dot(self.w.row(c), x) + self.b.data()[c])
            .collect())
    }

    pub fn cast<T: Scalar>(&self) -> Head<T> {
        Head {
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }
}

/// One source's trainable bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePromptSet<S: Scalar = f32> {
    pub source_id: String,
    pub variant: PromptVariant,
    /// `[prompt_tokens, d]`.
    pub prompt: Tensor<S>,
    /// `L` blocks for `Deep`, one for `DeepShared`, none for `Shallow`;
    /// each `[d_mem, d]`.
    pub memory: Vec<Tensor<S>>,
    pub head: Head<S>,
    /// `label_map[local] = global`.
    pub label_map: Vec<usize>,
    pub prototypes: Option<PrototypeSet>,
    pub backbone_fingerprint: String,
}

/// Shape of a fresh prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub variant: PromptVariant,
    pub d_mem: usize,
    pub prompt_tokens: usize,
}

impl Default for PromptLayout {
    fn default() -> Self {
        Self {
            variant: PromptVariant::Deep,
            d_mem: DEFAULT_D_MEM,
            prompt_tokens: 1,
        }
    }
}

/// Graph handles of a bound prompt set.
#[derive(Debug, Clone)]
pub struct PromptVars {
    pub prompt: Var,
    pub memory: Vec<Var>,
    pub head_w: Var,
    pub head_b: Var,
}

impl PromptVars {
    /// Memory tokens used at `layer`, if any.
    pub fn memory_at(&self, layer: usize) -> Option<Var> {
        match self.memory.len() {
            0 => None,
            1 => Some(self.memory[0]),
            _ => Some(self.memory[layer]),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.prompt];
        v.extend(&self.memory);
        v.extend([self.head_w, self.head_b]);
        v
    }
}

impl<S: Scalar> SourcePromptSet<S> {
    /// Truncated-normal prompt and memory, random head.
    pub fn init(
        source_id: impl Into<String>,
        layout: &PromptLayout,
        config: &BackboneConfig,
        label_map: Vec<usize>,
        backbone_fingerprint: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if layout.prompt_tokens == 0 {
            return Err(Error::Config("prompt needs at least one token".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let blocks = match layout.variant {
            PromptVariant::Deep => config.n_layers,
            PromptVariant::DeepShared => 1,
            PromptVariant::Shallow => 0,
        };
        let blocks = if layout.d_mem == 0 { 0 } else { blocks };
        let set = Self {
            source_id: source_id.into(),
            variant: layout.variant,
            prompt: trunc_normal(&[layout.prompt_tokens, d], &mut rng),
            memory: (0..blocks)
                .map(|_| trunc_normal(&[layout.d_mem, d], &mut rng))
                .collect(),
            head: Head::init(label_map.len(), d, &mut rng),
            label_map,
            prototypes: None,
            backbone_fingerprint: backbone_fingerprint.into(),
        };
        set.validate(config)?;
        Ok(set)
    }

    pub fn d_model(&self) -> usize {
        self.prompt.shape()[1]
    }

    pub fn prompt_tokens(&self) -> usize {
        self.prompt.shape()[0]
    }

    pub fn d_mem(&self) -> usize {
        self.memory.first().map_or(0, |m| m.shape()[0])
    }

    pub fn memory_at(&self, layer: usize) -> Option<&Tensor<S>> {
        match self.memory.len() {
            0 => None,
            1 => Some(&self.memory[0]),
            _ => self.memory.get(layer),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let d = config.d_model;
        let bad = |what: String| Err(Error::Composition(format!("source `{}`: {what}", self.source_id)));
        if self.prompt.rank() != 2 || self.prompt.shape()[1] != d || self.prompt.shape()[0] == 0 {
            return bad(format!("prompt shape {:?} for width {d}", self.prompt.shape()));
        }
        let expected_blocks = match self.variant {
            PromptVariant::Deep => [0, config.n_layers],
            PromptVariant::DeepShared => [0, 1],
            PromptVariant::Shallow => [0, 0],
        };
        if !expected_blocks.contains(&self.memory.len()) {
            return bad(format!(
                "{} memory blocks for variant {:?}",
                self.memory.len(),
                self.variant
            ));
        }
        let d_mem = self.d_mem();
        if self.memory.iter().any(|m| m.shape() != [d_mem, d]) {
            return bad("memory blocks disagree in shape".into());
        }
        if self.head.w.shape() != [self.label_map.len(), d] || self.head.b.shape() != [self.label_map.len()] {
            return bad(format!(
                "head {:?} for {} classes",
                self.head.w.shape(),
                self.label_map.len()
            ));
        }
        let distinct: HashSet<_> = self.label_map.iter().collect();
        if distinct.len() != self.label_map.len() {
            return bad("label map is not injective".into());
        }
        if self.label_map.is_empty() {
            return bad("empty label map".into());
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.prompt.numel()
            + self.memory.iter().map(Tensor::numel).sum::<usize>()
            + self.head.w.numel()
            + self.head.b.numel()
    }

    /// Records the parameters on `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, S>, trainable: bool) -> PromptVars {
        PromptVars {
            prompt: g.leaf(&self.prompt, trainable),
            memory: self.memory.iter().map(|m| g.leaf(m, trainable)).collect(),
            head_w: g.leaf(&self.head.w, trainable),
            head_b: g.leaf(&self.head.b, trainable),
        }
    }

    /// Mutable tensors in [`PromptVars::all`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = vec![&mut self.prompt];
        v.extend(self.memory.iter_mut());
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = vec!["prompt".to_string()];
        v.extend((0..self.memory.len()).map(|l| format!("memory.{l}")));
        v.extend(["head.w".to_string(), "head.b".to_string()]);
        v
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v = vec![&self.prompt];
        v.extend(self.memory.iter());
        v.extend([&self.head.w, &self.head.b]);
        self.tensor_names().into_iter().zip(v).collect()
    }

    pub fn cast<T: Scalar>(&self) -> SourcePromptSet<T> {
        SourcePromptSet {
            source_id: self.source_id.clone(),
            variant: self.variant,
            prompt: self.prompt.cast(),
            memory: self.memory.iter().map(Tensor::cast).collect(),
            head: self.head.cast(),
            label_map: self.label_map.clone(),
            prototypes: self.prototypes.clone(),
            backbone_fingerprint: self.backbone_fingerprint.clone(),
        }
    }
}

/// Mean over the prompt tokens of a final-normed prompt output.
pub fn pool_tokens<S: Scalar>(p_l: &Tensor<S>) -> Result<Vec<S>> {
    let (rows, cols) = p_l.dims2()?;
    let mut out = vec![S::zero(); cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(p_l.row(r)) {
            *o += v;
        }
    }
    let n = S::of(rows as f64);
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// `head(p_L)` over local classes, softmaxed when `apply_softmax` is set.
pub fn predict_source<S: Scalar>(p_l: &Tensor<S>, head: &Head<S>, apply_softmax: bool) -> Result<Vec<S>> {
    let mut out = head.logits(&pool_tokens(p_l)?)?;
    if apply_softmax {
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN logit".into()));
        }
        softmax_in_place(&mut out);
    }
    Ok(out)
}

/// Elementwise mean of prompts, memories and heads.
pub fn average_prompts<S: Scalar>(sets: &[&SourcePromptSet<S>]) -> Result<SourcePromptSet<S>> {
    let first = *sets.first().ok_or(Error::EmptySelection)?;
    for s in &sets[1..] {
        if s.label_map != first.label_map {
            return Err(Error::Composition(format!(
                "cannot average `{}` and `{}`: label maps differ",
                first.source_id, s.source_id
            )));
        }
        if s.variant != first.variant
            || s.prompt.shape() != first.prompt.shape()
            || s.memory.len() != first.memory.len()
            || s.head.w.shape() != first.head.w.shape()
        {
            return Err(Error::Composition(format!(
                "cannot average `{}` and `{}`: shapes differ",
                first.source_id, s.source_id
            )));
        }
        if s.backbone_fingerprint != first.backbone_fingerprint {
            return Err(Error::Composition(
                "cannot average prompts of different backbones".into(),
            ));
        }
    }
    let mean = |pick: &dyn Fn(&SourcePromptSet<S>) -> &Tensor<S>| -> Result<Tensor<S>> {
        Tensor::mean_of(&sets.iter().map(|s| pick(s)).collect::<Vec<_>>())
    };
    Ok(SourcePromptSet {
        source_id: format!(
            "avg({})",
            sets.iter().map(|s| s.source_id.as_str()).collect::<Vec<_>>().join("+")
        ),
        variant: first.variant,
        prompt: mean(&|s| &s.prompt)?,
        memory: (0..first.memory.len())
            .map(|l| mean(&|s| &s.memory[l]))
            .collect::<Result<_>>()?,
        head: Head {
            w: mean(&|s| &s.head.w)?,
            b: mean(&|s| &s.head.b)?,
        },
        label_map: first.label_map.clone(),
        prototypes: None,
        backbone_fingerprint: first.backbone_fingerprint.clone(),
    })
}
