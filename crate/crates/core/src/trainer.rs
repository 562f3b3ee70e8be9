//! Training loops for prompts, heads, biases, full finetuning and the
//! proxy pretraining of the backbone.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::data::{hflip, LabeledImageSet};
use crate::error::{Error, Result};
use crate::optim::{AdamW, ScheduleSpec, WEIGHT_DECAY};
use crate::prompt::{
    composed_from_cache, cross_mask, naive_concat_forward, phase2, predict_source, single_pass, AttentionMode, Head,
    PromptLayout, PromptVariant, PromptVars, SourcePromptSet,
};
use crate::tensor::{argmax, Scalar, Tensor};
use crate::vit::{
    block_forward, embed, final_norm, patchify, AttentionMask, BackboneConfig, BackboneOutput, BackboneParams,
    BackboneVars, Binding,
};

/// Per-run training settings, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub n_devices: usize,
    pub start_lr: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub variant: PromptVariant,
    pub d_mem: usize,
    pub prompt_tokens: usize,
    pub hflip: bool,
    pub attention: AttentionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::prompt()
    }
}

impl TrainConfig {
    /// Prompt tuning: base rate 1e-1, 20 epochs.
    pub fn prompt() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 1,
            batch_size: 8,
            n_devices: 1,
            start_lr: 1e-5,
            base_lr: 1e-1,
            min_lr: 1e-6,
            weight_decay: WEIGHT_DECAY,
            seed: 0,
            variant: PromptVariant::Deep,
            d_mem: crate::prompt::DEFAULT_D_MEM,
            prompt_tokens: 1,
            hflip: false,
            attention: AttentionMode::Structured,
        }
    }

    /// Linear head on the frozen class token: base rate 5e-1.
    pub fn head_only() -> Self {
        Self {
            base_lr: 5e-1,
            ..Self::prompt()
        }
    }

    /// Biases and head: base rate 5e-3.
    pub fn bias_head() -> Self {
        Self {
            base_lr: 5e-3,
            ..Self::prompt()
        }
    }

    /// Every backbone weight and the head. The base rate 3.2e-4 is the
    /// smallest whose batch-8 scaled rate reaches `start_lr` (1e-5).
    pub fn finetune() -> Self {
        Self {
            base_lr: 3.2e-4,
            ..Self::prompt()
        }
    }

    /// Proxy pretraining of a fresh backbone.
    pub fn pretrain() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-2,
            ..Self::prompt()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn layout(&self) -> PromptLayout {
        PromptLayout {
            variant: self.variant,
            d_mem: self.d_mem,
            prompt_tokens: self.prompt_tokens,
        }
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size.max(1)).max(1)
    }

    pub fn schedule(&self, n_samples: usize) -> ScheduleSpec {
        ScheduleSpec {
            start_lr: self.start_lr,
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch(n_samples),
            batch_size: self.batch_size,
            n_devices: self.n_devices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.prompt_tokens == 0 {
            return Err(Error::Config("prompt_tokens must be positive".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs > 0 {
            self.schedule(self.batch_size).validate()?;
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.train_loss)
    }

    /// Mean training loss of the last logged epoch.
    pub fn last_epoch_loss(&self) -> Option<f64> {
        let last = self.rows.last()?.epoch;
        let losses: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.epoch == last)
            .map(|r| r.train_loss)
            .collect();
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Seeded per-epoch permutation and optional flips.
struct Batches {
    rng: ChaCha8Rng,
    n: usize,
    batch: usize,
    flip: bool,
}

impl Batches {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            n,
            batch: cfg.batch_size,
            flip: cfg.hflip,
        }
    }

    /// `(index, flipped)` batches of one epoch.
    fn epoch(&mut self) -> Vec<Vec<(usize, bool)>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        let flips: Vec<bool> = (0..self.n).map(|_| self.flip && self.rng.random_bool(0.5)).collect();
        order
            .chunks(self.batch)
            .map(|c| c.iter().map(|&i| (i, flips[i])).collect())
            .collect()
    }
}

fn check_labels(data: &LabeledImageSet, classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    match data.labels().iter().find(|&&l| l >= classes) {
        Some(&l) => Err(Error::Label { label: l, classes }),
        None => Ok(()),
    }
}

/// Runs `epochs × steps` optimizer steps. `step_fn` builds the loss of one
/// batch and returns it with its gradients for the trainable tensors.
fn run_loop<S: Scalar, P, F, T>(
    cfg: &TrainConfig,
    n_samples: usize,
    params: &mut P,
    names: &[String],
    mut step_fn: F,
    mut tensors: T,
    mut eval: impl FnMut(&P) -> Result<Option<f64>>,
) -> Result<TrainLog>
where
    F: FnMut(&P, &[(usize, bool)]) -> Result<(f64, Vec<Tensor<S>>)>,
    T: for<'x> FnMut(&'x mut P) -> Vec<&'x mut Tensor<S>>,
{
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let schedule = cfg.schedule(n_samples);
    schedule.validate()?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut batches = Batches::new(n_samples, cfg);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let epoch_batches = batches.epoch();
        let last = epoch_batches.len() - 1;
        for (bi, batch) in epoch_batches.iter().enumerate() {
            let lr = schedule.lr_at(step);
            let (loss, grads) = step_fn(params, batch)?;
            opt.step(&mut tensors(params), &grads, names, lr)?;
            let eval_acc = if bi == last { eval(params)? } else { None };
            log.rows.push(LogRow {
                epoch,
                step,
                lr,
                train_loss: loss,
                eval_acc,
            });
            step += 1;
        }
        debug!("epoch {epoch}: loss {:.4}", log.last_epoch_loss().unwrap_or(f64::NAN));
    }
    Ok(log)
}

fn collect_grads<S: Scalar>(g: &Graph<'_, S>, grads: &Gradients<S>, vars: &[Var]) -> Vec<Tensor<S>> {
    vars.iter().map(|&v| grads.tensor(v, g.value(v))).collect()
}

/// Phase-1 outputs for every image (and its mirror when `flips` is set).
pub fn cache_backbone<S: Scalar>(
    backbone: &BackboneParams<S>,
    data: &LabeledImageSet,
    flips: bool,
) -> Result<Vec<[Option<BackboneOutput<S>>; 2]>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let plain = backbone.forward_backbone(data.image(i))?;
            let flipped = if flips {
                Some(backbone.forward_backbone(&hflip(data.image(i), data.image_size, data.channels))?)
            } else {
                None
            };
            Ok([Some(plain), flipped])
        })
        .collect()
}

fn pool_rows<S: Scalar>(g: &mut Graph<'_, S>, rows: Var, groups: usize, per_group: usize) -> Result<Var> {
    if per_group == 1 {
        return Ok(rows);
    }
    let parts = (0..groups)
        .map(|b| {
            let s = g.slice_rows(rows, b * per_group, (b + 1) * per_group)?;
            g.mean_rows(s)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&parts)
}

/// Mean cross-entropy of one prompt over a batch of cached inputs, computed
/// by the structured second phase.
pub fn prompt_loss<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    vars: &BackboneVars,
    prompt: &PromptVars,
    batch: &[&'a BackboneOutput<S>],
    labels: &[usize],
) -> Result<Var> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::shape("prompt batch", &[batch.len()], &[labels.len()]));
    }
    let n_layers = vars.blocks.len();
    let n_z = batch[0].tokens.shape()[0];
    let n_p = g.value(prompt.prompt).shape()[0];
    let d_mem = prompt.memory.first().map_or(0, |&m| g.value(m).shape()[0]);
    let stack = |g: &mut Graph<'a, S>, pick: &dyn Fn(&'a BackboneOutput<S>) -> &'a Tensor<S>| -> Result<Var> {
        if batch.len() == 1 {
            return Ok(g.constant(pick(batch[0])));
        }
        let parts: Vec<&Tensor<S>> = batch.iter().map(|b| pick(b)).collect();
        Ok(g.constant_owned(Tensor::concat_rows(&parts)?))
    };
    let mut z_keys = Vec::with_capacity(n_layers);
    let mut z_values = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        z_keys.push(stack(g, &|b| &b.layers[l].keys)?);
        z_values.push(stack(g, &|b| &b.layers[l].values)?);
    }
    let rows = if batch.len() == 1 {
        prompt.prompt
    } else {
        g.concat_rows(&vec![prompt.prompt; batch.len()])?
    };
    let memory: Vec<Option<Var>> = (0..n_layers).map(|l| prompt.memory_at(l)).collect();
    let groups: Vec<(usize, usize, usize)> = (0..batch.len()).map(|b| (b, 0, n_p)).collect();
    let mask = cross_mask(n_z, batch.len(), &groups, &[d_mem]);
    let out = phase2(g, vars, &z_keys, &z_values, rows, &memory, &mask)?;
    let pooled = pool_rows(g, out, batch.len(), n_p)?;
    let logits = g.linear(pooled, prompt.head_w, Some(prompt.head_b))?;
    g.cross_entropy(logits, labels)
}

/// Same loss with prompts sharing the sequence under full attention.
fn prompt_loss_full<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    vars: &BackboneVars,
    prompt: &PromptVars,
    patches: Vec<Tensor<S>>,
    labels: &[usize],
) -> Result<Var> {
    let n_layers = vars.blocks.len();
    let n_p = g.value(prompt.prompt).shape()[0];
    let d_mem = prompt.memory.first().map_or(0, |&m| g.value(m).shape()[0]);
    let memory: Vec<Option<Var>> = (0..n_layers).map(|l| prompt.memory_at(l)).collect();
    let mut pooled = Vec::with_capacity(patches.len());
    for p in patches {
        let p = g.constant_owned(p);
        let z0 = embed(g, vars, p)?;
        let n_z = g.value(z0).shape()[0];
        let mask = AttentionMask::full(n_z + n_p, n_z + n_p + d_mem);
        let out = single_pass(g, vars, z0, Some(prompt.prompt), &memory, &mask)?;
        let rows = g.slice_rows(out, n_z, n_z + n_p)?;
        pooled.push(pool_rows(g, rows, 1, n_p)?);
    }
    let pooled = g.concat_rows(&pooled)?;
    let logits = g.linear(pooled, prompt.head_w, Some(prompt.head_b))?;
    g.cross_entropy(logits, labels)
}

/// Prompt output of one image under `mode`.
fn prompt_logits<S: Scalar>(
    backbone: &BackboneParams<S>,
    set: &SourcePromptSet<S>,
    image: &[u8],
    mode: AttentionMode,
) -> Result<Vec<S>> {
    let out = match mode {
        AttentionMode::Structured => {
            let cache = backbone.forward_backbone(image)?;
            composed_from_cache(backbone, &cache, &[set])?.remove(0)
        }
        AttentionMode::Full => naive_concat_forward(backbone, image, &[set])?.remove(0),
    };
    predict_source(&out, &set.head, false)
}

/// Accuracy of one prompt on a set labelled in its local label space.
pub fn prompt_accuracy<S: Scalar>(
    backbone: &BackboneParams<S>,
    set: &SourcePromptSet<S>,
    data: &LabeledImageSet,
    mode: AttentionMode,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let hits = (0..data.len())
        .into_par_iter()
        .map(|i| {
            Ok(usize::from(
                argmax(&prompt_logits(backbone, set, data.image(i), mode)?) == data.label(i),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Result of a prompt-tuning run.
#[derive(Debug, Clone)]
pub struct TrainedPrompt<S: Scalar = f32> {
    pub set: SourcePromptSet<S>,
    pub log: TrainLog,
}

/// Tunes one source's prompt, memory and head on a frozen backbone.
///
/// `data` carries local labels `0..label_map.len()`. Under structured
/// attention the backbone pass of every image is computed once and reused
/// by every step.
pub fn train_prompt<S: Scalar>(
    backbone: &BackboneParams<S>,
    data: &LabeledImageSet,
    source_id: &str,
    label_map: Vec<usize>,
    cfg: &TrainConfig,
    eval: Option<&LabeledImageSet>,
) -> Result<TrainedPrompt<S>> {
    if !backbone.is_frozen() {
        return Err(Error::Config("prompt tuning needs a frozen backbone".into()));
    }
    check_labels(data, label_map.len())?;
    cfg.validate()?;
    let mut set = SourcePromptSet::init(
        source_id,
        &cfg.layout(),
        backbone.config(),
        label_map,
        backbone.fingerprint(),
        cfg.seed ^ 0x5e_ed0f_9e0e,
    )?;
    let names = set.tensor_names();
    let cache = match cfg.attention {
        AttentionMode::Structured if cfg.epochs > 0 => cache_backbone(backbone, data, cfg.hflip)?,
        _ => Vec::new(),
    };
    let mode = cfg.attention;
    let step = |set: &SourcePromptSet<S>, batch: &[(usize, bool)]| -> Result<(f64, Vec<Tensor<S>>)> {
        let labels: Vec<usize> = batch.iter().map(|&(i, _)| data.label(i)).collect();
        let mut g = Graph::new();
        let vars = backbone.bind(&mut g, Binding::Frozen);
        let pv = set.bind(&mut g, true);
        let loss = match mode {
            AttentionMode::Structured => {
                let outs: Vec<&BackboneOutput<S>> = batch
                    .iter()
                    .map(|&(i, f)| cache[i][usize::from(f)].as_ref().expect("cached"))
                    .collect();
                prompt_loss(&mut g, &vars, &pv, &outs, &labels)?
            }
            AttentionMode::Full => {
                let patches = batch
                    .iter()
                    .map(|&(i, f)| {
                        let img = if f {
                            hflip(data.image(i), data.image_size, data.channels)
                        } else {
                            data.image(i).to_vec()
                        };
                        patchify::<S>(backbone.config(), &img)
                    })
                    .collect::<Result<Vec<_>>>()?;
                prompt_loss_full(&mut g, &vars, &pv, patches, &labels)?
            }
        };
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0].as_f64(), collect_grads(&g, &grads, &pv.all())))
    };
    let evaluate = |set: &SourcePromptSet<S>| -> Result<Option<f64>> {
        eval.map(|e| prompt_accuracy(backbone, set, e, mode)).transpose()
    };
    let log = run_loop(
        cfg,
        data.len(),
        &mut set,
        &names,
        step,
        SourcePromptSet::tensors_mut,
        evaluate,
    )?;
    Ok(TrainedPrompt { set, log })
}

/// Which parameters a class-token classifier trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    HeadOnly,
    BiasHead,
    Finetune,
}

/// A head on the final-normed class token, with its own backbone unless
/// only the head was trained.
#[derive(Debug, Clone)]
pub struct ClassifierModel<S: Scalar = f32> {
    pub regime: Regime,
    pub backbone: Option<BackboneParams<S>>,
    pub head: Head<S>,
    pub log: TrainLog,
}

impl<S: Scalar> ClassifierModel<S> {
    /// Raw logits; `shared` is used when the model has no backbone of its own.
    pub fn logits(&self, shared: &BackboneParams<S>, image: &[u8]) -> Result<Vec<f64>> {
        let bb = self.backbone.as_ref().unwrap_or(shared);
        let z = bb.forward_tokens(image)?;
        Ok(self.head.logits(z.row(0))?.iter().map(|v| v.as_f64()).collect())
    }

    pub fn accuracy(&self, shared: &BackboneParams<S>, data: &LabeledImageSet) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("evaluation set is empty".into()));
        }
        let hits = (0..data.len())
            .into_par_iter()
            .map(|i| {
                Ok(usize::from(
                    argmax(&self.logits(shared, data.image(i))?) == data.label(i),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
    }
}

/// Trains a linear head on the frozen class-token embeddings.
pub fn train_head_only<S: Scalar>(
    backbone: &BackboneParams<S>,
    data: &LabeledImageSet,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<ClassifierModel<S>> {
    check_labels(data, n_classes)?;
    cfg.validate()?;
    let cache = cache_backbone(backbone, data, cfg.hflip)?;
    let emb = |i: usize, f: bool| -> &[S] { cache[i][usize::from(f)].as_ref().expect("cached").class_embedding() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4ead);
    let mut head = Head::init(n_classes, backbone.config().d_model, &mut rng);
    let names = vec!["head.w".to_string(), "head.b".to_string()];
    let step = |head: &Head<S>, batch: &[(usize, bool)]| -> Result<(f64, Vec<Tensor<S>>)> {
        let rows: Vec<Vec<S>> = batch.iter().map(|&(i, f)| emb(i, f).to_vec()).collect();
        let labels: Vec<usize> = batch.iter().map(|&(i, _)| data.label(i)).collect();
        let mut g = Graph::new();
        let x = g.constant_owned(Tensor::from_rows(&rows)?);
        let w = g.param(&head.w);
        let b = g.param(&head.b);
        let logits = g.linear(x, w, Some(b))?;
        let loss = g.cross_entropy(logits, &labels)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0].as_f64(), collect_grads(&g, &grads, &[w, b])))
    };
    let log = run_loop(cfg, data.len(), &mut head, &names, step, head_tensors, |_| Ok(None))?;
    Ok(ClassifierModel {
        regime: Regime::HeadOnly,
        backbone: None,
        head,
        log,
    })
}

struct Classifier<S: Scalar> {
    backbone: BackboneParams<S>,
    head: Head<S>,
    trainable: Vec<bool>,
}

fn head_tensors<S: Scalar>(h: &mut Head<S>) -> Vec<&mut Tensor<S>> {
    vec![&mut h.w, &mut h.b]
}

impl<S: Scalar> Classifier<S> {
    fn tensors(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = self
            .backbone
            .tensors_mut()
            .expect("training copy is not frozen")
            .into_iter()
            .zip(&self.trainable)
            .filter_map(|(t, &keep)| keep.then_some(t))
            .collect();
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }
}

/// Backpropagates through the whole backbone; only tensors allowed by
/// `binding` and the head receive updates.
fn train_through_backbone<S: Scalar>(
    backbone: BackboneParams<S>,
    binding: Binding,
    data: &LabeledImageSet,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<(BackboneParams<S>, Head<S>, TrainLog)> {
    check_labels(data, n_classes)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf17e);
    let head = Head::init(n_classes, backbone.config().d_model, &mut rng);
    let trainable = {
        let mut g = Graph::new();
        let vars = backbone.bind(&mut g, binding);
        vars.all().iter().map(|&v| g.requires_grad(v)).collect::<Vec<_>>()
    };
    let mut names: Vec<String> = backbone
        .named_tensors()
        .into_iter()
        .zip(&trainable)
        .filter_map(|((n, _), &t)| t.then_some(n))
        .collect();
    names.extend(["head.w".to_string(), "head.b".to_string()]);
    let mut model = Classifier {
        backbone,
        head,
        trainable,
    };
    let step = |m: &Classifier<S>, batch: &[(usize, bool)]| -> Result<(f64, Vec<Tensor<S>>)> {
        let labels: Vec<usize> = batch.iter().map(|&(i, _)| data.label(i)).collect();
        let mut g = Graph::new();
        let vars = m.backbone.bind(&mut g, binding);
        let mut cls = Vec::with_capacity(batch.len());
        for &(i, f) in batch {
            let img = if f {
                hflip(data.image(i), data.image_size, data.channels)
            } else {
                data.image(i).to_vec()
            };
            let p = g.constant_owned(patchify::<S>(m.backbone.config(), &img)?);
            let mut x = embed(&mut g, &vars, p)?;
            for layer in 0..vars.blocks.len() {
                x = block_forward(&mut g, &vars, layer, x, None)?;
            }
            let z = final_norm(&mut g, &vars, x)?;
            cls.push(g.slice_rows(z, 0, 1)?);
        }
        let x = g.concat_rows(&cls)?;
        let w = g.param(&m.head.w);
        let b = g.param(&m.head.b);
        let logits = g.linear(x, w, Some(b))?;
        let loss = g.cross_entropy(logits, &labels)?;
        let grads = g.backward(loss)?;
        let mut targets: Vec<Var> = vars
            .all()
            .into_iter()
            .zip(&m.trainable)
            .filter_map(|(v, &t)| t.then_some(v))
            .collect();
        targets.extend([w, b]);
        Ok((g.value(loss).data()[0].as_f64(), collect_grads(&g, &grads, &targets)))
    };
    if model.backbone.is_frozen() {
        return Err(Error::Frozen);
    }
    let log = run_loop(cfg, data.len(), &mut model, &names, step, Classifier::tensors, |_| {
        Ok(None)
    })?;
    Ok((model.backbone.freeze(), model.head, log))
}

/// Trains the additive biases and the head on a private copy of the backbone.
pub fn train_bias_head<S: Scalar>(
    backbone: &BackboneParams<S>,
    data: &LabeledImageSet,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<ClassifierModel<S>> {
    let (bb, head, log) = train_through_backbone(backbone.thawed_clone(), Binding::BiasOnly, data, n_classes, cfg)?;
    Ok(ClassifierModel {
        regime: Regime::BiasHead,
        backbone: Some(bb),
        head,
        log,
    })
}

/// Trains every weight of a private copy of the backbone plus a head.
pub fn finetune_full<S: Scalar>(
    backbone: &BackboneParams<S>,
    data: &LabeledImageSet,
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<ClassifierModel<S>> {
    let (bb, head, log) = train_through_backbone(backbone.thawed_clone(), Binding::Trainable, data, n_classes, cfg)?;
    Ok(ClassifierModel {
        regime: Regime::Finetune,
        backbone: Some(bb),
        head,
        log,
    })
}

/// Trains a fresh backbone and a throwaway head on a proxy task, then
/// discards the head and returns the frozen backbone.
pub fn pretrain_proxy<S: Scalar>(
    config: &BackboneConfig,
    data: &LabeledImageSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(BackboneParams<S>, TrainLog)> {
    config.validate()?;
    if data.class_count != config.n_classes_proxy {
        return Err(Error::Config(format!(
            "proxy set has {} classes, backbone config expects {}",
            data.class_count, config.n_classes_proxy
        )));
    }
    let init = BackboneParams::init(config, seed)?;
    if cfg.epochs == 0 {
        return Ok((init.freeze(), TrainLog::default()));
    }
    let (bb, _head, log) = train_through_backbone(init, Binding::Trainable, data, config.n_classes_proxy, cfg)?;
    Ok((bb, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Split, SyntheticSpec};

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
            n_classes_proxy: 3,
        }
    }

    fn backbone() -> BackboneParams<f32> {
        BackboneParams::init(&cfg(), 1).unwrap().freeze()
    }

    fn data(classes: usize) -> LabeledImageSet {
        gen_synthetic(&SyntheticSpec::new(classes, 1, 6, 8), 3).unwrap()
    }

    fn quick(base: TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..base
        }
    }

    #[test]
    fn single_class_loss_goes_to_zero() {
        let d = data(1);
        let t = train_prompt(&backbone(), &d, "one", vec![0], &quick(TrainConfig::prompt()), None).unwrap();
        assert!(t.log.final_loss().unwrap() < 1e-3, "{:?}", t.log.final_loss());
    }

    #[test]
    fn prompt_training_leaves_backbone_bytes_alone() {
        let bb = backbone();
        let before = bb.blob_bytes();
        let d = data(3);
        let t = train_prompt(&bb, &d, "s", vec![0, 1, 2], &quick(TrainConfig::prompt()), Some(&d)).unwrap();
        assert_eq!(before, bb.blob_bytes());
        assert_eq!(t.set.backbone_fingerprint, bb.fingerprint());
        assert!(t.log.rows.iter().any(|r| r.eval_acc.is_some()));
    }

    #[test]
    fn prompt_loss_decreases() {
        let d = data(3);
        let c = TrainConfig {
            epochs: 8,
            ..quick(TrainConfig::prompt())
        };
        let t = train_prompt(&backbone(), &d, "s", vec![0, 1, 2], &c, None).unwrap();
        let first: f64 = t
            .log
            .rows
            .iter()
            .filter(|r| r.epoch == 0)
            .map(|r| r.train_loss)
            .sum::<f64>();
        let n0 = t.log.rows.iter().filter(|r| r.epoch == 0).count() as f64;
        assert!(t.log.last_epoch_loss().unwrap() < first / n0);
    }

    #[test]
    fn full_attention_training_runs() {
        let d = data(2);
        let c = TrainConfig {
            attention: AttentionMode::Full,
            epochs: 2,
            hflip: true,
            ..quick(TrainConfig::prompt())
        };
        let t = train_prompt(&backbone(), &d, "s", vec![0, 1], &c, None).unwrap();
        assert!(t.log.final_loss().unwrap().is_finite());
    }

    #[test]
    fn training_is_reproducible() {
        let d = data(3);
        let c = TrainConfig {
            hflip: true,
            ..quick(TrainConfig::prompt())
        };
        let a = train_prompt(&backbone(), &d, "s", vec![0, 1, 2], &c, None).unwrap();
        let b = train_prompt(&backbone(), &d, "s", vec![0, 1, 2], &c, None).unwrap();
        assert_eq!(a.set, b.set);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let d = LabeledImageSet::new(8, 3, 2, Split::Train, vec![], vec![], None).unwrap();
        let r = train_prompt(&backbone(), &d, "s", vec![0, 1], &TrainConfig::prompt(), None);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn label_outside_map_is_rejected() {
        let d = data(3);
        let r = train_prompt(&backbone(), &d, "s", vec![0, 1], &TrainConfig::prompt(), None);
        assert!(matches!(r, Err(Error::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        let bb = BackboneParams::<f32>::init(&cfg(), 1).unwrap();
        let r = train_prompt(&bb, &data(1), "s", vec![0], &TrainConfig::prompt(), None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn head_only_keeps_backbone() {
        let bb = backbone();
        let before = bb.blob_bytes();
        let m = train_head_only(&bb, &data(3), 3, &quick(TrainConfig::head_only())).unwrap();
        assert!(m.backbone.is_none());
        assert_eq!(before, bb.blob_bytes());
        assert!(m.accuracy(&bb, &data(3)).unwrap() >= 0.0);
    }

    #[test]
    fn bias_head_changes_only_biases() {
        let bb = backbone();
        let m = train_bias_head(&bb, &data(3), 3, &quick(TrainConfig::bias_head())).unwrap();
        let tuned = m.backbone.as_ref().unwrap();
        assert!(tuned.is_frozen());
        let mut biases_moved = false;
        for ((name, a), (_, b)) in bb.named_tensors().into_iter().zip(tuned.named_tensors()) {
            let is_bias = name.ends_with("_b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.ends_with("bq")
                || name.ends_with("bk")
                || name.ends_with("bv")
                || name.ends_with("bo");
            if is_bias {
                biases_moved |= a != b;
            } else {
                assert_eq!(a.to_bytes(), b.to_bytes(), "{name} changed");
            }
        }
        assert!(biases_moved);
        assert_ne!(tuned.fingerprint(), bb.fingerprint());
    }

    #[test]
    fn finetune_moves_weights_on_a_copy() {
        let bb = backbone();
        let before = bb.blob_bytes();
        let cfg = TrainConfig {
            batch_size: 8,
            ..quick(TrainConfig::finetune())
        };
        let m = finetune_full(&bb, &data(3), 3, &cfg).unwrap();
        assert_eq!(before, bb.blob_bytes());
        assert_ne!(m.backbone.unwrap().blob_bytes(), before);
    }

    #[test]
    fn zero_epoch_pretrain_returns_frozen_init() {
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::pretrain()
        };
        let (bb, log) = pretrain_proxy::<f32>(&cfg(), &data(3), &c, 1).unwrap();
        assert!(bb.is_frozen());
        assert!(log.rows.is_empty());
        assert_eq!(bb.fingerprint(), backbone().fingerprint());
    }

    #[test]
    fn pretrain_rejects_class_mismatch() {
        let r = pretrain_proxy::<f32>(&cfg(), &data(2), &TrainConfig::pretrain(), 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        let c = TrainConfig {
            seed: 9,
            variant: PromptVariant::Shallow,
            ..TrainConfig::prompt()
        };
        c.save(&path).unwrap();
        assert_eq!(TrainConfig::load(&path).unwrap(), c);
        std::fs::write(&path, r#"{"batch_size": 0}"#).unwrap();
        assert!(matches!(TrainConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn log_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let t = train_prompt(&backbone(), &data(1), "s", vec![0], &quick(TrainConfig::prompt()), None).unwrap();
        let path = dir.path().join("log.csv");
        t.log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("epoch,step,lr,train_loss,eval_acc"));
        assert_eq!(text.lines().count(), t.log.rows.len() + 1);
    }
}
