use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_named, write_named, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Shape of the miniature vision transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_classes_proxy: usize,
}

impl Default for BackboneConfig {
    /// Desk-scale default: 32×32×3 images, 8-pixel patches (16 tokens),
    /// width 64, six layers, four heads.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            mlp_ratio: 4,
            n_classes_proxy: 10,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (
                self.patch_size > 0 && self.image_size.is_multiple_of(self.patch_size),
                "image_size must be divisible by patch_size",
            ),
            (
                self.n_heads > 0 && self.d_model.is_multiple_of(self.n_heads),
                "d_model must be divisible by n_heads",
            ),
            (
                self.channels > 0 && self.n_layers > 0 && self.mlp_ratio > 0,
                "channels, n_layers and mlp_ratio must be positive",
            ),
            (self.n_classes_proxy > 0, "n_classes_proxy must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// Number of patches `N`.
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// `N + 1`: patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn image_bytes(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// Weights of one pre-norm transformer block. Linear weights are `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S: Scalar = f32> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

pub(crate) const BLOCK_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

impl<S: Scalar> BlockParams<S> {
    fn init(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let h = cfg.hidden();
        Self {
            ln1_g: Tensor::filled(&[d], S::one()),
            ln1_b: Tensor::zeros(&[d]),
            wq: trunc_normal(&[d, d], rng),
            bq: Tensor::zeros(&[d]),
            wk: trunc_normal(&[d, d], rng),
            bk: Tensor::zeros(&[d]),
            wv: trunc_normal(&[d, d], rng),
            bv: Tensor::zeros(&[d]),
            wo: trunc_normal(&[d, d], rng),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::filled(&[d], S::one()),
            ln2_b: Tensor::zeros(&[d]),
            w1: trunc_normal(&[h, d], rng),
            b1: Tensor::zeros(&[h]),
            w2: trunc_normal(&[d, h], rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> [&Tensor<S>; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<S>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Backbone weights θ: patch embedding `E`, positional encodings, class
/// token, blocks and the final norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<S: Scalar = f32> {
    config: BackboneConfig,
    pub(crate) patch_embed: Tensor<S>,
    pub(crate) pos: Tensor<S>,
    pub(crate) cls: Tensor<S>,
    pub(crate) blocks: Vec<BlockParams<S>>,
    pub(crate) norm_g: Tensor<S>,
    pub(crate) norm_b: Tensor<S>,
    frozen: bool,
    fingerprint: Option<String>,
}

/// Checkpoint manifest written next to the tensor blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: BackboneConfig,
    pub fingerprint: String,
    pub tensors: Vec<String>,
}

pub const CHECKPOINT_MANIFEST: &str = "backbone.json";
pub const CHECKPOINT_BLOB: &str = "backbone.bin";

impl<S: Scalar> BackboneParams<S> {
    /// Truncated-normal (σ = 0.02) weights; zero biases and class token.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let patch_embed = trunc_normal(&[d, config.patch_dim()], &mut rng);
        let pos = trunc_normal(&[config.seq_len(), d], &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams::init(config, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            pos,
            cls: Tensor::zeros(&[d]),
            blocks,
            norm_g: Tensor::filled(&[d], S::one()),
            norm_b: Tensor::zeros(&[d]),
            frozen: false,
            fingerprint: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn blocks(&self) -> &[BlockParams<S>] {
        &self.blocks
    }

    pub fn patch_embed(&self) -> &Tensor<S> {
        &self.patch_embed
    }

    pub fn pos(&self) -> &Tensor<S> {
        &self.pos
    }

    pub fn class_token(&self) -> &Tensor<S> {
        &self.cls
    }

    /// Gain and shift of the final layer norm.
    pub fn final_norm_params(&self) -> (&Tensor<S>, &Tensor<S>) {
        (&self.norm_g, &self.norm_b)
    }

    /// Marks the weights immutable and records their content hash.
    pub fn freeze(mut self) -> Self {
        if self.fingerprint.is_none() {
            self.fingerprint = Some(hash_blob(&self.blob_bytes()));
        }
        self.frozen = true;
        self
    }

    /// Mutable copy for full finetuning; the source stays frozen.
    pub fn thawed_clone(&self) -> Self {
        let mut c = self.clone();
        c.frozen = false;
        c.fingerprint = None;
        c
    }

    /// SHA-256 of the serialized tensor blob, hex encoded.
    pub fn fingerprint(&self) -> String {
        match &self.fingerprint {
            Some(f) => f.clone(),
            None => hash_blob(&self.blob_bytes()),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("pos".to_string(), &self.pos),
            ("cls".to_string(), &self.cls),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("norm_g".to_string(), &self.norm_g));
        out.push(("norm_b".to_string(), &self.norm_b));
        out
    }

    /// Mutable view of every tensor, in [`Self::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Result<Vec<&mut Tensor<S>>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        self.fingerprint = None;
        let mut out = vec![&mut self.patch_embed, &mut self.pos, &mut self.cls];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.norm_g);
        out.push(&mut self.norm_b);
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn blob_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_named(&mut out, &self.named_tensors()).expect("writing to a Vec cannot fail");
        out
    }

    /// Converts the element type, keeping the fingerprint of the source.
    pub fn cast<T: Scalar>(&self) -> BackboneParams<T> {
        BackboneParams {
            config: self.config.clone(),
            patch_embed: self.patch_embed.cast(),
            pos: self.pos.cast(),
            cls: self.cls.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: b.ln1_g.cast(),
                    ln1_b: b.ln1_b.cast(),
                    wq: b.wq.cast(),
                    bq: b.bq.cast(),
                    wk: b.wk.cast(),
                    bk: b.bk.cast(),
                    wv: b.wv.cast(),
                    bv: b.bv.cast(),
                    wo: b.wo.cast(),
                    bo: b.bo.cast(),
                    ln2_g: b.ln2_g.cast(),
                    ln2_b: b.ln2_b.cast(),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
            norm_g: self.norm_g.cast(),
            norm_b: self.norm_b.cast(),
            frozen: self.frozen,
            fingerprint: Some(self.fingerprint()),
        }
    }

    /// Writes `backbone.json` and `backbone.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir)?;
        let blob = self.blob_bytes();
        let fingerprint = self.fingerprint.clone().unwrap_or_else(|| hash_blob(&blob));
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            fingerprint: fingerprint.clone(),
            tensors: self.named_tensors().into_iter().map(|(n, _)| n).collect(),
        };
        fs::write(dir.join(CHECKPOINT_BLOB), &blob)?;
        fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(fingerprint)
    }

    /// Loads a checkpoint directory; the result is frozen.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
        manifest.config.validate()?;
        let blob = fs::read(dir.join(CHECKPOINT_BLOB))?;
        let fingerprint = hash_blob(&blob);
        let tensors: Vec<(String, Tensor<S>)> = read_named(&mut blob.as_slice())?;
        let mut params = Self::init(&manifest.config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Format {
                offset: 0,
                message: format!("checkpoint has {} tensors, expected {}", tensors.len(), expected.len()),
            });
        }
        for ((name, shape), ((got_name, t), slot)) in
            expected.iter().zip(tensors.into_iter().zip(params.tensors_mut()?))
        {
            if *name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format {
                    offset: 0,
                    message: format!(
                        "checkpoint tensor `{got_name}` {:?} does not match `{name}` {shape:?}",
                        t.shape()
                    ),
                });
            }
            *slot = t;
        }
        params.fingerprint = Some(fingerprint);
        params.frozen = true;
        Ok(params)
    }
}

pub(crate) fn hash_blob(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Normal(0, σ) samples redrawn outside ±2σ.
pub(crate) fn trunc_normal<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break S::of(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
