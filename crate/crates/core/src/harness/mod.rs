//! End-to-end experiment protocols on toy data and their reports.

mod report;
mod scenarios;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aptw::{DEFAULT_BETA, DEFAULT_K};
use crate::composition::PoolingMode;
use crate::data::{gen_synthetic, LabeledImageSet, SyntheticSpec};
use crate::error::{Error, Result};
use crate::prompt::AttentionMode;
use crate::trainer::{pretrain_proxy, TrainConfig, TrainLog};
use crate::vit::{BackboneConfig, BackboneParams};

pub use report::{linear_r2, mean_std, Aggregate, ExperimentReport, RunRow, Timing};
pub use scenarios::{bench_compose, cil, dil, forget_curve, shard_sweep};

/// Synthetic corpus drawn afresh for every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            samples_per_class: 80,
            noise: 12.0,
            test_fraction: 0.25,
        }
    }
}

/// Proxy task that pretrains the shared backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyConfig {
    pub samples_per_class: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 60,
            data_seed: 1_000_003,
            init_seed: 0,
            train: TrainConfig::pretrain(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgetConfig {
    pub n_sources: usize,
}

impl Default for ForgetConfig {
    fn default() -> Self {
        Self { n_sources: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CilConfig {
    pub n_episodes: usize,
    pub k: usize,
    pub beta: f64,
    pub weight_probabilities: bool,
}

impl Default for CilConfig {
    fn default() -> Self {
        Self {
            n_episodes: 5,
            k: DEFAULT_K,
            beta: DEFAULT_BETA,
            weight_probabilities: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DilConfig {
    pub n_domains: usize,
    pub test_domains: Vec<usize>,
    pub k: usize,
    pub beta: f64,
    pub pooling: PoolingMode,
}

impl Default for DilConfig {
    fn default() -> Self {
        Self {
            n_domains: 4,
            test_domains: vec![3],
            k: DEFAULT_K,
            beta: DEFAULT_BETA,
            pooling: PoolingMode::Logits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![0, 1, 2, 4, 8, 16, 32],
            reps: 5,
        }
    }
}

/// Everything a scenario needs apart from the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub corpus: CorpusConfig,
    pub proxy: ProxyConfig,
    pub prompt: TrainConfig,
    pub finetune: TrainConfig,
    pub head_only: TrainConfig,
    pub seeds: Vec<u64>,
    pub shard_counts: Vec<usize>,
    /// Shard counts that also train the finetuned-shard ensemble; all
    /// counts when absent.
    pub finetune_shard_counts: Option<Vec<usize>>,
    pub paragon_attention: AttentionMode,
    pub forget: ForgetConfig,
    pub cil: CilConfig,
    pub dil: DilConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let backbone = BackboneConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            d_model: 32,
            n_layers: 3,
            n_heads: 2,
            mlp_ratio: 4,
            n_classes_proxy: 10,
        };
        Self {
            backbone,
            corpus: CorpusConfig::default(),
            proxy: ProxyConfig::default(),
            prompt: TrainConfig::prompt(),
            finetune: TrainConfig::finetune(),
            head_only: TrainConfig::head_only(),
            seeds: vec![0, 1, 2, 3, 4],
            shard_counts: vec![1, 2, 4, 6, 8, 10, 20],
            finetune_shard_counts: Some(vec![10, 20]),
            paragon_attention: AttentionMode::Full,
            forget: ForgetConfig::default(),
            cil: CilConfig::default(),
            dil: DilConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.channels != 3 {
            return Err(Error::Config("the synthetic corpus is RGB; channels must be 3".into()));
        }
        for t in [&self.prompt, &self.finetune, &self.head_only, &self.proxy.train] {
            t.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.corpus.test_fraction > 0.0 && self.corpus.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        if self.shard_counts.contains(&0) {
            return Err(Error::Config("shard counts must be positive".into()));
        }
        Ok(())
    }

    fn spec(&self, n_domains: usize) -> SyntheticSpec {
        SyntheticSpec {
            noise: self.corpus.noise,
            ..SyntheticSpec::new(
                self.corpus.n_classes,
                n_domains,
                self.corpus.samples_per_class,
                self.backbone.image_size,
            )
        }
    }

    /// Train and test split of the corpus for `seed`.
    pub fn corpus(&self, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
        gen_synthetic(&self.spec(1), seed)?.stratified_split(self.corpus.test_fraction, seed)
    }

    /// Multi-domain corpus for `seed`.
    pub fn domain_corpus(&self, seed: u64) -> Result<LabeledImageSet> {
        gen_synthetic(&self.spec(self.dil.n_domains), seed)
    }

    /// Proxy pretraining set: a differently seeded palette with
    /// `n_classes_proxy` classes.
    pub fn proxy_data(&self) -> Result<LabeledImageSet> {
        let spec = SyntheticSpec {
            noise: self.corpus.noise,
            ..SyntheticSpec::new(
                self.backbone.n_classes_proxy,
                1,
                self.proxy.samples_per_class,
                self.backbone.image_size,
            )
        };
        gen_synthetic(&spec, self.proxy.data_seed)
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Pretrains the shared backbone on the proxy task.
pub fn pretrain_backbone(cfg: &ExperimentConfig) -> Result<(BackboneParams<f32>, TrainLog)> {
    pretrain_proxy(&cfg.backbone, &cfg.proxy_data()?, &cfg.proxy.train, cfg.proxy.init_seed)
}

/// Runs `f` on a pool of `workers` threads; 0 keeps the global pool.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}
