use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aptw::{build_prototypes, min_distance, source_weights};
use crate::composition::{
    apt_combine, apt_predict, aptw_combine, cil_combine, ensemble_distributions, majority_combine, AptwMode,
    PoolingMode, SourcePrediction,
};
use crate::data::{shard_uniform, split_class_incremental, split_domains, EpisodeSpec, LabeledImageSet};
use crate::error::{Error, Result};
use crate::pool::{PromptPool, SOURCES_DIR};
use crate::prompt::{
    average_prompts, composed_forward, composed_from_cache, flops_backbone, flops_composed, flops_ensemble,
    flops_naive, naive_concat_forward, predict_source, AttentionMode, PromptLayout, SourcePromptSet,
};
use crate::tensor::argmax;
use crate::trainer::{finetune_full, prompt_accuracy, train_head_only, train_prompt, ClassifierModel, TrainConfig};
use crate::vit::BackboneParams;

use super::{linear_r2, ExperimentConfig, ExperimentReport};

type Backbone = BackboneParams<f32>;
type Set = SourcePromptSet<f32>;

fn mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17) ^ salt.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64() * 1e3)
}

fn seeded(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

/// One prompt per episode, trained concurrently on the episode's own
/// members only.
fn train_sources(
    backbone: &Backbone,
    parent: &LabeledImageSet,
    episodes: &[EpisodeSpec],
    prefix: &str,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<(Set, LabeledImageSet)>> {
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let data = e.materialize(parent)?;
            let t = train_prompt(
                backbone,
                &data,
                &format!("{prefix}{i}"),
                e.label_map.clone(),
                &seeded(cfg, mix(seed, i as u64 + 1)),
                None,
            )?;
            Ok((t.set, data))
        })
        .collect()
}

fn predictions(sets: &[&Set], outputs: &[crate::tensor::Tensor<f32>]) -> Result<Vec<SourcePrediction>> {
    sets.iter()
        .zip(outputs)
        .map(|(s, out)| {
            Ok(SourcePrediction {
                label_map: s.label_map.clone(),
                logits: predict_source(out, &s.head, false)?
                    .iter()
                    .map(|v| f64::from(*v))
                    .collect(),
            })
        })
        .collect()
}

fn accuracy(hits: &[bool]) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Per-image hits of every shard-sweep method.
struct SweepHits {
    apt: bool,
    majority: bool,
    average: bool,
    naive: bool,
    finetune: Option<bool>,
}

fn sweep_eval(
    backbone: &Backbone,
    sets: &[&Set],
    average: &Set,
    finetuned: Option<&[ClassifierModel<f32>]>,
    test: &LabeledImageSet,
    n_classes: usize,
) -> Result<Vec<SweepHits>> {
    (0..test.len())
        .into_par_iter()
        .map(|i| {
            let image = test.image(i);
            let label = test.label(i);
            let cache = backbone.forward_backbone(image)?;
            let preds = predictions(sets, &composed_from_cache(backbone, &cache, sets)?)?;
            let apt = argmax(&apt_combine(&preds, n_classes, PoolingMode::Probabilities)?) == label;
            let majority = majority_combine(&preds, n_classes)? == label;
            let avg_out = composed_from_cache(backbone, &cache, &[average])?;
            let average = argmax(&predict_source(&avg_out[0], &average.head, false)?) == label;
            let naive_preds = predictions(sets, &naive_concat_forward(backbone, image, sets)?)?;
            let naive = argmax(&apt_combine(&naive_preds, n_classes, PoolingMode::Probabilities)?) == label;
            let finetune = finetuned
                .map(|models| -> Result<bool> {
                    let logits = models
                        .iter()
                        .map(|m| m.logits(backbone, image))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(argmax(&ensemble_distributions(&logits)?) == label)
                })
                .transpose()?;
            Ok(SweepHits {
                apt,
                majority,
                average,
                naive,
                finetune,
            })
        })
        .collect()
}

/// Accuracy of sharded prompt composition and its baselines against a
/// prompt tuned on all data (the paragon).
pub fn shard_sweep(backbone: &Backbone, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let bc = backbone.config();
    let d_mem = cfg.prompt.d_mem;
    let n_classes = cfg.corpus.n_classes;
    let mut report = ExperimentReport::new("shard_sweep", "n_shards", cfg.snapshot());
    for &seed in &cfg.seeds {
        let (train, test) = cfg.corpus(seed)?;
        let identity: Vec<usize> = (0..n_classes).collect();
        let paragon_cfg = TrainConfig {
            attention: cfg.paragon_attention,
            ..seeded(&cfg.prompt, mix(seed, 1))
        };
        let (paragon, ms) = timed(|| train_prompt(backbone, &train, "paragon", identity.clone(), &paragon_cfg, None));
        let paragon = paragon?.set;
        let paragon_acc = prompt_accuracy(backbone, &paragon, &test, cfg.paragon_attention)?;
        report.push(
            seed,
            1,
            "paragon",
            Some(paragon_acc),
            Some(flops_composed(bc, 1, d_mem)),
        );
        report.time(seed, 1, "paragon_train", ms);

        let head = train_head_only(backbone, &train, n_classes, &seeded(&cfg.head_only, mix(seed, 2)))?;
        report.push(
            seed,
            1,
            "head_only",
            Some(head.accuracy(backbone, &test)?),
            Some(flops_backbone(bc)),
        );

        for &n in &cfg.shard_counts {
            let t0 = Instant::now();
            let shards = shard_uniform(&train, n, mix(seed, 3))?;
            let trained = if n == 1 {
                let single = if cfg.paragon_attention == AttentionMode::Structured {
                    paragon.clone()
                } else {
                    let c = TrainConfig {
                        attention: AttentionMode::Structured,
                        ..paragon_cfg.clone()
                    };
                    train_prompt(backbone, &train, "paragon", identity.clone(), &c, None)?.set
                };
                vec![(single, train.clone())]
            } else {
                train_sources(
                    backbone,
                    &train,
                    &shards,
                    "shard",
                    &cfg.prompt,
                    mix(seed, 100 + n as u64),
                )?
            };
            let sets: Vec<&Set> = trained.iter().map(|(s, _)| s).collect();
            let average = average_prompts(&sets)?;
            let with_finetune = cfg.finetune_shard_counts.as_ref().is_none_or(|c| c.contains(&n));
            let finetuned = if with_finetune {
                Some(
                    trained
                        .par_iter()
                        .enumerate()
                        .map(|(i, (_, data))| {
                            finetune_full(
                                backbone,
                                data,
                                n_classes,
                                &seeded(&cfg.finetune, mix(seed, 200 + i as u64)),
                            )
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let hits = sweep_eval(backbone, &sets, &average, finetuned.as_deref(), &test, n_classes)?;
            let col = |f: &dyn Fn(&SweepHits) -> bool| accuracy(&hits.iter().map(f).collect::<Vec<_>>());
            let composed = flops_composed(bc, n, d_mem);
            report.push(seed, n, "apt", Some(col(&|h| h.apt)), Some(composed));
            report.push(seed, n, "majority_vote", Some(col(&|h| h.majority)), Some(composed));
            report.push(
                seed,
                n,
                "param_average",
                Some(col(&|h| h.average)),
                Some(flops_composed(bc, 1, d_mem)),
            );
            report.push(
                seed,
                n,
                "naive_concat",
                Some(col(&|h| h.naive)),
                Some(flops_naive(bc, n, d_mem)),
            );
            if with_finetune {
                report.push(
                    seed,
                    n,
                    "finetune_ensemble",
                    Some(col(&|h| h.finetune.unwrap_or(false))),
                    Some(n as u64 * flops_backbone(bc)),
                );
            }
            report.time(seed, n, "shard_total", t0.elapsed().as_secs_f64() * 1e3);
            info!("shard_sweep seed {seed} n {n} done");
        }
    }
    for n in report.ns() {
        if let (Some(p), Some(a)) = (
            report.mean_accuracy("paragon", None),
            report.mean_accuracy("apt", Some(n)),
        ) {
            report
                .notes
                .push(format!("gap to paragon at n_shards={n}: {:.4}", p - a));
        }
    }
    Ok(report)
}

fn pool_predictions(backbone: &Backbone, pool: &PromptPool<f32>, test: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
    let ids: Vec<String> = pool.ls().iter().map(|e| e.source_id.clone()).collect();
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    (0..test.len())
        .into_par_iter()
        .map(|i| apt_predict(backbone, pool, &ids, test.image(i), PoolingMode::Probabilities))
        .collect()
}

fn source_files(dir: &Path, id: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir.join(SOURCES_DIR))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.split('.').next() == Some(id) {
            out.push(name);
        }
    }
    Ok(out)
}

/// Removes sources one at a time from an on-disk pool and checks every
/// state against a pool built from scratch without the removed sources.
///
/// Pools are written under `work_dir`, which must not already hold them.
pub fn forget_curve(backbone: &Backbone, cfg: &ExperimentConfig, work_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cfg.forget.n_sources < 2 {
        return Err(Error::Config("forgetting needs a pool of at least two sources".into()));
    }
    let n_classes = cfg.corpus.n_classes;
    let fp = backbone.fingerprint();
    let mut report = ExperimentReport::new("forget_curve", "remaining", cfg.snapshot());
    for &seed in &cfg.seeds {
        let (train, test) = cfg.corpus(seed)?;
        let shards = shard_uniform(&train, cfg.forget.n_sources, mix(seed, 3))?;
        let sets: Vec<Set> = train_sources(backbone, &train, &shards, "src", &cfg.prompt, mix(seed, 300))?
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        let dir = work_dir.join(format!("pool-seed{seed}"));
        let mut pool = PromptPool::create(&dir, &format!("forget-{seed}"), &fp, n_classes)?;
        for s in &sets {
            pool.add(s.clone())?;
        }
        let mut order: Vec<String> = sets.iter().map(|s| s.source_id.clone()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 4)));
        let mut first = None;
        for step in 0..cfg.forget.n_sources {
            if step > 0 {
                let id = &order[step - 1];
                pool.forget(id)?;
                if !source_files(&dir, id)?.is_empty() {
                    return Err(Error::Composition(format!("files of `{id}` remain after forgetting")));
                }
            }
            let reopened = PromptPool::<f32>::open(&dir)?;
            let mut fresh = PromptPool::in_memory("fresh", &fp, n_classes);
            for s in sets.iter().filter(|s| !order[..step].contains(&s.source_id)) {
                fresh.add(s.clone())?;
            }
            let (got, ms) = timed(|| pool_predictions(backbone, &reopened, &test));
            let got = got?;
            if got != pool_predictions(backbone, &fresh, &test)? {
                return Err(Error::Composition(format!(
                    "predictions after {step} removals differ from a fresh pool"
                )));
            }
            let hits: Vec<bool> = got
                .iter()
                .enumerate()
                .map(|(i, p)| argmax(p) == test.label(i))
                .collect();
            let acc = accuracy(&hits);
            let remaining = cfg.forget.n_sources - step;
            report.push(seed, remaining, "apt", Some(acc), None);
            report.push(
                seed,
                remaining,
                "error_increase",
                Some(*first.get_or_insert(acc) - acc),
                None,
            );
            report.time(seed, remaining, "evaluate", ms);
        }
    }
    Ok(report)
}

/// Prompt outputs and class-token embedding of one image.
fn score_image(backbone: &Backbone, sets: &[&Set], image: &[u8]) -> Result<(Vec<f64>, Vec<SourcePrediction>)> {
    let out = composed_forward(backbone, image, sets)?;
    let cls = out.backbone.class_embedding().iter().map(|v| f64::from(*v)).collect();
    Ok((cls, predictions(sets, &out.prompts)?))
}

fn with_prototypes(backbone: &Backbone, trained: Vec<(Set, LabeledImageSet)>, k: usize, seed: u64) -> Result<Vec<Set>> {
    trained
        .into_par_iter()
        .enumerate()
        .map(|(i, (mut s, data))| {
            s.prototypes = Some(build_prototypes(
                &s.source_id,
                &data,
                backbone,
                k,
                mix(seed, 400 + i as u64),
            )?);
            Ok(s)
        })
        .collect()
}

fn weights(sets: &[&Set], cls: &[f64], beta: f64) -> Result<Vec<f64>> {
    let d = sets
        .iter()
        .map(|s| min_distance(cls, &s.prototypes.as_ref().expect("prototypes built").centroids))
        .collect::<Result<Vec<_>>>()?;
    source_weights(&d, beta)
}

/// Class-incremental protocol: disjoint class episodes, logits scattered
/// into the global label space.
pub fn cil(backbone: &Backbone, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let n_classes = cfg.corpus.n_classes;
    let e = cfg.cil.n_episodes;
    let mut report = ExperimentReport::new("cil", "episodes", cfg.snapshot());
    for &seed in &cfg.seeds {
        let (train, test) = cfg.corpus(seed)?;
        let episodes = split_class_incremental(&train, e)?;
        let trained = train_sources(backbone, &train, &episodes, "ep", &cfg.prompt, mix(seed, 500))?;
        let sets = with_prototypes(backbone, trained, cfg.cil.k, seed)?;
        let refs: Vec<&Set> = sets.iter().collect();
        let hits = (0..test.len())
            .into_par_iter()
            .map(|i| {
                let (cls, preds) = score_image(backbone, &refs, test.image(i))?;
                let apt = argmax(&cil_combine(&preds, n_classes, None)?);
                let w = weights(&refs, &cls, cfg.cil.beta)?;
                let aptw = argmax(&aptw_combine(
                    &preds,
                    &w,
                    n_classes,
                    AptwMode::Cil,
                    cfg.cil.weight_probabilities,
                )?);
                Ok((apt == test.label(i), aptw == test.label(i)))
            })
            .collect::<Result<Vec<_>>>()?;
        report.push(
            seed,
            e,
            "apt",
            Some(accuracy(&hits.iter().map(|h| h.0).collect::<Vec<_>>())),
            None,
        );
        report.push(
            seed,
            e,
            "apt_w",
            Some(accuracy(&hits.iter().map(|h| h.1).collect::<Vec<_>>())),
            None,
        );
    }
    Ok(report)
}

/// Domain-incremental protocol: one prompt per training domain, evaluated
/// on held-out domains.
pub fn dil(backbone: &Backbone, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let n_classes = cfg.corpus.n_classes;
    let mut report = ExperimentReport::new("dil", "domains", cfg.snapshot());
    for &seed in &cfg.seeds {
        let set = cfg.domain_corpus(seed)?;
        let split = split_domains(&set, &cfg.dil.test_domains)?;
        let test = split.test.materialize(&set)?;
        if test.is_empty() {
            return Err(Error::Partition("held-out domains hold no samples".into()));
        }
        let trained = train_sources(backbone, &set, &split.episodes, "dom", &cfg.prompt, mix(seed, 600))?;
        let sets = with_prototypes(backbone, trained, cfg.dil.k, seed)?;
        let refs: Vec<&Set> = sets.iter().collect();
        let probs = cfg.dil.pooling == PoolingMode::Probabilities;
        let hits = (0..test.len())
            .into_par_iter()
            .map(|i| {
                let (cls, preds) = score_image(backbone, &refs, test.image(i))?;
                let apt = argmax(&apt_combine(&preds, n_classes, cfg.dil.pooling)?);
                let w = weights(&refs, &cls, cfg.dil.beta)?;
                let aptw = argmax(&aptw_combine(&preds, &w, n_classes, AptwMode::Dil, probs)?);
                Ok((apt == test.label(i), aptw == test.label(i)))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = split.episodes.len();
        report.push(
            seed,
            n,
            "apt",
            Some(accuracy(&hits.iter().map(|h| h.0).collect::<Vec<_>>())),
            None,
        );
        report.push(
            seed,
            n,
            "apt_w",
            Some(accuracy(&hits.iter().map(|h| h.1).collect::<Vec<_>>())),
            None,
        );
    }
    if let (Some(a), Some(w)) = (report.mean_accuracy("apt", None), report.mean_accuracy("apt_w", None)) {
        report.notes.push(format!("apt_w - apt: {:.4}", w - a));
    }
    Ok(report)
}

/// Analytic cost and measured wall time of two-phase composition, naive
/// concatenation and per-prompt ensembling as the number of prompts grows.
pub fn bench_compose(backbone: &Backbone, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let bc = backbone.config();
    let d_mem = cfg.prompt.d_mem;
    let seed = cfg.seeds[0];
    let max_k = cfg.bench.sizes.iter().copied().max().unwrap_or(0);
    let layout = PromptLayout {
        d_mem,
        ..PromptLayout::default()
    };
    let fp = backbone.fingerprint();
    let sets: Vec<Set> = (0..max_k)
        .map(|i| SourcePromptSet::init(format!("b{i}"), &layout, bc, vec![0], fp.clone(), mix(seed, i as u64)))
        .collect::<Result<_>>()?;
    let (_, test) = cfg.corpus(seed)?;
    let image = test.image(0);
    let reps = cfg.bench.reps.max(1);
    let median = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        let mut t = (0..reps)
            .map(|_| timed(f))
            .map(|(r, ms)| r.map(|_| ms))
            .collect::<Result<Vec<_>>>()?;
        t.sort_by(f64::total_cmp);
        Ok(t[t.len() / 2])
    };
    let mut report = ExperimentReport::new("bench_compose", "k", cfg.snapshot());
    for &k in &cfg.bench.sizes {
        let subset: Vec<&Set> = sets[..k].iter().collect();
        report.push(seed, k, "composed", None, Some(flops_composed(bc, k, d_mem)));
        report.push(seed, k, "naive_concat", None, Some(flops_naive(bc, k, d_mem)));
        report.push(seed, k, "ensemble", None, Some(flops_ensemble(bc, k, d_mem)));
        let ms = median(&|| composed_forward(backbone, image, &subset).map(|_| ()))?;
        report.time(seed, k, "composed", ms);
        let ms = median(&|| naive_concat_forward(backbone, image, &subset).map(|_| ()))?;
        report.time(seed, k, "naive_concat", ms);
        let ms = median(&|| {
            for s in &subset {
                composed_forward(backbone, image, &[*s])?;
            }
            Ok(())
        })?;
        report.time(seed, k, "ensemble", ms);
    }
    let ks: Vec<f64> = (1..=max_k.max(2)).map(|k| k as f64).collect();
    let base = flops_composed(bc, 0, d_mem) as f64;
    let delta: Vec<f64> = ks
        .iter()
        .map(|&k| flops_composed(bc, k as usize, d_mem) as f64 - base)
        .collect();
    report
        .notes
        .push(format!("flops delta linear fit r2: {:.6}", linear_r2(&ks, &delta)));
    Ok(report)
}
