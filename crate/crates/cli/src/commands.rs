use std::fs;
use std::path::Path;

use alacarte_core::aptw::{build_prototypes, WeightingConfig};
use alacarte_core::composition::{apt_predict, aptw_predict, cil_predict, majority_vote, AptwMode, PoolingMode};
use alacarte_core::data::{load_cifar_binary, shard_uniform, split_class_incremental, CifarVariant, LabeledImageSet};
use alacarte_core::harness::{
    bench_compose, cil, dil, forget_curve, pretrain_backbone, shard_sweep, with_workers, ExperimentConfig,
    ExperimentReport,
};
use alacarte_core::pool::MANIFEST;
use alacarte_core::tensor::argmax;
use alacarte_core::trainer::{pretrain_proxy, train_prompt, TrainConfig};
use alacarte_core::{BackboneParams, Error, PromptPool, PromptStore, Scalar};
use anyhow::{Context, Result};
use log::info;
use serde_json::json;

use crate::exit::Storage;
use crate::{Cli, Command, ComposeArgs, Data, EvalArgs, Method, PoolAction, ScenarioArgs, Selection, TrainPromptArgs};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let workers = cli.workers;
    with_workers(workers, move || dispatch(cli, cfg))?
}

fn dispatch(cli: Cli, cfg: ExperimentConfig) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(cfg.seeds[0]),
        seed_override: cli.seed,
        out: cli.out.as_path(),
        cfg,
    };
    match (&cli.command, cli.f64) {
        (Command::Pretrain { epochs }, false) => pretrain::<f32>(&ctx, *epochs),
        (Command::Pretrain { epochs }, true) => pretrain::<f64>(&ctx, *epochs),
        (Command::TrainPrompt(a), false) => train::<f32>(&ctx, a),
        (Command::TrainPrompt(a), true) => train::<f64>(&ctx, a),
        (Command::Compose(a), false) => compose::<f32>(&ctx, a),
        (Command::Compose(a), true) => compose::<f64>(&ctx, a),
        (Command::Eval(a), false) => eval::<f32>(&ctx, a),
        (Command::Eval(a), true) => eval::<f64>(&ctx, a),
        (Command::Pool { action }, _) => pool(action),
        (_, true) => Err(Error::Config("scenario commands run in 32-bit; drop --f64".into()).into()),
        (Command::ShardSweep(a), false) => scenario(&ctx, a, "shard_sweep", |bb, cfg, _| shard_sweep(bb, cfg)),
        (Command::ForgetCurve(a), false) => scenario(&ctx, a, "forget_curve", forget_curve),
        (Command::Cil(a), false) => scenario(&ctx, a, "cil", |bb, cfg, _| cil(bb, cfg)),
        (Command::Dil(a), false) => scenario(&ctx, a, "dil", |bb, cfg, _| dil(bb, cfg)),
        (Command::Bench(a), false) => scenario(&ctx, a, "bench", |bb, cfg, _| bench_compose(bb, cfg)),
    }
}

struct Ctx<'a> {
    cfg: ExperimentConfig,
    seed: u64,
    seed_override: Option<u64>,
    out: &'a Path,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn storage<T>(what: &str, path: &Path, r: alacarte_core::Result<T>) -> Result<T> {
    r.map_err(|e| Storage(format!("{what} {}: {e}", path.display())).into())
}

fn load_backbone<S: Scalar>(dir: &Path) -> Result<BackboneParams<S>> {
    storage("cannot load backbone", dir, BackboneParams::load(dir))
}

fn open_pool<S: Scalar>(dir: &Path) -> Result<PromptPool<S>> {
    storage("cannot open pool", dir, PromptPool::open(dir))
}

fn cifar(path: &Path) -> Result<LabeledImageSet> {
    load_cifar_binary(path, CifarVariant::Cifar10).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read {}: {io}", path.display())).into(),
        Error::Format { message, .. } => Error::Data(format!("{}: {message}", path.display())).into(),
        other => other.into(),
    })
}

fn splits(ctx: &Ctx, data: &Data) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (train, test) = ctx.cfg.corpus(ctx.seed)?;
    let train = match &data.train_data {
        Some(p) => cifar(p)?,
        None => train,
    };
    let test = match &data.test_data {
        Some(p) => cifar(p)?,
        None => test,
    };
    Ok((train, test))
}

fn pretrain<S: Scalar>(ctx: &Ctx, epochs: Option<usize>) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(e) = epochs {
        cfg.proxy.train.epochs = e;
    }
    cfg.proxy.train.validate()?;
    let seed = ctx.seed_override.unwrap_or(cfg.proxy.init_seed);
    let (bb, log) = pretrain_proxy::<S>(&cfg.backbone, &cfg.proxy_data()?, &cfg.proxy.train, seed)?;
    let dir = ctx.out.join("backbone");
    let fingerprint = storage("cannot save backbone to", &dir, bb.save(&dir))?;
    log.write_csv(&ctx.out.join("pretrain_log.csv"))?;
    println!("{fingerprint}");
    info!("backbone saved to {}", dir.display());
    Ok(())
}

fn train<S: Scalar>(ctx: &Ctx, a: &TrainPromptArgs) -> Result<()> {
    let bb = load_backbone::<S>(&a.backbone)?;
    let (train, _) = splits(ctx, &a.data)?;
    let pick = |i: usize, episodes: Vec<alacarte_core::data::EpisodeSpec>| {
        let n = episodes.len();
        episodes
            .into_iter()
            .nth(i)
            .ok_or_else(|| Error::Config(format!("index {i} out of range for {n} parts")))
    };
    let (data, label_map) = match (a.shard, a.episode, a.of) {
        (Some(i), _, Some(n)) => {
            let e = pick(i, shard_uniform(&train, n, ctx.seed)?)?;
            (e.materialize(&train)?, e.label_map)
        }
        (_, Some(i), Some(n)) => {
            let e = pick(i, split_class_incremental(&train, n)?)?;
            (e.materialize(&train)?, e.label_map)
        }
        _ => {
            let map = (0..train.class_count).collect();
            (train.clone(), map)
        }
    };
    let tc = TrainConfig {
        seed: ctx.seed,
        ..ctx.cfg.prompt.clone()
    };
    let mut trained = train_prompt(&bb, &data, &a.source, label_map, &tc, None)?;
    if let Some(k) = a.prototypes {
        trained.set.prototypes = Some(build_prototypes(&a.source, &data, &bb, k, ctx.seed)?);
    }
    let mut pool = if a.pool.join(MANIFEST).exists() {
        open_pool::<S>(&a.pool)?
    } else {
        let name = a
            .pool
            .file_name()
            .map_or("pool".into(), |n| n.to_string_lossy().into_owned());
        storage(
            "cannot create pool",
            &a.pool,
            PromptPool::create(&a.pool, &name, &bb.fingerprint(), train.class_count),
        )?
    };
    let params = trained.set.parameter_count();
    pool.add(trained.set)?;
    fs::create_dir_all(ctx.out)?;
    trained.log.write_csv(&ctx.out.join(format!("{}_log.csv", a.source)))?;
    println!(
        "{}: {} samples, {params} parameters, final loss {:.4}",
        a.source,
        data.len(),
        trained.log.last_epoch_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

struct Answer {
    class: usize,
    scores: Option<Vec<f64>>,
    weights: Option<Vec<f64>>,
}

fn predict<S: Scalar>(
    bb: &BackboneParams<S>,
    pool: &PromptPool<S>,
    ids: &[&str],
    image: &[u8],
    sel: &Selection,
) -> alacarte_core::Result<Answer> {
    let scored = |scores: Vec<f64>| Answer {
        class: argmax(&scores),
        scores: Some(scores),
        weights: None,
    };
    let weighting = WeightingConfig {
        beta: sel.beta.unwrap_or(WeightingConfig::default().beta),
        ..WeightingConfig::default()
    };
    let class_only = |class| Answer {
        class,
        scores: None,
        weights: None,
    };
    Ok(match sel.method {
        Method::Apt => scored(apt_predict(bb, pool, ids, image, PoolingMode::Probabilities)?),
        Method::AptLogits => scored(apt_predict(bb, pool, ids, image, PoolingMode::Logits)?),
        Method::Majority => class_only(majority_vote(bb, pool, ids, image)?),
        Method::Cil => class_only(cil_predict(bb, pool, ids, image, None)?),
        Method::AptWCil | Method::AptWDil => {
            let mode = if sel.method == Method::AptWCil {
                AptwMode::Cil
            } else {
                AptwMode::Dil
            };
            let p = aptw_predict(bb, pool, ids, image, mode, &weighting)?;
            Answer {
                class: p.class,
                scores: Some(p.scores),
                weights: Some(p.weights),
            }
        }
    })
}

fn selected<S: Scalar>(pool: &PromptPool<S>, sel: &Selection) -> Vec<String> {
    if sel.sources.is_empty() {
        pool.source_ids()
    } else {
        sel.sources.clone()
    }
}

fn compose<S: Scalar>(ctx: &Ctx, a: &ComposeArgs) -> Result<()> {
    let bb = load_backbone::<S>(&a.selection.backbone)?;
    let pool = open_pool::<S>(&a.selection.pool)?;
    let (_, test) = splits(ctx, &a.data)?;
    if a.index >= test.len() {
        return Err(Error::Data(format!("index {} out of range for {} test images", a.index, test.len())).into());
    }
    let ids = selected(&pool, &a.selection);
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let ans = predict(&bb, &pool, &refs, test.image(a.index), &a.selection)?;
    let out = json!({
        "sources": ids,
        "label": test.label(a.index),
        "class": ans.class,
        "scores": ans.scores,
        "weights": ans.weights,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn eval<S: Scalar>(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let bb = load_backbone::<S>(&a.selection.backbone)?;
    let pool = open_pool::<S>(&a.selection.pool)?;
    let (_, test) = splits(ctx, &a.data)?;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()).into());
    }
    let ids = selected(&pool, &a.selection);
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let mut hits = 0usize;
    for i in 0..test.len() {
        hits += usize::from(predict(&bb, &pool, &refs, test.image(i), &a.selection)?.class == test.label(i));
    }
    let accuracy = hits as f64 / test.len() as f64;
    let out = json!({
        "sources": ids,
        "method": format!("{:?}", a.selection.method),
        "images": test.len(),
        "accuracy": accuracy,
    });
    fs::create_dir_all(ctx.out)?;
    fs::write(ctx.out.join("eval.json"), serde_json::to_string_pretty(&out)?)?;
    println!(
        "accuracy {accuracy:.4} over {} images with {} source(s)",
        test.len(),
        ids.len()
    );
    Ok(())
}

fn scenario(
    ctx: &Ctx,
    a: &ScenarioArgs,
    name: &str,
    f: impl FnOnce(&BackboneParams<f32>, &ExperimentConfig, &Path) -> alacarte_core::Result<ExperimentReport>,
) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(s) = ctx.seed_override {
        cfg.seeds = vec![s];
    }
    let bb = match &a.backbone {
        Some(dir) => load_backbone::<f32>(dir)?,
        None => {
            info!("pretraining a backbone");
            pretrain_backbone(&cfg)?.0
        }
    };
    let dir = ctx.out.join(name);
    let work = dir.join("pools");
    if work.exists() {
        fs::remove_dir_all(&work).with_context(|| format!("clearing {}", work.display()))?;
    }
    fs::create_dir_all(&work)?;
    let report = f(&bb, &cfg, &work)?;
    report.write(&dir)?;
    print!("{}", report.summary());
    info!("report written to {}", dir.display());
    Ok(())
}

fn pool(action: &PoolAction) -> Result<()> {
    match action {
        PoolAction::Add { pool, from, source } => {
            let src = open_pool::<f32>(from)?;
            let set = src.source(source)?.clone();
            let mut dst = open_pool::<f32>(pool)?;
            dst.add(set)?;
            println!("added {source}");
        }
        PoolAction::Rm { pool, source } => {
            let mut p = open_pool::<f32>(pool)?;
            p.forget(source)?;
            println!("removed {source}");
        }
        PoolAction::Ls { pool } => {
            let p = open_pool::<f32>(pool)?;
            println!("backbone {} classes {}", p.backbone_fingerprint(), p.n_classes());
            for e in p.ls() {
                println!(
                    "{}\t{:?}\tclasses {:?}\tprompt {}\tmemory {}{}",
                    e.source_id,
                    e.variant,
                    e.label_map,
                    e.prompt_tokens,
                    e.d_mem,
                    e.prototype_k.map_or(String::new(), |k| format!("\tprototypes {k}"))
                );
            }
        }
    }
    Ok(())
}
