//! Combining per-source predictions into one answer.

use serde::{Deserialize, Serialize};

use crate::aptw::{min_distance, source_weights, WeightingConfig};
use crate::error::{Error, Result};
use crate::pool::{PromptPool, PromptStore};
use crate::prompt::{composed_forward, predict_source, SourcePromptSet};
use crate::tensor::{argmax, softmax_in_place, Scalar};
use crate::vit::BackboneParams;

/// Raw local logits of one source and where its classes live globally.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePrediction {
    pub label_map: Vec<usize>,
    pub logits: Vec<f64>,
}

impl SourcePrediction {
    pub fn probabilities(&self) -> Vec<f64> {
        let mut p = self.logits.clone();
        softmax_in_place(&mut p);
        p
    }

    fn check(&self, n_classes: usize) -> Result<()> {
        if self.label_map.len() != self.logits.len() {
            return Err(Error::shape(
                "source prediction",
                &[self.label_map.len()],
                &[self.logits.len()],
            ));
        }
        match self.label_map.iter().find(|&&g| g >= n_classes) {
            Some(&g) => Err(Error::Label {
                label: g,
                classes: n_classes,
            }),
            None => Ok(()),
        }
    }
}

/// Whether unweighted ensembling averages softmaxed probabilities or raw
/// logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    #[default]
    Probabilities,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AptwMode {
    /// Weighted logits scattered into disjoint class blocks.
    Cil,
    /// Weighted logits averaged over a shared label space.
    Dil,
}

/// Mean over sources of scattered predictions; classes a source does not
/// know receive zero from it.
pub fn apt_combine(preds: &[SourcePrediction], n_classes: usize, mode: PoolingMode) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut out = vec![0.0; n_classes];
    for p in preds {
        p.check(n_classes)?;
        let values = match mode {
            PoolingMode::Probabilities => p.probabilities(),
            PoolingMode::Logits => p.logits.clone(),
        };
        for (&g, v) in p.label_map.iter().zip(values) {
            out[g] += v;
        }
    }
    let k = preds.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

/// Plurality of per-source argmax votes; ties go to the lowest class.
pub fn majority_combine(preds: &[SourcePrediction], n_classes: usize) -> Result<usize> {
    if preds.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut votes = vec![0usize; n_classes];
    for p in preds {
        p.check(n_classes)?;
        votes[p.label_map[argmax(&p.logits)]] += 1;
    }
    let best = *votes.iter().max().unwrap_or(&0);
    Ok(votes.iter().position(|&v| v == best).unwrap_or(0))
}

/// Scatters per-source logits into disjoint slots of the global logit
/// vector. Unclaimed classes stay at −∞. `temperatures` divides each
/// source's logits when given.
pub fn cil_combine(preds: &[SourcePrediction], n_classes: usize, temperatures: Option<&[f64]>) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(Error::EmptySelection);
    }
    if let Some(t) = temperatures {
        if t.len() != preds.len() || t.iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Config("one positive temperature per source is required".into()));
        }
    }
    let mut out = vec![f64::NEG_INFINITY; n_classes];
    let mut claimed = vec![false; n_classes];
    for (i, p) in preds.iter().enumerate() {
        p.check(n_classes)?;
        let t = temperatures.map_or(1.0, |t| t[i]);
        for (&g, &v) in p.label_map.iter().zip(&p.logits) {
            if claimed[g] {
                return Err(Error::Composition(format!(
                    "class {g} is claimed by more than one source"
                )));
            }
            claimed[g] = true;
            out[g] = v / t;
        }
    }
    Ok(out)
}

/// Weighted logits: scattered for `Cil`, `(1/|I|)·Σ wᵢ·ŷ⁽ⁱ⁾` for `Dil`.
///
/// With `weight_probabilities` the softmaxed outputs are weighted instead.
pub fn aptw_combine(
    preds: &[SourcePrediction],
    weights: &[f64],
    n_classes: usize,
    mode: AptwMode,
    weight_probabilities: bool,
) -> Result<Vec<f64>> {
    if preds.len() != weights.len() {
        return Err(Error::shape("aptw weights", &[preds.len()], &[weights.len()]));
    }
    let weighted: Vec<SourcePrediction> = preds
        .iter()
        .zip(weights)
        .map(|(p, &w)| {
            let base = if weight_probabilities {
                p.probabilities()
            } else {
                p.logits.clone()
            };
            SourcePrediction {
                label_map: p.label_map.clone(),
                logits: base.into_iter().map(|v| w * v).collect(),
            }
        })
        .collect();
    match mode {
        AptwMode::Cil => cil_combine(&weighted, n_classes, None),
        AptwMode::Dil => apt_combine(&weighted, n_classes, PoolingMode::Logits),
    }
}

/// Sources `subset` from `store`, rejecting empty or unknown selections.
pub fn select<'s, S: Scalar, P: PromptStore<S> + ?Sized>(
    store: &'s P,
    subset: &[&str],
) -> Result<Vec<&'s SourcePromptSet<S>>> {
    if subset.is_empty() {
        return Err(Error::EmptySelection);
    }
    subset.iter().map(|id| store.source(id)).collect()
}

/// Per-source raw logits from one composed forward, plus the class-token
/// embedding.
pub fn source_predictions<S: Scalar>(
    backbone: &BackboneParams<S>,
    image: &[u8],
    sets: &[&SourcePromptSet<S>],
) -> Result<(Vec<f64>, Vec<SourcePrediction>)> {
    let out = composed_forward(backbone, image, sets)?;
    let preds = sets
        .iter()
        .zip(&out.prompts)
        .map(|(s, p)| {
            Ok(SourcePrediction {
                label_map: s.label_map.clone(),
                logits: predict_source(p, &s.head, false)?.iter().map(|v| v.as_f64()).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let cls = out.backbone.class_embedding().iter().map(|v| v.as_f64()).collect();
    Ok((cls, preds))
}

/// Mean of the selected sources' distributions over the global classes.
pub fn apt_predict<S: Scalar, P: PromptStore<S> + ?Sized>(
    backbone: &BackboneParams<S>,
    store: &P,
    subset: &[&str],
    image: &[u8],
    mode: PoolingMode,
) -> Result<Vec<f64>> {
    let sets = select(store, subset)?;
    let (_, preds) = source_predictions(backbone, image, &sets)?;
    apt_combine(&preds, store.n_classes(), mode)
}

pub fn majority_vote<S: Scalar, P: PromptStore<S> + ?Sized>(
    backbone: &BackboneParams<S>,
    store: &P,
    subset: &[&str],
    image: &[u8],
) -> Result<usize> {
    let sets = select(store, subset)?;
    let (_, preds) = source_predictions(backbone, image, &sets)?;
    majority_combine(&preds, store.n_classes())
}

/// Argmax of the concatenated raw logits of class-disjoint sources.
pub fn cil_predict<S: Scalar, P: PromptStore<S> + ?Sized>(
    backbone: &BackboneParams<S>,
    store: &P,
    subset: &[&str],
    image: &[u8],
    temperatures: Option<&[f64]>,
) -> Result<usize> {
    let sets = select(store, subset)?;
    let (_, preds) = source_predictions(backbone, image, &sets)?;
    Ok(argmax(&cil_combine(&preds, store.n_classes(), temperatures)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AptwPrediction {
    pub class: usize,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub distances: Vec<f64>,
}

/// Distances of a class-token embedding to each source's prototypes.
pub fn prototype_distances<S: Scalar>(embedding: &[f64], sets: &[&SourcePromptSet<S>]) -> Result<Vec<f64>> {
    sets.iter()
        .map(|s| {
            let p = s
                .prototypes
                .as_ref()
                .ok_or_else(|| Error::Config(format!("source `{}` has no prototypes", s.source_id)))?;
            min_distance(embedding, &p.centroids)
        })
        .collect()
}

/// Prototype-weighted composition.
pub fn aptw_predict<S: Scalar, P: PromptStore<S> + ?Sized>(
    backbone: &BackboneParams<S>,
    store: &P,
    subset: &[&str],
    image: &[u8],
    mode: AptwMode,
    weighting: &WeightingConfig,
) -> Result<AptwPrediction> {
    weighting.validate()?;
    let sets = select(store, subset)?;
    if let Some(s) = sets.iter().find(|s| s.prototypes.is_none()) {
        return Err(Error::Config(format!("source `{}` has no prototypes", s.source_id)));
    }
    let (cls, preds) = source_predictions(backbone, image, &sets)?;
    let distances = prototype_distances(&cls, &sets)?;
    let weights = source_weights(&distances, weighting.beta)?;
    let scores = aptw_combine(
        &preds,
        &weights,
        store.n_classes(),
        mode,
        weighting.weight_probabilities,
    )?;
    Ok(AptwPrediction {
        class: argmax(&scores),
        scores,
        weights,
        distances,
    })
}

/// Removes a source and its stored files from the pool.
pub fn forget_source<S: Scalar>(pool: &mut PromptPool<S>, source_id: &str) -> Result<()> {
    pool.forget(source_id).map(|_| ())
}

/// Mean of per-model softmax outputs.
pub fn ensemble_distributions(logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = logits.first().ok_or(Error::EmptySelection)?;
    let mut out = vec![0.0; first.len()];
    for l in logits {
        if l.len() != out.len() {
            return Err(Error::shape("ensemble", &[out.len()], &[l.len()]));
        }
        let mut p = l.clone();
        softmax_in_place(&mut p);
        out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
    }
    let k = logits.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}
