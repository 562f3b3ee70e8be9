//! Prototype weighting: per-source K-means centroids over class-token
//! embeddings and `softmax(−β·d)` weights over sources.

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::BackboneParams;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_BETA: f64 = 0.1;
pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightingConfig {
    /// Inverse temperature `β ≥ 0`.
    pub beta: f64,
    /// Weight softmaxed probabilities instead of raw logits.
    #[serde(default)]
    pub weight_probabilities: bool,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            weight_probabilities: false,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be a finite non-negative number, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Centroids of one source's class-token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub source_id: String,
    /// `[K, d]`.
    pub centroids: Tensor<f64>,
    /// Fingerprint of the backbone that produced the embeddings.
    pub built_from: String,
}

impl PrototypeSet {
    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `[K, d]`.
    pub centroids: Tensor<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after every assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    /// Set when `K` had to be reduced to the number of points.
    pub warning: Option<String>,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties go to the lower index) and the total
/// squared distance.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(k, c)| (k, sq_dist(p, c)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            total += d;
            best
        })
        .collect();
    (a, total)
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[next].clone());
    }
    centroids
}

/// Lloyd iterations from k-means++ seeds until assignments stop changing or
/// [`MAX_ITERATIONS`] rounds pass. An empty cluster is re-seeded at the
/// point farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::Data("k-means over zero points".into()));
    }
    if k == 0 {
        return Err(Error::Config("k-means needs K ≥ 1".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Data("points differ in dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite k-means input".into()));
    }
    let mut warning = None;
    let k = if points.len() < k {
        let msg = format!("K reduced from {k} to {} (number of points)", points.len());
        warn!("{msg}");
        warning = Some(msg);
        points.len()
    } else {
        k
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let (mut assignments, j) = assign(points, &centroids);
    let mut history = vec![j];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignments[a]]);
                        let db = sq_dist(&points[b], &centroids[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                taken[far] = true;
                centroids[c] = points[far].clone();
            }
        }
        let (next, j) = assign(points, &centroids);
        history.push(j);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let data = centroids.into_iter().flatten().collect();
    Ok(KMeansResult {
        centroids: Tensor::new(vec![k, dim], data)?,
        assignments,
        objective_history: history,
        iterations,
        warning,
    })
}

/// Final-normed class-token embedding of every image.
pub fn class_embeddings<S: Scalar>(set: &LabeledImageSet, backbone: &BackboneParams<S>) -> Result<Vec<Vec<f64>>> {
    (0..set.len())
        .map(|i| {
            let z = backbone.forward_tokens(set.image(i))?;
            Ok(z.row(0).iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}

/// Clusters the class tokens of one source's training images.
pub fn build_prototypes<S: Scalar>(
    source_id: &str,
    set: &LabeledImageSet,
    backbone: &BackboneParams<S>,
    k: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    if set.is_empty() {
        return Err(Error::Data(format!("source `{source_id}` has no samples")));
    }
    if !backbone.is_frozen() {
        return Err(Error::Config("prototypes need a frozen backbone".into()));
    }
    prototypes_from_embeddings(
        source_id,
        &class_embeddings(set, backbone)?,
        backbone.fingerprint(),
        k,
        seed,
    )
}

pub fn prototypes_from_embeddings(
    source_id: &str,
    embeddings: &[Vec<f64>],
    built_from: String,
    k: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    let result = kmeans(embeddings, k, seed)?;
    Ok(PrototypeSet {
        source_id: source_id.to_string(),
        centroids: result.centroids,
        built_from,
    })
}

/// `min_k ‖z − μ_k‖₂`.
pub fn min_distance(embedding: &[f64], prototypes: &Tensor<f64>) -> Result<f64> {
    let (k, d) = prototypes.dims2()?;
    if d != embedding.len() {
        return Err(Error::shape("min_distance", prototypes.shape(), &[embedding.len()]));
    }
    Ok((0..k)
        .map(|i| sq_dist(embedding, prototypes.row(i)))
        .fold(f64::INFINITY, f64::min)
        .sqrt())
}

/// `softmax(−β·d)`.
pub fn source_weights(distances: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    if distances.iter().any(|d| d.is_nan() || *d < 0.0) {
        return Err(Error::Numeric("distances must be non-negative".into()));
    }
    let mut w: Vec<f64> = distances.iter().map(|d| -beta * d).collect();
    crate::tensor::softmax_in_place(&mut w);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_force_two_partition(points: &[Vec<f64>]) -> f64 {
        let n = points.len();
        let sse = |members: &[&Vec<f64>]| -> f64 {
            if members.is_empty() {
                return 0.0;
            }
            let d = members[0].len();
            let mean: Vec<f64> = (0..d)
                .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                .collect();
            members.iter().map(|p| sq_dist(p, &mean)).sum()
        };
        // fix point 0 in cluster A to skip mirrored partitions
        (0..1u32 << (n - 1))
            .map(|bits| {
                let (mut a, mut b) = (vec![&points[0]], Vec::new());
                for i in 1..n {
                    if bits >> (i - 1) & 1 == 1 {
                        b.push(&points[i])
                    } else {
                        a.push(&points[i])
                    }
                }
                if b.is_empty() {
                    f64::INFINITY
                } else {
                    sse(&a) + sse(&b)
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn blob_points(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { 0.0 } else { 3.0 };
                vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
            })
            .collect()
    }

    #[test]
    fn matches_exhaustive_partition_oracle() {
        for seed in 0..5 {
            let points = blob_points(seed, 12);
            let best = brute_force_two_partition(&points);
            let km = kmeans(&points, 2, seed).unwrap();
            assert!(
                (km.objective() - best).abs() < 1e-9,
                "seed {seed}: {} vs {best}",
                km.objective()
            );
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let points = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 6.0]];
        let km = kmeans(&points, 1, 0).unwrap();
        assert_eq!(km.centroids.data(), &[2.0, 2.0]);
    }

    #[test]
    fn one_cluster_per_point() {
        let points = vec![vec![0.0], vec![5.0], vec![9.0], vec![-3.0]];
        let km = kmeans(&points, 4, 1).unwrap();
        assert_eq!(km.objective(), 0.0);
        let mut c = km.centroids.data().to_vec();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![-3.0, 0.0, 5.0, 9.0]);
    }

    #[test]
    fn too_few_points_reduce_k() {
        let km = kmeans(&[vec![1.0, 2.0]], 20, 0).unwrap();
        assert_eq!(km.centroids.shape(), &[1, 2]);
        assert!(km.warning.is_some());
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let points = vec![vec![1.0]; 6];
        let km = kmeans(&points, 3, 4).unwrap();
        assert_eq!(km.objective(), 0.0);
    }

    #[test]
    fn min_distance_examples() {
        let protos = Tensor::from_f64(&[2, 2], &[0.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(min_distance(&[3.0, 3.0], &protos).unwrap(), 1.0);
        assert_eq!(min_distance(&[3.0, 4.0], &protos).unwrap(), 0.0);
    }

    #[test]
    fn weight_examples() {
        let w = source_weights(&[0.0, 100.0], 0.1).unwrap();
        let expect = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((w[0] - expect).abs() < 1e-12);
        assert!((w[1] - (1.0 - expect)).abs() < 1e-12);
        assert!((w[0] - 0.9999546).abs() < 1e-7);
        assert_eq!(source_weights(&[2.0, 9.0, 4.0], 0.0).unwrap(), vec![1.0 / 3.0; 3]);
        assert!(source_weights(&[1.0], -1.0).is_err());
    }

    proptest! {
        #[test]
        fn objective_never_increases(seed in any::<u64>(), n in 3usize..40, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect();
            let km = kmeans(&points, k, seed).unwrap();
            for w in km.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", km.objective_history);
            }
        }

        #[test]
        fn weights_are_a_distribution(d in proptest::collection::vec(0.0f64..50.0, 1..10), beta in 0.0f64..2.0, shift in 0.0f64..20.0) {
            let w = source_weights(&d, beta).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
            let ws = source_weights(&shifted, beta).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn larger_distance_means_smaller_weight(d in proptest::collection::vec(0.0f64..50.0, 2..6), i in 0usize..6, bump in 0.1f64..10.0) {
            let i = i % d.len();
            let mut far = d.clone();
            far[i] += bump;
            let before = source_weights(&d, 0.1).unwrap()[i];
            let after = source_weights(&far, 0.1).unwrap()[i];
            prop_assert!(after < before);
        }

        #[test]
        fn extra_centroid_never_increases_distance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let two = Tensor::from_f64(&[2, 3], &data[..6]).unwrap();
            let three = Tensor::from_f64(&[3, 3], &data).unwrap();
            prop_assert!(min_distance(&z, &three).unwrap() <= min_distance(&z, &two).unwrap());
        }
    }
}
