//! Image corpora and their partitions into sources.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_IMAGE_BYTES: usize = CIFAR_SIDE * CIFAR_SIDE * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images stored as `H×W×C` bytes with global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub image_size: usize,
    pub channels: usize,
    pub class_count: usize,
    pub split: Split,
    images: Vec<Vec<u8>>,
    labels: Vec<usize>,
    domains: Option<Vec<usize>>,
}

impl LabeledImageSet {
    pub fn new(
        image_size: usize,
        channels: usize,
        class_count: usize,
        split: Split,
        images: Vec<Vec<u8>>,
        labels: Vec<usize>,
        domains: Option<Vec<usize>>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(d) = &domains {
            if d.len() != labels.len() {
                return Err(Error::Data(format!(
                    "{} domain tags for {} images",
                    d.len(),
                    labels.len()
                )));
            }
        }
        let bytes = image_size * image_size * channels;
        if let Some(i) = images.iter().position(|im| im.len() != bytes) {
            return Err(Error::Data(format!(
                "image {i} has {} bytes, expected {bytes}",
                images[i].len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label {
                label: l,
                classes: class_count,
            });
        }
        Ok(Self {
            image_size,
            channels,
            class_count,
            split,
            images,
            labels,
            domains,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i]
    }

    pub fn images(&self) -> &[Vec<u8>] {
        &self.images
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> Option<&[usize]> {
        self.domains.as_deref()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Copy of the listed members, keeping global labels.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!(
                "index {i} out of range for {} samples",
                self.len()
            )));
        }
        Ok(Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domains: self.domains.as_ref().map(|d| indices.iter().map(|&i| d[i]).collect()),
            ..self.empty_like()
        })
    }

    fn empty_like(&self) -> Self {
        Self {
            image_size: self.image_size,
            channels: self.channels,
            class_count: self.class_count,
            split: self.split,
            images: Vec::new(),
            labels: Vec::new(),
            domains: None,
        }
    }

    /// Concatenation of two sets with identical geometry.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.image_size, self.channels, self.class_count) != (other.image_size, other.channels, other.class_count) {
            return Err(Error::Data("cannot concatenate sets with different geometry".into()));
        }
        let domains = match (&self.domains, &other.domains) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Self {
            images: self.images.iter().chain(&other.images).cloned().collect(),
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            domains,
            ..self.empty_like()
        })
    }

    /// Seeded `(train, test)` split holding out `test_fraction` of every class.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.class_count {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            members.shuffle(&mut rng);
            let n_test = (members.len() as f64 * test_fraction).round() as usize;
            test.extend_from_slice(&members[..n_test]);
            train.extend_from_slice(&members[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((
            self.subset(&train)?.with_split(Split::Train),
            self.subset(&test)?.with_split(Split::Test),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Shard,
    ClassEpisode,
    Domain,
}

/// One data source: member indices into a parent set and its local label
/// space, `label_map[local] = global`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub kind: EpisodeKind,
    pub members: Vec<usize>,
    pub label_map: Vec<usize>,
}

impl EpisodeSpec {
    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.label_map.iter().position(|&g| g == global)
    }

    /// The members with labels rewritten into the local label space.
    pub fn materialize(&self, parent: &LabeledImageSet) -> Result<LabeledImageSet> {
        let mut set = parent.subset(&self.members)?;
        for l in &mut set.labels {
            *l = self
                .local_label(*l)
                .ok_or_else(|| Error::Data(format!("label {l} missing from episode label map")))?;
        }
        set.class_count = self.label_map.len();
        Ok(set)
    }
}

/// Disjoint shards from a seeded permutation, sizes balanced to within one.
pub fn shard_uniform(set: &LabeledImageSet, n_shards: usize, seed: u64) -> Result<Vec<EpisodeSpec>> {
    if n_shards == 0 || n_shards > set.len() {
        return Err(Error::Partition(format!(
            "cannot cut {} samples into {n_shards} shards",
            set.len()
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let identity: Vec<usize> = (0..set.class_count).collect();
    let (base, extra) = (set.len() / n_shards, set.len() % n_shards);
    let mut start = 0;
    Ok((0..n_shards)
        .map(|s| {
            let size = base + usize::from(s < extra);
            let members = order[start..start + size].to_vec();
            start += size;
            EpisodeSpec {
                kind: EpisodeKind::Shard,
                members,
                label_map: identity.clone(),
            }
        })
        .collect())
}

/// Contiguous blocks of classes, one block per episode.
pub fn split_class_incremental(set: &LabeledImageSet, n_episodes: usize) -> Result<Vec<EpisodeSpec>> {
    if n_episodes == 0 || !set.class_count.is_multiple_of(n_episodes) {
        return Err(Error::Partition(format!(
            "{} classes do not split into {n_episodes} episodes",
            set.class_count
        )));
    }
    let per = set.class_count / n_episodes;
    Ok((0..n_episodes)
        .map(|e| {
            let classes = e * per..(e + 1) * per;
            EpisodeSpec {
                kind: EpisodeKind::ClassEpisode,
                members: (0..set.len()).filter(|&i| classes.contains(&set.labels[i])).collect(),
                label_map: classes.collect(),
            }
        })
        .collect())
}

/// Training episodes per domain plus the held-out test domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub episodes: Vec<EpisodeSpec>,
    pub train_domains: Vec<usize>,
    pub test: EpisodeSpec,
}

/// One episode per domain not in `test_domains`; all episodes share the
/// full label space.
pub fn split_domains(set: &LabeledImageSet, test_domains: &[usize]) -> Result<DomainSplit> {
    let domains = set
        .domains()
        .ok_or_else(|| Error::Data("set carries no domain labels".into()))?;
    let mut present: Vec<usize> = domains.to_vec();
    present.sort_unstable();
    present.dedup();
    let identity: Vec<usize> = (0..set.class_count).collect();
    let episode = |keep: &dyn Fn(usize) -> bool| EpisodeSpec {
        kind: EpisodeKind::Domain,
        members: (0..set.len()).filter(|&i| keep(domains[i])).collect(),
        label_map: identity.clone(),
    };
    let train_domains: Vec<usize> = present.into_iter().filter(|d| !test_domains.contains(d)).collect();
    if train_domains.is_empty() {
        return Err(Error::Partition("no training domains left".into()));
    }
    Ok(DomainSplit {
        episodes: train_domains.iter().map(|&d| episode(&|x| x == d)).collect(),
        test: episode(&|x| test_domains.contains(&x)),
        train_domains,
    })
}

/// Mirror image of an `H×W×C` byte image.
pub fn hflip(image: &[u8], side: usize, channels: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.len());
    for y in 0..side {
        for x in (0..side).rev() {
            let at = (y * side + x) * channels;
            out.extend_from_slice(&image[at..at + channels]);
        }
    }
    out
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_domains: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(n_classes: usize, n_domains: usize, samples_per_class: usize, image_size: usize) -> Self {
        Self {
            n_classes,
            n_domains,
            samples_per_class,
            image_size,
            noise: 12.0,
        }
    }
}

struct ClassStyle {
    kind: usize,
    freq: f64,
    color: [f64; 3],
}

struct DomainStyle {
    background: [f64; 3],
    contrast: f64,
    tint: [f64; 3],
    noise: f64,
}

fn hue_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        255.0 * (1.0 - (k.min(4.0 - k).clamp(0.0, 1.0)))
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn pattern(style: &ClassStyle, u: f64, v: f64, phase: f64, center: (f64, f64)) -> f64 {
    use std::f64::consts::TAU;
    let s = |t: f64| 0.5 + 0.5 * t.sin();
    let r = ((u - center.0).powi(2) + (v - center.1).powi(2)).sqrt();
    match style.kind {
        0 => s(TAU * style.freq * 2.0 * v + phase),
        1 => s(TAU * style.freq * 2.0 * u + phase),
        2 => s(TAU * style.freq * 1.5 * (u + v) + phase),
        3 => {
            let a = (TAU * style.freq * u + phase).sin() * (TAU * style.freq * v + phase * 0.5).sin();
            if a >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        4 => s(TAU * style.freq * 3.0 * r + phase),
        _ => {
            let sigma = 0.12 + 0.06 * style.freq;
            (-(r * r) / (2.0 * sigma * sigma)).exp()
        }
    }
}

/// Seeded corpus where each class is a colored geometric pattern and each
/// domain applies a global appearance shift. `samples_per_class` counts
/// samples per class within every domain.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledImageSet> {
    if spec.n_classes == 0 || spec.n_domains == 0 || spec.samples_per_class == 0 || spec.image_size == 0 {
        return Err(Error::Config("synthetic corpus sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hue0: f64 = rng.random();
    let classes: Vec<ClassStyle> = (0..spec.n_classes)
        .map(|c| ClassStyle {
            kind: c % 6,
            freq: 1.0 + ((c / 6) % 3) as f64 * 0.75,
            color: hue_rgb((hue0 + c as f64 * 0.618_034) % 1.0),
        })
        .collect();
    let domains: Vec<DomainStyle> = (0..spec.n_domains)
        .map(|d| DomainStyle {
            background: if d == 0 {
                [24.0, 24.0, 24.0]
            } else {
                [
                    rng.random_range(0.0..200.0),
                    rng.random_range(0.0..200.0),
                    rng.random_range(0.0..200.0),
                ]
            },
            contrast: if d == 0 { 1.0 } else { rng.random_range(0.55..0.95) },
            tint: if d == 0 {
                [0.0; 3]
            } else {
                std::array::from_fn(|_| rng.random_range(-40.0..40.0))
            },
            noise: spec.noise * (1.0 + 0.25 * (d % 4) as f64),
        })
        .collect();

    let side = spec.image_size;
    let total = spec.n_classes * spec.n_domains * spec.samples_per_class;
    let (mut images, mut labels, mut tags) = (
        Vec::with_capacity(total),
        Vec::with_capacity(total),
        Vec::with_capacity(total),
    );
    for (d, dom) in domains.iter().enumerate() {
        for (c, style) in classes.iter().enumerate() {
            for _ in 0..spec.samples_per_class {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let center = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
                let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-25.0..25.0));
                let noise = Normal::new(0.0, dom.noise).map_err(|e| Error::Config(e.to_string()))?;
                let mut img = Vec::with_capacity(side * side * 3);
                for y in 0..side {
                    for x in 0..side {
                        let m = pattern(
                            style,
                            (x as f64 + 0.5) / side as f64,
                            (y as f64 + 0.5) / side as f64,
                            phase,
                            center,
                        ) * dom.contrast;
                        for ch in 0..3 {
                            let fg = style.color[ch] + dom.tint[ch] + jitter[ch];
                            let v = dom.background[ch] * (1.0 - m) + fg * m + noise.sample(&mut rng);
                            img.push(v.round().clamp(0.0, 255.0) as u8);
                        }
                    }
                }
                images.push(img);
                labels.push(c);
                tags.push(d);
            }
        }
    }
    let domains = (spec.n_domains > 1).then_some(tags);
    LabeledImageSet::new(side, 3, spec.n_classes, Split::Train, images, labels, domains)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Reads the CIFAR binary layout: label byte(s), then 1024 R, 1024 G and
/// 1024 B bytes in row-major order. CIFAR-100 keeps the fine label.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<LabeledImageSet> {
    let bytes = fs::read(path)?;
    parse_cifar(&bytes, variant)
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<LabeledImageSet> {
    let rec = variant.record_bytes();
    if !bytes.len().is_multiple_of(rec) {
        let offset = (bytes.len() / rec * rec) as u64;
        return Err(Error::Format {
            offset,
            message: format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() % rec
            ),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for (r, chunk) in bytes.chunks_exact(rec).enumerate() {
        let label = chunk[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::Format {
                offset: (r * rec + variant.label_bytes() - 1) as u64,
                message: format!("label {label} out of range"),
            });
        }
        let px = &chunk[variant.label_bytes()..];
        let mut img = Vec::with_capacity(CIFAR_IMAGE_BYTES);
        for i in 0..plane {
            img.extend_from_slice(&[px[i], px[plane + i], px[2 * plane + i]]);
        }
        images.push(img);
        labels.push(label);
    }
    LabeledImageSet::new(CIFAR_SIDE, 3, variant.classes(), Split::Train, images, labels, None)
}

/// Writes a 32×32×3 set in the CIFAR-10 layout.
pub fn write_cifar10(path: &Path, set: &LabeledImageSet) -> Result<()> {
    if set.image_size != CIFAR_SIDE || set.channels != 3 || set.class_count > 256 {
        return Err(Error::Data(
            "CIFAR-10 layout needs 32×32×3 images and byte labels".into(),
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(set.len() * CifarVariant::Cifar10.record_bytes());
    for (img, &label) in set.images.iter().zip(&set.labels) {
        out.push(label as u8);
        for ch in 0..3 {
            out.extend((0..plane).map(|i| img[i * 3 + ch]));
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(n: usize, classes: usize) -> LabeledImageSet {
        let images = (0..n).map(|i| vec![i as u8; 3]).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        LabeledImageSet::new(1, 3, classes, Split::Train, images, labels, None).unwrap()
    }

    #[test]
    fn seven_shards_of_one_hundred() {
        let shards = shard_uniform(&tiny(100, 10), 7, 3).unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.members.len()).collect();
        assert_eq!(sizes, vec![15, 15, 14, 14, 14, 14, 14]);
    }

    #[test]
    fn one_shard_is_whole_set() {
        let shards = shard_uniform(&tiny(9, 3), 1, 0).unwrap();
        let mut m = shards[0].members.clone();
        m.sort_unstable();
        assert_eq!(m, (0..9).collect::<Vec<_>>());
        assert!(matches!(shard_uniform(&tiny(3, 3), 4, 0), Err(Error::Partition(_))));
    }

    #[test]
    fn class_episodes() {
        let set = tiny(200, 100);
        let eps = split_class_incremental(&set, 10).unwrap();
        assert_eq!(eps[3].label_map, (30..40).collect::<Vec<_>>());
        assert!(eps[3].members.iter().all(|&i| (30..40).contains(&set.label(i))));
        let eps = split_class_incremental(&tiny(8, 4), 2).unwrap();
        assert_eq!(eps[0].label_map, vec![0, 1]);
        assert_eq!(eps[1].label_map, vec![2, 3]);
        assert!(matches!(split_class_incremental(&set, 7), Err(Error::Partition(_))));
    }

    #[test]
    fn materialize_uses_local_labels() {
        let set = tiny(8, 4);
        let eps = split_class_incremental(&set, 2).unwrap();
        let local = eps[1].materialize(&set).unwrap();
        assert_eq!(local.class_count, 2);
        assert!(local.labels().iter().all(|&l| l < 2));
        assert_eq!(local.labels(), &[0, 1, 0, 1]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::new(3, 2, 4, 8);
        assert_eq!(gen_synthetic(&spec, 5).unwrap(), gen_synthetic(&spec, 5).unwrap());
        assert_ne!(gen_synthetic(&spec, 5).unwrap(), gen_synthetic(&spec, 6).unwrap());
        let plain = gen_synthetic(&SyntheticSpec::new(3, 1, 4, 8), 5).unwrap();
        assert!(plain.domains().is_none());
    }

    #[test]
    fn synthetic_class_means_differ() {
        let set = gen_synthetic(&SyntheticSpec::new(6, 1, 20, 12), 1).unwrap();
        let means: Vec<Vec<f64>> = (0..6)
            .map(|c| {
                let members: Vec<usize> = (0..set.len()).filter(|&i| set.label(i) == c).collect();
                (0..set.image(0).len())
                    .map(|p| members.iter().map(|&i| set.image(i)[p] as f64).sum::<f64>() / members.len() as f64)
                    .collect()
            })
            .collect();
        for a in 0..6 {
            for b in a + 1..6 {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 50.0, "classes {a} and {b} too close: {dist}");
            }
        }
    }

    #[test]
    fn domain_split_shapes() {
        let set = gen_synthetic(&SyntheticSpec::new(2, 11, 1, 4), 0).unwrap();
        let split = split_domains(&set, &[8, 9, 10]).unwrap();
        assert_eq!(split.episodes.len(), 8);
        assert_eq!(split.test.members.len(), 6);
        assert!(split.episodes.iter().all(|e| e.label_map == vec![0, 1]));
        let one = gen_synthetic(&SyntheticSpec::new(2, 2, 1, 4), 0).unwrap();
        assert_eq!(split_domains(&one, &[1]).unwrap().episodes.len(), 1);
    }

    #[test]
    fn cifar_round_trip() {
        let set = gen_synthetic(&SyntheticSpec::new(10, 1, 2, 32), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch.bin");
        write_cifar10(&path, &set).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(raw[0] as usize, set.label(0));
        let back = load_cifar_binary(&path, CifarVariant::Cifar10).unwrap();
        assert_eq!(back.images(), set.images());
        assert_eq!(back.labels(), set.labels());
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![3u8, 42];
        rec.extend(std::iter::repeat_n(7u8, CIFAR_IMAGE_BYTES));
        let set = parse_cifar(&rec, CifarVariant::Cifar100).unwrap();
        assert_eq!(set.labels(), &[42]);
        assert_eq!(set.class_count, 100);
    }

    #[test]
    fn truncated_cifar_reports_offset() {
        let rec = vec![0u8; CifarVariant::Cifar10.record_bytes() * 2 + 10];
        match parse_cifar(&rec, CifarVariant::Cifar10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * 3073),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn shards_partition(n in 1usize..200, k in 1usize..20, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let set = tiny(n, 3);
            let shards = shard_uniform(&set, k, seed).unwrap();
            let mut all: Vec<usize> = shards.iter().flat_map(|s| s.members.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = shards.iter().map(|s| s.members.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
