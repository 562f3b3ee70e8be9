//! Prompt pools: the stored set of per-source prompts on one backbone.
//!
//! On disk a pool is a directory holding `manifest.json` and, per source,
//! `sources/<id>.bin` plus an optional `sources/<id>.proto.bin`. Adding or
//! removing a source touches only its own files and the manifest, which is
//! replaced atomically.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aptw::{PrototypeSet, DEFAULT_BETA, DEFAULT_K};
use crate::error::{Error, Result};
use crate::prompt::{Head, PromptVariant, SourcePromptSet};
use crate::tensor::{read_named, write_named, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const SOURCES_DIR: &str = "sources";

/// Read access to a set of prompt sources.
pub trait PromptStore<S: Scalar> {
    fn backbone_fingerprint(&self) -> &str;
    /// Size of the global label space.
    fn n_classes(&self) -> usize;
    fn source_ids(&self) -> Vec<String>;
    fn source(&self, id: &str) -> Result<&SourcePromptSet<S>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub source_id: String,
    pub variant: PromptVariant,
    pub label_map: Vec<usize>,
    pub prompt_tokens: usize,
    pub d_mem: usize,
    pub blob: String,
    pub prototypes: Option<String>,
    pub prototype_k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub name: String,
    pub backbone_fingerprint: String,
    pub n_classes: usize,
    pub created_by: String,
    pub default_k: usize,
    pub default_beta: f64,
    pub sources: Vec<SourceEntry>,
}

/// Named collection of source prompt sets sharing one backbone.
#[derive(Debug, Clone)]
pub struct PromptPool<S: Scalar = f32> {
    dir: Option<PathBuf>,
    manifest: PoolManifest,
    sources: BTreeMap<String, SourcePromptSet<S>>,
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "source id `{id}` must be non-empty ASCII letters, digits, `_`, `-` or `.`"
        )))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl<S: Scalar> PromptPool<S> {
    /// Pool kept only in memory.
    pub fn in_memory(name: &str, backbone_fingerprint: &str, n_classes: usize) -> Self {
        Self {
            dir: None,
            manifest: PoolManifest {
                name: name.to_string(),
                backbone_fingerprint: backbone_fingerprint.to_string(),
                n_classes,
                created_by: concat!("alacarte ", env!("CARGO_PKG_VERSION")).to_string(),
                default_k: DEFAULT_K,
                default_beta: DEFAULT_BETA,
                sources: Vec::new(),
            },
            sources: BTreeMap::new(),
        }
    }

    /// New empty pool directory.
    pub fn create(dir: &Path, name: &str, backbone_fingerprint: &str, n_classes: usize) -> Result<Self> {
        if dir.join(MANIFEST).exists() {
            return Err(Error::Config(format!("{} already holds a pool", dir.display())));
        }
        fs::create_dir_all(dir.join(SOURCES_DIR))?;
        let mut pool = Self::in_memory(name, backbone_fingerprint, n_classes);
        pool.dir = Some(dir.to_path_buf());
        pool.write_manifest()?;
        Ok(pool)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: PoolManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        let mut sources = BTreeMap::new();
        for e in &manifest.sources {
            let set = read_source(dir, e, &manifest.backbone_fingerprint)?;
            sources.insert(e.source_id.clone(), set);
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            manifest,
            sources,
        })
    }

    pub fn manifest(&self) -> &PoolManifest {
        &self.manifest
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn ls(&self) -> &[SourceEntry] {
        &self.manifest.sources
    }

    pub fn contains(&self, id: &str) -> bool {
        self.sources.contains_key(id)
    }

    fn write_manifest(&self) -> Result<()> {
        if let Some(dir) = &self.dir {
            write_atomic(
                &dir.join(MANIFEST),
                serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
            )?;
        }
        Ok(())
    }

    /// Adds one source; its blob is written before the manifest names it.
    pub fn add(&mut self, set: SourcePromptSet<S>) -> Result<()> {
        check_id(&set.source_id)?;
        if set.backbone_fingerprint != self.manifest.backbone_fingerprint {
            return Err(Error::StalePrompt {
                source_id: set.source_id.clone(),
                expected: self.manifest.backbone_fingerprint.clone(),
                found: set.backbone_fingerprint.clone(),
            });
        }
        if self.sources.contains_key(&set.source_id) {
            return Err(Error::Composition(format!(
                "source `{}` already in pool",
                set.source_id
            )));
        }
        if let Some(&l) = set.label_map.iter().find(|&&l| l >= self.manifest.n_classes) {
            return Err(Error::Label {
                label: l,
                classes: self.manifest.n_classes,
            });
        }
        let entry = SourceEntry {
            source_id: set.source_id.clone(),
            variant: set.variant,
            label_map: set.label_map.clone(),
            prompt_tokens: set.prompt_tokens(),
            d_mem: set.d_mem(),
            blob: format!("{SOURCES_DIR}/{}.bin", set.source_id),
            prototypes: set
                .prototypes
                .as_ref()
                .map(|_| format!("{SOURCES_DIR}/{}.proto.bin", set.source_id)),
            prototype_k: set.prototypes.as_ref().map(PrototypeSet::k),
        };
        if let Some(dir) = &self.dir {
            write_source(dir, &entry, &set)?;
        }
        self.manifest.sources.push(entry);
        self.sources.insert(set.source_id.clone(), set);
        if let Err(e) = self.write_manifest() {
            self.manifest.sources.pop();
            return Err(e);
        }
        Ok(())
    }

    /// Drops a source from the manifest, then deletes its files.
    pub fn forget(&mut self, id: &str) -> Result<SourcePromptSet<S>> {
        let pos = self
            .manifest
            .sources
            .iter()
            .position(|e| e.source_id == id)
            .ok_or_else(|| Error::Lookup(id.to_string()))?;
        let entry = self.manifest.sources.remove(pos);
        self.write_manifest()?;
        if let Some(dir) = &self.dir {
            fs::remove_file(dir.join(&entry.blob))?;
            if let Some(p) = &entry.prototypes {
                fs::remove_file(dir.join(p))?;
            }
        }
        self.sources.remove(id).ok_or_else(|| Error::Lookup(id.to_string()))
    }

    /// Attaches prototypes to a source already in the pool.
    pub fn set_prototypes(&mut self, id: &str, prototypes: PrototypeSet) -> Result<()> {
        let set = self
            .sources
            .get(id)
            .ok_or_else(|| Error::Lookup(id.to_string()))?
            .clone();
        let mut set = set;
        set.prototypes = Some(prototypes);
        self.forget(id)?;
        self.add(set)
    }
}

impl<S: Scalar> PromptStore<S> for PromptPool<S> {
    fn backbone_fingerprint(&self) -> &str {
        &self.manifest.backbone_fingerprint
    }

    fn n_classes(&self) -> usize {
        self.manifest.n_classes
    }

    fn source_ids(&self) -> Vec<String> {
        self.manifest.sources.iter().map(|e| e.source_id.clone()).collect()
    }

    fn source(&self, id: &str) -> Result<&SourcePromptSet<S>> {
        self.sources.get(id).ok_or_else(|| Error::Lookup(id.to_string()))
    }
}

fn write_source<S: Scalar>(dir: &Path, entry: &SourceEntry, set: &SourcePromptSet<S>) -> Result<()> {
    let mut blob = Vec::new();
    write_named(&mut blob, &set.named_tensors())?;
    write_atomic(&dir.join(&entry.blob), &blob)?;
    if let (Some(path), Some(p)) = (&entry.prototypes, &set.prototypes) {
        let mut blob = Vec::new();
        write_named(&mut blob, &[(p.built_from.clone(), &p.centroids)])?;
        write_atomic(&dir.join(path), &blob)?;
    }
    Ok(())
}

fn read_source<S: Scalar>(dir: &Path, e: &SourceEntry, fingerprint: &str) -> Result<SourcePromptSet<S>> {
    let bytes = fs::read(dir.join(&e.blob))?;
    let mut tensors: BTreeMap<String, Tensor<S>> = read_named(&mut bytes.as_slice())?.into_iter().collect();
    let mut take = |name: &str| {
        tensors.remove(name).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("`{}` lacks tensor `{name}`", e.blob),
        })
    };
    let prompt = take("prompt")?;
    let n_mem = match e.variant {
        PromptVariant::Deep => usize::MAX,
        PromptVariant::DeepShared => 1,
        PromptVariant::Shallow => 0,
    };
    let mut memory = Vec::new();
    while memory.len() < n_mem {
        match take(&format!("memory.{}", memory.len())) {
            Ok(t) => memory.push(t),
            Err(_) => break,
        }
    }
    let head = Head {
        w: take("head.w")?,
        b: take("head.b")?,
    };
    let prototypes = match &e.prototypes {
        Some(p) => {
            let bytes = fs::read(dir.join(p))?;
            let (built_from, centroids) = read_named::<f64, _>(&mut bytes.as_slice())?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    message: format!("`{p}` is empty"),
                })?;
            Some(PrototypeSet {
                source_id: e.source_id.clone(),
                centroids,
                built_from,
            })
        }
        None => None,
    };
    Ok(SourcePromptSet {
        source_id: e.source_id.clone(),
        variant: e.variant,
        prompt,
        memory,
        head,
        label_map: e.label_map.clone(),
        prototypes,
        backbone_fingerprint: fingerprint.to_string(),
    })
}

/// Wraps a store and records every source it hands out.
pub struct TrackingStore<'p, P> {
    inner: &'p P,
    reads: RefCell<Vec<String>>,
}

impl<'p, P> TrackingStore<'p, P> {
    pub fn new(inner: &'p P) -> Self {
        Self {
            inner,
            reads: RefCell::new(Vec::new()),
        }
    }

    /// Ids read so far, in order, with repeats.
    pub fn reads(&self) -> Vec<String> {
        self.reads.borrow().clone()
    }
}

impl<S: Scalar, P: PromptStore<S>> PromptStore<S> for TrackingStore<'_, P> {
    fn backbone_fingerprint(&self) -> &str {
        self.inner.backbone_fingerprint()
    }

    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn source_ids(&self) -> Vec<String> {
        self.inner.source_ids()
    }

    fn source(&self, id: &str) -> Result<&SourcePromptSet<S>> {
        self.reads.borrow_mut().push(id.to_string());
        self.inner.source(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptLayout;
    use crate::vit::BackboneConfig;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ..BackboneConfig::default()
        }
    }

    fn source(id: &str, variant: PromptVariant, seed: u64) -> SourcePromptSet {
        let layout = PromptLayout {
            variant,
            ..PromptLayout::default()
        };
        SourcePromptSet::init(id, &layout, &cfg(), vec![0, 1, 2], "fp", seed).unwrap()
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut pool = PromptPool::<f32>::create(dir.path(), "p", "fp", 3).unwrap();
        let mut a = source("a", PromptVariant::Deep, 1);
        a.prototypes = Some(PrototypeSet {
            source_id: "a".into(),
            centroids: Tensor::from_f64(&[2, 8], &[0.5; 16]).unwrap(),
            built_from: "fp".into(),
        });
        pool.add(a.clone()).unwrap();
        pool.add(source("b", PromptVariant::DeepShared, 2)).unwrap();
        pool.add(source("c", PromptVariant::Shallow, 3)).unwrap();
        let back = PromptPool::<f32>::open(dir.path()).unwrap();
        assert_eq!(back.manifest(), pool.manifest());
        for id in ["a", "b", "c"] {
            assert_eq!(back.source(id).unwrap(), pool.source(id).unwrap());
        }
    }

    #[test]
    fn forget_removes_files_and_restores_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut pool = PromptPool::<f32>::create(dir.path(), "p", "fp", 3).unwrap();
        pool.add(source("a", PromptVariant::Deep, 1)).unwrap();
        let before = fs::read(dir.path().join(MANIFEST)).unwrap();
        pool.add(source("b", PromptVariant::Deep, 2)).unwrap();
        assert!(dir.path().join("sources/b.bin").exists());
        pool.forget("b").unwrap();
        assert!(!dir.path().join("sources/b.bin").exists());
        assert_eq!(fs::read(dir.path().join(MANIFEST)).unwrap(), before);
        assert!(matches!(pool.forget("b"), Err(Error::Lookup(_))));
    }

    #[test]
    fn rejects_foreign_backbone_and_duplicates() {
        let mut pool = PromptPool::<f32>::in_memory("p", "other", 3);
        assert!(matches!(
            pool.add(source("a", PromptVariant::Deep, 1)),
            Err(Error::StalePrompt { .. })
        ));
        let mut pool = PromptPool::<f32>::in_memory("p", "fp", 3);
        pool.add(source("a", PromptVariant::Deep, 1)).unwrap();
        assert!(matches!(
            pool.add(source("a", PromptVariant::Deep, 1)),
            Err(Error::Composition(_))
        ));
        assert!(pool.add(source("../x", PromptVariant::Deep, 1)).is_err());
    }

    #[test]
    fn tracking_store_records_reads() {
        let mut pool = PromptPool::<f32>::in_memory("p", "fp", 3);
        pool.add(source("a", PromptVariant::Deep, 1)).unwrap();
        pool.add(source("b", PromptVariant::Deep, 2)).unwrap();
        let t = TrackingStore::new(&pool);
        PromptStore::<f32>::source(&t, "b").unwrap();
        assert_eq!(t.reads(), vec!["b".to_string()]);
    }
}
