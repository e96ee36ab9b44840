use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::stream::Modality;
use crate::error::{Error, Result};

/// Keys and values one layer keeps for later decode steps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerCache {
    pub positions: Vec<usize>,
    pub modalities: Vec<Modality>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: usize, modality: Modality, key: Vec<f64>, value: Vec<f64>) {
        self.positions.push(position);
        self.modalities.push(modality);
        self.keys.push(key);
        self.values.push(value);
    }

    pub fn vision_count(&self) -> usize {
        self.modalities.iter().filter(|m| **m == Modality::Vision).count()
    }

    fn retain_text(&mut self) {
        let keep: Vec<bool> = self.modalities.iter().map(|m| m.is_text()).collect();
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.modalities.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.keys.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.values.retain(|_| *it.next().unwrap());
    }
}

/// Per-layer KV cache.
///
/// Every cache belongs to a lineage. A decode step consumes the current
/// version and hands back the next one; decoding again from an older
/// version (or a clone of it) is a state error. Use [`KvCache::fork`] to
/// branch on purpose.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    next_position: usize,
    lineage: Arc<AtomicU64>,
    version: u64,
}

impl PartialEq for KvCache {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.next_position == other.next_position
    }
}

impl KvCache {
    pub fn new(layers: Vec<LayerCache>, next_position: usize) -> Self {
        Self {
            layers,
            next_position,
            lineage: Arc::new(AtomicU64::new(0)),
            version: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    /// 1-based layer access.
    pub fn layer(&self, layer: usize) -> Option<&LayerCache> {
        layer.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    /// Same contents, new independent lineage.
    pub fn fork(&self) -> Self {
        Self::new(self.layers.clone(), self.next_position)
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(LayerCache::len).sum()
    }

    pub fn vision_entries(&self) -> usize {
        self.layers.iter().map(LayerCache::vision_count).sum()
    }

    pub(crate) fn ensure_current(&self) -> Result<()> {
        if self.lineage.load(Ordering::SeqCst) != self.version {
            return Err(Error::state(format!(
                "stale KV cache: version {} was already advanced",
                self.version
            )));
        }
        Ok(())
    }

    /// Claims this version and returns the successor built from `layers`.
    pub(crate) fn advance(&self, layers: Vec<LayerCache>) -> Result<Self> {
        self.lineage
            .compare_exchange(self.version, self.version + 1, Ordering::SeqCst, Ordering::SeqCst)
            .map_err(|_| Error::state("stale KV cache: concurrent decode on the same version"))?;
        Ok(Self {
            layers,
            next_position: self.next_position + 1,
            lineage: Arc::clone(&self.lineage),
            version: self.version + 1,
        })
    }
}

/// Copy of `cache` with vision rows removed from the given 1-based layers.
/// The copy starts a new lineage.
pub fn evict_vision_kv(cache: &KvCache, layers: &BTreeSet<usize>) -> Result<KvCache> {
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > cache.num_layers()) {
        return Err(Error::input(format!("layer {bad} outside 1..={}", cache.num_layers())));
    }
    let mut out = cache.fork();
    for &l in layers {
        out.layers[l - 1].retain_text();
    }
    Ok(out)
}
