//! Clean-latent context caches.
//!
//! [`AHISCache`] keeps the first `S` blocks forever as sinks and a FIFO of the
//! `R` most recent later blocks. With `S = 0` it is a plain sliding window.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::student::KVEntry;

pub trait ContextCache {
    /// Store a finished block. Indices must strictly increase.
    fn insert(&mut self, entry: KVEntry) -> Result<()>;
    /// Entries visible to the next block, oldest first.
    fn context(&self) -> Vec<KVEntry>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_order(last: Option<usize>, entry: &KVEntry) -> Result<()> {
    match last {
        Some(l) if entry.block_index <= l => Err(Error::CacheOrder {
            inserted: entry.block_index,
            last: l,
        }),
        _ => Ok(()),
    }
}

/// Keeps every block.
#[derive(Debug, Clone, Default)]
pub struct UnboundedCache {
    entries: Vec<KVEntry>,
}

impl UnboundedCache {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ContextCache for UnboundedCache {
    fn insert(&mut self, entry: KVEntry) -> Result<()> {
        check_order(self.entries.last().map(|e| e.block_index), &entry)?;
        self.entries.push(entry);
        Ok(())
    }

    fn context(&self) -> Vec<KVEntry> {
        self.entries.clone()
    }

    fn len(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone)]
pub struct AHISCache {
    sink_capacity: usize,
    rolling_capacity: usize,
    sinks: Vec<KVEntry>,
    rolling: VecDeque<KVEntry>,
    last: Option<usize>,
}

impl AHISCache {
    pub fn new(sink_capacity: usize, rolling_capacity: usize) -> Self {
        Self {
            sink_capacity,
            rolling_capacity,
            sinks: Vec::with_capacity(sink_capacity),
            rolling: VecDeque::with_capacity(rolling_capacity),
            last: None,
        }
    }

    pub fn sink_capacity(&self) -> usize {
        self.sink_capacity
    }

    pub fn rolling_capacity(&self) -> usize {
        self.rolling_capacity
    }

    pub fn capacity(&self) -> usize {
        self.sink_capacity + self.rolling_capacity
    }

    pub fn sinks(&self) -> &[KVEntry] {
        &self.sinks
    }

    pub fn rolling(&self) -> impl Iterator<Item = &KVEntry> {
        self.rolling.iter()
    }
}

impl Default for AHISCache {
    fn default() -> Self {
        Self::new(3, 2)
    }
}

impl ContextCache for AHISCache {
    fn insert(&mut self, entry: KVEntry) -> Result<()> {
        check_order(self.last, &entry)?;
        self.last = Some(entry.block_index);
        if self.sinks.len() < self.sink_capacity {
            self.sinks.push(entry);
        } else if self.rolling_capacity > 0 {
            if self.rolling.len() == self.rolling_capacity {
                self.rolling.pop_front();
            }
            self.rolling.push_back(entry);
        }
        Ok(())
    }

    fn context(&self) -> Vec<KVEntry> {
        self.sinks
            .iter()
            .chain(self.rolling.iter())
            .cloned()
            .collect()
    }

    fn len(&self) -> usize {
        self.sinks.len() + self.rolling.len()
    }
}

pub fn cache_insert(cache: &mut AHISCache, entry: KVEntry) -> Result<()> {
    cache.insert(entry)
}

pub fn cache_context(cache: &AHISCache) -> Vec<KVEntry> {
    cache.context()
}

/// Serializable choice of cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CachePolicy {
    Ahis { sinks: usize, rolling: usize },
    Unbounded,
}

impl CachePolicy {
    pub const DEFAULT_AHIS: CachePolicy = CachePolicy::Ahis {
        sinks: 3,
        rolling: 2,
    };

    pub fn sliding(window: usize) -> Self {
        CachePolicy::Ahis {
            sinks: 0,
            rolling: window,
        }
    }

    pub fn build(self) -> Box<dyn ContextCache + Send> {
        match self {
            CachePolicy::Ahis { sinks, rolling } => Box::new(AHISCache::new(sinks, rolling)),
            CachePolicy::Unbounded => Box::new(UnboundedCache::new()),
        }
    }

    pub fn label(self) -> String {
        match self {
            CachePolicy::Ahis { sinks: 0, rolling } => format!("sliding(0,{rolling})"),
            CachePolicy::Ahis { sinks, rolling } => format!("ahis({sinks},{rolling})"),
            CachePolicy::Unbounded => "unbounded".into(),
        }
    }
}

impl Default for CachePolicy {
    fn default() -> Self {
        Self::DEFAULT_AHIS
    }
}
