//! The G adapter slots in GPU memory, replaced LRU among idle adapters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::LoadSource;
use crate::workload::AdapterId;

#[derive(Debug, Clone, PartialEq)]
struct Resident {
    rank: u32,
    last_used: f64,
    /// Running requests currently using the adapter.
    running: u32,
}

/// One adapter brought into a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub adapter_id: AdapterId,
    pub rank: u32,
    pub source: LoadSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evicted: Option<AdapterId>,
}

#[derive(Debug, Clone)]
pub struct SlotCache {
    capacity_slots: usize,
    resident: BTreeMap<AdapterId, Resident>,
    /// Resident adapters with at least one running request.
    pinned: usize,
    pub source: LoadSource,
}

impl SlotCache {
    pub fn new(capacity_slots: usize, source: LoadSource) -> Self {
        SlotCache {
            capacity_slots,
            resident: BTreeMap::new(),
            pinned: 0,
            source,
        }
    }

    pub fn capacity_slots(&self) -> usize {
        self.capacity_slots
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn is_resident(&self, adapter: AdapterId) -> bool {
        self.resident.contains_key(&adapter)
    }

    pub fn last_used(&self, adapter: AdapterId) -> Option<f64> {
        self.resident.get(&adapter).map(|r| r.last_used)
    }

    pub fn resident_ids(&self) -> impl Iterator<Item = AdapterId> + '_ {
        self.resident.keys().copied()
    }

    /// Whether a request of `adapter` could get a slot now, using the
    /// cache's own record of which adapters have running requests.
    pub fn is_loadable(&self, adapter: AdapterId) -> bool {
        self.is_resident(adapter)
            || self.resident.len() < self.capacity_slots
            || self.resident.len() > self.pinned
    }

    /// Same query against an explicit set of running adapters.
    pub fn is_loadable_with(&self, adapter: AdapterId, running: &BTreeSet<AdapterId>) -> bool {
        self.is_resident(adapter)
            || self.resident.len() < self.capacity_slots
            || self.resident.keys().any(|a| !running.contains(a))
    }

    /// Marks one more running request on a resident adapter.
    pub fn pin(&mut self, adapter: AdapterId) -> Result<()> {
        let r = self.resident.get_mut(&adapter).ok_or_else(|| {
            Error::Invariant(format!("running request on non-resident adapter {adapter}"))
        })?;
        r.running += 1;
        if r.running == 1 {
            self.pinned += 1;
        }
        Ok(())
    }

    pub fn unpin(&mut self, adapter: AdapterId) -> Result<()> {
        let r = self
            .resident
            .get_mut(&adapter)
            .filter(|r| r.running > 0)
            .ok_or_else(|| Error::Invariant(format!("unbalanced unpin of adapter {adapter}")))?;
        r.running -= 1;
        if r.running == 0 {
            self.pinned -= 1;
        }
        Ok(())
    }

    pub fn running_requests(&self, adapter: AdapterId) -> u32 {
        self.resident.get(&adapter).map_or(0, |r| r.running)
    }

    /// Makes every adapter in `needed` resident, evicting the least recently
    /// used idle adapters as required, and refreshes their recency to `now`.
    /// Returns one [`Load`] per adapter brought in.
    pub fn ensure_loaded(&mut self, needed: &[(AdapterId, u32)], now: f64) -> Result<Vec<Load>> {
        let wanted: BTreeSet<AdapterId> = needed.iter().map(|n| n.0).collect();
        if wanted.len() > self.capacity_slots {
            return Err(Error::Invariant(format!(
                "{} adapters needed at once but only {} slots",
                wanted.len(),
                self.capacity_slots
            )));
        }
        let mut loads = Vec::new();
        for &(adapter, rank) in needed {
            if self.resident.contains_key(&adapter) {
                continue;
            }
            let mut evicted = None;
            if self.resident.len() >= self.capacity_slots {
                let victim = self
                    .resident
                    .iter()
                    .filter(|(id, r)| r.running == 0 && !wanted.contains(id))
                    .min_by(|a, b| a.1.last_used.total_cmp(&b.1.last_used).then(a.0.cmp(b.0)))
                    .map(|(id, _)| *id)
                    .ok_or_else(|| {
                        Error::Invariant(format!(
                            "no idle slot to evict for adapter {adapter}"
                        ))
                    })?;
                self.resident.remove(&victim);
                evicted = Some(victim);
            }
            self.resident.insert(
                adapter,
                Resident {
                    rank,
                    last_used: now,
                    running: 0,
                },
            );
            loads.push(Load {
                adapter_id: adapter,
                rank,
                source: self.source,
                evicted,
            });
        }
        for a in &wanted {
            if let Some(r) = self.resident.get_mut(a) {
                r.last_used = now;
            }
        }
        Ok(loads)
    }

    pub fn rank_of(&self, adapter: AdapterId) -> Option<u32> {
        self.resident.get(&adapter).map(|r| r.rank)
    }
}
