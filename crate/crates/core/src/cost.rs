//! Attribution of executed FLOPs to prune units and attention regions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Mode, Segment, TokenLayout};
use crate::tensor_kernel::{FlopMeter, SubmoduleKind};

/// Which region of the attention pattern a unit of work belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostClass {
    /// Frame query, text key.
    Ca,
    /// Frame query, key in the same frame.
    Sa,
    /// Frame query, key in another frame.
    Ta,
    /// Text query, any key.
    Text,
    /// Dense Q/K/V/output projections.
    Projection,
}

impl CostClass {
    pub const ALL: [CostClass; 5] = [
        CostClass::Ca,
        CostClass::Sa,
        CostClass::Ta,
        CostClass::Text,
        CostClass::Projection,
    ];
}

/// Classifies the (query, key) pair at global sequence positions.
#[inline]
pub fn classify(layout: &TokenLayout, query: usize, key: usize) -> CostClass {
    match (layout.segment(query), layout.segment(key)) {
        (Segment::Text, _) => CostClass::Text,
        (Segment::Frame(_), Segment::Text) => CostClass::Ca,
        (Segment::Frame(i), Segment::Frame(j)) if i == j => CostClass::Sa,
        (Segment::Frame(_), Segment::Frame(_)) => CostClass::Ta,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CostKey {
    pub unit: usize,
    pub module: SubmoduleKind,
    pub class: CostClass,
}

/// Per-run FLOP counts keyed by unit, sub-module and class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopTally {
    counts: BTreeMap<CostKey, u64>,
}

impl FlopTally {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero counts are not stored, so tallies compare equal regardless of
    /// how many empty contributions were offered.
    pub fn add(&mut self, key: CostKey, flops: u64) {
        if flops == 0 {
            return;
        }
        *self.counts.entry(key).or_insert(0) += flops;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CostKey, &u64)> {
        self.counts.iter()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn sum_where(&self, mut pred: impl FnMut(&CostKey) -> bool) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn class_total(&self, unit: usize, class: CostClass) -> u64 {
        self.sum_where(|k| k.unit == unit && k.class == class)
    }

    pub fn unit_total(&self, unit: usize) -> u64 {
        self.sum_where(|k| k.unit == unit)
    }

    /// Work that pruning `unit` removes: cross-frame entries of the joint
    /// attention when entangled, the whole temporal sub-module when cascaded.
    pub fn prunable(&self, mode: Mode, unit: usize) -> u64 {
        self.sum_where(|k| k.unit == unit && is_prunable(mode, k))
    }
}

pub fn is_prunable(mode: Mode, key: &CostKey) -> bool {
    match mode {
        Mode::Entangled => key.module == SubmoduleKind::Joint && key.class == CostClass::Ta,
        Mode::Cascaded => key.module == SubmoduleKind::Temporal,
    }
}

/// Routes kernel work into a tally, or nowhere when the tally is absent.
pub(crate) struct TallyMeter<'a> {
    pub tally: Option<&'a mut FlopTally>,
    pub unit: usize,
    pub module: SubmoduleKind,
    pub layout: TokenLayout,
    pub query_offset: usize,
    pub key_offset: usize,
}

impl FlopMeter for TallyMeter<'_> {
    fn dense(&mut self, flops: u64) {
        if let Some(tally) = self.tally.as_deref_mut() {
            tally.add(
                CostKey {
                    unit: self.unit,
                    module: self.module,
                    class: CostClass::Projection,
                },
                flops,
            );
        }
    }

    fn attention_row(&mut self, query: usize, visible_keys: &[usize], flops_per_key: u64) {
        let Some(tally) = self.tally.as_deref_mut() else {
            return;
        };
        let mut per_class = [0u64; 5];
        let q = self.query_offset + query;
        for &k in visible_keys {
            let class = classify(&self.layout, q, self.key_offset + k);
            per_class[class as usize] += flops_per_key;
        }
        for (class, flops) in CostClass::ALL.into_iter().zip(per_class) {
            if flops > 0 {
                tally.add(
                    CostKey {
                        unit: self.unit,
                        module: self.module,
                        class,
                    },
                    flops,
                );
            }
        }
    }
}
