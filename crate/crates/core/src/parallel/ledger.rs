//! Communication accounting for the simulated worker group.
//!
//! Volumes are counted in elements, not bytes, matching the analytic cost
//! model: an all-gather of a tensor with `n` total elements costs `n`, a
//! reduce-sum of an `n`-element tensor costs `2n`.

use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveKind {
    AllGather,
    ReduceSum,
}

impl CollectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CollectiveKind::AllGather => "all-gather",
            CollectiveKind::ReduceSum => "reduce-sum",
        }
    }
}

/// One collective call, attributed to a pipeline site by `tag`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficEvent {
    pub step: u64,
    pub kind: CollectiveKind,
    pub elements: u64,
    pub tag: String,
}

/// Append-only record of every collective the group executed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrafficLedger {
    events: Vec<TrafficEvent>,
}

impl TrafficLedger {
    pub(crate) fn record(&mut self, event: TrafficEvent) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[TrafficEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn call_count(&self, kind: CollectiveKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn total_volume(&self, kind: CollectiveKind) -> u64 {
        self.events
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.elements)
            .sum()
    }

    /// Aggregated element volume per `(tag, kind)` site.
    pub fn volume_by_tag(&self) -> BTreeMap<(String, CollectiveKind), u64> {
        let mut out = BTreeMap::new();
        for e in &self.events {
            *out.entry((e.tag.clone(), e.kind)).or_insert(0) += e.elements;
        }
        out
    }
}
