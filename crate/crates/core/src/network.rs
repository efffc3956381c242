//! Signal, contact, and link-capacity model.
//!
//! Connectivity is piecewise-constant: every node has a breakpoint schedule
//! of signal levels, relays additionally have visit windows during which
//! their short-range hotspot reaches a cluster of farmer devices. All
//! schedules are fully expanded before a run, so lookups are pure.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::protocol::{DeviceId, DurationSecs, NodeId, RelayId, Timestamp};

/// Cellular signal as the handset sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SignalLevel {
    None,
    Poor,
    Good,
}

impl std::fmt::Display for SignalLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SignalLevel::None => "none",
            SignalLevel::Poor => "poor",
            SignalLevel::Good => "good",
        };
        f.write_str(s)
    }
}

/// Breakpoint schedule: `(t, level)` pairs, first at t=0, strictly
/// increasing. The level at time `t` is the one of the last breakpoint <= t.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalSchedule {
    pub breakpoints: Vec<(Timestamp, SignalLevel)>,
}

impl SignalSchedule {
    pub fn constant(level: SignalLevel) -> Self {
        SignalSchedule { breakpoints: vec![(0, level)] }
    }

    pub fn level_at(&self, t: Timestamp) -> SignalLevel {
        let idx = self.breakpoints.partition_point(|(bt, _)| *bt <= t);
        // Validation guarantees a breakpoint at t=0.
        self.breakpoints[idx - 1].1
    }
}

/// One relay visit: the hotspot reaches `cluster` for `[arrive, depart)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub cluster: Vec<DeviceId>,
    pub arrive: Timestamp,
    pub depart: Timestamp,
}

impl Visit {
    pub fn covers(&self, t: Timestamp) -> bool {
        self.arrive <= t && t < self.depart
    }
}

/// Link-rate and hotspot-capacity parameters shared by the whole scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkModel {
    /// Short-range farmer-to-relay throughput, bytes per second.
    pub d2d_bytes_per_second: u64,
    /// Cellular upload throughput to the server, bytes per second.
    pub server_bytes_per_second: u64,
    /// Concurrent hand-off sessions a relay hotspot admits.
    pub relay_capacity: u32,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            d2d_bytes_per_second: 250_000,
            server_bytes_per_second: 1_000_000,
            relay_capacity: 8,
        }
    }
}

/// Seconds to move `bytes` over a link of `rate` bytes/s: ceiling division,
/// but never less than a full second for a non-empty transfer.
pub fn transfer_time(bytes: u64, rate: u64) -> DurationSecs {
    if bytes == 0 {
        return 0;
    }
    let rate = rate.max(1);
    (bytes.div_ceil(rate)).max(1)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetworkError {
    #[error("no schedule for node {0}")]
    UnknownNode(NodeId),
    #[error("no contact between {relay} and {device} at t={t}")]
    NoContact { relay: RelayId, device: DeviceId, t: Timestamp },
}

/// Admission result for one hand-off session at a relay hotspot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    /// Hotspot at capacity; the farmer must retry.
    Full,
}

/// Fully expanded connectivity for one scenario.
#[derive(Debug, Clone, Default)]
pub struct NetworkModel {
    pub signals: BTreeMap<NodeId, SignalSchedule>,
    pub visits: BTreeMap<RelayId, Vec<Visit>>,
    pub link: LinkModel,
}

impl NetworkModel {
    pub fn signal_at(&self, node: &NodeId, t: Timestamp) -> Result<SignalLevel, NetworkError> {
        self.signals
            .get(node)
            .map(|s| s.level_at(t))
            .ok_or_else(|| NetworkError::UnknownNode(node.clone()))
    }

    /// Relays whose hotspot covers `device` at `t` (visit windows are
    /// half-open, so `t == depart` is already out of contact).
    pub fn contacts_at(&self, device: &DeviceId, t: Timestamp) -> Vec<RelayId> {
        let mut out = Vec::new();
        for (relay, visits) in &self.visits {
            if visits.iter().any(|v| v.covers(t) && v.cluster.contains(device)) {
                out.push(relay.clone());
            }
        }
        out
    }

    /// The visit window putting `relay` in contact with `device` at `t`.
    pub fn visit_window(
        &self,
        relay: &RelayId,
        device: &DeviceId,
        t: Timestamp,
    ) -> Result<&Visit, NetworkError> {
        self.visits
            .get(relay)
            .and_then(|vs| vs.iter().find(|v| v.covers(t) && v.cluster.contains(device)))
            .ok_or_else(|| NetworkError::NoContact {
                relay: relay.clone(),
                device: device.clone(),
                t,
            })
    }

    /// Capacity gate: a session starts only while fewer than `capacity`
    /// sessions are active at the relay.
    pub fn admit(&self, active_sessions: u32) -> Admission {
        if active_sessions < self.link.relay_capacity {
            Admission::Admitted
        } else {
            Admission::Full
        }
    }
}
