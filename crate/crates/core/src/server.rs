//! Central server: exactly-once query ingest, the canned expert stage, and
//! downstream routing of acks, responses, and alerts.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::protocol::{
    validate_envelope, Channel, DeviceId, Envelope, EnvelopeError, EnvelopeKind, EventId, NodeId,
    QueryEvent, RelayId, Timestamp, UserId,
};
use crate::util::{hash_str, splitmix64};

/// How long the expert desk takes to produce advice for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertStubConfig {
    Fixed(u64),
    Uniform { min: u64, max: u64 },
}

impl Default for ExpertStubConfig {
    fn default() -> Self {
        ExpertStubConfig::Fixed(1800)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseState {
    Scheduled { due: Timestamp },
    Sent { at: Timestamp },
}

/// One row of the exactly-once ledger, keyed by (uid, eid).
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub first_received_at: Timestamp,
    pub source_path: Vec<NodeId>,
    pub target_device: DeviceId,
    pub response_state: ResponseState,
    pub ack: Envelope,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("malformed query: {0}")]
    MalformedQuery(EnvelopeError),
    #[error("expected a query envelope, got {0}")]
    NotAQuery(EnvelopeKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOutcome {
    pub duplicate: bool,
    /// Only set on a fresh ingest: when the expert response will be ready.
    pub response_due: Option<Timestamp>,
}

/// Where one downstream envelope went. Direct routes hand the stamped
/// envelope back so the caller can schedule its arrival; relay and parked
/// routes retain the envelope server-side.
#[derive(Debug, Clone, PartialEq)]
pub enum RouteDecision {
    Direct { env: Envelope },
    ViaRelay(Vec<RelayId>),
    Parked,
}

/// Recipients of a broadcast advisory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlertTarget {
    Users(Vec<UserId>),
    AllFarmers,
}

#[derive(Debug, Clone)]
pub struct ServerNode {
    expert: ExpertStubConfig,
    seed: u64,
    ledger: BTreeMap<(UserId, EventId), LedgerEntry>,
    /// Which relays have reported a registration for each (user, device).
    relay_map: BTreeMap<(UserId, DeviceId), Vec<RelayId>>,
    /// Devices learned from ingests and relay reports, for alert targeting.
    known_devices: BTreeMap<UserId, DeviceId>,
    /// Downstream copies waiting for each relay's next sync.
    relay_queues: BTreeMap<RelayId, Vec<Envelope>>,
    /// Envelopes with no usable route yet; re-routed when conditions change.
    parked: Vec<Envelope>,
}

impl ServerNode {
    pub fn new(expert: ExpertStubConfig, seed: u64) -> Self {
        ServerNode {
            expert,
            seed,
            ledger: BTreeMap::new(),
            relay_map: BTreeMap::new(),
            known_devices: BTreeMap::new(),
            relay_queues: BTreeMap::new(),
            parked: Vec::new(),
        }
    }

    pub fn node_id(&self) -> NodeId {
        NodeId::Server
    }

    /// Record which device a user submits from, ahead of any traffic. The
    /// simulator primes this from the scenario roster so broadcast alerts
    /// can reach farmers the server has not heard from yet.
    pub fn learn_device(&mut self, uid: &UserId, device: &DeviceId) {
        self.known_devices.insert(uid.clone(), device.clone());
    }

    /// Expert turnaround for one query. Deterministic in (seed, uid, eid) so
    /// reruns of a scenario reproduce byte-identical schedules.
    pub fn expert_latency(&self, uid: &UserId, eid: EventId) -> u64 {
        match self.expert {
            ExpertStubConfig::Fixed(n) => n,
            ExpertStubConfig::Uniform { min, max } => {
                let span = max.saturating_sub(min) + 1;
                let x = splitmix64(self.seed ^ hash_str(&uid.0).rotate_left(31) ^ eid.0);
                min + x % span
            }
        }
    }

    /// Accept one query exactly once. A duplicate of an already-ingested
    /// (uid, eid) gets back the original ack unchanged and schedules nothing.
    pub fn ingest_query(
        &mut self,
        env: &Envelope,
        event: &QueryEvent,
        now: Timestamp,
    ) -> Result<(Envelope, IngestOutcome), IngestError> {
        if env.kind != EnvelopeKind::Query {
            return Err(IngestError::NotAQuery(env.kind));
        }
        validate_envelope(env).map_err(IngestError::MalformedQuery)?;

        let key = (env.uid.clone(), event.eid);
        if let Some(entry) = self.ledger.get(&key) {
            return Ok((entry.ack.clone(), IngestOutcome { duplicate: true, response_due: None }));
        }

        self.known_devices.insert(env.uid.clone(), env.target_device.clone());
        let due = now + self.expert_latency(&env.uid, event.eid);
        let ack = Envelope {
            kind: EnvelopeKind::Ack,
            eid: Some(event.eid),
            uid: env.uid.clone(),
            target_device: env.target_device.clone(),
            sent_at: now,
            hops: vec![NodeId::Server],
            channel: env.channel,
            body: None,
        };
        let mut source_path = env.hops.clone();
        source_path.push(NodeId::Server);
        self.ledger.insert(
            key,
            LedgerEntry {
                first_received_at: now,
                source_path,
                target_device: env.target_device.clone(),
                response_state: ResponseState::Scheduled { due },
                ack: ack.clone(),
            },
        );
        Ok((ack, IngestOutcome { duplicate: false, response_due: Some(due) }))
    }

    /// Build the advice envelope once the expert stage is done. The body is
    /// deterministic in (seed, uid, eid).
    pub fn prepare_response(
        &mut self,
        uid: &UserId,
        eid: EventId,
        now: Timestamp,
    ) -> Option<Envelope> {
        let entry = self.ledger.get_mut(&(uid.clone(), eid))?;
        let tag = splitmix64(self.seed ^ hash_str(&uid.0) ^ eid.0.rotate_left(13)) % 10_000;
        let env = Envelope {
            kind: EnvelopeKind::Response,
            eid: Some(eid),
            uid: uid.clone(),
            target_device: entry.target_device.clone(),
            sent_at: now,
            hops: vec![NodeId::Server],
            channel: Channel::CellularData,
            body: Some(format!("advice-{}-{}-{tag:04}", uid.0, eid.0)),
        };
        entry.response_state = ResponseState::Sent { at: now };
        Some(env)
    }

    /// Merge one relay's reported registrations into the map. The map only
    /// grows; the return lists pairs this relay had not reported before.
    pub fn update_relay_map(
        &mut self,
        relay: &RelayId,
        pairs: Vec<(UserId, DeviceId)>,
    ) -> Vec<(UserId, DeviceId)> {
        let mut newly = Vec::new();
        for (uid, device) in pairs {
            self.known_devices.entry(uid.clone()).or_insert_with(|| device.clone());
            let relays = self.relay_map.entry((uid.clone(), device.clone())).or_default();
            if !relays.contains(relay) {
                relays.push(relay.clone());
                relays.sort();
                newly.push((uid, device));
            }
        }
        newly
    }

    pub fn relays_for(&self, uid: &UserId, device: &DeviceId) -> Vec<RelayId> {
        self.relay_map.get(&(uid.clone(), device.clone())).cloned().unwrap_or_default()
    }

    /// Pick a path for one downstream envelope given the target's current
    /// reachability: text it, push it over data, copy it to every relay that
    /// knows the device, or park it until something changes.
    pub fn route_downstream(
        &mut self,
        mut env: Envelope,
        sms_reachable: bool,
        data_reachable: bool,
        now: Timestamp,
    ) -> RouteDecision {
        let texts_allowed = env.kind != EnvelopeKind::Query;
        if sms_reachable && texts_allowed {
            env.sent_at = now;
            env.channel = Channel::Sms;
            return RouteDecision::Direct { env };
        }
        if data_reachable {
            env.sent_at = now;
            env.channel = Channel::CellularData;
            return RouteDecision::Direct { env };
        }
        let relays = self.relays_for(&env.uid, &env.target_device);
        if !relays.is_empty() {
            for relay in &relays {
                let mut copy = env.clone();
                copy.channel = Channel::D2D;
                self.relay_queues.entry(relay.clone()).or_default().push(copy);
            }
            return RouteDecision::ViaRelay(relays);
        }
        self.parked.push(env);
        RouteDecision::Parked
    }

    /// Everything queued for one relay, in queueing order.
    pub fn drain_relay_queue(&mut self, relay: &RelayId) -> Vec<Envelope> {
        self.relay_queues.remove(relay).unwrap_or_default()
    }

    pub fn relay_queue_len(&self, relay: &RelayId) -> usize {
        self.relay_queues.get(relay).map_or(0, Vec::len)
    }

    /// Pull parked envelopes back out so they can be re-routed after a
    /// signal change or relay-map growth.
    pub fn take_parked(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.parked)
    }

    pub fn parked_count(&self) -> usize {
        self.parked.len()
    }

    /// One advisory envelope per target user, in user order. Routing is the
    /// caller's job, same as any other downstream envelope.
    pub fn send_alert(&self, target: &AlertTarget, body: &str, now: Timestamp) -> Vec<Envelope> {
        let uids: Vec<UserId> = match target {
            AlertTarget::Users(list) => {
                let mut v = list.clone();
                v.sort();
                v.dedup();
                v
            }
            AlertTarget::AllFarmers => self.known_devices.keys().cloned().collect(),
        };
        uids.into_iter()
            .map(|uid| {
                let device = self
                    .known_devices
                    .get(&uid)
                    .cloned()
                    .unwrap_or_else(|| DeviceId::new(&uid.0));
                Envelope {
                    kind: EnvelopeKind::Alert,
                    eid: None,
                    uid,
                    target_device: device,
                    sent_at: now,
                    hops: vec![NodeId::Server],
                    channel: Channel::Sms,
                    body: Some(body.to_string()),
                }
            })
            .collect()
    }

    pub fn ledger_is_empty(&self) -> bool {
        self.ledger.is_empty()
    }

    pub fn ledger_len(&self) -> usize {
        self.ledger.len()
    }

    pub fn ledger_entry(&self, uid: &UserId, eid: EventId) -> Option<&LedgerEntry> {
        self.ledger.get(&(uid.clone(), eid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::PayloadDescriptor;

    fn query_env(uid: &str, eid: u64, via_relay: bool) -> (Envelope, QueryEvent) {
        let mut hops = vec![NodeId::Farmer(DeviceId::new(uid))];
        if via_relay {
            hops.push(NodeId::Relay(RelayId::new("R1")));
        }
        let env = Envelope {
            kind: EnvelopeKind::Query,
            eid: Some(EventId(eid)),
            uid: UserId::new(uid),
            target_device: DeviceId::new(uid),
            sent_at: 0,
            hops,
            channel: Channel::CellularData,
            body: None,
        };
        let event = QueryEvent {
            eid: EventId(eid),
            uid: UserId::new(uid),
            logical_device: DeviceId::new(uid),
            created_at: 0,
            payload: PayloadDescriptor {
                photo_bytes: 1000,
                voice_bytes: 0,
                labels: vec!["leaf-spot".into()],
                geotag: (26.1, 91.7),
            },
        };
        (env, event)
    }

    #[test]
    fn fresh_ingest_acks_and_schedules() {
        let mut s = ServerNode::new(ExpertStubConfig::default(), 7);
        let (env, event) = query_env("F1", 1, true);
        let (ack, outcome) = s.ingest_query(&env, &event, 3600).unwrap();
        assert!(!outcome.duplicate);
        assert_eq!(outcome.response_due, Some(3600 + 1800));
        assert_eq!(ack.kind, EnvelopeKind::Ack);
        assert_eq!(ack.eid, Some(EventId(1)));
        assert_eq!(ack.sent_at, 3600);
        assert_eq!(ack.hops, vec![NodeId::Server]);
        let entry = s.ledger_entry(&UserId::new("F1"), EventId(1)).unwrap();
        assert_eq!(entry.first_received_at, 3600);
        assert_eq!(
            entry.source_path,
            vec![
                NodeId::Farmer(DeviceId::new("F1")),
                NodeId::Relay(RelayId::new("R1")),
                NodeId::Server
            ]
        );
        assert_eq!(entry.response_state, ResponseState::Scheduled { due: 5400 });
    }

    #[test]
    fn duplicate_ingest_returns_original_ack_only() {
        let mut s = ServerNode::new(ExpertStubConfig::default(), 7);
        let (env, event) = query_env("F1", 1, true);
        let (first_ack, _) = s.ingest_query(&env, &event, 3600).unwrap();
        let (dup_ack, outcome) = s.ingest_query(&env, &event, 50_000).unwrap();
        assert!(outcome.duplicate);
        assert_eq!(outcome.response_due, None, "no second expert pass");
        assert_eq!(dup_ack, first_ack, "byte-identical ack, original sent_at");
        assert_eq!(s.ledger_len(), 1);
    }

    #[test]
    fn non_queries_are_rejected_at_ingest() {
        let mut s = ServerNode::new(ExpertStubConfig::default(), 7);
        let (mut env, event) = query_env("F1", 1, false);
        env.kind = EnvelopeKind::Ack;
        assert_eq!(
            s.ingest_query(&env, &event, 100),
            Err(IngestError::NotAQuery(EnvelopeKind::Ack))
        );
        let (mut env, event) = query_env("F1", 2, false);
        env.channel = Channel::Sms;
        assert!(matches!(
            s.ingest_query(&env, &event, 100),
            Err(IngestError::MalformedQuery(EnvelopeError::QueryOverSms))
        ));
    }

    #[test]
    fn uniform_expert_latency_is_deterministic_and_bounded() {
        let s = ServerNode::new(ExpertStubConfig::Uniform { min: 600, max: 1200 }, 42);
        let a = s.expert_latency(&UserId::new("F1"), EventId(1));
        let b = s.expert_latency(&UserId::new("F1"), EventId(1));
        assert_eq!(a, b);
        let mut distinct = std::collections::BTreeSet::new();
        for eid in 0..50 {
            let lat = s.expert_latency(&UserId::new("F1"), EventId(eid));
            assert!((600..=1200).contains(&lat));
            distinct.insert(lat);
        }
        assert!(distinct.len() > 1, "latencies vary across events");
    }

    #[test]
    fn relay_map_grows_monotonically() {
        let mut s = ServerNode::new(ExpertStubConfig::default(), 7);
        let pair = (UserId::new("F1"), DeviceId::new("F1"));
        let newly = s.update_relay_map(&RelayId::new("R1"), vec![pair.clone()]);
        assert_eq!(newly, vec![pair.clone()]);
        // Same relay, same pair: nothing new.
        assert!(s.update_relay_map(&RelayId::new("R1"), vec![pair.clone()]).is_empty());
        // Second relay reporting the same farmer is new information.
        let newly = s.update_relay_map(&RelayId::new("R2"), vec![pair.clone()]);
        assert_eq!(newly, vec![pair.clone()]);
        assert_eq!(
            s.relays_for(&pair.0, &pair.1),
            vec![RelayId::new("R1"), RelayId::new("R2")]
        );
    }

    fn response_env(uid: &str) -> Envelope {
        Envelope {
            kind: EnvelopeKind::Response,
            eid: Some(EventId(1)),
            uid: UserId::new(uid),
            target_device: DeviceId::new(uid),
            sent_at: 0,
            hops: vec![NodeId::Server],
            channel: Channel::CellularData,
            body: Some("advice".into()),
        }
    }

    #[test]
    fn routing_prefers_sms_then_data_then_relays_then_parks() {
        let mut s = ServerNode::new(ExpertStubConfig::default(), 7);
        match s.route_downstream(response_env("F1"), true, true, 100) {
            RouteDecision::Direct { env } => {
                assert_eq!(env.channel, Channel::Sms);
                assert_eq!(env.sent_at, 100);
            }
            other => panic!("expected sms-direct, got {other:?}"),
        }
        match s.route_downstream(response_env("F1"), false, true, 100) {
            RouteDecision::Direct { env } => assert_eq!(env.channel, Channel::CellularData),
            other => panic!("expected data-direct, got {other:?}"),
        }
        // Unreachable and unmapped: parked.
        assert_eq!(s.route_downstream(response_env("F1"), false, false, 100), RouteDecision::Parked);
        assert_eq!(s.parked_count(), 1);
        // Once mapped, each carrying relay gets its own copy.
        s.update_relay_map(&RelayId::new("R1"), vec![(UserId::new("F1"), DeviceId::new("F1"))]);
        s.update_relay_map(&RelayId::new("R2"), vec![(UserId::new("F1"), DeviceId::new("F1"))]);
        for env in s.take_parked() {
            assert_eq!(
                s.route_downstream(env, false, false, 200),
                RouteDecision::ViaRelay(vec![RelayId::new("R1"), RelayId::new("R2")])
            );
        }
        assert_eq!(s.parked_count(), 0);
        assert_eq!(s.relay_queue_len(&RelayId::new("R1")), 1);
        assert_eq!(s.relay_queue_len(&RelayId::new("R2")), 1);
        assert_eq!(s.drain_relay_queue(&RelayId::new("R1")).len(), 1);
        assert_eq!(s.relay_queue_len(&RelayId::new("R1")), 0);
    }

    #[test]
    fn alerts_fan_out_one_envelope_per_user() {
        let mut s = ServerNode::new(ExpertStubConfig::default(), 7);
        let (env, event) = query_env("F2", 1, false);
        s.ingest_query(&env, &event, 10).unwrap();
        s.update_relay_map(&RelayId::new("R1"), vec![(UserId::new("F1"), DeviceId::new("F1"))]);
        let all = s.send_alert(&AlertTarget::AllFarmers, "spray window tomorrow", 500);
        let uids: Vec<&str> = all.iter().map(|e| e.uid.0.as_str()).collect();
        assert_eq!(uids, vec!["F1", "F2"], "every known farmer, in user order");
        assert!(all.iter().all(|e| e.kind == EnvelopeKind::Alert && e.eid.is_none()));
        assert_eq!(all[0].body.as_deref(), Some("spray window tomorrow"));

        let some = s.send_alert(&AlertTarget::Users(vec![UserId::new("F9")]), "x", 500);
        assert_eq!(some.len(), 1);
        assert_eq!(some[0].target_device, DeviceId::new("F9"), "unknown users default device");
    }
}
