//! Mobile relay node: hotspot admission, farmer registration, and the
//! carry store that shuttles queries up and acks/responses back down.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::protocol::{
    Channel, DeviceId, Envelope, EventId, NodeId, QueryEvent, RelayId, Timestamp, UserId,
};
use crate::server::ServerNode;
use crate::util::{hash_str, splitmix64};

/// Credential issued at registration; one per (relay, user, device), stable
/// across re-registrations so a reconnecting farmer gets the same token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthToken {
    pub relay: RelayId,
    pub uid: UserId,
    pub device: DeviceId,
    pub secret: u64,
}

impl AuthToken {
    fn mint(relay: &RelayId, uid: &UserId, device: &DeviceId) -> Self {
        let secret =
            splitmix64(hash_str(&relay.0) ^ hash_str(&uid.0).rotate_left(17) ^ hash_str(&device.0));
        AuthToken { relay: relay.clone(), uid: uid.clone(), device: device.clone(), secret }
    }
}

/// Proof a query was taken into the carry store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Receipt {
    pub uid: UserId,
    pub eid: EventId,
    pub received_at: Timestamp,
}

/// Upstream half of the carry store: queries awaiting (or past) upload.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamEntry {
    pub event: QueryEvent,
    pub from_device: DeviceId,
    pub received_at: Timestamp,
    pub uploaded: bool,
}

/// Downstream half: server envelopes held for registered farmers.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamEntry {
    pub env: Envelope,
    pub fetched_at: Timestamp,
    pub delivered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hotspot {
    pub capacity: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OpenError {
    #[error("hotspot already open")]
    AlreadyOpen,
    #[error("hotspot capacity must be at least 1")]
    ZeroCapacity,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegisterError {
    #[error("farmer device {0} is not in contact")]
    NoContact(DeviceId),
    #[error("credentials rejected for {0}")]
    BadCredentials(UserId),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AcceptError {
    #[error("token not recognized by this relay")]
    InvalidToken,
    #[error("hotspot closed or out of session capacity")]
    RelayFull,
}

/// Result of one upload during a sync.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UploadOutcome {
    pub uid: UserId,
    pub eid: EventId,
    pub duplicate: bool,
    /// Set when the ingest was fresh: when the expert response will be ready.
    pub response_due: Option<Timestamp>,
}

/// What one sync attempt did (or deferred).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SyncReport {
    pub uploads: Vec<UploadOutcome>,
    pub fetched: usize,
    /// Entries left unsent because the server link was down.
    pub deferred: usize,
    /// Registrations the server had not seen from this relay before.
    pub newly_mapped: Vec<(UserId, DeviceId)>,
}

#[derive(Debug, Clone)]
pub struct RelayNode {
    pub id: RelayId,
    pub hotspot: Option<Hotspot>,
    pub active_sessions: u32,
    registrations: BTreeMap<(UserId, DeviceId), AuthToken>,
    pub upstream: Vec<UpstreamEntry>,
    pub downstream: Vec<DownstreamEntry>,
    /// Engine coalescing slots.
    pub sync_queued_at: Option<Timestamp>,
    pub deliver_queued_at: Option<Timestamp>,
}

impl RelayNode {
    pub fn new(id: RelayId) -> Self {
        RelayNode {
            id,
            hotspot: None,
            active_sessions: 0,
            registrations: BTreeMap::new(),
            upstream: Vec::new(),
            downstream: Vec::new(),
            sync_queued_at: None,
            deliver_queued_at: None,
        }
    }

    pub fn node_id(&self) -> NodeId {
        NodeId::Relay(self.id.clone())
    }

    pub fn open_hotspot(&mut self, capacity: u32) -> Result<(), OpenError> {
        if self.hotspot.is_some() {
            return Err(OpenError::AlreadyOpen);
        }
        if capacity == 0 {
            return Err(OpenError::ZeroCapacity);
        }
        self.hotspot = Some(Hotspot { capacity });
        Ok(())
    }

    /// Issue (or re-issue) the token for a farmer in contact. Credentials are
    /// the opaque secret the user proves ownership of their number with;
    /// here that is modeled as the number itself.
    pub fn register_farmer(
        &mut self,
        uid: &UserId,
        device: &DeviceId,
        credentials: &str,
        in_contact: bool,
        _now: Timestamp,
    ) -> Result<AuthToken, RegisterError> {
        if !in_contact {
            return Err(RegisterError::NoContact(device.clone()));
        }
        if credentials != uid.0 {
            return Err(RegisterError::BadCredentials(uid.clone()));
        }
        let token = self
            .registrations
            .entry((uid.clone(), device.clone()))
            .or_insert_with(|| AuthToken::mint(&self.id, uid, device));
        Ok(token.clone())
    }

    pub fn is_registered(&self, uid: &UserId, device: &DeviceId) -> bool {
        self.registrations.contains_key(&(uid.clone(), device.clone()))
    }

    pub fn registration_pairs(&self) -> Vec<(UserId, DeviceId)> {
        self.registrations.keys().cloned().collect()
    }

    /// Take one query into the carry store. Idempotent per (uid, eid): a
    /// retransmitted duplicate gets the original receipt and changes nothing.
    pub fn accept_query(
        &mut self,
        token: &AuthToken,
        event: QueryEvent,
        from_device: &DeviceId,
        now: Timestamp,
    ) -> Result<Receipt, AcceptError> {
        let Some(hotspot) = self.hotspot else {
            return Err(AcceptError::RelayFull);
        };
        if self.active_sessions > hotspot.capacity {
            return Err(AcceptError::RelayFull);
        }
        let expected = self.registrations.get(&(event.uid.clone(), from_device.clone()));
        if expected != Some(token) {
            return Err(AcceptError::InvalidToken);
        }
        if let Some(existing) =
            self.upstream.iter().find(|e| e.event.uid == event.uid && e.event.eid == event.eid)
        {
            return Ok(Receipt {
                uid: existing.event.uid.clone(),
                eid: existing.event.eid,
                received_at: existing.received_at,
            });
        }
        let receipt = Receipt { uid: event.uid.clone(), eid: event.eid, received_at: now };
        self.upstream.push(UpstreamEntry {
            event,
            from_device: from_device.clone(),
            received_at: now,
            uploaded: false,
        });
        Ok(receipt)
    }

    /// Count a hand-off session against hotspot capacity.
    pub fn begin_session(&mut self) {
        self.active_sessions += 1;
    }

    pub fn end_session(&mut self) {
        self.active_sessions = self.active_sessions.saturating_sub(1);
    }

    /// One sync pass against the server. With no link everything defers;
    /// with a link this reports registrations, uploads pending queries in
    /// arrival order, banks the returned acks, and fetches whatever the
    /// server queued for this relay's farmers.
    pub fn sync_with_server(
        &mut self,
        server: &mut ServerNode,
        link_available: bool,
        now: Timestamp,
    ) -> SyncReport {
        let mut report = SyncReport::default();
        if !link_available {
            report.deferred = self.upstream.iter().filter(|e| !e.uploaded).count();
            return report;
        }

        report.newly_mapped = server.update_relay_map(&self.id, self.registration_pairs());

        let mut order: Vec<usize> = (0..self.upstream.len())
            .filter(|i| !self.upstream[*i].uploaded)
            .collect();
        order.sort_by_key(|i| {
            let e = &self.upstream[*i];
            (e.received_at, e.event.uid.clone(), e.event.eid)
        });
        for i in order {
            let entry = &mut self.upstream[i];
            let env = Envelope {
                kind: crate::protocol::EnvelopeKind::Query,
                eid: Some(entry.event.eid),
                uid: entry.event.uid.clone(),
                target_device: entry.event.logical_device.clone(),
                sent_at: now,
                hops: vec![NodeId::Farmer(entry.from_device.clone()), NodeId::Relay(self.id.clone())],
                channel: Channel::CellularData,
                body: None,
            };
            let (mut ack, outcome) =
                server.ingest_query(&env, &entry.event, now).expect("relay-built query is valid");
            entry.uploaded = true;
            ack.hops.push(NodeId::Relay(self.id.clone()));
            self.downstream.push(DownstreamEntry { env: ack, fetched_at: now, delivered: false });
            report.uploads.push(UploadOutcome {
                uid: entry.event.uid.clone(),
                eid: entry.event.eid,
                duplicate: outcome.duplicate,
                response_due: outcome.response_due,
            });
        }

        for mut env in server.drain_relay_queue(&self.id) {
            env.hops.push(NodeId::Relay(self.id.clone()));
            self.downstream.push(DownstreamEntry { env, fetched_at: now, delivered: false });
            report.fetched += 1;
        }
        report
    }

    /// Hand out carried envelopes whose target device is in contact now.
    /// Everything else stays banked for a later window. The final leg is the
    /// short-range link, so delivered copies carry the D2D channel.
    pub fn deliver_downstream(
        &mut self,
        contact_devices: &BTreeSet<DeviceId>,
        _now: Timestamp,
    ) -> Vec<Envelope> {
        let mut out = Vec::new();
        for entry in &mut self.downstream {
            if !entry.delivered && contact_devices.contains(&entry.env.target_device) {
                entry.delivered = true;
                let mut env = entry.env.clone();
                env.channel = Channel::D2D;
                out.push(env);
            }
        }
        out
    }

    pub fn pending_upload_count(&self) -> usize {
        self.upstream.iter().filter(|e| !e.uploaded).count()
    }

    pub fn undelivered_downstream_count(&self) -> usize {
        self.downstream.iter().filter(|e| !e.delivered).count()
    }
}
