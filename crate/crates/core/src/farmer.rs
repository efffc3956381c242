//! Farmer-side node: query creation, access scanning, hand-off, and the
//! per-user mailboxes on a (possibly shared) handset.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::network::{transfer_time, Admission, SignalLevel};
use crate::protocol::{
    next_state, validate_envelope, Channel, DeviceId, DurationSecs, Envelope, EnvelopeError,
    EnvelopeKind, EventId, EventState, FarmerEventRecord, LifecycleInput, NodeId,
    PayloadDescriptor, ProtocolAction, QueryEvent, RelayId, TimerConfig, Timestamp, UserId,
};
use crate::relay::AuthToken;

/// Outcome of one access scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessDecision {
    /// Good signal: upload over cellular data right now (preferred even when
    /// relays are in range).
    DirectNow,
    /// Poor signal and nothing better: poll again later.
    WaitAndRescan { next_scan: Timestamp },
    /// Hand the query to this relay (lowest id wins on ties).
    HandoffToRelay { relay: RelayId },
    /// No signal, no relay in range: hold the query.
    NoPath,
}

/// Pick an access path from what the scan saw. Relay contact beats waiting;
/// a usable cellular link beats both.
pub fn scan_and_select(
    now: Timestamp,
    signal: SignalLevel,
    contacts: &BTreeSet<RelayId>,
    cfg: &TimerConfig,
) -> AccessDecision {
    if signal == SignalLevel::Good {
        return AccessDecision::DirectNow;
    }
    if let Some(relay) = contacts.iter().next() {
        return AccessDecision::HandoffToRelay { relay: relay.clone() };
    }
    if signal == SignalLevel::Poor {
        return AccessDecision::WaitAndRescan { next_scan: now + cfg.scan_period };
    }
    AccessDecision::NoPath
}

/// Relay choice for one specific record: prefer somebody other than the
/// relay of the failed attempt when an alternative is in contact.
pub fn eligible_relay(record: &FarmerEventRecord, contacts: &BTreeSet<RelayId>) -> Option<RelayId> {
    if let Some(last) = &record.last_relay {
        if contacts.len() >= 2 {
            if let Some(other) = contacts.iter().find(|r| *r != last) {
                return Some(other.clone());
            }
        }
    }
    contacts.iter().next().cloned()
}

/// One delivered response waiting in a user's mailbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MailboxEntry {
    pub eid: EventId,
    pub body: String,
    pub delivered_at: Timestamp,
    pub read: bool,
}

/// Broadcast/unicast advisory without a query attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlertEntry {
    pub body: String,
    pub delivered_at: Timestamp,
    pub read: bool,
}

/// Per-user inbox; responses are keyed by event id, alerts kept separately
/// since they have none.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mailbox {
    pub entries: Vec<MailboxEntry>,
    pub alerts: Vec<AlertEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoginSession {
    pub uid: UserId,
    pub device: DeviceId,
    pub started_at: Timestamp,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoginError {
    #[error("device {0} already has an active session")]
    DeviceBusy(DeviceId),
    #[error("user {0} is not a resident of this device")]
    NotResident(UserId),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CreateError {
    #[error("no active session on this device")]
    NoActiveSession,
    #[error("query payload is empty")]
    EmptyPayload,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransmitError {
    #[error("direct transmission needs a good signal (saw {0})")]
    BadSignal(SignalLevel),
    #[error("no record for ({0}, {1})")]
    UnknownRecord(UserId, EventId),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HandoffError {
    #[error("relay {0} is not in contact")]
    NoContact(RelayId),
    #[error("not registered with relay {0}")]
    NotRegistered(RelayId),
    #[error("relay {0} refused the session: hotspot full")]
    RelayFull(RelayId),
    #[error("no record for ({0}, {1})")]
    UnknownRecord(UserId, EventId),
}

/// The short-range transfer produced by a hand-off; the session occupies a
/// hotspot slot for `duration` seconds starting at `started_at`.
#[derive(Debug, Clone, PartialEq)]
pub struct D2DTransfer {
    pub event: QueryEvent,
    pub from_device: DeviceId,
    pub relay: RelayId,
    pub started_at: Timestamp,
    pub duration: DurationSecs,
}

/// What handling one downstream envelope did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DownstreamOutcome {
    AckAccepted { uid: UserId, eid: EventId },
    /// Ack for an unknown record or one no longer in `Sent`; dropped.
    AckIgnored,
    ResponseAccepted { uid: UserId, eid: EventId },
    /// Response the state machine would not take (late, duplicate, or
    /// unknown); dropped and reported.
    LateResponse { uid: UserId, eid: Option<EventId> },
    AlertDelivered { uid: UserId },
    /// Alert for a user who does not live on this device.
    AlertIgnored,
    /// Defensive: upstream kinds never terminate at a farmer node.
    NotForFarmer,
}

/// A farmer handset plus everything resident on it.
#[derive(Debug, Clone)]
pub struct FarmerNode {
    pub device: DeviceId,
    pub owner: UserId,
    pub residents: BTreeSet<UserId>,
    pub records: BTreeMap<(UserId, EventId), FarmerEventRecord>,
    pub mailboxes: BTreeMap<UserId, Mailbox>,
    session: Option<LoginSession>,
    eid_counters: BTreeMap<UserId, u64>,
    tokens: BTreeMap<RelayId, AuthToken>,
    /// Engine scheduling slot: earliest pending scan, if any.
    pub next_scan_due: Option<Timestamp>,
    /// Engine coalescing slot: a scan action already queued for this instant.
    pub scan_queued_at: Option<Timestamp>,
}

impl FarmerNode {
    pub fn new(device: DeviceId, owner: UserId) -> Self {
        let mut residents = BTreeSet::new();
        residents.insert(owner.clone());
        let mut mailboxes = BTreeMap::new();
        mailboxes.insert(owner.clone(), Mailbox::default());
        FarmerNode {
            device,
            owner,
            residents,
            records: BTreeMap::new(),
            mailboxes,
            session: None,
            eid_counters: BTreeMap::new(),
            tokens: BTreeMap::new(),
            next_scan_due: None,
            scan_queued_at: None,
        }
    }

    /// Register another user (a basic-phone neighbour) as resident here.
    pub fn add_resident(&mut self, uid: UserId) {
        self.mailboxes.entry(uid.clone()).or_default();
        self.residents.insert(uid);
    }

    pub fn node_id(&self) -> NodeId {
        NodeId::Farmer(self.device.clone())
    }

    pub fn session(&self) -> Option<&LoginSession> {
        self.session.as_ref()
    }

    // -- sessions ----------------------------------------------------------

    /// One session per device at a time; a second login must wait.
    pub fn login(&mut self, uid: UserId, now: Timestamp) -> Result<LoginSession, LoginError> {
        if let Some(s) = &self.session {
            return Err(LoginError::DeviceBusy(s.device.clone()));
        }
        if !self.residents.contains(&uid) {
            return Err(LoginError::NotResident(uid));
        }
        let s = LoginSession { uid, device: self.device.clone(), started_at: now };
        self.session = Some(s.clone());
        Ok(s)
    }

    pub fn logout(&mut self) {
        self.session = None;
    }

    // -- query creation ----------------------------------------------------

    /// Create a query for the logged-in user; event ids count up from 1 per
    /// user, so two residents of one handset keep separate sequences.
    pub fn create_event(
        &mut self,
        payload: PayloadDescriptor,
        now: Timestamp,
        cfg: &TimerConfig,
    ) -> Result<(UserId, EventId), CreateError> {
        let session = self.session.as_ref().ok_or(CreateError::NoActiveSession)?;
        if payload.total_bytes() == 0 {
            return Err(CreateError::EmptyPayload);
        }
        let uid = session.uid.clone();
        let counter = self.eid_counters.entry(uid.clone()).or_insert(0);
        *counter += 1;
        let eid = EventId(*counter);
        let event = QueryEvent {
            eid,
            uid: uid.clone(),
            logical_device: self.device.clone(),
            created_at: now,
            payload,
        };
        self.records.insert((uid.clone(), eid), FarmerEventRecord::new(event, cfg));
        Ok((uid, eid))
    }

    /// Keys of records still waiting for an access path, in id order.
    pub fn stored_local(&self) -> Vec<(UserId, EventId)> {
        self.records
            .iter()
            .filter(|(_, r)| r.state == EventState::StoredLocal)
            .map(|(k, _)| k.clone())
            .collect()
    }

    // -- transmissions -----------------------------------------------------

    /// Direct cellular upload. Returns `Ok(None)` when the record's response
    /// deadline already passed: the deadline check runs first and the record
    /// discards instead of transmitting.
    pub fn transmit_direct(
        &mut self,
        key: &(UserId, EventId),
        signal: SignalLevel,
        now: Timestamp,
        cfg: &TimerConfig,
    ) -> Result<Option<Envelope>, TransmitError> {
        if signal != SignalLevel::Good {
            return Err(TransmitError::BadSignal(signal));
        }
        let record = self
            .records
            .get(key)
            .ok_or_else(|| TransmitError::UnknownRecord(key.0.clone(), key.1))?;
        if now >= record.response_deadline {
            let (next, _) =
                next_state(record, &LifecycleInput::ClockTick, now, cfg).expect("clock monotone");
            self.records.insert(key.clone(), next);
            return Ok(None);
        }
        let input = LifecycleInput::TransmitAttempt { via: Channel::CellularData, relay: None };
        let (next, _) = next_state(record, &input, now, cfg).expect("clock monotone");
        let env = Envelope {
            kind: EnvelopeKind::Query,
            eid: Some(key.1),
            uid: key.0.clone(),
            target_device: next.event.logical_device.clone(),
            sent_at: now,
            hops: vec![self.node_id()],
            channel: Channel::CellularData,
            body: None,
        };
        self.records.insert(key.clone(), next);
        Ok(Some(env))
    }

    /// Hand a stored query to a relay in contact. The record goes to `Sent`
    /// at the hand-off instant (the ack clock starts now, not when the
    /// short-range transfer drains).
    #[allow(clippy::too_many_arguments)]
    pub fn handoff_to_relay(
        &mut self,
        key: &(UserId, EventId),
        relay: &RelayId,
        in_contact: bool,
        admission: Admission,
        d2d_rate: u64,
        now: Timestamp,
        cfg: &TimerConfig,
    ) -> Result<D2DTransfer, HandoffError> {
        if !in_contact {
            return Err(HandoffError::NoContact(relay.clone()));
        }
        if !self.tokens.contains_key(relay) {
            return Err(HandoffError::NotRegistered(relay.clone()));
        }
        if admission == Admission::Full {
            return Err(HandoffError::RelayFull(relay.clone()));
        }
        let record = self
            .records
            .get(key)
            .ok_or_else(|| HandoffError::UnknownRecord(key.0.clone(), key.1))?;
        let input = LifecycleInput::TransmitAttempt {
            via: Channel::D2D,
            relay: Some(relay.clone()),
        };
        let (next, _) = next_state(record, &input, now, cfg).expect("clock monotone");
        let transfer = D2DTransfer {
            event: next.event.clone(),
            from_device: self.device.clone(),
            relay: relay.clone(),
            started_at: now,
            duration: transfer_time(next.event.payload.total_bytes(), d2d_rate),
        };
        self.records.insert(key.clone(), next);
        Ok(transfer)
    }

    pub fn store_token(&mut self, relay: RelayId, token: AuthToken) {
        self.tokens.insert(relay, token);
    }

    pub fn token_for(&self, relay: &RelayId) -> Option<&AuthToken> {
        self.tokens.get(relay)
    }

    // -- downstream --------------------------------------------------------

    /// Take one ack/response/alert arriving at this handset.
    pub fn handle_downstream(
        &mut self,
        env: &Envelope,
        now: Timestamp,
        cfg: &TimerConfig,
    ) -> Result<DownstreamOutcome, EnvelopeError> {
        validate_envelope(env)?;
        match env.kind {
            EnvelopeKind::Ack => {
                let eid = env.eid.expect("validated");
                let key = (env.uid.clone(), eid);
                let Some(record) = self.records.get(&key) else {
                    return Ok(DownstreamOutcome::AckIgnored);
                };
                let (next, actions) =
                    next_state(record, &LifecycleInput::AckReceived, now, cfg)
                        .expect("clock monotone");
                let accepted = actions.contains(&ProtocolAction::DeletePayload);
                self.records.insert(key.clone(), next);
                if accepted {
                    Ok(DownstreamOutcome::AckAccepted { uid: key.0, eid })
                } else {
                    Ok(DownstreamOutcome::AckIgnored)
                }
            }
            EnvelopeKind::Response => {
                let eid = env.eid.expect("validated");
                let key = (env.uid.clone(), eid);
                let Some(record) = self.records.get(&key) else {
                    return Ok(DownstreamOutcome::LateResponse {
                        uid: env.uid.clone(),
                        eid: Some(eid),
                    });
                };
                let (next, actions) =
                    next_state(record, &LifecycleInput::ResponseReceived, now, cfg)
                        .expect("clock monotone");
                let accepted = actions.contains(&ProtocolAction::DeliverResponseToMailbox);
                self.records.insert(key.clone(), next);
                if accepted {
                    let mailbox = self.mailboxes.entry(env.uid.clone()).or_default();
                    if !mailbox.entries.iter().any(|e| e.eid == eid) {
                        mailbox.entries.push(MailboxEntry {
                            eid,
                            body: env.body.clone().unwrap_or_default(),
                            delivered_at: now,
                            read: false,
                        });
                    }
                    Ok(DownstreamOutcome::ResponseAccepted { uid: key.0, eid })
                } else {
                    Ok(DownstreamOutcome::LateResponse { uid: key.0, eid: Some(eid) })
                }
            }
            EnvelopeKind::Alert => {
                if !self.residents.contains(&env.uid) {
                    return Ok(DownstreamOutcome::AlertIgnored);
                }
                let mailbox = self.mailboxes.entry(env.uid.clone()).or_default();
                mailbox.alerts.push(AlertEntry {
                    body: env.body.clone().unwrap_or_default(),
                    delivered_at: now,
                    read: false,
                });
                Ok(DownstreamOutcome::AlertDelivered { uid: env.uid.clone() })
            }
            EnvelopeKind::Query => Ok(DownstreamOutcome::NotForFarmer),
        }
    }

    // -- timers ------------------------------------------------------------

    /// Deadline sweep over every live record; returns what each one did.
    pub fn on_timer(
        &mut self,
        now: Timestamp,
        cfg: &TimerConfig,
    ) -> Vec<((UserId, EventId), Vec<ProtocolAction>)> {
        let keys: Vec<_> = self
            .records
            .iter()
            .filter(|(_, r)| !r.state.is_terminal())
            .map(|(k, _)| k.clone())
            .collect();
        let mut out = Vec::new();
        for key in keys {
            let actions = self.tick_record(&key, now, cfg);
            if !actions.is_empty() {
                out.push((key, actions));
            }
        }
        out
    }

    /// Apply a clock tick to a single record (no-op when terminal/unknown).
    pub fn tick_record(
        &mut self,
        key: &(UserId, EventId),
        now: Timestamp,
        cfg: &TimerConfig,
    ) -> Vec<ProtocolAction> {
        let Some(record) = self.records.get(key) else {
            return Vec::new();
        };
        if record.state.is_terminal() {
            return Vec::new();
        }
        let (next, actions) =
            next_state(record, &LifecycleInput::ClockTick, now, cfg).expect("clock monotone");
        self.records.insert(key.clone(), next);
        actions
    }

    // -- mailbox -----------------------------------------------------------

    /// Read the logged-in user's mailbox, marking everything read. Only the
    /// session owner's entries are visible; refetching shows `read=true`.
    pub fn fetch_mailbox(&mut self, session: &LoginSession) -> Vec<MailboxEntry> {
        let Some(mailbox) = self.mailboxes.get_mut(&session.uid) else {
            return Vec::new();
        };
        let snapshot = mailbox.entries.clone();
        for e in &mut mailbox.entries {
            e.read = true;
        }
        for a in &mut mailbox.alerts {
            a.read = true;
        }
        snapshot
    }
}
