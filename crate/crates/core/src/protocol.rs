//! Wire-level types and the per-query lifecycle state machine.
//!
//! Everything here is a plain value; [`next_state`] is a pure transition
//! function so the same logic drives unit tests, property tests, and the
//! simulator without divergence.

use std::fmt;

use thiserror::Error;

/// Simulation clock value, integer seconds.
pub type Timestamp = u64;
/// Span between two [`Timestamp`]s, seconds.
pub type DurationSecs = u64;

// ---------------------------------------------------------------------------
// identifiers
// ---------------------------------------------------------------------------

/// A farmer's own phone number: the stable *logical* identity queries and
/// responses are keyed by, independent of which handset is in use.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub String);

/// Phone number of the handset actually used. Differs from [`UserId`] only
/// when a basic-phone user is logged in on someone else's smartphone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(pub String);

/// Identity of a mobile relay node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelayId(pub String);

/// Per-user query sequence number; unique within one [`UserId`], assigned
/// from a monotone counter starting at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

impl UserId {
    pub fn new(s: impl Into<String>) -> Self {
        UserId(s.into())
    }
}

impl DeviceId {
    pub fn new(s: impl Into<String>) -> Self {
        DeviceId(s.into())
    }
}

impl RelayId {
    pub fn new(s: impl Into<String>) -> Self {
        RelayId(s.into())
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for RelayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Any node an envelope can traverse.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    /// A farmer handset, named by its device id.
    Farmer(DeviceId),
    Relay(RelayId),
    /// The central server (singleton).
    Server,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Farmer(d) => f.write_str(&d.0),
            NodeId::Relay(r) => f.write_str(&r.0),
            NodeId::Server => f.write_str("server"),
        }
    }
}

// ---------------------------------------------------------------------------
// query payloads and envelopes
// ---------------------------------------------------------------------------

/// What a query carries: media sizes plus light metadata. Sizes drive
/// transfer times; a query with zero total bytes is invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct PayloadDescriptor {
    pub photo_bytes: u64,
    pub voice_bytes: u64,
    pub labels: Vec<String>,
    pub geotag: (f64, f64),
}

impl PayloadDescriptor {
    pub fn total_bytes(&self) -> u64 {
        self.photo_bytes + self.voice_bytes
    }
}

/// One advisory query as created on a farmer device.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEvent {
    pub eid: EventId,
    pub uid: UserId,
    /// Device the reply should land on (where the user was logged in).
    pub logical_device: DeviceId,
    pub created_at: Timestamp,
    pub payload: PayloadDescriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EnvelopeKind {
    Query,
    Ack,
    Response,
    Alert,
}

impl fmt::Display for EnvelopeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EnvelopeKind::Query => "query",
            EnvelopeKind::Ack => "ack",
            EnvelopeKind::Response => "response",
            EnvelopeKind::Alert => "alert",
        };
        f.write_str(s)
    }
}

/// Transport a leg of an envelope's journey uses. SMS is reserved for the
/// small downstream messages; a query's media can never ride it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Channel {
    CellularData,
    D2D,
    Sms,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Channel::CellularData => "data",
            Channel::D2D => "d2d",
            Channel::Sms => "sms",
        };
        f.write_str(s)
    }
}

/// A message in flight between nodes.
///
/// `hops` is append-only and starts at the originating node; every node an
/// envelope passes through adds itself, so the final list is the full path.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub kind: EnvelopeKind,
    /// Present for Query/Ack/Response; alerts are not tied to a query.
    pub eid: Option<EventId>,
    pub uid: UserId,
    pub target_device: DeviceId,
    pub sent_at: Timestamp,
    pub hops: Vec<NodeId>,
    pub channel: Channel,
    /// Response/alert text, if any.
    pub body: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("query envelopes cannot use the sms channel")]
    QueryOverSms,
    #[error("{0} envelope is missing its event id")]
    MissingEidOnAck(EnvelopeKind),
    #[error("envelope has an empty hop list")]
    EmptyHops,
}

/// Structural envelope checks shared by every receive path.
pub fn validate_envelope(env: &Envelope) -> Result<(), EnvelopeError> {
    if env.kind == EnvelopeKind::Query && env.channel == Channel::Sms {
        return Err(EnvelopeError::QueryOverSms);
    }
    if matches!(env.kind, EnvelopeKind::Query | EnvelopeKind::Ack | EnvelopeKind::Response)
        && env.eid.is_none()
    {
        return Err(EnvelopeError::MissingEidOnAck(env.kind));
    }
    if env.hops.is_empty() {
        return Err(EnvelopeError::EmptyHops);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// timers
// ---------------------------------------------------------------------------

/// Protocol timing knobs shared by every node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimerConfig {
    /// Response deadline: a query not answered within `t_r` of creation is
    /// discarded locally.
    pub t_r: DurationSecs,
    /// Ack deadline per transmission attempt; restarts on every attempt.
    /// Much smaller than `t_r`.
    pub t_d: DurationSecs,
    /// Period of the farmer's access-scanning loop.
    pub scan_period: DurationSecs,
    /// Cap on timeout-driven retransmissions; `None` = retry until `t_r`.
    pub max_retries: Option<u32>,
}

impl Default for TimerConfig {
    fn default() -> Self {
        TimerConfig { t_r: 86_400, t_d: 3_600, scan_period: 600, max_retries: None }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TimerConfigError {
    #[error("t_d ({t_d}) must be strictly less than t_r ({t_r})")]
    DeadlineOrder { t_d: DurationSecs, t_r: DurationSecs },
    #[error("scan_period must be positive")]
    ZeroScanPeriod,
}

impl TimerConfig {
    pub fn validate(&self) -> Result<(), TimerConfigError> {
        if self.t_d >= self.t_r {
            return Err(TimerConfigError::DeadlineOrder { t_d: self.t_d, t_r: self.t_r });
        }
        if self.scan_period == 0 {
            return Err(TimerConfigError::ZeroScanPeriod);
        }
        Ok(())
    }
}

/// Both deadlines for a record: the ack deadline restarts from each
/// transmission, the response deadline is anchored at creation forever.
pub fn compute_deadlines(
    event: &QueryEvent,
    send_time: Timestamp,
    cfg: &TimerConfig,
) -> (Timestamp, Timestamp) {
    (send_time + cfg.t_d, event.created_at + cfg.t_r)
}

// ---------------------------------------------------------------------------
// lifecycle state machine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventState {
    /// Held on the device, waiting for an access path.
    StoredLocal,
    /// Transmitted (direct or to a relay), ack pending.
    Sent,
    /// Server ack seen; payload freed, awaiting the expert response.
    Acked,
    /// Response delivered to the owner's mailbox. Terminal.
    Completed,
    /// Response deadline passed without an answer. Terminal.
    Discarded,
}

impl EventState {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventState::Completed | EventState::Discarded)
    }
}

impl fmt::Display for EventState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventState::StoredLocal => "stored_local",
            EventState::Sent => "sent",
            EventState::Acked => "acked",
            EventState::Completed => "completed",
            EventState::Discarded => "discarded",
        };
        f.write_str(s)
    }
}

/// Stimuli a record can see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LifecycleInput {
    /// A transmission starts now over `via`; `relay` set on the hand-off path.
    TransmitAttempt { via: Channel, relay: Option<RelayId> },
    AckReceived,
    ResponseReceived,
    /// The clock reached `now`; deadline checks run.
    ClockTick,
}

/// Side effects a transition asks its host to perform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolAction {
    /// Free the payload bytes; keep the lightweight record.
    DeletePayload,
    /// Re-enter the access scan to retransmit.
    EmitRetransmit,
    EmitDiscard,
    DeliverResponseToMailbox,
}

/// One query's full lifecycle bookkeeping on the farmer device.
#[derive(Debug, Clone, PartialEq)]
pub struct FarmerEventRecord {
    pub event: QueryEvent,
    pub state: EventState,
    /// Present exactly while `state == Sent`.
    pub ack_deadline: Option<Timestamp>,
    /// `created_at + t_r`; never changes after creation.
    pub response_deadline: Timestamp,
    /// Count of timeout-driven returns to `StoredLocal`.
    pub retries: u32,
    /// Relay used by the most recent attempt (`None` after a direct attempt).
    pub last_relay: Option<RelayId>,
    /// Whether the payload bytes are still held on the device.
    pub payload_held: bool,
    /// Guard against the clock running backwards; only real transitions
    /// advance it so ignored inputs leave the record byte-identical.
    pub last_transition_at: Timestamp,
}

impl FarmerEventRecord {
    /// Fresh record for a just-created query.
    pub fn new(event: QueryEvent, cfg: &TimerConfig) -> Self {
        let response_deadline = event.created_at + cfg.t_r;
        let created_at = event.created_at;
        FarmerEventRecord {
            event,
            state: EventState::StoredLocal,
            ack_deadline: None,
            response_deadline,
            retries: 0,
            last_relay: None,
            payload_held: true,
            last_transition_at: created_at,
        }
    }

    pub fn key(&self) -> (UserId, EventId) {
        (self.event.uid.clone(), self.event.eid)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LifecycleError {
    #[error("clock moved backwards: now={now} but record last transitioned at {last}")]
    TimeRegression { now: Timestamp, last: Timestamp },
}

/// Pure lifecycle transition.
///
/// Inputs that do not match the current state are ignored: the record comes
/// back unchanged with no actions. That covers stray acks/responses after a
/// timeout or in a terminal state; hosts count what they care about.
pub fn next_state(
    record: &FarmerEventRecord,
    input: &LifecycleInput,
    now: Timestamp,
    cfg: &TimerConfig,
) -> Result<(FarmerEventRecord, Vec<ProtocolAction>), LifecycleError> {
    if now < record.last_transition_at {
        return Err(LifecycleError::TimeRegression { now, last: record.last_transition_at });
    }
    let ignore = || Ok((record.clone(), Vec::new()));
    if record.state.is_terminal() {
        return ignore();
    }

    match (record.state, input) {
        (EventState::StoredLocal, LifecycleInput::TransmitAttempt { relay, .. }) => {
            let mut r = record.clone();
            r.state = EventState::Sent;
            r.ack_deadline = Some(now + cfg.t_d);
            r.last_relay = relay.clone();
            r.last_transition_at = now;
            Ok((r, Vec::new()))
        }
        (EventState::Sent, LifecycleInput::AckReceived) => {
            let mut r = record.clone();
            r.state = EventState::Acked;
            r.ack_deadline = None;
            r.payload_held = false;
            r.last_transition_at = now;
            Ok((r, vec![ProtocolAction::DeletePayload]))
        }
        (EventState::Sent | EventState::Acked, LifecycleInput::ResponseReceived) => {
            // A response proves the server saw the query, so no prior ack is
            // required to complete.
            let mut r = record.clone();
            r.state = EventState::Completed;
            r.ack_deadline = None;
            r.payload_held = false;
            r.last_transition_at = now;
            Ok((r, vec![ProtocolAction::DeliverResponseToMailbox]))
        }
        (_, LifecycleInput::ClockTick) if now >= record.response_deadline => {
            let mut r = record.clone();
            r.state = EventState::Discarded;
            r.ack_deadline = None;
            r.payload_held = false;
            r.last_transition_at = now;
            Ok((r, vec![ProtocolAction::EmitDiscard]))
        }
        (EventState::Sent, LifecycleInput::ClockTick)
            if record.ack_deadline.is_some_and(|d| now >= d)
                && cfg.max_retries.is_none_or(|cap| record.retries < cap) =>
        {
            let mut r = record.clone();
            r.state = EventState::StoredLocal;
            r.ack_deadline = None;
            r.retries += 1;
            r.last_transition_at = now;
            Ok((r, vec![ProtocolAction::EmitRetransmit]))
        }
        _ => ignore(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload() -> PayloadDescriptor {
        PayloadDescriptor {
            photo_bytes: 200_000,
            voice_bytes: 50_000,
            labels: vec!["pest".into()],
            geotag: (26.7, 88.4),
        }
    }

    fn event(created_at: Timestamp) -> QueryEvent {
        QueryEvent {
            eid: EventId(1),
            uid: UserId::new("F1"),
            logical_device: DeviceId::new("F1"),
            created_at,
            payload: payload(),
        }
    }

    fn cfg() -> TimerConfig {
        TimerConfig::default()
    }

    fn transmit(relay: Option<&str>) -> LifecycleInput {
        match relay {
            Some(r) => LifecycleInput::TransmitAttempt {
                via: Channel::D2D,
                relay: Some(RelayId::new(r)),
            },
            None => LifecycleInput::TransmitAttempt { via: Channel::CellularData, relay: None },
        }
    }

    #[test]
    fn deadlines_from_send_and_creation() {
        let ev = event(0);
        assert_eq!(compute_deadlines(&ev, 1000, &cfg()), (4600, 86_400));
        // A later attempt restarts only the ack deadline.
        assert_eq!(compute_deadlines(&ev, 4600, &cfg()), (8200, 86_400));
        let ev2 = event(500);
        assert_eq!(compute_deadlines(&ev2, 500, &cfg()), (4100, 86_900));
    }

    #[test]
    fn transmit_sets_ack_deadline() {
        let rec = FarmerEventRecord::new(event(0), &cfg());
        let (r, acts) = next_state(&rec, &transmit(Some("R1")), 1000, &cfg()).unwrap();
        assert_eq!(r.state, EventState::Sent);
        assert_eq!(r.ack_deadline, Some(4600));
        assert_eq!(r.response_deadline, 86_400);
        assert_eq!(r.last_relay, Some(RelayId::new("R1")));
        assert!(acts.is_empty());
    }

    #[test]
    fn ack_timeout_returns_to_stored_and_counts_retry() {
        let rec = FarmerEventRecord::new(event(0), &cfg());
        let (sent, _) = next_state(&rec, &transmit(Some("R1")), 1000, &cfg()).unwrap();
        let (r, acts) = next_state(&sent, &LifecycleInput::ClockTick, 4600, &cfg()).unwrap();
        assert_eq!(r.state, EventState::StoredLocal);
        assert_eq!(r.ack_deadline, None);
        assert_eq!(r.retries, 1);
        assert_eq!(acts, vec![ProtocolAction::EmitRetransmit]);
    }

    #[test]
    fn tick_before_deadline_is_a_noop() {
        let rec = FarmerEventRecord::new(event(0), &cfg());
        let (sent, _) = next_state(&rec, &transmit(None), 1000, &cfg()).unwrap();
        let (r, acts) = next_state(&sent, &LifecycleInput::ClockTick, 4599, &cfg()).unwrap();
        assert_eq!(r, sent);
        assert!(acts.is_empty());
    }

    #[test]
    fn response_deadline_discards_from_any_nonterminal_state() {
        let c = cfg();
        for setup in 0..3 {
            let mut rec = FarmerEventRecord::new(event(0), &c);
            if setup >= 1 {
                rec = next_state(&rec, &transmit(Some("R1")), 1000, &c).unwrap().0;
            }
            if setup == 2 {
                rec = next_state(&rec, &LifecycleInput::AckReceived, 2000, &c).unwrap().0;
            }
            let (r, acts) = next_state(&rec, &LifecycleInput::ClockTick, 86_400, &c).unwrap();
            assert_eq!(r.state, EventState::Discarded, "from setup {setup}");
            assert_eq!(acts, vec![ProtocolAction::EmitDiscard]);
        }
    }

    #[test]
    fn discard_wins_over_retransmit_when_both_deadlines_passed() {
        let mut c = cfg();
        c.t_d = 2;
        c.t_r = 5;
        let rec = FarmerEventRecord::new(event(0), &c);
        let (sent, _) = next_state(&rec, &transmit(None), 1, &c).unwrap();
        // now=5: past both ack deadline (3) and response deadline (5).
        let (r, acts) = next_state(&sent, &LifecycleInput::ClockTick, 5, &c).unwrap();
        assert_eq!(r.state, EventState::Discarded);
        assert_eq!(acts, vec![ProtocolAction::EmitDiscard]);
        assert_eq!(r.retries, 0);
    }

    #[test]
    fn ack_then_response_completes() {
        let c = cfg();
        let rec = FarmerEventRecord::new(event(0), &c);
        let (sent, _) = next_state(&rec, &transmit(Some("R1")), 3600, &c).unwrap();
        let (acked, acts) = next_state(&sent, &LifecycleInput::AckReceived, 3600, &c).unwrap();
        assert_eq!(acked.state, EventState::Acked);
        assert_eq!(acked.ack_deadline, None);
        assert!(!acked.payload_held);
        assert_eq!(acts, vec![ProtocolAction::DeletePayload]);
        let (done, acts) =
            next_state(&acked, &LifecycleInput::ResponseReceived, 7200, &c).unwrap();
        assert_eq!(done.state, EventState::Completed);
        assert_eq!(acts, vec![ProtocolAction::DeliverResponseToMailbox]);
    }

    #[test]
    fn response_from_sent_skips_ack() {
        let c = cfg();
        let rec = FarmerEventRecord::new(event(0), &c);
        let (sent, _) = next_state(&rec, &transmit(None), 100, &c).unwrap();
        let (done, acts) = next_state(&sent, &LifecycleInput::ResponseReceived, 200, &c).unwrap();
        assert_eq!(done.state, EventState::Completed);
        assert_eq!(acts, vec![ProtocolAction::DeliverResponseToMailbox]);
    }

    #[test]
    fn stray_inputs_leave_record_identical() {
        let c = cfg();
        let rec = FarmerEventRecord::new(event(0), &c);
        // Ack/response before any transmission: nothing to match.
        for input in [LifecycleInput::AckReceived, LifecycleInput::ResponseReceived] {
            let (r, acts) = next_state(&rec, &input, 50, &c).unwrap();
            assert_eq!(r, rec);
            assert!(acts.is_empty());
        }
        let (sent, _) = next_state(&rec, &transmit(None), 100, &c).unwrap();
        let (acked, _) = next_state(&sent, &LifecycleInput::AckReceived, 150, &c).unwrap();
        let (r, acts) = next_state(&acked, &LifecycleInput::AckReceived, 160, &c).unwrap();
        assert_eq!(r, acked);
        assert!(acts.is_empty());
        let (done, _) = next_state(&acked, &LifecycleInput::ResponseReceived, 170, &c).unwrap();
        for input in [
            LifecycleInput::AckReceived,
            LifecycleInput::ResponseReceived,
            LifecycleInput::ClockTick,
            transmit(Some("R9")),
        ] {
            let (r, acts) = next_state(&done, &input, 1_000_000, &c).unwrap();
            assert_eq!(r, done);
            assert!(acts.is_empty());
        }
    }

    #[test]
    fn max_retries_caps_timeout_transitions() {
        let mut c = cfg();
        c.max_retries = Some(1);
        let rec = FarmerEventRecord::new(event(0), &c);
        let (sent, _) = next_state(&rec, &transmit(Some("R1")), 0, &c).unwrap();
        let (stored, acts) = next_state(&sent, &LifecycleInput::ClockTick, 3600, &c).unwrap();
        assert_eq!(acts, vec![ProtocolAction::EmitRetransmit]);
        let (sent2, _) = next_state(&stored, &transmit(Some("R2")), 3600, &c).unwrap();
        // Cap reached: the second timeout does nothing; discard happens at t_r.
        let (r, acts) = next_state(&sent2, &LifecycleInput::ClockTick, 7200, &c).unwrap();
        assert_eq!(r, sent2);
        assert!(acts.is_empty());
        let (r, acts) = next_state(&sent2, &LifecycleInput::ClockTick, 86_400, &c).unwrap();
        assert_eq!(r.state, EventState::Discarded);
        assert_eq!(acts, vec![ProtocolAction::EmitDiscard]);
    }

    #[test]
    fn clock_regression_is_rejected() {
        let c = cfg();
        let rec = FarmerEventRecord::new(event(1000), &c);
        let err = next_state(&rec, &LifecycleInput::ClockTick, 999, &c).unwrap_err();
        assert_eq!(err, LifecycleError::TimeRegression { now: 999, last: 1000 });
    }

    #[test]
    fn validate_envelope_rules() {
        let base = Envelope {
            kind: EnvelopeKind::Ack,
            eid: Some(EventId(1)),
            uid: UserId::new("F1"),
            target_device: DeviceId::new("F1"),
            sent_at: 0,
            hops: vec![NodeId::Server],
            channel: Channel::Sms,
            body: None,
        };
        assert_eq!(validate_envelope(&base), Ok(()));

        let mut query_sms = base.clone();
        query_sms.kind = EnvelopeKind::Query;
        assert_eq!(validate_envelope(&query_sms), Err(EnvelopeError::QueryOverSms));

        let mut no_eid = base.clone();
        no_eid.eid = None;
        assert_eq!(
            validate_envelope(&no_eid),
            Err(EnvelopeError::MissingEidOnAck(EnvelopeKind::Ack))
        );

        let mut no_hops = base.clone();
        no_hops.hops.clear();
        assert_eq!(validate_envelope(&no_hops), Err(EnvelopeError::EmptyHops));

        // Alerts carry no eid by design.
        let alert = Envelope {
            kind: EnvelopeKind::Alert,
            eid: None,
            body: Some("weather".into()),
            ..base
        };
        assert_eq!(validate_envelope(&alert), Ok(()));
    }

    #[test]
    fn timer_config_validation() {
        assert!(TimerConfig::default().validate().is_ok());
        let bad = TimerConfig { t_d: 86_400, ..TimerConfig::default() };
        assert_eq!(
            bad.validate(),
            Err(TimerConfigError::DeadlineOrder { t_d: 86_400, t_r: 86_400 })
        );
        let bad = TimerConfig { scan_period: 0, ..TimerConfig::default() };
        assert_eq!(bad.validate(), Err(TimerConfigError::ZeroScanPeriod));
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    fn arb_input() -> impl Strategy<Value = LifecycleInput> {
        prop_oneof![
            Just(LifecycleInput::TransmitAttempt { via: Channel::CellularData, relay: None }),
            Just(LifecycleInput::TransmitAttempt {
                via: Channel::D2D,
                relay: Some(RelayId::new("R1"))
            }),
            Just(LifecycleInput::TransmitAttempt {
                via: Channel::D2D,
                relay: Some(RelayId::new("R2"))
            }),
            Just(LifecycleInput::AckReceived),
            Just(LifecycleInput::ResponseReceived),
            Just(LifecycleInput::ClockTick),
        ]
    }

    fn record() -> FarmerEventRecord {
        let event = QueryEvent {
            eid: EventId(1),
            uid: UserId::new("U"),
            logical_device: DeviceId::new("U"),
            created_at: 0,
            payload: PayloadDescriptor {
                photo_bytes: 1,
                voice_bytes: 0,
                labels: vec![],
                geotag: (0.0, 0.0),
            },
        };
        FarmerEventRecord::new(event, &TimerConfig::default())
    }

    proptest! {
        // Retries count exactly the timeout transitions, deadlines stay
        // anchored, ack_deadline tracks Sent, and terminal states absorb.
        #[test]
        fn lifecycle_invariants(
            inputs in proptest::collection::vec((arb_input(), 1u64..5000), 0..40),
        ) {
            let cfg = TimerConfig { t_d: 600, t_r: 40_000, ..TimerConfig::default() };
            let mut rec = record();
            let mut now = 0;
            let mut timeouts = 0u32;
            for (input, dt) in inputs {
                now += dt;
                let was_terminal = rec.state.is_terminal();
                let (next, actions) = next_state(&rec, &input, now, &cfg).unwrap();
                if was_terminal {
                    prop_assert_eq!(&next, &rec);
                    prop_assert!(actions.is_empty());
                }
                if actions.contains(&ProtocolAction::EmitRetransmit) {
                    timeouts += 1;
                }
                prop_assert_eq!(next.response_deadline, rec.response_deadline);
                prop_assert_eq!(next.event.created_at, 0);
                prop_assert_eq!(next.ack_deadline.is_some(), next.state == EventState::Sent);
                prop_assert_eq!(next.retries, timeouts);
                rec = next;
            }
            // Push the clock past the response deadline: must end terminal.
            let (fin, _) = next_state(&rec, &LifecycleInput::ClockTick, 1_000_000, &cfg).unwrap();
            prop_assert!(fin.state.is_terminal());
        }
    }
}
