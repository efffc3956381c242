//! Deterministic discrete-event engine: runs a loaded scenario, records a
//! total-order trace, and computes metrics.
//!
//! Event ordering is the tuple (time, priority class, enqueue sequence)
//! with the fixed class order: network change < timer < message arrival <
//! node action. Everything downstream of that order is pure, so the same
//! scenario and seed always produce byte-identical traces.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use thiserror::Error;

use crate::farmer::{
    eligible_relay, scan_and_select, AccessDecision, DownstreamOutcome, FarmerNode,
};
use crate::network::{transfer_time, Admission, NetworkModel, SignalLevel};
use crate::protocol::{
    DeviceId, Envelope, EventId, NodeId, ProtocolAction, QueryEvent, RelayId, TimerConfig,
    Timestamp, UserId,
};
use crate::relay::RelayNode;
use crate::scenario::Scenario;
use crate::server::{AlertTarget, RouteDecision, ServerNode};

// ---------------------------------------------------------------------------
// trace records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    EventCreated,
    Scan,
    Handoff,
    Upload,
    AckDelivered,
    ResponseScheduled,
    ResponseDelivered,
    Retransmit,
    Discard,
    LateResponse,
    Rejected,
    AlertDelivered,
    NetworkChange,
}

impl TraceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceKind::EventCreated => "EventCreated",
            TraceKind::Scan => "Scan",
            TraceKind::Handoff => "Handoff",
            TraceKind::Upload => "Upload",
            TraceKind::AckDelivered => "AckDelivered",
            TraceKind::ResponseScheduled => "ResponseScheduled",
            TraceKind::ResponseDelivered => "ResponseDelivered",
            TraceKind::Retransmit => "Retransmit",
            TraceKind::Discard => "Discard",
            TraceKind::LateResponse => "LateResponse",
            TraceKind::Rejected => "Rejected",
            TraceKind::AlertDelivered => "AlertDelivered",
            TraceKind::NetworkChange => "NetworkChange",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "EventCreated" => TraceKind::EventCreated,
            "Scan" => TraceKind::Scan,
            "Handoff" => TraceKind::Handoff,
            "Upload" => TraceKind::Upload,
            "AckDelivered" => TraceKind::AckDelivered,
            "ResponseScheduled" => TraceKind::ResponseScheduled,
            "ResponseDelivered" => TraceKind::ResponseDelivered,
            "Retransmit" => TraceKind::Retransmit,
            "Discard" => TraceKind::Discard,
            "LateResponse" => TraceKind::LateResponse,
            "Rejected" => TraceKind::Rejected,
            "AlertDelivered" => TraceKind::AlertDelivered,
            "NetworkChange" => TraceKind::NetworkChange,
            _ => return Option::None,
        })
    }
}

impl std::fmt::Display for TraceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of the run log. Detail pairs are emitted sorted by key; values
/// never contain whitespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub seq: u64,
    pub t: Timestamp,
    pub node: String,
    pub kind: TraceKind,
    pub detail: Vec<(String, String)>,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        let mut line = format!("seq={} t={} node={} kind={}", self.seq, self.t, self.node, self.kind);
        for (k, v) in &self.detail {
            line.push(' ');
            line.push_str(k);
            line.push('=');
            line.push_str(v);
        }
        line
    }

    pub fn parse_line(line: &str) -> Result<Self, MetricsError> {
        let bad = || MetricsError::MalformedTrace(format!("unparseable line: {line}"));
        let mut fields = line.split(' ').map(|tok| tok.split_once('=').ok_or_else(bad));
        let mut fixed = |name: &str| -> Result<String, MetricsError> {
            let (k, v) = fields.next().ok_or_else(bad)??;
            if k != name {
                return Err(bad());
            }
            Ok(v.to_string())
        };
        let seq = fixed("seq")?.parse().map_err(|_| bad())?;
        let t = fixed("t")?.parse().map_err(|_| bad())?;
        let node = fixed("node")?;
        let kind = TraceKind::parse(&fixed("kind")?).ok_or_else(bad)?;
        let mut detail = Vec::new();
        for tok in fields {
            let (k, v) = tok?;
            detail.push((k.to_string(), v.to_string()));
        }
        Ok(TraceRecord { seq, t, node, kind, detail })
    }

    pub fn detail(&self, key: &str) -> Option<&str> {
        self.detail.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, MetricsError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(TraceRecord::parse_line)
        .collect()
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

/// Latency distribution summary; percentiles use the nearest-rank method
/// on the raw integer samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencySummary {
    pub count: u64,
    pub mean: f64,
    pub p50: u64,
    pub p95: u64,
    pub max: u64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let n = sorted.len() as u64;
        let rank = |q: u64| -> u64 {
            let idx = ((q * n).div_ceil(100)).max(1) - 1;
            sorted[idx as usize]
        };
        LatencySummary {
            count: n,
            mean: sorted.iter().sum::<u64>() as f64 / n as f64,
            p50: rank(50),
            p95: rank(95),
            max: *sorted.last().expect("non-empty"),
        }
    }
}

/// Per-run counters and latency summaries. Field order here is the fixed
/// output order of the lines/table formats.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub queries_created: u64,
    pub delivered_to_server: u64,
    pub never_delivered: u64,
    pub duplicates_suppressed: u64,
    pub acks_received: u64,
    pub responses_delivered_in_time: u64,
    pub late_responses: u64,
    pub discards: u64,
    pub retransmissions: u64,
    pub rejected: u64,
    pub in_flight_at_horizon: u64,
    pub delivery_ratio: f64,
    pub ack_latency: LatencySummary,
    pub response_latency: LatencySummary,
}

impl Metrics {
    /// `key=value` pairs in fixed order: the machine-readable contract.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("queries_created", self.queries_created.to_string()),
            ("delivered_to_server", self.delivered_to_server.to_string()),
            ("never_delivered", self.never_delivered.to_string()),
            ("duplicates_suppressed", self.duplicates_suppressed.to_string()),
            ("acks_received", self.acks_received.to_string()),
            ("responses_delivered_in_time", self.responses_delivered_in_time.to_string()),
            ("late_responses", self.late_responses.to_string()),
            ("discards", self.discards.to_string()),
            ("retransmissions", self.retransmissions.to_string()),
            ("rejected", self.rejected.to_string()),
            ("in_flight_at_horizon", self.in_flight_at_horizon.to_string()),
            ("delivery_ratio", format!("{:.3}", self.delivery_ratio)),
            ("ack_latency_count", self.ack_latency.count.to_string()),
            ("ack_latency_mean", format!("{:.3}", self.ack_latency.mean)),
            ("ack_latency_p50", self.ack_latency.p50.to_string()),
            ("ack_latency_p95", self.ack_latency.p95.to_string()),
            ("ack_latency_max", self.ack_latency.max.to_string()),
            ("response_latency_count", self.response_latency.count.to_string()),
            ("response_latency_mean", format!("{:.3}", self.response_latency.mean)),
            ("response_latency_p50", self.response_latency.p50.to_string()),
            ("response_latency_p95", self.response_latency.p95.to_string()),
            ("response_latency_max", self.response_latency.max.to_string()),
        ]
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Aligned two-column rendering for humans.
    pub fn to_table(&self) -> String {
        let pairs = self.to_pairs();
        let width = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }
}

/// Recompute metrics from a trace alone. Equal to the run-emitted metrics
/// for any trace this engine produced.
pub fn collect_metrics(trace: &[TraceRecord]) -> Result<Metrics, MetricsError> {
    let mut last_seq: Option<u64> = Option::None;
    let mut last_t: Timestamp = 0;
    let mut created: BTreeMap<(String, String), Timestamp> = BTreeMap::new();
    let mut ack_lat = Vec::new();
    let mut resp_lat = Vec::new();
    let mut m = Metrics::default();

    let key_of = |r: &TraceRecord| -> Result<(String, String), MetricsError> {
        let uid = r
            .detail("uid")
            .ok_or_else(|| MetricsError::MalformedTrace(format!("missing uid at seq={}", r.seq)))?;
        let eid = r
            .detail("eid")
            .ok_or_else(|| MetricsError::MalformedTrace(format!("missing eid at seq={}", r.seq)))?;
        Ok((uid.to_string(), eid.to_string()))
    };

    for r in trace {
        if last_seq.is_some_and(|s| r.seq <= s) {
            return Err(MetricsError::MalformedTrace(format!(
                "seq not strictly increasing at seq={}",
                r.seq
            )));
        }
        if r.t < last_t {
            return Err(MetricsError::MalformedTrace(format!(
                "time went backwards at seq={}",
                r.seq
            )));
        }
        last_seq = Some(r.seq);
        last_t = r.t;

        match r.kind {
            TraceKind::EventCreated => {
                m.queries_created += 1;
                if created.insert(key_of(r)?, r.t).is_some() {
                    return Err(MetricsError::MalformedTrace(format!(
                        "duplicate creation at seq={}",
                        r.seq
                    )));
                }
            }
            TraceKind::Upload => {
                let key = key_of(r)?;
                if !created.contains_key(&key) {
                    return Err(MetricsError::MalformedTrace(format!(
                        "upload for unknown query at seq={}",
                        r.seq
                    )));
                }
                match r.detail("duplicate") {
                    Some("false") => m.delivered_to_server += 1,
                    Some("true") => m.duplicates_suppressed += 1,
                    _ => {
                        return Err(MetricsError::MalformedTrace(format!(
                            "upload without duplicate flag at seq={}",
                            r.seq
                        )))
                    }
                }
            }
            TraceKind::AckDelivered => {
                let key = key_of(r)?;
                let Some(&t0) = created.get(&key) else {
                    return Err(MetricsError::MalformedTrace(format!(
                        "ack for unknown query at seq={}",
                        r.seq
                    )));
                };
                m.acks_received += 1;
                ack_lat.push(r.t - t0);
            }
            TraceKind::ResponseDelivered => {
                let key = key_of(r)?;
                let Some(&t0) = created.get(&key) else {
                    return Err(MetricsError::MalformedTrace(format!(
                        "response for unknown query at seq={}",
                        r.seq
                    )));
                };
                m.responses_delivered_in_time += 1;
                resp_lat.push(r.t - t0);
            }
            TraceKind::Retransmit => m.retransmissions += 1,
            TraceKind::Discard => m.discards += 1,
            TraceKind::LateResponse => m.late_responses += 1,
            TraceKind::Rejected => m.rejected += 1,
            TraceKind::Scan
            | TraceKind::Handoff
            | TraceKind::ResponseScheduled
            | TraceKind::AlertDelivered
            | TraceKind::NetworkChange => {}
        }
    }

    m.never_delivered = m.queries_created.saturating_sub(m.delivered_to_server);
    m.in_flight_at_horizon = m
        .queries_created
        .saturating_sub(m.responses_delivered_in_time)
        .saturating_sub(m.discards);
    m.delivery_ratio = if m.queries_created == 0 {
        0.0
    } else {
        m.delivered_to_server as f64 / m.queries_created as f64
    };
    m.ack_latency = LatencySummary::from_samples(&ack_lat);
    m.response_latency = LatencySummary::from_samples(&resp_lat);
    Ok(m)
}

// ---------------------------------------------------------------------------
// engine
// ---------------------------------------------------------------------------

/// Everything a finished run hands back: the trace, its metrics, and the
/// final node states (for mailbox and store inspection).
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trace: Vec<TraceRecord>,
    pub metrics: Metrics,
    pub farmers: BTreeMap<DeviceId, FarmerNode>,
    pub relays: BTreeMap<RelayId, RelayNode>,
    pub server: ServerNode,
}

const PRIO_NETWORK: u8 = 0;
const PRIO_TIMER: u8 = 1;
const PRIO_ARRIVAL: u8 = 2;
const PRIO_ACTION: u8 = 3;

#[derive(Debug, Clone)]
enum Ev {
    SignalChange { node: NodeId, level: SignalLevel },
    SmsChange { device: DeviceId, reachable: bool },
    ContactBegin { relay: RelayId, visit: usize },
    ContactEnd { relay: RelayId, visit: usize },
    AckTimer { device: DeviceId, uid: UserId, eid: EventId, due: Timestamp },
    ResponseTimer { device: DeviceId, uid: UserId, eid: EventId },
    ScanTimer { device: DeviceId, due: Timestamp },
    SessionEnd { relay: RelayId },
    ExpertReady { uid: UserId, eid: EventId },
    AlertFire { index: usize },
    ServerArrival { env: Box<Envelope>, event: Box<QueryEvent> },
    FarmerArrival { device: DeviceId, env: Box<Envelope> },
    WorkloadCreate { index: usize },
    FarmerScan { device: DeviceId, queued_at: Timestamp },
    RelaySync { relay: RelayId, queued_at: Timestamp },
    RelayDeliver { relay: RelayId, queued_at: Timestamp },
}

#[derive(Debug)]
struct Queued {
    t: Timestamp,
    prio: u8,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.t, self.prio, self.seq) == (other.t, other.prio, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.t, self.prio, self.seq).cmp(&(other.t, other.prio, other.seq))
    }
}

struct Engine<'a> {
    scenario: &'a Scenario,
    cfg: TimerConfig,
    network: NetworkModel,
    farmers: BTreeMap<DeviceId, FarmerNode>,
    relays: BTreeMap<RelayId, RelayNode>,
    server: ServerNode,
    queue: BinaryHeap<Reverse<Queued>>,
    queue_seq: u64,
    now: Timestamp,
    trace: Vec<TraceRecord>,
    /// (relay -> (visit index, cluster)) for every window open right now.
    contacts: BTreeMap<RelayId, (usize, Vec<DeviceId>)>,
    created_at: BTreeMap<(UserId, EventId), Timestamp>,
    tally: Metrics,
    ack_lat: Vec<u64>,
    resp_lat: Vec<u64>,
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario) -> Self {
        let mut signals = BTreeMap::new();
        let mut farmers = BTreeMap::new();
        let mut server = ServerNode::new(scenario.expert, scenario.seed);
        for spec in scenario.farmers.iter().filter(|f| f.owns_device) {
            signals.insert(NodeId::Farmer(spec.device.clone()), spec.signal.clone());
            farmers
                .insert(spec.device.clone(), FarmerNode::new(spec.device.clone(), spec.uid.clone()));
        }
        for spec in scenario.farmers.iter().filter(|f| !f.owns_device) {
            farmers
                .get_mut(&spec.device)
                .expect("shared device resolved at load")
                .add_resident(spec.uid.clone());
        }
        for spec in &scenario.farmers {
            server.learn_device(&spec.uid, &spec.device);
        }
        let mut relays = BTreeMap::new();
        let mut visits = BTreeMap::new();
        for spec in &scenario.relays {
            signals.insert(NodeId::Relay(spec.id.clone()), spec.signal.clone());
            visits.insert(spec.id.clone(), spec.visits.clone());
            let mut node = RelayNode::new(spec.id.clone());
            node.open_hotspot(scenario.link.relay_capacity).expect("capacity checked at load");
            relays.insert(spec.id.clone(), node);
        }
        let network = NetworkModel { signals, visits, link: scenario.link.clone() };
        Engine {
            scenario,
            cfg: scenario.timers.clone(),
            network,
            farmers,
            relays,
            server,
            queue: BinaryHeap::new(),
            queue_seq: 0,
            now: 0,
            trace: Vec::new(),
            contacts: BTreeMap::new(),
            created_at: BTreeMap::new(),
            tally: Metrics::default(),
            ack_lat: Vec::new(),
            resp_lat: Vec::new(),
        }
    }

    fn push(&mut self, t: Timestamp, prio: u8, ev: Ev) {
        let seq = self.queue_seq;
        self.queue_seq += 1;
        self.queue.push(Reverse(Queued { t, prio, seq, ev }));
    }

    fn emit(&mut self, node: String, kind: TraceKind, mut detail: Vec<(String, String)>) {
        detail.sort();
        let seq = self.trace.len() as u64;
        self.trace.push(TraceRecord { seq, t: self.now, node, kind, detail });
    }

    fn seed_events(&mut self) {
        // Signal breakpoints after t=0 are network-change events; the t=0
        // entries are initial conditions.
        let mut changes: Vec<(Timestamp, NodeId, SignalLevel)> = Vec::new();
        for (node, schedule) in &self.network.signals {
            for (t, level) in &schedule.breakpoints {
                if *t > 0 {
                    changes.push((*t, node.clone(), *level));
                }
            }
        }
        for (t, node, level) in changes {
            self.push(t, PRIO_NETWORK, Ev::SignalChange { node, level });
        }
        let mut sms_changes: Vec<(Timestamp, DeviceId, bool)> = Vec::new();
        for spec in &self.scenario.farmers {
            if let crate::scenario::SmsPolicy::Schedule(bps) = &spec.sms {
                for (t, reachable) in bps {
                    if *t > 0 {
                        sms_changes.push((*t, spec.device.clone(), *reachable));
                    }
                }
            }
        }
        for (t, device, reachable) in sms_changes {
            self.push(t, PRIO_NETWORK, Ev::SmsChange { device, reachable });
        }
        let mut windows: Vec<(Timestamp, Timestamp, RelayId, usize)> = Vec::new();
        for (relay, visits) in &self.network.visits {
            for (i, v) in visits.iter().enumerate() {
                windows.push((v.arrive, v.depart, relay.clone(), i));
            }
        }
        for (arrive, depart, relay, i) in windows {
            self.push(arrive, PRIO_NETWORK, Ev::ContactBegin { relay: relay.clone(), visit: i });
            self.push(depart, PRIO_NETWORK, Ev::ContactEnd { relay, visit: i });
        }
        for i in 0..self.scenario.workload.len() {
            self.push(self.scenario.workload[i].at, PRIO_ACTION, Ev::WorkloadCreate { index: i });
        }
        for i in 0..self.scenario.alerts.len() {
            self.push(self.scenario.alerts[i].at, PRIO_TIMER, Ev::AlertFire { index: i });
        }
    }

    fn run(&mut self) {
        self.seed_events();
        while let Some(Reverse(q)) = self.queue.pop() {
            if q.t >= self.scenario.horizon {
                break;
            }
            self.now = q.t;
            self.handle(q.ev);
        }
    }

    // -- helpers -----------------------------------------------------------

    fn device_signal(&self, device: &DeviceId) -> SignalLevel {
        self.network
            .signal_at(&NodeId::Farmer(device.clone()), self.now)
            .unwrap_or(SignalLevel::None)
    }

    fn relay_signal(&self, relay: &RelayId) -> SignalLevel {
        self.network
            .signal_at(&NodeId::Relay(relay.clone()), self.now)
            .unwrap_or(SignalLevel::None)
    }

    fn contacts_for(&self, device: &DeviceId) -> BTreeSet<RelayId> {
        self.contacts
            .iter()
            .filter(|(_, (_, cluster))| cluster.contains(device))
            .map(|(relay, _)| relay.clone())
            .collect()
    }

    fn queue_scan_at(&mut self, device: &DeviceId, at: Timestamp) {
        let node = self.farmers.get_mut(device).expect("known device");
        if node.scan_queued_at == Some(at) {
            return;
        }
        node.scan_queued_at = Some(at);
        self.push(at, PRIO_ACTION, Ev::FarmerScan { device: device.clone(), queued_at: at });
    }

    fn queue_sync(&mut self, relay: &RelayId) {
        let now = self.now;
        let node = self.relays.get_mut(relay).expect("known relay");
        if node.sync_queued_at == Some(now) {
            return;
        }
        node.sync_queued_at = Some(now);
        self.push(now, PRIO_ACTION, Ev::RelaySync { relay: relay.clone(), queued_at: now });
    }

    fn queue_deliver(&mut self, relay: &RelayId) {
        let now = self.now;
        let node = self.relays.get_mut(relay).expect("known relay");
        if node.deliver_queued_at == Some(now) {
            return;
        }
        node.deliver_queued_at = Some(now);
        self.push(now, PRIO_ACTION, Ev::RelayDeliver { relay: relay.clone(), queued_at: now });
    }

    /// Send one downstream envelope by the server's preference order; queue
    /// syncs for any live relay that just received a copy.
    fn route_and_dispatch(&mut self, env: Envelope) {
        let uid = env.uid.clone();
        let device = env.target_device.clone();
        let signal = self.device_signal(&device);
        let sms_reachable = self
            .scenario
            .farmer(&uid)
            .map(|spec| spec.sms.reachable(signal, self.now))
            .unwrap_or(false);
        let data_reachable = signal == SignalLevel::Good;
        match self.server.route_downstream(env, sms_reachable, data_reachable, self.now) {
            RouteDecision::Direct { env } => {
                self.push(
                    self.now,
                    PRIO_ARRIVAL,
                    Ev::FarmerArrival { device, env: Box::new(env) },
                );
            }
            RouteDecision::ViaRelay(relays) => {
                for relay in relays {
                    if self.relay_signal(&relay) == SignalLevel::Good {
                        self.queue_sync(&relay);
                    }
                }
            }
            RouteDecision::Parked => {}
        }
    }

    fn reroute_parked(&mut self) {
        for env in self.server.take_parked() {
            self.route_and_dispatch(env);
        }
    }

    fn note_ingest(
        &mut self,
        via: String,
        uid: &UserId,
        eid: EventId,
        duplicate: bool,
        response_due: Option<Timestamp>,
    ) {
        self.emit(
            "server".into(),
            TraceKind::Upload,
            vec![
                ("duplicate".into(), duplicate.to_string()),
                ("eid".into(), eid.to_string()),
                ("uid".into(), uid.to_string()),
                ("via".into(), via),
            ],
        );
        if duplicate {
            self.tally.duplicates_suppressed += 1;
        } else {
            self.tally.delivered_to_server += 1;
        }
        if let Some(due) = response_due {
            self.emit(
                "server".into(),
                TraceKind::ResponseScheduled,
                vec![
                    ("due".into(), due.to_string()),
                    ("eid".into(), eid.to_string()),
                    ("uid".into(), uid.to_string()),
                ],
            );
            self.push(due, PRIO_TIMER, Ev::ExpertReady { uid: uid.clone(), eid });
        }
    }

    fn apply_record_actions(
        &mut self,
        device: &DeviceId,
        key: &(UserId, EventId),
        actions: Vec<ProtocolAction>,
    ) {
        for action in actions {
            match action {
                ProtocolAction::EmitRetransmit => {
                    let retries = self.farmers[device].records[key].retries;
                    self.emit(
                        device.to_string(),
                        TraceKind::Retransmit,
                        vec![
                            ("eid".into(), key.1.to_string()),
                            ("retries".into(), retries.to_string()),
                            ("uid".into(), key.0.to_string()),
                        ],
                    );
                    self.tally.retransmissions += 1;
                    self.queue_scan_at(device, self.now);
                }
                ProtocolAction::EmitDiscard => {
                    self.emit(
                        device.to_string(),
                        TraceKind::Discard,
                        vec![
                            ("eid".into(), key.1.to_string()),
                            ("uid".into(), key.0.to_string()),
                        ],
                    );
                    self.tally.discards += 1;
                }
                ProtocolAction::DeletePayload | ProtocolAction::DeliverResponseToMailbox => {}
            }
        }
    }

    fn deliver_to_farmer(&mut self, device: &DeviceId, env: &Envelope) {
        let outcome = {
            let node = self.farmers.get_mut(device).expect("known device");
            node.handle_downstream(env, self.now, &self.cfg).expect("engine-built envelope")
        };
        let channel = env.channel.to_string();
        match outcome {
            DownstreamOutcome::AckAccepted { uid, eid } => {
                self.emit(
                    device.to_string(),
                    TraceKind::AckDelivered,
                    vec![
                        ("channel".into(), channel),
                        ("eid".into(), eid.to_string()),
                        ("uid".into(), uid.to_string()),
                    ],
                );
                self.tally.acks_received += 1;
                let t0 = self.created_at[&(uid, eid)];
                self.ack_lat.push(self.now - t0);
            }
            DownstreamOutcome::ResponseAccepted { uid, eid } => {
                self.emit(
                    device.to_string(),
                    TraceKind::ResponseDelivered,
                    vec![
                        ("channel".into(), channel),
                        ("eid".into(), eid.to_string()),
                        ("uid".into(), uid.to_string()),
                    ],
                );
                self.tally.responses_delivered_in_time += 1;
                let t0 = self.created_at[&(uid, eid)];
                self.resp_lat.push(self.now - t0);
            }
            DownstreamOutcome::LateResponse { uid, eid } => {
                self.emit(
                    device.to_string(),
                    TraceKind::LateResponse,
                    vec![
                        ("channel".into(), channel),
                        ("eid".into(), eid.map(|e| e.to_string()).unwrap_or_default()),
                        ("uid".into(), uid.to_string()),
                    ],
                );
                self.tally.late_responses += 1;
            }
            DownstreamOutcome::AlertDelivered { uid } => {
                self.emit(
                    device.to_string(),
                    TraceKind::AlertDelivered,
                    vec![("channel".into(), channel), ("uid".into(), uid.to_string())],
                );
            }
            DownstreamOutcome::AckIgnored
            | DownstreamOutcome::AlertIgnored
            | DownstreamOutcome::NotForFarmer => {}
        }
    }

    // -- handlers ----------------------------------------------------------

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::SignalChange { node, level } => self.on_signal_change(node, level),
            Ev::SmsChange { device, reachable } => self.on_sms_change(device, reachable),
            Ev::ContactBegin { relay, visit } => self.on_contact_begin(relay, visit),
            Ev::ContactEnd { relay, visit } => self.on_contact_end(relay, visit),
            Ev::AckTimer { device, uid, eid, due } => self.on_ack_timer(device, uid, eid, due),
            Ev::ResponseTimer { device, uid, eid } => self.on_response_timer(device, uid, eid),
            Ev::ScanTimer { device, due } => self.on_scan_timer(device, due),
            Ev::SessionEnd { relay } => {
                self.relays.get_mut(&relay).expect("known relay").end_session();
            }
            Ev::ExpertReady { uid, eid } => self.on_expert_ready(uid, eid),
            Ev::AlertFire { index } => self.on_alert_fire(index),
            Ev::ServerArrival { env, event } => self.on_server_arrival(*env, *event),
            Ev::FarmerArrival { device, env } => self.deliver_to_farmer(&device, &env),
            Ev::WorkloadCreate { index } => self.on_workload_create(index),
            Ev::FarmerScan { device, queued_at } => self.on_farmer_scan(device, queued_at),
            Ev::RelaySync { relay, queued_at } => self.on_relay_sync(relay, queued_at),
            Ev::RelayDeliver { relay, queued_at } => self.on_relay_deliver(relay, queued_at),
        }
    }

    fn on_signal_change(&mut self, node: NodeId, level: SignalLevel) {
        self.emit(
            node.to_string(),
            TraceKind::NetworkChange,
            vec![("change".into(), "signal".into()), ("level".into(), level.to_string())],
        );
        match node {
            NodeId::Relay(relay) => {
                if level == SignalLevel::Good {
                    self.queue_sync(&relay);
                }
            }
            NodeId::Farmer(_) => {
                // A farmer's reachability changed: parked downstream traffic
                // may have a route now. Farmers themselves do not wake; the
                // periodic scan finds the new signal.
                self.reroute_parked();
            }
            NodeId::Server => {}
        }
    }

    fn on_sms_change(&mut self, device: DeviceId, reachable: bool) {
        self.emit(
            device.to_string(),
            TraceKind::NetworkChange,
            vec![("change".into(), "sms".into()), ("reachable".into(), reachable.to_string())],
        );
        self.reroute_parked();
    }

    fn on_contact_begin(&mut self, relay: RelayId, visit: usize) {
        let cluster = self.network.visits[&relay][visit].cluster.clone();
        self.contacts.insert(relay.clone(), (visit, cluster.clone()));
        self.emit(
            relay.to_string(),
            TraceKind::NetworkChange,
            vec![("change".into(), "contact_begin".into()), ("visit".into(), visit.to_string())],
        );
        if self.relay_signal(&relay) == SignalLevel::Good {
            self.queue_sync(&relay);
        }
        for device in &cluster {
            let has_pending = self
                .farmers
                .get(device)
                .is_some_and(|n| !n.stored_local().is_empty());
            if has_pending {
                self.queue_scan_at(device, self.now);
            }
        }
        self.queue_deliver(&relay);
    }

    fn on_contact_end(&mut self, relay: RelayId, visit: usize) {
        self.contacts.remove(&relay);
        self.emit(
            relay.to_string(),
            TraceKind::NetworkChange,
            vec![("change".into(), "contact_end".into()), ("visit".into(), visit.to_string())],
        );
    }

    fn on_workload_create(&mut self, index: usize) {
        let item = self.scenario.workload[index].clone();
        let spec = self.scenario.farmer(&item.uid).expect("validated uid");
        let device = spec.device.clone();
        let (uid, eid) = {
            let node = self.farmers.get_mut(&device).expect("known device");
            if node.session().map(|s| s.uid.clone()) != Some(item.uid.clone()) {
                node.logout();
                node.login(item.uid.clone(), self.now).expect("resident of this device");
            }
            node.create_event(item.payload.clone(), self.now, &self.cfg)
                .expect("payload validated at load")
        };
        self.emit(
            device.to_string(),
            TraceKind::EventCreated,
            vec![("eid".into(), eid.to_string()), ("uid".into(), uid.to_string())],
        );
        self.tally.queries_created += 1;
        self.created_at.insert((uid.clone(), eid), self.now);
        self.push(
            self.now + self.cfg.t_r,
            PRIO_TIMER,
            Ev::ResponseTimer { device: device.clone(), uid, eid },
        );
        self.queue_scan_at(&device, self.now);
    }

    fn on_scan_timer(&mut self, device: DeviceId, due: Timestamp) {
        let node = self.farmers.get_mut(&device).expect("known device");
        if node.next_scan_due != Some(due) {
            return;
        }
        node.next_scan_due = Option::None;
        if node.stored_local().is_empty() {
            return;
        }
        self.queue_scan_at(&device, self.now);
    }

    fn on_farmer_scan(&mut self, device: DeviceId, queued_at: Timestamp) {
        let pending = {
            let node = self.farmers.get_mut(&device).expect("known device");
            if node.scan_queued_at != Some(queued_at) {
                return;
            }
            node.scan_queued_at = Option::None;
            node.stored_local()
        };
        if pending.is_empty() {
            return;
        }
        let signal = self.device_signal(&device);
        let contacts = self.contacts_for(&device);
        let decision = scan_and_select(self.now, signal, &contacts, &self.cfg);

        let mut detail = vec![("pending".into(), pending.len().to_string())];
        let result = match &decision {
            AccessDecision::DirectNow => "direct",
            AccessDecision::HandoffToRelay { relay } => {
                detail.push(("relay".into(), relay.to_string()));
                "handoff"
            }
            AccessDecision::WaitAndRescan { .. } => "wait",
            AccessDecision::NoPath => "nopath",
        };
        detail.push(("result".into(), result.into()));
        self.emit(device.to_string(), TraceKind::Scan, detail);

        match decision {
            AccessDecision::DirectNow => {
                for key in pending {
                    self.do_direct(&device, &key);
                }
            }
            AccessDecision::HandoffToRelay { .. } => {
                for key in pending {
                    self.do_handoff(&device, &key);
                }
            }
            AccessDecision::WaitAndRescan { next_scan } => {
                let node = self.farmers.get_mut(&device).expect("known device");
                node.next_scan_due = Some(next_scan);
                self.push(next_scan, PRIO_TIMER, Ev::ScanTimer { device, due: next_scan });
            }
            AccessDecision::NoPath => {
                // No-signal zones poll on the same cadence: the network can
                // come back with no relay ever appearing.
                let next_scan = self.now + self.cfg.scan_period;
                let node = self.farmers.get_mut(&device).expect("known device");
                node.next_scan_due = Some(next_scan);
                self.push(next_scan, PRIO_TIMER, Ev::ScanTimer { device, due: next_scan });
            }
        }
    }

    fn do_direct(&mut self, device: &DeviceId, key: &(UserId, EventId)) {
        let signal = self.device_signal(device);
        let (sent, event) = {
            let node = self.farmers.get_mut(device).expect("known device");
            let event = node.records.get(key).map(|r| r.event.clone());
            let sent =
                node.transmit_direct(key, signal, self.now, &self.cfg).expect("signal checked by scan");
            (sent, event)
        };
        match sent {
            Some(env) => {
                let event = event.expect("record exists");
                let dt = transfer_time(
                    event.payload.total_bytes(),
                    self.network.link.server_bytes_per_second,
                );
                self.push(
                    self.now + self.cfg.t_d,
                    PRIO_TIMER,
                    Ev::AckTimer {
                        device: device.clone(),
                        uid: key.0.clone(),
                        eid: key.1,
                        due: self.now + self.cfg.t_d,
                    },
                );
                self.push(
                    self.now + dt,
                    PRIO_ARRIVAL,
                    Ev::ServerArrival { env: Box::new(env), event: Box::new(event) },
                );
            }
            Option::None => {
                // Response deadline passed before the attempt: the record
                // discarded itself instead of transmitting.
                self.emit(
                    device.to_string(),
                    TraceKind::Discard,
                    vec![("eid".into(), key.1.to_string()), ("uid".into(), key.0.to_string())],
                );
                self.tally.discards += 1;
            }
        }
    }

    fn do_handoff(&mut self, device: &DeviceId, key: &(UserId, EventId)) {
        let contacts = self.contacts_for(device);
        let Some(relay_id) = ({
            let node = &self.farmers[device];
            node.records.get(key).and_then(|r| eligible_relay(r, &contacts))
        }) else {
            return;
        };

        // Token on file for this relay and this user? Registration is free
        // while in contact, and re-registering yields the same token.
        let needs_token = self.farmers[device]
            .token_for(&relay_id)
            .is_none_or(|tok| tok.uid != key.0);
        if needs_token {
            let token = self
                .relays
                .get_mut(&relay_id)
                .expect("known relay")
                .register_farmer(&key.0, device, &key.0 .0, true, self.now)
                .expect("in contact with own credentials");
            self.farmers.get_mut(device).expect("known device").store_token(relay_id.clone(), token);
        }

        let admission = self.network.admit(self.relays[&relay_id].active_sessions);
        let (_, cluster) = &self.contacts[&relay_id];
        debug_assert!(cluster.contains(device));
        let visit_idx = self.contacts[&relay_id].0;
        let depart = self.network.visits[&relay_id][visit_idx].depart;
        let duration = transfer_time(
            self.farmers[device].records[key].event.payload.total_bytes(),
            self.network.link.d2d_bytes_per_second,
        );
        if admission == Admission::Full || self.now + duration > depart {
            self.emit(
                device.to_string(),
                TraceKind::Rejected,
                vec![
                    ("eid".into(), key.1.to_string()),
                    ("relay".into(), relay_id.to_string()),
                    ("uid".into(), key.0.to_string()),
                ],
            );
            self.tally.rejected += 1;
            self.queue_scan_at(device, self.now + 1);
            return;
        }

        let transfer = self
            .farmers
            .get_mut(device)
            .expect("known device")
            .handoff_to_relay(
                key,
                &relay_id,
                true,
                Admission::Admitted,
                self.network.link.d2d_bytes_per_second,
                self.now,
                &self.cfg,
            )
            .expect("contact, token, and admission checked");
        {
            let token = self.farmers[device].token_for(&relay_id).expect("stored above").clone();
            let relay = self.relays.get_mut(&relay_id).expect("known relay");
            relay.begin_session();
            relay
                .accept_query(&token, transfer.event.clone(), device, self.now)
                .expect("registered and open");
        }
        self.push(self.now + transfer.duration, PRIO_TIMER, Ev::SessionEnd {
            relay: relay_id.clone(),
        });
        self.push(
            self.now + self.cfg.t_d,
            PRIO_TIMER,
            Ev::AckTimer {
                device: device.clone(),
                uid: key.0.clone(),
                eid: key.1,
                due: self.now + self.cfg.t_d,
            },
        );
        self.emit(
            device.to_string(),
            TraceKind::Handoff,
            vec![
                ("duration".into(), transfer.duration.to_string()),
                ("eid".into(), key.1.to_string()),
                ("relay".into(), relay_id.to_string()),
                ("uid".into(), key.0.to_string()),
            ],
        );
        if self.relay_signal(&relay_id) == SignalLevel::Good {
            self.queue_sync(&relay_id);
        }
    }

    fn on_ack_timer(&mut self, device: DeviceId, uid: UserId, eid: EventId, due: Timestamp) {
        let key = (uid, eid);
        let actions = {
            let node = self.farmers.get_mut(&device).expect("known device");
            let Some(record) = node.records.get(&key) else { return };
            if record.ack_deadline != Some(due) {
                return; // a later attempt superseded this timer
            }
            node.tick_record(&key, self.now, &self.cfg)
        };
        self.apply_record_actions(&device, &key, actions);
    }

    fn on_response_timer(&mut self, device: DeviceId, uid: UserId, eid: EventId) {
        let key = (uid, eid);
        let actions = {
            let node = self.farmers.get_mut(&device).expect("known device");
            if node.records.get(&key).is_none_or(|r| r.state.is_terminal()) {
                return;
            }
            node.tick_record(&key, self.now, &self.cfg)
        };
        self.apply_record_actions(&device, &key, actions);
    }

    fn on_expert_ready(&mut self, uid: UserId, eid: EventId) {
        let Some(env) = self.server.prepare_response(&uid, eid, self.now) else {
            return;
        };
        self.route_and_dispatch(env);
    }

    fn on_alert_fire(&mut self, index: usize) {
        let spec = self.scenario.alerts[index].clone();
        // "all" means every farmer in the scenario, whether or not the
        // server has seen traffic from them.
        let target = match spec.target {
            AlertTarget::AllFarmers => AlertTarget::Users(
                self.scenario.farmers.iter().map(|f| f.uid.clone()).collect(),
            ),
            explicit @ AlertTarget::Users(_) => explicit,
        };
        let envs = self.server.send_alert(&target, &spec.body, self.now);
        for env in envs {
            self.route_and_dispatch(env);
        }
    }

    fn on_server_arrival(&mut self, env: Envelope, event: QueryEvent) {
        let (ack, outcome) = self
            .server
            .ingest_query(&env, &event, self.now)
            .expect("engine-built query envelope");
        self.note_ingest(
            "direct".into(),
            &env.uid,
            event.eid,
            outcome.duplicate,
            outcome.response_due,
        );
        let device = ack.target_device.clone();
        self.push(self.now, PRIO_ARRIVAL, Ev::FarmerArrival { device, env: Box::new(ack) });
    }

    fn on_relay_sync(&mut self, relay: RelayId, queued_at: Timestamp) {
        {
            let node = self.relays.get_mut(&relay).expect("known relay");
            if node.sync_queued_at != Some(queued_at) {
                return;
            }
            node.sync_queued_at = Option::None;
        }
        if self.relay_signal(&relay) != SignalLevel::Good {
            return; // link lost before the sync ran; a later trigger retries
        }
        let report = {
            let node = self.relays.get_mut(&relay).expect("known relay");
            node.sync_with_server(&mut self.server, true, self.now)
        };
        for upload in &report.uploads {
            self.note_ingest(
                relay.to_string(),
                &upload.uid,
                upload.eid,
                upload.duplicate,
                upload.response_due,
            );
        }
        if !report.newly_mapped.is_empty() {
            self.reroute_parked();
        }
        let has_undelivered =
            self.relays[&relay].undelivered_downstream_count() > 0;
        if has_undelivered && self.contacts.contains_key(&relay) {
            self.queue_deliver(&relay);
        }
    }

    fn on_relay_deliver(&mut self, relay: RelayId, queued_at: Timestamp) {
        {
            let node = self.relays.get_mut(&relay).expect("known relay");
            if node.deliver_queued_at != Some(queued_at) {
                return;
            }
            node.deliver_queued_at = Option::None;
        }
        let Some((_, cluster)) = self.contacts.get(&relay).cloned() else {
            return;
        };
        let devices: BTreeSet<DeviceId> = cluster.into_iter().collect();
        let envs = {
            let node = self.relays.get_mut(&relay).expect("known relay");
            node.deliver_downstream(&devices, self.now)
        };
        for env in envs {
            let device = env.target_device.clone();
            self.deliver_to_farmer(&device, &env);
        }
    }

    fn finish(mut self) -> SimOutcome {
        self.tally.never_delivered = self.tally.queries_created - self.tally.delivered_to_server;
        self.tally.in_flight_at_horizon = self.tally.queries_created
            - self.tally.responses_delivered_in_time
            - self.tally.discards;
        self.tally.delivery_ratio = if self.tally.queries_created == 0 {
            0.0
        } else {
            self.tally.delivered_to_server as f64 / self.tally.queries_created as f64
        };
        self.tally.ack_latency = LatencySummary::from_samples(&self.ack_lat);
        self.tally.response_latency = LatencySummary::from_samples(&self.resp_lat);
        SimOutcome {
            trace: self.trace,
            metrics: self.tally,
            farmers: self.farmers,
            relays: self.relays,
            server: self.server,
        }
    }
}

/// Run one scenario to its horizon. Pure in (scenario, seed): identical
/// inputs give byte-identical traces.
pub fn simulate(scenario: &Scenario) -> SimOutcome {
    let mut engine = Engine::new(scenario);
    engine.run();
    engine.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_scenario;

    #[test]
    fn trace_lines_round_trip() {
        let rec = TraceRecord {
            seq: 12,
            t: 3600,
            node: "F1".into(),
            kind: TraceKind::AckDelivered,
            detail: vec![
                ("channel".into(), "d2d".into()),
                ("eid".into(), "1".into()),
                ("uid".into(), "F1".into()),
            ],
        };
        let line = rec.to_line();
        assert_eq!(line, "seq=12 t=3600 node=F1 kind=AckDelivered channel=d2d eid=1 uid=F1");
        assert_eq!(TraceRecord::parse_line(&line).unwrap(), rec);
        assert!(TraceRecord::parse_line("t=1 seq=2 node=x kind=Scan").is_err(), "field order fixed");
        assert!(TraceRecord::parse_line("seq=1 t=2 node=x kind=NotAKind").is_err());
    }

    #[test]
    fn nearest_rank_percentiles() {
        let s = LatencySummary::from_samples(&[100]);
        assert_eq!((s.count, s.p50, s.p95, s.max), (1, 100, 100, 100));
        assert!((s.mean - 100.0).abs() < 1e-9);
        // Ten samples 10..=100: p50 = 5th value, p95 = 10th value.
        let samples: Vec<u64> = (1..=10).map(|i| i * 10).collect();
        let s = LatencySummary::from_samples(&samples);
        assert_eq!((s.p50, s.p95, s.max), (50, 100, 100));
        assert!((s.mean - 55.0).abs() < 1e-9);
        let s = LatencySummary::from_samples(&[]);
        assert_eq!((s.count, s.p50, s.p95, s.max), (0, 0, 0, 0));
    }

    #[test]
    fn metrics_lines_have_fixed_order_and_formatting() {
        let m = Metrics { queries_created: 2, delivered_to_server: 1, delivery_ratio: 0.5, ..Default::default() };
        let lines = m.to_lines();
        let keys: Vec<&str> =
            lines.lines().map(|l| l.split_once('=').unwrap().0).collect();
        assert_eq!(
            keys,
            vec![
                "queries_created",
                "delivered_to_server",
                "never_delivered",
                "duplicates_suppressed",
                "acks_received",
                "responses_delivered_in_time",
                "late_responses",
                "discards",
                "retransmissions",
                "rejected",
                "in_flight_at_horizon",
                "delivery_ratio",
                "ack_latency_count",
                "ack_latency_mean",
                "ack_latency_p50",
                "ack_latency_p95",
                "ack_latency_max",
                "response_latency_count",
                "response_latency_mean",
                "response_latency_p50",
                "response_latency_p95",
                "response_latency_max",
            ]
        );
        assert!(lines.contains("delivery_ratio=0.500"));
        assert!(m.to_table().contains("delivery_ratio"));
    }

    #[test]
    fn collect_metrics_from_a_tiny_trace() {
        let text = "\
seq=0 t=0 node=F1 kind=EventCreated eid=1 uid=F1
seq=1 t=10 node=server kind=Upload duplicate=false eid=1 uid=F1 via=direct
seq=2 t=10 node=F1 kind=AckDelivered channel=data eid=1 uid=F1
seq=3 t=500 node=F1 kind=ResponseDelivered channel=sms eid=1 uid=F1
";
        let m = collect_metrics(&parse_trace(text).unwrap()).unwrap();
        assert_eq!(m.queries_created, 1);
        assert_eq!(m.delivered_to_server, 1);
        assert_eq!(m.responses_delivered_in_time, 1);
        assert!((m.delivery_ratio - 1.0).abs() < 1e-9);
        assert_eq!(m.ack_latency.p50, 10);
        assert_eq!(m.response_latency.max, 500);
        assert_eq!(m.in_flight_at_horizon, 0);
    }

    #[test]
    fn discards_stay_out_of_response_latency() {
        let text = "\
seq=0 t=0 node=F1 kind=EventCreated eid=1 uid=F1
seq=1 t=86400 node=F1 kind=Discard eid=1 uid=F1
";
        let m = collect_metrics(&parse_trace(text).unwrap()).unwrap();
        assert_eq!(m.discards, 1);
        assert_eq!(m.response_latency.count, 0);
        assert_eq!(m.never_delivered, 1);
        assert_eq!(m.in_flight_at_horizon, 0);
    }

    #[test]
    fn malformed_traces_are_rejected() {
        let out_of_order = "\
seq=1 t=5 node=F1 kind=EventCreated eid=1 uid=F1
seq=1 t=6 node=F1 kind=Discard eid=1 uid=F1
";
        assert!(collect_metrics(&parse_trace(out_of_order).unwrap()).is_err());
        let unknown_query = "seq=0 t=5 node=server kind=Upload duplicate=false eid=9 uid=F9 via=direct\n";
        assert!(collect_metrics(&parse_trace(unknown_query).unwrap()).is_err());
        let time_regress = "\
seq=0 t=5 node=F1 kind=EventCreated eid=1 uid=F1
seq=1 t=4 node=F1 kind=Discard eid=1 uid=F1
";
        assert!(collect_metrics(&parse_trace(time_regress).unwrap()).is_err());
    }

    #[test]
    fn empty_workload_traces_only_network_changes() {
        let text = r#"
            name = "idle"
            horizon = 20000
            [[farmers]]
            uid = "F1"
            signal = [[0, "none"], [9000, "good"]]
            [[relays]]
            id = "R1"
            [[relays.visits]]
            cluster = ["F1"]
            arrive = 1000
            depart = 2000
        "#;
        let scenario = load_scenario(text).unwrap();
        let out = simulate(&scenario);
        assert!(!out.trace.is_empty());
        assert!(out.trace.iter().all(|r| r.kind == TraceKind::NetworkChange));
        assert_eq!(out.metrics.queries_created, 0);
        assert_eq!(out.metrics.delivery_ratio, 0.0);
        assert_eq!(out.metrics, collect_metrics(&out.trace).unwrap());
    }

    #[test]
    fn direct_upload_answers_over_sms_when_signal_allows() {
        let text = r#"
            name = "direct"
            horizon = 20000
            [timers]
            t_r = 10000
            t_d = 600
            scan_period = 600
            [expert]
            fixed = 300
            [[farmers]]
            uid = "F1"
            signal = [[0, "good"]]
            [[workload]]
            uid = "F1"
            at = 100
            photo_bytes = 2000000
        "#;
        let scenario = load_scenario(text).unwrap();
        let out = simulate(&scenario);
        let kinds: Vec<(TraceKind, Timestamp)> =
            out.trace.iter().map(|r| (r.kind, r.t)).collect();
        // 2 MB at the default 1 MB/s server rate: upload lands at t+2.
        assert_eq!(
            kinds,
            vec![
                (TraceKind::EventCreated, 100),
                (TraceKind::Scan, 100),
                (TraceKind::Upload, 102),
                (TraceKind::ResponseScheduled, 102),
                (TraceKind::AckDelivered, 102),
                (TraceKind::ResponseDelivered, 402),
            ]
        );
        let response = out.trace.last().unwrap();
        assert_eq!(response.detail("channel"), Some("sms"), "texts beat data downstream");
        assert_eq!(out.metrics.ack_latency.max, 2);
        assert_eq!(out.metrics.response_latency.max, 302);
        assert_eq!(out.metrics, collect_metrics(&out.trace).unwrap());
    }

    #[test]
    fn simulation_is_deterministic() {
        let text = std::fs::read_to_string(
            std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("../../scenarios/case_d.toml"),
        )
        .unwrap();
        let scenario = load_scenario(&text).unwrap();
        let a = format_trace(&simulate(&scenario).trace);
        let b = format_trace(&simulate(&scenario).trace);
        assert_eq!(a, b);
    }
}
