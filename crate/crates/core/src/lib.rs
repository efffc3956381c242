//! Protocol library and deterministic discrete-event simulator for
//! delay-tolerant agro-advisory relaying.
//!
//! Farmer handsets in no-/poor-coverage zones hand queries to mobile relay
//! nodes over short-range links; relays store-carry-forward them to a central
//! server, which acknowledges on first ingest and returns an expert response
//! under per-query deadlines. The crate models the protocol state machine,
//! the three node roles, a breakpoint-schedule network model, and a seeded
//! event-driven simulator whose traces are byte-reproducible.

pub mod farmer;
pub mod network;
pub mod protocol;
pub mod relay;
pub mod scenario;
pub mod server;
pub mod sim;
pub mod util;

pub use farmer::{scan_and_select, AccessDecision, FarmerNode, Mailbox};
pub use network::{transfer_time, LinkModel, NetworkModel, SignalLevel};
pub use protocol::{
    compute_deadlines, next_state, validate_envelope, Channel, DeviceId, Envelope, EnvelopeKind,
    EventId, EventState, FarmerEventRecord, LifecycleInput, NodeId, PayloadDescriptor,
    ProtocolAction, QueryEvent, RelayId, TimerConfig, Timestamp, UserId,
};
pub use relay::RelayNode;
pub use scenario::{load_scenario, load_scenario_with, CaseLabel, LoadError, Overrides, Scenario};
pub use server::{ExpertStubConfig, ServerNode};
pub use sim::{
    collect_metrics, format_trace, parse_trace, simulate, Metrics, MetricsError, SimOutcome,
    TraceKind, TraceRecord,
};
