//! Scenario files: TOML schema, pattern expansion, validation, and the
//! connectivity-case checker.
//!
//! A scenario names every node, its signal timeline, relay movement, the
//! query workload, and the knobs (timers, link rates, expert latency). All
//! generated forms (visit patterns, signal alternation, jitter) expand to
//! concrete schedules at load time, so a loaded `Scenario` is fully
//! deterministic input for the engine.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use thiserror::Error;

use crate::network::{LinkModel, SignalLevel, SignalSchedule, Visit};
use crate::protocol::{DeviceId, PayloadDescriptor, RelayId, TimerConfig, Timestamp, UserId};
use crate::server::{AlertTarget, ExpertStubConfig};
use crate::util::DetRng;

// ---------------------------------------------------------------------------
// loaded (expanded) scenario
// ---------------------------------------------------------------------------

/// Which connectivity situation the file claims to model. The loader
/// rejects files whose schedules contradict the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseLabel {
    /// No-network farmers; relay keeps a server link while visiting.
    A,
    /// Poor-network farmers; relay collects offline, uploads later.
    B,
    /// No relays; farmers wait out a no-network spell, then send direct.
    C,
    /// No-network farmers; collecting relay is offline, gains link later.
    D,
}

impl std::fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CaseLabel::A => "A",
            CaseLabel::B => "B",
            CaseLabel::C => "C",
            CaseLabel::D => "D",
        };
        f.write_str(s)
    }
}

/// Whether and when the server may text this farmer's device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmsPolicy {
    /// Reachable whenever the device's data signal is Poor or Good.
    Auto,
    /// Texts always land, even in a no-data spell.
    Always,
    /// Never use SMS for this farmer.
    Never,
    /// Explicit reachability breakpoints, independent of data signal.
    Schedule(Vec<(Timestamp, bool)>),
}

impl SmsPolicy {
    pub fn reachable(&self, signal: SignalLevel, t: Timestamp) -> bool {
        match self {
            SmsPolicy::Auto => signal != SignalLevel::None,
            SmsPolicy::Always => true,
            SmsPolicy::Never => false,
            SmsPolicy::Schedule(bps) => {
                let idx = bps.partition_point(|(start, _)| *start <= t);
                if idx == 0 { false } else { bps[idx - 1].1 }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FarmerSpec {
    pub uid: UserId,
    /// The handset this user submits from. Guests share someone else's.
    pub device: DeviceId,
    /// False for a basic-phone user logged into a shared smartphone.
    pub owns_device: bool,
    pub signal: SignalSchedule,
    pub sms: SmsPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaySpec {
    pub id: RelayId,
    /// The relay's own server-link signal.
    pub signal: SignalSchedule,
    /// Concrete, non-overlapping, sorted by arrival.
    pub visits: Vec<Visit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadItem {
    pub uid: UserId,
    pub at: Timestamp,
    pub payload: PayloadDescriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlertSpec {
    pub at: Timestamp,
    pub target: AlertTarget,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub case: Option<CaseLabel>,
    pub seed: u64,
    pub horizon: Timestamp,
    pub timers: TimerConfig,
    pub link: LinkModel,
    pub expert: ExpertStubConfig,
    pub farmers: Vec<FarmerSpec>,
    pub relays: Vec<RelaySpec>,
    pub workload: Vec<WorkloadItem>,
    pub alerts: Vec<AlertSpec>,
}

impl Scenario {
    pub fn farmer(&self, uid: &UserId) -> Option<&FarmerSpec> {
        self.farmers.iter().find(|f| &f.uid == uid)
    }

    /// The owner spec of a device (the farmer whose own handset it is).
    pub fn device_owner(&self, device: &DeviceId) -> Option<&FarmerSpec> {
        self.farmers.iter().find(|f| f.owns_device && &f.device == device)
    }
}

// ---------------------------------------------------------------------------
// load errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("{field} references unknown id {id}")]
    UnknownId { field: String, id: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("relay {relay} has overlapping or empty visits around t={at}")]
    OverlappingVisits { relay: String, at: Timestamp },
    #[error("schedules contradict declared case {case}: {reason}")]
    CaseMismatch { case: CaseLabel, reason: String },
    #[error("non-positive duration in {field}: {detail}")]
    NegativeDuration { field: String, detail: String },
    #[error("bad value for {field}: {detail}")]
    BadValue { field: String, detail: String },
}

// ---------------------------------------------------------------------------
// raw TOML shape
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    case: Option<String>,
    seed: Option<u64>,
    horizon: Option<u64>,
    timers: Option<RawTimers>,
    link: Option<RawLink>,
    expert: Option<RawExpert>,
    #[serde(default)]
    farmers: Vec<RawFarmer>,
    #[serde(default)]
    relays: Vec<RawRelay>,
    #[serde(default)]
    workload: Vec<RawWorkload>,
    #[serde(default)]
    alerts: Vec<RawAlert>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimers {
    t_r: Option<u64>,
    t_d: Option<u64>,
    scan_period: Option<u64>,
    max_retries: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    d2d_bytes_per_second: Option<u64>,
    server_bytes_per_second: Option<u64>,
    relay_capacity: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExpert {
    fixed: Option<u64>,
    uniform: Option<RawUniform>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUniform {
    min: u64,
    max: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFarmer {
    uid: String,
    device: Option<String>,
    shared_device: Option<String>,
    signal: Option<Vec<(u64, String)>>,
    signal_pattern: Option<RawSignalPattern>,
    sms: Option<RawSms>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawSms {
    Policy(String),
    Schedule(Vec<(u64, bool)>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSignalPattern {
    start: String,
    alternate: String,
    dwell: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRelay {
    id: String,
    signal: Option<Vec<(u64, String)>>,
    signal_pattern: Option<RawSignalPattern>,
    #[serde(default)]
    visits: Vec<RawVisit>,
    visit_pattern: Option<RawVisitPattern>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVisit {
    cluster: Vec<String>,
    arrive: u64,
    depart: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVisitPattern {
    cluster: Vec<String>,
    start: u64,
    period: u64,
    dwell: u64,
    count: u64,
    jitter: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    uid: String,
    at: u64,
    photo_bytes: Option<u64>,
    voice_bytes: Option<u64>,
    labels: Option<Vec<String>>,
    lat: Option<f64>,
    lon: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlert {
    at: u64,
    targets: RawTargets,
    body: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawTargets {
    All(String),
    Users(Vec<String>),
}

// ---------------------------------------------------------------------------
// loading
// ---------------------------------------------------------------------------

/// Knobs applied on top of the file before expansion: CLI seed/until and
/// one swept parameter.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub until: Option<Timestamp>,
    pub param: Option<(String, u64)>,
}

pub fn load_scenario(text: &str) -> Result<Scenario, LoadError> {
    load_scenario_with(text, &Overrides::default())
}

pub fn load_scenario_with(text: &str, overrides: &Overrides) -> Result<Scenario, LoadError> {
    let mut raw: RawScenario =
        toml::from_str(text).map_err(|e| LoadError::Parse(e.to_string()))?;

    let case = match raw.case.as_deref() {
        Option::None => Option::None,
        Some("A") | Some("a") => Some(CaseLabel::A),
        Some("B") | Some("b") => Some(CaseLabel::B),
        Some("C") | Some("c") => Some(CaseLabel::C),
        Some("D") | Some("d") => Some(CaseLabel::D),
        Some(other) => {
            return Err(LoadError::BadValue {
                field: "case".into(),
                detail: format!("expected A, B, C, or D, got {other:?}"),
            })
        }
    };

    let raw_timers = raw.timers.take().unwrap_or_default();
    let mut timers = TimerConfig {
        t_r: raw_timers.t_r.unwrap_or(86_400),
        t_d: raw_timers.t_d.unwrap_or(3_600),
        scan_period: raw_timers.scan_period.unwrap_or(600),
        max_retries: raw_timers.max_retries,
    };

    let raw_link = raw.link.take().unwrap_or_default();
    let defaults = LinkModel::default();
    let mut link = LinkModel {
        d2d_bytes_per_second: raw_link.d2d_bytes_per_second.unwrap_or(defaults.d2d_bytes_per_second),
        server_bytes_per_second: raw_link
            .server_bytes_per_second
            .unwrap_or(defaults.server_bytes_per_second),
        relay_capacity: raw_link.relay_capacity.unwrap_or(defaults.relay_capacity),
    };

    let mut expert = match raw.expert.take() {
        Option::None => ExpertStubConfig::default(),
        Some(RawExpert { fixed: Some(_), uniform: Some(_) }) => {
            return Err(LoadError::BadValue {
                field: "expert".into(),
                detail: "give either fixed or uniform, not both".into(),
            })
        }
        Some(RawExpert { fixed: Some(n), uniform: Option::None }) => ExpertStubConfig::Fixed(n),
        Some(RawExpert { fixed: Option::None, uniform: Some(u) }) => {
            if u.min > u.max {
                return Err(LoadError::NegativeDuration {
                    field: "expert.uniform".into(),
                    detail: format!("min {} exceeds max {}", u.min, u.max),
                });
            }
            ExpertStubConfig::Uniform { min: u.min, max: u.max }
        }
        Some(RawExpert { fixed: Option::None, uniform: Option::None }) => {
            ExpertStubConfig::default()
        }
    };

    let mut seed = raw.seed.unwrap_or(0);
    let mut horizon_field = raw.horizon;

    // Overrides land before any validation or expansion so a swept value is
    // checked like a hand-written one.
    if let Some(s) = overrides.seed {
        seed = s;
    }
    if let Some((name, value)) = &overrides.param {
        let v = *value;
        match name.as_str() {
            "relay_capacity" => link.relay_capacity = v as u32,
            "t_d" => timers.t_d = v,
            "t_r" => timers.t_r = v,
            "scan_period" => timers.scan_period = v,
            "max_retries" => timers.max_retries = Some(v as u32),
            "expert_latency" => expert = ExpertStubConfig::Fixed(v),
            "d2d_bytes_per_second" => link.d2d_bytes_per_second = v,
            "server_bytes_per_second" => link.server_bytes_per_second = v,
            "horizon" => horizon_field = Some(v),
            "seed" => seed = v,
            "visit_period" => {
                for relay in &mut raw.relays {
                    if let Some(p) = &mut relay.visit_pattern {
                        p.period = v;
                    }
                }
            }
            other => {
                return Err(LoadError::BadValue {
                    field: "param".into(),
                    detail: format!("unknown sweep parameter {other:?}"),
                })
            }
        }
    }

    timers.validate().map_err(|e| LoadError::NegativeDuration {
        field: "timers".into(),
        detail: e.to_string(),
    })?;
    if link.d2d_bytes_per_second == 0 || link.server_bytes_per_second == 0 {
        return Err(LoadError::BadValue {
            field: "link".into(),
            detail: "link rates must be positive".into(),
        });
    }
    if link.relay_capacity == 0 {
        return Err(LoadError::BadValue {
            field: "link.relay_capacity".into(),
            detail: "capacity must be at least 1".into(),
        });
    }

    let mut horizon = horizon_field.unwrap_or(2 * timers.t_r);
    if let Some(until) = overrides.until {
        horizon = until;
    }
    if horizon == 0 {
        return Err(LoadError::NegativeDuration {
            field: "horizon".into(),
            detail: "horizon must be positive".into(),
        });
    }

    // --- farmers -----------------------------------------------------------
    let mut farmers = Vec::new();
    let mut seen_uids = BTreeSet::new();
    // Guests resolve after every owner is known.
    let mut pending_shared: Vec<(usize, String)> = Vec::new();
    for rf in &raw.farmers {
        if !seen_uids.insert(rf.uid.clone()) {
            return Err(LoadError::DuplicateId(rf.uid.clone()));
        }
        if rf.device.is_some() && rf.shared_device.is_some() {
            return Err(LoadError::BadValue {
                field: format!("farmers.{}", rf.uid),
                detail: "device and shared_device are mutually exclusive".into(),
            });
        }
        let sms = match &rf.sms {
            Option::None => SmsPolicy::Auto,
            Some(RawSms::Policy(p)) => match p.as_str() {
                "auto" => SmsPolicy::Auto,
                "always" => SmsPolicy::Always,
                "never" => SmsPolicy::Never,
                other => {
                    return Err(LoadError::BadValue {
                        field: format!("farmers.{}.sms", rf.uid),
                        detail: format!("expected auto/always/never or a schedule, got {other:?}"),
                    })
                }
            },
            Some(RawSms::Schedule(bps)) => {
                check_breakpoint_times(
                    &bps.iter().map(|(t, _)| *t).collect::<Vec<_>>(),
                    &format!("farmers.{}.sms", rf.uid),
                )?;
                SmsPolicy::Schedule(bps.clone())
            }
        };
        let signal = expand_signal(
            &rf.signal,
            &rf.signal_pattern,
            horizon,
            SignalLevel::None,
            &format!("farmers.{}.signal", rf.uid),
        )?;
        if let Some(shared) = &rf.shared_device {
            if rf.signal.is_some() || rf.signal_pattern.is_some() {
                return Err(LoadError::BadValue {
                    field: format!("farmers.{}.signal", rf.uid),
                    detail: "a guest inherits the shared device's signal".into(),
                });
            }
            pending_shared.push((farmers.len(), shared.clone()));
        }
        let device = rf
            .device
            .clone()
            .or_else(|| rf.shared_device.clone())
            .unwrap_or_else(|| rf.uid.clone());
        farmers.push(FarmerSpec {
            uid: UserId::new(&rf.uid),
            device: DeviceId::new(&device),
            owns_device: rf.shared_device.is_none(),
            signal,
            sms,
        });
    }
    // Each device has exactly one owner.
    let mut owner_devices = BTreeSet::new();
    for f in farmers.iter().filter(|f| f.owns_device) {
        if !owner_devices.insert(f.device.clone()) {
            return Err(LoadError::DuplicateId(f.device.0.clone()));
        }
    }
    for (idx, shared) in pending_shared {
        let device = DeviceId::new(&shared);
        let owner_signal = match farmers.iter().find(|f| f.owns_device && f.device == device) {
            Some(owner) => owner.signal.clone(),
            Option::None => {
                return Err(LoadError::UnknownId {
                    field: format!("farmers.{}.shared_device", farmers[idx].uid.0),
                    id: shared,
                });
            }
        };
        farmers[idx].signal = owner_signal;
    }

    let uid_to_device: BTreeMap<String, DeviceId> =
        farmers.iter().map(|f| (f.uid.0.clone(), f.device.clone())).collect();

    // --- relays ------------------------------------------------------------
    let mut relays = Vec::new();
    let mut seen_relays = BTreeSet::new();
    for rr in &raw.relays {
        if !seen_relays.insert(rr.id.clone()) {
            return Err(LoadError::DuplicateId(rr.id.clone()));
        }
        let signal = expand_signal(
            &rr.signal,
            &rr.signal_pattern,
            horizon,
            SignalLevel::Good,
            &format!("relays.{}.signal", rr.id),
        )?;
        if !rr.visits.is_empty() && rr.visit_pattern.is_some() {
            return Err(LoadError::BadValue {
                field: format!("relays.{}", rr.id),
                detail: "give either visits or visit_pattern, not both".into(),
            });
        }
        let mut visits = Vec::new();
        let resolve_cluster = |cluster: &[String], field: &str| -> Result<Vec<DeviceId>, LoadError> {
            if cluster.is_empty() {
                return Err(LoadError::BadValue {
                    field: field.to_string(),
                    detail: "cluster must name at least one farmer".into(),
                });
            }
            let mut devices = BTreeSet::new();
            for uid in cluster {
                let device = uid_to_device.get(uid).ok_or_else(|| LoadError::UnknownId {
                    field: field.to_string(),
                    id: uid.clone(),
                })?;
                devices.insert(device.clone());
            }
            Ok(devices.into_iter().collect())
        };
        for rv in &rr.visits {
            visits.push(Visit {
                cluster: resolve_cluster(&rv.cluster, &format!("relays.{}.visits", rr.id))?,
                arrive: rv.arrive,
                depart: rv.depart,
            });
        }
        if let Some(p) = &rr.visit_pattern {
            if p.period == 0 || p.dwell == 0 {
                return Err(LoadError::NegativeDuration {
                    field: format!("relays.{}.visit_pattern", rr.id),
                    detail: "period and dwell must be positive".into(),
                });
            }
            let cluster =
                resolve_cluster(&p.cluster, &format!("relays.{}.visit_pattern", rr.id))?;
            let mut rng = DetRng::new(seed).fork("visit-jitter").fork(&rr.id);
            for i in 0..p.count {
                let jitter = match p.jitter.unwrap_or(0) {
                    0 => 0,
                    j => rng.range(0, j),
                };
                let arrive = p.start + i * p.period + jitter;
                visits.push(Visit { cluster: cluster.clone(), arrive, depart: arrive + p.dwell });
            }
        }
        visits.sort_by_key(|v| v.arrive);
        for v in &visits {
            if v.arrive >= v.depart {
                return Err(LoadError::OverlappingVisits { relay: rr.id.clone(), at: v.arrive });
            }
        }
        for pair in visits.windows(2) {
            if pair[1].arrive < pair[0].depart {
                return Err(LoadError::OverlappingVisits {
                    relay: rr.id.clone(),
                    at: pair[1].arrive,
                });
            }
        }
        relays.push(RelaySpec { id: RelayId::new(&rr.id), signal, visits });
    }

    // --- workload ----------------------------------------------------------
    let mut workload = Vec::new();
    for (i, rw) in raw.workload.iter().enumerate() {
        if !uid_to_device.contains_key(&rw.uid) {
            return Err(LoadError::UnknownId {
                field: format!("workload[{i}].uid"),
                id: rw.uid.clone(),
            });
        }
        if rw.at >= horizon {
            return Err(LoadError::BadValue {
                field: format!("workload[{i}].at"),
                detail: format!("create time {} is not before horizon {}", rw.at, horizon),
            });
        }
        let photo = rw.photo_bytes.unwrap_or(0);
        let voice = rw.voice_bytes.unwrap_or(0);
        if photo + voice == 0 {
            return Err(LoadError::BadValue {
                field: format!("workload[{i}]"),
                detail: "payload must contain photo or voice bytes".into(),
            });
        }
        workload.push(WorkloadItem {
            uid: UserId::new(&rw.uid),
            at: rw.at,
            payload: PayloadDescriptor {
                photo_bytes: photo,
                voice_bytes: voice,
                labels: rw.labels.clone().unwrap_or_default(),
                geotag: (rw.lat.unwrap_or(0.0), rw.lon.unwrap_or(0.0)),
            },
        });
    }
    workload.sort_by(|a, b| (a.at, &a.uid).cmp(&(b.at, &b.uid)));

    // --- alerts ------------------------------------------------------------
    let mut alerts = Vec::new();
    for (i, ra) in raw.alerts.iter().enumerate() {
        let target = match &ra.targets {
            RawTargets::All(s) if s == "all" => AlertTarget::AllFarmers,
            RawTargets::All(s) => {
                return Err(LoadError::BadValue {
                    field: format!("alerts[{i}].targets"),
                    detail: format!("expected \"all\" or a list of uids, got {s:?}"),
                })
            }
            RawTargets::Users(uids) => {
                for uid in uids {
                    if !uid_to_device.contains_key(uid) {
                        return Err(LoadError::UnknownId {
                            field: format!("alerts[{i}].targets"),
                            id: uid.clone(),
                        });
                    }
                }
                AlertTarget::Users(uids.iter().map(UserId::new).collect())
            }
        };
        if ra.at >= horizon {
            return Err(LoadError::BadValue {
                field: format!("alerts[{i}].at"),
                detail: format!("alert time {} is not before horizon {}", ra.at, horizon),
            });
        }
        alerts.push(AlertSpec { at: ra.at, target, body: ra.body.clone() });
    }
    alerts.sort_by_key(|a| a.at);

    let scenario = Scenario {
        name: raw.name,
        case,
        seed,
        horizon,
        timers,
        link,
        expert,
        farmers,
        relays,
        workload,
        alerts,
    };
    if let Some(case) = scenario.case {
        check_case(&scenario, case)?;
    }
    Ok(scenario)
}

fn check_breakpoint_times(times: &[u64], field: &str) -> Result<(), LoadError> {
    if times.first() != Some(&0) {
        return Err(LoadError::BadValue {
            field: field.to_string(),
            detail: "first breakpoint must be at t=0".into(),
        });
    }
    for pair in times.windows(2) {
        if pair[1] <= pair[0] {
            return Err(LoadError::BadValue {
                field: field.to_string(),
                detail: format!("breakpoints must be strictly increasing (t={})", pair[1]),
            });
        }
    }
    Ok(())
}

fn parse_level(s: &str, field: &str) -> Result<SignalLevel, LoadError> {
    match s {
        "none" => Ok(SignalLevel::None),
        "poor" => Ok(SignalLevel::Poor),
        "good" => Ok(SignalLevel::Good),
        other => Err(LoadError::BadValue {
            field: field.to_string(),
            detail: format!("expected none/poor/good, got {other:?}"),
        }),
    }
}

fn expand_signal(
    explicit: &Option<Vec<(u64, String)>>,
    pattern: &Option<RawSignalPattern>,
    horizon: Timestamp,
    default: SignalLevel,
    field: &str,
) -> Result<SignalSchedule, LoadError> {
    match (explicit, pattern) {
        (Some(_), Some(_)) => Err(LoadError::BadValue {
            field: field.to_string(),
            detail: "give either signal or signal_pattern, not both".into(),
        }),
        (Some(bps), Option::None) => {
            check_breakpoint_times(&bps.iter().map(|(t, _)| *t).collect::<Vec<_>>(), field)?;
            let mut out = Vec::new();
            for (t, level) in bps {
                out.push((*t, parse_level(level, field)?));
            }
            Ok(SignalSchedule { breakpoints: out })
        }
        (Option::None, Some(p)) => {
            if p.dwell == 0 {
                return Err(LoadError::NegativeDuration {
                    field: field.to_string(),
                    detail: "dwell must be positive".into(),
                });
            }
            let a = parse_level(&p.start, field)?;
            let b = parse_level(&p.alternate, field)?;
            let mut out = Vec::new();
            let mut t = 0;
            let mut current = a;
            while t < horizon {
                out.push((t, current));
                current = if current == a { b } else { a };
                t += p.dwell;
            }
            Ok(SignalSchedule { breakpoints: out })
        }
        (Option::None, Option::None) => Ok(SignalSchedule::constant(default)),
    }
}

// ---------------------------------------------------------------------------
// connectivity-case checker
// ---------------------------------------------------------------------------

/// Every instant a piecewise-constant schedule can change inside [from, to).
fn levels_within(schedule: &SignalSchedule, from: Timestamp, to: Timestamp) -> Vec<SignalLevel> {
    let mut out = vec![schedule.level_at(from)];
    for (t, level) in &schedule.breakpoints {
        if *t > from && *t < to {
            out.push(*level);
        }
    }
    out
}

/// Verify that a scenario actually exhibits the situation its label claims.
/// The loader runs this automatically for labelled files; callers can re-run
/// it on a built [`Scenario`].
pub fn check_case(s: &Scenario, case: CaseLabel) -> Result<(), LoadError> {
    let mismatch = |reason: String| LoadError::CaseMismatch { case, reason };
    let visit_count: usize = s.relays.iter().map(|r| r.visits.len()).sum();
    let owner_of = |device: &DeviceId| s.device_owner(device);

    match case {
        CaseLabel::A => {
            if visit_count == 0 {
                return Err(mismatch("no relay visits scheduled".into()));
            }
            for relay in &s.relays {
                for v in &relay.visits {
                    if levels_within(&relay.signal, v.arrive, v.depart)
                        .iter()
                        .any(|l| *l != SignalLevel::Good)
                    {
                        return Err(mismatch(format!(
                            "relay {} must keep a Good server link during its visit at t={}",
                            relay.id.0, v.arrive
                        )));
                    }
                    for device in &v.cluster {
                        let Some(owner) = owner_of(device) else { continue };
                        if levels_within(&owner.signal, v.arrive, v.depart)
                            .iter()
                            .any(|l| *l != SignalLevel::None)
                        {
                            return Err(mismatch(format!(
                                "farmer {} must have no signal during the visit at t={}",
                                owner.uid.0, v.arrive
                            )));
                        }
                    }
                }
            }
        }
        CaseLabel::B => {
            if visit_count == 0 {
                return Err(mismatch("no relay visits scheduled".into()));
            }
            for item in &s.workload {
                let farmer = s.farmer(&item.uid).expect("validated");
                if farmer.signal.level_at(item.at) != SignalLevel::Poor {
                    return Err(mismatch(format!(
                        "farmer {} must be in a poor-signal zone when creating queries",
                        farmer.uid.0
                    )));
                }
            }
            let collects_offline_then_uploads = s.relays.iter().any(|r| {
                !r.visits.is_empty()
                    && r.visits.iter().any(|v| {
                        levels_within(&r.signal, v.arrive, v.depart)
                            .iter()
                            .any(|l| *l != SignalLevel::Good)
                    })
                    && r.signal.breakpoints.iter().any(|(_, l)| *l == SignalLevel::Good)
            });
            if !collects_offline_then_uploads {
                return Err(mismatch(
                    "some relay must collect without a server link and gain one later".into(),
                ));
            }
        }
        CaseLabel::C => {
            if visit_count != 0 {
                return Err(mismatch("case C has no relay involvement".into()));
            }
            for item in &s.workload {
                let farmer = s.farmer(&item.uid).expect("validated");
                if farmer.signal.level_at(0) != SignalLevel::None {
                    return Err(mismatch(format!(
                        "farmer {} must start with no signal",
                        farmer.uid.0
                    )));
                }
                let recovers = farmer
                    .signal
                    .breakpoints
                    .iter()
                    .any(|(t, l)| *t > 0 && *t < s.horizon && *l == SignalLevel::Good);
                if !recovers {
                    return Err(mismatch(format!(
                        "farmer {} never regains a usable signal before the horizon",
                        farmer.uid.0
                    )));
                }
            }
        }
        CaseLabel::D => {
            for item in &s.workload {
                let farmer = s.farmer(&item.uid).expect("validated");
                if farmer.signal.breakpoints.iter().any(|(_, l)| *l != SignalLevel::None) {
                    return Err(mismatch(format!(
                        "farmer {} must stay out of coverage for the whole run",
                        farmer.uid.0
                    )));
                }
            }
            let offline_collector = s.relays.iter().any(|r| {
                r.visits.iter().any(|v| {
                    r.signal.level_at(v.arrive) != SignalLevel::Good
                        && r.signal
                            .breakpoints
                            .iter()
                            .any(|(t, l)| *t >= v.depart && *l == SignalLevel::Good)
                })
            });
            if !offline_collector {
                return Err(mismatch(
                    "some relay must collect while offline and reach the network later".into(),
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE_A: &str = r#"
        name = "hourly-relay"
        case = "A"
        seed = 7
        horizon = 172800

        [timers]
        t_r = 86400
        t_d = 3600
        scan_period = 600

        [[farmers]]
        uid = "F1"
        signal = [[0, "none"]]

        [[relays]]
        id = "R1"
        signal = [[0, "good"]]

        [relays.visit_pattern]
        cluster = ["F1"]
        start = 3600
        period = 3600
        dwell = 600
        count = 47

        [[workload]]
        uid = "F1"
        at = 0
        photo_bytes = 250000
    "#;

    #[test]
    fn loads_and_expands_case_a() {
        let s = load_scenario(CASE_A).unwrap();
        assert_eq!(s.case, Some(CaseLabel::A));
        assert_eq!(s.horizon, 172_800);
        assert_eq!(s.relays[0].visits.len(), 47);
        assert_eq!(s.relays[0].visits[0].arrive, 3600);
        assert_eq!(s.relays[0].visits[0].depart, 4200);
        assert_eq!(s.relays[0].visits[46].arrive, 3600 + 46 * 3600);
        assert_eq!(s.farmers[0].device, DeviceId::new("F1"), "device defaults to uid");
        assert!(s.farmers[0].owns_device);
        assert_eq!(s.expert, ExpertStubConfig::Fixed(1800));
        assert_eq!(s.workload[0].payload.photo_bytes, 250_000);
    }

    #[test]
    fn deadline_order_is_enforced() {
        let text = CASE_A.replace("t_d = 3600", "t_d = 86400");
        assert!(matches!(
            load_scenario(&text),
            Err(LoadError::NegativeDuration { field, .. }) if field == "timers"
        ));
    }

    #[test]
    fn empty_visit_is_rejected() {
        let text = r#"
            name = "x"
            [[farmers]]
            uid = "F1"
            [[relays]]
            id = "R1"
            [[relays.visits]]
            cluster = ["F1"]
            arrive = 100
            depart = 100
        "#;
        assert_eq!(
            load_scenario(text),
            Err(LoadError::OverlappingVisits { relay: "R1".into(), at: 100 })
        );
    }

    #[test]
    fn overlapping_visits_are_rejected() {
        let text = r#"
            name = "x"
            [[farmers]]
            uid = "F1"
            [[relays]]
            id = "R1"
            [[relays.visits]]
            cluster = ["F1"]
            arrive = 100
            depart = 300
            [[relays.visits]]
            cluster = ["F1"]
            arrive = 200
            depart = 400
        "#;
        assert_eq!(
            load_scenario(text),
            Err(LoadError::OverlappingVisits { relay: "R1".into(), at: 200 })
        );
        // Back-to-back is fine: windows are half-open.
        let ok = text.replace("arrive = 200", "arrive = 300");
        assert!(load_scenario(&ok).is_ok());
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let text = r#"
            name = "x"
            [[farmers]]
            uid = "F1"
            [[workload]]
            uid = "F9"
            at = 0
            photo_bytes = 100
        "#;
        assert!(matches!(load_scenario(text), Err(LoadError::UnknownId { id, .. }) if id == "F9"));
        let text = r#"
            name = "x"
            [[farmers]]
            uid = "F1"
            [[relays]]
            id = "R1"
            [[relays.visits]]
            cluster = ["F9"]
            arrive = 0
            depart = 100
        "#;
        assert!(matches!(load_scenario(text), Err(LoadError::UnknownId { id, .. }) if id == "F9"));
    }

    #[test]
    fn case_mismatch_is_rejected() {
        // Case A with a Poor-signal farmer contradicts the no-network label.
        let text = CASE_A.replace(r#"signal = [[0, "none"]]"#, r#"signal = [[0, "poor"]]"#);
        assert!(matches!(
            load_scenario(&text),
            Err(LoadError::CaseMismatch { case: CaseLabel::A, .. })
        ));
    }

    #[test]
    fn shared_device_resolves_to_owner() {
        let text = r#"
            name = "shared"
            [[farmers]]
            uid = "U1"
            signal = [[0, "none"], [5000, "good"]]
            [[farmers]]
            uid = "U2"
            shared_device = "U1"
        "#;
        let s = load_scenario(text).unwrap();
        let guest = s.farmer(&UserId::new("U2")).unwrap();
        assert_eq!(guest.device, DeviceId::new("U1"));
        assert!(!guest.owns_device);
        assert_eq!(guest.signal.level_at(6000), SignalLevel::Good, "inherits owner signal");
        let owner = s.device_owner(&DeviceId::new("U1")).unwrap();
        assert_eq!(owner.uid, UserId::new("U1"));

        let bad = text.replace(r#"shared_device = "U1""#, r#"shared_device = "U9""#);
        assert!(matches!(load_scenario(&bad), Err(LoadError::UnknownId { .. })));
    }

    #[test]
    fn signal_pattern_alternates_until_horizon() {
        let text = r#"
            name = "alternation"
            horizon = 30000
            [[farmers]]
            uid = "F1"
            signal_pattern = { start = "none", alternate = "good", dwell = 7200 }
        "#;
        let s = load_scenario(text).unwrap();
        let sig = &s.farmers[0].signal;
        assert_eq!(sig.level_at(0), SignalLevel::None);
        assert_eq!(sig.level_at(7199), SignalLevel::None);
        assert_eq!(sig.level_at(7200), SignalLevel::Good);
        assert_eq!(sig.level_at(7201), SignalLevel::Good);
        assert_eq!(sig.level_at(14400), SignalLevel::None);
    }

    #[test]
    fn visit_jitter_is_seeded_and_stable() {
        let text = r#"
            name = "jitter"
            seed = 11
            [[farmers]]
            uid = "F1"
            [[relays]]
            id = "R1"
            [relays.visit_pattern]
            cluster = ["F1"]
            start = 1000
            period = 10000
            dwell = 500
            count = 5
            jitter = 2000
        "#;
        let a = load_scenario(text).unwrap();
        let b = load_scenario(text).unwrap();
        assert_eq!(a.relays[0].visits, b.relays[0].visits, "same seed, same expansion");
        let jittered = a.relays[0].visits.iter().enumerate().any(|(i, v)| {
            v.arrive != 1000 + 10_000 * i as u64
        });
        assert!(jittered, "jitter moved at least one visit");
        let other_seed = load_scenario_with(
            text,
            &Overrides { seed: Some(12), ..Default::default() },
        )
        .unwrap();
        assert_ne!(a.relays[0].visits, other_seed.relays[0].visits);
    }

    #[test]
    fn overrides_take_precedence() {
        let s = load_scenario_with(
            CASE_A,
            &Overrides {
                seed: Some(99),
                until: Some(10_000),
                param: Some(("relay_capacity".into(), 2)),
            },
        )
        .unwrap();
        assert_eq!(s.seed, 99);
        assert_eq!(s.horizon, 10_000);
        assert_eq!(s.link.relay_capacity, 2);
        assert!(matches!(
            load_scenario_with(
                CASE_A,
                &Overrides { param: Some(("warp_factor".into(), 9)), ..Default::default() }
            ),
            Err(LoadError::BadValue { field, .. }) if field == "param"
        ));
    }

    #[test]
    fn sms_policies_parse() {
        let text = r#"
            name = "sms"
            [[farmers]]
            uid = "F1"
            sms = "never"
            [[farmers]]
            uid = "F2"
            sms = [[0, false], [7200, true]]
        "#;
        let s = load_scenario(text).unwrap();
        assert_eq!(s.farmers[0].sms, SmsPolicy::Never);
        let sched = &s.farmers[1].sms;
        assert!(!sched.reachable(SignalLevel::None, 7199));
        assert!(sched.reachable(SignalLevel::None, 7200), "schedule ignores data signal");
        // Auto follows the data signal.
        assert!(SmsPolicy::Auto.reachable(SignalLevel::Poor, 0));
        assert!(!SmsPolicy::Auto.reachable(SignalLevel::None, 0));
    }

    #[test]
    fn workload_must_fit_horizon_and_carry_payload() {
        let bad_at = CASE_A.replace("at = 0", "at = 200000");
        assert!(matches!(load_scenario(&bad_at), Err(LoadError::BadValue { .. })));
        let no_payload = CASE_A.replace("photo_bytes = 250000", "photo_bytes = 0");
        assert!(matches!(load_scenario(&no_payload), Err(LoadError::BadValue { .. })));
    }
}
