//! Python bindings: load scenarios, run the simulator, and recompute
//! metrics from trace text. Everything returned is plain Python data
//! (strings, ints, floats, dicts, lists), so downstream analysis needs no
//! wrapper types.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use ruralsense::protocol::{QueryEvent, TimerConfig};
use ruralsense::scenario::Overrides;
use ruralsense::sim::Metrics;
use ruralsense::{load_scenario_with, parse_trace, simulate, DeviceId, EventId, PayloadDescriptor, UserId};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("queries_created", m.queries_created)?;
    d.set_item("delivered_to_server", m.delivered_to_server)?;
    d.set_item("never_delivered", m.never_delivered)?;
    d.set_item("duplicates_suppressed", m.duplicates_suppressed)?;
    d.set_item("acks_received", m.acks_received)?;
    d.set_item("responses_delivered_in_time", m.responses_delivered_in_time)?;
    d.set_item("late_responses", m.late_responses)?;
    d.set_item("discards", m.discards)?;
    d.set_item("retransmissions", m.retransmissions)?;
    d.set_item("rejected", m.rejected)?;
    d.set_item("in_flight_at_horizon", m.in_flight_at_horizon)?;
    d.set_item("delivery_ratio", m.delivery_ratio)?;
    d.set_item("ack_latency_count", m.ack_latency.count)?;
    d.set_item("ack_latency_mean", m.ack_latency.mean)?;
    d.set_item("ack_latency_p50", m.ack_latency.p50)?;
    d.set_item("ack_latency_p95", m.ack_latency.p95)?;
    d.set_item("ack_latency_max", m.ack_latency.max)?;
    d.set_item("response_latency_count", m.response_latency.count)?;
    d.set_item("response_latency_mean", m.response_latency.mean)?;
    d.set_item("response_latency_p50", m.response_latency.p50)?;
    d.set_item("response_latency_p95", m.response_latency.p95)?;
    d.set_item("response_latency_max", m.response_latency.max)?;
    Ok(d)
}

/// Parse and validate scenario TOML, returning its resolved shape.
#[pyfunction]
#[pyo3(signature = (text, seed=None, until=None))]
fn load_scenario<'py>(
    py: Python<'py>,
    text: &str,
    seed: Option<u64>,
    until: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let overrides = Overrides { seed, until, param: None };
    let s = load_scenario_with(text, &overrides).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("name", &s.name)?;
    d.set_item("case", s.case.map(|c| format!("{c:?}")))?;
    d.set_item("seed", s.seed)?;
    d.set_item("horizon", s.horizon)?;
    d.set_item("t_r", s.timers.t_r)?;
    d.set_item("t_d", s.timers.t_d)?;
    d.set_item("scan_period", s.timers.scan_period)?;
    let farmers = PyList::empty(py);
    for f in &s.farmers {
        let fd = PyDict::new(py);
        fd.set_item("uid", &f.uid.0)?;
        fd.set_item("device", &f.device.0)?;
        fd.set_item("owns_device", f.owns_device)?;
        farmers.append(fd)?;
    }
    d.set_item("farmers", farmers)?;
    d.set_item("relays", s.relays.iter().map(|r| r.id.0.clone()).collect::<Vec<_>>())?;
    d.set_item("queries", s.workload.len())?;
    Ok(d)
}

/// Run a scenario. Returns a dict with the full trace text, the metrics,
/// and each device's per-user mailboxes.
#[pyfunction]
#[pyo3(signature = (text, seed=None, until=None))]
fn run<'py>(
    py: Python<'py>,
    text: &str,
    seed: Option<u64>,
    until: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let overrides = Overrides { seed, until, param: None };
    let scenario = load_scenario_with(text, &overrides).map_err(value_err)?;
    let out = simulate(&scenario);

    let result = PyDict::new(py);
    result.set_item("trace", ruralsense::format_trace(&out.trace))?;
    result.set_item("metrics", metrics_dict(py, &out.metrics)?)?;

    let mailboxes = PyDict::new(py);
    for (device, node) in &out.farmers {
        let per_user = PyDict::new(py);
        for (uid, mailbox) in &node.mailboxes {
            let box_dict = PyDict::new(py);
            let entries = PyList::empty(py);
            for e in &mailbox.entries {
                let ed = PyDict::new(py);
                ed.set_item("eid", e.eid.0)?;
                ed.set_item("body", &e.body)?;
                ed.set_item("delivered_at", e.delivered_at)?;
                ed.set_item("read", e.read)?;
                entries.append(ed)?;
            }
            box_dict.set_item("responses", entries)?;
            let alerts = PyList::empty(py);
            for a in &mailbox.alerts {
                let ad = PyDict::new(py);
                ad.set_item("body", &a.body)?;
                ad.set_item("delivered_at", a.delivered_at)?;
                ad.set_item("read", a.read)?;
                alerts.append(ad)?;
            }
            box_dict.set_item("alerts", alerts)?;
            per_user.set_item(&uid.0, box_dict)?;
        }
        mailboxes.set_item(&device.0, per_user)?;
    }
    result.set_item("mailboxes", mailboxes)?;
    Ok(result)
}

/// Recompute metrics from trace text (as produced by `run`).
#[pyfunction]
fn collect_metrics<'py>(py: Python<'py>, trace: &str) -> PyResult<Bound<'py, PyDict>> {
    let records = parse_trace(trace).map_err(value_err)?;
    let m = ruralsense::collect_metrics(&records).map_err(value_err)?;
    metrics_dict(py, &m)
}

/// Ack and response deadlines for a query created at `created_at` whose
/// latest transmission attempt happened at `send_time`.
#[pyfunction]
#[pyo3(signature = (created_at, send_time, t_d=3600, t_r=86400))]
fn compute_deadlines(
    created_at: u64,
    send_time: u64,
    t_d: u64,
    t_r: u64,
) -> PyResult<(u64, u64)> {
    let cfg = TimerConfig { t_d, t_r, ..TimerConfig::default() };
    cfg.validate().map_err(value_err)?;
    let event = QueryEvent {
        eid: EventId(1),
        uid: UserId::new("_"),
        logical_device: DeviceId::new("_"),
        created_at,
        payload: PayloadDescriptor {
            photo_bytes: 1,
            voice_bytes: 0,
            labels: vec![],
            geotag: (0.0, 0.0),
        },
    };
    Ok(ruralsense::compute_deadlines(&event, send_time, &cfg))
}

/// Whole seconds to move `bytes` at `bytes_per_second` (ceiling, minimum
/// one second for any non-empty payload).
#[pyfunction]
fn transfer_time(bytes: u64, bytes_per_second: u64) -> u64 {
    ruralsense::transfer_time(bytes, bytes_per_second)
}

#[pymodule]
fn ruralsense_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(collect_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compute_deadlines, m)?)?;
    m.add_function(wrap_pyfunction!(transfer_time, m)?)?;
    Ok(())
}
