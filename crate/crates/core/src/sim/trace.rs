//! Timelines and their Chrome trace / CSV exports.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::io;
use std::path::Path;

/// One busy interval of one resource. Times are in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub rank: usize,
    /// `sm{i}`, `comm:{backend}` or `launch`.
    pub lane: String,
    pub label: String,
    pub start_us: f64,
    pub dur_us: f64,
}

impl TimelineEvent {
    pub fn end_us(&self) -> f64 {
        self.start_us + self.dur_us
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub events: Vec<TimelineEvent>,
    pub makespan_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub resource: String,
    pub busy_us: f64,
    pub idle_us: f64,
    pub utilization: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed trace: {0}")]
    Format(String),
}

impl Timeline {
    /// Events sorted by resource then start; makespan is the latest end.
    pub fn new(mut events: Vec<TimelineEvent>) -> Self {
        events.sort_by(|a, b| {
            (a.rank, &a.lane)
                .cmp(&(b.rank, &b.lane))
                .then(a.start_us.total_cmp(&b.start_us))
                .then(a.label.cmp(&b.label))
        });
        let makespan_us = events.iter().map(TimelineEvent::end_us).fold(0.0, f64::max);
        Timeline {
            events,
            makespan_us,
        }
    }

    pub fn resources(&self) -> BTreeMap<(usize, String), Vec<&TimelineEvent>> {
        let mut m: BTreeMap<(usize, String), Vec<&TimelineEvent>> = BTreeMap::new();
        for e in &self.events {
            m.entry((e.rank, e.lane.clone())).or_default().push(e);
        }
        m
    }

    /// Busy time per resource over the makespan.
    pub fn usage(&self) -> Vec<ResourceUsage> {
        self.resources()
            .into_iter()
            .map(|((rank, lane), evs)| {
                let busy: f64 = evs.iter().map(|e| e.dur_us).sum();
                let span = self.makespan_us;
                ResourceUsage {
                    resource: format!("rank{rank}/{lane}"),
                    busy_us: busy,
                    idle_us: (span - busy).max(0.0),
                    utilization: if span > 0.0 { busy / span } else { 0.0 },
                }
            })
            .collect()
    }

    /// Overlapping intervals on one resource, as `(resource, label, label)`.
    pub fn overlaps(&self) -> Vec<(String, String, String)> {
        let mut out = Vec::new();
        for ((rank, lane), mut evs) in self.resources() {
            evs.sort_by(|a, b| a.start_us.total_cmp(&b.start_us));
            for pair in evs.windows(2) {
                let tol = 1e-9 * pair[0].end_us().abs().max(1.0);
                if pair[1].start_us < pair[0].end_us() - tol {
                    out.push((
                        format!("rank{rank}/{lane}"),
                        pair[0].label.clone(),
                        pair[1].label.clone(),
                    ));
                }
            }
        }
        out
    }

    /// Average busy fraction of the `sm*` lanes, counting `sms` SMs per rank.
    pub fn sm_utilization(&self, ranks: usize, sms: usize) -> f64 {
        if self.makespan_us <= 0.0 || ranks * sms == 0 {
            return 0.0;
        }
        let busy: f64 = self
            .events
            .iter()
            .filter(|e| e.lane.starts_with("sm"))
            .map(|e| e.dur_us)
            .sum();
        busy / (self.makespan_us * (ranks * sms) as f64)
    }
}

fn lane_ids(t: &Timeline) -> BTreeMap<(usize, &str), usize> {
    let mut ids = BTreeMap::new();
    let mut next: BTreeMap<usize, usize> = BTreeMap::new();
    for e in &t.events {
        ids.entry((e.rank, e.lane.as_str())).or_insert_with(|| {
            let n = next.entry(e.rank).or_insert(0);
            *n += 1;
            *n - 1
        });
    }
    ids
}

/// Chrome Trace Event Format: one complete (`X`) event per interval and a
/// `thread_name` metadata record per lane.
pub fn trace_json(t: &Timeline) -> String {
    let ids = lane_ids(t);
    let mut events: Vec<Value> = ids
        .iter()
        .map(|((rank, lane), tid)| {
            json!({"name": "thread_name", "ph": "M", "pid": rank, "tid": tid, "args": {"name": lane}})
        })
        .collect();
    for e in &t.events {
        events.push(json!({
            "name": e.label,
            "ph": "X",
            "ts": e.start_us,
            "dur": e.dur_us,
            "pid": e.rank,
            "tid": ids[&(e.rank, e.lane.as_str())],
        }));
    }
    let doc = json!({"traceEvents": events, "displayTimeUnit": "ns"});
    serde_json::to_string_pretty(&doc).expect("trace serializes")
}

pub fn parse_trace(text: &str) -> Result<Timeline, TraceError> {
    let bad = |m: &str| TraceError::Format(m.to_string());
    let doc: Value = serde_json::from_str(text).map_err(|e| TraceError::Format(e.to_string()))?;
    let events = doc
        .get("traceEvents")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("no traceEvents array"))?;
    let mut lanes: BTreeMap<(u64, u64), String> = BTreeMap::new();
    for e in events {
        if e.get("ph").and_then(Value::as_str) == Some("M")
            && e.get("name").and_then(Value::as_str) == Some("thread_name")
        {
            let pid = e
                .get("pid")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad("metadata without pid"))?;
            let tid = e
                .get("tid")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad("metadata without tid"))?;
            let name = e
                .pointer("/args/name")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("thread_name without args.name"))?;
            lanes.insert((pid, tid), name.to_string());
        }
    }
    let mut out = Vec::new();
    for e in events {
        if e.get("ph").and_then(Value::as_str) != Some("X") {
            continue;
        }
        let num = |k: &str| {
            e.get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| bad(&format!("X event without {k}")))
        };
        let pid = e
            .get("pid")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("X event without pid"))?;
        let tid = e
            .get("tid")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("X event without tid"))?;
        let lane = lanes
            .get(&(pid, tid))
            .cloned()
            .unwrap_or_else(|| format!("tid{tid}"));
        out.push(TimelineEvent {
            rank: pid as usize,
            lane,
            label: e
                .get("name")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            start_us: num("ts")?,
            dur_us: num("dur")?,
        });
    }
    Ok(Timeline::new(out))
}

pub fn summary_csv(t: &Timeline) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["resource", "busy", "idle", "utilization"])
        .expect("in-memory csv");
    for u in t.usage() {
        w.write_record([
            u.resource,
            format!("{:.6}", u.busy_us),
            format!("{:.6}", u.idle_us),
            format!("{:.6}", u.utilization),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

fn write(path: &Path, text: &str) -> Result<(), TraceError> {
    std::fs::write(path, text).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write `trace` as Chrome JSON to `path` and the CSV summary next to it
/// (same stem, `.csv`).
pub fn export_trace(t: &Timeline, path: &Path) -> Result<(), TraceError> {
    write(path, &trace_json(t))?;
    write(&path.with_extension("csv"), &summary_csv(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(rank: usize, lane: &str, label: &str, start: f64, dur: f64) -> TimelineEvent {
        TimelineEvent {
            rank,
            lane: lane.into(),
            label: label.into(),
            start_us: start,
            dur_us: dur,
        }
    }

    #[test]
    fn empty_timeline_exports_zero_events() {
        let t = Timeline::new(Vec::new());
        let text = trace_json(&t);
        let doc: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["traceEvents"].as_array().unwrap().len(), 0);
        assert_eq!(parse_trace(&text).unwrap(), t);
    }

    #[test]
    fn three_events_become_three_complete_records() {
        let t = Timeline::new(vec![
            ev(0, "sm0", "t0", 0.0, 1.5),
            ev(0, "comm:copy_engine", "op0.0", 0.25, 3.0),
            ev(1, "sm0", "t0", 0.0, 1.5),
        ]);
        let text = trace_json(&t);
        assert_eq!(text.matches("\"ph\": \"X\"").count(), 3);
        let doc: Value = serde_json::from_str(&text).unwrap();
        let x: Vec<&Value> = doc["traceEvents"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|e| e["ph"] == "X")
            .collect();
        for k in ["name", "ph", "ts", "dur", "pid", "tid"] {
            assert!(x.iter().all(|e| e.get(k).is_some()), "missing {k}");
        }
        assert_eq!(t.makespan_us, 3.25);
    }

    #[test]
    fn summary_columns() {
        let t = Timeline::new(vec![
            ev(0, "sm0", "t0", 0.0, 1.0),
            ev(0, "sm1", "t1", 0.0, 2.0),
        ]);
        let csv = summary_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "resource,busy,idle,utilization");
        assert_eq!(lines[1], "rank0/sm0,1.000000,1.000000,0.500000");
        assert_eq!(lines[2], "rank0/sm1,2.000000,0.000000,1.000000");
    }

    #[test]
    fn overlap_detection() {
        let t = Timeline::new(vec![
            ev(0, "sm0", "a", 0.0, 2.0),
            ev(0, "sm0", "b", 1.0, 2.0),
        ]);
        assert_eq!(t.overlaps().len(), 1);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            raw in proptest::collection::vec((0usize..4, 0usize..5, 0.0f64..1e4, 0.0f64..1e3), 0..30)
        ) {
            let lanes = ["sm0", "sm1", "comm:copy_engine", "comm:ldst_specialized", "launch"];
            let evs: Vec<TimelineEvent> = raw
                .iter()
                .enumerate()
                .map(|(i, &(r, l, s, d))| ev(r, lanes[l], &format!("t{i}"), s, d))
                .collect();
            let t = Timeline::new(evs);
            let back = parse_trace(&trace_json(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
