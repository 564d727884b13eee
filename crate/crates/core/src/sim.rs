//! Event-driven two-stream scheduler, exposed-communication accounting and
//! Chrome trace export.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cost::CostKind;
use crate::error::{Error, Result};
use crate::model::CollectiveKind;
use crate::trace::{DeviceTrace, EventLabel, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    pub id: usize,
    pub stream: Stream,
    pub start: f64,
    pub end: f64,
    pub kind: CostKind,
    pub blocking: bool,
    pub label: EventLabel,
}

impl ScheduledEvent {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    /// Indexed by event id.
    pub events: Vec<ScheduledEvent>,
    pub makespan: f64,
}

impl Timeline {
    /// Merged busy intervals of one stream.
    pub fn busy(&self, stream: Stream) -> Vec<(f64, f64)> {
        let mut iv: Vec<(f64, f64)> = self
            .events
            .iter()
            .filter(|e| e.stream == stream && e.end > e.start)
            .map(|e| (e.start, e.end))
            .collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
        for (s, e) in iv {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        merged
    }

    pub fn stream_time(&self, stream: Stream) -> f64 {
        self.events
            .iter()
            .filter(|e| e.stream == stream)
            .map(ScheduledEvent::duration)
            .sum()
    }
}

fn check_acyclic(trace: &DeviceTrace) -> Result<()> {
    let n = trace.events.len();
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for e in &trace.events {
        for &d in &e.deps {
            if d >= n {
                return Err(Error::invalid("trace", format!("event {} depends on unknown event {d}", e.id)));
            }
            indegree[e.id] += 1;
            children[d].push(e.id);
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop_front() {
        seen += 1;
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    match (0..n).find(|&i| indegree[i] > 0) {
        Some(event) if seen < n => Err(Error::Cycle { event }),
        _ => Ok(()),
    }
}

/// List-schedules each stream in issue order: an event starts once its
/// stream is free and every dependency has finished.
pub fn simulate(trace: &DeviceTrace) -> Result<Timeline> {
    for (i, e) in trace.events.iter().enumerate() {
        if e.id != i || e.duration.is_nan() || e.duration < 0.0 {
            return Err(Error::invalid("trace", format!("event {i} has a bad id or duration")));
        }
    }
    check_acyclic(trace)?;
    let n = trace.events.len();
    let orders = [trace.order(Stream::Compute), trace.order(Stream::Comm)];
    if orders.iter().map(|o| o.len()).sum::<usize>() != n {
        return Err(Error::invalid("trace", "issue orders do not cover every event exactly once"));
    }

    let mut end: Vec<Option<f64>> = vec![None; n];
    let mut start = vec![0.0; n];
    let mut head = [0usize; 2];
    let mut free = [0.0f64; 2];
    let mut done = 0;
    while done < n {
        let mut progressed = false;
        for s in 0..2 {
            while let Some(&id) = orders[s].get(head[s]) {
                let e = &trace.events[id];
                if e.stream != [Stream::Compute, Stream::Comm][s] {
                    return Err(Error::invalid("trace", format!("event {id} issued on the wrong stream")));
                }
                let Some(ready) = e.deps.iter().try_fold(0.0f64, |acc, &d| end[d].map(|t| acc.max(t))) else {
                    break;
                };
                start[id] = free[s].max(ready);
                let t = start[id] + e.duration;
                end[id] = Some(t);
                free[s] = t;
                head[s] += 1;
                done += 1;
                progressed = true;
            }
        }
        if !progressed {
            // Stream heads wait on each other: issue order contradicts deps.
            let stuck = orders.iter().zip(head).filter_map(|(o, h)| o.get(h)).copied().min().unwrap_or(0);
            return Err(Error::Cycle { event: stuck });
        }
    }

    let events: Vec<ScheduledEvent> = trace
        .events
        .iter()
        .map(|e| ScheduledEvent {
            id: e.id,
            stream: e.stream,
            start: start[e.id],
            end: end[e.id].expect("all events scheduled"),
            kind: e.kind,
            blocking: e.blocking,
            label: e.label.clone(),
        })
        .collect();
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    Ok(Timeline { events, makespan })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExposedComm {
    pub total: f64,
    pub by_event: BTreeMap<usize, f64>,
    pub by_collective: BTreeMap<CollectiveKind, f64>,
}

fn overlap_with(intervals: &[(f64, f64)], s: f64, e: f64) -> f64 {
    intervals
        .iter()
        .map(|&(a, b)| (b.min(e) - a.max(s)).max(0.0))
        .sum()
}

/// Time the communication stream is busy while the compute stream idles,
/// attributed to the collective running in each such interval.
pub fn exposed_comm(timeline: &Timeline) -> ExposedComm {
    let compute = timeline.busy(Stream::Compute);
    let mut out = ExposedComm::default();
    for e in timeline.events.iter().filter(|e| e.stream == Stream::Comm) {
        let exposed = (e.duration() - overlap_with(&compute, e.start, e.end)).max(0.0);
        if exposed > 0.0 {
            out.total += exposed;
            out.by_event.insert(e.id, exposed);
            if let CostKind::Collective(k) = e.kind {
                *out.by_collective.entry(k).or_insert(0.0) += exposed;
            }
        }
    }
    out
}

/// Writes the timeline in Chrome Trace Event format: one process with
/// "compute" and "comm" threads, timestamps in microseconds.
pub fn write_chrome_trace<W: Write>(timeline: &Timeline, out: W) -> Result<()> {
    let tid = |s: Stream| match s {
        Stream::Compute => 1,
        Stream::Comm => 2,
    };
    let mut events = vec![
        json!({"name": "process_name", "ph": "M", "pid": 1, "tid": 0, "args": {"name": "device 0"}}),
        json!({"name": "thread_name", "ph": "M", "pid": 1, "tid": 1, "args": {"name": "compute"}}),
        json!({"name": "thread_name", "ph": "M", "pid": 1, "tid": 2, "args": {"name": "comm"}}),
    ];
    for e in &timeline.events {
        events.push(json!({
            "name": e.label.name(),
            "cat": e.kind.label(),
            "ph": "X",
            "ts": e.start * 1e6,
            "dur": e.duration() * 1e6,
            "pid": 1,
            "tid": tid(e.stream),
            "args": {"layer": e.label.layer, "unit": e.label.unit, "blocking": e.blocking},
        }));
    }
    serde_json::to_writer_pretty(out, &json!({"traceEvents": events, "displayTimeUnit": "ms"}))?;
    Ok(())
}
