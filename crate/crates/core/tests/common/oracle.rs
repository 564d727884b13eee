//! Exhaustive check of the two-stream list scheduler on small random traces.

use madmax::cost::CostKind;
use madmax::model::CollectiveKind;
use madmax::plan::Phase;
use madmax::sim::simulate;
use madmax::trace::{DeviceTrace, Event, EventLabel, Op, Stream};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

#[derive(Clone, Debug)]
pub struct Shape {
    /// (on comm stream, integer duration, dependency mask over earlier positions)
    pub events: Vec<(bool, u8, u16)>,
    /// Random relabeling so ids are not topologically sorted.
    pub ids: Vec<usize>,
}

pub fn shape() -> impl Strategy<Value = Shape> {
    (1usize..=10)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((any::<bool>(), 0u8..=20, any::<u16>()), n),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            )
        })
        .prop_map(|(events, ids)| Shape { events, ids })
}

pub fn build(shape: &Shape) -> DeviceTrace {
    let n = shape.events.len();
    let mut events: Vec<Option<Event>> = vec![None; n];
    let mut compute_order = Vec::new();
    let mut comm_order = Vec::new();
    for (pos, &(comm, dur, mask)) in shape.events.iter().enumerate() {
        let id = shape.ids[pos];
        // A second mask bit thins the edges out.
        let deps: Vec<usize> = (0..pos)
            .filter(|&p| mask & (1 << p) != 0 && (mask >> (p + 5)) & 1 == 0)
            .map(|p| shape.ids[p])
            .collect();
        let (stream, kind, op) = if comm {
            comm_order.push(id);
            (
                Stream::Comm,
                CostKind::Collective(CollectiveKind::AllReduce),
                Op::Collective(CollectiveKind::AllReduce),
            )
        } else {
            compute_order.push(id);
            (Stream::Compute, CostKind::Compute, Op::Forward)
        };
        events[id] = Some(Event {
            id,
            stream,
            duration: dur as f64,
            deps,
            blocking: false,
            kind,
            magnitude: 0.0,
            label: EventLabel {
                layer: format!("e{id}"),
                unit: 0,
                phase: Phase::Forward,
                op,
            },
        });
    }
    DeviceTrace {
        events: events.into_iter().map(Option::unwrap).collect(),
        compute_order,
        comm_order,
    }
}

struct Search<'a> {
    trace: &'a DeviceTrace,
    end: Vec<Option<f64>>,
    best: f64,
    worst: f64,
    leaves: usize,
}

impl Search<'_> {
    /// Every dispatch sequence that respects both issue orders and all deps.
    fn dfs(&mut self, head: [usize; 2], free: [f64; 2]) {
        let orders = [&self.trace.compute_order, &self.trace.comm_order];
        if head[0] == orders[0].len() && head[1] == orders[1].len() {
            let makespan = self.end.iter().map(|e| e.unwrap()).fold(0.0, f64::max);
            self.best = self.best.min(makespan);
            self.worst = self.worst.max(makespan);
            self.leaves += 1;
            return;
        }
        for s in 0..2 {
            let Some(&id) = orders[s].get(head[s]) else { continue };
            let e = &self.trace.events[id];
            if e.deps.iter().any(|&d| self.end[d].is_none()) {
                continue;
            }
            let ready = e.deps.iter().map(|&d| self.end[d].unwrap()).fold(0.0, f64::max);
            let finish = free[s].max(ready) + e.duration;
            self.end[id] = Some(finish);
            let mut h = head;
            h[s] += 1;
            let mut f = free;
            f[s] = finish;
            self.dfs(h, f);
            self.end[id] = None;
        }
    }
}

pub fn brute_force(trace: &DeviceTrace) -> (f64, f64, usize) {
    let mut s = Search {
        trace,
        end: vec![None; trace.events.len()],
        best: f64::INFINITY,
        worst: 0.0,
        leaves: 0,
    };
    s.dfs([0, 0], [0.0, 0.0]);
    (s.best, s.worst, s.leaves)
}

/// Compares `simulate` against every legal dispatch sequence for `cases`
/// random traces. Returns how many traces had more than one sequence.
pub fn check(cases: usize) -> Result<usize, String> {
    let mut runner = TestRunner::deterministic();
    let strategy = shape();
    let mut multi_leaf = 0;
    for case in 0..cases {
        let shape = strategy.new_tree(&mut runner).unwrap().current();
        let trace = build(&shape);
        let timeline = simulate(&trace).map_err(|e| format!("case {case}: {e}"))?;
        let (best, worst, leaves) = brute_force(&trace);
        if leaves == 0 {
            return Err(format!("case {case}: no legal dispatch sequence"));
        }
        if timeline.makespan != best {
            return Err(format!("case {case}: simulate {} vs exhaustive {best}: {shape:?}", timeline.makespan));
        }
        if best != worst {
            return Err(format!("case {case}: dispatch order changed the makespan"));
        }
        if leaves > 1 {
            multi_leaf += 1;
        }
        for e in &timeline.events {
            let src = &trace.events[e.id];
            if e.end - e.start != src.duration {
                return Err(format!("case {case}: event {} has the wrong length", e.id));
            }
            if let Some(d) = src.deps.iter().find(|&&d| timeline.events[d].end > e.start) {
                return Err(format!("case {case}: dep {d} of {} violated", e.id));
            }
        }
        for stream in [Stream::Compute, Stream::Comm] {
            for w in trace.order(stream).windows(2) {
                if timeline.events[w[0]].end > timeline.events[w[1]].start {
                    return Err(format!("case {case}: stream overlap at {}", w[1]));
                }
            }
        }
    }
    Ok(multi_leaf)
}
