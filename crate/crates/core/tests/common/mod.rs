//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::time::Duration;

use isolexec::clock::Clock;
use isolexec::executors::Dispatcher;
use isolexec::model::{CallbackGroup, CallbackKind, CallbackSpec, NodeSpec, SystemDescription};
use isolexec::transport::Domain;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const TOPICS: usize = 3;
const START_NS: u64 = 1_000_000_000;

#[derive(Debug, Clone)]
pub enum SimKind {
    Timer { period_ns: u64, phase_ns: u64 },
    Subscription { topic: usize, depth: usize },
}

#[derive(Debug, Clone)]
pub struct SimCallback {
    pub kind: SimKind,
    /// Topics published after every execution.
    pub publishes: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum Event {
    Advance(u64),
    Publish(usize),
    Cycle,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub callbacks: Vec<SimCallback>,
    pub events: Vec<Event>,
}

fn topic(i: usize) -> String {
    format!("/t{i}")
}

impl Scenario {
    /// Up to `max_callbacks` callbacks and up to `max_events` events.
    /// Callbacks only publish to topics of later subscriptions, so the
    /// graph is acyclic.
    pub fn random(seed: u64, max_callbacks: usize, max_events: usize) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = rng.gen_range(1..=max_callbacks);
        let mut callbacks: Vec<SimCallback> = (0..n)
            .map(|_| {
                let kind = if rng.gen_bool(0.5) {
                    let period_ns = [3, 5, 7][rng.gen_range(0..3)] * 1_000_000;
                    SimKind::Timer {
                        period_ns,
                        phase_ns: rng.gen_range(0..period_ns / 1_000_000) * 1_000_000,
                    }
                } else {
                    SimKind::Subscription {
                        topic: rng.gen_range(0..TOPICS),
                        depth: rng.gen_range(1..=3),
                    }
                };
                SimCallback {
                    kind,
                    publishes: Vec::new(),
                }
            })
            .collect();
        for i in 0..n {
            let later: Vec<usize> = callbacks[i + 1..]
                .iter()
                .filter_map(|c| match c.kind {
                    SimKind::Subscription { topic, .. } => Some(topic),
                    SimKind::Timer { .. } => None,
                })
                .collect();
            if !later.is_empty() && rng.gen_bool(0.5) {
                callbacks[i]
                    .publishes
                    .push(later[rng.gen_range(0..later.len())]);
            }
        }
        // Publishing onto a topic an earlier callback subscribes would close a loop.
        for i in 0..n {
            let earlier: Vec<usize> = callbacks[..=i]
                .iter()
                .filter_map(|c| match c.kind {
                    SimKind::Subscription { topic, .. } => Some(topic),
                    SimKind::Timer { .. } => None,
                })
                .collect();
            callbacks[i].publishes.retain(|t| !earlier.contains(t));
        }
        let events = (0..rng.gen_range(1..=max_events))
            .map(|_| match rng.gen_range(0..3) {
                0 => Event::Advance(rng.gen_range(0..=12) * 1_000_000),
                1 => Event::Publish(rng.gen_range(0..TOPICS)),
                _ => Event::Cycle,
            })
            .collect();
        Scenario { callbacks, events }
    }

    pub fn system(&self) -> SystemDescription {
        let mut node = NodeSpec::new("sim");
        let mut groups = Vec::new();
        for (i, c) in self.callbacks.iter().enumerate() {
            let id = format!("cb{i}");
            let kind = match c.kind {
                SimKind::Timer {
                    period_ns,
                    phase_ns,
                } => CallbackKind::Timer {
                    period_ns,
                    phase_ns,
                },
                SimKind::Subscription { topic: t, depth } => CallbackKind::Subscription {
                    topic: topic(t),
                    depth: Some(depth),
                },
            };
            groups.push(CallbackGroup::new(format!("g{i}")));
            node = node.callback(CallbackSpec::new(&id, kind, format!("g{i}")));
            for &t in &c.publishes {
                node = node.publishes(&id, topic(t));
            }
        }
        let mut sys = SystemDescription {
            topics: (0..TOPICS).map(topic).collect(),
            groups,
            nodes: vec![node],
        };
        sys.normalize().expect("scenario system is valid");
        sys
    }
}

/// Brute-force model of one single-threaded wait-set cycle per `Cycle`
/// event. Returns the callback positions run by each cycle, in order.
pub fn simulate(s: &Scenario) -> Vec<Vec<usize>> {
    let mut now = START_NS;
    let mut next: Vec<u64> = s
        .callbacks
        .iter()
        .map(|c| match c.kind {
            SimKind::Timer {
                period_ns,
                phase_ns,
            } => START_NS + phase_ns + period_ns,
            SimKind::Subscription { .. } => u64::MAX,
        })
        .collect();
    let mut queues: Vec<VecDeque<()>> = vec![VecDeque::new(); s.callbacks.len()];
    let push = |queues: &mut Vec<VecDeque<()>>, t: usize| {
        for (i, c) in s.callbacks.iter().enumerate() {
            if let SimKind::Subscription { topic, depth } = c.kind {
                if topic == t {
                    if queues[i].len() == depth {
                        queues[i].pop_front();
                    }
                    queues[i].push_back(());
                }
            }
        }
    };
    let mut out = Vec::new();
    for ev in &s.events {
        match *ev {
            Event::Advance(d) => now += d,
            Event::Publish(t) => push(&mut queues, t),
            Event::Cycle => {
                let ready: Vec<bool> = s
                    .callbacks
                    .iter()
                    .enumerate()
                    .map(|(i, c)| match c.kind {
                        SimKind::Timer { .. } => next[i] <= now,
                        SimKind::Subscription { .. } => !queues[i].is_empty(),
                    })
                    .collect();
                let timers = (0..ready.len())
                    .filter(|&i| ready[i] && matches!(s.callbacks[i].kind, SimKind::Timer { .. }));
                let subs = (0..ready.len()).filter(|&i| {
                    ready[i] && matches!(s.callbacks[i].kind, SimKind::Subscription { .. })
                });
                let order: Vec<usize> = timers.chain(subs).collect();
                for &i in &order {
                    match s.callbacks[i].kind {
                        SimKind::Timer { period_ns, .. } => next[i] += period_ns,
                        SimKind::Subscription { .. } => {
                            queues[i].pop_front();
                        }
                    }
                    for &t in &s.callbacks[i].publishes {
                        push(&mut queues, t);
                    }
                }
                out.push(order);
            }
        }
    }
    out
}

/// Replays the scenario against the real dispatcher on a manual clock.
pub fn replay(s: &Scenario) -> Vec<Vec<usize>> {
    let sys = s.system();
    let domain = Domain::new();
    let clock = Clock::manual(START_NS);
    let mut d = Dispatcher::new(&sys, &domain, clock.clone(), 8).expect("dispatcher builds");
    let mut out = Vec::new();
    for ev in &s.events {
        match *ev {
            Event::Advance(ns) => clock.advance(Duration::from_nanos(ns)),
            Event::Publish(t) => {
                let id = domain.topic(&topic(t)).expect("topic registered");
                domain.publish(&id, &[0; 8]).expect("publish");
            }
            Event::Cycle => out.push(d.run_cycle()),
        }
    }
    out
}

/// Whether any two intervals overlap. Touching endpoints do not count.
pub fn any_overlap(intervals: &mut [(u64, u64)]) -> bool {
    intervals.sort_unstable();
    intervals.windows(2).any(|w| w[1].0 < w[0].1)
}

/// Least-squares slope and intercept of `y` over `x`.
pub fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
