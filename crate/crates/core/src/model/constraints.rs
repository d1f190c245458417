//! Static checks for the two constraints callback-isolated execution relies on:
//! one callback per group, and no callback that can become ready again before
//! its previous execution finishes.

use std::fmt;

use serde::Serialize;

use super::{CallbackGraph, CallbackKind, SystemDescription};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintViolation {
    SharedGroup {
        group: String,
        members: Vec<String>,
    },
    /// The declared WCET is not below the callback's minimum inter-arrival time.
    PossibleOverrun {
        callback: String,
        wcet_hint_ns: u64,
        min_inter_arrival_ns: u64,
    },
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintViolation::SharedGroup { group, members } => {
                write!(f, "group {group} has {} members ({})", members.len(), members.join(", "))
            }
            ConstraintViolation::PossibleOverrun {
                callback,
                wcet_hint_ns,
                min_inter_arrival_ns,
            } => write!(
                f,
                "possible reentrancy/overrun: {callback} wcet hint {wcet_hint_ns} ns >= minimum inter-arrival {min_inter_arrival_ns} ns"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConstraintReport {
    pub violations: Vec<ConstraintViolation>,
    /// Minimum inter-arrival time per graph vertex, when one can be derived.
    #[serde(skip)]
    pub min_inter_arrival_ns: Vec<Option<u64>>,
}

impl ConstraintReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn shared_groups(&self) -> impl Iterator<Item = &ConstraintViolation> {
        self.violations
            .iter()
            .filter(|v| matches!(v, ConstraintViolation::SharedGroup { .. }))
    }
}

/// Reports groups with more than one member and callbacks whose declared
/// WCET reaches their minimum inter-arrival time.
///
/// A timer's inter-arrival time is its period. A subscription inherits the
/// smallest inter-arrival time among its direct predecessors, which pulls the
/// upstream timer periods down the chain. Callbacks with no timer upstream,
/// or without a `wcet_hint_ns`, are left to runtime overrun detection.
pub fn validate_isolation_constraints(
    sys: &SystemDescription,
    graph: &CallbackGraph,
) -> ConstraintReport {
    let mut violations = Vec::new();
    for g in &sys.groups {
        if g.members.len() > 1 {
            violations.push(ConstraintViolation::SharedGroup {
                group: g.id.clone(),
                members: g.members.clone(),
            });
        }
    }

    let specs: Vec<_> = graph
        .vertices
        .iter()
        .map(|id| sys.callback(id).expect("graph built from this description"))
        .collect();
    let mut ia: Vec<Option<u64>> = vec![None; specs.len()];
    for &v in &graph.topo_order {
        ia[v] = match specs[v].kind {
            CallbackKind::Timer { period_ns, .. } => Some(period_ns),
            CallbackKind::Subscription { .. } => graph.predecessors(v).filter_map(|p| ia[p]).min(),
        };
    }

    for (v, spec) in specs.iter().enumerate() {
        if let (Some(wcet), Some(min_ia)) = (spec.wcet_hint_ns, ia[v]) {
            if wcet >= min_ia {
                violations.push(ConstraintViolation::PossibleOverrun {
                    callback: spec.id.clone(),
                    wcet_hint_ns: wcet,
                    min_inter_arrival_ns: min_ia,
                });
            }
        }
    }

    ConstraintReport {
        violations,
        min_inter_arrival_ns: ia,
    }
}
