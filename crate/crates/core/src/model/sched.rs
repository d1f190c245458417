//! Per-callback scheduling attributes and their admission checks.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub const FIFO_PRIORITY_MIN: i32 = 1;
pub const FIFO_PRIORITY_MAX: i32 = 99;
pub const NICE_MIN: i32 = -20;
pub const NICE_MAX: i32 = 19;

/// Scheduler class and its class-specific parameters.
///
/// Linux ranks the classes `Deadline` > `FifoRt` > `Fair`: a runnable thread
/// of a higher class always preempts threads of the lower ones.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Policy {
    /// EDF with constant-bandwidth-server budgeting (`SCHED_DEADLINE`).
    Deadline {
        runtime_ns: u64,
        deadline_ns: u64,
        period_ns: u64,
    },
    /// Static-priority preemptive real-time class (`SCHED_FIFO`).
    FifoRt { priority: i32 },
    /// Fair-share class (`SCHED_OTHER`) biased by a nice value.
    Fair { nice: i32 },
}

impl Policy {
    pub fn class_name(&self) -> &'static str {
        match self {
            Policy::Deadline { .. } => "deadline",
            Policy::FifoRt { .. } => "fifo_rt",
            Policy::Fair { .. } => "fair",
        }
    }
}

/// Scheduling request for the thread that runs one callback.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchedAttr {
    #[serde(flatten)]
    pub policy: Policy,
    /// Allowed CPU cores. Empty means unrestricted.
    #[serde(default)]
    pub affinity: BTreeSet<usize>,
}

impl SchedAttr {
    pub fn deadline(runtime_ns: u64, deadline_ns: u64, period_ns: u64) -> Self {
        Self {
            policy: Policy::Deadline {
                runtime_ns,
                deadline_ns,
                period_ns,
            },
            affinity: BTreeSet::new(),
        }
    }

    pub fn fifo(priority: i32) -> Self {
        Self {
            policy: Policy::FifoRt { priority },
            affinity: BTreeSet::new(),
        }
    }

    pub fn fair(nice: i32) -> Self {
        Self {
            policy: Policy::Fair { nice },
            affinity: BTreeSet::new(),
        }
    }

    pub fn with_affinity(mut self, cores: impl IntoIterator<Item = usize>) -> Self {
        self.affinity = cores.into_iter().collect();
        self
    }
}

impl Default for SchedAttr {
    fn default() -> Self {
        Self::fair(0)
    }
}

/// One broken bound of a [`SchedAttr`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks `attr` against the admission shape of its class.
///
/// `core_count` is the number of cores on the enforcement target, when one
/// exists; affinity indices are only bounds-checked in that case.
pub fn validate_sched_attr(
    attr: &SchedAttr,
    core_count: Option<usize>,
) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |field: &'static str, message: String| out.push(Violation { field, message });

    match attr.policy {
        Policy::Deadline {
            runtime_ns,
            deadline_ns,
            period_ns,
        } => {
            if runtime_ns == 0 {
                push("runtime_ns", "runtime_ns must be > 0".into());
            }
            if runtime_ns > deadline_ns {
                push("runtime_ns", "runtime_ns > deadline_ns".into());
            }
            if deadline_ns > period_ns {
                push("deadline_ns", "deadline_ns > period_ns".into());
            }
        }
        Policy::FifoRt { priority } => {
            if priority < FIFO_PRIORITY_MIN {
                push("priority", format!("priority below {FIFO_PRIORITY_MIN}"));
            }
            if priority > FIFO_PRIORITY_MAX {
                push("priority", format!("priority above {FIFO_PRIORITY_MAX}"));
            }
        }
        Policy::Fair { nice } => {
            if nice < NICE_MIN {
                push("nice", format!("nice below {NICE_MIN}"));
            }
            if nice > NICE_MAX {
                push("nice", format!("nice above {NICE_MAX}"));
            }
        }
    }

    if let Some(cores) = core_count {
        for &core in &attr.affinity {
            if core >= cores {
                push(
                    "affinity",
                    format!("core {core} out of range (target has {cores} cores)"),
                );
            }
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MS: u64 = 1_000_000;

    #[test]
    fn deadline_in_cbs_shape_is_accepted() {
        assert!(validate_sched_attr(&SchedAttr::deadline(2 * MS, 8 * MS, 10 * MS), None).is_ok());
    }

    #[test]
    fn runtime_beyond_deadline_is_rejected() {
        let errs =
            validate_sched_attr(&SchedAttr::deadline(12 * MS, 8 * MS, 10 * MS), None).unwrap_err();
        assert!(
            errs.iter().any(|v| v.message == "runtime_ns > deadline_ns"),
            "{errs:?}"
        );
    }

    #[test]
    fn fifo_priority_zero_is_rejected() {
        let errs = validate_sched_attr(&SchedAttr::fifo(0), None).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "priority");
        assert_eq!(errs[0].message, "priority below 1");
    }

    #[test]
    fn affinity_checked_only_with_target() {
        let attr = SchedAttr::fair(0).with_affinity([2]);
        assert!(validate_sched_attr(&attr, None).is_ok());
        assert!(validate_sched_attr(&attr, Some(8)).is_ok());
        let errs = validate_sched_attr(&attr, Some(1)).unwrap_err();
        assert_eq!(errs[0].field, "affinity");
    }

    #[test]
    fn json_shape_is_flat() {
        let attr = SchedAttr::fifo(50).with_affinity([2]);
        let json = serde_json::to_value(&attr).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"policy": "fifo_rt", "priority": 50, "affinity": [2]})
        );
        let back: SchedAttr = serde_json::from_value(json).unwrap();
        assert_eq!(back, attr);
    }

    fn any_attr() -> impl Strategy<Value = SchedAttr> {
        let policy = prop_oneof![
            (0u64..40, 0u64..40, 0u64..40).prop_map(|(r, d, p)| Policy::Deadline {
                runtime_ns: r,
                deadline_ns: d,
                period_ns: p
            }),
            (-5i32..110).prop_map(|priority| Policy::FifoRt { priority }),
            (-30i32..30).prop_map(|nice| Policy::Fair { nice }),
        ];
        (policy, proptest::collection::btree_set(0usize..12, 0..4))
            .prop_map(|(policy, affinity)| SchedAttr { policy, affinity })
    }

    fn admissible(attr: &SchedAttr, cores: Option<usize>) -> bool {
        let class_ok = match attr.policy {
            Policy::Deadline {
                runtime_ns: r,
                deadline_ns: d,
                period_ns: p,
            } => 0 < r && r <= d && d <= p,
            Policy::FifoRt { priority } => (1..=99).contains(&priority),
            Policy::Fair { nice } => (-20..=19).contains(&nice),
        };
        let affinity_ok = cores.is_none_or(|c| attr.affinity.iter().all(|&i| i < c));
        class_ok && affinity_ok
    }

    proptest! {
        #[test]
        fn validator_matches_direct_predicate(attr in any_attr(), cores in proptest::option::of(1usize..10)) {
            prop_assert_eq!(validate_sched_attr(&attr, cores).is_ok(), admissible(&attr, cores));
        }
    }
}
