//! Domain types for callbacks, groups, nodes and topics, plus the loaders and
//! validators for system description files.
//!
//! A system description is a JSON document:
//!
//! ```json
//! {
//!   "topics": ["/x"],
//!   "groups": [
//!     {"id": "g_pub", "mutually_exclusive": true, "members": ["pub"]},
//!     {"id": "g_sub", "mutually_exclusive": true, "members": ["sub"]}
//!   ],
//!   "nodes": [
//!     {"id": "talker",
//!      "callbacks": [{"id": "pub", "group": "g_pub",
//!                     "kind": {"type": "timer", "period_ns": 10000000}}],
//!      "publications": [{"callback": "pub", "topic": "/x"}]},
//!     {"id": "listener",
//!      "callbacks": [{"id": "sub", "group": "g_sub",
//!                     "kind": {"type": "subscription", "topic": "/x"},
//!                     "wcet_hint_ns": 1000000}]}
//!   ]
//! }
//! ```
//!
//! `members` may be omitted, in which case it is derived from the callbacks'
//! `group` fields. `handler` defaults to zero busy-work and `sched` to none.

mod constraints;
mod graph;
mod sched;

pub use constraints::{validate_isolation_constraints, ConstraintReport, ConstraintViolation};
pub use graph::{
    build_graph, CallbackGraph, DanglingTopicPolicy, GraphError, GraphOptions, GraphWarning,
};
pub use sched::{
    validate_sched_attr, Policy, SchedAttr, Violation, FIFO_PRIORITY_MAX, FIFO_PRIORITY_MIN,
    NICE_MAX, NICE_MIN,
};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::Message;

/// What makes a callback ready.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CallbackKind {
    Timer {
        period_ns: u64,
        /// Offset of the first expiry relative to executor start, on top of
        /// one period.
        #[serde(default, skip_serializing_if = "is_zero")]
        phase_ns: u64,
    },
    Subscription {
        topic: String,
        /// Subscription queue capacity; the transport default applies when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depth: Option<usize>,
    },
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl CallbackKind {
    pub fn timer(period_ns: u64) -> Self {
        CallbackKind::Timer {
            period_ns,
            phase_ns: 0,
        }
    }

    pub fn subscription(topic: impl Into<String>) -> Self {
        CallbackKind::Subscription {
            topic: topic.into(),
            depth: None,
        }
    }

    pub fn is_timer(&self) -> bool {
        matches!(self, CallbackKind::Timer { .. })
    }
}

/// Arguments handed to a user handler on each execution.
pub struct Invocation<'a> {
    pub callback: &'a str,
    /// The message taken from the subscription queue, for subscriptions.
    pub message: Option<&'a Message>,
    /// Monotonic time at which the execution started.
    pub started_ns: u64,
}

type HandlerFn = dyn Fn(&Invocation<'_>) + Send + Sync;

/// A user-supplied handler function.
#[derive(Clone)]
pub struct CustomHandler(pub Arc<HandlerFn>);

impl CustomHandler {
    pub fn new(f: impl Fn(&Invocation<'_>) + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
}

impl fmt::Debug for CustomHandler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomHandler(..)")
    }
}

/// The work a callback performs when executed. After the handler returns,
/// the executor publishes one message on each of the callback's publications.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Handler {
    /// Spin on the CPU for the given duration.
    BusyWork { duration_ns: u64 },
    #[serde(skip)]
    Custom(CustomHandler),
}

impl Default for Handler {
    fn default() -> Self {
        Handler::BusyWork { duration_ns: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallbackSpec {
    pub id: String,
    pub kind: CallbackKind,
    pub group: String,
    #[serde(default)]
    pub handler: Handler,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sched: Option<SchedAttr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wcet_hint_ns: Option<u64>,
}

impl CallbackSpec {
    pub fn new(id: impl Into<String>, kind: CallbackKind, group: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind,
            group: group.into(),
            handler: Handler::default(),
            sched: None,
            wcet_hint_ns: None,
        }
    }

    pub fn with_handler(mut self, handler: Handler) -> Self {
        self.handler = handler;
        self
    }

    pub fn with_sched(mut self, sched: SchedAttr) -> Self {
        self.sched = Some(sched);
        self
    }

    pub fn with_wcet_hint(mut self, ns: u64) -> Self {
        self.wcet_hint_ns = Some(ns);
        self
    }
}

/// Set of callbacks that never execute in parallel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallbackGroup {
    pub id: String,
    #[serde(default = "default_true")]
    pub mutually_exclusive: bool,
    #[serde(default)]
    pub members: Vec<String>,
}

fn default_true() -> bool {
    true
}

impl CallbackGroup {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            mutually_exclusive: true,
            members: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Publication {
    pub callback: String,
    pub topic: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default)]
    pub callbacks: Vec<CallbackSpec>,
    #[serde(default)]
    pub publications: Vec<Publication>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn callback(mut self, cb: CallbackSpec) -> Self {
        self.callbacks.push(cb);
        self
    }

    pub fn publishes(mut self, callback: impl Into<String>, topic: impl Into<String>) -> Self {
        self.publications.push(Publication {
            callback: callback.into(),
            topic: topic.into(),
        });
        self
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed system description: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate {what} id {id:?}")]
    DuplicateId { what: &'static str, id: String },
    #[error("callback {callback:?} references unknown group {group:?}")]
    UnknownGroup { callback: String, group: String },
    #[error("{context} references undeclared topic {topic:?}")]
    UndeclaredTopic { context: String, topic: String },
    #[error("publication in node {node:?} names unknown callback {callback:?}")]
    UnknownPublisher { node: String, callback: String },
    #[error("timer {0:?} has a zero period")]
    ZeroPeriod(String),
    #[error("group {group:?} lists members {listed:?} but callbacks {actual:?} reference it")]
    MembershipMismatch {
        group: String,
        listed: Vec<String>,
        actual: Vec<String>,
    },
    #[error("group {0:?} is not mutually exclusive; reentrant groups are not supported")]
    ReentrantGroup(String),
}

/// A whole process graph: topics, callback groups and nodes.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SystemDescription {
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default)]
    pub groups: Vec<CallbackGroup>,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
}

impl SystemDescription {
    /// Parses and checks a description. Group members are derived when omitted.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let mut sys: SystemDescription = serde_json::from_str(text)?;
        sys.normalize()?;
        Ok(sys)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("system description serializes")
    }

    /// Iterates callbacks in registration order (node order, then declaration order).
    pub fn callbacks(&self) -> impl Iterator<Item = &CallbackSpec> {
        self.nodes.iter().flat_map(|n| n.callbacks.iter())
    }

    pub fn callback(&self, id: &str) -> Option<&CallbackSpec> {
        self.callbacks().find(|c| c.id == id)
    }

    pub fn group(&self, id: &str) -> Option<&CallbackGroup> {
        self.groups.iter().find(|g| g.id == id)
    }

    /// Topics published by `callback`, in declaration order.
    pub fn publications_of<'a>(&'a self, callback: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.nodes
            .iter()
            .flat_map(|n| n.publications.iter())
            .filter(move |p| p.callback == callback)
            .map(|p| p.topic.as_str())
    }

    /// Checks structural invariants and fills in derived group membership.
    pub fn normalize(&mut self) -> Result<(), ModelError> {
        let mut seen = HashSet::new();
        for t in &self.topics {
            if !seen.insert(t.as_str()) {
                return Err(ModelError::DuplicateId {
                    what: "topic",
                    id: t.clone(),
                });
            }
        }
        let topics: HashSet<&str> = self.topics.iter().map(String::as_str).collect();

        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(ModelError::DuplicateId {
                    what: "node",
                    id: n.id.clone(),
                });
            }
        }

        let mut seen = HashSet::new();
        for g in &self.groups {
            if !seen.insert(g.id.as_str()) {
                return Err(ModelError::DuplicateId {
                    what: "group",
                    id: g.id.clone(),
                });
            }
            if !g.mutually_exclusive {
                return Err(ModelError::ReentrantGroup(g.id.clone()));
            }
        }

        let mut actual: BTreeMap<&str, Vec<String>> = self
            .groups
            .iter()
            .map(|g| (g.id.as_str(), Vec::new()))
            .collect();
        let mut seen = HashSet::new();
        for cb in self.callbacks() {
            if !seen.insert(cb.id.as_str()) {
                return Err(ModelError::DuplicateId {
                    what: "callback",
                    id: cb.id.clone(),
                });
            }
            match actual.get_mut(cb.group.as_str()) {
                Some(members) => members.push(cb.id.clone()),
                None => {
                    return Err(ModelError::UnknownGroup {
                        callback: cb.id.clone(),
                        group: cb.group.clone(),
                    })
                }
            }
            match &cb.kind {
                CallbackKind::Timer { period_ns: 0, .. } => {
                    return Err(ModelError::ZeroPeriod(cb.id.clone()))
                }
                CallbackKind::Subscription { topic, .. } if !topics.contains(topic.as_str()) => {
                    return Err(ModelError::UndeclaredTopic {
                        context: format!("subscription {:?}", cb.id),
                        topic: topic.clone(),
                    })
                }
                _ => {}
            }
        }

        for n in &self.nodes {
            for p in &n.publications {
                if !seen.contains(p.callback.as_str()) {
                    return Err(ModelError::UnknownPublisher {
                        node: n.id.clone(),
                        callback: p.callback.clone(),
                    });
                }
                if !topics.contains(p.topic.as_str()) {
                    return Err(ModelError::UndeclaredTopic {
                        context: format!("publication of {:?}", p.callback),
                        topic: p.topic.clone(),
                    });
                }
            }
        }

        let derived: BTreeMap<String, Vec<String>> = actual
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        for g in &mut self.groups {
            let members = &derived[&g.id];
            if g.members.is_empty() {
                g.members = members.clone();
            } else {
                let listed: BTreeSet<&String> = g.members.iter().collect();
                let real: BTreeSet<&String> = members.iter().collect();
                if listed != real || g.members.len() != members.len() {
                    return Err(ModelError::MembershipMismatch {
                        group: g.id.clone(),
                        listed: g.members.clone(),
                        actual: members.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}
