//! Callback dependency graph inferred from topic publish/subscribe relations.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use serde::Serialize;
use thiserror::Error;

use super::{CallbackKind, SystemDescription};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DanglingTopicPolicy {
    /// Record a [`GraphWarning`] and keep going.
    #[default]
    Warn,
    Error,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GraphOptions {
    pub dangling_topic: DanglingTopicPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum GraphWarning {
    /// A subscription listens on a topic that no callback publishes.
    DanglingTopic { subscription: String, topic: String },
}

impl std::fmt::Display for GraphWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphWarning::DanglingTopic {
                subscription,
                topic,
            } => {
                write!(
                    f,
                    "subscription {subscription:?} listens on {topic:?}, which nothing publishes"
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("callback graph has a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("subscription {subscription:?} listens on {topic:?}, which nothing publishes")]
    DanglingTopic { subscription: String, topic: String },
}

/// DAG whose vertices are callbacks and whose edges run from a publishing
/// callback to each callback subscribed to that topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallbackGraph {
    /// Callback ids in registration order; vertex indices refer to this list.
    pub vertices: Vec<String>,
    /// Sorted, deduplicated `(publisher, subscriber)` vertex index pairs.
    pub edges: Vec<(usize, usize)>,
    /// Vertex indices in topological order. Ties go to the lower index.
    pub topo_order: Vec<usize>,
    pub warnings: Vec<GraphWarning>,
}

impl CallbackGraph {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.vertices.iter().position(|v| v == id)
    }

    pub fn predecessors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == v).map(|e| e.0)
    }

    pub fn successors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.0 == v).map(|e| e.1)
    }

    /// Position of each vertex within `topo_order`.
    pub fn topo_index(&self) -> Vec<usize> {
        let mut pos = vec![0; self.vertices.len()];
        for (i, &v) in self.topo_order.iter().enumerate() {
            pos[v] = i;
        }
        pos
    }

    pub fn edge_ids(&self) -> Vec<(&str, &str)> {
        self.edges
            .iter()
            .map(|&(a, b)| (self.vertices[a].as_str(), self.vertices[b].as_str()))
            .collect()
    }
}

pub fn build_graph(
    sys: &SystemDescription,
    opts: GraphOptions,
) -> Result<CallbackGraph, GraphError> {
    let vertices: Vec<String> = sys.callbacks().map(|c| c.id.clone()).collect();
    let index: HashMap<&str, usize> = vertices
        .iter()
        .enumerate()
        .map(|(i, v)| (v.as_str(), i))
        .collect();

    let mut publishers: HashMap<&str, Vec<usize>> = HashMap::new();
    for node in &sys.nodes {
        for p in &node.publications {
            if let Some(&i) = index.get(p.callback.as_str()) {
                publishers.entry(p.topic.as_str()).or_default().push(i);
            }
        }
    }

    let mut edges = BTreeSet::new();
    let mut warnings = Vec::new();
    for (sub_idx, cb) in sys.callbacks().enumerate() {
        let CallbackKind::Subscription { topic, .. } = &cb.kind else {
            continue;
        };
        match publishers.get(topic.as_str()) {
            Some(pubs) => edges.extend(pubs.iter().map(|&p| (p, sub_idx))),
            None => match opts.dangling_topic {
                DanglingTopicPolicy::Warn => warnings.push(GraphWarning::DanglingTopic {
                    subscription: cb.id.clone(),
                    topic: topic.clone(),
                }),
                DanglingTopicPolicy::Error => {
                    return Err(GraphError::DanglingTopic {
                        subscription: cb.id.clone(),
                        topic: topic.clone(),
                    })
                }
            },
        }
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();

    let n = vertices.len();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in &edges {
        indegree[b] += 1;
        succ[a].push(b);
    }

    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
    let mut topo_order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        topo_order.push(v);
        for &s in &succ[v] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }

    if topo_order.len() < n {
        let cycle = find_cycle(n, &edges, &indegree);
        return Err(GraphError::Cycle(
            cycle.into_iter().map(|v| vertices[v].clone()).collect(),
        ));
    }

    Ok(CallbackGraph {
        vertices,
        edges,
        topo_order,
        warnings,
    })
}

/// Every vertex left with nonzero in-degree after Kahn's pass has a leftover
/// predecessor, so walking predecessors must revisit a vertex.
fn find_cycle(n: usize, edges: &[(usize, usize)], indegree: &[usize]) -> Vec<usize> {
    let leftover: Vec<bool> = (0..n).map(|v| indegree[v] > 0).collect();
    let start = (0..n)
        .find(|&v| leftover[v])
        .expect("cycle implies leftover vertex");

    let mut pos_in_walk = vec![None; n];
    let mut walk = Vec::new();
    let mut v = start;
    while pos_in_walk[v].is_none() {
        pos_in_walk[v] = Some(walk.len());
        walk.push(v);
        v = edges
            .iter()
            .filter(|e| e.1 == v && leftover[e.0])
            .map(|e| e.0)
            .min()
            .expect("leftover vertex has leftover predecessor");
    }
    let mut cycle = walk.split_off(pos_in_walk[v].unwrap());
    cycle.reverse();
    let min_pos = cycle
        .iter()
        .enumerate()
        .min_by_key(|(_, &v)| v)
        .map(|(i, _)| i)
        .unwrap();
    cycle.rotate_left(min_pos);
    cycle
}
