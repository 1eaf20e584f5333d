//! Propagation trees.
//!
//! A [`PropagationTree`] is a rooted tree of posts: node 0 is the source post and
//! every other node is a response attached to exactly one parent. Trees are always
//! stored in canonical breadth-first order (ties broken by the original node id),
//! so a parent index is strictly smaller than the indices of its children and all
//! per-node matrices share one row order.

use std::collections::{HashMap, VecDeque};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("tree has no nodes")]
    Empty,
    #[error("event label must be 0 or 1, got {0}")]
    InvalidLabel(u8),
    #[error("duplicate node id {0}")]
    DuplicateId(i64),
    #[error("multiple root nodes: {0:?}")]
    MultipleRoots(Vec<i64>),
    #[error("node {node} references missing parent {parent}")]
    DanglingParent { node: i64, parent: i64 },
    #[error("cycle through node {0}")]
    Cycle(i64),
    #[error("stage {t} is outside 0..={depth}")]
    DepthOutOfRange { t: usize, depth: usize },
    #[error("feature matrix has {rows} rows but the tree has {nodes} nodes")]
    FeatureRows { rows: usize, nodes: usize },
    #[error("depth buckets start at depth 1")]
    NonPositiveDepth,
}

/// A node as it arrives from a dataset, before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawNode {
    pub id: i64,
    pub parent: Option<i64>,
    pub text: String,
    pub timestamp: Option<f64>,
}

impl RawNode {
    pub fn new(id: i64, parent: Option<i64>, text: impl Into<String>) -> Self {
        Self {
            id,
            parent,
            text: text.into(),
            timestamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub parent: Option<usize>,
    pub text: String,
    /// Carried through from the source data; the model never reads it.
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DepthBucket {
    D1,
    D2to5,
    Dgt5,
}

impl DepthBucket {
    pub const ALL: [DepthBucket; 3] = [DepthBucket::D1, DepthBucket::D2to5, DepthBucket::Dgt5];

    pub fn name(self) -> &'static str {
        match self {
            DepthBucket::D1 => "D1",
            DepthBucket::D2to5 => "D2to5",
            DepthBucket::Dgt5 => "Dgt5",
        }
    }
}

pub fn depth_bucket(depth: usize) -> Result<DepthBucket, TreeError> {
    match depth {
        0 => Err(TreeError::NonPositiveDepth),
        1 => Ok(DepthBucket::D1),
        2..=5 => Ok(DepthBucket::D2to5),
        _ => Ok(DepthBucket::Dgt5),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationTree {
    event_id: String,
    label: u8,
    nodes: Vec<Node>,
    node_depths: Vec<usize>,
    children: Vec<Vec<usize>>,
    features: Option<Array2<f64>>,
}

/// Validates raw nodes and returns the tree in canonical order.
pub fn build_tree(
    event_id: impl Into<String>,
    label: u8,
    raw_nodes: Vec<RawNode>,
) -> Result<PropagationTree, TreeError> {
    if label > 1 {
        return Err(TreeError::InvalidLabel(label));
    }
    if raw_nodes.is_empty() {
        return Err(TreeError::Empty);
    }

    let mut position: HashMap<i64, usize> = HashMap::with_capacity(raw_nodes.len());
    for (i, node) in raw_nodes.iter().enumerate() {
        if position.insert(node.id, i).is_some() {
            return Err(TreeError::DuplicateId(node.id));
        }
    }

    let mut roots: Vec<i64> = raw_nodes
        .iter()
        .filter(|n| n.parent.is_none())
        .map(|n| n.id)
        .collect();
    if roots.len() > 1 {
        roots.sort_unstable();
        return Err(TreeError::MultipleRoots(roots));
    }

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); raw_nodes.len()];
    for (i, node) in raw_nodes.iter().enumerate() {
        if let Some(p) = node.parent {
            match position.get(&p) {
                Some(&pi) => children[pi].push(i),
                None => {
                    return Err(TreeError::DanglingParent {
                        node: node.id,
                        parent: p,
                    })
                }
            }
        }
    }

    // Every node has a resolvable parent, so a missing root means a cycle.
    let Some(&root_id) = roots.first() else {
        let min_id = raw_nodes.iter().map(|n| n.id).min().unwrap_or_default();
        return Err(TreeError::Cycle(min_id));
    };
    for list in &mut children {
        list.sort_by_key(|&i| raw_nodes[i].id);
    }

    let n = raw_nodes.len();
    let mut order = Vec::with_capacity(n);
    let mut depth = vec![usize::MAX; n];
    let root = position[&root_id];
    depth[root] = 0;
    let mut queue = VecDeque::from([root]);
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &c in &children[i] {
            depth[c] = depth[i] + 1;
            queue.push_back(c);
        }
    }
    if order.len() < n {
        let unreached = (0..n)
            .filter(|&i| depth[i] == usize::MAX)
            .map(|i| raw_nodes[i].id)
            .min()
            .unwrap_or_default();
        return Err(TreeError::Cycle(unreached));
    }
    // Level by level; within a level, by original id.
    order.sort_by_key(|&i| (depth[i], raw_nodes[i].id));
    let mut canonical = vec![0usize; n];
    for (c, &i) in order.iter().enumerate() {
        canonical[i] = c;
    }

    let mut raw_nodes: Vec<Option<RawNode>> = raw_nodes.into_iter().map(Some).collect();
    let nodes = order
        .iter()
        .enumerate()
        .map(|(new_id, &old)| {
            let raw = raw_nodes[old].take().expect("each node visited once");
            Node {
                id: new_id,
                parent: raw.parent.map(|p| canonical[position[&p]]),
                text: raw.text,
                timestamp: raw.timestamp,
            }
        })
        .collect();
    Ok(PropagationTree::from_canonical(event_id.into(), label, nodes))
}

impl PropagationTree {
    fn from_canonical(event_id: String, label: u8, nodes: Vec<Node>) -> Self {
        let n = nodes.len();
        let mut node_depths = vec![0usize; n];
        let mut children = vec![Vec::new(); n];
        for node in nodes.iter().skip(1) {
            let p = node.parent.expect("non-root node has a parent");
            node_depths[node.id] = node_depths[p] + 1;
            children[p].push(node.id);
        }
        Self {
            event_id,
            label,
            nodes,
            node_depths,
            children,
            features: None,
        }
    }

    pub fn event_id(&self) -> &str {
        &self.event_id
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Always false for a constructed tree; present for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.nodes[i].parent
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    /// Root distance of node `i`.
    pub fn node_depth(&self, i: usize) -> usize {
        self.node_depths[i]
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.node_depths.iter().copied().max().unwrap_or(0)
    }

    pub fn nodes_at_depth(&self, t: usize) -> Result<Vec<usize>, TreeError> {
        let depth = self.depth();
        if t > depth {
            return Err(TreeError::DepthOutOfRange { t, depth });
        }
        Ok((0..self.len()).filter(|&i| self.node_depths[i] == t).collect())
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self, TreeError> {
        if features.nrows() != self.len() {
            return Err(TreeError::FeatureRows {
                rows: features.nrows(),
                nodes: self.len(),
            });
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn without_features(mut self) -> Self {
        self.features = None;
        self
    }

    /// Raw nodes equivalent to this tree, e.g. for re-validation after edits.
    pub fn to_raw_nodes(&self) -> Vec<RawNode> {
        self.nodes
            .iter()
            .map(|n| RawNode {
                id: n.id as i64,
                parent: n.parent.map(|p| p as i64),
                text: n.text.clone(),
                timestamp: n.timestamp,
            })
            .collect()
    }
}
