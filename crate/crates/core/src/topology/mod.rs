//! Compute graphs of layer descriptors with shape inference and a
//! deterministic order. Submodules hold the ResNet and NHL builders.

mod builder;
pub mod convnext;
mod nhl;
mod resnet;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::{CategoryId, TaxNodeId, TaxonomyError};

pub use builder::GraphBuilder;
pub use nhl::{build_nhl, BranchConfig, HeadPlacement, SplitPoint};
pub use resnet::{
    build_baseline, build_baseline_resnet50, build_trunk, Backbone, ResNetConfig, Stage, Stem,
};

pub const INPUT_NODE: &str = "input";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("shape mismatch at node '{node}': {detail}")]
    ShapeMismatch { node: NodeId, detail: String },
    #[error("node '{0}' produces a non-positive spatial extent")]
    NonPositiveSpatial(NodeId),
    #[error("graph contains a cycle")]
    CycleDetected,
    #[error("unknown node '{0}'")]
    UnknownNode(NodeId),
    #[error("node id '{0}' is used twice")]
    DuplicateNode(NodeId),
    #[error("invalid layer at '{node}': {reason}")]
    InvalidLayer { node: NodeId, reason: String },
    #[error("graph is malformed: {0}")]
    Malformed(String),
    #[error("class count must be at least 1")]
    InvalidClassCount,
    #[error("unsupported backbone '{0}'")]
    UnsupportedBackbone(String),
    #[error("channel schedule has {have} levels but the taxonomy needs {need}")]
    ScheduleTooShort { need: usize, have: usize },
    #[error("trunk must end in exactly one terminal node, found {0}")]
    TrunkNotTerminal(usize),
    #[error("invalid branch configuration: {0}")]
    InvalidBranchConfig(String),
    #[error("leaf category {0} hangs directly off the root and has no branch to attach a head to")]
    UnbranchedLeaf(CategoryId),
    #[error("shapes have not been inferred")]
    ShapesMissing,
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("graph JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(s: impl Into<String>) -> Self {
        NodeId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

/// Per-sample tensor extent (channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl From<[usize; 3]> for Shape {
    fn from([c, h, w]: [usize; 3]) -> Self {
        Shape { c, h, w }
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        [s.c, s.h, s.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(['x', 'X', ','])
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad shape '{s}': {e}"))?;
        match parts[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Shape { c, h, w }),
            _ => Err(format!("shape '{s}' must be CxHxW with positive extents")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output rows of a full linear layer kept by a sliced head.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowSelection {
    pub full_out: usize,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub has_bias: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<RowSelection>,
}

impl Linear {
    /// Number of rows in the stored weight, which may exceed `out_features` for sliced heads.
    pub fn stored_rows(&self) -> usize {
        self.rows.as_ref().map_or(self.out_features, |r| r.full_out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs", rename_all = "snake_case")]
pub enum Layer {
    Input,
    Conv2d(Conv2d),
    Batchnorm2d { channels: usize },
    LayernormChannels { channels: usize },
    Activation { func: ActivationKind },
    Maxpool2d(Pool2d),
    GlobalAvgPool,
    Linear(Linear),
    Add,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Input => "input",
            Layer::Conv2d(_) => "conv2d",
            Layer::Batchnorm2d { .. } => "batchnorm2d",
            Layer::LayernormChannels { .. } => "layernorm_channels",
            Layer::Activation { .. } => "activation",
            Layer::Maxpool2d(_) => "maxpool2d",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Linear(_) => "linear",
            Layer::Add => "add",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Layer::Input => 0,
            Layer::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: NodeId,
    #[serde(flatten)]
    pub layer: Layer,
    pub preds: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<TaxNodeId>,
    #[serde(default, rename = "shape", skip_serializing_if = "Option::is_none")]
    pub out_shape: Option<Shape>,
}

/// Which element of which node's output produces a category's logit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogitEntry {
    pub category: CategoryId,
    pub node: NodeId,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphFile {
    input_shape: Shape,
    nodes: Vec<GraphNode>,
    logit_layout: Vec<LogitEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_hash: Option<String>,
}

/// DAG of layer descriptors. Nodes keep insertion order; `logit_layout` lists
/// the served categories in output order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphFile")]
pub struct ComputeGraph {
    pub input_shape: Shape,
    nodes: Vec<GraphNode>,
    pub logit_layout: Vec<LogitEntry>,
    /// Content hash of the full graph this one was extracted from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hash: Option<String>,
    #[serde(skip)]
    index: HashMap<NodeId, usize>,
}

impl TryFrom<GraphFile> for ComputeGraph {
    type Error = TopologyError;

    fn try_from(file: GraphFile) -> Result<Self, Self::Error> {
        let mut index = HashMap::with_capacity(file.nodes.len());
        for (i, n) in file.nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(TopologyError::DuplicateNode(n.id.clone()));
            }
        }
        for n in &file.nodes {
            for p in &n.preds {
                if !index.contains_key(p) {
                    return Err(TopologyError::UnknownNode(p.clone()));
                }
            }
        }
        for e in &file.logit_layout {
            if !index.contains_key(&e.node) {
                return Err(TopologyError::UnknownNode(e.node.clone()));
            }
        }
        Ok(ComputeGraph {
            input_shape: file.input_shape,
            nodes: file.nodes,
            logit_layout: file.logit_layout,
            source_hash: file.source_hash,
            index,
        })
    }
}

impl ComputeGraph {
    /// A graph holding only the input node.
    pub fn new(input_shape: Shape) -> Self {
        let mut g = ComputeGraph {
            input_shape,
            nodes: Vec::new(),
            logit_layout: Vec::new(),
            source_hash: None,
            index: HashMap::new(),
        };
        g.nodes.push(GraphNode {
            id: NodeId::from(INPUT_NODE),
            layer: Layer::Input,
            preds: Vec::new(),
            tag: None,
            out_shape: None,
        });
        g.index.insert(NodeId::from(INPUT_NODE), 0);
        g
    }

    pub fn input_id(&self) -> &NodeId {
        &self
            .nodes
            .iter()
            .find(|n| matches!(n.layer, Layer::Input))
            .expect("graphs always hold an input node")
            .id
    }

    pub fn push(&mut self, node: GraphNode) -> Result<&NodeId, TopologyError> {
        if self.index.contains_key(&node.id) {
            return Err(TopologyError::DuplicateNode(node.id));
        }
        if let Some(p) = node.preds.iter().find(|p| !self.index.contains_key(*p)) {
            return Err(TopologyError::UnknownNode(p.clone()));
        }
        if node.preds.len() != node.layer.arity() {
            return Err(TopologyError::InvalidLayer {
                node: node.id,
                reason: format!(
                    "expects {} predecessors, got {}",
                    node.layer.arity(),
                    node.preds.len()
                ),
            });
        }
        self.index.insert(node.id.clone(), self.nodes.len());
        self.nodes.push(node);
        Ok(&self.nodes.last().expect("just pushed").id)
    }

    /// Adds an extra edge `pred -> node`. Used for graph surgery and tests; it can create cycles.
    pub fn add_pred(&mut self, node: &NodeId, pred: NodeId) -> Result<(), TopologyError> {
        if !self.index.contains_key(&pred) {
            return Err(TopologyError::UnknownNode(pred));
        }
        let i = self.position(node)?;
        self.nodes[i].preds.push(pred);
        Ok(())
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &NodeId) -> Result<&GraphNode, TopologyError> {
        self.position(id).map(|i| &self.nodes[i])
    }

    pub fn position(&self, id: &NodeId) -> Result<usize, TopologyError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| TopologyError::UnknownNode(id.clone()))
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.index.contains_key(id)
    }

    /// Nodes that no other node consumes.
    pub fn terminal_nodes(&self) -> Vec<&NodeId> {
        let mut consumed = vec![false; self.nodes.len()];
        for n in &self.nodes {
            for p in &n.preds {
                consumed[self.index[p]] = true;
            }
        }
        self.nodes
            .iter()
            .zip(consumed)
            .filter(|(_, c)| !c)
            .map(|(n, _)| &n.id)
            .collect()
    }

    pub fn tagged_nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| n.tag.is_some())
    }

    /// Deterministic topological order as node positions; ties are broken by node id.
    pub fn topo_positions(&self) -> Result<Vec<usize>, TopologyError> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            indegree[i] = node.preds.len();
            for p in &node.preds {
                consumers[self.index[p]].push(i);
            }
        }
        let mut ready: BinaryHeap<Reverse<(&str, usize)>> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| indegree[*i] == 0)
            .map(|(i, node)| Reverse((node.id.as_str(), i)))
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse((_, i))) = ready.pop() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse((self.nodes[c].id.as_str(), c)));
                }
            }
        }
        if order.len() != n {
            return Err(TopologyError::CycleDetected);
        }
        Ok(order)
    }

    pub fn topo_order(&self) -> Result<Vec<NodeId>, TopologyError> {
        Ok(self
            .topo_positions()?
            .into_iter()
            .map(|i| self.nodes[i].id.clone())
            .collect())
    }

    /// Checks the structural invariants: one input node, acyclic, all nodes reachable from the input.
    pub fn validate(&self) -> Result<(), TopologyError> {
        let inputs: Vec<_> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.layer, Layer::Input))
            .collect();
        if inputs.len() != 1 {
            return Err(TopologyError::Malformed(format!(
                "expected one input node, found {}",
                inputs.len()
            )));
        }
        for node in &self.nodes {
            if node.preds.len() != node.layer.arity() {
                return Err(TopologyError::InvalidLayer {
                    node: node.id.clone(),
                    reason: format!("expects {} predecessors", node.layer.arity()),
                });
            }
        }
        // With a single zero-indegree node, acyclicity implies reachability from it.
        self.topo_positions()?;
        Ok(())
    }

    /// Annotates every node with its output shape.
    pub fn infer_shapes(&mut self) -> Result<(), TopologyError> {
        self.validate()?;
        let order = self.topo_positions()?;
        for i in order {
            let shape = {
                let node = &self.nodes[i];
                let preds: Vec<Shape> = node
                    .preds
                    .iter()
                    .map(|p| {
                        self.nodes[self.index[p]]
                            .out_shape
                            .expect("preds precede consumers in topo order")
                    })
                    .collect();
                output_shape(node, &preds, self.input_shape)?
            };
            self.nodes[i].out_shape = Some(shape);
        }
        Ok(())
    }

    pub fn with_shapes(mut self) -> Result<Self, TopologyError> {
        self.infer_shapes()?;
        Ok(self)
    }

    pub fn has_shapes(&self) -> bool {
        self.nodes.iter().all(|n| n.out_shape.is_some())
    }

    pub fn out_shape(&self, id: &NodeId) -> Result<Shape, TopologyError> {
        self.node(id)?.out_shape.ok_or(TopologyError::ShapesMissing)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graphs always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        serde_json::from_str(text).map_err(|e| TopologyError::Json(e.to_string()))
    }

    /// SHA-256 over the structural content (input shape, nodes without shape
    /// annotations, logit layout). The source hash is not part of it.
    pub fn content_hash(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct Canonical<'a> {
            input_shape: Shape,
            nodes: Vec<(&'a NodeId, &'a Layer, &'a [NodeId], Option<TaxNodeId>)>,
            logit_layout: &'a [LogitEntry],
        }
        let canonical = Canonical {
            input_shape: self.input_shape,
            nodes: self
                .nodes
                .iter()
                .map(|n| (&n.id, &n.layer, n.preds.as_slice(), n.tag))
                .collect(),
            logit_layout: &self.logit_layout,
        };
        let bytes = serde_json::to_vec(&canonical).expect("canonical form serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn content_hash_hex(&self) -> String {
        hex::encode(self.content_hash())
    }

    pub fn categories(&self) -> impl Iterator<Item = CategoryId> + '_ {
        self.logit_layout.iter().map(|e| e.category)
    }

    pub(crate) fn from_parts(
        input_shape: Shape,
        nodes: Vec<GraphNode>,
        logit_layout: Vec<LogitEntry>,
        source_hash: Option<String>,
    ) -> Result<Self, TopologyError> {
        ComputeGraph::try_from(GraphFile {
            input_shape,
            nodes,
            logit_layout,
            source_hash,
        })
    }
}

fn window_out(
    node: &NodeId,
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TopologyError> {
    let padded = extent + 2 * padding;
    if padded < kernel || stride == 0 {
        return Err(TopologyError::NonPositiveSpatial(node.clone()));
    }
    Ok((padded - kernel) / stride + 1)
}

fn output_shape(node: &GraphNode, preds: &[Shape], input: Shape) -> Result<Shape, TopologyError> {
    let mismatch = |detail: String| TopologyError::ShapeMismatch {
        node: node.id.clone(),
        detail,
    };
    let invalid = |reason: &str| TopologyError::InvalidLayer {
        node: node.id.clone(),
        reason: reason.to_string(),
    };
    match &node.layer {
        Layer::Input => Ok(input),
        Layer::Conv2d(c) => {
            let x = preds[0];
            if c.groups == 0 || c.in_ch % c.groups != 0 || c.out_ch % c.groups != 0 {
                return Err(invalid("channels must be divisible by groups"));
            }
            if c.kernel[0] == 0 || c.kernel[1] == 0 || c.stride == 0 {
                return Err(invalid("kernel and stride must be positive"));
            }
            if x.c != c.in_ch {
                return Err(mismatch(format!("conv expects {} channels, got {}", c.in_ch, x.c)));
            }
            Ok(Shape::new(
                c.out_ch,
                window_out(&node.id, x.h, c.kernel[0], c.stride, c.padding)?,
                window_out(&node.id, x.w, c.kernel[1], c.stride, c.padding)?,
            ))
        }
        Layer::Batchnorm2d { channels } | Layer::LayernormChannels { channels } => {
            if preds[0].c != *channels {
                return Err(mismatch(format!(
                    "norm expects {channels} channels, got {}",
                    preds[0].c
                )));
            }
            Ok(preds[0])
        }
        Layer::Activation { .. } => Ok(preds[0]),
        Layer::Maxpool2d(p) => {
            let x = preds[0];
            if p.kernel == 0 || p.stride == 0 {
                return Err(invalid("kernel and stride must be positive"));
            }
            if 2 * p.padding > p.kernel {
                return Err(invalid("padding may be at most half the kernel"));
            }
            Ok(Shape::new(
                x.c,
                window_out(&node.id, x.h, p.kernel, p.stride, p.padding)?,
                window_out(&node.id, x.w, p.kernel, p.stride, p.padding)?,
            ))
        }
        Layer::GlobalAvgPool => Ok(Shape::new(preds[0].c, 1, 1)),
        Layer::Linear(l) => {
            if preds[0].numel() != l.in_features {
                return Err(mismatch(format!(
                    "linear expects {} features, got {}",
                    l.in_features,
                    preds[0].numel()
                )));
            }
            if let Some(sel) = &l.rows {
                if sel.rows.len() != l.out_features || sel.rows.iter().any(|r| *r >= sel.full_out)
                {
                    return Err(invalid("row selection does not match out_features"));
                }
            }
            Ok(Shape::new(l.out_features, 1, 1))
        }
        Layer::Add => {
            if preds[0] != preds[1] {
                return Err(mismatch(format!("add operands {} and {}", preds[0], preds[1])));
            }
            Ok(preds[0])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, layer: Layer, preds: &[&str]) -> GraphNode {
        GraphNode {
            id: id.into(),
            layer,
            preds: preds.iter().map(|p| NodeId::from(*p)).collect(),
            tag: None,
            out_shape: None,
        }
    }

    fn relu() -> Layer {
        Layer::Activation {
            func: ActivationKind::Relu,
        }
    }

    #[test]
    fn stem_shapes() {
        let mut g = ComputeGraph::new(Shape::new(3, 224, 224));
        g.push(node(
            "conv",
            Layer::Conv2d(Conv2d {
                in_ch: 3,
                out_ch: 64,
                kernel: [7, 7],
                stride: 2,
                padding: 3,
                groups: 1,
                has_bias: false,
            }),
            &["input"],
        ))
        .unwrap();
        g.push(node(
            "pool",
            Layer::Maxpool2d(Pool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            }),
            &["conv"],
        ))
        .unwrap();
        g.infer_shapes().unwrap();
        assert_eq!(g.out_shape(&"conv".into()).unwrap(), Shape::new(64, 112, 112));
        assert_eq!(g.out_shape(&"pool".into()).unwrap(), Shape::new(64, 56, 56));
    }

    #[test]
    fn add_shape_mismatch() {
        let mut g = ComputeGraph::new(Shape::new(128, 14, 14));
        g.push(node(
            "down",
            Layer::Maxpool2d(Pool2d {
                kernel: 2,
                stride: 2,
                padding: 0,
            }),
            &["input"],
        ))
        .unwrap();
        g.push(node("add", Layer::Add, &["down", "input"])).unwrap();
        assert!(matches!(
            g.infer_shapes(),
            Err(TopologyError::ShapeMismatch { node, .. }) if node.as_str() == "add"
        ));
    }

    #[test]
    fn kernel_larger_than_input() {
        let mut g = ComputeGraph::new(Shape::new(1, 2, 2));
        g.push(node(
            "conv",
            Layer::Conv2d(Conv2d {
                in_ch: 1,
                out_ch: 1,
                kernel: [5, 5],
                stride: 1,
                padding: 0,
                groups: 1,
                has_bias: false,
            }),
            &["input"],
        ))
        .unwrap();
        assert_eq!(
            g.infer_shapes(),
            Err(TopologyError::NonPositiveSpatial("conv".into()))
        );
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = ComputeGraph::new(Shape::new(3, 8, 8));
        g.push(node(
            "conv",
            Layer::Conv2d(Conv2d {
                in_ch: 4,
                out_ch: 4,
                kernel: [1, 1],
                stride: 1,
                padding: 0,
                groups: 1,
                has_bias: false,
            }),
            &["input"],
        ))
        .unwrap();
        assert!(matches!(
            g.infer_shapes(),
            Err(TopologyError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn topo_chain_diamond_cycle() {
        let mut chain = ComputeGraph::new(Shape::new(1, 1, 1));
        chain.push(node("b", relu(), &["input"])).unwrap();
        chain.push(node("c", relu(), &["b"])).unwrap();
        assert_eq!(
            chain.topo_order().unwrap(),
            vec![NodeId::from("input"), "b".into(), "c".into()]
        );

        // Insert c before b so that the tie-break, not insertion order, decides.
        let mut diamond = ComputeGraph::new(Shape::new(1, 1, 1));
        diamond.push(node("c", relu(), &["input"])).unwrap();
        diamond.push(node("b", relu(), &["input"])).unwrap();
        diamond.push(node("d", Layer::Add, &["b", "c"])).unwrap();
        assert_eq!(
            diamond.topo_order().unwrap(),
            vec![NodeId::from("input"), "b".into(), "c".into(), "d".into()]
        );

        diamond.add_pred(&"b".into(), "d".into()).unwrap();
        assert_eq!(diamond.topo_order(), Err(TopologyError::CycleDetected));
    }

    #[test]
    fn duplicate_and_unknown_nodes() {
        let mut g = ComputeGraph::new(Shape::new(1, 1, 1));
        g.push(node("a", relu(), &["input"])).unwrap();
        assert_eq!(
            g.push(node("a", relu(), &["input"])),
            Err(TopologyError::DuplicateNode("a".into()))
        );
        assert_eq!(
            g.push(node("b", relu(), &["zzz"])),
            Err(TopologyError::UnknownNode("zzz".into()))
        );
    }

    #[test]
    fn shape_parsing() {
        assert_eq!("3x224x224".parse::<Shape>().unwrap(), Shape::new(3, 224, 224));
        assert!("3x224".parse::<Shape>().is_err());
        assert!("0x2x2".parse::<Shape>().is_err());
    }

    #[test]
    fn json_layout() {
        let mut g = ComputeGraph::new(Shape::new(2, 1, 1));
        g.push(node(
            "fc",
            Layer::Linear(Linear {
                in_features: 2,
                out_features: 1,
                has_bias: true,
                rows: None,
            }),
            &["input"],
        ))
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        let fc = &v["nodes"][1];
        assert_eq!(fc["id"], "fc");
        assert_eq!(fc["kind"], "linear");
        assert_eq!(fc["attrs"]["in_features"], 2);
        assert_eq!(fc["preds"][0], "input");
        assert_eq!(v["nodes"][0]["kind"], "input");
        assert_eq!(ComputeGraph::from_json(&g.to_json()).unwrap(), g);
    }
}
