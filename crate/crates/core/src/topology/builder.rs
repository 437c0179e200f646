use super::{
    ActivationKind, ComputeGraph, Conv2d, GraphNode, Layer, Linear, NodeId, Pool2d, TopologyError,
};
use crate::taxonomy::TaxNodeId;

/// Appends nodes to a graph, stamping each with the current tag.
pub struct GraphBuilder<'a> {
    graph: &'a mut ComputeGraph,
    tag: Option<TaxNodeId>,
}

type Res = Result<NodeId, TopologyError>;

impl<'a> GraphBuilder<'a> {
    pub fn new(graph: &'a mut ComputeGraph) -> Self {
        GraphBuilder { graph, tag: None }
    }

    pub fn set_tag(&mut self, tag: Option<TaxNodeId>) {
        self.tag = tag;
    }

    pub fn layer(&mut self, id: impl Into<String>, layer: Layer, preds: &[&NodeId]) -> Res {
        let node = GraphNode {
            id: NodeId(id.into()),
            layer,
            preds: preds.iter().map(|p| (*p).clone()).collect(),
            tag: self.tag,
            out_shape: None,
        };
        self.graph.push(node).cloned()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        id: impl Into<String>,
        input: &NodeId,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    ) -> Res {
        self.layer(
            id,
            Layer::Conv2d(Conv2d {
                in_ch,
                out_ch,
                kernel: [kernel, kernel],
                stride,
                padding,
                groups: 1,
                has_bias,
            }),
            &[input],
        )
    }

    pub fn batchnorm(&mut self, id: impl Into<String>, input: &NodeId, channels: usize) -> Res {
        self.layer(id, Layer::Batchnorm2d { channels }, &[input])
    }

    pub fn relu(&mut self, id: impl Into<String>, input: &NodeId) -> Res {
        self.layer(
            id,
            Layer::Activation {
                func: ActivationKind::Relu,
            },
            &[input],
        )
    }

    pub fn maxpool(&mut self, id: impl Into<String>, input: &NodeId, pool: Pool2d) -> Res {
        self.layer(id, Layer::Maxpool2d(pool), &[input])
    }

    pub fn add(&mut self, id: impl Into<String>, a: &NodeId, b: &NodeId) -> Res {
        self.layer(id, Layer::Add, &[a, b])
    }

    pub fn global_avg_pool(&mut self, id: impl Into<String>, input: &NodeId) -> Res {
        self.layer(id, Layer::GlobalAvgPool, &[input])
    }

    pub fn linear(
        &mut self,
        id: impl Into<String>,
        input: &NodeId,
        in_features: usize,
        out_features: usize,
    ) -> Res {
        self.layer(
            id,
            Layer::Linear(Linear {
                in_features,
                out_features,
                has_bias: true,
                rows: None,
            }),
            &[input],
        )
    }

    /// Bottleneck residual unit: 1x1 reduce, 3x3 (strided), 1x1 expand, with a
    /// projection shortcut when the channel count or resolution changes.
    pub fn bottleneck(
        &mut self,
        prefix: &str,
        input: &NodeId,
        in_ch: usize,
        mid: usize,
        out: usize,
        stride: usize,
    ) -> Res {
        let c1 = self.conv(format!("{prefix}.conv1"), input, in_ch, mid, 1, 1, 0, false)?;
        let b1 = self.batchnorm(format!("{prefix}.bn1"), &c1, mid)?;
        let r1 = self.relu(format!("{prefix}.relu1"), &b1)?;
        let c2 = self.conv(format!("{prefix}.conv2"), &r1, mid, mid, 3, stride, 1, false)?;
        let b2 = self.batchnorm(format!("{prefix}.bn2"), &c2, mid)?;
        let r2 = self.relu(format!("{prefix}.relu2"), &b2)?;
        let c3 = self.conv(format!("{prefix}.conv3"), &r2, mid, out, 1, 1, 0, false)?;
        let b3 = self.batchnorm(format!("{prefix}.bn3"), &c3, out)?;
        let shortcut = if in_ch != out || stride != 1 {
            let d = self.conv(
                format!("{prefix}.downsample.conv"),
                input,
                in_ch,
                out,
                1,
                stride,
                0,
                false,
            )?;
            self.batchnorm(format!("{prefix}.downsample.bn"), &d, out)?
        } else {
            input.clone()
        };
        let sum = self.add(format!("{prefix}.add"), &b3, &shortcut)?;
        self.relu(format!("{prefix}.relu3"), &sum)
    }
}
