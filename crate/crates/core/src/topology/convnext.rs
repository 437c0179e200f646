//! ConvNeXt-style block descriptors for cost analysis.

use super::{ActivationKind, ComputeGraph, Conv2d, GraphBuilder, Layer, NodeId, TopologyError};

fn conv(in_ch: usize, out_ch: usize, kernel: usize, padding: usize, groups: usize) -> Layer {
    Layer::Conv2d(Conv2d {
        in_ch,
        out_ch,
        kernel: [kernel, kernel],
        stride: 1,
        padding,
        groups,
        has_bias: true,
    })
}

/// Depthwise 7x7 conv, channel layernorm, pointwise expand (x4), GELU,
/// pointwise project and a residual add. Pointwise layers are 1x1 convs with bias.
pub fn convnext_block(
    b: &mut GraphBuilder<'_>,
    prefix: &str,
    input: &NodeId,
    dim: usize,
) -> Result<NodeId, TopologyError> {
    let dw = b.layer(format!("{prefix}.dwconv"), conv(dim, dim, 7, 3, dim), &[input])?;
    let norm = b.layer(
        format!("{prefix}.norm"),
        Layer::LayernormChannels { channels: dim },
        &[&dw],
    )?;
    let pw1 = b.layer(format!("{prefix}.pwconv1"), conv(dim, 4 * dim, 1, 0, 1), &[&norm])?;
    let act = b.layer(
        format!("{prefix}.act"),
        Layer::Activation {
            func: ActivationKind::Gelu,
        },
        &[&pw1],
    )?;
    let pw2 = b.layer(format!("{prefix}.pwconv2"), conv(4 * dim, dim, 1, 0, 1), &[&act])?;
    b.add(format!("{prefix}.add"), &pw2, input)
}

/// A graph holding `depth` ConvNeXt blocks at constant width, for analysis.
pub fn convnext_stage(
    input_shape: super::Shape,
    depth: usize,
) -> Result<ComputeGraph, TopologyError> {
    let mut g = ComputeGraph::new(input_shape);
    let mut x = g.input_id().clone();
    let mut b = GraphBuilder::new(&mut g);
    for i in 0..depth {
        x = convnext_block(&mut b, &format!("stage.{i}"), &x, input_shape.c)?;
    }
    g.with_shapes()
}
