//! ResNet-style backbones: the conventional classifier and the trunk that
//! feeds the hierarchy (last stage and FC removed).

use std::fmt;
use std::str::FromStr;

use super::{ComputeGraph, GraphBuilder, LogitEntry, NodeId, Pool2d, Shape, TopologyError};
use crate::taxonomy::CategoryId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stem {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub maxpool: bool,
}

/// A run of bottleneck units; only the first one strides and projects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub blocks: usize,
    pub mid: usize,
    pub out: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResNetConfig {
    pub stem: Stem,
    pub stages: Vec<Stage>,
}

impl ResNetConfig {
    pub fn resnet50() -> Self {
        ResNetConfig {
            stem: Stem {
                channels: 64,
                kernel: 7,
                stride: 2,
                padding: 3,
                maxpool: true,
            },
            stages: vec![
                Stage { blocks: 3, mid: 64, out: 256, stride: 1 },
                Stage { blocks: 4, mid: 128, out: 512, stride: 2 },
                Stage { blocks: 6, mid: 256, out: 1024, stride: 2 },
                Stage { blocks: 3, mid: 512, out: 2048, stride: 2 },
            ],
        }
    }

    /// ResNet50 for 32x32-class inputs: 3x3 stem at stride 1, no max pool.
    pub fn resnet50_small() -> Self {
        ResNetConfig {
            stem: Stem {
                channels: 64,
                kernel: 3,
                stride: 1,
                padding: 1,
                maxpool: false,
            },
            ..Self::resnet50()
        }
    }

    /// Narrow small-image variant sized for CPU training.
    pub fn mini() -> Self {
        ResNetConfig {
            stem: Stem {
                channels: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
                maxpool: false,
            },
            stages: vec![
                Stage { blocks: 1, mid: 8, out: 32, stride: 1 },
                Stage { blocks: 1, mid: 16, out: 64, stride: 2 },
                Stage { blocks: 1, mid: 32, out: 128, stride: 2 },
                Stage { blocks: 1, mid: 64, out: 256, stride: 2 },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Resnet50,
    Resnet50Small,
    Mini,
}

impl Backbone {
    pub fn config(self) -> ResNetConfig {
        match self {
            Backbone::Resnet50 => ResNetConfig::resnet50(),
            Backbone::Resnet50Small => ResNetConfig::resnet50_small(),
            Backbone::Mini => ResNetConfig::mini(),
        }
    }
}

impl FromStr for Backbone {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "resnet50" => Ok(Backbone::Resnet50),
            "resnet50-small" => Ok(Backbone::Resnet50Small),
            "mini" => Ok(Backbone::Mini),
            other => Err(TopologyError::UnsupportedBackbone(other.to_string())),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Resnet50 => "resnet50",
            Backbone::Resnet50Small => "resnet50-small",
            Backbone::Mini => "mini",
        })
    }
}

fn build_body(
    cfg: &ResNetConfig,
    stages: usize,
    input_shape: Shape,
) -> Result<(ComputeGraph, NodeId, usize), TopologyError> {
    let mut g = ComputeGraph::new(input_shape);
    let input = g.input_id().clone();
    let mut b = GraphBuilder::new(&mut g);
    let s = &cfg.stem;
    let conv = b.conv(
        "stem.conv",
        &input,
        input_shape.c,
        s.channels,
        s.kernel,
        s.stride,
        s.padding,
        false,
    )?;
    let bn = b.batchnorm("stem.bn", &conv, s.channels)?;
    let mut x = b.relu("stem.relu", &bn)?;
    if s.maxpool {
        x = b.maxpool(
            "stem.pool",
            &x,
            Pool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        )?;
    }
    let mut ch = s.channels;
    for (si, stage) in cfg.stages.iter().take(stages).enumerate() {
        for bi in 0..stage.blocks {
            let stride = if bi == 0 { stage.stride } else { 1 };
            x = b.bottleneck(
                &format!("layer{}.{}", si + 1, bi),
                &x,
                ch,
                stage.mid,
                stage.out,
                stride,
            )?;
            ch = stage.out;
        }
    }
    Ok((g, x, ch))
}

/// Conventional classifier: the whole backbone followed by one pooled FC.
pub fn build_baseline(
    cfg: &ResNetConfig,
    num_classes: usize,
    input_shape: Shape,
) -> Result<ComputeGraph, TopologyError> {
    if num_classes == 0 {
        return Err(TopologyError::InvalidClassCount);
    }
    let (mut g, x, ch) = build_body(cfg, cfg.stages.len(), input_shape)?;
    let mut b = GraphBuilder::new(&mut g);
    let pool = b.global_avg_pool("pool", &x)?;
    let fc = b.linear("fc", &pool, ch, num_classes)?;
    g.logit_layout = (0..num_classes)
        .map(|i| LogitEntry {
            category: CategoryId(i),
            node: fc.clone(),
            offset: i,
        })
        .collect();
    g.with_shapes()
}

pub fn build_baseline_resnet50(num_classes: usize) -> Result<ComputeGraph, TopologyError> {
    build_baseline(&ResNetConfig::resnet50(), num_classes, Shape::new(3, 224, 224))
}

/// Backbone with its last stage and classifier removed; the terminal node is the split point.
pub fn build_trunk(backbone: Backbone, input_shape: Shape) -> Result<ComputeGraph, TopologyError> {
    let cfg = backbone.config();
    let (g, _, _) = build_body(&cfg, cfg.stages.len() - 1, input_shape)?;
    g.with_shapes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::count_params;

    // Hand count of bottleneck parameters: three convs, BN affines, optional projection.
    fn bottleneck_params(i: u64, m: u64, o: u64, project: bool) -> u64 {
        let mut p = i * m + m * m * 9 + m * o + 2 * (m + m + o);
        if project {
            p += i * o + 2 * o;
        }
        p
    }

    fn stage_params(blocks: u64, i: u64, m: u64, o: u64) -> u64 {
        bottleneck_params(i, m, o, true) + (blocks - 1) * bottleneck_params(o, m, o, false)
    }

    fn hand_count_resnet50(classes: u64) -> (u64, u64) {
        let stem = 3 * 64 * 49 + 2 * 64;
        let trunk = stem
            + stage_params(3, 64, 64, 256)
            + stage_params(4, 256, 128, 512)
            + stage_params(6, 512, 256, 1024);
        let full = trunk + stage_params(3, 1024, 512, 2048) + 2048 * classes + classes;
        (trunk, full)
    }

    #[test]
    fn hand_count_matches_known_totals() {
        assert_eq!(hand_count_resnet50(1000), (8_543_296, 25_557_032));
    }

    #[test]
    fn baseline_parameter_counts() {
        for (classes, expected) in [(1000, 25_557_032), (20, 23_549_012), (100, 23_712_932)] {
            let g = build_baseline_resnet50(classes).unwrap();
            assert_eq!(count_params(&g).unwrap().total_params, expected);
            assert_eq!(hand_count_resnet50(classes as u64).1, expected);
        }
        assert_eq!(
            build_baseline_resnet50(0).unwrap_err(),
            TopologyError::InvalidClassCount
        );
    }

    #[test]
    fn trunk_shapes_and_params() {
        let trunk = build_trunk(Backbone::Resnet50, Shape::new(3, 224, 224)).unwrap();
        let terminal = trunk.terminal_nodes();
        assert_eq!(terminal.len(), 1);
        assert_eq!(trunk.out_shape(terminal[0]).unwrap(), Shape::new(1024, 14, 14));
        assert_eq!(count_params(&trunk).unwrap().total_params, 8_543_296);
        assert!(trunk.logit_layout.is_empty());

        let small = build_trunk(Backbone::Resnet50, Shape::new(3, 32, 32)).unwrap();
        let t = small.terminal_nodes()[0].clone();
        assert_eq!(small.out_shape(&t).unwrap(), Shape::new(1024, 2, 2));
    }

    #[test]
    fn trunk_is_prefix_of_baseline() {
        let trunk = build_trunk(Backbone::Resnet50, Shape::new(3, 224, 224)).unwrap();
        let base = build_baseline_resnet50(10).unwrap();
        for (t, b) in trunk.nodes().iter().zip(base.nodes()) {
            assert_eq!(t, b);
        }
    }

    #[test]
    fn stage_output_shapes() {
        let g = build_baseline_resnet50(1000).unwrap();
        let shape = |id: &str| g.out_shape(&NodeId::from(id)).unwrap();
        assert_eq!(shape("stem.pool"), Shape::new(64, 56, 56));
        assert_eq!(shape("layer1.2.relu3"), Shape::new(256, 56, 56));
        assert_eq!(shape("layer2.3.relu3"), Shape::new(512, 28, 28));
        assert_eq!(shape("layer4.2.relu3"), Shape::new(2048, 7, 7));
        assert_eq!(shape("fc"), Shape::new(1000, 1, 1));
    }

    #[test]
    fn backbone_names() {
        assert_eq!("resnet50".parse::<Backbone>().unwrap(), Backbone::Resnet50);
        assert_eq!(
            "convnextv2".parse::<Backbone>(),
            Err(TopologyError::UnsupportedBackbone("convnextv2".into()))
        );
        for b in [Backbone::Resnet50, Backbone::Resnet50Small, Backbone::Mini] {
            assert_eq!(b.to_string().parse::<Backbone>().unwrap(), b);
        }
    }

    #[test]
    fn small_image_trunks() {
        let t = build_trunk(Backbone::Resnet50Small, Shape::new(3, 32, 32)).unwrap();
        assert_eq!(
            t.out_shape(t.terminal_nodes()[0]).unwrap(),
            Shape::new(1024, 8, 8)
        );
        let m = build_trunk(Backbone::Mini, Shape::new(1, 28, 28)).unwrap();
        assert_eq!(
            m.out_shape(m.terminal_nodes()[0]).unwrap(),
            Shape::new(128, 7, 7)
        );
    }
}
