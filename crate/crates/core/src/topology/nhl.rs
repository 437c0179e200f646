//! Nested high-level branches attached to a trunk.
//!
//! Every branch block is tagged with the taxonomy node that owns it. Children
//! consume their parent's branch output, level-1 branches consume the split
//! point. Branches only meet again in the logit vector.

use std::collections::HashMap;
use std::str::FromStr;

use super::{ComputeGraph, GraphBuilder, LogitEntry, NodeId, TopologyError};
use crate::taxonomy::{TaxNodeId, Taxonomy};

/// Where logits are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadPlacement {
    /// Every taxonomy node below the root owns a branch block, leaves
    /// included; each leaf branch ends in its own single-output FC.
    #[default]
    PerLeaf,
    /// Only internal nodes own branch blocks; each internal node with leaf
    /// children gets one FC emitting a logit per leaf child.
    GroupHeads,
}

impl FromStr for HeadPlacement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-leaf" => Ok(HeadPlacement::PerLeaf),
            "group" => Ok(HeadPlacement::GroupHeads),
            _ => Err(format!("unknown head placement '{s}' (per-leaf|group)")),
        }
    }
}

/// Attachment point of the level-1 branches. Only the trunk output exists today.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitPoint {
    #[default]
    TrunkOutput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchConfig {
    /// Branch output channels per hierarchy level.
    pub channel_schedule: Vec<usize>,
    pub blocks_per_node: usize,
    pub level1_stride: usize,
    /// Divisor from branch width to bottleneck mid channels.
    pub bottleneck_reduction: usize,
    pub head_placement: HeadPlacement,
    pub split_point: SplitPoint,
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig {
            channel_schedule: vec![128, 64, 32],
            blocks_per_node: 1,
            level1_stride: 2,
            bottleneck_reduction: 4,
            head_placement: HeadPlacement::PerLeaf,
            split_point: SplitPoint::TrunkOutput,
        }
    }
}

impl BranchConfig {
    fn check(&self, tax: &Taxonomy) -> Result<(), TopologyError> {
        let bad = |m: &str| Err(TopologyError::InvalidBranchConfig(m.to_string()));
        if self.blocks_per_node == 0 {
            return bad("blocks_per_node must be at least 1");
        }
        if self.level1_stride == 0 {
            return bad("level1_stride must be at least 1");
        }
        if self.bottleneck_reduction == 0 {
            return bad("bottleneck_reduction must be at least 1");
        }
        if let Some(w) = self
            .channel_schedule
            .iter()
            .find(|w| **w < self.bottleneck_reduction)
        {
            return bad(&format!(
                "width {w} leaves no mid channels at reduction {}",
                self.bottleneck_reduction
            ));
        }
        let need = match self.head_placement {
            HeadPlacement::PerLeaf => tax.max_leaf_level(),
            HeadPlacement::GroupHeads => tax.max_leaf_level() - 1,
        };
        if self.channel_schedule.len() < need {
            return Err(TopologyError::ScheduleTooShort {
                need,
                have: self.channel_schedule.len(),
            });
        }
        Ok(())
    }
}

fn unit_prefix(t: TaxNodeId, unit: usize) -> String {
    format!("branch.{t}.{unit}")
}

/// Builds the hierarchical graph: the trunk plus one branch region per owning taxonomy node.
pub fn build_nhl(
    trunk: &ComputeGraph,
    tax: &Taxonomy,
    cfg: &BranchConfig,
) -> Result<ComputeGraph, TopologyError> {
    cfg.check(tax)?;
    if !trunk.logit_layout.is_empty() {
        return Err(TopologyError::TrunkNotTerminal(trunk.terminal_nodes().len()));
    }
    let mut g = trunk.clone().with_shapes()?;
    let split = match g.terminal_nodes()[..] {
        [t] => t.clone(),
        ref ts => return Err(TopologyError::TrunkNotTerminal(ts.len())),
    };
    let split_ch = g.out_shape(&split)?.c;

    // Branch output (node, channels) per taxonomy node.
    let mut outputs: HashMap<TaxNodeId, (NodeId, usize)> = HashMap::new();
    let mut layout = Vec::with_capacity(tax.num_categories());
    let mut b = GraphBuilder::new(&mut g);

    for t in &tax.nodes()[1..] {
        let owns_block = match cfg.head_placement {
            HeadPlacement::PerLeaf => true,
            HeadPlacement::GroupHeads => !t.is_leaf(),
        };
        if !owns_block {
            if t.level == 1 {
                return Err(TopologyError::UnbranchedLeaf(
                    t.class_index.expect("leaf carries an index"),
                ));
            }
            continue;
        }
        let (input, in_ch) = if t.level == 1 {
            (split.clone(), split_ch)
        } else {
            outputs[&t.parent.expect("non-root nodes have parents")].clone()
        };
        let width = cfg.channel_schedule[t.level - 1];
        let mid = width / cfg.bottleneck_reduction;
        let stride = if t.level == 1 { cfg.level1_stride } else { 1 };

        b.set_tag(Some(t.id));
        let mut x = input;
        let mut ch = in_ch;
        for unit in 0..cfg.blocks_per_node {
            let s = if unit == 0 { stride } else { 1 };
            x = b.bottleneck(&unit_prefix(t.id, unit), &x, ch, mid, width, s)?;
            ch = width;
        }

        let head_rows: Vec<_> = match cfg.head_placement {
            HeadPlacement::PerLeaf => t.class_index.into_iter().collect(),
            HeadPlacement::GroupHeads => t
                .children
                .iter()
                .filter_map(|c| tax.nodes()[c.0].class_index)
                .collect(),
        };
        if !head_rows.is_empty() {
            let pool = b.global_avg_pool(format!("head.{}.pool", t.id), &x)?;
            let fc = b.linear(format!("head.{}.fc", t.id), &pool, width, head_rows.len())?;
            layout.extend(head_rows.into_iter().enumerate().map(|(offset, category)| {
                LogitEntry {
                    category,
                    node: fc.clone(),
                    offset,
                }
            }));
        }
        outputs.insert(t.id, (x, width));
    }

    layout.sort_by_key(|e| e.category);
    g.logit_layout = layout;
    g.with_shapes()
}
