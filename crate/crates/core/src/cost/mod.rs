//! Static parameter and multiply-accumulate accounting.
//!
//! Counting convention:
//! - conv: `out_ch * (in_ch / groups) * kh * kw` weights (+ `out_ch` bias),
//!   `(in_ch / groups) * out_ch * kh * kw * Hout * Wout` MACs;
//! - linear: `in * out` weights (+ `out` bias) and `in * out` MACs;
//! - norm layers: `2 * C` affine parameters, running statistics excluded;
//! - pools, activations, adds and norms cost no MACs unless
//!   `include_elementwise` is set, in which case each output element counts one.

mod oracle;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::TaxNodeId;
use crate::topology::{ComputeGraph, Layer, NodeId, Shape, TopologyError};

pub use oracle::{oracle_mac_count, OracleGuard};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("shapes have not been inferred")]
    ShapesMissing,
    #[error("reports were produced under different counting conventions")]
    ConventionMismatch,
    #[error("base report has zero {0}")]
    ZeroBase(&'static str),
    #[error("unsupported report format '{0}'")]
    UnsupportedFormat(String),
    #[error("input of {pixels} pixels per channel exceeds the oracle guard of {limit}")]
    InputTooLarge { pixels: usize, limit: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("report JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Convention {
    pub include_elementwise: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<TaxNodeId>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_node: BTreeMap<NodeId, NodeCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub input_shape: Shape,
    pub convention_flags: Convention,
}

impl CostReport {
    fn from_nodes(
        per_node: BTreeMap<NodeId, NodeCost>,
        input_shape: Shape,
        convention: Convention,
    ) -> Self {
        let total_params = per_node.values().map(|c| c.params).sum();
        let total_macs = per_node.values().map(|c| c.macs).sum();
        CostReport {
            per_node,
            total_params,
            total_macs,
            input_shape,
            convention_flags: convention,
        }
    }

    /// Sub-report over the nodes matching `keep`, with totals recomputed.
    pub fn filtered(&self, keep: impl Fn(&NodeId, &NodeCost) -> bool) -> CostReport {
        let per_node = self
            .per_node
            .iter()
            .filter(|(id, c)| keep(id, c))
            .map(|(id, c)| (id.clone(), c.clone()))
            .collect();
        CostReport::from_nodes(per_node, self.input_shape, self.convention_flags)
    }

    /// Nodes that belong to some taxonomy branch (tagged nodes only).
    pub fn branch_region(&self) -> CostReport {
        self.filtered(|_, c| c.tag.is_some())
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, CostError> {
        serde_json::from_str(text).map_err(|e| CostError::Json(e.to_string()))
    }
}

fn node_cost(layer: &Layer, out: Shape, convention: Convention) -> (u64, u64) {
    let elementwise = if convention.include_elementwise {
        out.numel() as u64
    } else {
        0
    };
    match layer {
        Layer::Input => (0, 0),
        Layer::Conv2d(c) => {
            let per_out = (c.in_ch / c.groups * c.kernel[0] * c.kernel[1]) as u64;
            let params = c.out_ch as u64 * per_out + if c.has_bias { c.out_ch as u64 } else { 0 };
            let macs = per_out * c.out_ch as u64 * (out.h * out.w) as u64;
            (params, macs)
        }
        Layer::Linear(l) => {
            let weights = (l.in_features * l.out_features) as u64;
            let bias = if l.has_bias { l.out_features as u64 } else { 0 };
            (weights + bias, weights)
        }
        Layer::Batchnorm2d { channels } | Layer::LayernormChannels { channels } => {
            (2 * *channels as u64, elementwise)
        }
        Layer::Activation { .. } | Layer::Maxpool2d(_) | Layer::GlobalAvgPool | Layer::Add => {
            (0, elementwise)
        }
    }
}

fn analyze(g: &ComputeGraph, convention: Convention) -> Result<CostReport, CostError> {
    let mut per_node = BTreeMap::new();
    for n in g.nodes() {
        let out = n.out_shape.ok_or(CostError::ShapesMissing)?;
        let (params, macs) = node_cost(&n.layer, out, convention);
        per_node.insert(
            n.id.clone(),
            NodeCost {
                kind: n.layer.kind_name().to_string(),
                tag: n.tag,
                params,
                macs,
            },
        );
    }
    Ok(CostReport::from_nodes(per_node, g.input_shape, convention))
}

/// Parameter report for a shape-annotated graph. MACs are filled in at the
/// graph's own input shape under the default convention.
pub fn count_params(g: &ComputeGraph) -> Result<CostReport, CostError> {
    analyze(g, Convention::default())
}

/// Re-infers shapes at `input_shape` and counts parameters and MACs.
pub fn count_macs(
    g: &ComputeGraph,
    input_shape: Shape,
    convention: Convention,
) -> Result<CostReport, CostError> {
    if g.input_shape == input_shape && g.has_shapes() {
        return analyze(g, convention);
    }
    let mut resized = g.clone();
    resized.input_shape = input_shape;
    resized.infer_shapes()?;
    analyze(&resized, convention)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub base: CostReport,
    pub variant: CostReport,
    pub param_reduction: f64,
    pub mac_reduction: f64,
}

/// `1 - variant / base` for parameters and MACs.
pub fn reduction(base: &CostReport, variant: &CostReport) -> Result<ReductionReport, CostError> {
    if base.convention_flags != variant.convention_flags {
        return Err(CostError::ConventionMismatch);
    }
    if base.total_params == 0 {
        return Err(CostError::ZeroBase("parameters"));
    }
    if base.total_macs == 0 {
        return Err(CostError::ZeroBase("MACs"));
    }
    Ok(ReductionReport {
        base: base.clone(),
        variant: variant.clone(),
        param_reduction: 1.0 - variant.total_params as f64 / base.total_params as f64,
        mac_reduction: 1.0 - variant.total_macs as f64 / base.total_macs as f64,
    })
}

/// Renders a reduction as a signed percentage with one decimal: a 44.5 %
/// reduction prints as `-44.5%`, growth as `+x%`.
pub fn format_reduction(fraction: f64) -> String {
    let pct = (fraction * 1000.0).round() / 10.0;
    if pct == 0.0 {
        "0.0%".to_string()
    } else if pct > 0.0 {
        format!("-{pct:.1}%")
    } else {
        format!("+{:.1}%", -pct)
    }
}

pub fn format_gmacs(macs: u64) -> String {
    format!("{:.2}", macs as f64 / 1e9)
}

pub fn format_params(params: u64) -> String {
    format!("{:.1}M", params as f64 / 1e6)
}

impl ReductionReport {
    /// Rows in the layout of a model comparison table.
    pub fn table_rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("GMACs", format_gmacs(self.base.total_macs)),
            ("GMACs of expert", format_gmacs(self.variant.total_macs)),
            ("GMACs reduction", format_reduction(self.mac_reduction)),
            ("Parameter", format_params(self.base.total_params)),
            ("Parameter of expert", format_params(self.variant.total_params)),
            ("Parameter reduction", format_reduction(self.param_reduction)),
        ]
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for (metric, value) in self.table_rows() {
            let _ = writeln!(out, "{metric:<21}| {value}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(CostError::UnsupportedFormat(other.to_string())),
        }
    }
}

pub enum Report<'a> {
    Cost(&'a CostReport),
    Reduction(&'a ReductionReport),
}

fn csv_bytes(rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).expect("writing to memory");
    }
    w.into_inner().expect("flushing to memory")
}

/// Deterministic JSON or CSV bytes for a report.
pub fn export_report(report: Report<'_>, format: ReportFormat) -> Vec<u8> {
    match (report, format) {
        (Report::Cost(r), ReportFormat::Json) => r.to_json().into_bytes(),
        (Report::Reduction(r), ReportFormat::Json) => serde_json::to_string_pretty(r)
            .expect("reports serialize")
            .into_bytes(),
        (Report::Cost(r), ReportFormat::Csv) => {
            let header = ["node_id", "kind", "tag", "params", "macs"].map(String::from).to_vec();
            let body = r.per_node.iter().map(|(id, c)| {
                vec![
                    id.to_string(),
                    c.kind.clone(),
                    c.tag.map(|t| t.to_string()).unwrap_or_default(),
                    c.params.to_string(),
                    c.macs.to_string(),
                ]
            });
            let totals = vec![
                "TOTAL".to_string(),
                String::new(),
                String::new(),
                r.total_params.to_string(),
                r.total_macs.to_string(),
            ];
            csv_bytes(std::iter::once(header).chain(body).chain(std::iter::once(totals)))
        }
        (Report::Reduction(r), ReportFormat::Csv) => {
            let header = ["metric", "base", "variant", "reduction"].map(String::from).to_vec();
            let rows = [
                vec![
                    "params".to_string(),
                    r.base.total_params.to_string(),
                    r.variant.total_params.to_string(),
                    format_reduction(r.param_reduction),
                ],
                vec![
                    "macs".to_string(),
                    r.base.total_macs.to_string(),
                    r.variant.total_macs.to_string(),
                    format_reduction(r.mac_reduction),
                ],
            ];
            csv_bytes(std::iter::once(header).chain(rows))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{
        build_baseline_resnet50, Conv2d, GraphBuilder, Linear, GraphNode,
    };

    fn single(layer: Layer, input: Shape) -> ComputeGraph {
        let mut g = ComputeGraph::new(input);
        g.push(GraphNode {
            id: "n".into(),
            layer,
            preds: vec!["input".into()],
            tag: None,
            out_shape: None,
        })
        .unwrap();
        g.with_shapes().unwrap()
    }

    #[test]
    fn linear_with_bias() {
        let g = single(
            Layer::Linear(Linear {
                in_features: 2048,
                out_features: 1000,
                has_bias: true,
                rows: None,
            }),
            Shape::new(2048, 1, 1),
        );
        let r = count_params(&g).unwrap();
        assert_eq!(r.total_params, 2_049_000);
        assert_eq!(r.total_macs, 2_048_000);
    }

    #[test]
    fn conv_macs() {
        let g = single(
            Layer::Conv2d(Conv2d {
                in_ch: 64,
                out_ch: 64,
                kernel: [3, 3],
                stride: 1,
                padding: 1,
                groups: 1,
                has_bias: false,
            }),
            Shape::new(64, 56, 56),
        );
        assert_eq!(count_params(&g).unwrap().total_macs, 115_605_504);
    }

    #[test]
    fn level2_branch_block() {
        let mut g = ComputeGraph::new(Shape::new(128, 7, 7));
        let input = g.input_id().clone();
        GraphBuilder::new(&mut g)
            .bottleneck("b", &input, 128, 16, 64, 1)
            .unwrap();
        let g = g.with_shapes().unwrap();
        assert_eq!(count_params(&g).unwrap().total_params, 13_888);
    }

    #[test]
    fn resnet50_gmacs() {
        let g = build_baseline_resnet50(1000).unwrap();
        let plain = count_macs(&g, Shape::new(3, 224, 224), Convention::default()).unwrap();
        assert_eq!(format_gmacs(plain.total_macs), "4.09");
        let with_elem = count_macs(
            &g,
            Shape::new(3, 224, 224),
            Convention {
                include_elementwise: true,
            },
        )
        .unwrap();
        assert!(with_elem.total_macs > plain.total_macs);
        assert_eq!(with_elem.total_params, plain.total_params);
    }

    #[test]
    fn shapes_required() {
        let mut g = ComputeGraph::new(Shape::new(1, 4, 4));
        let input = g.input_id().clone();
        GraphBuilder::new(&mut g).relu("r", &input).unwrap();
        assert_eq!(count_params(&g).unwrap_err(), CostError::ShapesMissing);
    }

    fn report(params: u64, macs: u64) -> CostReport {
        let mut per_node = BTreeMap::new();
        per_node.insert(
            NodeId::from("x"),
            NodeCost {
                kind: "conv2d".into(),
                tag: None,
                params,
                macs,
            },
        );
        CostReport::from_nodes(per_node, Shape::new(3, 224, 224), Convention::default())
    }

    #[test]
    fn reduction_rendering() {
        let r = reduction(&report(100, 100), &report(100, 100)).unwrap();
        assert_eq!(r.param_reduction, 0.0);
        assert_eq!(format_reduction(r.mac_reduction), "0.0%");

        let r = reduction(&report(14_550, 14_550), &report(3_870, 3_870)).unwrap();
        assert_eq!(format_reduction(r.mac_reduction), "-73.4%");
        assert_eq!(format_reduction(-0.25), "+25.0%");

        assert_eq!(
            reduction(&report(0, 1), &report(1, 1)).unwrap_err(),
            CostError::ZeroBase("parameters")
        );
        let mut other = report(1, 1);
        other.convention_flags.include_elementwise = true;
        assert_eq!(
            reduction(&report(1, 1), &other).unwrap_err(),
            CostError::ConventionMismatch
        );
    }

    #[test]
    fn rounded_table_figures_admit_reported_reduction() {
        // 25M and 13.8M are rounded; the exact reduction lies between the extreme readings.
        let lo = 1.0 - 13.85 / 24.95;
        let hi = 1.0 - 13.75 / 25.05;
        assert!(lo <= 0.445 && 0.445 <= hi, "{lo} {hi}");
        let r = reduction(&report(24_860_000, 1), &report(13_800_000, 1)).unwrap();
        assert_eq!(format_reduction(r.param_reduction), "-44.5%");
    }

    #[test]
    fn csv_shapes() {
        let empty = CostReport::from_nodes(BTreeMap::new(), Shape::new(1, 1, 1), Convention::default());
        let text = String::from_utf8(export_report(Report::Cost(&empty), ReportFormat::Csv)).unwrap();
        assert_eq!(text, "node_id,kind,tag,params,macs\nTOTAL,,,0,0\n");

        let mut two = report(5, 7);
        two.per_node.insert(
            NodeId::from("y"),
            NodeCost {
                kind: "linear".into(),
                tag: Some(TaxNodeId(3)),
                params: 1,
                macs: 1,
            },
        );
        let two = CostReport::from_nodes(two.per_node, two.input_shape, two.convention_flags);
        let text = String::from_utf8(export_report(Report::Cost(&two), ReportFormat::Csv)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2], "y,linear,t3,1,1");
        assert_eq!(lines[3], "TOTAL,,,6,8");
        assert_eq!(
            "xml".parse::<ReportFormat>().unwrap_err(),
            CostError::UnsupportedFormat("xml".into())
        );
    }

    #[test]
    fn json_round_trip_totals() {
        let g = build_baseline_resnet50(20).unwrap();
        let r = count_params(&g).unwrap();
        let bytes = export_report(Report::Cost(&r), ReportFormat::Json);
        let back = CostReport::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back.total_params, r.total_params);
        assert_eq!(back.total_macs, r.total_macs);
        assert_eq!(back, r);
    }
}
