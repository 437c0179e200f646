//! Expert subgraphs: the trunk plus only the branches that serve a chosen
//! category subset. Experts share parameter names with the graph they were
//! cut from, so one checkpoint serves every expert.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{infer, ParameterStore, RuntimeError, Scalar, Tensor};
use crate::taxonomy::{CategoryId, Taxonomy, TaxonomyError};
use crate::topology::{ComputeGraph, Layer, LogitEntry, NodeId, RowSelection, TopologyError};

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("expert category subset is empty")]
    EmptySubset,
    #[error("unknown category {0}")]
    UnknownCategory(CategoryId),
    #[error("category {0} listed twice")]
    DuplicateCategory(CategoryId),
    #[error("graph has no taxonomy-tagged branches")]
    NotAnNhlGraph,
    #[error("expert_count needs n >= 1")]
    NonPositive,
    #[error("graphs disagree: {0}")]
    GraphMismatch(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

impl From<TaxonomyError> for ExpertError {
    fn from(e: TaxonomyError) -> Self {
        match e {
            TaxonomyError::UnknownCategory(c) => ExpertError::UnknownCategory(c),
            TaxonomyError::EmptySubset => ExpertError::EmptySubset,
            other => ExpertError::Topology(other.into()),
        }
    }
}

/// Ordered, duplicate-free category subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSpec {
    categories: Vec<CategoryId>,
}

impl ExpertSpec {
    pub fn new(categories: Vec<CategoryId>, num_categories: usize) -> Result<Self, ExpertError> {
        if categories.is_empty() {
            return Err(ExpertError::EmptySubset);
        }
        let mut seen = BTreeSet::new();
        for &c in &categories {
            if c.0 >= num_categories {
                return Err(ExpertError::UnknownCategory(c));
            }
            if !seen.insert(c) {
                return Err(ExpertError::DuplicateCategory(c));
            }
        }
        Ok(ExpertSpec { categories })
    }

    /// Parses a comma separated list such as `3,17,42`.
    pub fn parse(list: &str, num_categories: usize) -> Result<Self, ExpertError> {
        let cats = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map(CategoryId)
                    .map_err(|_| ExpertError::GraphMismatch(format!("'{s}' is not a category index")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        ExpertSpec::new(cats, num_categories)
    }

    pub fn categories(&self) -> &[CategoryId] {
        &self.categories
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Keep partially needed heads whole instead of slicing their rows.
    pub keep_whole_heads: bool,
}

/// Cuts the expert for `spec` out of `full`.
///
/// Keeps every head FC that serves a requested category together with all of
/// its ancestors, which is the whole trunk and the branch chain down the
/// cover set. Node ids and attributes are unchanged except for row-sliced heads.
pub fn extract_expert(
    full: &ComputeGraph,
    tax: &Taxonomy,
    spec: &ExpertSpec,
    opts: ExtractOptions,
) -> Result<ComputeGraph, ExpertError> {
    if full.tagged_nodes().next().is_none() {
        return Err(ExpertError::NotAnNhlGraph);
    }
    for &c in spec.categories() {
        tax.leaf(c)?;
    }
    let by_category: BTreeMap<CategoryId, &LogitEntry> =
        full.logit_layout.iter().map(|e| (e.category, e)).collect();
    let mut entries = Vec::with_capacity(spec.categories().len());
    for c in spec.categories() {
        let e = by_category
            .get(c)
            .ok_or_else(|| ExpertError::GraphMismatch(format!("graph does not serve {c}")))?;
        entries.push(*e);
    }

    // Ancestor closure of the needed heads.
    let mut keep: HashSet<&NodeId> = HashSet::new();
    let mut stack: Vec<&NodeId> = entries.iter().map(|e| &e.node).collect();
    while let Some(id) = stack.pop() {
        if keep.insert(id) {
            stack.extend(full.node(id)?.preds.iter());
        }
    }

    // Needed offsets per head, ascending.
    let mut needed: BTreeMap<&NodeId, BTreeSet<usize>> = BTreeMap::new();
    for e in &entries {
        needed.entry(&e.node).or_default().insert(e.offset);
    }
    let mut new_offset: BTreeMap<(NodeId, usize), usize> = BTreeMap::new();

    let mut nodes = Vec::with_capacity(keep.len());
    for node in full.nodes() {
        if !keep.contains(&node.id) {
            continue;
        }
        let mut node = node.clone();
        if let (Some(offsets), Layer::Linear(l)) = (needed.get(&node.id), &mut node.layer) {
            let slice = !opts.keep_whole_heads && offsets.len() < l.out_features;
            for (i, &o) in offsets.iter().enumerate() {
                new_offset.insert((node.id.clone(), o), if slice { i } else { o });
            }
            if slice {
                let rows = offsets
                    .iter()
                    .map(|&o| l.rows.as_ref().map_or(o, |sel| sel.rows[o]))
                    .collect::<Vec<_>>();
                l.rows = Some(RowSelection {
                    full_out: l.stored_rows(),
                    rows,
                });
                l.out_features = offsets.len();
                node.out_shape = None;
            }
        }
        nodes.push(node);
    }

    let layout = entries
        .iter()
        .map(|e| LogitEntry {
            category: e.category,
            node: e.node.clone(),
            offset: new_offset[&(e.node.clone(), e.offset)],
        })
        .collect();
    let source = full
        .source_hash
        .clone()
        .unwrap_or_else(|| full.content_hash_hex());
    let g = ComputeGraph::from_parts(full.input_shape, nodes, layout, Some(source))?;
    Ok(g.with_shapes()?)
}

/// Number of distinct experts over `n` categories: 2^n - 1.
pub fn expert_count(n: u64) -> Result<BigUint, ExpertError> {
    if n == 0 {
        return Err(ExpertError::NonPositive);
    }
    Ok((BigUint::from(1u8) << n) - 1u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub max_abs_diff: f64,
    /// Fraction of samples whose argmax over the expert's categories agrees.
    pub argmax_agreement: f64,
}

impl EquivalenceReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_abs_diff <= tol && self.argmax_agreement == 1.0
    }
}

/// Position of the largest value; ties go to the smallest category id.
pub fn restricted_argmax<T: Scalar>(values: &[T], categories: &[CategoryId]) -> CategoryId {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] || (values[i] == values[best] && categories[i] < categories[best]) {
            best = i;
        }
    }
    categories[best]
}

/// Columns of `full`'s logits holding the categories of `expert`, in expert order.
pub fn logit_columns(full: &ComputeGraph, expert: &ComputeGraph) -> Result<Vec<usize>, ExpertError> {
    let index: BTreeMap<CategoryId, usize> = full
        .categories()
        .enumerate()
        .map(|(i, c)| (c, i))
        .collect();
    expert
        .categories()
        .map(|c| {
            index
                .get(&c)
                .copied()
                .ok_or_else(|| ExpertError::GraphMismatch(format!("full graph lacks {c}")))
        })
        .collect()
}

/// Runs both graphs in evaluation mode on every batch and compares the
/// expert's logits with the matching columns of the full model.
pub fn verify_logit_equivalence<T: Scalar>(
    full: &ComputeGraph,
    expert: &ComputeGraph,
    params: &ParameterStore<T>,
    inputs: &[Tensor<T>],
) -> Result<EquivalenceReport, ExpertError> {
    params.check_graph(full)?;
    params.check_graph(expert)?;
    let cols = logit_columns(full, expert)?;
    let cats: Vec<CategoryId> = expert.categories().collect();
    let (kf, ke) = (full.logit_layout.len(), cols.len());
    let mut samples = 0;
    let mut agree = 0;
    let mut max_abs_diff = 0f64;
    for x in inputs {
        let lf = infer(full, params, x)?;
        let le = infer(expert, params, x)?;
        for s in 0..x.batch() {
            let rf: Vec<T> = cols.iter().map(|&c| lf.data()[s * kf + c]).collect();
            let re = &le.data()[s * ke..][..ke];
            for (a, b) in rf.iter().zip(re) {
                let d = (*a - *b).abs().as_f64();
                max_abs_diff = if d.is_nan() { f64::INFINITY } else { max_abs_diff.max(d) };
            }
            if restricted_argmax(&rf, &cats) == restricted_argmax(re, &cats) {
                agree += 1;
            }
            samples += 1;
        }
    }
    Ok(EquivalenceReport {
        samples,
        max_abs_diff,
        argmax_agreement: if samples == 0 { 1.0 } else { agree as f64 / samples as f64 },
    })
}
