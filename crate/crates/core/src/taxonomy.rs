//! Category hierarchy that drives branch construction and expert extraction.
//!
//! A taxonomy is a rooted tree. The root is synthetic (level 0) and never owns
//! a branch; its children are the level-1 super-categories. Leaves carry the
//! class indices `0..N` and every downstream ordering (branch ids, logit
//! layout) follows document order.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_LEVELS: usize = 3;

/// Class index of a leaf category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub usize);

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Preorder position of a node in its taxonomy. The root is always `TaxNodeId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaxNodeId(pub usize);

impl TaxNodeId {
    pub const ROOT: TaxNodeId = TaxNodeId(0);
}

impl fmt::Display for TaxNodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("malformed taxonomy document: {0}")]
    MalformedDocument(String),
    #[error("class index {0} is used by more than one leaf")]
    DuplicateClassIndex(usize),
    #[error("leaf '{0}' has no class_index")]
    MissingClassIndex(String),
    #[error("class indices are not contiguous: {0} is missing")]
    IndexGap(usize),
    #[error("leaf '{name}' sits at level {level}, deeper than max_levels {max_levels}")]
    DepthExceeded {
        name: String,
        level: usize,
        max_levels: usize,
    },
    #[error("sibling name '{0}' appears twice under the same parent")]
    DuplicateSiblingName(String),
    #[error("taxonomy has no categories")]
    EmptyTaxonomy,
    #[error("unknown category {0}")]
    UnknownCategory(CategoryId),
    #[error("unknown taxonomy node {0}")]
    UnknownNode(TaxNodeId),
    #[error("category subset is empty")]
    EmptySubset,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxNode {
    pub id: TaxNodeId,
    pub name: String,
    pub level: usize,
    pub parent: Option<TaxNodeId>,
    pub children: Vec<TaxNodeId>,
    pub class_index: Option<CategoryId>,
}

impl TaxNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Validated, immutable category tree stored as a preorder arena.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    nodes: Vec<TaxNode>,
    leaf_of: Vec<TaxNodeId>,
    max_levels: usize,
}

/// On-disk form of a node.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocNode {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    children: Option<Vec<DocNode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_index: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(default = "default_max_levels")]
    max_levels: usize,
    root: DocNode,
}

fn default_max_levels() -> usize {
    DEFAULT_MAX_LEVELS
}

/// Parses and validates a taxonomy JSON document.
pub fn parse_taxonomy(document_text: &str) -> Result<Taxonomy, TaxonomyError> {
    let doc: Document = serde_json::from_str(document_text)
        .map_err(|e| TaxonomyError::MalformedDocument(e.to_string()))?;
    Taxonomy::from_document(doc)
}

impl Taxonomy {
    fn from_document(doc: Document) -> Result<Self, TaxonomyError> {
        if doc.max_levels == 0 {
            return Err(TaxonomyError::MalformedDocument(
                "max_levels must be at least 1".into(),
            ));
        }
        if doc.root.class_index.is_some() {
            return Err(TaxonomyError::MalformedDocument(
                "the root cannot carry a class_index".into(),
            ));
        }
        match &doc.root.children {
            Some(c) if !c.is_empty() => {}
            _ => return Err(TaxonomyError::EmptyTaxonomy),
        }

        let mut nodes = Vec::new();
        flatten(&doc.root, None, 0, doc.max_levels, &mut nodes)?;

        let leaves: Vec<&TaxNode> = nodes.iter().filter(|n| n.is_leaf()).collect();
        let n = leaves.len();
        let mut seen = std::collections::BTreeSet::new();
        for leaf in &leaves {
            let idx = leaf.class_index.expect("leaf index checked in flatten").0;
            if !seen.insert(idx) {
                return Err(TaxonomyError::DuplicateClassIndex(idx));
            }
        }
        let mut leaf_of = vec![None; n];
        for leaf in &leaves {
            let idx = leaf.class_index.expect("leaf index checked in flatten").0;
            if idx >= n {
                // Distinct indices with one at or beyond N leave a hole below N.
                let missing = (0..n).find(|i| !seen.contains(i)).unwrap_or(0);
                return Err(TaxonomyError::IndexGap(missing));
            }
            leaf_of[idx] = Some(leaf.id);
        }
        let leaf_of = leaf_of
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or(TaxonomyError::IndexGap(i)))
            .collect::<Result<Vec<_>, _>>()?;

        Ok(Taxonomy {
            nodes,
            leaf_of,
            max_levels: doc.max_levels,
        })
    }

    /// Serializes back to the document format.
    pub fn to_json(&self) -> String {
        let doc = Document {
            max_levels: self.max_levels,
            root: self.doc_node(TaxNodeId::ROOT),
        };
        serde_json::to_string_pretty(&doc).expect("taxonomy documents always serialize")
    }

    fn doc_node(&self, id: TaxNodeId) -> DocNode {
        let node = &self.nodes[id.0];
        DocNode {
            name: node.name.clone(),
            children: (!node.is_leaf())
                .then(|| node.children.iter().map(|c| self.doc_node(*c)).collect()),
            class_index: node.class_index.map(|c| c.0 as i64),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.leaf_of.len()
    }

    pub fn max_levels(&self) -> usize {
        self.max_levels
    }

    pub fn root(&self) -> &TaxNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: TaxNodeId) -> Result<&TaxNode, TaxonomyError> {
        self.nodes.get(id.0).ok_or(TaxonomyError::UnknownNode(id))
    }

    /// All nodes in preorder (document order), root first.
    pub fn nodes(&self) -> &[TaxNode] {
        &self.nodes
    }

    /// Non-root, non-leaf nodes in preorder.
    pub fn internal_nodes(&self) -> impl Iterator<Item = &TaxNode> {
        self.nodes[1..].iter().filter(|n| !n.is_leaf())
    }

    pub fn leaf(&self, c: CategoryId) -> Result<&TaxNode, TaxonomyError> {
        self.leaf_of
            .get(c.0)
            .map(|id| &self.nodes[id.0])
            .ok_or(TaxonomyError::UnknownCategory(c))
    }

    pub fn max_leaf_level(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| n.level)
            .max()
            .unwrap_or(0)
    }

    /// Finds a node by its chain of names below the root.
    pub fn find_path(&self, names: &[&str]) -> Option<TaxNodeId> {
        let mut cur = TaxNodeId::ROOT;
        for name in names {
            cur = *self.nodes[cur.0]
                .children
                .iter()
                .find(|c| self.nodes[c.0].name == *name)?;
        }
        Some(cur)
    }

    /// Internal nodes from level 1 down to the leaf's parent.
    pub fn ancestor_path(&self, c: CategoryId) -> Result<Vec<TaxNodeId>, TaxonomyError> {
        let leaf = self.leaf(c)?;
        let mut path = Vec::with_capacity(leaf.level.saturating_sub(1));
        let mut cur = leaf.parent;
        while let Some(id) = cur {
            if id == TaxNodeId::ROOT {
                break;
            }
            path.push(id);
            cur = self.nodes[id.0].parent;
        }
        path.reverse();
        Ok(path)
    }

    /// Union of ancestor paths over `subset`: the internal nodes an expert keeps.
    pub fn cover_set(&self, subset: &[CategoryId]) -> Result<BTreeSet<TaxNodeId>, TaxonomyError> {
        if subset.is_empty() {
            return Err(TaxonomyError::EmptySubset);
        }
        let mut cover = BTreeSet::new();
        for &c in subset {
            cover.extend(self.ancestor_path(c)?);
        }
        Ok(cover)
    }

    /// Leaf class indices in the subtree of `id`, in document order.
    pub fn leaves_under(&self, id: TaxNodeId) -> Result<Vec<CategoryId>, TaxonomyError> {
        self.node(id)?;
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            let node = &self.nodes[cur.0];
            if let Some(c) = node.class_index {
                out.push(c);
            }
            stack.extend(node.children.iter().rev());
        }
        Ok(out)
    }
}

fn flatten(
    doc: &DocNode,
    parent: Option<TaxNodeId>,
    level: usize,
    max_levels: usize,
    out: &mut Vec<TaxNode>,
) -> Result<TaxNodeId, TaxonomyError> {
    let id = TaxNodeId(out.len());
    let class_index = match (&doc.children, doc.class_index) {
        (Some(_), Some(_)) => {
            return Err(TaxonomyError::MalformedDocument(format!(
                "node '{}' has both children and a class_index",
                doc.name
            )))
        }
        (Some(children), None) if children.is_empty() => {
            return Err(TaxonomyError::MalformedDocument(format!(
                "internal node '{}' has an empty children list",
                doc.name
            )))
        }
        (Some(_), None) => None,
        (None, None) => return Err(TaxonomyError::MissingClassIndex(doc.name.clone())),
        (None, Some(i)) if i < 0 => {
            return Err(TaxonomyError::MalformedDocument(format!(
                "leaf '{}' has negative class_index {i}",
                doc.name
            )))
        }
        (None, Some(i)) => {
            if level > max_levels {
                return Err(TaxonomyError::DepthExceeded {
                    name: doc.name.clone(),
                    level,
                    max_levels,
                });
            }
            Some(CategoryId(i as usize))
        }
    };
    out.push(TaxNode {
        id,
        name: doc.name.clone(),
        level,
        parent,
        children: Vec::new(),
        class_index,
    });
    if let Some(children) = &doc.children {
        let mut seen = HashSet::new();
        for child in children {
            if !seen.insert(child.name.as_str()) {
                return Err(TaxonomyError::DuplicateSiblingName(child.name.clone()));
            }
            let cid = flatten(child, Some(id), level + 1, max_levels, out)?;
            out[id.0].children.push(cid);
        }
    }
    Ok(id)
}
