//! The global label hierarchy and per-instance local hierarchies.
//!
//! Labels are addressed internally by their position in the taxonomy file
//! (`usize`). That position is also the label order used within a depth.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::DatasetSplit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelNode {
    pub id: String,
    pub name: String,
    pub parent: Option<String>,
    pub depth: usize,
}

/// One record of the taxonomy JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyRecord {
    pub id: String,
    pub name: String,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TaxonomyRecord>", into = "Vec<TaxonomyRecord>")]
pub struct Taxonomy {
    nodes: Vec<LabelNode>,
    parents: Vec<Option<usize>>,
    index: HashMap<String, usize>,
    depth_sets: Vec<Vec<usize>>,
    /// position of each label inside its depth set
    slot: Vec<usize>,
}

impl Taxonomy {
    pub fn from_records(records: Vec<TaxonomyRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyTaxonomy);
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateLabel(r.id.clone()));
            }
        }
        let parents = records
            .iter()
            .map(|r| match &r.parent {
                None => Ok(None),
                Some(p) => index.get(p).copied().map(Some).ok_or_else(|| Error::DanglingParent {
                    id: r.id.clone(),
                    parent: p.clone(),
                }),
            })
            .collect::<Result<Vec<_>>>()?;

        // 0 = unresolved
        let mut depth = vec![0usize; records.len()];
        for start in 0..records.len() {
            let mut chain = Vec::new();
            let mut cur = start;
            while depth[cur] == 0 {
                if chain.contains(&cur) {
                    return Err(Error::Cycle(records[cur].id.clone()));
                }
                chain.push(cur);
                match parents[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            let mut d = if depth[cur] == 0 { 0 } else { depth[cur] };
            for &n in chain.iter().rev() {
                d += 1;
                depth[n] = d;
            }
        }

        let max_depth = depth.iter().copied().max().unwrap_or(1);
        let mut depth_sets = vec![Vec::new(); max_depth];
        let mut slot = vec![0; records.len()];
        for (i, &d) in depth.iter().enumerate() {
            slot[i] = depth_sets[d - 1].len();
            depth_sets[d - 1].push(i);
        }
        let nodes = records
            .into_iter()
            .zip(&depth)
            .map(|(r, &d)| LabelNode {
                id: r.id,
                name: r.name,
                parent: r.parent,
                depth: d,
            })
            .collect();
        Ok(Self {
            nodes,
            parents,
            index,
            depth_sets,
            slot,
        })
    }

    /// Parse the taxonomy JSON format: an array of `{"id", "name", "parent"}`.
    pub fn from_json(source: &str) -> Result<Self> {
        let records: Vec<TaxonomyRecord> =
            serde_json::from_str(source).map_err(|e| Error::MalformedTaxonomy(e.to_string()))?;
        Self::from_records(records)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records()).expect("taxonomy records serialize")
    }

    pub fn records(&self) -> Vec<TaxonomyRecord> {
        self.nodes
            .iter()
            .map(|n| TaxonomyRecord {
                id: n.id.clone(),
                name: n.name.clone(),
                parent: n.parent.clone(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.depth_sets.len()
    }

    pub fn nodes(&self) -> &[LabelNode] {
        &self.nodes
    }

    pub fn node(&self, label: usize) -> &LabelNode {
        &self.nodes[label]
    }

    pub fn lookup(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(id.to_string()))
    }

    pub fn parent(&self, label: usize) -> Option<usize> {
        self.parents[label]
    }

    /// 1-based depth.
    pub fn depth(&self, label: usize) -> usize {
        self.nodes[label].depth
    }

    /// Labels of depth `d` (1-based) in label order.
    pub fn depth_set(&self, d: usize) -> &[usize] {
        &self.depth_sets[d - 1]
    }

    pub fn depth_sets(&self) -> &[Vec<usize>] {
        &self.depth_sets
    }

    /// Position of `label` within its depth set.
    pub fn slot(&self, label: usize) -> usize {
        self.slot[label]
    }

    pub fn children(&self, label: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(label))
            .map(|(i, _)| i)
    }

    pub fn is_leaf(&self, label: usize) -> bool {
        self.children(label).next().is_none()
    }

    /// Labels from the top-level ancestor down to `label`.
    pub fn root_path(&self, label: usize) -> Vec<usize> {
        let mut path = vec![label];
        let mut cur = label;
        while let Some(p) = self.parents[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Build the local hierarchy of `labels`. With `auto_close` every missing
    /// ancestor is added (and logged); otherwise a missing ancestor is an error.
    pub fn local_hierarchy<S: AsRef<str>>(&self, labels: &[S], auto_close: bool) -> Result<LocalHierarchy> {
        let given = labels
            .iter()
            .map(|id| self.lookup(id.as_ref()))
            .collect::<Result<BTreeSet<_>>>()?;
        self.local_hierarchy_from_indices(given, auto_close)
    }

    pub fn local_hierarchy_from_indices(
        &self,
        given: BTreeSet<usize>,
        auto_close: bool,
    ) -> Result<LocalHierarchy> {
        let mut closed = given.clone();
        for &label in &given {
            let mut cur = label;
            while let Some(p) = self.parents[cur] {
                if !given.contains(&p) {
                    if !auto_close {
                        return Err(Error::NotAncestorClosed {
                            id: self.nodes[cur].id.clone(),
                            parent: self.nodes[p].id.clone(),
                        });
                    }
                    if closed.insert(p) {
                        log::warn!(
                            "closing label set: adding ancestor `{}` of `{}`",
                            self.nodes[p].id,
                            self.nodes[label].id
                        );
                    }
                }
                cur = p;
            }
        }
        let mut per_depth = vec![Vec::new(); self.max_depth()];
        // BTreeSet iterates in file order, which is label order within a depth
        for &label in &closed {
            per_depth[self.depth(label) - 1].push(label);
        }
        Ok(LocalHierarchy {
            labels: closed,
            per_depth,
        })
    }
}

impl TryFrom<Vec<TaxonomyRecord>> for Taxonomy {
    type Error = Error;

    fn try_from(records: Vec<TaxonomyRecord>) -> Result<Self> {
        Self::from_records(records)
    }
}

impl From<Taxonomy> for Vec<TaxonomyRecord> {
    fn from(tax: Taxonomy) -> Self {
        tax.records()
    }
}

/// An instance's ancestor-closed label subtree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LocalHierarchy {
    labels: BTreeSet<usize>,
    per_depth: Vec<Vec<usize>>,
}

impl LocalHierarchy {
    pub fn labels(&self) -> &BTreeSet<usize> {
        &self.labels
    }

    pub fn contains(&self, label: usize) -> bool {
        self.labels.contains(&label)
    }

    /// Gold labels at depth `d` (1-based), in label order.
    pub fn at_depth(&self, d: usize) -> &[usize] {
        &self.per_depth[d - 1]
    }

    pub fn per_depth(&self) -> &[Vec<usize>] {
        &self.per_depth
    }

    /// Deepest depth holding a gold label.
    pub fn deepest(&self) -> usize {
        self.per_depth
            .iter()
            .rposition(|v| !v.is_empty())
            .map_or(0, |d| d + 1)
    }

    pub fn ids<'a>(&self, tax: &'a Taxonomy) -> Vec<&'a str> {
        self.labels.iter().map(|&l| tax.node(l).id.as_str()).collect()
    }
}

/// Bucket index per label from its gold-occurrence count in `corpus`.
/// A count `c` lands in bucket `#{e in edges : e <= c}`.
pub fn label_frequency_buckets(tax: &Taxonomy, corpus: &DatasetSplit, bucket_edges: &[usize]) -> Result<Vec<usize>> {
    if bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::BucketEdges);
    }
    let counts = label_counts(tax, corpus);
    Ok(counts
        .iter()
        .map(|&c| bucket_edges.partition_point(|&e| e <= c))
        .collect())
}

pub fn label_counts(tax: &Taxonomy, corpus: &DatasetSplit) -> Vec<usize> {
    let mut counts = vec![0usize; tax.len()];
    for inst in corpus.instances() {
        for &l in inst.labels.labels() {
            counts[l] += 1;
        }
    }
    counts
}
