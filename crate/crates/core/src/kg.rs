//! Knowledge-graph loading: TSV triples in, adjacency and node features out.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Init, Tensor};

/// Adjacency construction used by [`build_graph`], echoed into run manifests.
pub const ADJACENCY_NORMALIZATION: &str = "symmetric binary + self-loops, row-normalized by degree+1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self { head: head.into(), relation: relation.into(), tail: tail.into() }
    }
}

/// Parses `head<TAB>relation<TAB>tail` lines. Blank lines and lines starting
/// with `#` are skipped; fields are trimmed. Line numbers in errors are 1-based.
pub fn parse_triples(text: &str) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
            return Err(Error::Parse { line, message: format!("field {} is empty", pos + 1) });
        }
        out.push(Triple::new(fields[0], fields[1], fields[2]));
    }
    Ok(out)
}

pub fn serialize_triples(triples: &[Triple]) -> String {
    let mut s = String::new();
    for t in triples {
        s.push_str(&t.head);
        s.push('\t');
        s.push_str(&t.relation);
        s.push('\t');
        s.push_str(&t.tail);
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    node_ids: Vec<String>,
    node_index: HashMap<String, usize>,
    triples: Vec<Triple>,
    /// Row-normalized `n x n` adjacency.
    pub adjacency: Tensor,
    /// Initial `n x d_k` node features.
    pub features: Tensor,
}

/// Collects nodes in first-appearance order and builds the normalized
/// adjacency plus xavier-initialized features.
pub fn build_graph(triples: &[Triple], feature_dim: usize, seed: u64) -> Result<KnowledgeGraph> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument("knowledge graph needs at least one triple".into()));
    }
    if feature_dim == 0 {
        return Err(Error::InvalidArgument("feature_dim must be >= 1".into()));
    }
    let mut node_ids = Vec::new();
    let mut node_index = HashMap::new();
    for t in triples {
        for id in [&t.head, &t.tail] {
            if !node_index.contains_key(id) {
                node_index.insert(id.clone(), node_ids.len());
                node_ids.push(id.clone());
            }
        }
    }
    let n = node_ids.len();
    let mut binary = vec![0.0; n * n];
    for i in 0..n {
        binary[i * n + i] = 1.0;
    }
    for t in triples {
        let (h, tl) = (node_index[&t.head], node_index[&t.tail]);
        binary[h * n + tl] = 1.0;
        binary[tl * n + h] = 1.0;
    }
    for row in binary.chunks_mut(n) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    let adjacency = Tensor::new(vec![n, n], binary)?;
    let features = Tensor::create(&[n, feature_dim], Init::Xavier { seed })?.with_requires_grad(true);
    Ok(KnowledgeGraph { node_ids, node_index, triples: triples.to_vec(), adjacency, features })
}

impl KnowledgeGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Undirected, deduplicated edges between distinct nodes, as `(low, high)` pairs.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        self.triples
            .iter()
            .filter_map(|t| {
                let (a, b) = (self.node_index[&t.head], self.node_index[&t.tail]);
                (a != b).then(|| (a.min(b), a.max(b)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub n_nodes: usize,
    pub n_edges: usize,
    /// degree -> number of nodes with that degree
    pub degree_histogram: BTreeMap<usize, usize>,
}

pub fn subgraph_stats(g: &KnowledgeGraph) -> GraphStats {
    let edges = g.edges();
    let mut degree = vec![0usize; g.n_nodes()];
    for &(a, b) in &edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut degree_histogram = BTreeMap::new();
    for d in degree {
        *degree_histogram.entry(d).or_insert(0) += 1;
    }
    GraphStats { n_nodes: g.n_nodes(), n_edges: edges.len(), degree_histogram }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_single_and_whitespace() {
        let t = parse_triples("cat\tis_a\tanimal").unwrap();
        assert_eq!(t, vec![Triple::new("cat", "is_a", "animal")]);
        let t = parse_triples("# comment\n\n a\tr\tb ").unwrap();
        assert_eq!(t, vec![Triple::new("a", "r", "b")]);
    }

    #[test]
    fn parse_reports_line_number() {
        let err = parse_triples("a\tr\tb\nbroken line\nc\tr\td").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_triples("a\t\tb").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_triples("a\tr\tb\tc").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn parse_keeps_duplicates() {
        let t = parse_triples("a\tr\tb\na\tr\tb\n").unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn two_node_adjacency() {
        let g = build_graph(&[Triple::new("a", "r", "b")], 4, 1).unwrap();
        assert_eq!(g.n_nodes(), 2);
        assert_eq!(g.adjacency.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(g.features.shape(), &[2, 4]);
        assert!(g.features.requires_grad());
    }

    #[test]
    fn self_loop_only() {
        let g = build_graph(&[Triple::new("a", "r", "a")], 2, 1).unwrap();
        assert_eq!(g.adjacency.data(), &[1.0]);
    }

    #[test]
    fn duplicate_relations_collapse() {
        let single = build_graph(&[Triple::new("a", "r", "b")], 2, 1).unwrap();
        let double = build_graph(&[Triple::new("a", "r", "b"), Triple::new("a", "s", "b")], 2, 1).unwrap();
        assert_eq!(single.adjacency, double.adjacency);
    }

    #[test]
    fn empty_graph_rejected() {
        assert!(build_graph(&[], 2, 0).is_err());
    }

    #[test]
    fn stats_small_cases() {
        let g = build_graph(&[Triple::new("a", "r", "b")], 2, 0).unwrap();
        let s = subgraph_stats(&g);
        assert_eq!((s.n_nodes, s.n_edges), (2, 1));
        let tri = [Triple::new("a", "r", "b"), Triple::new("b", "r", "c"), Triple::new("c", "r", "a")];
        let s = subgraph_stats(&build_graph(&tri, 2, 0).unwrap());
        assert_eq!(s.degree_histogram, BTreeMap::from([(2, 3)]));
    }

    #[test]
    fn node_order_is_first_appearance() {
        let g = build_graph(&[Triple::new("z", "r", "y"), Triple::new("x", "r", "z")], 2, 0).unwrap();
        assert_eq!(g.node_ids(), &["z", "y", "x"]);
        assert_eq!(g.index_of("x"), Some(2));
    }
}
