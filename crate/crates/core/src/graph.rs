//! Heterogeneous text-attributed graph: typed undirected adjacency, node
//! splits, per-target neighbor sampling and ego-graph extraction for prompts.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("relation index {0} out of range")]
    RelationIndex(usize),
    #[error("duplicate relation name `{0}`")]
    DuplicateRelation(String),
    #[error("self-loop on node {0} rejected")]
    SelfLoop(usize),
    #[error("node id {id} out of range (graph has {count} nodes)")]
    InvalidNode { id: usize, count: usize },
    #[error("node {0}: labeled nodes cannot be in the unlabeled split")]
    LabeledUnlabeled(usize),
    #[error("node {0}: train/val/test nodes need a label")]
    MissingLabel(usize),
    #[error("graph is frozen")]
    Frozen,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub text: String,
    pub label: Option<bool>,
    pub split: Split,
}

/// Undirected multi-relation graph. Mutable until [`HeteroGraph::freeze`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeteroGraph {
    nodes: Vec<NodeRecord>,
    relations: Vec<String>,
    // adjacency[relation][node] is sorted ascending and duplicate-free.
    adjacency: Vec<Vec<Vec<usize>>>,
    frozen: bool,
}

impl HeteroGraph {
    pub fn new<S: AsRef<str>>(relations: &[S]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in relations {
            if !seen.insert(r.as_ref()) {
                return Err(GraphError::DuplicateRelation(r.as_ref().to_string()));
            }
        }
        Ok(Self {
            nodes: Vec::new(),
            relations: relations.iter().map(|r| r.as_ref().to_string()).collect(),
            adjacency: vec![Vec::new(); relations.len()],
            frozen: false,
        })
    }

    pub fn add_node(&mut self, text: impl Into<String>, label: Option<bool>, split: Split) -> Result<usize> {
        if self.frozen {
            return Err(GraphError::Frozen);
        }
        let id = self.nodes.len();
        match (label, split) {
            (Some(_), Split::Unlabeled) => return Err(GraphError::LabeledUnlabeled(id)),
            (None, Split::Train | Split::Val | Split::Test) => return Err(GraphError::MissingLabel(id)),
            _ => {}
        }
        self.nodes.push(NodeRecord {
            id,
            text: text.into(),
            label,
            split,
        });
        for adj in &mut self.adjacency {
            adj.push(Vec::new());
        }
        Ok(id)
    }

    pub fn add_edge(&mut self, u: usize, v: usize, relation: &str) -> Result<()> {
        let r = self.relation_index(relation)?;
        self.add_edge_by_index(u, v, r)
    }

    pub fn add_edge_by_index(&mut self, u: usize, v: usize, r: usize) -> Result<()> {
        if self.frozen {
            return Err(GraphError::Frozen);
        }
        if r >= self.relations.len() {
            return Err(GraphError::RelationIndex(r));
        }
        self.check_node(u)?;
        self.check_node(v)?;
        if u == v {
            return Err(GraphError::SelfLoop(u));
        }
        for (a, b) in [(u, v), (v, u)] {
            let list = &mut self.adjacency[r][a];
            if let Err(pos) = list.binary_search(&b) {
                list.insert(pos, b);
            }
        }
        Ok(())
    }

    /// Disallows further mutation; the graph can then be shared across threads.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_node(&self, id: usize) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(GraphError::InvalidNode {
                id,
                count: self.nodes.len(),
            });
        }
        Ok(())
    }

    pub fn relation_index(&self, name: &str) -> Result<usize> {
        self.relations
            .iter()
            .position(|r| r == name)
            .ok_or_else(|| GraphError::UnknownRelation(name.to_string()))
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> &NodeRecord {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn text(&self, id: usize) -> &str {
        &self.nodes[id].text
    }

    pub fn neighbors(&self, v: usize, relation: &str) -> Result<&[usize]> {
        let r = self.relation_index(relation)?;
        self.check_node(v)?;
        Ok(&self.adjacency[r][v])
    }

    /// Adjacency by relation index; panics on out-of-range arguments.
    pub fn neighbors_by_index(&self, v: usize, r: usize) -> &[usize] {
        &self.adjacency[r][v]
    }

    /// Union of neighbors over all relations, sorted and deduplicated.
    pub fn all_neighbors(&self, v: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.adjacency.iter().flat_map(|adj| adj[v].iter().copied()).collect();
        set.into_iter().collect()
    }

    pub fn degree(&self, v: usize, r: usize) -> usize {
        self.adjacency[r][v].len()
    }

    /// Number of undirected edges summed over relations.
    pub fn edge_count(&self) -> usize {
        self.adjacency
            .iter()
            .map(|adj| adj.iter().map(Vec::len).sum::<usize>())
            .sum::<usize>()
            / 2
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.split == split).map(|n| n.id).collect()
    }

    pub fn labels(&self) -> Vec<Option<bool>> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    /// Samples up to `k` neighbors per (parent, relation) for `hops` hops.
    ///
    /// Randomness depends only on `(seed, target)`, so a target's sample does
    /// not change with batch composition or iteration order.
    pub fn sample_neighborhood(&self, v: usize, k: usize, hops: usize, seed: u64) -> LayeredSample {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, v as u64));
        let mut layers: Vec<Vec<SampledNode>> = Vec::with_capacity(hops);
        let mut frontier = vec![v];
        for _ in 0..hops {
            let mut layer = Vec::new();
            for (parent, &p) in frontier.iter().enumerate() {
                for (r, adj) in self.adjacency.iter().enumerate() {
                    let nbrs = &adj[p];
                    let mut picked: Vec<usize> = if nbrs.len() <= k {
                        nbrs.clone()
                    } else {
                        index::sample(&mut rng, nbrs.len(), k).into_iter().map(|i| nbrs[i]).collect()
                    };
                    picked.sort_unstable();
                    layer.extend(picked.into_iter().map(|id| SampledNode { id, parent, relation: r }));
                }
            }
            frontier = layer.iter().map(|s| s.id).collect();
            layers.push(layer);
        }
        LayeredSample {
            target: v,
            seed,
            layers,
        }
    }

    /// Target text plus neighbor texts within `depth` hops along each relation,
    /// ascending by id and capped at `cap` per relation.
    pub fn ego_graph(&self, v: usize, depth: usize, cap: usize) -> EgoGraph {
        let depth = depth.max(1);
        let mut relations = Vec::with_capacity(self.relations.len());
        for (r, name) in self.relations.iter().enumerate() {
            let mut seen = BTreeSet::from([v]);
            let mut frontier = vec![v];
            for _ in 0..depth {
                let mut next = Vec::new();
                for &u in &frontier {
                    for &w in &self.adjacency[r][u] {
                        if seen.insert(w) {
                            next.push(w);
                        }
                    }
                }
                frontier = next;
            }
            seen.remove(&v);
            let neighbors = seen
                .into_iter()
                .take(cap)
                .map(|id| (id, self.nodes[id].text.clone()))
                .collect();
            relations.push(EgoRelation {
                name: name.clone(),
                neighbors,
            });
        }
        EgoGraph {
            target: v,
            text: self.nodes[v].text.clone(),
            relations,
        }
    }

    /// Writes the line-delimited JSON graph format: header, nodes, then edges
    /// (each undirected edge once, with `u < v`).
    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            relations: self.relations.clone(),
            nodes: self.nodes.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for n in &self.nodes {
            writeln!(w, "{}", serde_json::to_string(n).expect("node serializes"))?;
        }
        for (r, adj) in self.adjacency.iter().enumerate() {
            for (u, list) in adj.iter().enumerate() {
                for &v in list.iter().filter(|&&v| v > u) {
                    let e = EdgeLine {
                        u,
                        v,
                        rel: self.relations[r].clone(),
                    };
                    writeln!(w, "{}", serde_json::to_string(&e).expect("edge serializes"))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, msg: String| GraphError::Parse { line: line + 1, msg };
        let (i, first) = lines.next().ok_or_else(|| parse_err(0, "empty graph file".into()))?;
        let header: Header = serde_json::from_str(&first?).map_err(|e| parse_err(i, e.to_string()))?;
        let mut g = HeteroGraph::new(&header.relations).map_err(|e| parse_err(i, e.to_string()))?;
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if g.nodes.len() < header.nodes {
                let n: NodeRecord = serde_json::from_str(&line).map_err(|e| parse_err(i, e.to_string()))?;
                if n.id != g.nodes.len() {
                    return Err(parse_err(i, format!("expected node id {}, found {}", g.nodes.len(), n.id)));
                }
                g.add_node(n.text, n.label, n.split).map_err(|e| parse_err(i, e.to_string()))?;
            } else {
                let e: EdgeLine = serde_json::from_str(&line).map_err(|e| parse_err(i, e.to_string()))?;
                g.add_edge(e.u, e.v, &e.rel).map_err(|err| parse_err(i, err.to_string()))?;
            }
        }
        if g.nodes.len() != header.nodes {
            return Err(parse_err(
                0,
                format!("header declares {} nodes, file has {}", header.nodes, g.nodes.len()),
            ));
        }
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    relations: Vec<String>,
    nodes: usize,
}

#[derive(Serialize, Deserialize)]
struct EdgeLine {
    u: usize,
    v: usize,
    rel: String,
}

/// SplitMix64 finalizer over a combined seed, used to derive independent
/// per-item RNG streams.
pub fn mix_seed(seed: u64, item: u64) -> u64 {
    let mut z = seed ^ item.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampledNode {
    pub id: usize,
    /// Index of the parent in the previous layer (the target for hop 1).
    pub parent: usize,
    pub relation: usize,
}

/// Sampled computation tree. `layers[h]` holds hop `h + 1`, grouped by parent,
/// then relation, then ascending id. The same node may appear several times.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayeredSample {
    pub target: usize,
    pub seed: u64,
    pub layers: Vec<Vec<SampledNode>>,
}

impl LayeredSample {
    pub fn hops(&self) -> usize {
        self.layers.len()
    }

    /// Total sampled nodes over all hops, counting repeats.
    pub fn size(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Node ids at each level, starting with the target alone at level 0.
    pub fn level_ids(&self, level: usize) -> Vec<usize> {
        if level == 0 {
            vec![self.target]
        } else {
            self.layers[level - 1].iter().map(|s| s.id).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgoRelation {
    pub name: String,
    pub neighbors: Vec<(usize, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgoGraph {
    pub target: usize,
    pub text: String,
    pub relations: Vec<EgoRelation>,
}

impl EgoGraph {
    pub fn neighbor_count(&self) -> usize {
        self.relations.iter().map(|r| r.neighbors.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(leaves: usize) -> HeteroGraph {
        let mut g = HeteroGraph::new(&["r1", "r2"]).unwrap();
        for i in 0..=leaves {
            g.add_node(format!("n{i}"), Some(i % 2 == 0), Split::Train).unwrap();
        }
        for i in 1..=leaves {
            g.add_edge(0, i, "r1").unwrap();
        }
        g
    }

    #[test]
    fn edge_is_symmetric_and_idempotent() {
        let mut g = HeteroGraph::new(&["r1"]).unwrap();
        let a = g.add_node("a", None, Split::Unlabeled).unwrap();
        let b = g.add_node("b", None, Split::Unlabeled).unwrap();
        g.add_edge(a, b, "r1").unwrap();
        g.add_edge(b, a, "r1").unwrap();
        assert_eq!(g.neighbors(a, "r1").unwrap(), &[b]);
        assert_eq!(g.neighbors(b, "r1").unwrap(), &[a]);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn rejects_bad_edges_and_labels() {
        let mut g = HeteroGraph::new(&["r1"]).unwrap();
        g.add_node("a", None, Split::Unlabeled).unwrap();
        assert!(matches!(g.add_edge(0, 0, "r1"), Err(GraphError::SelfLoop(0))));
        assert!(matches!(g.add_edge(0, 1, "r1"), Err(GraphError::InvalidNode { .. })));
        assert!(matches!(g.add_edge(0, 0, "nope"), Err(GraphError::UnknownRelation(_))));
        assert!(g.add_node("b", Some(true), Split::Unlabeled).is_err());
        assert!(g.add_node("b", None, Split::Train).is_err());
        assert!(HeteroGraph::new(&["x", "x"]).is_err());
        g.freeze();
        assert!(matches!(g.add_node("c", None, Split::Unlabeled), Err(GraphError::Frozen)));
    }

    #[test]
    fn star_sampling_and_ego_cap() {
        let g = star(5);
        let s = g.sample_neighborhood(0, 10, 1, 3);
        assert_eq!(s.level_ids(1), vec![1, 2, 3, 4, 5]);
        let ego = g.ego_graph(0, 1, 2);
        assert_eq!(ego.relations[0].neighbors.len(), 2);
        assert!(ego.relations[1].neighbors.is_empty());
    }

    #[test]
    fn isolated_node_has_empty_layers() {
        let mut g = HeteroGraph::new(&["r"]).unwrap();
        g.add_node("x", None, Split::Unlabeled).unwrap();
        let s = g.sample_neighborhood(0, 3, 2, 1);
        assert_eq!(s.size(), 0);
        assert_eq!(s.hops(), 2);
        assert_eq!(g.ego_graph(0, 1, 5).neighbor_count(), 0);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut g = star(4);
        g.add_edge(1, 2, "r2").unwrap();
        let mut buf = Vec::new();
        g.write_jsonl(&mut buf).unwrap();
        let back = HeteroGraph::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\"relations\":[\"r\"],\"nodes\":1}\n{\"id\":0,\"text\":\"a\",\"label\":null,\"split\":\"unlabeled\"}\n{\"u\":0,\"v\":0,\"rel\":\"r\"}\n";
        let err = HeteroGraph::read_jsonl(text.as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 3"), "{err}");
    }
}
