//! The immutable graph model shared by every other module.
//!
//! A [`HonGraph`] stores nodes of any order up to `k`, weighted directed
//! adjacency in both directions, and the higher-order family index: for each
//! entity `u`, the list of nodes whose base is `u` (order-1 node first, then
//! conditional nodes sorted by their context tokens).
//!
//! The interchange format is a TSV edge list:
//!
//! ```text
//! #hon k=2
//! A	C|A	16
//! C|A	D	14
//! ```
//!
//! A conditional node is written as its base token, `|`, then its context
//! tokens oldest first joined by `,` (`D|A,C` is D reached via A then C).
//! Weights use Rust's shortest round-trip decimal rendering. Nodes without
//! any incident edge are written as single-field lines so that a round trip
//! preserves the node set.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{is_valid_token, EntityId, EntityIndex};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing or malformed `#hon k=<k>` header")]
    BadHeader,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: token {token:?} is not a valid entity name")]
    ReservedCharacter { line: usize, token: String },
    #[error("line {line}: node {node:?} has order {order} > k={k}")]
    OrderTooHigh {
        line: usize,
        node: String,
        order: usize,
        k: usize,
    },
    #[error("line {line}: unknown entity {token:?}")]
    UnknownToken { line: usize, token: String },
    #[error("entity {0} is not present in the graph")]
    UnknownEntity(String),
    #[error("edge weight must be positive and finite, got {0}")]
    BadWeight(f64),
    #[error("feature file line {line}: {reason}")]
    BadFeatures { line: usize, reason: String },
}

/// Dense index of a node in a [`HonGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// A base entity together with the predecessors it is conditioned on,
/// oldest first. An empty context is the order-1 node.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HonNode {
    pub base: EntityId,
    pub context: Vec<EntityId>,
}

impl HonNode {
    pub fn first_order(base: EntityId) -> Self {
        HonNode {
            base,
            context: Vec::new(),
        }
    }

    pub fn conditional(base: EntityId, context: Vec<EntityId>) -> Self {
        HonNode { base, context }
    }

    /// Length of the sequence the node encodes.
    pub fn order(&self) -> usize {
        self.context.len() + 1
    }

    pub fn is_conditional(&self) -> bool {
        !self.context.is_empty()
    }

    /// Pipe notation, e.g. `C|A` or `D|A,C`.
    pub fn token(&self, index: &EntityIndex) -> String {
        let mut s = index.token(self.base).to_string();
        if !self.context.is_empty() {
            s.push('|');
            let ctx: Vec<&str> = self.context.iter().map(|&e| index.token(e)).collect();
            s.push_str(&ctx.join(","));
        }
        s
    }
}

/// Node input features. Every member of a family shares its base entity's
/// vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    /// One-hot encoding of the base entity id.
    Identity,
    /// One row per entity.
    Dense { dim: usize, rows: Vec<Vec<f64>> },
}

impl Features {
    pub fn dim(&self, n_entities: usize) -> usize {
        match self {
            Features::Identity => n_entities,
            Features::Dense { dim, .. } => *dim,
        }
    }

    /// Sparse `(index, value)` view of an entity's feature vector.
    pub fn sparse_row(&self, e: EntityId) -> Vec<(usize, f64)> {
        match self {
            Features::Identity => vec![(e.idx(), 1.0)],
            Features::Dense { rows, .. } => rows[e.idx()]
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, &v)| (i, v))
                .collect(),
        }
    }

    /// Parses `entity<TAB>v1<TAB>v2...` rows. Entities without a row get
    /// zeros.
    pub fn parse_dense(text: &str, index: &EntityIndex) -> Result<Self, GraphError> {
        let mut dim = None;
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; index.len()];
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| GraphError::BadFeatures {
                line: lineno + 1,
                reason,
            };
            let mut fields = line.split('\t');
            let token = fields.next().unwrap_or_default();
            let Some(e) = index.get(token) else {
                return Err(bad(format!("unknown entity {token:?}")));
            };
            let values = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|err| bad(err.to_string()))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(bad(format!("expected {d} values, found {}", values.len())))
                }
                _ => {}
            }
            rows[e.idx()] = Some(values);
        }
        let dim = dim.unwrap_or(0);
        Ok(Features::Dense {
            dim,
            rows: rows
                .into_iter()
                .map(|r| r.unwrap_or_else(|| vec![0.0; dim]))
                .collect(),
        })
    }
}

/// Directed weighted higher-order network with its family index.
#[derive(Clone, Debug)]
pub struct HonGraph {
    k: usize,
    entities: EntityIndex,
    nodes: Vec<HonNode>,
    lookup: HashMap<HonNode, NodeId>,
    out_adj: Vec<Vec<(NodeId, f64)>>,
    in_adj: Vec<Vec<(NodeId, f64)>>,
    out_cum: Vec<Vec<f64>>,
    in_cum: Vec<Vec<f64>>,
    families: Vec<Vec<NodeId>>,
    n_edges: usize,
    features: Features,
}

/// Accumulates nodes and edge weights, then canonicalizes them into a
/// [`HonGraph`].
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    k: usize,
    entities: EntityIndex,
    nodes: HashMap<HonNode, usize>,
    node_list: Vec<HonNode>,
    edges: HashMap<(usize, usize), f64>,
}

impl GraphBuilder {
    pub fn new(k: usize, entities: EntityIndex) -> Self {
        GraphBuilder {
            k,
            entities,
            nodes: HashMap::new(),
            node_list: Vec::new(),
            edges: HashMap::new(),
        }
    }

    pub fn entities_mut(&mut self) -> &mut EntityIndex {
        &mut self.entities
    }

    pub fn add_node(&mut self, node: HonNode) -> usize {
        debug_assert!(node.order() <= self.k.max(1));
        if let Some(&i) = self.nodes.get(&node) {
            return i;
        }
        let i = self.node_list.len();
        self.nodes.insert(node.clone(), i);
        self.node_list.push(node);
        i
    }

    /// Adds `weight` to the edge `source → target`, creating nodes as needed.
    pub fn add_edge(&mut self, source: HonNode, target: HonNode, weight: f64) -> Result<(), GraphError> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(GraphError::BadWeight(weight));
        }
        let s = self.add_node(source);
        let t = self.add_node(target);
        *self.edges.entry((s, t)).or_insert(0.0) += weight;
        Ok(())
    }

    pub fn build(self) -> HonGraph {
        let entities = self.entities;
        let n_entities = entities.len();
        let mut order: Vec<usize> = (0..self.node_list.len()).collect();
        let ctx_tokens = |n: &HonNode| -> Vec<&str> {
            n.context.iter().map(|&e| entities.token(e)).collect()
        };
        order.sort_by(|&a, &b| {
            let (na, nb) = (&self.node_list[a], &self.node_list[b]);
            na.base.cmp(&nb.base).then_with(|| ctx_tokens(na).cmp(&ctx_tokens(nb)))
        });
        let mut remap = vec![0u32; order.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new as u32;
        }
        let mut node_list = self.node_list;
        let nodes: Vec<HonNode> = order
            .iter()
            .map(|&old| std::mem::replace(&mut node_list[old], HonNode::first_order(EntityId(0))))
            .collect();
        let lookup = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), NodeId(i as u32)))
            .collect();
        let mut families = vec![Vec::new(); n_entities];
        for (i, n) in nodes.iter().enumerate() {
            families[n.base.idx()].push(NodeId(i as u32));
        }
        let mut edges: Vec<(u32, u32, f64)> = self
            .edges
            .into_iter()
            .map(|((s, t), w)| (remap[s], remap[t], w))
            .collect();
        edges.sort_by_key(|&(s, t, _)| (s, t));
        let n = nodes.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for &(s, t, w) in &edges {
            out_adj[s as usize].push((NodeId(t), w));
            in_adj[t as usize].push((NodeId(s), w));
        }
        // in_adj is filled in source order, which is already sorted.
        let cumulate = |adj: &Vec<Vec<(NodeId, f64)>>| -> Vec<Vec<f64>> {
            adj.iter()
                .map(|list| {
                    let mut acc = 0.0;
                    list.iter()
                        .map(|&(_, w)| {
                            acc += w;
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let out_cum = cumulate(&out_adj);
        let in_cum = cumulate(&in_adj);
        HonGraph {
            k: self.k,
            entities,
            nodes,
            lookup,
            out_adj,
            in_adj,
            out_cum,
            in_cum,
            families,
            n_edges: edges.len(),
            features: Features::Identity,
        }
    }
}

impl HonGraph {
    pub fn builder(k: usize, entities: EntityIndex) -> GraphBuilder {
        GraphBuilder::new(k, entities)
    }

    /// Maximum order.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entities(&self) -> &EntityIndex {
        &self.entities
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn node(&self, id: NodeId) -> &HonNode {
        &self.nodes[id.idx()]
    }

    pub fn nodes(&self) -> &[HonNode] {
        &self.nodes
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn node_id(&self, node: &HonNode) -> Option<NodeId> {
        self.lookup.get(node).copied()
    }

    pub fn base(&self, id: NodeId) -> EntityId {
        self.nodes[id.idx()].base
    }

    /// The order-1 node of `e`, if it is in the graph.
    pub fn first_order_node(&self, e: EntityId) -> Option<NodeId> {
        self.node_id(&HonNode::first_order(e))
    }

    pub fn node_token(&self, id: NodeId) -> String {
        self.nodes[id.idx()].token(&self.entities)
    }

    /// Parses pipe notation against this graph's entities.
    pub fn parse_node(&self, token: &str) -> Option<NodeId> {
        let node = parse_node_token(token, &self.entities).ok()?;
        self.node_id(&node)
    }

    /// Out-edges sorted by target id.
    pub fn out_edges(&self, id: NodeId) -> &[(NodeId, f64)] {
        &self.out_adj[id.idx()]
    }

    /// In-edges sorted by source id.
    pub fn in_edges(&self, id: NodeId) -> &[(NodeId, f64)] {
        &self.in_adj[id.idx()]
    }

    /// Running sums of out-edge weights, aligned with [`HonGraph::out_edges`].
    pub fn out_cumulative(&self, id: NodeId) -> &[f64] {
        &self.out_cum[id.idx()]
    }

    pub fn in_cumulative(&self, id: NodeId) -> &[f64] {
        &self.in_cum[id.idx()]
    }

    /// Weighted out-degree; 0 for sinks.
    pub fn out_degree_weighted(&self, id: NodeId) -> f64 {
        self.out_cum[id.idx()].last().copied().unwrap_or(0.0)
    }

    pub fn in_degree_weighted(&self, id: NodeId) -> f64 {
        self.in_cum[id.idx()].last().copied().unwrap_or(0.0)
    }

    /// `w(u, v)`, 0 if the edge is absent.
    pub fn edge_weight(&self, u: NodeId, v: NodeId) -> f64 {
        let list = &self.out_adj[u.idx()];
        match list.binary_search_by_key(&v, |&(t, _)| t) {
            Ok(i) => list[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.out_cum.iter().filter_map(|c| c.last()).sum()
    }

    /// Ω_u: node ids of every relative of `u`, order-1 node first.
    pub fn family_ids(&self, u: EntityId) -> &[NodeId] {
        self.families.get(u.idx()).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Ω_u as nodes; errors if `u` has no node in the graph.
    pub fn family(&self, u: EntityId) -> Result<Vec<&HonNode>, GraphError> {
        let ids = self.family_ids(u);
        if ids.is_empty() {
            let name = if u.idx() < self.entities.len() {
                self.entities.token(u).to_string()
            } else {
                u.to_string()
            };
            return Err(GraphError::UnknownEntity(name));
        }
        Ok(ids.iter().map(|&id| self.node(id)).collect())
    }

    /// Entities that have at least one node.
    pub fn present_entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.entities.ids().filter(|&e| !self.family_ids(e).is_empty())
    }

    pub fn conditional_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.node_ids().filter(|&id| self.nodes[id.idx()].is_conditional())
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim(self.entities.len())
    }

    pub fn with_features(mut self, features: Features) -> Self {
        self.features = features;
        self
    }

    /// Every edge as `(source, target, weight)` in source, target order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.out_adj.iter().enumerate().flat_map(|(s, list)| {
            list.iter().map(move |&(t, w)| (NodeId(s as u32), t, w))
        })
    }

    /// Copy of the graph keeping the node set but dropping edges for which
    /// `drop` returns true.
    pub fn without_edges(&self, mut drop: impl FnMut(NodeId, NodeId) -> bool) -> HonGraph {
        let mut b = GraphBuilder::new(self.k, self.entities.clone());
        for n in &self.nodes {
            b.add_node(n.clone());
        }
        for (s, t, w) in self.edges() {
            if !drop(s, t) {
                b.add_edge(self.node(s).clone(), self.node(t).clone(), w)
                    .expect("existing weights are valid");
            }
        }
        b.build().with_features(self.features.clone())
    }

    /// Collapses every family onto its base entity, summing edge weights.
    /// For a graph produced by re-walking a corpus this is exactly the
    /// first-order network of that corpus.
    pub fn collapse_to_first_order(&self) -> HonGraph {
        let mut b = GraphBuilder::new(1, self.entities.clone());
        for e in self.present_entities() {
            b.add_node(HonNode::first_order(e));
        }
        let mut acc: BTreeMap<(EntityId, EntityId), f64> = BTreeMap::new();
        for (s, t, w) in self.edges() {
            *acc.entry((self.base(s), self.base(t))).or_insert(0.0) += w;
        }
        for ((s, t), w) in acc {
            b.add_edge(HonNode::first_order(s), HonNode::first_order(t), w)
                .expect("sums of valid weights are valid");
        }
        b.build().with_features(self.features.clone())
    }

    /// Renders the TSV edge-list format.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#hon k={}\n", self.k);
        for id in self.node_ids() {
            if self.out_adj[id.idx()].is_empty() && self.in_adj[id.idx()].is_empty() {
                out.push_str(&self.node_token(id));
                out.push('\n');
            }
        }
        for (s, t, w) in self.edges() {
            out.push_str(&format!("{}\t{}\t{}\n", self.node_token(s), self.node_token(t), w));
        }
        out
    }

    pub fn serialize(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Parses the TSV format, assigning entity ids in order of first
    /// appearance.
    pub fn from_tsv(text: &str) -> Result<HonGraph, GraphError> {
        parse_tsv(text, EntityIndex::new(), true)
    }

    /// Parses the TSV format against a fixed entity index (e.g. the corpus
    /// the graph was built from). Unknown tokens are an error.
    pub fn from_tsv_with_entities(text: &str, entities: &EntityIndex) -> Result<HonGraph, GraphError> {
        parse_tsv(text, entities.clone(), false)
    }

    pub fn deserialize(path: impl AsRef<Path>) -> Result<HonGraph, GraphError> {
        Self::from_tsv(&read(path.as_ref())?)
    }

    pub fn deserialize_with_entities(
        path: impl AsRef<Path>,
        entities: &EntityIndex,
    ) -> Result<HonGraph, GraphError> {
        Self::from_tsv_with_entities(&read(path.as_ref())?, entities)
    }

    /// Equality on everything the TSV format carries, compared through
    /// tokens so that entity numbering may differ.
    pub fn structurally_equal(&self, other: &HonGraph) -> bool {
        if self.k != other.k || self.n_nodes() != other.n_nodes() || self.n_edges != other.n_edges {
            return false;
        }
        let tokens = |g: &HonGraph| -> BTreeMap<String, Vec<(String, f64)>> {
            g.node_ids()
                .map(|id| {
                    let mut out: Vec<(String, f64)> = g
                        .out_edges(id)
                        .iter()
                        .map(|&(t, w)| (g.node_token(t), w))
                        .collect();
                    out.sort_by(|a, b| a.0.cmp(&b.0));
                    (g.node_token(id), out)
                })
                .collect()
        };
        let (a, b) = (tokens(self), tokens(other));
        let same_edges = a.iter().zip(&b).all(|((na, ea), (nb, eb))| {
            na == nb
                && ea.len() == eb.len()
                && ea
                    .iter()
                    .zip(eb)
                    .all(|((ta, wa), (tb, wb))| ta == tb && (wa - wb).abs() <= 1e-12)
        });
        let families = |g: &HonGraph| -> BTreeMap<String, Vec<String>> {
            g.present_entities()
                .map(|e| {
                    (
                        g.entities.token(e).to_string(),
                        g.family_ids(e).iter().map(|&id| g.node_token(id)).collect(),
                    )
                })
                .collect()
        };
        same_edges && families(self) == families(other)
    }
}

impl fmt::Display for HonGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv())
    }
}

fn read(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses pipe notation, requiring every token to already be in `index`.
pub fn parse_node_token(token: &str, index: &EntityIndex) -> Result<HonNode, String> {
    let (base, context) = split_node_token(token)?;
    let lookup = |t: &str| index.get(t).ok_or_else(|| format!("unknown entity {t:?}"));
    Ok(HonNode {
        base: lookup(base)?,
        context: context.into_iter().map(lookup).collect::<Result<_, _>>()?,
    })
}

fn split_node_token(token: &str) -> Result<(&str, Vec<&str>), String> {
    match token.split_once('|') {
        None => Ok((token, Vec::new())),
        Some((base, ctx)) => {
            if ctx.is_empty() {
                return Err(format!("node {token:?} has an empty context"));
            }
            let parts: Vec<&str> = ctx.split(',').collect();
            if base.is_empty() || parts.iter().any(|p| p.is_empty()) {
                return Err(format!("node {token:?} has an empty token"));
            }
            Ok((base, parts))
        }
    }
}

fn parse_tsv(text: &str, entities: EntityIndex, grow: bool) -> Result<HonGraph, GraphError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let k = match lines.next() {
        Some((_, header)) => header
            .trim()
            .strip_prefix("#hon k=")
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .ok_or(GraphError::BadHeader)?,
        None => return Err(GraphError::BadHeader),
    };
    let mut b = GraphBuilder::new(k, entities);
    let node = |b: &mut GraphBuilder, lineno: usize, token: &str| -> Result<HonNode, GraphError> {
        let (base, ctx) = split_node_token(token).map_err(|reason| GraphError::Malformed {
            line: lineno,
            reason,
        })?;
        if ctx.len() + 1 > k {
            return Err(GraphError::OrderTooHigh {
                line: lineno,
                node: token.to_string(),
                order: ctx.len() + 1,
                k,
            });
        }
        let mut resolve = |t: &str| -> Result<EntityId, GraphError> {
            if !is_valid_token(t) {
                return Err(GraphError::ReservedCharacter {
                    line: lineno,
                    token: t.to_string(),
                });
            }
            if grow {
                Ok(b.entities_mut().intern(t))
            } else {
                b.entities
                    .get(t)
                    .ok_or_else(|| GraphError::UnknownToken {
                        line: lineno,
                        token: t.to_string(),
                    })
            }
        };
        let context = ctx.into_iter().map(&mut resolve).collect::<Result<Vec<_>, _>>()?;
        let base = resolve(base)?;
        Ok(HonNode { base, context })
    };
    for (i, line) in lines {
        let lineno = i + 1;
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            [single] => {
                let n = node(&mut b, lineno, single.trim())?;
                b.add_node(n);
            }
            [s, t, w] => {
                let weight: f64 = w.trim().parse().map_err(|_| GraphError::Malformed {
                    line: lineno,
                    reason: format!("bad weight {w:?}"),
                })?;
                if !(weight > 0.0 && weight.is_finite()) {
                    return Err(GraphError::Malformed {
                        line: lineno,
                        reason: format!("weight {weight} is not positive"),
                    });
                }
                let s = node(&mut b, lineno, s)?;
                let t = node(&mut b, lineno, t)?;
                b.add_edge(s, t, weight)?;
            }
            _ => {
                return Err(GraphError::Malformed {
                    line: lineno,
                    reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
                })
            }
        }
    }
    Ok(b.build())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(tokens: &[&str]) -> EntityIndex {
        let mut idx = EntityIndex::new();
        for t in tokens {
            idx.intern(t);
        }
        idx
    }

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }

    #[test]
    fn node_tokens() {
        let idx = index(&["A", "C", "D"]);
        assert_eq!(HonNode::conditional(e(1), vec![e(0)]).token(&idx), "C|A");
        assert_eq!(HonNode::first_order(e(1)).token(&idx), "C");
        assert_eq!(HonNode::conditional(e(2), vec![e(0), e(1)]).token(&idx), "D|A,C");
    }

    #[test]
    fn weighted_out_degree() {
        let idx = index(&["u", "v", "w"]);
        let mut b = HonGraph::builder(1, idx);
        b.add_edge(HonNode::first_order(e(0)), HonNode::first_order(e(1)), 2.0).unwrap();
        b.add_edge(HonNode::first_order(e(0)), HonNode::first_order(e(2)), 3.0).unwrap();
        b.add_edge(HonNode::first_order(e(2)), HonNode::first_order(e(2)), 4.0).unwrap();
        let g = b.build();
        let id = |i| g.first_order_node(e(i)).unwrap();
        assert_eq!(g.out_degree_weighted(id(0)), 5.0);
        assert_eq!(g.out_degree_weighted(id(1)), 0.0);
        assert_eq!(g.out_degree_weighted(id(2)), 4.0);
        assert_eq!(g.edge_weight(id(0), id(2)), 3.0);
        assert_eq!(g.edge_weight(id(2), id(0)), 0.0);
    }

    #[test]
    fn family_order_and_errors() {
        let idx = index(&["A", "B", "C", "D"]);
        let mut b = HonGraph::builder(2, idx);
        let c_b = HonNode::conditional(e(2), vec![e(1)]);
        let c_a = HonNode::conditional(e(2), vec![e(0)]);
        b.add_edge(c_b.clone(), HonNode::first_order(e(3)), 1.0).unwrap();
        b.add_edge(c_a.clone(), HonNode::first_order(e(3)), 1.0).unwrap();
        b.add_edge(HonNode::first_order(e(2)), HonNode::first_order(e(3)), 1.0).unwrap();
        b.add_edge(HonNode::first_order(e(0)), c_a, 1.0).unwrap();
        let g = b.build();
        let fam: Vec<String> = g
            .family(e(2))
            .unwrap()
            .iter()
            .map(|n| n.token(g.entities()))
            .collect();
        assert_eq!(fam, ["C", "C|A", "C|B"]);
        assert_eq!(g.family(e(3)).unwrap().len(), 1);
        assert!(matches!(g.family(e(1)), Err(GraphError::UnknownEntity(_))));
        assert!(g.family(e(9)).is_err());
    }

    #[test]
    fn tsv_round_trip_keeps_isolated_nodes() {
        let text = "#hon k=2\nC\nA\tC|A\t2\nC|A\tD\t1.5\n";
        let g = HonGraph::from_tsv(text).unwrap();
        assert_eq!(g.n_nodes(), 4);
        assert_eq!(g.n_edges(), 2);
        let back = HonGraph::from_tsv(&g.to_tsv()).unwrap();
        assert!(g.structurally_equal(&back));
        assert!(g.to_tsv().contains("C|A\tD\t1.5\n"));
    }

    #[test]
    fn tsv_errors() {
        assert!(matches!(HonGraph::from_tsv("A\tB\t1\n"), Err(GraphError::BadHeader)));
        assert!(matches!(HonGraph::from_tsv("#hon k=x\n"), Err(GraphError::BadHeader)));
        assert!(matches!(
            HonGraph::from_tsv("#hon k=1\nA\tB\n"),
            Err(GraphError::Malformed { line: 2, .. })
        ));
        assert!(matches!(
            HonGraph::from_tsv("#hon k=1\nA\tB\tzero\n"),
            Err(GraphError::Malformed { .. })
        ));
        assert!(matches!(
            HonGraph::from_tsv("#hon k=1\nA|B\tB\t1\n"),
            Err(GraphError::OrderTooHigh { .. })
        ));
        assert!(matches!(
            HonGraph::from_tsv("#hon k=2\nA|\tB\t1\n"),
            Err(GraphError::Malformed { .. })
        ));
        assert!(matches!(
            HonGraph::from_tsv("#hon k=3\nA|B,,C\tB\t1\n"),
            Err(GraphError::Malformed { .. })
        ));
        assert!(matches!(
            HonGraph::from_tsv("#hon k=1\nA\tB\t-1\n"),
            Err(GraphError::Malformed { .. })
        ));
    }

    #[test]
    fn fixed_index_rejects_unknown_tokens() {
        let idx = index(&["A", "B"]);
        assert!(HonGraph::from_tsv_with_entities("#hon k=1\nA\tB\t1\n", &idx).is_ok());
        assert!(matches!(
            HonGraph::from_tsv_with_entities("#hon k=1\nA\tZ\t1\n", &idx),
            Err(GraphError::UnknownToken { .. })
        ));
    }

    #[test]
    fn collapse_sums_family_weights() {
        let g = HonGraph::from_tsv("#hon k=2\nA\tC|A\t3\nB\tC|B\t1\nC|A\tD\t3\nC|B\tD\t1\n").unwrap();
        let g1 = g.collapse_to_first_order();
        let c = g1.first_order_node(g1.entities().get("C").unwrap()).unwrap();
        let d = g1.first_order_node(g1.entities().get("D").unwrap()).unwrap();
        assert_eq!(g1.edge_weight(c, d), 4.0);
        assert_eq!(g1.total_weight(), g.total_weight());
        assert_eq!(g1.k(), 1);
    }

    #[test]
    fn dense_features() {
        let idx = index(&["A", "B"]);
        let f = Features::parse_dense("A\t1\t0\n", &idx).unwrap();
        assert_eq!(f.dim(2), 2);
        assert_eq!(f.sparse_row(e(0)), vec![(0, 1.0)]);
        assert!(f.sparse_row(e(1)).is_empty());
        assert!(Features::parse_dense("A\t1\nB\t1\t2\n", &idx).is_err());
        assert_eq!(Features::Identity.sparse_row(e(1)), vec![(1, 1.0)]);
    }
}
