//! Stochastic selection over higher-order families and neighborhoods.
//!
//! Relatives of an entity are drawn proportionally to their weighted
//! out-degree; relatives of an edge `(u, v)` proportionally to the weight of
//! each realized cross-family edge. A bootstrap holds exactly one relative
//! per training unit, and bootstraps are drawn independently (with
//! replacement). All draws come from explicit [`SeedStream`]s.

use thiserror::Error;

use crate::corpus::{EntityId, EntityIndex};
use crate::graphstore::{HonGraph, NodeId};
use crate::rng::{purpose, SeedStream};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("entity {0} has no node in the graph")]
    UnknownEntity(u32),
    #[error("edge ({0}, {1}) has no higher-order realization")]
    NoRealization(u32, u32),
    #[error("ensemble size must be at least 1")]
    ZeroEll,
}

/// Which edges of a node count as its neighborhood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    Out,
    In,
    Both,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Out => "out",
            Direction::In => "in",
            Direction::Both => "both",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "out" => Ok(Direction::Out),
            "in" => Ok(Direction::In),
            "both" => Ok(Direction::Both),
            _ => Err(format!("unknown direction {s:?} (expected out, in or both)")),
        }
    }
}

/// Sampling law over Ω_u.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeDist {
    pub members: Vec<NodeId>,
    pub probs: Vec<f64>,
    /// True when every relative is a sink and the law fell back to uniform.
    pub uniform_fallback: bool,
}

impl RelativeDist {
    pub fn sample(&self, rng: &mut SeedStream) -> NodeId {
        self.members[rng.pick_weighted(&self.probs)]
    }
}

/// Sampling law over realized pairs of Ω_u × Ω_v.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRelativeDist {
    pub pairs: Vec<(NodeId, NodeId)>,
    pub probs: Vec<f64>,
}

impl EdgeRelativeDist {
    pub fn sample(&self, rng: &mut SeedStream) -> (NodeId, NodeId) {
        self.pairs[rng.pick_weighted(&self.probs)]
    }
}

/// `P(u') = outdeg(u') / Σ_{v' ∈ Ω_u} outdeg(v')`, uniform if the whole
/// family is sinks.
pub fn relative_dist(graph: &HonGraph, u: EntityId) -> Result<RelativeDist, SamplerError> {
    let members = graph.family_ids(u).to_vec();
    if members.is_empty() {
        return Err(SamplerError::UnknownEntity(u.0));
    }
    let degs: Vec<f64> = members.iter().map(|&m| graph.out_degree_weighted(m)).collect();
    let total: f64 = degs.iter().sum();
    if total <= 0.0 {
        let p = 1.0 / members.len() as f64;
        return Ok(RelativeDist {
            probs: vec![p; members.len()],
            members,
            uniform_fallback: true,
        });
    }
    Ok(RelativeDist {
        probs: degs.iter().map(|d| d / total).collect(),
        members,
        uniform_fallback: false,
    })
}

/// `P(u', v') = w(u', v') / Σ w(u'', v'')` over realized family cross-pairs.
pub fn edge_relative_dist(graph: &HonGraph, u: EntityId, v: EntityId) -> Result<EdgeRelativeDist, SamplerError> {
    let fu = graph.family_ids(u);
    let fv = graph.family_ids(v);
    if fu.is_empty() {
        return Err(SamplerError::UnknownEntity(u.0));
    }
    if fv.is_empty() {
        return Err(SamplerError::UnknownEntity(v.0));
    }
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for &a in fu {
        for &(t, w) in graph.out_edges(a) {
            if graph.base(t) == v {
                pairs.push((a, t));
                weights.push(w);
            }
        }
    }
    if pairs.is_empty() {
        return Err(SamplerError::NoRealization(u.0, v.0));
    }
    let total: f64 = weights.iter().sum();
    Ok(EdgeRelativeDist {
        pairs,
        probs: weights.iter().map(|w| w / total).collect(),
    })
}

/// The relative-pair law for `(u, v)`, falling back to the pair of
/// representative nodes (order-1 nodes when present) for unrealized pairs.
pub fn edge_relative_dist_or_fallback(
    graph: &HonGraph,
    u: EntityId,
    v: EntityId,
) -> Result<EdgeRelativeDist, SamplerError> {
    match edge_relative_dist(graph, u, v) {
        Err(SamplerError::NoRealization(..)) => Ok(EdgeRelativeDist {
            pairs: vec![(representative(graph, u)?, representative(graph, v)?)],
            probs: vec![1.0],
        }),
        other => other,
    }
}

/// The order-1 node of `e`, or its first relative if that node is absent.
pub fn representative(graph: &HonGraph, e: EntityId) -> Result<NodeId, SamplerError> {
    graph
        .family_ids(e)
        .first()
        .copied()
        .ok_or(SamplerError::UnknownEntity(e.0))
}

/// Training units a bootstrap is drawn over.
#[derive(Clone, Debug, PartialEq)]
pub enum Units {
    Nodes(Vec<EntityId>),
    Edges(Vec<(EntityId, EntityId)>),
}

impl Units {
    pub fn len(&self) -> usize {
        match self {
            Units::Nodes(v) => v.len(),
            Units::Edges(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sampled relative (node task) or relative pair (edge task).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relative {
    Node(NodeId),
    Pair(NodeId, NodeId),
}

impl Relative {
    pub fn node(self) -> NodeId {
        match self {
            Relative::Node(n) => n,
            Relative::Pair(..) => panic!("edge relative used as node"),
        }
    }

    pub fn pair(self) -> (NodeId, NodeId) {
        match self {
            Relative::Pair(a, b) => (a, b),
            Relative::Node(_) => panic!("node relative used as pair"),
        }
    }
}

/// Precomputed per-unit sampling laws, reusable across many draws.
#[derive(Clone, Debug)]
pub struct UnitLaws {
    members: Vec<Vec<Relative>>,
    cumulative: Vec<Vec<f64>>,
}

impl UnitLaws {
    pub fn new(graph: &HonGraph, units: &Units) -> Result<Self, SamplerError> {
        let mut members = Vec::with_capacity(units.len());
        let mut cumulative = Vec::with_capacity(units.len());
        let mut push = |m: Vec<Relative>, probs: &[f64]| {
            let mut acc = 0.0;
            cumulative.push(
                probs
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect(),
            );
            members.push(m);
        };
        match units {
            Units::Nodes(nodes) => {
                for &u in nodes {
                    let d = relative_dist(graph, u)?;
                    push(d.members.iter().map(|&m| Relative::Node(m)).collect(), &d.probs);
                }
            }
            Units::Edges(pairs) => {
                for &(u, v) in pairs {
                    let d = edge_relative_dist_or_fallback(graph, u, v)?;
                    push(d.pairs.iter().map(|&(a, b)| Relative::Pair(a, b)).collect(), &d.probs);
                }
            }
        }
        Ok(UnitLaws { members, cumulative })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// One relative for unit `j`.
    #[inline]
    pub fn draw(&self, j: usize, rng: &mut SeedStream) -> Relative {
        let m = &self.members[j];
        if m.len() == 1 {
            // Consume a word anyway so stream positions do not depend on
            // family sizes.
            rng.next_u64();
            return m[0];
        }
        m[rng.pick_cumulative(&self.cumulative[j])]
    }

    /// One relative for every unit, in unit order.
    pub fn draw_all(&self, rng: &mut SeedStream) -> Vec<Relative> {
        (0..self.len()).map(|j| self.draw(j, rng)).collect()
    }
}

/// ℓ assignments of one relative per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapSet {
    pub units: Units,
    /// `assignments[i][j]` is the relative of unit `j` in bootstrap `i`.
    pub assignments: Vec<Vec<Relative>>,
    pub seed: u64,
}

impl BootstrapSet {
    pub fn ell(&self) -> usize {
        self.assignments.len()
    }

    /// Audit export: `unit<TAB>bootstrap-index<TAB>relative` in bootstrap,
    /// then unit order. Edge units and relatives are written `u->v`.
    pub fn to_tsv(&self, graph: &HonGraph) -> String {
        let idx: &EntityIndex = graph.entities();
        let mut out = String::new();
        for (i, row) in self.assignments.iter().enumerate() {
            for (j, rel) in row.iter().enumerate() {
                let unit = match &self.units {
                    Units::Nodes(n) => idx.token(n[j]).to_string(),
                    Units::Edges(p) => format!("{}->{}", idx.token(p[j].0), idx.token(p[j].1)),
                };
                let rel = match rel {
                    Relative::Node(n) => graph.node_token(*n),
                    Relative::Pair(a, b) => format!("{}->{}", graph.node_token(*a), graph.node_token(*b)),
                };
                out.push_str(&format!("{unit}\t{i}\t{rel}\n"));
            }
        }
        out
    }
}

/// Draws ℓ independent bootstraps. Bootstrap `i` uses the stream
/// `[BOOTSTRAP, i]`, so any single bootstrap can be regenerated alone.
pub fn make_bootstraps(graph: &HonGraph, units: &Units, ell: usize, seed: u64) -> Result<BootstrapSet, SamplerError> {
    if ell == 0 {
        return Err(SamplerError::ZeroEll);
    }
    let laws = UnitLaws::new(graph, units)?;
    let assignments = (0..ell)
        .map(|i| {
            let mut rng = SeedStream::new(seed, &[purpose::BOOTSTRAP, i as u64]);
            laws.draw_all(&mut rng)
        })
        .collect();
    Ok(BootstrapSet {
        units: units.clone(),
        assignments,
        seed,
    })
}

/// A single fresh assignment drawn from `rng` (used per batch).
pub fn resample_batch_relatives(graph: &HonGraph, units: &Units, rng: &mut SeedStream) -> Result<Vec<Relative>, SamplerError> {
    Ok(UnitLaws::new(graph, units)?.draw_all(rng))
}

/// `fanout` neighbors drawn with replacement proportionally to edge weight.
/// `None` is the zero-feature sentinel returned for nodes with no neighbor
/// in `direction`.
pub fn sample_neighbors(
    graph: &HonGraph,
    node: NodeId,
    fanout: usize,
    direction: Direction,
    rng: &mut SeedStream,
) -> Vec<Option<NodeId>> {
    let mut out = Vec::with_capacity(fanout);
    sample_neighbors_into(graph, node, fanout, direction, rng, &mut out);
    out
}

pub(crate) fn sample_neighbors_into(
    graph: &HonGraph,
    node: NodeId,
    fanout: usize,
    direction: Direction,
    rng: &mut SeedStream,
    out: &mut Vec<Option<NodeId>>,
) {
    let (out_w, in_w) = match direction {
        Direction::Out => (graph.out_degree_weighted(node), 0.0),
        Direction::In => (0.0, graph.in_degree_weighted(node)),
        Direction::Both => (graph.out_degree_weighted(node), graph.in_degree_weighted(node)),
    };
    let total = out_w + in_w;
    if total <= 0.0 {
        out.extend(std::iter::repeat_n(None, fanout));
        return;
    }
    let (oe, oc) = (graph.out_edges(node), graph.out_cumulative(node));
    let (ie, ic) = (graph.in_edges(node), graph.in_cumulative(node));
    for _ in 0..fanout {
        let r = rng.next_f64() * total;
        let pick = if r < out_w {
            let i = oc.partition_point(|&c| c <= r).min(oe.len() - 1);
            oe[i].0
        } else {
            let r = r - out_w;
            let i = ic.partition_point(|&c| c <= r).min(ie.len() - 1);
            ie[i].0
        };
        out.push(Some(pick));
    }
}
