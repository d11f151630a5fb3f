//! First- and higher-order network construction.
//!
//! A conditional node `a_m | a_1..a_{m-1}` is admitted when the divergence of
//! the first-order successor law of `a_m` from the successor law observed
//! after the context exceeds `τ · m / log2(1 + freq)`. The divergence is
//!
//! ```text
//! D = Σ_{v ∈ N_1(a_m)} π_1(a_m → v) · log2( π_1(a_m → v) / π_k(u' → v) )
//! ```
//!
//! which is `+∞` whenever the context never continues to some first-order
//! successor; such candidates are always admitted for finite `τ`. After
//! admission every path is re-walked, each position emitting the
//! highest-order admitted node that matches its preceding context, so the
//! total transition mass of the result equals that of the first-order
//! network.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{EntityId, PathCorpus};
use crate::graphstore::{HonGraph, HonNode, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum HonError {
    #[error("max order k must be at least 1, got {0}")]
    BadOrder(usize),
    #[error("threshold multiplier tau must be positive, got {0}")]
    BadTau(f64),
    #[error("node {0} is a sink (no out-edges)")]
    SinkNode(String),
    #[error("first-order distribution is empty")]
    EmptyDistribution,
    #[error("candidate enumeration needs k >= 2, got {0}")]
    OrderTooLow(usize),
}

/// A discrete distribution over entities, sorted by entity id.
pub type EntityDist = Vec<(EntityId, f64)>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HonConfig {
    /// Maximum node order.
    pub k: usize,
    /// Multiplier on the admission threshold.
    pub tau: f64,
    /// Contexts observed fewer times than this are never considered.
    pub min_support: u64,
}

impl Default for HonConfig {
    fn default() -> Self {
        HonConfig {
            k: 2,
            tau: 1.0,
            min_support: 1,
        }
    }
}

impl HonConfig {
    pub fn new(k: usize) -> Self {
        HonConfig {
            k,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), HonError> {
        if self.k < 1 {
            return Err(HonError::BadOrder(self.k));
        }
        if !(self.tau > 0.0) {
            return Err(HonError::BadTau(self.tau));
        }
        Ok(())
    }
}

/// A context considered for admission as a conditional node.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRule {
    pub node: HonNode,
    /// Occurrences of the context that have a successor.
    pub freq: u64,
    pub next_dist: EntityDist,
    pub divergence: f64,
    pub threshold: f64,
}

impl CandidateRule {
    /// The admission inequality, before the suffix gate.
    pub fn passes_threshold(&self) -> bool {
        self.divergence > self.threshold
    }
}

/// `τ · m / log2(1 + freq)`.
pub fn admission_threshold(tau: f64, order: usize, freq: u64) -> f64 {
    tau * order as f64 / (1.0 + freq as f64).log2()
}

/// π_k(u → v): the weighted share of `u`'s out-mass that goes to `v`.
pub fn walker_prob(graph: &HonGraph, u: NodeId, v: NodeId) -> Result<f64, HonError> {
    let out = graph.out_degree_weighted(u);
    if out <= 0.0 {
        return Err(HonError::SinkNode(graph.node_token(u)));
    }
    Ok(graph.edge_weight(u, v) / out)
}

/// Walker distribution out of `u` with targets collapsed onto their base
/// entities, so that `C|A → D|C` counts as a step to `D`.
pub fn base_successor_dist(graph: &HonGraph, u: NodeId) -> Result<EntityDist, HonError> {
    let out = graph.out_degree_weighted(u);
    if out <= 0.0 {
        return Err(HonError::SinkNode(graph.node_token(u)));
    }
    let mut acc: HashMap<EntityId, f64> = HashMap::new();
    for &(t, w) in graph.out_edges(u) {
        *acc.entry(graph.base(t)).or_insert(0.0) += w;
    }
    let mut dist: EntityDist = acc.into_iter().map(|(e, w)| (e, w / out)).collect();
    dist.sort_by_key(|&(e, _)| e);
    Ok(dist)
}

/// Divergence of the first-order law from a candidate's law, in bits,
/// summed over the support of `first_order`.
pub fn kl_divergence(candidate: &[(EntityId, f64)], first_order: &[(EntityId, f64)]) -> Result<f64, HonError> {
    if first_order.is_empty() {
        return Err(HonError::EmptyDistribution);
    }
    let mut sum = 0.0;
    for &(v, p1) in first_order {
        if p1 <= 0.0 {
            continue;
        }
        let pk = lookup(candidate, v);
        if pk <= 0.0 {
            return Ok(f64::INFINITY);
        }
        sum += p1 * (p1 / pk).log2();
    }
    // Rounding can push an exact match a hair below zero.
    Ok(sum.max(0.0))
}

fn lookup(dist: &[(EntityId, f64)], v: EntityId) -> f64 {
    match dist.binary_search_by_key(&v, |&(e, _)| e) {
        Ok(i) => dist[i].1,
        Err(_) => 0.0,
    }
}

fn normalize(counts: &HashMap<EntityId, u64>) -> (u64, EntityDist) {
    let total: u64 = counts.values().sum();
    let mut dist: EntityDist = counts
        .iter()
        .map(|(&e, &c)| (e, c as f64 / total as f64))
        .collect();
    dist.sort_by_key(|&(e, _)| e);
    (total, dist)
}

/// The order-1 network: an edge `u → v` weighted by how often `v`
/// immediately follows `u`. Every entity gets a node.
pub fn build_fon(corpus: &PathCorpus) -> HonGraph {
    let mut b = HonGraph::builder(1, corpus.index().clone());
    for e in corpus.index().ids() {
        b.add_node(HonNode::first_order(e));
    }
    let mut counts: HashMap<(EntityId, EntityId), u64> = HashMap::new();
    for path in corpus.paths() {
        for w in path.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
        }
    }
    for ((u, v), c) in counts {
        b.add_edge(HonNode::first_order(u), HonNode::first_order(v), c as f64)
            .expect("counts are positive");
    }
    b.build()
}

/// Empirical successor law of every entity, indexed by entity id.
pub fn first_order_dists(corpus: &PathCorpus) -> Vec<EntityDist> {
    let mut counts: Vec<HashMap<EntityId, u64>> = vec![HashMap::new(); corpus.n_entities()];
    for path in corpus.paths() {
        for w in path.windows(2) {
            *counts[w[0].idx()].entry(w[1]).or_insert(0) += 1;
        }
    }
    counts.iter().map(|c| normalize(c).1).collect()
}

/// Scores every context of length 2..=k that has a successor and at least
/// `min_support` occurrences. Sorted by order, then by the full sequence.
pub fn enumerate_candidates(corpus: &PathCorpus, config: &HonConfig) -> Result<Vec<CandidateRule>, HonError> {
    config.validate()?;
    if config.k < 2 {
        return Err(HonError::OrderTooLow(config.k));
    }
    let first = first_order_dists(corpus);
    let mut counts: HashMap<&[EntityId], HashMap<EntityId, u64>> = HashMap::new();
    for path in corpus.paths() {
        for end in 1..path.len() - 1 {
            let next = path[end + 1];
            for m in 2..=config.k.min(end + 1) {
                let seq = &path[end + 1 - m..=end];
                *counts.entry(seq).or_default().entry(next).or_insert(0) += 1;
            }
        }
    }
    let mut entries: Vec<(&[EntityId], HashMap<EntityId, u64>)> = counts.into_iter().collect();
    entries.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(b.0)));
    let rules = entries
        .par_iter()
        .filter_map(|(seq, next)| {
            let (freq, next_dist) = normalize(next);
            if freq < config.min_support {
                return None;
            }
            let base = *seq.last().expect("m >= 2");
            let divergence = kl_divergence(&next_dist, &first[base.idx()])
                .expect("a base with a successor has a first-order law");
            Some(CandidateRule {
                node: HonNode::conditional(base, seq[..seq.len() - 1].to_vec()),
                freq,
                next_dist,
                divergence,
                threshold: admission_threshold(config.tau, seq.len(), freq),
            })
        })
        .collect();
    Ok(rules)
}

/// Result of [`build_hon_with_rules`]: the graph and the per-candidate
/// admission decisions.
#[derive(Clone, Debug)]
pub struct HonBuild {
    pub graph: HonGraph,
    pub candidates: Vec<CandidateRule>,
    pub admitted: Vec<bool>,
}

impl HonBuild {
    pub fn admitted_rules(&self) -> impl Iterator<Item = &CandidateRule> {
        self.candidates
            .iter()
            .zip(&self.admitted)
            .filter(|(_, &a)| a)
            .map(|(c, _)| c)
    }
}

pub fn build_hon(corpus: &PathCorpus, config: &HonConfig) -> Result<HonGraph, HonError> {
    Ok(build_hon_with_rules(corpus, config)?.graph)
}

/// Admits candidates (a candidate of order m > 2 additionally needs its
/// order-(m-1) suffix admitted) and re-walks the corpus. `k = 1` yields the
/// first-order network.
pub fn build_hon_with_rules(corpus: &PathCorpus, config: &HonConfig) -> Result<HonBuild, HonError> {
    config.validate()?;
    if config.k == 1 {
        return Ok(HonBuild {
            graph: build_fon(corpus),
            candidates: Vec::new(),
            admitted: Vec::new(),
        });
    }
    let candidates = enumerate_candidates(corpus, config)?;
    // Candidates are sorted by order, so suffixes are decided first.
    let mut admitted_seqs: HashSet<Vec<EntityId>> = HashSet::new();
    let mut admitted = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let mut seq = c.node.context.clone();
        seq.push(c.node.base);
        let suffix_ok = seq.len() == 2 || admitted_seqs.contains(&seq[1..]);
        let ok = suffix_ok && c.passes_threshold();
        if ok {
            admitted_seqs.insert(seq);
        }
        admitted.push(ok);
    }

    let mut b = HonGraph::builder(config.k, corpus.index().clone());
    for e in corpus.index().ids() {
        b.add_node(HonNode::first_order(e));
    }
    let mut counts: HashMap<(HonNode, HonNode), u64> = HashMap::new();
    for path in corpus.paths() {
        let mut prev: Option<HonNode> = None;
        for t in 0..path.len() {
            let cur = resolve(path, t, config.k, &admitted_seqs);
            if let Some(p) = prev.take() {
                *counts.entry((p, cur.clone())).or_insert(0) += 1;
            }
            prev = Some(cur);
        }
    }
    for ((s, t), c) in counts {
        b.add_edge(s, t, c as f64).expect("counts are positive");
    }
    Ok(HonBuild {
        graph: b.build(),
        candidates,
        admitted,
    })
}

/// Highest-order admitted node for position `t` of `path`.
fn resolve(path: &[EntityId], t: usize, k: usize, admitted: &HashSet<Vec<EntityId>>) -> HonNode {
    for m in (2..=k.min(t + 1)).rev() {
        let seq = &path[t + 1 - m..=t];
        if admitted.contains(seq) {
            return HonNode::conditional(path[t], seq[..m - 1].to_vec());
        }
    }
    HonNode::first_order(path[t])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(spec: &[(&str, usize)]) -> PathCorpus {
        let mut paths = Vec::new();
        for (p, n) in spec {
            for _ in 0..*n {
                paths.push(p.split_whitespace().collect::<Vec<_>>());
            }
        }
        PathCorpus::from_paths(paths).unwrap()
    }

    fn id(c: &PathCorpus, t: &str) -> EntityId {
        c.index().get(t).unwrap()
    }

    #[test]
    fn walker_prob_examples() {
        let g = HonGraph::from_tsv("#hon k=1\nu\tv\t2\nu\tw\t3\nx\tv\t1\n").unwrap();
        let n = |t: &str| g.parse_node(t).unwrap();
        assert!((walker_prob(&g, n("u"), n("v")).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(walker_prob(&g, n("x"), n("v")).unwrap(), 1.0);
        assert_eq!(walker_prob(&g, n("x"), n("w")).unwrap(), 0.0);
        assert!(matches!(walker_prob(&g, n("v"), n("u")), Err(HonError::SinkNode(_))));
    }

    #[test]
    fn kl_examples() {
        let (d, e) = (EntityId(0), EntityId(1));
        let half = vec![(d, 0.5), (e, 0.5)];
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);
        let skew = vec![(d, 0.75), (e, 0.25)];
        // Frozen from an independent 50-digit evaluation of
        // 0.5*log2(0.5/0.75) + 0.5*log2(0.5/0.25).
        let expected = 0.207_518_749_639_421_9;
        assert!((kl_divergence(&skew, &half).unwrap() - expected).abs() < 1e-15);
        assert_eq!(kl_divergence(&[(d, 1.0)], &half).unwrap(), f64::INFINITY);
        assert_eq!(kl_divergence(&half, &[]), Err(HonError::EmptyDistribution));
    }

    #[test]
    fn fon_examples() {
        let c = corpus(&[("A C", 2)]);
        let g = build_fon(&c);
        let n = |t: &str| g.parse_node(t).unwrap();
        assert_eq!(g.edge_weight(n("A"), n("C")), 2.0);

        let c = corpus(&[("A C D", 1)]);
        let g = build_fon(&c);
        let n = |t: &str| g.parse_node(t).unwrap();
        assert_eq!(g.edge_weight(n("A"), n("C")), 1.0);
        assert_eq!(g.edge_weight(n("C"), n("D")), 1.0);
        assert_eq!(g.edge_weight(n("A"), n("D")), 0.0);

        let c = corpus(&[("A A", 1)]);
        let g = build_fon(&c);
        let a = g.parse_node("A").unwrap();
        assert_eq!(g.edge_weight(a, a), 1.0);
    }

    #[test]
    fn candidates_of_eight_path_corpus() {
        let c = corpus(&[("A C D", 3), ("A C E", 1), ("B C E", 3), ("B C D", 1)]);
        let rules = enumerate_candidates(&c, &HonConfig::new(2)).unwrap();
        let ca = HonNode::conditional(id(&c, "C"), vec![id(&c, "A")]);
        let rule = rules.iter().find(|r| r.node == ca).unwrap();
        assert_eq!(rule.freq, 4);
        assert_eq!(rule.next_dist, vec![(id(&c, "D"), 0.75), (id(&c, "E"), 0.25)]);
        assert!((rule.divergence - 0.207_518_749_639_421_9).abs() < 1e-12);
        assert!((rule.threshold - 0.861_353_116_146_786_1).abs() < 1e-12);
        // Contexts ending in D or E have no successor.
        assert_eq!(rules.len(), 2);
    }

    #[test]
    fn min_support_filters_rare_contexts() {
        let c = corpus(&[("A B C D", 1), ("E F G H", 1)]);
        let config = HonConfig {
            min_support: 2,
            ..HonConfig::new(2)
        };
        assert!(enumerate_candidates(&c, &config).unwrap().is_empty());
    }

    #[test]
    fn candidates_need_k_at_least_two() {
        let c = corpus(&[("A B C", 1)]);
        assert_eq!(
            enumerate_candidates(&c, &HonConfig::new(1)),
            Err(HonError::OrderTooLow(1))
        );
        let bad = HonConfig {
            tau: 0.0,
            ..HonConfig::new(2)
        };
        assert_eq!(build_hon(&c, &bad).unwrap_err(), HonError::BadTau(0.0));
    }

    #[test]
    fn sixteen_path_corpus_admits_both_contexts() {
        let c = corpus(&[("A C D", 14), ("A C E", 2), ("B C E", 14), ("B C D", 2)]);
        let built = build_hon_with_rules(&c, &HonConfig::new(2)).unwrap();
        let admitted: Vec<String> = built
            .admitted_rules()
            .map(|r| r.node.token(c.index()))
            .collect();
        assert_eq!(admitted, ["C|A", "C|B"]);
        let g = &built.graph;
        let n = |t: &str| g.parse_node(t).unwrap();
        assert_eq!(g.edge_weight(n("A"), n("C|A")), 16.0);
        assert_eq!(g.edge_weight(n("C|A"), n("D")), 14.0);
        assert_eq!(g.edge_weight(n("C|A"), n("E")), 2.0);
        assert_eq!(g.edge_weight(n("A"), n("C")), 0.0);
        assert_eq!(g.total_weight(), 64.0);
    }

    #[test]
    fn eight_path_corpus_equals_fon() {
        let c = corpus(&[("A C D", 3), ("A C E", 1), ("B C E", 3), ("B C D", 1)]);
        let g = build_hon(&c, &HonConfig::new(2)).unwrap();
        assert_eq!(g.conditional_nodes().count(), 0);
        let fon = build_fon(&c);
        assert_eq!(g.to_tsv().replacen("k=2", "k=1", 1), fon.to_tsv());
    }

    #[test]
    fn k_one_is_fon() {
        let c = corpus(&[("A C D", 14), ("B C E", 14)]);
        let g = build_hon(&c, &HonConfig::new(1)).unwrap();
        assert!(g.structurally_equal(&build_fon(&c)));
    }

    #[test]
    fn third_order_needs_admitted_suffix() {
        // X A C → D and Y A C → E, but A C itself always continues to D or E
        // evenly, the same as C's first-order law: C|A is rejected, so
        // C|X,A and C|Y,A are gated out despite infinite divergence.
        let c = corpus(&[("X A C D", 20), ("Y A C E", 20), ("B C D", 20), ("B C E", 20)]);
        let built = build_hon_with_rules(&c, &HonConfig::new(3)).unwrap();
        let cxa = HonNode::conditional(id(&c, "C"), vec![id(&c, "X"), id(&c, "A")]);
        let (i, rule) = built
            .candidates
            .iter()
            .enumerate()
            .find(|(_, r)| r.node == cxa)
            .unwrap();
        assert!(rule.passes_threshold());
        assert!(!built.admitted[i]);
        assert_eq!(built.graph.conditional_nodes().count(), 0);
    }

    #[test]
    fn third_order_chain_is_admitted_and_resolved() {
        // C|A never continues to E, and C|X,A narrows it to D alone.
        let c = corpus(&[("X A C D", 30), ("Y A C F", 10), ("B C E", 40)]);
        let built = build_hon_with_rules(&c, &HonConfig::new(3)).unwrap();
        let g = &built.graph;
        assert!(built
            .admitted_rules()
            .any(|r| r.node.token(c.index()) == "C|A"));
        // Every A C occurrence has a longer admitted match, so C|A itself
        // never emits a transition.
        assert!(g.parse_node("C|A").is_none());
        let cxa = g.parse_node("C|X,A").unwrap();
        assert_eq!(g.out_degree_weighted(cxa), 30.0);
        let a_x = g.parse_node("A|X").or_else(|| g.parse_node("A")).unwrap();
        assert_eq!(g.edge_weight(a_x, cxa), 30.0);
        assert_eq!(g.total_weight(), c.n_transitions() as f64);
    }
}
