//! Monte-Carlo checks that conditional nodes really see different
//! neighborhoods than their base entities.
//!
//! Both checks compare a node of `graph_k` with the order-1 node of its base
//! entity in `graph_1`. Entities are matched by token, so the two graphs may
//! come from separate files.

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::EntityId;
use crate::graphstore::{HonGraph, NodeId};
use crate::hon::{base_successor_dist, kl_divergence, EntityDist};
use crate::rng::{purpose, SeedStream};

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("{0} is not a conditional node")]
    NotConditional(String),
    #[error("{0} has no out-edges")]
    Sink(String),
    #[error("entity {0} has no order-1 node in the first-order graph")]
    MissingBase(String),
    #[error("at least one sample is required")]
    NoSamples,
}

/// Largest allowed gap between an empirical aggregate and its law.
pub const CONVERGENCE_TOL: f64 = 0.01;
/// Smallest gap required between the two aggregates of a divergent node.
pub const SEPARATION_TOL: f64 = 0.02;
/// Divergence (bits) above which the aggregates must separate.
pub const SEPARATION_KL: f64 = 0.05;

const CHUNK: usize = 1 << 16;

/// `(node, first-order node)` for `u` in `graph_k`.
fn base_in(graph_k: &HonGraph, graph_1: &HonGraph, u: NodeId) -> Result<NodeId, VerifyError> {
    let token = graph_k.entities().token(graph_k.base(u));
    graph_1
        .entities()
        .get(token)
        .and_then(|e| graph_1.first_order_node(e))
        .ok_or_else(|| VerifyError::MissingBase(token.to_string()))
}

/// Successor law of `u` over base entities, re-keyed into `graph_1`'s
/// entity ids and sorted.
fn law_in(graph: &HonGraph, u: NodeId, graph_1: &HonGraph) -> Result<EntityDist, VerifyError> {
    let dist = base_successor_dist(graph, u).map_err(|_| VerifyError::Sink(graph.node_token(u)))?;
    let mut out: EntityDist = dist
        .into_iter()
        .map(|(e, p)| {
            let tok = graph.entities().token(e);
            graph_1
                .entities()
                .get(tok)
                .map(|e1| (e1, p))
                .ok_or_else(|| VerifyError::MissingBase(tok.to_string()))
        })
        .collect::<Result<_, _>>()?;
    out.sort_by_key(|&(e, _)| e);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistinctLawReport {
    pub checked: usize,
    /// Conditional nodes whose successor law matches the first-order law.
    pub violations: Vec<String>,
}

impl DistinctLawReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn max_gap(a: &[(EntityId, f64)], b: &[(EntityId, f64)]) -> f64 {
    let (mut i, mut j, mut gap) = (0, 0, 0.0f64);
    while i < a.len() || j < b.len() {
        let d = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) if x.0 == y.0 => {
                i += 1;
                j += 1;
                x.1 - y.1
            }
            (Some(x), Some(y)) if x.0 < y.0 => {
                i += 1;
                x.1
            }
            (Some(x), None) => {
                i += 1;
                x.1
            }
            (_, Some(y)) => {
                j += 1;
                y.1
            }
            (None, None) => unreachable!(),
        };
        gap = gap.max(d.abs());
    }
    gap
}

/// Every conditional node must differ from its base's first-order law on
/// at least one successor (by more than 1e-12).
pub fn check_distinct_laws(graph_k: &HonGraph, graph_1: &HonGraph) -> DistinctLawReport {
    let mut report = DistinctLawReport {
        checked: 0,
        violations: Vec::new(),
    };
    for u in graph_k.conditional_nodes() {
        report.checked += 1;
        let ok = base_in(graph_k, graph_1, u)
            .and_then(|b| Ok(max_gap(&law_in(graph_k, u, graph_1)?, &law_in(graph_1, b, graph_1)?) > 1e-12))
            .unwrap_or(false);
        if !ok {
            report.violations.push(graph_k.node_token(u));
        }
    }
    report
}

/// Monte-Carlo mean of one-hot base features over `n` weighted out-draws
/// from `u`. Chunk `c` of 2^16 draws uses stream `[VERIFY, tag, u, c]`;
/// counts are integers, so the result does not depend on scheduling.
pub fn empirical_aggregate(graph: &HonGraph, u: NodeId, n: usize, tag: u64, seed: u64, graph_1: &HonGraph) -> Result<EntityDist, VerifyError> {
    if n == 0 {
        return Err(VerifyError::NoSamples);
    }
    let out = graph.out_edges(u);
    if out.is_empty() {
        return Err(VerifyError::Sink(graph.node_token(u)));
    }
    let cum = graph.out_cumulative(u);
    let counts = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = SeedStream::new(seed, &[purpose::VERIFY, tag, u.0 as u64, c as u64]);
            let mut counts = vec![0u64; out.len()];
            for _ in 0..CHUNK.min(n - c * CHUNK) {
                counts[rng.pick_cumulative(cum)] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; out.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let mut by_entity: Vec<(EntityId, u64)> = Vec::with_capacity(out.len());
    for (&(t, _), k) in out.iter().zip(counts) {
        let tok = graph.entities().token(graph.base(t));
        let e = graph_1.entities().get(tok).ok_or_else(|| VerifyError::MissingBase(tok.to_string()))?;
        by_entity.push((e, k));
    }
    by_entity.sort_by_key(|&(e, _)| e);
    let mut dist: EntityDist = Vec::new();
    for (e, k) in by_entity {
        match dist.last_mut() {
            Some(last) if last.0 == e => last.1 += k as f64,
            _ => dist.push((e, k as f64)),
        }
    }
    dist.iter_mut().for_each(|d| d.1 /= n as f64);
    Ok(dist)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateCheck {
    pub node: String,
    pub n_samples: usize,
    pub law_k: EntityDist,
    pub law_1: EntityDist,
    pub empirical_k: EntityDist,
    pub empirical_1: EntityDist,
    /// ∞-norm gaps between each aggregate and its law.
    pub error_k: f64,
    pub error_1: f64,
    /// ∞-norm gap between the two aggregates.
    pub separation: f64,
    pub divergence: f64,
}

impl AggregateCheck {
    pub fn converged(&self) -> bool {
        self.error_k <= CONVERGENCE_TOL && self.error_1 <= CONVERGENCE_TOL
    }

    pub fn separated(&self) -> bool {
        self.divergence <= SEPARATION_KL || self.separation > SEPARATION_TOL
    }

    pub fn passed(&self) -> bool {
        self.converged() && self.separated()
    }
}

/// Compares neighborhood aggregates of any node `u` of `graph_k` with those
/// of its base's order-1 node in `graph_1`.
pub fn compare_aggregates(graph_k: &HonGraph, graph_1: &HonGraph, u: NodeId, n_samples: usize, seed: u64) -> Result<AggregateCheck, VerifyError> {
    let b = base_in(graph_k, graph_1, u)?;
    let law_k = law_in(graph_k, u, graph_1)?;
    let law_1 = law_in(graph_1, b, graph_1)?;
    let empirical_k = empirical_aggregate(graph_k, u, n_samples, 0, seed, graph_1)?;
    let empirical_1 = empirical_aggregate(graph_1, b, n_samples, 1, seed, graph_1)?;
    Ok(AggregateCheck {
        node: graph_k.node_token(u),
        n_samples,
        error_k: max_gap(&empirical_k, &law_k),
        error_1: max_gap(&empirical_1, &law_1),
        separation: max_gap(&empirical_k, &empirical_1),
        divergence: kl_divergence(&law_k, &law_1).unwrap_or(0.0),
        law_k,
        law_1,
        empirical_k,
        empirical_1,
    })
}

/// [`compare_aggregates`] restricted to conditional nodes.
pub fn check_conditional_node(graph_k: &HonGraph, graph_1: &HonGraph, u: NodeId, n_samples: usize, seed: u64) -> Result<AggregateCheck, VerifyError> {
    if !graph_k.node(u).is_conditional() {
        return Err(VerifyError::NotConditional(graph_k.node_token(u)));
    }
    compare_aggregates(graph_k, graph_1, u, n_samples, seed)
}

/// Both checks over every conditional node, as printed by `hondge verify`.
pub fn report(graph_k: &HonGraph, graph_1: &HonGraph, n_samples: usize, seed: u64) -> (DistinctLawReport, Vec<Result<AggregateCheck, VerifyError>>) {
    let laws = check_distinct_laws(graph_k, graph_1);
    let checks = graph_k
        .conditional_nodes()
        .map(|u| check_conditional_node(graph_k, graph_1, u, n_samples, seed))
        .collect();
    (laws, checks)
}

pub fn report_text(laws: &DistinctLawReport, checks: &[Result<AggregateCheck, VerifyError>]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    writeln!(
        out,
        "distinct_laws\t{}\tchecked={}\tviolations={}",
        verdict(laws.passed()),
        laws.checked,
        laws.violations.len()
    )
    .unwrap();
    for v in &laws.violations {
        writeln!(out, "same-law\t{v}").unwrap();
    }
    writeln!(out, "node\tverdict\tsamples\terror_k\terror_1\tseparation\tdivergence").unwrap();
    for c in checks {
        match c {
            Ok(c) => writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                c.node,
                verdict(c.passed()),
                c.n_samples,
                c.error_k,
                c.error_1,
                c.separation,
                c.divergence
            )
            .unwrap(),
            Err(e) => writeln!(out, "-\tFAIL\t{e}").unwrap(),
        }
    }
    out
}
