//! Synthetic path corpora with planted higher-order dependencies.
//!
//! Entity `e` (token `n{e}`) belongs to block `e % n_classes`, and its block
//! is its label. Every entity `u` has `successors_per_block` fixed
//! successors `S(u, c)` inside every block `c`. A walk at `x_t` picks the
//! block of its next step, then a uniform member of `S(x_t, block)`:
//!
//! * order 2: the block of `x_{t-1}` with probability `memory_strength`,
//!   otherwise a uniform block (the first step is always uniform);
//! * order 1: the block of `x_t` with probability `memory_strength`,
//!   otherwise a uniform block.
//!
//! Under order 2 the first-order successor law of every entity spreads
//! evenly over the blocks, so the label of `u` only shows two steps ahead,
//! through conditional nodes `v|u`.

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{EntityId, LabelMap, PathCorpus};
use crate::rng::{purpose, SeedStream};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid chain: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedChainSpec {
    pub n_entities: usize,
    pub order: usize,
    pub n_paths: usize,
    pub path_len: usize,
    pub memory_strength: f64,
    pub n_classes: usize,
    pub successors_per_block: usize,
    pub seed: u64,
}

impl Default for PlantedChainSpec {
    fn default() -> Self {
        PlantedChainSpec {
            n_entities: 2000,
            order: 2,
            n_paths: 50_000,
            path_len: 8,
            memory_strength: 0.9,
            n_classes: 16,
            successors_per_block: 2,
            seed: 0,
        }
    }
}

impl PlantedChainSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_classes == 0 {
            return bad("at least one class is required".into());
        }
        if self.n_entities < 2 * self.n_classes {
            return bad(format!(
                "{} entities cannot fill {} classes (need at least twice as many)",
                self.n_entities, self.n_classes
            ));
        }
        if self.order != 1 && self.order != 2 {
            return bad(format!("order must be 1 or 2, got {}", self.order));
        }
        if !(0.0..=1.0).contains(&self.memory_strength) {
            return bad(format!("memory strength {} outside [0, 1]", self.memory_strength));
        }
        if self.path_len < 2 {
            return bad("paths need at least 2 steps".into());
        }
        if self.n_paths == 0 {
            return bad("at least one path is required".into());
        }
        let smallest_block = self.n_entities / self.n_classes;
        if self.successors_per_block == 0 || self.successors_per_block >= smallest_block {
            return bad(format!(
                "successors per block must be in [1, {}) for blocks of {smallest_block}",
                smallest_block
            ));
        }
        Ok(())
    }

    pub fn block(&self, e: usize) -> usize {
        e % self.n_classes
    }

    pub fn token(e: usize) -> String {
        format!("n{e}")
    }

    /// `table[u][c]` = the fixed successors of `u` in block `c`, drawn from
    /// stream `[SYNTH, 0]`. Entities never succeed themselves.
    pub fn successor_table(&self) -> Vec<Vec<Vec<usize>>> {
        let mut rng = SeedStream::new(self.seed, &[purpose::SYNTH, 0]);
        let blocks: Vec<Vec<usize>> = (0..self.n_classes)
            .map(|c| (0..self.n_entities).filter(|&e| self.block(e) == c).collect())
            .collect();
        (0..self.n_entities)
            .map(|u| {
                blocks
                    .iter()
                    .map(|members| {
                        let mut pool: Vec<usize> = members.iter().copied().filter(|&e| e != u).collect();
                        // partial Fisher-Yates
                        for i in 0..self.successors_per_block {
                            let j = i + rng.below(pool.len() - i);
                            pool.swap(i, j);
                        }
                        pool.truncate(self.successors_per_block);
                        pool
                    })
                    .collect()
            })
            .collect()
    }

    /// Probability that the next step from `cur` (after `prev`) lands in
    /// `block`.
    pub fn block_prob(&self, prev: Option<usize>, cur: usize, block: usize) -> f64 {
        let anchor = match self.order {
            1 => Some(self.block(cur)),
            _ => prev.map(|p| self.block(p)),
        };
        let uniform = 1.0 / self.n_classes as f64;
        match anchor {
            Some(a) => self.memory_strength * f64::from(a == block) + (1.0 - self.memory_strength) * uniform,
            None => uniform,
        }
    }
}

/// Samples the corpus; path `p` uses stream `[SYNTH, 1, p]`, so paths can be
/// generated in parallel without changing the output.
pub fn generate(spec: &PlantedChainSpec) -> Result<(PathCorpus, LabelMap), SynthError> {
    spec.validate()?;
    let table = spec.successor_table();
    let c = spec.n_classes;
    let paths: Vec<Vec<usize>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = SeedStream::new(spec.seed, &[purpose::SYNTH, 1, p as u64]);
            let mut path = Vec::with_capacity(spec.path_len);
            path.push(rng.below(spec.n_entities));
            while path.len() < spec.path_len {
                let cur = *path.last().unwrap();
                let anchor = match spec.order {
                    1 => Some(spec.block(cur)),
                    _ => path.len().checked_sub(2).map(|i| spec.block(path[i])),
                };
                let remember = rng.next_f64() < spec.memory_strength;
                let block = match anchor {
                    Some(a) if remember => a,
                    _ => rng.below(c),
                };
                let succ = &table[cur][block];
                path.push(succ[rng.below(succ.len())]);
            }
            path
        })
        .collect();
    let corpus = PathCorpus::from_paths(
        paths
            .iter()
            .map(|p| p.iter().map(|&e| PlantedChainSpec::token(e)).collect::<Vec<_>>()),
    )
    .map_err(|e| SynthError::Invalid(e.to_string()))?;
    let index = corpus.index();
    let labels = LabelMap::from_assignments(
        index.len(),
        c,
        (0..spec.n_entities).filter_map(|e| {
            index
                .get(&PlantedChainSpec::token(e))
                .map(|id: EntityId| (id, spec.block(e) as u32))
        }),
    );
    Ok((corpus, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hon::{build_hon, HonConfig};

    fn small(order: usize, s: f64, seed: u64) -> PlantedChainSpec {
        PlantedChainSpec {
            n_entities: 20,
            order,
            n_paths: 20_000,
            path_len: 10,
            memory_strength: s,
            n_classes: 2,
            successors_per_block: 2,
            seed,
        }
    }

    #[test]
    fn validation() {
        assert!(small(2, 0.5, 1).validate().is_ok());
        let mut s = small(3, 0.5, 1);
        assert!(s.validate().is_err());
        s = small(2, 1.5, 1);
        assert!(s.validate().is_err());
        s = small(2, 0.5, 1);
        s.n_entities = 3;
        assert!(s.validate().is_err());
        s = small(2, 0.5, 1);
        s.successors_per_block = 10;
        assert!(s.validate().is_err());
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = PlantedChainSpec {
            n_paths: 500,
            ..small(2, 0.7, 3)
        };
        let (a, la) = generate(&spec).unwrap();
        let (b, lb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = generate(&PlantedChainSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_blocks() {
        let spec = PlantedChainSpec {
            n_paths: 200,
            ..small(2, 0.5, 2)
        };
        let (corpus, labels) = generate(&spec).unwrap();
        assert_eq!(labels.n_classes(), 2);
        for id in corpus.index().ids() {
            let e: usize = corpus.index().token(id)[1..].parse().unwrap();
            assert_eq!(labels.get(id), Some((e % 2) as u32));
        }
    }

    #[test]
    fn zero_memory_admits_no_conditional_nodes() {
        let (corpus, _) = generate(&small(2, 0.0, 5)).unwrap();
        let g = build_hon(&corpus, &HonConfig::new(2)).unwrap();
        let frac = g.conditional_nodes().count() as f64 / corpus.n_entities() as f64;
        assert!(frac < 0.01, "{frac}");
    }

    #[test]
    fn full_memory_admits_most_contexts() {
        let (corpus, _) = generate(&small(2, 1.0, 6)).unwrap();
        let g = build_hon(&corpus, &HonConfig::new(2)).unwrap();
        // 20 entities × 4 successors each
        assert!(g.conditional_nodes().count() >= 70, "{}", g.conditional_nodes().count());
    }
}
