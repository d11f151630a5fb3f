//! Experiment protocol and metrics.

use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::{EntityId, LabelMap};
use crate::ensemble::{train, DgeVariant, EnsembleError, EnsembleModel, Targets, TrainConfig};
use crate::graphstore::HonGraph;
use crate::nn::argmax;
use crate::rng::{purpose, splitmix64, SeedStream};
use crate::sampler::{make_bootstraps, SamplerError, Units};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("class {class:?} has {members} members, fewer than {folds} folds")]
    ClassTooSmall {
        class: String,
        members: usize,
        folds: usize,
    },
    #[error("at least 2 folds are required")]
    TooFewFolds,
    #[error("no prediction for entity {0}")]
    MissingPrediction(u32),
    #[error("{0}")]
    Length(String),
    #[error("empty input")]
    Empty,
    #[error("truth needs at least one positive and one negative")]
    DegenerateTruth,
    #[error("no labeled entities (classification needs a label file with at least one class)")]
    NoLabels,
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Seed for run `r` of an experiment seeded with `seed`.
pub fn run_seed(seed: u64, r: u64) -> u64 {
    splitmix64(seed ^ splitmix64(r.wrapping_add(1)))
}

/// Stratified fold assignment of labeled entities.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub n_folds: usize,
    /// Fold of each entity id; `None` for unlabeled entities.
    pub assignment: Vec<Option<usize>>,
}

impl FoldPlan {
    pub fn fold_of(&self, e: EntityId) -> Option<usize> {
        self.assignment.get(e.idx()).copied().flatten()
    }

    pub fn test_set(&self, fold: usize) -> Vec<EntityId> {
        self.members(|f| f == fold)
    }

    pub fn train_set(&self, fold: usize) -> Vec<EntityId> {
        self.members(|f| f != fold)
    }

    fn members(&self, keep: impl Fn(usize) -> bool) -> Vec<EntityId> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_some_and(&keep))
            .map(|(i, _)| EntityId(i as u32))
            .collect()
    }
}

/// Shuffles each class (stream `[FOLDS, class]`) and deals its members
/// round-robin. Each class starts where the previous one stopped, so fold
/// sizes also differ by at most one.
pub fn make_folds(labels: &LabelMap, n_folds: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if n_folds < 2 {
        return Err(EvalError::TooFewFolds);
    }
    let mut by_class: Vec<Vec<EntityId>> = vec![Vec::new(); labels.n_classes()];
    for (e, c) in labels.iter() {
        by_class[c as usize].push(e);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < n_folds {
            return Err(EvalError::ClassTooSmall {
                class: labels.class_name(c as u32).to_string(),
                members: members.len(),
                folds: n_folds,
            });
        }
    }
    let n = labels.iter().map(|(e, _)| e.idx() + 1).max().unwrap_or(0);
    let mut assignment = vec![None; n];
    let mut dealt = 0usize;
    for (c, mut members) in by_class.into_iter().enumerate() {
        members.sort();
        SeedStream::new(seed, &[purpose::FOLDS, c as u64]).shuffle(&mut members);
        for (k, e) in members.iter().enumerate() {
            assignment[e.idx()] = Some((dealt + k) % n_folds);
        }
        dealt += members.len();
    }
    Ok(FoldPlan { n_folds, assignment })
}

/// Train/test split for link prediction.
#[derive(Clone, Debug)]
pub struct LinkSplit {
    pub test_pos: Vec<(EntityId, EntityId)>,
    pub test_neg: Vec<(EntityId, EntityId)>,
    /// First-order pairs that stay visible.
    pub train_pos: Vec<(EntityId, EntityId)>,
    pub train_graph: HonGraph,
    pub warnings: Vec<String>,
}

/// Distinct first-order base pairs `(u, v)`, `u != v`, sorted.
pub fn first_order_pairs(graph_1: &HonGraph) -> Vec<(EntityId, EntityId)> {
    let mut pairs: Vec<(EntityId, EntityId)> = graph_1
        .edges()
        .map(|(a, b, _)| (graph_1.base(a), graph_1.base(b)))
        .filter(|(u, v)| u != v)
        .collect();
    pairs.sort();
    pairs.dedup();
    pairs
}

fn adjacency(graph_1: &HonGraph) -> HashSet<(EntityId, EntityId)> {
    graph_1.edges().map(|(a, b, _)| (graph_1.base(a), graph_1.base(b))).collect()
}

/// Draws up to `count` distinct ordered pairs of present entities that are
/// not adjacent in either direction and not in `exclude`.
pub fn sample_non_edges(
    graph_1: &HonGraph,
    count: usize,
    exclude: &HashSet<(EntityId, EntityId)>,
    rng: &mut SeedStream,
) -> Vec<(EntityId, EntityId)> {
    let adj = adjacency(graph_1);
    let ents: Vec<EntityId> = graph_1.present_entities().collect();
    let n = ents.len();
    let blocked = |u: EntityId, v: EntityId| u == v || adj.contains(&(u, v)) || adj.contains(&(v, u)) || exclude.contains(&(u, v));
    let space = n * n.saturating_sub(1);
    let mut out = Vec::with_capacity(count);
    if n < 2 || count == 0 {
        return out;
    }
    // Rejection sampling while the space is roomy; enumerate otherwise.
    let dense = (adj.len() * 2 + exclude.len() + count) * 2 > space;
    if dense {
        let mut all: Vec<(EntityId, EntityId)> = Vec::new();
        for &u in &ents {
            for &v in &ents {
                if !blocked(u, v) {
                    all.push((u, v));
                }
            }
        }
        rng.shuffle(&mut all);
        all.truncate(count);
        return all;
    }
    let mut seen = HashSet::new();
    while out.len() < count {
        let (u, v) = (ents[rng.below(n)], ents[rng.below(n)]);
        if !blocked(u, v) && seen.insert((u, v)) {
            out.push((u, v));
        }
    }
    out
}

/// Hides `floor(fraction · |E_1|)` first-order pairs. Every edge of
/// `graph_k` whose endpoints belong to the families of a hidden pair, in
/// either direction, is removed. Negatives are drawn from stream
/// `[NEGATIVES, 0]`.
pub fn make_link_split(graph_k: &HonGraph, graph_1: &HonGraph, fraction: f64, seed: u64) -> LinkSplit {
    let mut pairs = first_order_pairs(graph_1);
    SeedStream::new(seed, &[purpose::LINK_SPLIT]).shuffle(&mut pairs);
    let n_test = ((pairs.len() as f64) * fraction.clamp(0.0, 1.0)).floor() as usize;
    let test_pos: Vec<(EntityId, EntityId)> = pairs[..n_test].to_vec();
    let hidden: HashSet<(EntityId, EntityId)> = test_pos.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
    let mut train_pos: Vec<(EntityId, EntityId)> = pairs[n_test..].iter().copied().filter(|p| !hidden.contains(p)).collect();
    train_pos.sort();
    let train_graph = graph_k.without_edges(|a, b| hidden.contains(&(graph_k.base(a), graph_k.base(b))));
    let test_neg = sample_non_edges(
        graph_1,
        test_pos.len(),
        &HashSet::new(),
        &mut SeedStream::new(seed, &[purpose::NEGATIVES, 0]),
    );
    let mut warnings = Vec::new();
    let isolated = graph_k
        .present_entities()
        .filter(|&e| {
            let had = graph_k.family_ids(e).iter().any(|&n| !graph_k.out_edges(n).is_empty() || !graph_k.in_edges(n).is_empty());
            let has = train_graph
                .family_ids(e)
                .iter()
                .any(|&n| !train_graph.out_edges(n).is_empty() || !train_graph.in_edges(n).is_empty());
            had && !has
        })
        .count();
    if isolated > 0 {
        warnings.push(format!("{isolated} entities lost all their edges to the test split"));
    }
    LinkSplit {
        test_pos,
        test_neg,
        train_pos,
        train_graph,
        warnings,
    }
}

/// Single-label predictions scored as micro-averaged F1 (computed from
/// per-class true/false positive counts).
pub fn micro_f1(nodes: &[EntityId], predictions: &[u32], truth: &LabelMap) -> Result<f64, EvalError> {
    if nodes.len() != predictions.len() {
        return Err(EvalError::Length(format!(
            "{} nodes but {} predictions",
            nodes.len(),
            predictions.len()
        )));
    }
    if nodes.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&e, &p) in nodes.iter().zip(predictions) {
        let t = truth.get(e).ok_or(EvalError::MissingPrediction(e.0))?;
        if t == p {
            tp += 1;
        } else {
            fp += 1; // counted against the predicted class
            fneg += 1; // and against the true class
        }
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fneg as f64))
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Length("prediction and truth lengths differ".into()));
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / predicted.len() as f64)
}

/// Rank-based average precision. Scores are sorted descending; ties keep
/// input order.
pub fn auprc(scores: &[f64], truth: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::Length("score and truth lengths differ".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    if pos == 0 || pos == truth.len() {
        return Err(EvalError::DegenerateTruth);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// Chance-corrected agreement between two label sequences.
pub fn cohens_kappa(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length("prediction lengths differ".into()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = a.iter().chain(b).max().unwrap() + 1;
    let (mut ca, mut cb) = (vec![0u64; k], vec![0u64; k]);
    let mut agree = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        ca[x] += 1;
        cb[y] += 1;
        agree += u64::from(x == y);
    }
    let n = a.len() as u64;
    let expected: u64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    if expected == n * n {
        return Ok(1.0);
    }
    let po = agree as f64 / n as f64;
    let pe = expected as f64 / (n * n) as f64;
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityRow {
    pub a: usize,
    pub b: usize,
    pub kappa: f64,
    pub mean_loss: f64,
}

pub fn learner_losses(per_learner: &[Vec<Vec<f64>>], truth: &[usize]) -> Vec<f64> {
    per_learner
        .iter()
        .map(|set| {
            set.iter().zip(truth).map(|(p, &t)| -p[t].max(1e-300).ln()).sum::<f64>() / truth.len() as f64
        })
        .collect()
}

/// Pairwise κ of argmax predictions and mean cross-entropy for every
/// learner pair `a < b`.
pub fn diversity_from_predictions(per_learner: &[Vec<Vec<f64>>], truth: &[usize]) -> Result<Vec<DiversityRow>, EvalError> {
    let preds: Vec<Vec<usize>> = per_learner.iter().map(|s| s.iter().map(|p| argmax(p)).collect()).collect();
    let losses = learner_losses(per_learner, truth);
    let mut rows = Vec::new();
    for a in 0..preds.len() {
        for b in a + 1..preds.len() {
            rows.push(DiversityRow {
                a,
                b,
                kappa: cohens_kappa(&preds[a], &preds[b])?,
                mean_loss: (losses[a] + losses[b]) / 2.0,
            });
        }
    }
    Ok(rows)
}

pub fn diversity_report(
    model: &EnsembleModel,
    graph: &HonGraph,
    test_nodes: &[EntityId],
    truth: &LabelMap,
    seed: u64,
) -> Result<Vec<DiversityRow>, EvalError> {
    let per = model.per_learner_predictions(graph, test_nodes, seed)?;
    let y: Vec<usize> = test_nodes
        .iter()
        .map(|&e| truth.get(e).map(|c| c as usize).ok_or(EvalError::MissingPrediction(e.0)))
        .collect::<Result<_, _>>()?;
    diversity_from_predictions(&per, &y)
}

pub fn diversity_tsv(rows: &[DiversityRow]) -> String {
    let mut out = String::from("learner_a\tlearner_b\tkappa\tmean_loss\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}", r.a, r.b, r.kappa, r.mean_loss).unwrap();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Homophily {
    /// Per node id; `None` for unlabeled nodes and nodes with no labeled
    /// neighbor.
    pub per_node: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

/// Fraction of each labeled node's distinct neighbors (in or out,
/// unweighted, excluding itself, labeled only) that share its class.
/// Conditional nodes carry their base entity's label.
pub fn homophily(graph: &HonGraph, labels: &LabelMap) -> Homophily {
    let mut per_node = Vec::with_capacity(graph.n_nodes());
    let mut nb: Vec<u32> = Vec::new();
    for u in graph.node_ids() {
        let Some(cu) = labels.get(graph.base(u)) else {
            per_node.push(None);
            continue;
        };
        nb.clear();
        nb.extend(graph.out_edges(u).iter().chain(graph.in_edges(u)).map(|(n, _)| n.0));
        nb.sort_unstable();
        nb.dedup();
        let (mut same, mut total) = (0usize, 0usize);
        for &n in &nb {
            if n == u.0 {
                continue;
            }
            if let Some(c) = labels.get(graph.base(crate::graphstore::NodeId(n))) {
                total += 1;
                same += usize::from(c == cu);
            }
        }
        per_node.push((total > 0).then(|| same as f64 / total as f64));
    }
    let vals: Vec<f64> = per_node.iter().flatten().copied().collect();
    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Homophily { per_node, mean }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Node-classification experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeExperiment {
    pub variant: DgeVariant,
    pub train: TrainConfig,
    pub n_folds: usize,
    /// Folds to run; all when empty.
    pub folds: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub n_test: usize,
    pub micro_f1: f64,
    /// Per-learner micro-F1 for probability-mean variants.
    pub learner_f1: Vec<f64>,
    /// Accuracy of always predicting the training majority class.
    pub majority_f1: f64,
    pub diversity: Vec<DiversityRow>,
    pub model: EnsembleModel,
}

/// Stratified cross-validation on `graph`. Fold `f` trains on every other
/// fold with seed `run_seed(seed, f)`; bootstraps, training and prediction
/// all derive from that seed.
pub fn run_node_classification(graph: &HonGraph, labels: &LabelMap, exp: &NodeExperiment) -> Result<Vec<FoldResult>, EvalError> {
    if labels.n_classes() == 0 || labels.n_labeled() == 0 {
        return Err(EvalError::NoLabels);
    }
    // Only entities present in the graph take part.
    let present: HashSet<EntityId> = graph.present_entities().collect();
    let visible = LabelMap::from_assignments(
        labels_len(labels),
        labels.n_classes(),
        labels.iter().filter(|(e, _)| present.contains(e)),
    );
    let plan = make_folds(&visible, exp.n_folds, exp.seed)?;
    let folds: Vec<usize> = if exp.folds.is_empty() {
        (0..exp.n_folds).collect()
    } else {
        exp.folds.clone()
    };
    let mut out = Vec::new();
    for f in folds {
        let seed = run_seed(exp.seed, f as u64);
        let train_nodes = plan.train_set(f);
        let test_nodes = plan.test_set(f);
        let classes: Vec<usize> = train_nodes.iter().map(|&e| visible.get(e).unwrap() as usize).collect();
        let targets = Targets::Nodes {
            units: train_nodes.clone(),
            classes: classes.clone(),
            n_classes: labels.n_classes(),
        };
        let boots = make_bootstraps(graph, &Units::Nodes(train_nodes.clone()), exp.variant.ell, seed)?;
        let model = train(graph, &boots, &targets, exp.variant, &exp.train, seed)?;
        let probs = model.predict_nodes(graph, &test_nodes, seed)?;
        let preds: Vec<u32> = probs.iter().map(|p| argmax(p) as u32).collect();
        let micro = micro_f1(&test_nodes, &preds, &visible)?;
        let mut counts = vec![0usize; labels.n_classes()];
        classes.iter().for_each(|&c| counts[c] += 1);
        let majority = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>()) as u32;
        let majority_f1 = micro_f1(&test_nodes, &vec![majority; test_nodes.len()], &visible)?;
        let (learner_f1, diversity) = if exp.variant.tag.has_per_learner_outputs() {
            let per = model.per_learner_predictions(graph, &test_nodes, seed)?;
            let y: Vec<usize> = test_nodes.iter().map(|&e| visible.get(e).unwrap() as usize).collect();
            let f1s = per
                .iter()
                .map(|set| {
                    let p: Vec<u32> = set.iter().map(|p| argmax(p) as u32).collect();
                    micro_f1(&test_nodes, &p, &visible)
                })
                .collect::<Result<Vec<_>, _>>()?;
            (f1s, diversity_from_predictions(&per, &y)?)
        } else {
            (Vec::new(), Vec::new())
        };
        out.push(FoldResult {
            fold: f,
            n_test: test_nodes.len(),
            micro_f1: micro,
            learner_f1,
            majority_f1,
            diversity,
            model,
        });
    }
    Ok(out)
}

fn labels_len(labels: &LabelMap) -> usize {
    labels.iter().map(|(e, _)| e.idx() + 1).max().unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkExperiment {
    pub variant: DgeVariant,
    pub train: TrainConfig,
    pub fraction: f64,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkResult {
    pub repeat: usize,
    pub n_test: usize,
    pub auprc: f64,
}

/// `positives` followed by as many sampled non-edges of `graph_1`
/// (stream `[NEGATIVES, 1]`) that avoid `exclude`.
pub fn link_targets(
    graph_1: &HonGraph,
    positives: Vec<(EntityId, EntityId)>,
    exclude: &HashSet<(EntityId, EntityId)>,
    seed: u64,
) -> Targets {
    let neg = sample_non_edges(
        graph_1,
        positives.len(),
        exclude,
        &mut SeedStream::new(seed, &[purpose::NEGATIVES, 1]),
    );
    let mut labels = vec![true; positives.len()];
    labels.extend(vec![false; neg.len()]);
    let mut units = positives;
    units.extend(neg);
    Targets::Edges { units, labels }
}

/// Repeated link-prediction splits. Training pairs come from
/// [`link_targets`] over the visible first-order pairs, avoiding every test
/// pair.
pub fn run_link_prediction(graph_k: &HonGraph, graph_1: &HonGraph, exp: &LinkExperiment) -> Result<Vec<LinkResult>, EvalError> {
    let mut out = Vec::new();
    for r in 0..exp.repeats {
        let seed = run_seed(exp.seed, r as u64);
        let split = make_link_split(graph_k, graph_1, exp.fraction, seed);
        if split.test_pos.is_empty() || split.test_neg.is_empty() {
            return Err(EvalError::DegenerateTruth);
        }
        let exclude: HashSet<(EntityId, EntityId)> = split.test_neg.iter().chain(&split.test_pos).copied().collect();
        let targets = link_targets(graph_1, split.train_pos.clone(), &exclude, seed);
        let boots = make_bootstraps(&split.train_graph, &targets.units(), exp.variant.ell, seed)?;
        let model = train(&split.train_graph, &boots, &targets, exp.variant, &exp.train, seed)?;
        let mut pairs = split.test_pos.clone();
        pairs.extend(&split.test_neg);
        let mut truth = vec![true; split.test_pos.len()];
        truth.extend(vec![false; split.test_neg.len()]);
        let scores = model.predict_edges(&split.train_graph, &pairs, seed)?;
        out.push(LinkResult {
            repeat: r,
            n_test: pairs.len(),
            auprc: auprc(&scores, &truth)?,
        });
    }
    Ok(out)
}

/// One row per run, then `mean` and `std` rows.
pub fn report_tsv(metric: &str, rows: &[(usize, usize, f64)]) -> String {
    let mut out = format!("run\tn_test\t{metric}\n");
    for (run, n, v) in rows {
        writeln!(out, "{run}\t{n}\t{v}").unwrap();
    }
    let vals: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let total: usize = rows.iter().map(|r| r.1).sum();
    if !vals.is_empty() {
        let (m, s) = mean_std(&vals);
        writeln!(out, "mean\t{total}\t{m}").unwrap();
        writeln!(out, "std\t{total}\t{s}").unwrap();
    }
    out
}
