//! Ensembles of graph networks over higher-order families.
//!
//! Each logical learner `i` sees one relative per unit (from bootstrap `i`
//! during training, from a fresh draw at inference). Learners are combined
//! in one of three ways:
//!
//! * probability mean (`bag`, `bag*`, `batch*`): every learner has its own
//!   head and the ensemble averages their softmax outputs;
//! * hidden mean (`pool`, `pool*`): final hidden states are averaged and fed
//!   to a single `d × c` head;
//! * concatenation (`concat`, `concat*`): hidden states are concatenated and
//!   fed to a single `dℓ × c` head.
//!
//! Starred variants hold one physical network that every logical learner
//! runs through. For link prediction a learner embeds both endpoints of its
//! relative pair and scores `σ(dense(h_u ⊙ h_v))`.
//!
//! All randomness is keyed by purpose paths under the training seed, so the
//! same inputs give bit-identical models regardless of thread count, and an
//! ensemble of one collapses to the same computation for every variant.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::EntityId;
use crate::graphstore::HonGraph;
use crate::nn::{
    adam_step, load_records_into, loss_logistic, loss_softmax_xent, sigmoid, softmax, tensors_to_text, AdamConfig,
    AdamState, Dense, GnnConfig, GnnNet, NnError, ParamSet, SageCache, SampleTree, Tensor, CHECKPOINT_HEADER,
};
use crate::rng::{purpose, SeedStream};
use crate::sampler::{BootstrapSet, Direction, Relative, SamplerError, UnitLaws, Units};

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("{0}")]
    Units(String),
    #[error("model was trained for {expected}, not {found}")]
    WrongTask { expected: String, found: String },
    #[error("variant {0} has no per-learner outputs")]
    NoPerLearnerOutputs(Variant),
    #[error("unknown entity {0}")]
    UnknownEntity(u32),
    #[error("bad training configuration: {0}")]
    Config(String),
    #[error("model checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Bag,
    Pool,
    Concat,
    BagStar,
    PoolStar,
    ConcatStar,
    BatchStar,
}

/// How logical learners are combined into one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    ProbMean,
    HiddenMean,
    Concat,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Bag,
        Variant::Pool,
        Variant::Concat,
        Variant::BagStar,
        Variant::PoolStar,
        Variant::ConcatStar,
        Variant::BatchStar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Bag => "bag",
            Variant::Pool => "pool",
            Variant::Concat => "concat",
            Variant::BagStar => "bag*",
            Variant::PoolStar => "pool*",
            Variant::ConcatStar => "concat*",
            Variant::BatchStar => "batch*",
        }
    }

    pub fn shared_params(self) -> bool {
        matches!(
            self,
            Variant::BagStar | Variant::PoolStar | Variant::ConcatStar | Variant::BatchStar
        )
    }

    pub fn combine(self) -> Combine {
        match self {
            Variant::Bag | Variant::BagStar | Variant::BatchStar => Combine::ProbMean,
            Variant::Pool | Variant::PoolStar => Combine::HiddenMean,
            Variant::Concat | Variant::ConcatStar => Combine::Concat,
        }
    }

    /// Whether each logical learner produces its own prediction.
    pub fn has_per_learner_outputs(self) -> bool {
        self.combine() == Combine::ProbMean
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected one of bag, pool, concat, bag*, pool*, concat*, batch*)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DgeVariant {
    pub tag: Variant,
    pub ell: usize,
}

impl DgeVariant {
    pub fn new(tag: Variant, ell: usize) -> Result<Self, EnsembleError> {
        if ell == 0 {
            return Err(EnsembleError::Config("ensemble size must be at least 1".into()));
        }
        Ok(DgeVariant { tag, ell })
    }

    pub fn shared_params(&self) -> bool {
        self.tag.shared_params()
    }

    pub fn n_physical(&self) -> usize {
        if self.shared_params() {
            1
        } else {
            self.ell
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Node { n_classes: usize },
    Link,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Node { .. } => "node",
            Task::Link => "edge",
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            Task::Node { n_classes } => *n_classes,
            Task::Link => 1,
        }
    }
}

/// Supervision aligned with the bootstrap units.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Nodes {
        units: Vec<EntityId>,
        classes: Vec<usize>,
        n_classes: usize,
    },
    Edges {
        units: Vec<(EntityId, EntityId)>,
        labels: Vec<bool>,
    },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Nodes { units, .. } => units.len(),
            Targets::Edges { units, .. } => units.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn units(&self) -> Units {
        match self {
            Targets::Nodes { units, .. } => Units::Nodes(units.clone()),
            Targets::Edges { units, .. } => Units::Edges(units.clone()),
        }
    }

    fn task(&self) -> Task {
        match self {
            Targets::Nodes { n_classes, .. } => Task::Node { n_classes: *n_classes },
            Targets::Edges { .. } => Task::Link,
        }
    }

    fn target(&self, j: usize) -> Target {
        match self {
            Targets::Nodes { classes, .. } => Target::Class(classes[j]),
            Targets::Edges { labels, .. } => Target::Edge(labels[j]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Edge(bool),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gnn: GnnConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gnn: GnnConfig::default(),
            lr: 0.01,
            epochs: 100,
            batch_size: 32,
            patience: 10,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        self.gnn.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EnsembleError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(EnsembleError::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(EnsembleError::Config(format!(
                "holdout fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// Physical parameters: networks plus output heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub nets: Vec<GnnNet>,
    pub heads: Vec<Dense>,
}

impl ParamSet for Params {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let many_nets = self.nets.len() > 1;
        for (i, n) in self.nets.iter().enumerate() {
            let p = if many_nets { format!("gnn{i}.") } else { "gnn.".to_string() };
            out.extend(n.tensors_named(&p));
        }
        let many_heads = self.heads.len() > 1;
        for (i, h) in self.heads.iter().enumerate() {
            let p = if many_heads { format!("head{i}") } else { "head".to_string() };
            out.extend(h.tensors_named(&p));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for n in &mut self.nets {
            out.extend(n.tensors_mut());
        }
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out
    }
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        z.zero();
        z
    }
}

/// A logical learner: which network and head it runs through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub net: usize,
    pub head: usize,
}

/// Neighbor samples for one example, frozen so its loss is a deterministic
/// function of the parameters.
#[derive(Clone, Debug)]
pub struct FrozenExample {
    pub views: Vec<View>,
    /// Per view: one tree (node task) or two (edge task).
    pub trees: Vec<Vec<SampleTree>>,
    pub target: Target,
}

impl FrozenExample {
    /// Draws trees for the given relatives, one stream per view.
    pub fn sample(
        params: &Params,
        graph: &HonGraph,
        views: &[View],
        relatives: &[Relative],
        streams: &mut [SeedStream],
        target: Target,
    ) -> Self {
        let trees = views
            .iter()
            .zip(relatives)
            .zip(streams.iter_mut())
            .map(|((v, rel), rng)| {
                let net = &params.nets[v.net];
                match *rel {
                    Relative::Node(n) => vec![net.sample_tree(graph, n, rng)],
                    Relative::Pair(a, b) => vec![net.sample_tree(graph, a, rng), net.sample_tree(graph, b, rng)],
                }
            })
            .collect();
        FrozenExample {
            views: views.to_vec(),
            trees,
            target,
        }
    }
}

/// Per-view forward caches (one per tree).
struct Pass {
    caches: Vec<Vec<SageCache>>,
}

fn mean_into(acc: &mut [f64], parts: &[&[f64]]) {
    acc.fill(0.0);
    for p in parts {
        for (a, x) in acc.iter_mut().zip(*p) {
            *a += x;
        }
    }
    let n = parts.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Forward (and optionally backward) pass of one example, returning the
/// loss against `ex.target` and the combined probabilities.
fn run_example(
    params: &Params,
    graph: &HonGraph,
    combine: Combine,
    ex: &FrozenExample,
    mut dropout: Option<&mut [SeedStream]>,
    grads: Option<&mut Params>,
) -> Result<(f64, Vec<f64>), EnsembleError> {
    let nv = ex.views.len();
    let mut caches = Vec::with_capacity(nv);
    for (i, (v, trees)) in ex.views.iter().zip(&ex.trees).enumerate() {
        let net = &params.nets[v.net];
        let mut c = Vec::with_capacity(trees.len());
        for t in trees {
            let rng = dropout.as_deref_mut().map(|s| &mut s[i]);
            c.push(net.forward(graph, t, rng));
        }
        caches.push(c);
    }
    let pass = Pass { caches };
    let is_edge = matches!(ex.target, Target::Edge(_));
    let hidden = |pass: &Pass, i: usize, side: usize| pass.caches[i][side].output().to_vec();

    // Combined logits and, on the way back, gradient per view and side.
    let mut d_h: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut loss = 0.0;
    let probs;
    let want_grad = grads.is_some();
    let mut head_grads: Option<&mut Params> = grads;

    let score = |head: &Dense, a: &[f64], b: Option<&[f64]>| -> (Vec<f64>, Vec<f64>) {
        let x = match b {
            Some(b) => hadamard(a, b),
            None => a.to_vec(),
        };
        (head.forward(&x), x)
    };

    match combine {
        Combine::ProbMean => {
            let mut sum: Option<Vec<f64>> = None;
            for (i, v) in ex.views.iter().enumerate() {
                let head = &params.heads[v.head];
                let ha = hidden(&pass, i, 0);
                let hb = if is_edge { Some(hidden(&pass, i, 1)) } else { None };
                let (z, x) = score(head, &ha, hb.as_deref());
                let p = if is_edge { vec![sigmoid(z[0])] } else { softmax(&z) };
                match &mut sum {
                    None => sum = Some(p),
                    Some(s) => s.iter_mut().zip(&p).for_each(|(a, b)| *a += b),
                }
                if nv == 1 {
                    let (l, dz) = target_loss(&z, ex.target)?;
                    loss = l;
                    if let Some(g) = head_grads.as_deref_mut() {
                        let dx = head.backward(&x, &dz, &mut g.heads[v.head]);
                        d_h.push(split_product(dx, &ha, hb.as_deref()));
                    }
                }
            }
            let mut s = sum.unwrap();
            if nv > 1 {
                if want_grad {
                    return Err(EnsembleError::Config(
                        "probability-mean training uses one view per example".into(),
                    ));
                }
                let n = nv as f64;
                s.iter_mut().for_each(|a| *a /= n);
                loss = prob_loss(&s, ex.target);
            }
            probs = s;
        }
        Combine::HiddenMean | Combine::Concat => {
            let sides = if is_edge { 2 } else { 1 };
            let mut pooled = Vec::with_capacity(sides);
            for side in 0..sides {
                let hs: Vec<Vec<f64>> = (0..nv).map(|i| hidden(&pass, i, side)).collect();
                let refs: Vec<&[f64]> = hs.iter().map(|h| h.as_slice()).collect();
                let p = if combine == Combine::HiddenMean {
                    let mut acc = vec![0.0; hs[0].len()];
                    mean_into(&mut acc, &refs);
                    acc
                } else {
                    refs.concat()
                };
                pooled.push(p);
            }
            let head = &params.heads[0];
            let (z, x) = score(head, &pooled[0], pooled.get(1).map(|p| p.as_slice()));
            let (l, dz) = target_loss(&z, ex.target)?;
            loss = l;
            probs = if is_edge { vec![sigmoid(z[0])] } else { softmax(&z) };
            if let Some(g) = head_grads.as_deref_mut() {
                let dx = head.backward(&x, &dz, &mut g.heads[0]);
                let d_pooled = split_product(dx, &pooled[0], pooled.get(1).map(|p| p.as_slice()));
                for i in 0..nv {
                    let mut per_side = Vec::with_capacity(sides);
                    for dp in &d_pooled {
                        if combine == Combine::HiddenMean {
                            let n = nv as f64;
                            per_side.push(dp.iter().map(|d| d / n).collect());
                        } else {
                            let d = dp.len() / nv;
                            per_side.push(dp[i * d..(i + 1) * d].to_vec());
                        }
                    }
                    d_h.push(per_side);
                }
            }
        }
    }

    if let Some(g) = head_grads {
        for (i, v) in ex.views.iter().enumerate() {
            let net = &params.nets[v.net];
            for (side, tree) in ex.trees[i].iter().enumerate() {
                net.backward(tree, &pass.caches[i][side], &d_h[i][side], &mut g.nets[v.net]);
            }
        }
    }
    Ok((loss, probs))
}

/// Gradient of `x = a ⊙ b` (edge task) or `x = a` back to its factors.
fn split_product(dx: Vec<f64>, a: &[f64], b: Option<&[f64]>) -> Vec<Vec<f64>> {
    match b {
        None => vec![dx],
        Some(b) => vec![hadamard(&dx, b), hadamard(&dx, a)],
    }
}

fn target_loss(z: &[f64], target: Target) -> Result<(f64, Vec<f64>), EnsembleError> {
    Ok(match target {
        Target::Class(c) => loss_softmax_xent(z, c)?,
        Target::Edge(y) => {
            let (l, d) = loss_logistic(z[0], y)?;
            (l, vec![d])
        }
    })
}

/// Cross-entropy of an already averaged probability vector.
fn prob_loss(p: &[f64], target: Target) -> f64 {
    let q = match target {
        Target::Class(c) => p[c],
        Target::Edge(true) => p[0],
        Target::Edge(false) => 1.0 - p[0],
    };
    -q.max(1e-300).ln()
}

/// Loss and analytic gradients of one frozen example in evaluation mode
/// (no dropout). Used for gradient checks.
pub fn example_loss_and_grad(
    params: &Params,
    graph: &HonGraph,
    combine: Combine,
    ex: &FrozenExample,
) -> Result<(f64, Params), EnsembleError> {
    let mut g = params.zeros_like();
    let (l, _) = run_example(params, graph, combine, ex, None, Some(&mut g))?;
    Ok((l, g))
}

pub fn example_loss(params: &Params, graph: &HonGraph, combine: Combine, ex: &FrozenExample) -> Result<f64, EnsembleError> {
    Ok(run_example(params, graph, combine, ex, None, None)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub variant: DgeVariant,
    pub task: Task,
    pub params: Params,
    /// Seed the model was trained with.
    pub seed: u64,
    pub gnn: GnnConfig,
    /// Per training stage: epochs run and the epoch whose parameters were
    /// kept.
    pub history: Vec<StageReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl EnsembleModel {
    /// Freshly initialized model. Network `i` uses stream `[INIT, i]`, head
    /// `i` uses `[HEAD_INIT, i]`.
    pub fn init(variant: DgeVariant, task: Task, gnn: &GnnConfig, in_dim: usize, seed: u64) -> Result<Self, EnsembleError> {
        gnn.validate()?;
        let nets = (0..variant.n_physical())
            .map(|i| GnnNet::new(gnn, in_dim, &mut SeedStream::new(seed, &[purpose::INIT, i as u64])))
            .collect::<Result<Vec<_>, _>>()?;
        let d = gnn.hidden;
        let c = task.out_dim();
        let heads = match variant.tag.combine() {
            Combine::ProbMean => (0..variant.n_physical())
                .map(|i| Dense::new(d, c, &mut SeedStream::new(seed, &[purpose::HEAD_INIT, i as u64])))
                .collect(),
            Combine::HiddenMean => vec![Dense::new(d, c, &mut SeedStream::new(seed, &[purpose::HEAD_INIT, 0]))],
            Combine::Concat => vec![Dense::new(
                d * variant.ell,
                c,
                &mut SeedStream::new(seed, &[purpose::HEAD_INIT, 0]),
            )],
        };
        Ok(EnsembleModel {
            variant,
            task,
            params: Params { nets, heads },
            seed,
            gnn: gnn.clone(),
            history: Vec::new(),
        })
    }

    pub fn ell(&self) -> usize {
        self.variant.ell
    }

    pub fn n_physical_learners(&self) -> usize {
        self.params.nets.len()
    }

    /// Shapes of the output heads.
    pub fn head_shapes(&self) -> Vec<Vec<usize>> {
        self.params.heads.iter().map(|h| h.w.shape.clone()).collect()
    }

    /// Logical learner `i`.
    pub fn view(&self, i: usize) -> View {
        if self.variant.shared_params() {
            View { net: 0, head: 0 }
        } else {
            match self.variant.tag.combine() {
                Combine::ProbMean => View { net: i, head: i },
                _ => View { net: i, head: 0 },
            }
        }
    }

    pub fn views(&self) -> Vec<View> {
        (0..self.ell()).map(|i| self.view(i)).collect()
    }

    fn check_task(&self, want: &str) -> Result<(), EnsembleError> {
        if self.task.name() != want {
            return Err(EnsembleError::WrongTask {
                expected: self.task.name().into(),
                found: want.into(),
            });
        }
        Ok(())
    }

    /// Class probabilities per node. Relatives come from stream
    /// `[PREDICT_DRAW, entity]`; learner `i` samples neighbors from
    /// `[PREDICT, entity, i]`.
    pub fn predict_nodes(&self, graph: &HonGraph, nodes: &[EntityId], seed: u64) -> Result<Vec<Vec<f64>>, EnsembleError> {
        self.check_task("node")?;
        let laws = UnitLaws::new(graph, &Units::Nodes(nodes.to_vec()))?;
        let views = self.views();
        let combine = self.variant.tag.combine();
        (0..nodes.len())
            .into_par_iter()
            .map(|j| {
                let ex = self.inference_example(graph, &laws, j, &views, &[nodes[j].0 as u64], seed);
                Ok(run_example(&self.params, graph, combine, &ex, None, None)?.1)
            })
            .collect()
    }

    /// The ℓ individual probability sets of a probability-mean model:
    /// `result[i][j]` is learner `i`'s output for `nodes[j]`. Draws match
    /// [`EnsembleModel::predict_nodes`] for the same seed.
    pub fn per_learner_predictions(
        &self,
        graph: &HonGraph,
        nodes: &[EntityId],
        seed: u64,
    ) -> Result<Vec<Vec<Vec<f64>>>, EnsembleError> {
        self.check_task("node")?;
        if !self.variant.tag.has_per_learner_outputs() {
            return Err(EnsembleError::NoPerLearnerOutputs(self.variant.tag));
        }
        let laws = UnitLaws::new(graph, &Units::Nodes(nodes.to_vec()))?;
        let views = self.views();
        let rows: Vec<Vec<Vec<f64>>> = (0..nodes.len())
            .into_par_iter()
            .map(|j| {
                let ex = self.inference_example(graph, &laws, j, &views, &[nodes[j].0 as u64], seed);
                (0..views.len())
                    .map(|i| {
                        let single = FrozenExample {
                            views: vec![ex.views[i]],
                            trees: vec![ex.trees[i].clone()],
                            target: ex.target,
                        };
                        Ok(run_example(&self.params, graph, Combine::ProbMean, &single, None, None)?.1)
                    })
                    .collect::<Result<Vec<_>, EnsembleError>>()
            })
            .collect::<Result<_, _>>()?;
        Ok((0..views.len()).map(|i| rows.iter().map(|r| r[i].clone()).collect()).collect())
    }

    /// Edge probability per pair. Relative pairs come from stream
    /// `[PREDICT_DRAW, u, v]`; learner `i` samples from `[PREDICT, u, v, i]`.
    pub fn predict_edges(&self, graph: &HonGraph, pairs: &[(EntityId, EntityId)], seed: u64) -> Result<Vec<f64>, EnsembleError> {
        self.check_task("edge")?;
        let laws = UnitLaws::new(graph, &Units::Edges(pairs.to_vec()))?;
        let views = self.views();
        let combine = self.variant.tag.combine();
        (0..pairs.len())
            .into_par_iter()
            .map(|j| {
                let key = [pairs[j].0 .0 as u64, pairs[j].1 .0 as u64];
                let ex = self.inference_example(graph, &laws, j, &views, &key, seed);
                Ok(run_example(&self.params, graph, combine, &ex, None, None)?.1[0])
            })
            .collect()
    }

    fn inference_target(&self) -> Target {
        match self.task {
            Task::Node { .. } => Target::Class(0),
            Task::Link => Target::Edge(false),
        }
    }

    fn inference_example(
        &self,
        graph: &HonGraph,
        laws: &UnitLaws,
        j: usize,
        views: &[View],
        key: &[u64],
        seed: u64,
    ) -> FrozenExample {
        let mut path = vec![purpose::PREDICT_DRAW];
        path.extend_from_slice(key);
        let mut draw = SeedStream::new(seed, &path);
        let rels: Vec<Relative> = (0..views.len()).map(|_| laws.draw(j, &mut draw)).collect();
        let mut streams: Vec<SeedStream> = (0..views.len())
            .map(|i| {
                let mut p = vec![purpose::PREDICT];
                p.extend_from_slice(key);
                p.push(i as u64);
                SeedStream::new(seed, &p)
            })
            .collect();
        FrozenExample::sample(&self.params, graph, views, &rels, &mut streams, self.inference_target())
    }
}

/// Elementwise mean of per-learner probability sets, summed in learner
/// order exactly as the ensemble does.
pub fn mean_of_sets(sets: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = sets.len() as f64;
    (0..sets[0].len())
        .map(|j| {
            let mut acc = sets[0][j].clone();
            for s in &sets[1..] {
                acc.iter_mut().zip(&s[j]).for_each(|(a, b)| *a += b);
            }
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        })
        .collect()
}

/// Where a training view takes its relative for unit `j` from.
#[derive(Clone, Copy, Debug)]
enum Source {
    Bootstrap(usize),
    Resample,
}

#[derive(Clone, Copy, Debug)]
struct JobView {
    view: View,
    id: u64,
    source: Source,
}

/// One optimization run with its own early stopping.
struct Job {
    stage: u64,
    combine: Combine,
    views: Vec<JobView>,
}

struct TrainData<'a> {
    graph: &'a HonGraph,
    targets: &'a Targets,
    bootstraps: &'a BootstrapSet,
    laws: &'a UnitLaws,
    train_idx: &'a [usize],
    holdout_idx: &'a [usize],
    cfg: &'a TrainConfig,
    seed: u64,
}

/// Splits unit indices into (train, holdout); the holdout is
/// `floor(n · fraction)` units chosen by stream `[HOLDOUT]`.
pub fn split_holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    SeedStream::new(seed, &[purpose::HOLDOUT]).shuffle(&mut idx);
    let n_hold = ((n as f64) * fraction).floor() as usize;
    let n_hold = n_hold.min(n.saturating_sub(1));
    let mut hold = idx[..n_hold].to_vec();
    let mut train = idx[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

fn validation_loss(params: &Params, data: &TrainData, job: &Job) -> Result<f64, EnsembleError> {
    let mut total = 0.0;
    for &j in data.holdout_idx {
        let views: Vec<View> = job.views.iter().map(|v| v.view).collect();
        let mut streams: Vec<SeedStream> = job
            .views
            .iter()
            .map(|v| SeedStream::new(data.seed, &[purpose::VALIDATE, j as u64, v.id]))
            .collect();
        let rels: Vec<Relative> = streams.iter_mut().map(|s| data.laws.draw(j, s)).collect();
        let ex = FrozenExample::sample(params, data.graph, &views, &rels, &mut streams, data.targets.target(j));
        total += run_example(params, data.graph, job.combine, &ex, None, None)?.0;
    }
    Ok(total / data.holdout_idx.len() as f64)
}

fn run_job(params: &mut Params, adam: &mut AdamState, data: &TrainData, job: &Job) -> Result<StageReport, EnsembleError> {
    let cfg = data.cfg;
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut grads = params.zeros_like();
    let views: Vec<View> = job.views.iter().map(|v| v.view).collect();
    let early_stop = !data.holdout_idx.is_empty();
    let mut best: Option<(f64, Params, usize)> = None;
    let mut wait = 0;
    let mut epochs_run = 0;
    let mut order = data.train_idx.to_vec();
    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        order.copy_from_slice(data.train_idx);
        SeedStream::new(data.seed, &[purpose::SHUFFLE, job.stage, epoch as u64]).shuffle(&mut order);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.zero();
            let mut resample = SeedStream::new(data.seed, &[purpose::RESAMPLE, job.stage, epoch as u64, b as u64]);
            for &j in batch {
                let rels: Vec<Relative> = job
                    .views
                    .iter()
                    .map(|v| match v.source {
                        Source::Bootstrap(i) => data.bootstraps.assignments[i][j],
                        Source::Resample => data.laws.draw(j, &mut resample),
                    })
                    .collect();
                let mut streams: Vec<SeedStream> = job
                    .views
                    .iter()
                    .map(|v| SeedStream::new(data.seed, &[purpose::TRAIN, job.stage, epoch as u64, j as u64, v.id]))
                    .collect();
                let ex = FrozenExample::sample(params, data.graph, &views, &rels, &mut streams, data.targets.target(j));
                let (loss, _) = run_example(params, data.graph, job.combine, &ex, Some(&mut streams), Some(&mut grads))?;
                if !loss.is_finite() {
                    return Err(NnError::NonFiniteLoss.into());
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(params, &grads, adam, &adam_cfg)?;
        }
        if early_stop {
            let val = validation_loss(params, data, job)?;
            if !val.is_finite() {
                return Err(NnError::NonFiniteLoss.into());
            }
            if best.as_ref().is_none_or(|b| val < b.0) {
                best = Some((val, params.clone(), epoch));
                wait = 0;
            } else {
                wait += 1;
                if wait >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(match best {
        Some((val, p, e)) => {
            *params = p;
            StageReport {
                epochs_run,
                best_epoch: e,
                best_val_loss: val,
            }
        }
        None => StageReport {
            epochs_run,
            best_epoch: epochs_run.saturating_sub(1),
            best_val_loss: f64::NAN,
        },
    })
}

/// Trains an ensemble.
///
/// * `bag`: learner `i` trains alone on bootstrap `i` (in parallel).
/// * `bag*`: one network trains on bootstrap 0, then continues on 1, 2, …
/// * `batch*`: one network, relatives redrawn for every batch.
/// * `pool`, `concat` and their starred forms: one joint optimization in
///   which every example runs through all ℓ views.
///
/// Each run holds out `holdout_fraction` of the units for early stopping
/// and restores the parameters of its best validation epoch.
pub fn train(
    graph: &HonGraph,
    bootstraps: &BootstrapSet,
    targets: &Targets,
    variant: DgeVariant,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EnsembleModel, EnsembleError> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(EnsembleError::Units("no training units".into()));
    }
    let units = targets.units();
    if bootstraps.units != units {
        return Err(EnsembleError::Units("training units do not match the bootstrap units".into()));
    }
    if variant.tag != Variant::BatchStar && bootstraps.ell() != variant.ell {
        return Err(EnsembleError::Units(format!(
            "{} bootstraps supplied for an ensemble of {}",
            bootstraps.ell(),
            variant.ell
        )));
    }
    if let Targets::Nodes { classes, n_classes, .. } = targets {
        if classes.len() != targets.len() {
            return Err(EnsembleError::Units("one class per unit is required".into()));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= *n_classes) {
            return Err(NnError::ClassOutOfRange { class: c, n: *n_classes }.into());
        }
    }
    if let Targets::Edges { labels, .. } = targets {
        if labels.len() != targets.len() {
            return Err(EnsembleError::Units("one label per unit is required".into()));
        }
    }
    let mut model = EnsembleModel::init(variant, targets.task(), &cfg.gnn, graph.feature_dim(), seed)?;
    let laws = UnitLaws::new(graph, &units)?;
    let (train_idx, holdout_idx) = split_holdout(targets.len(), cfg.holdout_fraction, seed);
    let data = TrainData {
        graph,
        targets,
        bootstraps,
        laws: &laws,
        train_idx: &train_idx,
        holdout_idx: &holdout_idx,
        cfg,
        seed,
    };
    let single = |i: usize, source: Source| JobView {
        view: View { net: 0, head: 0 },
        id: i as u64,
        source,
    };
    match variant.tag {
        Variant::Bag => {
            let nets = std::mem::take(&mut model.params.nets);
            let heads = std::mem::take(&mut model.params.heads);
            let trained: Vec<(Params, StageReport)> = nets
                .into_iter()
                .zip(heads)
                .enumerate()
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|(i, (net, head))| {
                    let mut p = Params {
                        nets: vec![net],
                        heads: vec![head],
                    };
                    let mut adam = AdamState::new(&p);
                    let job = Job {
                        stage: i as u64,
                        combine: Combine::ProbMean,
                        views: vec![single(i, Source::Bootstrap(i))],
                    };
                    let r = run_job(&mut p, &mut adam, &data, &job)?;
                    Ok((p, r))
                })
                .collect::<Result<_, EnsembleError>>()?;
            for (mut p, r) in trained {
                model.params.nets.push(p.nets.pop().unwrap());
                model.params.heads.push(p.heads.pop().unwrap());
                model.history.push(r);
            }
        }
        Variant::BagStar => {
            let mut adam = AdamState::new(&model.params);
            for i in 0..variant.ell {
                let job = Job {
                    stage: i as u64,
                    combine: Combine::ProbMean,
                    views: vec![single(i, Source::Bootstrap(i))],
                };
                let r = run_job(&mut model.params, &mut adam, &data, &job)?;
                model.history.push(r);
            }
        }
        Variant::BatchStar => {
            let mut adam = AdamState::new(&model.params);
            let job = Job {
                stage: 0,
                combine: Combine::ProbMean,
                views: vec![single(0, Source::Resample)],
            };
            let r = run_job(&mut model.params, &mut adam, &data, &job)?;
            model.history.push(r);
        }
        Variant::Pool | Variant::PoolStar | Variant::Concat | Variant::ConcatStar => {
            let mut adam = AdamState::new(&model.params);
            let job = Job {
                stage: 0,
                combine: variant.tag.combine(),
                views: (0..variant.ell)
                    .map(|i| JobView {
                        view: model.view(i),
                        id: i as u64,
                        source: Source::Bootstrap(i),
                    })
                    .collect(),
            };
            let r = run_job(&mut model.params, &mut adam, &data, &job)?;
            model.history.push(r);
        }
    }
    Ok(model)
}

impl EnsembleModel {
    fn meta_line(&self) -> String {
        let classes = match self.task {
            Task::Node { n_classes } => n_classes,
            Task::Link => 0,
        };
        let fanouts: Vec<String> = self.gnn.fanouts.iter().map(|f| f.to_string()).collect();
        format!(
            "#meta variant={} ell={} task={} classes={} seed={} in_dim={} layers={} hidden={} fanouts={} dropout={} direction={}",
            self.variant.tag,
            self.variant.ell,
            self.task.name(),
            classes,
            self.seed,
            self.params.nets[0].in_dim(),
            self.gnn.layers,
            self.gnn.hidden,
            fanouts.join(","),
            self.gnn.dropout,
            self.gnn.direction.as_str(),
        )
    }

    /// Checkpoint text: the versioned header, a `#meta` line describing the
    /// architecture, then one record per tensor.
    pub fn to_checkpoint(&self) -> String {
        format!(
            "{CHECKPOINT_HEADER}\n{}\n{}",
            self.meta_line(),
            tensors_to_text(&self.params.tensors())
        )
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, EnsembleError> {
        let bad = |m: String| EnsembleError::Checkpoint(m);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
            _ => return Err(bad(format!("missing header {CHECKPOINT_HEADER:?}"))),
        }
        let meta = match lines.next() {
            Some((_, m)) if m.starts_with("#meta ") => m,
            _ => return Err(bad("missing #meta line".into())),
        };
        let mut kv = std::collections::HashMap::new();
        for field in meta["#meta ".len()..].split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("bad meta field {field:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("meta is missing {k}")));
        let num = |k: &str| -> Result<usize, EnsembleError> {
            get(k)?.parse().map_err(|_| bad(format!("bad meta value for {k}")))
        };
        let tag: Variant = get("variant")?.parse().map_err(bad)?;
        let variant = DgeVariant::new(tag, num("ell")?)?;
        let task = match get("task")? {
            "node" => Task::Node { n_classes: num("classes")? },
            "edge" => Task::Link,
            t => return Err(bad(format!("unknown task {t:?}"))),
        };
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let fanouts = get("fanouts")?
            .split(',')
            .map(|f| f.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("bad fanouts".into()))?;
        let gnn = GnnConfig {
            layers: num("layers")?,
            hidden: num("hidden")?,
            fanouts,
            dropout: get("dropout")?.parse().map_err(|_| bad("bad dropout".into()))?,
            direction: get("direction")?.parse::<Direction>().map_err(bad)?,
        };
        let mut model = EnsembleModel::init(variant, task, &gnn, num("in_dim")?, seed)?;
        let records: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.is_empty() && !l.starts_with('#')).collect();
        load_records_into(&mut model.params, &records)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_checkpoint())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, EnsembleError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| EnsembleError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_checkpoint(&text)
    }
}
