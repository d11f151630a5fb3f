//! Mean-aggregating, sample-based graph layers.
//!
//! A representation is computed in two phases. [`SampleTree::sample`] draws
//! the neighbor samples for every layer (the self term of each node recurses
//! with its own fresh samples), and [`GnnNet::forward`] is then a pure
//! function of the parameters, the tree and the dropout stream. Freezing
//! the tree is what makes finite-difference checks possible.
//!
//! For a unit at level `l` (level 0 holds input features):
//!
//! ```text
//! h = act(x_self · W_self + mean(x_neighbors) · W_neigh + b)
//! ```
//!
//! The mean divides by the layer fanout; sink nodes contribute zero vectors
//! for the missing samples. Neighbor vectors are summed in a canonical order
//! (node id, then values), so the result does not depend on the order the
//! sampler returned them in.

use std::cmp::Ordering;

use super::{axpy, mat_vec_acc, outer_acc, vec_mat_acc, NnError, ParamSet, Tensor};
use crate::graphstore::{Features, HonGraph, NodeId};
use crate::rng::SeedStream;
use crate::sampler::{sample_neighbors_into, Direction};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SageLayer {
    pub w_self: Tensor,
    pub w_neigh: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl SageLayer {
    pub fn new(d_in: usize, d_out: usize, activation: Activation, rng: &mut SeedStream) -> Self {
        SageLayer {
            w_self: Tensor::glorot(d_in, d_out, rng),
            w_neigh: Tensor::glorot(d_in, d_out, rng),
            bias: Tensor::zeros(&[d_out]),
            activation,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_self.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w_self.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Neighbors sampled per hop, starting at the target node.
    pub fanouts: Vec<usize>,
    pub dropout: f64,
    pub direction: Direction,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            layers: 2,
            hidden: 128,
            fanouts: vec![64, 1],
            dropout: 0.4,
            direction: Direction::Out,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers == 0 {
            return Err(NnError::Config("at least one layer is required".into()));
        }
        if self.hidden == 0 {
            return Err(NnError::Config("hidden size must be positive".into()));
        }
        if self.fanouts.len() != self.layers {
            return Err(NnError::Config(format!(
                "{} fanouts given for {} layers",
                self.fanouts.len(),
                self.layers
            )));
        }
        if self.fanouts.contains(&0) {
            return Err(NnError::Config("fanouts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnNet {
    pub layers: Vec<SageLayer>,
    pub fanouts: Vec<usize>,
    pub dropout: f64,
    pub direction: Direction,
}

impl ParamSet for GnnNet {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.tensors_named("")
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w_self, &mut l.w_neigh, &mut l.bias])
            .collect()
    }
}

/// Neighbor samples for every unit of a `depth`-layer computation rooted
/// at one node.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTree {
    /// `nodes[l]` lists the graph node of every unit at level `l`.
    nodes: Vec<Vec<NodeId>>,
    /// For level `l >= 1`, the index (into level `l - 1`) of each unit's
    /// self term.
    self_child: Vec<Vec<u32>>,
    /// For level `l >= 1`, CSR offsets into `neigh[l]`.
    neigh_off: Vec<Vec<u32>>,
    neigh: Vec<Vec<u32>>,
    /// Fanout used for the mean at each level (`fanout[0]` unused).
    fanout: Vec<usize>,
}

impl SampleTree {
    pub fn sample(graph: &HonGraph, root: NodeId, fanouts: &[usize], direction: Direction, rng: &mut SeedStream) -> Self {
        let depth = fanouts.len();
        let mut nodes = vec![Vec::new(); depth + 1];
        let mut self_child = vec![Vec::new(); depth + 1];
        let mut neigh_off = vec![Vec::new(); depth + 1];
        let mut neigh = vec![Vec::new(); depth + 1];
        let mut fanout = vec![0; depth + 1];
        nodes[depth].push(root);
        let mut buf = Vec::new();
        for l in (1..=depth).rev() {
            let f = fanouts[depth - l];
            fanout[l] = f;
            let (lower, upper) = nodes.split_at_mut(l);
            let below = &mut lower[l - 1];
            neigh_off[l].push(0);
            for &n in &upper[0] {
                self_child[l].push(below.len() as u32);
                below.push(n);
                buf.clear();
                sample_neighbors_into(graph, n, f, direction, rng, &mut buf);
                for c in buf.iter().flatten() {
                    neigh[l].push(below.len() as u32);
                    below.push(*c);
                }
                neigh_off[l].push(neigh[l].len() as u32);
            }
        }
        SampleTree {
            nodes,
            self_child,
            neigh_off,
            neigh,
            fanout,
        }
    }

    /// A tree with explicit neighbor lists for a one-layer computation.
    /// `None` entries are sentinels.
    pub fn one_layer(root: NodeId, neighbors: &[Option<NodeId>]) -> Self {
        let mut below = vec![root];
        let mut neigh = Vec::new();
        for c in neighbors.iter().flatten() {
            neigh.push(below.len() as u32);
            below.push(*c);
        }
        SampleTree {
            nodes: vec![below, vec![root]],
            self_child: vec![Vec::new(), vec![0]],
            neigh_off: vec![Vec::new(), vec![0, neigh.len() as u32]],
            neigh: vec![Vec::new(), neigh],
            fanout: vec![0, neighbors.len()],
        }
    }

    pub fn depth(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn root(&self) -> NodeId {
        self.nodes[self.depth()][0]
    }

    pub fn level(&self, l: usize) -> &[NodeId] {
        &self.nodes[l]
    }

    fn children(&self, l: usize, i: usize) -> &[u32] {
        let off = &self.neigh_off[l];
        &self.neigh[l][off[i] as usize..off[i + 1] as usize]
    }

    /// Shuffles every unit's neighbor list, keeping subtrees attached.
    pub fn shuffle_neighbors(&mut self, rng: &mut SeedStream) {
        for l in 1..self.nodes.len() {
            for i in 0..self.nodes[l].len() {
                let off = &self.neigh_off[l];
                let (a, b) = (off[i] as usize, off[i + 1] as usize);
                rng.shuffle(&mut self.neigh[l][a..b]);
            }
        }
    }
}

/// Intermediate values of one forward pass, consumed by
/// [`GnnNet::backward`].
#[derive(Clone, Debug)]
pub struct SageCache {
    /// Sparse level-0 inputs after dropout, CSR by unit.
    in_off: Vec<u32>,
    in_idx: Vec<u32>,
    in_val: Vec<f64>,
    /// `h[l]`: outputs of level `l` (index 0 unused), row-major.
    h: Vec<Vec<f64>>,
    /// Dropout scales applied to `h[l]` before it feeds level `l + 1`.
    mask: Vec<Option<Vec<f64>>>,
    /// `x[l]`: `h[l]` after dropout (only stored when a mask exists).
    x: Vec<Option<Vec<f64>>>,
    /// Neighbor means for levels `>= 2`.
    mean: Vec<Vec<f64>>,
    dims: Vec<usize>,
}

impl SageCache {
    /// Final hidden vector of the root.
    pub fn output(&self) -> &[f64] {
        self.h.last().expect("empty cache")
    }

    fn input(&self, l: usize) -> &[f64] {
        self.x[l].as_deref().unwrap_or(&self.h[l])
    }
}

/// Keep-decisions for dropout use 16-bit slices of each random word, so the
/// effective rate is `p` rounded to a multiple of 2^-16.
struct DropoutDraws<'a> {
    rng: &'a mut SeedStream,
    word: u64,
    left: u32,
    threshold: u64,
    scale: f64,
}

impl<'a> DropoutDraws<'a> {
    fn new(rng: &'a mut SeedStream, p: f64) -> Self {
        DropoutDraws {
            rng,
            word: 0,
            left: 0,
            threshold: (p * 65536.0).round() as u64,
            scale: 1.0 / (1.0 - p),
        }
    }

    #[inline]
    fn next(&mut self) -> f64 {
        if self.left == 0 {
            self.word = self.rng.next_u64();
            self.left = 4;
        }
        let bits = self.word & 0xFFFF;
        self.word >>= 16;
        self.left -= 1;
        if bits >= self.threshold {
            self.scale
        } else {
            0.0
        }
    }
}

impl DropoutDraws<'_> {
    /// Same draws as repeated [`DropoutDraws::next`] calls.
    fn fill(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i < out.len() && self.left > 0 {
            out[i] = self.next();
            i += 1;
        }
        let (th, sc) = (self.threshold, self.scale);
        let mut chunks = out[i..].chunks_exact_mut(4);
        for c in &mut chunks {
            let w = self.rng.next_u64();
            for (k, o) in c.iter_mut().enumerate() {
                *o = if (w >> (16 * k)) & 0xFFFF >= th { sc } else { 0.0 };
            }
        }
        for o in chunks.into_remainder() {
            *o = self.next();
        }
    }
}

fn cmp_vectors(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    Ordering::Equal
}

impl GnnNet {
    pub fn new(cfg: &GnnConfig, in_dim: usize, rng: &mut SeedStream) -> Result<Self, NnError> {
        cfg.validate()?;
        if in_dim == 0 {
            return Err(NnError::Config("input dimension must be positive".into()));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut d = in_dim;
        for _ in 0..cfg.layers {
            layers.push(SageLayer::new(d, cfg.hidden, Activation::Relu, rng));
            d = cfg.hidden;
        }
        Ok(GnnNet {
            layers,
            fanouts: cfg.fanouts.clone(),
            dropout: cfg.dropout,
            direction: cfg.direction,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    pub fn config(&self) -> GnnConfig {
        GnnConfig {
            layers: self.depth(),
            hidden: self.out_dim(),
            fanouts: self.fanouts.clone(),
            dropout: self.dropout,
            direction: self.direction,
        }
    }

    pub fn tensors_named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(3 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}layer{}", i + 1);
            out.push((format!("{p}.w_self"), &l.w_self));
            out.push((format!("{p}.w_neigh"), &l.w_neigh));
            out.push((format!("{p}.bias"), &l.bias));
        }
        out
    }

    /// Same architecture, all parameters zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn sample_tree(&self, graph: &HonGraph, root: NodeId, rng: &mut SeedStream) -> SampleTree {
        SampleTree::sample(graph, root, &self.fanouts, self.direction, rng)
    }

    /// Evaluation-mode representation of `node`: fresh samples from `rng`,
    /// no dropout.
    pub fn embed(&self, graph: &HonGraph, node: NodeId, rng: &mut SeedStream) -> Vec<f64> {
        let tree = self.sample_tree(graph, node, rng);
        self.forward(graph, &tree, None).output().to_vec()
    }

    /// Runs the layers over a frozen tree. Dropout is applied to every layer
    /// input when `dropout_rng` is given (training mode).
    pub fn forward(&self, graph: &HonGraph, tree: &SampleTree, mut dropout_rng: Option<&mut SeedStream>) -> SageCache {
        let depth = self.depth();
        assert_eq!(tree.depth(), depth, "sample tree depth does not match the network");
        let train = self.dropout > 0.0 && dropout_rng.is_some();
        let features = graph.features();

        // level 0: sparse inputs
        let n0 = tree.nodes[0].len();
        let mut in_off = Vec::with_capacity(n0 + 1);
        let mut in_idx = Vec::with_capacity(n0);
        let mut in_val = Vec::with_capacity(n0);
        in_off.push(0u32);
        {
            let mut drop = dropout_rng
                .as_deref_mut()
                .filter(|_| train)
                .map(|r| DropoutDraws::new(r, self.dropout));
            for &n in &tree.nodes[0] {
                let e = graph.base(n);
                match features {
                    Features::Identity => {
                        let s = drop.as_mut().map_or(1.0, |d| d.next());
                        if s != 0.0 {
                            in_idx.push(e.0);
                            in_val.push(s);
                        }
                    }
                    Features::Dense { rows, .. } => {
                        for (j, &v) in rows[e.idx()].iter().enumerate() {
                            if v != 0.0 {
                                let s = drop.as_mut().map_or(1.0, |d| d.next());
                                if s != 0.0 {
                                    in_idx.push(j as u32);
                                    in_val.push(v * s);
                                }
                            }
                        }
                    }
                }
                in_off.push(in_idx.len() as u32);
            }
        }

        let mut dims = vec![self.in_dim()];
        dims.extend(self.layers.iter().map(|l| l.d_out()));
        let mut cache = SageCache {
            in_off,
            in_idx,
            in_val,
            h: vec![Vec::new(); depth + 1],
            mask: vec![None; depth + 1],
            x: vec![None; depth + 1],
            mean: vec![Vec::new(); depth + 1],
            dims,
        };

        let mut order: Vec<u32> = Vec::new();
        for l in 1..=depth {
            let layer = &self.layers[l - 1];
            let (d_in, d_out) = (layer.d_in(), layer.d_out());
            let n = tree.nodes[l].len();
            let inv_f = 1.0 / tree.fanout[l] as f64;
            let mut h = vec![0.0; n * d_out];
            let mut acc = vec![0.0; d_out.max(d_in)];

            if l >= 2 && train {
                let mut drop = DropoutDraws::new(dropout_rng.as_deref_mut().unwrap(), self.dropout);
                let hl = &cache.h[l - 1];
                let mut mask = vec![0.0; hl.len()];
                drop.fill(&mut mask);
                let x: Vec<f64> = hl.iter().zip(&mask).map(|(a, m)| a * m).collect();
                cache.mask[l - 1] = Some(mask);
                cache.x[l - 1] = Some(x);
            }
            let mut means = if l >= 2 { vec![0.0; n * d_in] } else { Vec::new() };

            for i in 0..n {
                let out = &mut h[i * d_out..(i + 1) * d_out];
                out.copy_from_slice(&layer.bias.data);
                let sc = tree.self_child[l][i] as usize;
                order.clear();
                order.extend_from_slice(tree.children(l, i));
                if l == 1 {
                    let entries = |u: usize| {
                        let (a, b) = (cache.in_off[u] as usize, cache.in_off[u + 1] as usize);
                        (&cache.in_idx[a..b], &cache.in_val[a..b])
                    };
                    let (si, sv) = entries(sc);
                    for (&j, &v) in si.iter().zip(sv) {
                        axpy(out, v, layer.w_self.row(j as usize));
                    }
                    order.sort_by(|&a, &b| {
                        let (na, nb) = (tree.nodes[0][a as usize], tree.nodes[0][b as usize]);
                        na.cmp(&nb).then_with(|| cmp_vectors(entries(a as usize).1, entries(b as usize).1))
                    });
                    let acc = &mut acc[..d_out];
                    acc.fill(0.0);
                    for &c in &order {
                        let (ci, cv) = entries(c as usize);
                        for (&j, &v) in ci.iter().zip(cv) {
                            axpy(acc, v, layer.w_neigh.row(j as usize));
                        }
                    }
                    axpy(out, inv_f, acc);
                } else {
                    let xin = cache.input(l - 1);
                    let row = |u: usize| &xin[u * d_in..(u + 1) * d_in];
                    vec_mat_acc(out, row(sc), &layer.w_self);
                    order.sort_by(|&a, &b| {
                        let (na, nb) = (tree.nodes[l - 1][a as usize], tree.nodes[l - 1][b as usize]);
                        na.cmp(&nb).then_with(|| cmp_vectors(row(a as usize), row(b as usize)))
                    });
                    let mean = &mut means[i * d_in..(i + 1) * d_in];
                    for &c in &order {
                        axpy(mean, 1.0, row(c as usize));
                    }
                    mean.iter_mut().for_each(|m| *m *= inv_f);
                    vec_mat_acc(out, mean, &layer.w_neigh);
                }
                if layer.activation == Activation::Relu {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            cache.h[l] = h;
            cache.mean[l] = means;
        }
        cache
    }

    /// Accumulates `dL/dθ` into `grads` given `d_out = dL/d(output)`.
    pub fn backward(&self, tree: &SampleTree, cache: &SageCache, d_out: &[f64], grads: &mut GnnNet) {
        let depth = self.depth();
        let mut dh = d_out.to_vec();
        for l in (1..=depth).rev() {
            let layer = &self.layers[l - 1];
            let g = &mut grads.layers[l - 1];
            let (d_in, d_o) = (cache.dims[l - 1], cache.dims[l]);
            let n = tree.nodes[l].len();
            let inv_f = 1.0 / tree.fanout[l] as f64;
            let h = &cache.h[l];
            let mut dh_below = if l >= 2 { vec![0.0; tree.nodes[l - 1].len() * d_in] } else { Vec::new() };
            let mut dpre = vec![0.0; d_o];
            for i in 0..n {
                let hi = &h[i * d_o..(i + 1) * d_o];
                for k in 0..d_o {
                    let d = dh[i * d_o + k];
                    dpre[k] = match layer.activation {
                        Activation::Relu if hi[k] <= 0.0 => 0.0,
                        _ => d,
                    };
                }
                axpy(&mut g.bias.data, 1.0, &dpre);
                let sc = tree.self_child[l][i] as usize;
                if l == 1 {
                    let entries = |u: usize| {
                        let (a, b) = (cache.in_off[u] as usize, cache.in_off[u + 1] as usize);
                        (&cache.in_idx[a..b], &cache.in_val[a..b])
                    };
                    let (si, sv) = entries(sc);
                    for (&j, &v) in si.iter().zip(sv) {
                        axpy(g.w_self.row_mut(j as usize), v, &dpre);
                    }
                    for &c in tree.children(l, i) {
                        let (ci, cv) = entries(c as usize);
                        for (&j, &v) in ci.iter().zip(cv) {
                            axpy(g.w_neigh.row_mut(j as usize), v * inv_f, &dpre);
                        }
                    }
                } else {
                    let xin = cache.input(l - 1);
                    outer_acc(&mut g.w_self, &xin[sc * d_in..(sc + 1) * d_in], &dpre);
                    outer_acc(&mut g.w_neigh, &cache.mean[l][i * d_in..(i + 1) * d_in], &dpre);
                    mat_vec_acc(&mut dh_below[sc * d_in..(sc + 1) * d_in], &layer.w_self, &dpre);
                    let mut dmean = vec![0.0; d_in];
                    mat_vec_acc(&mut dmean, &layer.w_neigh, &dpre);
                    for &c in tree.children(l, i) {
                        let c = c as usize;
                        axpy(&mut dh_below[c * d_in..(c + 1) * d_in], inv_f, &dmean);
                    }
                }
            }
            if l >= 2 {
                if let Some(mask) = &cache.mask[l - 1] {
                    dh_below.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                }
                dh = dh_below;
            }
        }
    }
}
