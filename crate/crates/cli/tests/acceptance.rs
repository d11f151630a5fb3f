//! End-to-end acceptance run: one line per criterion, non-zero exit if any
//! fails. Runs as a plain binary (`harness = false`) so the lines always
//! print.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hondge::corpus::{EntityId, PathCorpus};
use hondge::ensemble::{
    example_loss, example_loss_and_grad, mean_of_sets, train, Combine, DgeVariant, EnsembleModel, FrozenExample, Target,
    Targets, Task, TrainConfig, Variant,
};
use hondge::evaluation::{
    auprc, diversity_tsv, first_order_pairs, make_folds, make_link_split, mean_std, run_node_classification,
    NodeExperiment,
};
use hondge::graphstore::HonGraph;
use hondge::hon::{build_fon, build_hon, build_hon_with_rules, HonConfig};
use hondge::nn::{grad_check, softmax, GnnConfig, ParamSet};
use hondge::rng::{purpose, SeedStream};
use hondge::sampler::{
    edge_relative_dist, make_bootstraps, relative_dist, sample_neighbors, Direction, Relative, UnitLaws, Units,
};
use hondge::synth::{generate, PlantedChainSpec};
use hondge::verify;

const DRAWS: usize = 1_000_000;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn corpus(spec: &[(&str, usize)]) -> PathCorpus {
    let mut paths = Vec::new();
    for &(p, n) in spec {
        for _ in 0..n {
            paths.push(p.split_whitespace().collect::<Vec<_>>());
        }
    }
    PathCorpus::from_paths(paths).unwrap()
}

fn sixteen() -> PathCorpus {
    corpus(&[("A C D", 14), ("A C E", 2), ("B C E", 14), ("B C D", 2)])
}

fn eight() -> PathCorpus {
    corpus(&[("A C D", 3), ("A C E", 1), ("B C E", 3), ("B C D", 1)])
}

fn branching() -> PathCorpus {
    corpus(&[("A C D F", 6), ("B C E G", 6), ("D A H", 3), ("E B H", 3), ("F G H A", 2)])
}

fn small_synth(seed: u64, memory: f64) -> PlantedChainSpec {
    PlantedChainSpec {
        n_entities: 6,
        n_paths: 400,
        path_len: 6,
        memory_strength: memory,
        n_classes: 2,
        successors_per_block: 1,
        seed,
        ..PlantedChainSpec::default()
    }
}

fn hondge(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hondge")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Result<String, String> {
    let out = hondge(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("`hondge {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn successors(g: &HonGraph, token: &str) -> Vec<String> {
    let mut v: Vec<String> = g.out_edges(g.parse_node(token).unwrap()).iter().map(|&(t, _)| g.node_token(t)).collect();
    v.sort();
    v
}

fn criterion_1() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (paths, out) = (dir.path().join("paths.txt"), dir.path().join("g2.tsv"));
    corpus(&[("A C D", 5), ("B C E", 5)]).write(&paths).map_err(|e| e.to_string())?;
    run_ok(&["build", "--paths", p(&paths), "--order", "2", "--out", p(&out)])?;
    let g = HonGraph::deserialize(&out).map_err(|e| e.to_string())?;
    let mut conditional: Vec<String> = g.conditional_nodes().map(|n| g.node_token(n)).collect();
    conditional.sort();
    let (ca, cb) = (successors(&g, "C|A"), successors(&g, "C|B"));
    let e = g.parse_node("E").unwrap();
    let no_ca_e = g.edge_weight(g.parse_node("C|A").unwrap(), e) == 0.0;
    check(
        conditional == ["C|A", "C|B"] && ca == ["D"] && cb == ["E"] && no_ca_e,
        format!("conditional {conditional:?}, C|A -> {ca:?}, C|B -> {cb:?}, no C|A->E edge: {no_ca_e}"),
    )
}

/// Divergence and threshold of the context (a, c) by direct counting.
fn brute_force_rule(c: &PathCorpus, a: &str, mid: &str) -> (f64, f64) {
    let paths: Vec<Vec<&str>> = c.paths().iter().map(|p| p.iter().map(|&e| c.index().token(e)).collect()).collect();
    let mut after_pair: BTreeMap<&str, f64> = BTreeMap::new();
    let mut after_mid: BTreeMap<&str, f64> = BTreeMap::new();
    for p in &paths {
        for w in p.windows(2) {
            if w[0] == mid {
                *after_mid.entry(w[1]).or_default() += 1.0;
            }
        }
        for w in p.windows(3) {
            if w[0] == a && w[1] == mid {
                *after_pair.entry(w[2]).or_default() += 1.0;
            }
        }
    }
    let (n_pair, n_mid) = (after_pair.values().sum::<f64>(), after_mid.values().sum::<f64>());
    let kl: f64 = after_mid
        .iter()
        .map(|(t, &k)| {
            let q = after_pair.get(t).copied().unwrap_or(0.0) / n_pair;
            let p = k / n_mid;
            p * (p / q).log2()
        })
        .sum();
    (kl, 2.0 / (1.0 + n_pair).log2())
}

fn rule_for(c: &PathCorpus, token: &str) -> (f64, f64, bool) {
    let built = build_hon_with_rules(c, &HonConfig::new(2)).unwrap();
    let i = built.candidates.iter().position(|r| r.node.token(c.index()) == token).unwrap();
    let r = &built.candidates[i];
    (r.divergence, r.threshold, built.admitted[i])
}

fn criterion_2() -> Outcome {
    let (d16, t16, a16) = rule_for(&sixteen(), "C|A");
    let (o_d16, o_t16) = brute_force_rule(&sixteen(), "A", "C");
    let (d8, t8, a8) = rule_for(&eight(), "C|A");
    let (o_d8, o_t8) = brute_force_rule(&eight(), "A", "C");
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6;
    let ok = close(d16, o_d16) && close(t16, o_t16) && a16 && close(d8, o_d8) && close(t8, o_t8) && !a8
        && close(d8, 0.207518) && close(t8, 0.861354);
    check(
        ok,
        format!(
            "16 paths: divergence {d16:.10} (counting {o_d16:.10}; stated 0.596337), threshold {t16:.10} \
             (counting {o_t16:.10}; stated 0.489299), admitted {a16}; 8 paths: {d8:.6} vs {t8:.6}, admitted {a8}"
        ),
    )
}

fn conserves(c: &PathCorpus) -> bool {
    let transitions: usize = c.paths().iter().map(|p| p.len() - 1).sum();
    let g1 = build_fon(c);
    let g2 = build_hon(c, &HonConfig::new(2)).unwrap();
    let family_out = |e| g2.family_ids(e).iter().map(|&n| g2.out_degree_weighted(n)).sum::<f64>();
    g2.total_weight() == transitions as f64
        && g1.total_weight() == transitions as f64
        && c.index().ids().all(|e| family_out(e) == g1.out_degree_weighted(g1.first_order_node(e).unwrap()))
}

fn criterion_3() -> Outcome {
    let mut corpora = vec![sixteen(), eight(), branching(), corpus(&[("A C D", 5), ("B C E", 5)])];
    for seed in 0..20 {
        corpora.push(generate(&small_synth(seed, seed as f64 / 19.0)).unwrap().0);
    }
    corpora.push(generate(&PlantedChainSpec { n_paths: 5000, ..PlantedChainSpec::default() }).unwrap().0);
    let failed: Vec<usize> = (0..corpora.len()).filter(|&i| !conserves(&corpora[i])).collect();
    check(failed.is_empty(), format!("{} corpora, failures at {failed:?}", corpora.len()))
}

fn verify_corpus(c: &PathCorpus, seed: u64) -> (usize, Vec<String>) {
    let g2 = build_hon(c, &HonConfig::new(2)).unwrap();
    let g1 = build_fon(c);
    let (laws, checks) = verify::report(&g2, &g1, DRAWS, seed);
    let mut bad: Vec<String> = laws.violations.iter().map(|v| format!("same law {v}")).collect();
    for r in &checks {
        match r {
            Ok(a) if a.passed() => {}
            Ok(a) => bad.push(format!("{} err {:.4}/{:.4} sep {:.4} kl {:.4}", a.node, a.error_k, a.error_1, a.separation, a.divergence)),
            Err(e) => bad.push(e.to_string()),
        }
    }
    (checks.len(), bad)
}

fn criterion_4() -> Outcome {
    let (mut nodes, mut bad) = verify_corpus(&sixteen(), 1);
    for seed in 0..20 {
        let (n, b) = verify_corpus(&generate(&small_synth(100 + seed, 0.5 + seed as f64 / 38.0)).unwrap().0, seed);
        nodes += n;
        bad.extend(b);
    }
    check(bad.is_empty() && nodes > 20, format!("{nodes} conditional nodes on 21 corpora at 1e6 draws; failures {bad:?}"))
}

fn frequency_gap<T: Ord + Clone>(draws: impl Iterator<Item = T>, expected: &[(T, f64)]) -> f64 {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    let mut n = 0;
    for d in draws {
        *counts.entry(d).or_default() += 1;
        n += 1;
    }
    let mut gap = 0.0f64;
    for (k, p) in expected {
        gap = gap.max((counts.remove(k).unwrap_or(0) as f64 / n as f64 - p).abs());
    }
    // anything left over was drawn with zero expected probability
    gap.max(counts.values().map(|&c| c as f64 / n as f64).fold(0.0, f64::max))
}

fn criterion_5() -> Outcome {
    let g = build_hon(&generate(&PlantedChainSpec { n_entities: 200, n_paths: 5000, successors_per_block: 3, n_classes: 4, ..PlantedChainSpec::default() }).unwrap().0, &HonConfig::new(2)).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;

    // every law is a distribution
    let mut worst_sum = 0.0f64;
    for u in g.present_entities() {
        worst_sum = worst_sum.max((relative_dist(&g, u).unwrap().probs.iter().sum::<f64>() - 1.0).abs());
        for &(v, _) in g.out_edges(g.family_ids(u)[0]) {
            let d = edge_relative_dist(&g, u, g.base(v)).unwrap();
            worst_sum = worst_sum.max((d.probs.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ok &= worst_sum <= 1e-9;
    notes.push(format!("max |sum-1| {worst_sum:.1e}"));

    // the largest family, against out-degree shares computed here
    let u = g.present_entities().max_by_key(|&e| g.family_ids(e).len()).unwrap();
    let members = g.family_ids(u);
    let total: f64 = members.iter().map(|&m| g.out_degree_weighted(m)).sum();
    let expected: Vec<_> = members.iter().map(|&m| (m, g.out_degree_weighted(m) / total)).collect();
    let d = relative_dist(&g, u).unwrap();
    let mut rng = SeedStream::new(5, &[1]);
    let gap = frequency_gap((0..DRAWS).map(|_| d.sample(&mut rng)), &expected);
    ok &= gap <= 0.01;
    notes.push(format!("relatives of {} ({} members) gap {gap:.4}", g.entities().token(u), members.len()));

    // the pair with the most realizations
    let (mut best, mut best_n) = ((u, u), 0);
    for a in g.present_entities() {
        for &(t, _) in g.out_edges(g.family_ids(a)[0]) {
            let n = edge_relative_dist(&g, a, g.base(t)).unwrap().pairs.len();
            if n > best_n {
                (best, best_n) = ((a, g.base(t)), n);
            }
        }
    }
    let mut expected = Vec::new();
    for &a in g.family_ids(best.0) {
        for &(t, w) in g.out_edges(a) {
            if g.base(t) == best.1 {
                expected.push(((a, t), w));
            }
        }
    }
    let total: f64 = expected.iter().map(|e| e.1).sum();
    expected.iter_mut().for_each(|e| e.1 /= total);
    let d = edge_relative_dist(&g, best.0, best.1).unwrap();
    let gap = frequency_gap((0..DRAWS).map(|_| d.sample(&mut rng)), &expected);
    ok &= gap <= 0.01;
    notes.push(format!("{best_n} realizing pairs gap {gap:.4}"));

    // neighbors in both directions of the busiest node
    let node = g.node_ids().max_by_key(|&n| g.out_edges(n).len() + g.in_edges(n).len()).unwrap();
    let mut expected: Vec<(usize, f64)> = Vec::new();
    let all: Vec<_> = g.out_edges(node).iter().chain(g.in_edges(node)).collect();
    let total: f64 = all.iter().map(|e| e.1).sum();
    let mut by_node: BTreeMap<usize, f64> = BTreeMap::new();
    for &&(t, w) in &all {
        *by_node.entry(t.0 as usize).or_default() += w / total;
    }
    expected.extend(by_node);
    let draws = (0..DRAWS / 1000).flat_map(|_| sample_neighbors(&g, node, 1000, Direction::Both, &mut rng)).map(|n| n.unwrap().0 as usize);
    let gap = frequency_gap(draws, &expected);
    ok &= gap <= 0.01;
    notes.push(format!("{} neighbors gap {gap:.4}", expected.len()));

    // exactly one relative of each unit, exhaustively
    let spec = PlantedChainSpec { n_entities: 1000, n_paths: 20_000, n_classes: 10, ..PlantedChainSpec::default() };
    let big = build_hon(&generate(&spec).unwrap().0, &HonConfig::new(2)).unwrap();
    let units: Vec<EntityId> = big.present_entities().collect();
    let boots = make_bootstraps(&big, &Units::Nodes(units.clone()), 16, 3).unwrap();
    let exact = boots.assignments.len() == 16
        && boots.assignments.iter().all(|set| {
            set.len() == units.len()
                && set.iter().zip(&units).all(|(r, &e)| matches!(*r, Relative::Node(n) if big.base(n) == e))
        });
    ok &= exact && units.len() == 1000;
    notes.push(format!("l=16 bootstraps over {} nodes exact: {exact}", units.len()));
    check(ok, notes.join("; "))
}

fn criterion_6() -> Outcome {
    let g = build_fon(&branching());
    let gnn = GnnConfig { layers: 2, hidden: 4, fanouts: vec![3, 2], dropout: 0.0, direction: Direction::Out };
    let nodes: Vec<EntityId> = g.present_entities().collect();
    let laws = UnitLaws::new(&g, &Units::Nodes(nodes.clone())).unwrap();
    let (mut worst, mut checked, mut failed) = (0.0f64, 0, Vec::new());
    for seed in 0..20u64 {
        let mut m = EnsembleModel::init(DgeVariant::new(Variant::Pool, 2).unwrap(), Task::Node { n_classes: 3 }, &gnn, g.feature_dim(), seed).unwrap();
        let j = seed as usize % nodes.len();
        let mut rs = SeedStream::new(seed, &[1000]);
        let rels: Vec<Relative> = (0..2).map(|_| laws.draw(j, &mut rs)).collect();
        let mut streams: Vec<SeedStream> = (0..2).map(|i| SeedStream::new(seed, &[1001, i])).collect();
        let ex = FrozenExample::sample(&m.params, &g, &m.views(), &rels, &mut streams, Target::Class(seed as usize % 3));
        let (_, grads) = example_loss_and_grad(&m.params, &g, Combine::HiddenMean, &ex).unwrap();
        let r = grad_check(&mut m.params, &grads, |p| example_loss(p, &g, Combine::HiddenMean, &ex).unwrap(), 1e-4);
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        if !r.passed {
            failed.push(seed);
        }
    }
    check(
        failed.is_empty() && g.n_nodes() == 8,
        format!("{} nodes, 20 seeds, {checked} entries, max relative error {worst:.2e}, failing seeds {failed:?}", g.n_nodes()),
    )
}

fn fit(g: &HonGraph, tag: Variant, ell: usize, seed: u64) -> EnsembleModel {
    let units: Vec<EntityId> = g.present_entities().collect();
    let classes = units.iter().map(|e| e.idx() % 2).collect();
    let targets = Targets::Nodes { units, classes, n_classes: 2 };
    let cfg = TrainConfig {
        gnn: GnnConfig { layers: 2, hidden: 6, fanouts: vec![3, 2], dropout: 0.4, direction: Direction::Out },
        epochs: 5,
        batch_size: 3,
        patience: 3,
        holdout_fraction: 0.25,
        ..TrainConfig::default()
    };
    let boots = make_bootstraps(g, &targets.units(), ell, seed).unwrap();
    train(g, &boots, &targets, DgeVariant::new(tag, ell).unwrap(), &cfg, seed).unwrap()
}

fn criterion_7() -> Outcome {
    let g2 = build_hon(&branching(), &HonConfig::new(2)).unwrap();
    let nodes: Vec<EntityId> = g2.present_entities().collect();
    let mut mean_exact = true;
    for seed in 0..5 {
        let m = fit(&g2, Variant::Bag, 4, seed);
        let per = m.per_learner_predictions(&g2, &nodes, seed + 50).unwrap();
        mean_exact &= m.predict_nodes(&g2, &nodes, seed + 50).unwrap() == mean_of_sets(&per);
    }

    // singleton families: every variant reduces to one network
    let g1 = build_fon(&branching());
    let nodes: Vec<EntityId> = g1.present_entities().collect();
    let reference = fit(&g1, Variant::Bag, 1, 9);
    let want = reference.predict_nodes(&g1, &nodes, 4).unwrap();
    let (net, head) = (&reference.params.nets[0], &reference.params.heads[0]);
    let mut single = true;
    for (j, &e) in nodes.iter().enumerate() {
        let mut draw = SeedStream::new(4, &[purpose::PREDICT_DRAW, e.0 as u64]);
        draw.next_u64();
        let mut rng = SeedStream::new(4, &[purpose::PREDICT, e.0 as u64, 0]);
        single &= softmax(&head.forward(&net.embed(&g1, g1.family_ids(e)[0], &mut rng))) == want[j];
    }
    let differing: Vec<String> = Variant::ALL
        .into_iter()
        .filter(|&tag| {
            let m = fit(&g1, tag, 1, 9);
            m.predict_nodes(&g1, &nodes, 4).unwrap() != want || m.params.tensors() != reference.params.tensors()
        })
        .map(|t| t.to_string())
        .collect();
    check(
        mean_exact && single && differing.is_empty(),
        format!("bag = learner mean bit-exact: {mean_exact}; l=1 single network: {single}; variants differing: {differing:?}"),
    )
}

struct SeedRun {
    dge: f64,
    baseline: f64,
    learner_f1: Vec<f64>,
    majority: f64,
    kappas: Vec<f64>,
    tsv_rows: usize,
}

fn planted_run(memory: f64, seed: u64) -> SeedRun {
    let spec = PlantedChainSpec { memory_strength: memory, seed, ..PlantedChainSpec::default() };
    let (c, labels) = generate(&spec).unwrap();
    let g2 = build_hon(&c, &HonConfig::new(2)).unwrap();
    let g1 = build_fon(&c);
    let train_cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
    let exp = |ell| NodeExperiment {
        variant: DgeVariant::new(Variant::Bag, ell).unwrap(),
        train: train_cfg.clone(),
        n_folds: 5,
        folds: vec![0],
        seed,
    };
    let dge = run_node_classification(&g2, &labels, &exp(8)).unwrap().remove(0);
    let base = run_node_classification(&g1, &labels, &exp(1)).unwrap().remove(0);
    SeedRun {
        dge: dge.micro_f1,
        baseline: base.micro_f1,
        learner_f1: dge.learner_f1,
        majority: dge.majority_f1,
        kappas: dge.diversity.iter().map(|r| r.kappa).collect(),
        tsv_rows: diversity_tsv(&dge.diversity).lines().count() - 1,
    }
}

fn planted_gap(runs: &[SeedRun]) -> (f64, f64, f64) {
    let dge = mean_std(&runs.iter().map(|r| r.dge).collect::<Vec<_>>()).0;
    let base = mean_std(&runs.iter().map(|r| r.baseline).collect::<Vec<_>>()).0;
    (dge, base, dge - base)
}

fn criterion_8(memory: &[SeedRun], none: &[SeedRun]) -> Outcome {
    let (d9, b9, gap9) = planted_gap(memory);
    let (d0, b0, gap0) = planted_gap(none);
    check(
        gap9 >= 0.03 && gap0.abs() <= 0.02,
        format!("s=0.9: DGE {d9:.4} vs single {b9:.4} (gap {gap9:+.4}); s=0: DGE {d0:.4} vs single {b0:.4} (gap {gap0:+.4})"),
    )
}

fn criterion_9(runs: &[SeedRun]) -> Outcome {
    let kappas: Vec<f64> = runs.iter().flat_map(|r| r.kappas.iter().copied()).collect();
    let mean_kappa = mean_std(&kappas).0;
    let rows_ok = runs.iter().all(|r| r.kappas.len() == 28 && r.tsv_rows == 28);
    let beats = runs.iter().all(|r| r.learner_f1.len() == 8 && r.learner_f1.iter().all(|&f| f > r.majority));
    let worst = runs.iter().flat_map(|r| r.learner_f1.iter().map(move |f| f - r.majority)).fold(f64::INFINITY, f64::min);
    check(
        mean_kappa < 0.99 && rows_ok && beats,
        format!("mean kappa {mean_kappa:.4} over {} pairs; 28 rows per seed: {rows_ok}; smallest learner margin over majority {worst:+.4}", kappas.len()),
    )
}

fn criterion_10() -> Outcome {
    let (c, labels) = generate(&PlantedChainSpec { n_entities: 203, n_paths: 3000, n_classes: 7, ..PlantedChainSpec::default() }).unwrap();
    let mut balanced = true;
    for (k, seed) in [(5, 0), (3, 1), (10, 2)] {
        let plan = make_folds(&labels, k, seed).unwrap();
        for class in 0..labels.n_classes() as u32 {
            let sizes: Vec<usize> = (0..k)
                .map(|f| plan.test_set(f).iter().filter(|&&e| labels.get(e) == Some(class)).count())
                .collect();
            balanced &= sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1;
        }
    }

    let g2 = build_hon(&c, &HonConfig::new(2)).unwrap();
    let g1 = build_fon(&c);
    let mut leaked = 0;
    let mut hidden = 0;
    for seed in 0..3 {
        let split = make_link_split(&g2, &g1, 0.1, seed);
        hidden += split.test_pos.len();
        let test: HashSet<(EntityId, EntityId)> = split.test_pos.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).collect();
        let tg = &split.train_graph;
        leaked += tg.edges().filter(|&(a, b, _)| test.contains(&(tg.base(a), tg.base(b)))).count();
        let positives: HashSet<_> = first_order_pairs(&g1).into_iter().collect();
        leaked += split.test_neg.iter().filter(|&&(u, v)| positives.contains(&(u, v)) || positives.contains(&(v, u))).count();
    }

    let perfect = auprc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
    let inverted = auprc(&[0.1, 0.7, 0.8, 0.9], &[true, false, false, false]).unwrap();
    check(
        balanced && leaked == 0 && hidden > 0 && perfect == 1.0 && (inverted - 0.25).abs() < 1e-12,
        format!("folds within 1 per class: {balanced}; {hidden} hidden pairs, {leaked} leaks; AUPRC perfect {perfect}, inverted {inverted}"),
    )
}

fn pipeline(dir: &Path, threads: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let f = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let model = ["--ell", "3", "--hidden", "8", "--fanout", "4,2", "--epochs", "3", "--batch-size", "16"];
    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "--out-paths", &f("paths.txt"), "--out-labels", &f("labels.tsv"), "--entities", "60", "--classes", "3", "--paths", "600", "--length", "6", "--seed", "4"]
            .into_iter().map(String::from).collect(),
        vec!["build", "--paths", &f("paths.txt"), "--order", "2", "--out", &f("g2.tsv"), "--rules", &f("rules.tsv")].into_iter().map(String::from).collect(),
        vec!["build", "--paths", &f("paths.txt"), "--order", "1", "--out", &f("g1.tsv")].into_iter().map(String::from).collect(),
        vec!["inspect", "--graph", &f("g2.tsv"), "--labels", &f("labels.tsv"), "--out", &f("inspect.txt")].into_iter().map(String::from).collect(),
        ["train", "--graph", &f("g2.tsv"), "--labels", &f("labels.tsv"), "--out", &f("model.txt"), "--seed", "1"]
            .into_iter().chain(model).map(String::from).collect(),
        ["train", "--graph", &f("g2.tsv"), "--task", "edge", "--variant", "concat", "--out", &f("link_model.txt"), "--seed", "1"]
            .into_iter().chain(model).map(String::from).collect(),
        ["eval", "--graph", &f("g2.tsv"), "--labels", &f("labels.tsv"), "--folds", "3", "--out", &f("eval.tsv"), "--seed", "2"]
            .into_iter().chain(model).map(String::from).collect(),
        ["eval", "--graph", &f("g2.tsv"), "--task", "edge", "--repeats", "2", "--variant", "pool", "--out", &f("link_eval.tsv"), "--seed", "2"]
            .into_iter().chain(model).map(String::from).collect(),
        ["diversity", "--graph", &f("g2.tsv"), "--labels", &f("labels.tsv"), "--folds", "3", "--out", &f("diversity.tsv"), "--seed", "3"]
            .into_iter().chain(model).map(String::from).collect(),
        vec!["verify", "--graph", &f("g2.tsv"), "--paths", &f("paths.txt"), "--samples", "100000", "--out", &f("verify.txt"), "--seed", "5"]
            .into_iter().map(String::from).collect(),
    ];
    for step in &steps {
        let mut args: Vec<&str> = vec!["--threads", threads];
        args.extend(step.iter().map(String::as_str));
        run_ok(&args)?;
    }
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
    }
    Ok(files)
}

fn criterion_11() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = pipeline(dirs[0].path(), "1")?;
    let b = pipeline(dirs[1].path(), "1")?;
    let c = pipeline(dirs[2].path(), "4")?;
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k) || c.get(*k) != a.get(*k)).collect();
    check(
        differing.is_empty() && a.len() == 12 && a.keys().eq(c.keys()),
        format!("{} output files compared across 2 repeats and --threads 4; differing {differing:?}", a.len()),
    )
}

fn report(name: &str, started: Instant, outcome: &Outcome, failures: &mut Vec<String>) {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => println!("criterion {name:>2}  PASS  {secs:7.1}s  {d}"),
        Err(d) => {
            println!("criterion {name:>2}  FAIL  {secs:7.1}s  {d}");
            failures.push(name.to_string());
        }
    }
}

fn timed(name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome, failures: &mut Vec<String>) {
    let t = Instant::now();
    let mut outcome = f();
    if let (Some(limit), Ok(d)) = (budget, &outcome) {
        if t.elapsed() > limit {
            outcome = Err(format!("{d}; over the {}s budget", limit.as_secs()));
        }
    }
    report(name, t, &outcome, failures);
}

fn main() {
    // `cargo test -- <filter>` passes arguments; a filter that names no
    // criterion skips the whole run (e.g. `cargo test --workspace foo`).
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let mut failures = Vec::new();
    let s = |n| Some(Duration::from_secs(n));
    timed("1", s(1), criterion_1, &mut failures);
    timed("2", s(1), criterion_2, &mut failures);
    timed("3", None, criterion_3, &mut failures);
    timed("4", s(30), criterion_4, &mut failures);
    timed("5", None, criterion_5, &mut failures);
    timed("6", s(10), criterion_6, &mut failures);
    timed("7", None, criterion_7, &mut failures);
    timed("10", None, criterion_10, &mut failures);
    timed("11", None, criterion_11, &mut failures);

    let t = Instant::now();
    let memory: Vec<SeedRun> = (0..5).map(|seed| planted_run(0.9, seed)).collect();
    let none: Vec<SeedRun> = (0..5).map(|seed| planted_run(0.0, seed)).collect();
    let over = t.elapsed() > Duration::from_secs(15 * 60);
    let mut eight = criterion_8(&memory, &none);
    if over {
        eight = Err(format!("{}; over the 15 min budget", eight.unwrap_or_else(|e| e)));
    }
    report("8", t, &eight, &mut failures);
    report("9", t, &criterion_9(&memory), &mut failures);

    if failures.is_empty() {
        println!("acceptance: all 11 criteria pass");
    } else {
        println!("acceptance: failing criteria {failures:?}");
        std::process::exit(1);
    }
}
