use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use hondge::corpus::{LabelMap, PathCorpus};
use hondge::ensemble::{train, DgeVariant, Targets, TrainConfig, Variant};
use hondge::evaluation::{
    diversity_tsv, first_order_pairs, homophily, link_targets, report_tsv, run_link_prediction,
    run_node_classification, LinkExperiment, NodeExperiment,
};
use hondge::graphstore::HonGraph;
use hondge::hon::{build_hon_with_rules, HonConfig};
use hondge::nn::GnnConfig;
use hondge::sampler::{make_bootstraps, Direction};
use hondge::synth::{generate, PlantedChainSpec};
use hondge::{hon, verify};

/// Higher-order networks and deep graph ensembles.
#[derive(Parser, Debug)]
#[command(name = "hondge", version, args_override_self = true)]
struct Cli {
    /// Worker threads (outputs do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// File of `key=value` lines supplying flags; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-dependency path corpus and its labels.
    Synth(SynthArgs),
    /// Build a higher-order network from a path file.
    Build(BuildArgs),
    /// Train an ensemble and write a checkpoint.
    Train(TrainArgs),
    /// Cross-validated node classification or repeated link prediction.
    Eval(EvalArgs),
    /// Pairwise learner agreement of a probability-mean ensemble.
    Diversity(DiversityArgs),
    /// Monte-Carlo checks of conditional-node neighborhoods.
    Verify(VerifyArgs),
    /// Graph statistics.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_paths: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
    #[arg(long, default_value_t = 2000)]
    entities: usize,
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long, default_value_t = 50_000)]
    paths: usize,
    #[arg(long, default_value_t = 8)]
    length: usize,
    #[arg(long, default_value_t = 0.9)]
    memory: f64,
    #[arg(long, default_value_t = 16)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    successors: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    paths: PathBuf,
    /// The first field of every path line is an id to skip.
    #[arg(long)]
    line_ids: bool,
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 1)]
    min_support: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write every candidate rule with its divergence and threshold.
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "bag")]
    variant: Variant,
    #[arg(long, default_value_t = 16)]
    ell: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    /// Neighbors per hop, e.g. `64,1`.
    #[arg(long, default_value = "64,1", value_delimiter = ',')]
    fanout: Vec<usize>,
    #[arg(long, default_value_t = 0.4)]
    dropout: f64,
    #[arg(long, default_value = "out")]
    direction: Direction,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
}

impl ModelArgs {
    fn variant(&self) -> Result<DgeVariant, Failure> {
        DgeVariant::new(self.variant, self.ell).map_err(|e| Failure::Invalid(e.to_string()))
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            gnn: GnnConfig {
                layers: self.layers,
                hidden: self.hidden,
                fanouts: self.fanout.clone(),
                dropout: self.dropout,
                direction: self.direction,
            },
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            holdout_fraction: self.holdout,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq)]
enum TaskArg {
    Node,
    Edge,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    /// `entity<TAB>class` file (node task).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "node")]
    task: TaskArg,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "node")]
    task: TaskArg,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Run only these folds (default: all).
    #[arg(long, value_delimiter = ',')]
    only_folds: Vec<usize>,
    /// Share of first-order pairs hidden per link-prediction repeat.
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DiversityArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Fold whose test nodes are scored.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    paths: PathBuf,
    #[arg(long)]
    line_ids: bool,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit code 1 for bad input, 2 for failures while running.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
    /// Already formatted by the argument parser.
    Usage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) | Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("cannot read {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_graph(path: &Path) -> Result<HonGraph, Failure> {
    HonGraph::from_tsv(&read(path)?).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn load_labels(path: &Path, graph: &HonGraph) -> Result<LabelMap, Failure> {
    LabelMap::parse(&read(path)?, graph.entities()).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn require_labels(labels: &Option<PathBuf>, graph: &HonGraph) -> Result<LabelMap, Failure> {
    match labels {
        Some(p) => load_labels(p, graph),
        None => Err(Failure::Invalid("--labels is required for the node task".into())),
    }
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let spec = PlantedChainSpec {
        n_entities: a.entities,
        order: a.order,
        n_paths: a.paths,
        path_len: a.length,
        memory_strength: a.memory,
        n_classes: a.classes,
        successors_per_block: a.successors,
        seed: a.seed,
    };
    let (corpus, labels) = generate(&spec).map_err(invalid)?;
    emit(Some(&a.out_paths), &corpus.to_text())?;
    emit(Some(&a.out_labels), &labels.to_text(corpus.index()))
}

fn build(a: &BuildArgs) -> Result<(), Failure> {
    let corpus = PathCorpus::parse(&read(&a.paths)?, a.line_ids).map_err(|e| Failure::Invalid(format!("{}: {e}", a.paths.display())))?;
    if corpus.rejected_lines() > 0 {
        eprintln!("warning: skipped {} malformed path lines", corpus.rejected_lines());
    }
    let cfg = HonConfig {
        k: a.order,
        tau: a.tau,
        min_support: a.min_support,
    };
    let built = build_hon_with_rules(&corpus, &cfg).map_err(invalid)?;
    emit(Some(&a.out), &built.graph.to_tsv())?;
    if let Some(p) = &a.rules {
        let mut t = String::from("node\tfreq\tdivergence\tthreshold\tadmitted\n");
        for (r, ok) in built.candidates.iter().zip(&built.admitted) {
            writeln!(t, "{}\t{}\t{}\t{}\t{}", r.node.token(corpus.index()), r.freq, r.divergence, r.threshold, ok).unwrap();
        }
        emit(Some(p), &t)?;
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<(), Failure> {
    let graph = load_graph(&a.graph)?;
    let variant = a.model.variant()?;
    let cfg = a.model.train_config();
    cfg.validate().map_err(invalid)?;
    let targets = match a.task {
        TaskArg::Node => {
            let labels = require_labels(&a.labels, &graph)?;
            let units: Vec<_> = graph.present_entities().filter(|&e| labels.get(e).is_some()).collect();
            if units.is_empty() {
                return Err(invalid("no labeled entity appears in the graph"));
            }
            Targets::Nodes {
                classes: units.iter().map(|&e| labels.get(e).unwrap() as usize).collect(),
                units,
                n_classes: labels.n_classes(),
            }
        }
        TaskArg::Edge => {
            let g1 = graph.collapse_to_first_order();
            link_targets(&g1, first_order_pairs(&g1), &HashSet::new(), a.seed)
        }
    };
    let boots = make_bootstraps(&graph, &targets.units(), variant.ell, a.seed).map_err(invalid)?;
    let model = train(&graph, &boots, &targets, variant, &cfg, a.seed).map_err(runtime)?;
    emit(Some(&a.out), &model.to_checkpoint())
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let graph = load_graph(&a.graph)?;
    let variant = a.model.variant()?;
    let cfg = a.model.train_config();
    cfg.validate().map_err(invalid)?;
    let text = match a.task {
        TaskArg::Node => {
            let labels = require_labels(&a.labels, &graph)?;
            let exp = NodeExperiment {
                variant,
                train: cfg,
                n_folds: a.folds,
                folds: a.only_folds.clone(),
                seed: a.seed,
            };
            let results = run_node_classification(&graph, &labels, &exp).map_err(classify)?;
            let rows: Vec<_> = results.iter().map(|r| (r.fold, r.n_test, r.micro_f1)).collect();
            report_tsv("micro_f1", &rows)
        }
        TaskArg::Edge => {
            let g1 = graph.collapse_to_first_order();
            let exp = LinkExperiment {
                variant,
                train: cfg,
                fraction: a.fraction,
                repeats: a.repeats,
                seed: a.seed,
            };
            let results = run_link_prediction(&graph, &g1, &exp).map_err(classify)?;
            let rows: Vec<_> = results.iter().map(|r| (r.repeat, r.n_test, r.auprc)).collect();
            report_tsv("auprc", &rows)
        }
    };
    emit(a.out.as_deref(), &text)
}

/// Protocol errors come from the inputs; training errors are runtime.
fn classify(e: hondge::evaluation::EvalError) -> Failure {
    use hondge::evaluation::EvalError as E;
    match e {
        E::Ensemble(_) => runtime(e),
        _ => invalid(e),
    }
}

fn diversity(a: &DiversityArgs) -> Result<(), Failure> {
    let graph = load_graph(&a.graph)?;
    let labels = load_labels(&a.labels, &graph)?;
    let variant = a.model.variant()?;
    if !variant.tag.has_per_learner_outputs() {
        return Err(invalid(format!("variant {} has no per-learner outputs; use bag, bag* or batch*", variant.tag)));
    }
    if a.fold >= a.folds {
        return Err(invalid(format!("--fold {} out of range for {} folds", a.fold, a.folds)));
    }
    let exp = NodeExperiment {
        variant,
        train: a.model.train_config(),
        n_folds: a.folds,
        folds: vec![a.fold],
        seed: a.seed,
    };
    let results = run_node_classification(&graph, &labels, &exp).map_err(classify)?;
    emit(a.out.as_deref(), &diversity_tsv(&results[0].diversity))
}

fn verify_cmd(a: &VerifyArgs) -> Result<bool, Failure> {
    let corpus = PathCorpus::parse(&read(&a.paths)?, a.line_ids).map_err(|e| Failure::Invalid(format!("{}: {e}", a.paths.display())))?;
    let graph = load_graph(&a.graph)?;
    let g1 = hon::build_fon(&corpus);
    let (laws, checks) = verify::report(&graph, &g1, a.samples, a.seed);
    let ok = laws.passed() && checks.iter().all(|c| c.as_ref().is_ok_and(|c| c.passed()));
    let mut text = verify::report_text(&laws, &checks);
    writeln!(text, "overall\t{}", if ok { "PASS" } else { "FAIL" }).unwrap();
    emit(a.out.as_deref(), &text)?;
    Ok(ok)
}

fn inspect(a: &InspectArgs) -> Result<(), Failure> {
    let graph = load_graph(&a.graph)?;
    let g1 = graph.collapse_to_first_order();
    let mut t = String::new();
    writeln!(t, "order\t{}", graph.k()).unwrap();
    writeln!(t, "nodes\t{}", graph.n_nodes()).unwrap();
    writeln!(t, "edges\t{}", graph.n_edges()).unwrap();
    writeln!(t, "conditional_nodes\t{}", graph.conditional_nodes().count()).unwrap();
    writeln!(t, "first_order_nodes\t{}", g1.n_nodes()).unwrap();
    writeln!(t, "first_order_edges\t{}", g1.n_edges()).unwrap();
    writeln!(t, "total_weight\t{}", graph.total_weight()).unwrap();
    if let Some(p) = &a.labels {
        let labels = load_labels(p, &graph)?;
        let fmt = |h: Option<f64>| h.map_or("-".to_string(), |v| format!("{v:.6}"));
        writeln!(t, "classes\t{}", labels.n_classes()).unwrap();
        writeln!(t, "labeled\t{}", labels.n_labeled()).unwrap();
        writeln!(t, "homophily_first_order\t{}", fmt(homophily(&g1, &labels).mean)).unwrap();
        writeln!(t, "homophily\t{}", fmt(homophily(&graph, &labels).mean)).unwrap();
    }
    emit(a.out.as_deref(), &t)
}

/// Turns `key=value` lines into `--key value` arguments.
fn config_args(text: &str) -> Result<Vec<String>, Failure> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Invalid(format!("config line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        match v {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => {
                out.push(format!("--{k}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

/// Inserts config-file flags right after the subcommand so that later,
/// explicit flags override them.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let pos = argv.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else { return Ok(argv) };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => argv
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| Failure::Invalid("--config needs a file".into()))?,
    };
    let extra = config_args(&read(Path::new(&path))?)?;
    let subcommands = ["synth", "build", "train", "eval", "diversity", "verify", "inspect"];
    let at = argv
        .iter()
        .position(|a| subcommands.contains(&a.as_str()))
        .map_or(argv.len(), |i| i + 1);
    let mut out = argv[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}

fn run(argv: Vec<String>) -> Result<bool, Failure> {
    let argv = expand_config(argv)?;
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(true);
            }
            return Err(Failure::Usage(e.render().to_string()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(invalid)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    match &cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Build(a) => build(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Diversity(a) => diversity(a)?,
        Command::Verify(a) => return verify_cmd(a),
        Command::Inspect(a) => inspect(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            match &f {
                Failure::Invalid(m) | Failure::Runtime(m) => eprintln!("error: {}", m.trim_end()),
                Failure::Usage(m) => eprint!("{m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
