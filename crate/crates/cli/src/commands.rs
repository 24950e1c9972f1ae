use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use hnu_core::corpus::{corpus_steps, load_traces, write_traces};
use hnu_core::hints::{Agency, HintEngine};
use hnu_core::logic::{check_step, load_problems, parse_expression, shipped_problems, KeyMode, Problem, ProofState};
use hnu_core::network::{Backup, InteractionNetwork};
use hnu_core::policy::{PolicyConfig, PolicyKind};
use hnu_core::predictor::{build_dataset, evaluate, planted_cohort, HelpNeedModel, Protocol};
use hnu_core::session::Tutor;
use hnu_core::sim::{build_networks, generate_corpus, run_experiment_full, Curriculum, ExperimentConfig};
use hnu_core::stepscore::{label_corpus, threshold_table};

use crate::error::CliError;
use crate::server::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "hnu", version, about = "HelpNeed-and-Use adaptive hint pipeline")]
pub struct Cli {
    /// Default directory for inputs and outputs.
    #[arg(long, global = true, env = "HNU_DATA_DIR", default_value = "hnu-data")]
    pub data_dir: PathBuf,
    /// Master seed; overrides the config file's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Problem file (one JSON problem per line); the bundled set otherwise.
    #[arg(long, global = true)]
    pub problems: Option<PathBuf>,
    /// Experiment config (JSON); flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackupArg {
    Expected,
    Max,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a seed corpus.
    GenCorpus {
        #[arg(long)]
        students: Option<usize>,
        /// Training-section policy: adaptive is unavailable without a model.
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build and value-iterate one network per problem.
    BuildNetwork {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        key_mode: Option<KeyMode>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_enum)]
        backup: Option<BackupArg>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Label every step of a corpus.
    Label {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        networks: Option<PathBuf>,
        #[arg(long, value_enum)]
        penalty: Option<Switch>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the two-classifier HelpNeed model.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        networks: Option<PathBuf>,
        #[arg(long, value_enum)]
        penalty: Option<Switch>,
        #[arg(long)]
        trees: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validated or holdout evaluation.
    Evaluate {
        #[arg(long, default_value = "cv3")]
        protocol: Protocol,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        networks: Option<PathBuf>,
        #[arg(long, value_enum)]
        penalty: Option<Switch>,
        /// Evaluate on a synthetic cohort with signal planted in the
        /// quality/progress features instead of a corpus.
        #[arg(long)]
        planted: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a seeded A/B experiment.
    Simulate {
        /// Treatment condition policy.
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        control_policy: Option<PolicyKind>,
        #[arg(long, value_enum)]
        penalty: Option<Switch>,
        #[arg(long)]
        key_mode: Option<KeyMode>,
        #[arg(long)]
        students: Option<usize>,
        #[arg(long)]
        seed_students: Option<usize>,
        /// Write report.json and report.txt here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Next-step hint for a problem state.
    Hint {
        #[arg(long)]
        problem: String,
        /// Statements derived so far, in order.
        #[arg(long = "derived")]
        derived: Vec<String>,
        #[arg(long)]
        networks: Option<PathBuf>,
    },
    /// Serve the tutor HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        networks: Option<PathBuf>,
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Default policy for new sessions.
        #[arg(long)]
        policy: Option<PolicyKind>,
        /// Allowed CORS origin; any origin when absent.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

struct Ctx {
    data_dir: PathBuf,
    config: ExperimentConfig,
    problems: Vec<Problem>,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.data_dir.join(default))
    }

    fn curriculum(&self) -> Curriculum {
        Curriculum::new(self.problems.clone())
    }
}

fn file_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::File {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(file_error(dir)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(file_error(path))
}

fn load_corpus(path: &Path) -> Result<Vec<hnu_core::corpus::TraceEvent>, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("corpus {} not found (run gen-corpus first)", path.display())));
    }
    Ok(load_traces(path)?)
}

/// Reads `{dir}/{problem}.json` for every problem that has one.
pub fn load_networks(dir: &Path, problems: &[Problem], required: bool) -> Result<BTreeMap<String, InteractionNetwork>, CliError> {
    if !dir.is_dir() {
        return if required {
            Err(CliError::Usage(format!("network directory {} not found (run build-network first)", dir.display())))
        } else {
            Ok(BTreeMap::new())
        };
    }
    let mut out = BTreeMap::new();
    for p in problems {
        let path = dir.join(format!("{}.json", p.id));
        if path.exists() {
            out.insert(p.id.clone(), InteractionNetwork::load(&path)?);
        }
    }
    Ok(out)
}

fn network_key_mode(networks: &BTreeMap<String, InteractionNetwork>) -> Result<Option<KeyMode>, CliError> {
    let mut modes = networks.values().map(|n| n.key_mode);
    let Some(first) = modes.next() else { return Ok(None) };
    if modes.any(|m| m != first) {
        return Err(CliError::Usage("networks were built with different key modes".into()));
    }
    Ok(Some(first))
}

fn print_line(value: serde_json::Value) {
    println!("{value}");
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).map_err(file_error(path))?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let problems = match &cli.problems {
        Some(path) => load_problems(path, true)?,
        None => shipped_problems(),
    };
    let ctx = Ctx {
        data_dir: cli.data_dir,
        config,
        problems,
    };
    match cli.command {
        Command::GenCorpus { students, policy, out } => gen_corpus(ctx, students, policy, out),
        Command::BuildNetwork {
            corpus,
            key_mode,
            gamma,
            backup,
            out_dir,
        } => build_network(ctx, corpus, key_mode, gamma, backup, out_dir),
        Command::Label {
            corpus,
            networks,
            penalty,
            out,
        } => label(ctx, corpus, networks, penalty, out),
        Command::Train {
            corpus,
            networks,
            penalty,
            trees,
            depth,
            out,
        } => train_cmd(ctx, corpus, networks, penalty, trees, depth, out),
        Command::Evaluate {
            protocol,
            corpus,
            networks,
            penalty,
            planted,
            out,
        } => evaluate_cmd(ctx, protocol, corpus, networks, penalty, planted, out),
        Command::Simulate {
            policy,
            control_policy,
            penalty,
            key_mode,
            students,
            seed_students,
            out_dir,
        } => simulate(ctx, policy, control_policy, penalty, key_mode, students, seed_students, out_dir),
        Command::Hint {
            problem,
            derived,
            networks,
        } => hint(ctx, &problem, &derived, networks),
        Command::Serve {
            addr,
            model,
            networks,
            sessions,
            policy,
            cors_origin,
        } => serve(ctx, &addr, model, networks, sessions, policy, cors_origin),
    }
}

fn gen_corpus(mut ctx: Ctx, students: Option<usize>, policy: Option<PolicyKind>, out: Option<PathBuf>) -> Result<(), CliError> {
    if let Some(n) = students {
        ctx.config.seed_students = n;
    }
    if let Some(p) = policy {
        if p == PolicyKind::Adaptive {
            return Err(CliError::Usage("gen-corpus has no model; use control or random:p".into()));
        }
        ctx.config.seed_policy = p;
    }
    let out = ctx.path(&out, "corpus.jsonl");
    let events = generate_corpus(&ctx.config, &ctx.curriculum())?;
    ensure_parent(&out)?;
    write_traces(&events, &out)?;
    print_line(json!({
        "command": "gen-corpus",
        "students": ctx.config.seed_students,
        "events": events.len(),
        "out": out.display().to_string(),
    }));
    Ok(())
}

fn build_network(
    mut ctx: Ctx,
    corpus: Option<PathBuf>,
    key_mode: Option<KeyMode>,
    gamma: Option<f64>,
    backup: Option<BackupArg>,
    out_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    if let Some(k) = key_mode {
        ctx.config.key_mode = k;
    }
    if let Some(g) = gamma {
        ctx.config.value_iteration.discount = g;
    }
    if let Some(b) = backup {
        ctx.config.value_iteration.backup = match b {
            BackupArg::Expected => Backup::Expected,
            BackupArg::Max => Backup::Max,
        };
    }
    ctx.config.value_iteration.validate()?;
    let events = load_corpus(&ctx.path(&corpus, "corpus.jsonl"))?;
    let steps = corpus_steps(&events, &ctx.problems)?;
    let networks = build_networks(&steps, &ctx.problems, ctx.config.key_mode, &ctx.config.value_iteration)?;
    let dir = ctx.path(&out_dir, "networks");
    fs::create_dir_all(&dir).map_err(file_error(&dir))?;
    let mut nodes = BTreeMap::new();
    for (id, net) in &networks {
        net.save(&dir.join(format!("{id}.json")))?;
        nodes.insert(id.clone(), net.nodes.len());
    }
    print_line(json!({
        "command": "build-network",
        "key_mode": ctx.config.key_mode.to_string(),
        "nodes": nodes,
        "out_dir": dir.display().to_string(),
    }));
    Ok(())
}

fn labeled_corpus(
    ctx: &mut Ctx,
    corpus: &Option<PathBuf>,
    networks: &Option<PathBuf>,
    penalty: Option<Switch>,
) -> Result<(Vec<hnu_core::stepscore::LabeledStep>, BTreeMap<String, InteractionNetwork>, BTreeMap<String, f64>), CliError> {
    if let Some(p) = penalty {
        ctx.config.penalty = p.on();
    }
    let events = load_corpus(&ctx.path(corpus, "corpus.jsonl"))?;
    let steps = corpus_steps(&events, &ctx.problems)?;
    let nets = load_networks(&ctx.path(networks, "networks"), &ctx.problems, true)?;
    if let Some(mode) = network_key_mode(&nets)? {
        ctx.config.key_mode = mode;
    }
    let thresholds = threshold_table(&steps);
    let labeled = label_corpus(&steps, &nets, &thresholds, &ctx.config.label_config())?;
    Ok((labeled, nets, thresholds))
}

fn label(mut ctx: Ctx, corpus: Option<PathBuf>, networks: Option<PathBuf>, penalty: Option<Switch>, out: Option<PathBuf>) -> Result<(), CliError> {
    let (labeled, _, _) = labeled_corpus(&mut ctx, &corpus, &networks, penalty)?;
    let out = ctx.path(&out, "labels.jsonl");
    ensure_parent(&out)?;
    let mut w = std::io::BufWriter::new(fs::File::create(&out).map_err(file_error(&out))?);
    for l in &labeled {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let helpneed = labeled.iter().filter(|l| l.helpneed()).count();
    print_line(json!({
        "command": "label",
        "steps": labeled.len(),
        "helpneed": helpneed,
        "penalty": ctx.config.penalty,
        "out": out.display().to_string(),
    }));
    Ok(())
}

fn train_cmd(
    mut ctx: Ctx,
    corpus: Option<PathBuf>,
    networks: Option<PathBuf>,
    penalty: Option<Switch>,
    trees: Option<usize>,
    depth: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if let Some(t) = trees {
        ctx.config.forest.n_trees = t;
    }
    if let Some(d) = depth {
        ctx.config.forest.max_depth = d;
    }
    let (labeled, nets, thresholds) = labeled_corpus(&mut ctx, &corpus, &networks, penalty)?;
    let model = ctx.config.train_model(&labeled, &ctx.curriculum(), &nets, thresholds)?;
    let out = ctx.path(&out, "model.json");
    ensure_parent(&out)?;
    model.save(&out)?;
    print_line(json!({
        "command": "train",
        "examples": model.metadata.examples,
        "state_based_examples": model.metadata.state_based_examples,
        "corpus_hash": model.metadata.corpus_hash,
        "penalty": model.settings.penalty,
        "out": out.display().to_string(),
    }));
    Ok(())
}

fn evaluate_cmd(
    mut ctx: Ctx,
    protocol: Protocol,
    corpus: Option<PathBuf>,
    networks: Option<PathBuf>,
    penalty: Option<Switch>,
    planted: bool,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (examples, settings) = if planted {
        (planted_cohort(ctx.config.seed, 60, 40), ctx.config.feature_settings(BTreeMap::new()))
    } else {
        let (labeled, nets, thresholds) = labeled_corpus(&mut ctx, &corpus, &networks, penalty)?;
        let settings = ctx.config.feature_settings(thresholds);
        (build_dataset(&labeled, &ctx.problems, &nets, &settings), settings)
    };
    let report = evaluate(&examples, &ctx.config.train_params(), &settings, protocol, ctx.config.seed);
    print!("{}", report.to_table());
    let out = ctx.path(&out, &format!("eval-{protocol}.json"));
    write_text(&out, &serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    mut ctx: Ctx,
    policy: Option<PolicyKind>,
    control_policy: Option<PolicyKind>,
    penalty: Option<Switch>,
    key_mode: Option<KeyMode>,
    students: Option<usize>,
    seed_students: Option<usize>,
    out_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    let c = &mut ctx.config;
    if let Some(p) = policy {
        c.treatment = p;
    }
    if let Some(p) = control_policy {
        c.control = p;
    }
    if let Some(p) = penalty {
        c.penalty = p.on();
    }
    if let Some(k) = key_mode {
        c.key_mode = k;
    }
    if let Some(n) = students {
        c.n_students = n;
    }
    if let Some(n) = seed_students {
        c.seed_students = n;
    }
    let outcome = run_experiment_full(&ctx.config, &ctx.curriculum())?;
    let report = outcome.report;
    let dir = out_dir.unwrap_or_else(|| ctx.data_dir.clone());
    fs::create_dir_all(&dir).map_err(file_error(&dir))?;
    write_text(&dir.join("report.json"), &report.to_json())?;
    let tables = report.to_tables();
    write_text(&dir.join("report.txt"), &tables)?;
    print!("{tables}");
    Ok(())
}

/// Finds a rule application producing `derived` from the current
/// statements.
fn derive_any(state: &mut ProofState, problem: &Problem, text: &str) -> Result<(), CliError> {
    let derived = parse_expression(text).map_err(|e| CliError::Usage(format!("`{text}`: {e}")))?;
    let n = state.len();
    for &rule in &problem.allowed_rules {
        let choices: Vec<Vec<usize>> = if rule.arity() == 1 {
            (0..n).map(|i| vec![i]).collect()
        } else {
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| vec![i, j])).collect()
        };
        for premises in choices {
            if check_step(state, rule, &premises, &derived)? && !state.contains(&derived) {
                state.derive(rule, &premises, derived)?;
                return Ok(());
            }
        }
    }
    Err(CliError::Usage(format!("`{text}` does not follow in one step from the current statements")))
}

fn hint(ctx: Ctx, problem_id: &str, derived: &[String], networks: Option<PathBuf>) -> Result<(), CliError> {
    let problem = ctx
        .problems
        .iter()
        .find(|p| p.id == problem_id)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("unknown problem `{problem_id}`")))?;
    let mut state = ProofState::new(&problem);
    for text in derived {
        derive_any(&mut state, &problem, text)?;
    }
    let nets = load_networks(&ctx.path(&networks, "networks"), std::slice::from_ref(&problem), false)?;
    let curriculum = Curriculum::new(vec![problem.clone()]);
    let net = nets.get(&problem.id).map(|n| Arc::new(n.clone()));
    let engine = HintEngine::new(problem, curriculum.spaces.values().next().expect("one problem").clone(), net);
    let hint = engine.next_step_hint(&state, Agency::OnDemand, state.derived_count())?;
    println!("{}", serde_json::to_string(&hint)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn serve(
    ctx: Ctx,
    addr: &str,
    model: Option<PathBuf>,
    networks: Option<PathBuf>,
    sessions: Option<PathBuf>,
    policy: Option<PolicyKind>,
    cors_origin: Option<String>,
) -> Result<(), CliError> {
    let model_path = ctx.path(&model, "model.json");
    let model = if model_path.exists() {
        Some(HelpNeedModel::load(&model_path)?)
    } else if model.is_some() {
        return Err(CliError::Usage(format!("model {} not found", model_path.display())));
    } else {
        None
    };
    let nets = load_networks(&ctx.path(&networks, "networks"), &ctx.problems, networks.is_some())?;
    let kind = policy.unwrap_or(if model.is_some() { PolicyKind::Adaptive } else { PolicyKind::Control });
    let defaults = PolicyConfig {
        kind,
        penalty_enabled: model.as_ref().map_or(ctx.config.penalty, |m| m.settings.penalty),
        key_mode: ctx.config.key_mode,
        cooldown: ctx.config.cooldown,
    };
    defaults.check(model.as_ref()).map_err(|e| CliError::Usage(e.to_string()))?;
    let tutor = Arc::new(Tutor::new(&ctx.curriculum(), nets, model));
    let store = ctx.path(&sessions, "sessions");
    let app = Arc::new(AppState::new(tutor, Some(store), defaults, ctx.config.seed)?);
    let origin = cors_origin
        .map(|o| o.parse().map_err(|_| CliError::Usage(format!("invalid CORS origin `{o}`"))))
        .transpose()?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("{}", json!({ "listening": listener.local_addr()?.to_string(), "policy": kind.to_string() }));
        axum::serve(listener, router(app, origin)).await?;
        Ok(())
    })
}
