//! `akgp`: train, evaluate, retrieve and ablate from the command line.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use akgp_core::ablation::{self, AblationData};
use akgp_core::checkpoint;
use akgp_core::data::{read_examples, write_examples};
use akgp_core::encoders::Example;
use akgp_core::gradsuite;
use akgp_core::kg::{serialize_triples, subgraph_stats};
use akgp_core::model::ModelParams;
use akgp_core::retrieval::retrieve_topk;
use akgp_core::rng::mix_seed;
use akgp_core::synth::World;
use akgp_core::tape::Tape;
use akgp_core::trainer::EpochStats;
use akgp_core::{build_graph, parse_config, parse_triples, CheckpointError, Error, KnowledgeGraph, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const CHECKPOINT_FILE: &str = "checkpoint.akgp";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "akgp", version, about = "Knowledge-guided multimodal pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON training config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tab-separated triple file.
    #[arg(long)]
    kg: Option<PathBuf>,
    /// JSON-lines example file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to load.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue the loaded run up to the configured epoch count instead of
    /// training the full count again.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive alignment stage.
    Pretrain(Common),
    /// Task fine-tuning under the freeze policy.
    Finetune(Common),
    /// Accuracy, loss and retrieval hit rate of a checkpoint on a dataset.
    Eval(Common),
    /// Five-row component ablation on the synthetic world.
    Ablate(Common),
    /// Top-k knowledge nodes for one example, as JSON lines.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Zero-based index of the example in --data.
        #[arg(long, default_value_t = 0)]
        example: usize,
    },
    /// Writes a synthetic world: graph, train/test split and pretraining corpus.
    GenData(Common),
    /// Finite-difference report for every op and both objectives.
    CheckGrads(Common),
}

/// Failure with an exit code and a stable machine-readable code.
#[derive(Debug)]
struct Failure {
    exit: u8,
    code: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { exit: 1, code: "usage", message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (exit, code) = match &e {
            Error::Numeric { .. } | Error::NonFinite(_) => (3, "numeric"),
            Error::NotOnTape(_) | Error::MissingGrad(_) => (3, "internal"),
            Error::Checkpoint(c) => (
                2,
                match c {
                    CheckpointError::BadMagic => "bad_magic",
                    CheckpointError::Truncated { .. } => "truncated",
                    CheckpointError::DimOverflow { .. } => "dim_overflow",
                    CheckpointError::Malformed(_) => "malformed_checkpoint",
                },
            ),
            Error::Config { .. } => (2, "config"),
            Error::Parse { .. } => (2, "parse"),
            Error::Io(_) => (2, "io"),
            Error::Json(_) => (2, "json"),
            Error::Shape { .. } => (2, "shape"),
            Error::InvalidArgument(_) => (2, "invalid_argument"),
            Error::EmptyDataset => (2, "empty_dataset"),
        };
        Self { exit, code, message }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a TrainConfig,
    /// 64-bit FNV-1a of each input file, hex.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    wall_clock_secs: f64,
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> String {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

struct Run<'a> {
    command: &'a str,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(command: &'a str) -> Self {
        Self { command, started: Instant::now(), inputs: BTreeMap::new(), outputs: Vec::new() }
    }

    fn read(&mut self, path: &Path) -> CliResult<String> {
        let bytes = std::fs::read(path).map_err(|e| io_at(path, e))?;
        self.inputs.insert(path.display().to_string(), fnv1a(&bytes));
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())).into())
    }

    fn note_input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| io_at(path, e))?;
        self.inputs.insert(path.display().to_string(), fnv1a(&bytes));
        Ok(())
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        std::fs::write(path, bytes).map_err(|e| io_at(path, e))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    fn finish(self, dir: &Path, cfg: &TrainConfig) -> CliResult<()> {
        let manifest = RunManifest {
            command: self.command,
            config: cfg,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            seed: cfg.seed,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io_at(&path, e))?;
        Ok(())
    }
}

fn io_at(path: &Path, e: std::io::Error) -> Failure {
    Failure { exit: 2, code: "io", message: format!("{}: {e}", path.display()) }
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| Failure::usage(format!("missing required flag --{flag}; see --help for usage")))
}

fn load_config(c: &Common, run: &mut Run) -> CliResult<TrainConfig> {
    let path = require(&c.config, "config")?;
    run.note_input(path)?;
    let mut cfg = parse_config(path)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> CliResult<PathBuf> {
    let dir = require(&c.out, "out")?.clone();
    std::fs::create_dir_all(&dir).map_err(|e| io_at(&dir, e))?;
    Ok(dir)
}

fn load_graph(c: &Common, cfg: &TrainConfig, run: &mut Run) -> CliResult<KnowledgeGraph> {
    let path = require(&c.kg, "kg")?;
    let triples = parse_triples(&run.read(path)?)?;
    Ok(build_graph(&triples, cfg.d_k, mix_seed(cfg.seed, 7))?)
}

fn load_data(c: &Common, run: &mut Run) -> CliResult<Vec<Example>> {
    let path = require(&c.data, "data")?;
    run.note_input(path)?;
    Ok(read_examples(path)?)
}

/// A fresh trainer, or the checkpointed one re-configured with `cfg`.
fn trainer(c: &Common, cfg: &TrainConfig, graph: KnowledgeGraph, run: &mut Run) -> CliResult<Trainer> {
    match &c.checkpoint {
        Some(path) => {
            run.note_input(path)?;
            let mut ck = checkpoint::load(path)?;
            ck.config_json = cfg.to_json();
            Ok(Trainer::from_checkpoint(&ck, graph)?)
        }
        None if c.resume => Err(Failure::usage("--resume needs --checkpoint")),
        None => Ok(Trainer::new(cfg.clone(), graph)?),
    }
}

fn epochs_to_run(c: &Common, target: usize, done: u64) -> u64 {
    if c.resume {
        (target as u64).saturating_sub(done)
    } else {
        target as u64
    }
}

fn train(c: &Common, pretraining: bool) -> CliResult<()> {
    let name = if pretraining { "pretrain" } else { "finetune" };
    let mut run = Run::new(name);
    let cfg = load_config(c, &mut run)?;
    let dir = out_dir(c)?;
    let graph = load_graph(c, &cfg, &mut run)?;
    let data = load_data(c, &mut run)?;
    let mut t = trainer(c, &cfg, graph, &mut run)?;
    let (target, done) = if pretraining {
        (cfg.pretrain_epochs, t.pretrain_epochs_done())
    } else {
        (cfg.finetune_epochs, t.finetune_epochs_done())
    };
    let mut log = Vec::new();
    for _ in 0..epochs_to_run(c, target, done) {
        let stats: EpochStats = if pretraining { t.pretrain_epoch(&data)? } else { t.finetune_epoch(&data)? };
        akgp_core::trainer::append_run_log(&mut log, &stats)?;
    }
    let bytes = checkpoint::encode(&t.to_checkpoint())?;
    run.write(&dir.join(CHECKPOINT_FILE), &bytes)?;
    run.write(&dir.join("train_log.jsonl"), &log)?;
    run.finish(&dir, &cfg)
}

fn eval(c: &Common) -> CliResult<()> {
    let mut run = Run::new("eval");
    let cfg = load_config(c, &mut run)?;
    let dir = out_dir(c)?;
    require(&c.checkpoint, "checkpoint")?;
    let graph = load_graph(c, &cfg, &mut run)?;
    let data = load_data(c, &mut run)?;
    let t = trainer(c, &cfg, graph, &mut run)?;
    let report = t.evaluate(&data)?;
    let mut text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    text.push('\n');
    run.write(&dir.join("eval.json"), text.as_bytes())?;
    println!(
        "{}",
        serde_json::json!({ "n": report.n, "accuracy": report.accuracy, "mean_loss": report.mean_loss, "retrieval_hit_rate": report.retrieval_hit_rate })
    );
    run.finish(&dir, &cfg)
}

fn threads() -> CliResult<usize> {
    match std::env::var("AKGP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Failure { exit: 2, code: "config", message: format!("AKGP_THREADS must be a positive integer, got `{v}`") }),
    }
}

fn ablate(c: &Common) -> CliResult<()> {
    let mut run = Run::new("ablate");
    let cfg = load_config(c, &mut run)?;
    let dir = out_dir(c)?;
    cfg.validate_world()?;
    let data: AblationData = match &c.kg {
        Some(path) => {
            let triples = parse_triples(&run.read(path)?)?;
            let world = World::from_triples(&triples, cfg.d_i, cfg.vocab_size, cfg.world.noise, cfg.seed)?;
            ablation::prepare_from_world(world, &cfg)?
        }
        None => ablation::prepare(&cfg)?,
    };
    let rows = ablation::run_ablation(&data, &cfg, &cfg.ablation.seeds, threads()?)?;
    run.write(&dir.join("ablation.csv"), ablation::to_csv(&rows).as_bytes())?;
    let md = ablation::to_markdown(&rows);
    run.write(&dir.join("ablation.md"), md.as_bytes())?;
    print!("{md}");
    run.finish(&dir, &cfg)
}

fn retrieve(c: &Common, top_k: usize, index: usize) -> CliResult<()> {
    let mut run = Run::new("retrieve");
    let cfg = load_config(c, &mut run)?;
    let graph = load_graph(c, &cfg, &mut run)?;
    let data = load_data(c, &mut run)?;
    let ex = data
        .get(index)
        .ok_or_else(|| Failure::from(Error::InvalidArgument(format!("--example {index} out of range 0..{}", data.len()))))?;
    ex.validate(cfg.d_i, cfg.vocab_size, cfg.n_classes)?;
    let t = trainer(c, &cfg, graph, &mut run)?;
    let k = t.params.knowledge_embeddings(&t.graph)?;
    let m = encode_values(&t.params, ex)?;
    let hits = retrieve_topk(&m, &k, top_k)?;
    let mut lines = String::new();
    for h in &hits {
        let line = serde_json::json!({ "node_id": t.graph.node_ids()[h.node_index], "similarity": h.similarity });
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    print!("{lines}");
    if c.out.is_some() {
        let dir = out_dir(c)?;
        run.write(&dir.join("retrieval.jsonl"), lines.as_bytes())?;
        run.finish(&dir, &cfg)?;
    }
    Ok(())
}

fn encode_values(params: &ModelParams, ex: &Example) -> CliResult<Vec<f64>> {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let m = akgp_core::encoders::encode_example(&tape, ex, &vars.encoders)?;
    let values = tape.value(m).to_vec();
    Ok(values)
}

fn gen_data(c: &Common) -> CliResult<()> {
    let mut run = Run::new("gen-data");
    let cfg = load_config(c, &mut run)?;
    let dir = out_dir(c)?;
    let data = ablation::prepare(&cfg)?;
    run.write(&dir.join("kg.tsv"), serialize_triples(&data.world.triples).as_bytes())?;
    for (name, set) in [("train.jsonl", data.train()), ("test.jsonl", data.test()), ("pretrain.jsonl", data.pretrain.clone())] {
        let path = dir.join(name);
        write_examples(&path, &set).map_err(|e| match e {
            Error::Io(io) => io_at(&path, io),
            other => other.into(),
        })?;
        run.outputs.push(path.display().to_string());
    }
    let graph = build_graph(&data.world.triples, cfg.d_k, mix_seed(cfg.seed, 7))?;
    let stats = serde_json::to_string(&subgraph_stats(&graph)).map_err(Error::from)?;
    println!("{stats}");
    run.write(&dir.join("kg_stats.json"), format!("{stats}\n").as_bytes())?;
    run.finish(&dir, &cfg)
}

#[derive(Serialize)]
struct GradLine<'a> {
    op: &'a str,
    passed: bool,
    checked: usize,
    worst_rel_err: f64,
}

fn check_grads(c: &Common) -> CliResult<()> {
    let mut run = Run::new("check-grads");
    let cfg = match &c.config {
        Some(_) => load_config(c, &mut run)?,
        None => TrainConfig { seed: c.seed.unwrap_or(0), ..TrainConfig::default() },
    };
    let seed = cfg.seed;
    let mut reports = gradsuite::op_suite(seed)?;
    reports.extend(gradsuite::pipeline_suite(seed)?);
    let mut text = String::new();
    for (op, r) in &reports {
        let line = GradLine { op, passed: r.passed, checked: r.checked, worst_rel_err: r.worst_rel_err };
        text.push_str(&serde_json::to_string(&line).map_err(Error::from)?);
        text.push('\n');
    }
    print!("{text}");
    std::io::stdout().flush()?;
    if c.out.is_some() {
        let dir = out_dir(c)?;
        run.write(&dir.join("check_grads.jsonl"), text.as_bytes())?;
        run.finish(&dir, &cfg)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed).map(|(op, _)| *op).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { exit: 3, code: "gradient_check", message: format!("finite differences disagree for {}", failed.join(", ")) })
    }
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Pretrain(c) => train(c, true),
        Command::Finetune(c) => train(c, false),
        Command::Eval(c) => eval(c),
        Command::Ablate(c) => ablate(c),
        Command::Retrieve { common, top_k, example } => retrieve(common, *top_k, *example),
        Command::GenData(c) => gen_data(c),
        Command::CheckGrads(c) => check_grads(c),
    }
}

fn report(f: &Failure) -> ExitCode {
    let line = serde_json::json!({ "code": f.code, "message": f.message });
    eprintln!("{line}");
    ExitCode::from(f.exit)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let message = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
            return report(&Failure::usage(message));
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
