use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use boxqa::dataset::{Dataset, Split};
use boxqa::encoder::ParameterStore;
use boxqa::eval::{self, EvalMode, EvalOptions, ReportFormat};
use boxqa::manifest::git_hash;
use boxqa::sampler::{generate_dataset, EdgeSplit};
use boxqa::trainer::{self, TrainState};
use boxqa::{KnowledgeGraph, RunConfig, Template};

#[derive(Parser)]
#[command(
    name = "boxqa",
    version,
    about = "Box-embedding query answering pipeline"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    #[arg(long, global = true)]
    types: Option<PathBuf>,
    #[arg(long, global = true)]
    format: Option<String>,
    /// Run directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print entity, type, edge and relation counts
    Stats {
        #[arg(long)]
        json: bool,
    },
    /// Mark a fraction of edges as removed
    Split,
    /// Sample train/val/test query datasets
    Sample,
    /// Train the encoder and entity boxes
    Train {
        /// Continue from the last checkpoint in the run directory
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "both")]
        mode: String,
        /// Rank answers against every non-answer
        #[arg(long)]
        full_universe: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize evaluation reports
    Report {
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the report in this format (json or csv)
        #[arg(long)]
        emit: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Stats { .. } => "stats",
            Command::Split => "split",
            Command::Sample => "sample",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }
}

fn build_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    if let Some(g) = &c.graph {
        cfg.graph_path = Some(g.clone());
    }
    if let Some(t) = &c.types {
        cfg.types_path = Some(t.clone());
    }
    if let Some(f) = &c.format {
        cfg.set("format", f)?;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    Ok(cfg)
}

fn check(violations: Vec<String>) -> Result<()> {
    if violations.is_empty() {
        return Ok(());
    }
    bail!(
        "invalid configuration:\n{}",
        violations
            .iter()
            .map(|v| format!("  - {v}"))
            .collect::<Vec<_>>()
            .join("\n")
    )
}

fn load_graph(cfg: &RunConfig) -> Result<KnowledgeGraph> {
    let path = cfg.graph_path.as_ref().context("missing key graph_path")?;
    let (kg, warnings) =
        KnowledgeGraph::load(path, cfg.types_path.as_deref(), cfg.graph_format()?)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(kg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().context("missing key out_dir")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(git_hash(&bytes))
}

/// Records config, seeds and content hashes of inputs and outputs for one
/// subcommand in `run_manifest.json`.
fn record(cfg: &RunConfig, dir: &Path, command: &str, outputs: &[PathBuf]) -> Result<()> {
    let path = dir.join("run_manifest.json");
    let mut manifest: BTreeMap<String, Value> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => BTreeMap::new(),
    };
    let mut inputs = BTreeMap::new();
    for p in cfg.graph_path.iter().chain(&cfg.types_path) {
        inputs.insert(p.display().to_string(), hash_file(p)?);
    }
    let mut outs = BTreeMap::new();
    for p in outputs {
        let name = p.strip_prefix(dir).unwrap_or(p).display().to_string();
        outs.insert(name, hash_file(p)?);
    }
    manifest.insert("config".into(), serde_json::to_value(cfg)?);
    manifest.insert("seed".into(), json!(cfg.seed));
    manifest.insert("inputs".into(), json!(inputs));
    let commands = manifest
        .entry("commands".into())
        .or_insert_with(|| json!({}));
    commands[command] = json!({ "outputs": outs });
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn stats(cfg: &RunConfig, as_json: bool) -> Result<()> {
    match &cfg.graph_path {
        None => bail!("missing key graph_path"),
        Some(p) if !p.exists() => bail!("graph_path {} does not exist", p.display()),
        _ => {}
    }
    let kg = load_graph(cfg)?;
    let s = kg.stats();
    if as_json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        println!("entities        {}", s.entities);
        println!("entity types    {}", s.entity_types);
        println!("untyped         {}", s.untyped_entities);
        println!("edges           {}", s.edges);
        println!("relation types  {}", s.relation_types);
    }
    Ok(())
}

fn split_path(dir: &Path) -> PathBuf {
    dir.join("split.json")
}

fn do_split(cfg: &RunConfig, kg: &KnowledgeGraph, dir: &Path) -> Result<EdgeSplit> {
    let split = EdgeSplit::new(kg, cfg.split_fraction, cfg.seed()?)?;
    let path = split_path(dir);
    split.write(&path, kg)?;
    println!(
        "marked {} of {} edges as removed -> {}",
        split.num_removed(),
        split.num_edges(),
        path.display()
    );
    record(cfg, dir, "split", &[path])?;
    Ok(split)
}

fn sample(cfg: &RunConfig, kg: &KnowledgeGraph, dir: &Path) -> Result<()> {
    let path = split_path(dir);
    let split = if path.exists() {
        EdgeSplit::read(&path, kg)?
    } else {
        do_split(cfg, kg, dir)?
    };
    let data = generate_dataset(kg, &split, &cfg.sampler_config()?)?;
    let ddir = dir.join("dataset");
    data.write(&ddir, kg)?;
    println!(
        "{:<14} {:>6} {:>6} {:>6}  mean |T'| (train)",
        "template", "train", "val", "test"
    );
    for (t, s) in &data.manifest.templates {
        let c = |sp| s.counts.get(&sp).copied().unwrap_or(0);
        println!(
            "{:<14} {:>6} {:>6} {:>6}  {:.1}",
            t.name(),
            c(Split::Train),
            c(Split::Val),
            c(Split::Test),
            s.mean_targets.get(&Split::Train).copied().unwrap_or(0.0)
        );
    }
    let outputs: Vec<PathBuf> = ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"]
        .iter()
        .map(|f| ddir.join(f))
        .collect();
    record(cfg, dir, "sample", &outputs)
}

fn train(cfg: &RunConfig, kg: &KnowledgeGraph, dir: &Path, resume: bool) -> Result<()> {
    let data = Dataset::read(&dir.join("dataset"), kg)?;
    let tcfg = cfg.train_config()?;
    let cdir = dir.join("checkpoints");
    fs::create_dir_all(&cdir)?;
    let last = cdir.join("last.json");
    let state = if resume {
        trainer::load_checkpoint(&last, cfg.dim, cfg.layers)?
    } else {
        TrainState::new(
            ParameterStore::init(kg, cfg.dim, cfg.layers, cfg.seed()?)?,
            tcfg.lr,
        )
    };
    let out = trainer::train(kg, &data, state, &tcfg)?;
    trainer::save_checkpoint(&out.state, &last)?;
    let best = cdir.join("best.json");
    let mut best_state = out.state.clone();
    best_state.store = out.best.clone();
    trainer::save_checkpoint(&best_state, &best)?;
    let log = dir.join("train_log.csv");
    let mut text = trainer::log_csv(&out.log);
    if resume {
        if let Ok(old) = fs::read_to_string(&log) {
            text = old + text.split_once('\n').map(|(_, rows)| rows).unwrap_or("");
        }
    }
    fs::write(&log, text)?;
    println!(
        "stopped at step {} ({:?}); best validation pairwise accuracy {} at step {}",
        out.state.step,
        out.stop,
        out.state
            .best_score
            .map(|s| format!("{s:.2}%"))
            .unwrap_or_else(|| "n/a".into()),
        out.state.best_step
    );
    record(cfg, dir, "train", &[last, best, log])
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .with_context(|| format!("unknown split {s:?} (expected train, val or test)"))
}

fn evaluate(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    dir: &Path,
    split: &str,
    mode: &str,
    full_universe: bool,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let split = parse_split(split)?;
    let mode: EvalMode = mode.parse()?;
    let ddir = dir.join("dataset");
    let data = Dataset::read(&ddir, kg)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("checkpoints").join("best.json"));
    let store = trainer::load_store(&ckpt)?;
    let opts = EvalOptions {
        mode,
        alpha: cfg.alpha,
        full_universe,
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let report = eval::evaluate(
        &store,
        data.split(split),
        &cfg.encoder_config(),
        &opts,
        &hash_file(&ddir.join("manifest.json"))?,
    )?;
    let rdir = dir.join("reports");
    fs::create_dir_all(&rdir)?;
    let json_path = rdir.join(format!("eval_{split}.json"));
    let csv_path = rdir.join(format!("eval_{split}.csv"));
    eval::write_report(&report, &json_path, ReportFormat::Json)?;
    eval::write_report(&report, &csv_path, ReportFormat::Csv)?;
    print_report(&report);
    record(cfg, dir, &format!("eval_{split}"), &[json_path, csv_path])
}

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    v.map(|x| format!("{:.2}", x * scale))
        .unwrap_or_else(|| "-".into())
}

fn print_report(r: &eval::EvalReport) {
    println!(
        "{:<14} {:>7} {:>9} {:>9} {:>9} {:>9}",
        "template", "queries", "precision", "recall", "f1", "pairwise"
    );
    for row in &r.rows {
        println!(
            "{:<14} {:>7} {:>9} {:>9} {:>9} {:>9}",
            row.template.name(),
            row.queries,
            fmt_opt(row.precision, 100.0),
            fmt_opt(row.recall, 100.0),
            fmt_opt(row.f1, 100.0),
            fmt_opt(row.pairwise_accuracy, 1.0)
        );
    }
}

fn report(dir: &Path, split: &str, emit: Option<&str>) -> Result<()> {
    let split = parse_split(split)?;
    let path = dir.join("reports").join(format!("eval_{split}.json"));
    let r = eval::read_report(&path)?;
    println!(
        "aggregation {} on {split} (dataset {})",
        r.aggregation, r.dataset_hash
    );
    print_report(&r);
    let all: Vec<Template> = Template::ALL.to_vec();
    if let Some(p) = r.pooled_pairwise(&all) {
        println!("pooled pairwise accuracy {p:.2}%");
    }
    if let Some(f) = emit {
        let f: ReportFormat = f.parse()?;
        let out = dir.join("reports").join(format!("report_{split}.{f}"));
        eval::write_report(&r, &out, f)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.common)?;
    if let Command::Stats { json } = cli.command {
        return stats(&cfg, json);
    }
    if let Command::Report { split, emit } = &cli.command {
        return report(&out_dir(&cfg)?, split, emit.as_deref());
    }
    let mut violations = cfg.validate();
    if cfg.out_dir.is_none() {
        violations.push("missing key out_dir".into());
    }
    check(violations)?;
    let kg = load_graph(&cfg)?;
    let dir = out_dir(&cfg)?;
    match &cli.command {
        Command::Split => do_split(&cfg, &kg, &dir).map(|_| ()),
        Command::Sample => sample(&cfg, &kg, &dir),
        Command::Train { resume } => train(&cfg, &kg, &dir, *resume),
        Command::Eval {
            split,
            mode,
            full_universe,
            checkpoint,
        } => evaluate(
            &cfg,
            &kg,
            &dir,
            split,
            mode,
            *full_universe,
            checkpoint.as_deref(),
        ),
        Command::Stats { .. } | Command::Report { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
