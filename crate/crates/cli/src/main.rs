use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use selftrain::classifier::SoftmaxModel;
use selftrain::data::{load_dataset, synthetic_vocabulary, DataFormat, SyntheticCorpus};
use selftrain::engine::evaluate;
use selftrain::experiment::{
    exit_code, run_llm, run_selftrain, run_train, ExperimentConfig, ExperimentError, LlmConfig, RunResult,
    SeedTree,
};
use selftrain::llm::{HttpChatClient, LlmClient, LlmMode, MockClient};
use selftrain::metrics::{summarize, Summary};
use selftrain::sweep::{
    experiment_cell, load_table, render_report, run_sweep, SweepAxis, SweepSpec, SweepTable,
};

#[derive(Parser)]
#[command(name = "selftrain", version, about = "Self-training and LLM-assisted pseudo-labeling for few-shot text classification")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised baseline on the n-shot labeled set.
    Train,
    /// Self-training from the n-shot labeled set.
    Selftrain,
    /// LLM labeling (sub, obj, obj-conf, obj-conf-score).
    LlmLabel(LlmArgs),
    /// Score a saved model on a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Sweep one parameter over a grid and seeds.
    Sweep(SweepArgs),
    /// Re-render report files from a sweep.json.
    Report(ReportArgs),
    /// Write a synthetic labeled corpus as JSONL.
    Synth(SynthArgs),
}

#[derive(Args)]
struct LlmArgs {
    #[arg(long)]
    mode: Option<LlmMode>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Few-shot examples per class in the prompt.
    #[arg(long)]
    n_shot: Option<usize>,
    #[arg(long, conflicts_with = "endpoint")]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    format: Option<DataFormat>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated grid; defaults to the axis's standard grid.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Comma-separated seeds; defaults to the config's seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct ReportArgs {
    /// A sweep.json written by `sweep`.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Instances per class, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![200usize, 200, 200])]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    words_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    zipf: f64,
}

#[derive(Debug)]
enum CliError {
    Experiment(ExperimentError),
    Config(String),
    Data(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Experiment(e) => exit_code(e) as u8,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Io(_) => 6,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Experiment(e) => write!(f, "{e}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Experiment(e)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn read_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::read(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let cfg = read_config(cli)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn make_client(cfg: &ExperimentConfig) -> Result<Box<dyn LlmClient>, ExperimentError> {
    let llm = cfg
        .llm
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("no [llm] block".into()))?;
    if let Some(f) = &llm.fixtures {
        let m = MockClient::from_path(f).map_err(|e| ExperimentError::Config(e.to_string()))?;
        return Ok(Box::new(m));
    }
    let http = HttpChatClient::new(&llm.client).map_err(ExperimentError::Config)?;
    Ok(Box::new(http))
}

#[derive(Serialize)]
struct AggregateDoc {
    seeds: Vec<u64>,
    macro_f1: Option<Summary>,
    accuracy: Option<Summary>,
    labeling_accuracy: Option<Summary>,
    num_added: Option<Summary>,
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, r: &RunResult) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut resolved = cfg.clone();
    resolved.seeds = vec![r.seeds.root];
    write(&dir.join("config.toml"), resolved.to_toml())?;
    write(&dir.join("seeds.json"), to_json(&r.seeds))?;
    write(&dir.join("metrics.json"), to_json(&r.metrics))?;
    let model = dir.join("model.json");
    r.model.save(&model).map_err(|e| CliError::Io(format!("{}: {e}", model.display())))?;
    if r.stop_reason.is_some() {
        let lines: String = r
            .history
            .iter()
            .map(|h| serde_json::to_string(h).expect("serializable") + "\n")
            .collect();
        write(&dir.join("history.jsonl"), lines)?;
    }
    if let Some(records) = &r.records {
        write(&dir.join("records.jsonl"), records.to_jsonl())?;
    }
    Ok(())
}

fn run_seeds<F>(cli: &Cli, cfg: &ExperimentConfig, run: F) -> Result<(), CliError>
where
    F: Fn(SeedTree) -> Result<RunResult, ExperimentError>,
{
    let out = out_dir(cli, Some(cfg));
    let mut results = Vec::new();
    for &s in &cfg.seeds {
        let seeds = SeedTree::new(s);
        log::info!("seed {s}: derived seeds {seeds:?}");
        let r = run(seeds)?;
        write_run(&out.join(format!("seed-{s}")), cfg, &r)?;
        println!(
            "seed {s}: macro_f1 {:.4} accuracy {:.4}{}",
            r.metrics.macro_f1,
            r.metrics.accuracy,
            r.stop_reason.map(|s| format!(" stop {s:?}")).unwrap_or_default()
        );
        results.push(r);
    }
    let col = |f: &dyn Fn(&RunResult) -> Option<f64>| summarize(&results.iter().filter_map(f).collect::<Vec<_>>());
    let agg = AggregateDoc {
        seeds: cfg.seeds.clone(),
        macro_f1: col(&|r| Some(r.metrics.macro_f1)),
        accuracy: col(&|r| Some(r.metrics.accuracy)),
        labeling_accuracy: col(&|r| r.metrics.labeling_accuracy),
        num_added: col(&|r| Some(r.num_added as f64)),
    };
    if let Some(m) = &agg.macro_f1 {
        println!(
            "mean macro_f1 {:.4}{} over {} seeds",
            m.mean,
            m.ci95.map(|c| format!(" ± {c:.4}")).unwrap_or_default(),
            m.n
        );
    }
    write(&out.join("aggregate.json"), to_json(&agg))
}

fn cmd_llm(cli: &Cli, args: &LlmArgs) -> Result<(), CliError> {
    let mut cfg = read_config(cli)?;
    let mut llm = cfg.llm.take().unwrap_or_else(|| LlmConfig {
        fixtures: None,
        ..Default::default()
    });
    if let Some(m) = args.mode {
        llm.mode = m;
    }
    if args.threshold.is_some() {
        llm.threshold = args.threshold;
    }
    if let Some(n) = args.n_shot {
        llm.n_shot = n;
    }
    if let Some(f) = &args.fixtures {
        llm.fixtures = Some(f.clone());
        llm.client.endpoint = None;
    }
    if let Some(e) = &args.endpoint {
        llm.client.endpoint = Some(e.clone());
        llm.fixtures = None;
    }
    cfg.llm = Some(llm);
    cfg.validate()?;
    run_seeds(cli, &cfg, |seeds| {
        let client = make_client(&cfg)?;
        run_llm(&cfg, seeds, &client)
    })
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<(), CliError> {
    let class_names = match &cli.config {
        Some(_) => load_config(cli)?.data.class_names,
        None => selftrain::data::default_class_names(),
    };
    let model = SoftmaxModel::load(&args.model).map_err(|e| CliError::Config(format!("{}: {e}", args.model.display())))?;
    if !args.data.is_file() {
        return Err(CliError::Config(format!("dataset file not found: {}", args.data.display())));
    }
    let format = args.format.unwrap_or_else(|| DataFormat::from_path(&args.data));
    let data = load_dataset(&args.data, format, &class_names).map_err(|e| CliError::Data(e.to_string()))?;
    let report = evaluate(&model, &data).map_err(|e| CliError::Experiment(e.into()))?;
    let out = out_dir(cli, None);
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    write(&out.join("metrics.json"), to_json(&report))?;
    println!("macro_f1 {:.4} accuracy {:.4} n {}", report.macro_f1, report.accuracy, report.n);
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let spec = SweepSpec {
        axis: args.axis,
        grid: args.grid.clone().unwrap_or_else(|| args.axis.default_grid()),
        seeds: args.seeds.clone().unwrap_or_else(|| cfg.seeds.clone()),
    };
    let rows = run_sweep(&spec, |cell| {
        experiment_cell(&cfg, cell, make_client).map_err(|e| e.to_string())
    })
    .map_err(|e| CliError::Config(e.to_string()))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let table = SweepTable { axis: spec.axis, rows };
    let out = out_dir(cli, Some(&cfg));
    render_report(&table, &out).map_err(io_err(&out))?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    println!(
        "{} cells ({failed} failed) written to {}",
        table.rows.len(),
        out.display()
    );
    Ok(())
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<(), CliError> {
    let table = load_table(&args.input).map_err(CliError::Data)?;
    let out = out_dir(cli, None);
    render_report(&table, &out).map_err(io_err(&out))?;
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<(), CliError> {
    let corpus = SyntheticCorpus::new(synthetic_vocabulary(args.counts.len(), args.words_per_class), args.noise)
        .with_zipf(args.zipf);
    let ds = corpus
        .generate(&args.counts, cli.seed.unwrap_or(0))
        .map_err(|e| CliError::Data(e.to_string()))?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("synthetic.jsonl"));
    write(&out, ds.to_jsonl())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            run_seeds(cli, &cfg, |s| run_train(&cfg, s))
        }
        Command::Selftrain => {
            let cfg = load_config(cli)?;
            run_seeds(cli, &cfg, |s| run_selftrain(&cfg, s))
        }
        Command::LlmLabel(a) => cmd_llm(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Report(a) => cmd_report(cli, a),
        Command::Synth(a) => cmd_synth(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
