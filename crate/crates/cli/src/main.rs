use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use team_affinity::ingest::write_results_csv;
use team_affinity::pipeline::{
    read_manifest, run_pipeline_until, verify_manifest, Manifest, PipelineConfig, PipelineError, Stage, StageState,
};
use team_affinity::synth::{generate, DgpConfig};

const EXIT_STAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "team-affinity", version, about = "Latent team-task efficiency from race panels")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true, env = "TEAM_AFFINITY_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for the synthetic panel; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log stage progress and warnings (RUST_LOG takes precedence).
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Args, Debug, Default)]
struct InputArgs {
    /// Results CSV; without it a synthetic panel is generated.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Attempts kept per team and event.
    #[arg(long)]
    max_attempts: Option<u32>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, truncate and link results.
    Ingest(InputArgs),
    /// Ingest, then solo-skill fixed effects and the skill transform.
    Fe(InputArgs),
    /// Run through efficiency recovery.
    Estimate(InputArgs),
    /// Run through the production-surface fit.
    Elasticity(InputArgs),
    /// Write a synthetic results file and its ground truth.
    Synth {
        /// Use a large panel with this many teams instead of the configured one.
        #[arg(long)]
        teams: Option<usize>,
    },
    /// Run every stage, or with --check verify an existing output directory.
    Report {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        check: bool,
    },
    /// Run every stage.
    Pipeline(InputArgs),
}

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.into()),
            PipelineError::Stage { .. } => Failure::Stage(e.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.global)?;
    let (last, input) = match cli.command {
        Command::Synth { teams } => return synth(&cfg, teams),
        Command::Report { check: true, .. } => return check(&cfg),
        Command::Ingest(a) => (Stage::Ingest, a),
        Command::Fe(a) => (Stage::Transform, a),
        Command::Estimate(a) => (Stage::Estimate, a),
        Command::Elasticity(a) => (Stage::Elasticity, a),
        Command::Report { input, .. } | Command::Pipeline(input) => (Stage::Report, input),
    };
    if let Some(path) = input.input {
        cfg.ingest.input = Some(path);
    }
    if let Some(n) = input.max_attempts {
        cfg.ingest.max_attempts = n;
    }
    let result = run_pipeline_until(&cfg, last);
    // a failed stage still leaves a manifest behind
    if !matches!(result, Err(PipelineError::Config(_))) {
        if let Ok(m) = read_manifest(&out_dir(&cfg)) {
            print_manifest(&m);
        }
    }
    let out = result?;
    println!("wrote {}", out.out_dir.display());
    Ok(())
}

fn load_config(g: &Global) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::from_path(path)?,
        None => PipelineConfig::default(),
    };
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn print_manifest(m: &Manifest) {
    for s in &m.stages {
        let n = m.artifacts.iter().filter(|a| a.stage == s.stage).count();
        let status = match s.status {
            StageState::Ok => "ok",
            StageState::Failed => "failed",
            StageState::Skipped => "skipped",
        };
        match &s.error {
            Some(e) => println!("{:<11} {status}: {e}", s.stage.as_str()),
            None => println!("{:<11} {status} ({n} artifacts, {} warnings)", s.stage.as_str(), s.warnings.len()),
        }
    }
}

fn synth(cfg: &PipelineConfig, teams: Option<usize>) -> Result<(), Failure> {
    let mut dgp = match teams {
        Some(n) => DgpConfig { seed: cfg.dgp().seed, ..DgpConfig::large(n) },
        None => cfg.dgp(),
    };
    if let Some(seed) = cfg.seed {
        dgp.seed = seed;
    }
    dgp.validate().map_err(|e| Failure::Config(e.into()))?;
    let data = generate(&dgp).map_err(|e| Failure::Stage(e.into()))?;
    let dir = out_dir(cfg);
    let write = || -> anyhow::Result<()> {
        fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
        write_results_csv(&data.runs, create(&dir.join("results.csv"))?)?;
        data.truth.write_jsonl(create(&dir.join("truth.jsonl"))?)?;
        Ok(())
    };
    write().map_err(Failure::Stage)?;
    println!("wrote {} runs to {}", data.runs.len(), dir.join("results.csv").display());
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| path.display().to_string())?))
}

fn check(cfg: &PipelineConfig) -> Result<(), Failure> {
    let dir = out_dir(cfg);
    let manifest = read_manifest(&dir).map_err(|e| Failure::Stage(anyhow::anyhow!(e)))?;
    print_manifest(&manifest);
    let problems = verify_manifest(&dir, &manifest);
    for p in &problems {
        eprintln!("{p}");
    }
    if !manifest.complete || !problems.is_empty() {
        return Err(Failure::Stage(anyhow::anyhow!("{} is incomplete or altered", dir.display())));
    }
    println!("{} artifacts verified", manifest.artifacts.len());
    Ok(())
}
