//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use vprm_core::engine::{parse_trace_inputs, Engine, EngineConfig};
use vprm_core::group::{Algo, OptimConfig};
use vprm_core::metrics::CoherenceMode;
use vprm_core::reward::RewardVariant;
use vprm_core::rules::DEFAULT_TRUTH_TABLE_BOUND;
use vprm_core::schema::BiasDomain;
use vprm_core::sim::{
    generate_instances, init_policy, train, InitMode, TrainConfig, DEFAULT_LEARNING_RATE,
};
use vprm_core::theorem::{dapo_scaling_check, RewardLaw, RewardLawSpec};
use vprm_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "vprm",
    version,
    about = "Verifiable process reward engine for risk-of-bias traces"
)]
pub struct Cli {
    /// Engine configuration (JSON).
    #[arg(long, global = true, env = "VPRM_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score traces against gold records; writes JSONL.
    Score(ScoreArgs),
    /// Dataset-level metrics for a set of traces.
    Metrics(MetricsArgs),
    /// Train the tabular policy simulator; writes one JSONL record per iteration.
    Simulate(SimulateArgs),
    /// Monte Carlo check of the advantage sign separation.
    VerifyTheorem(TheoremArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Load and check the configuration, schema and rule tables.
    ValidateConfig,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Gold records (JSONL). Defaults to the dataset named in the config.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Traces as JSONL objects `{"id": ..., "trace": ...}`.
    #[arg(long)]
    pub traces: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Write results here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OutputFormat {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Strict,
    Lenient,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutputFormat,
    /// Overrides the configured coherence mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgoArg {
    Grpo,
    Dapo,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Full,
    StepsOnly,
    OutcomeOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Uniform,
    Random,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "A")]
    pub domain: String,
    #[arg(long, value_enum, default_value = "grpo")]
    pub algo: AlgoArg,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: VariantArg,
    /// Leave the outcome reward out of the total.
    #[arg(long)]
    pub no_outcome: bool,
    #[arg(long, default_value_t = 16)]
    pub group_size: usize,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub instances: usize,
    /// KL coefficient; the configured value when omitted.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    pub init: InitArg,
    /// Write the per-iteration log here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoremArgs {
    /// Reward-law spec as JSON; overrides the point-mass flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu_c: f64,
    #[arg(long, default_value_t = 0.0)]
    pub mu_i: f64,
    #[arg(long = "group-size", default_value_t = 1024)]
    pub g: usize,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Per-token advantage scale.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; the configured one when omitted.
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn load_config(path: Option<&Path>) -> Result<EngineConfig, CliError> {
    match path {
        None => Ok(EngineConfig::default()),
        Some(p) => EngineConfig::load(p).map_err(|e| match e {
            Error::Io(io) => {
                CliError::Validation(format!("cannot read config {}: {io}", p.display()))
            }
            other => other.into(),
        }),
    }
}

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))
}

fn engine_for(config: EngineConfig, records: Option<&Path>) -> Result<Engine, CliError> {
    match records {
        None => Ok(Engine::new(config)?),
        Some(p) => {
            let engine = Engine::new(config.clone())?;
            let text = read_input(p)?;
            let loaded = vprm_core::dataset::parse_dataset(&text, engine.schema(), true)?;
            Ok(Engine::with_records(config, loaded.records)?)
        }
    }
}

fn scoring_engine(config: EngineConfig, input: &InputArgs) -> Result<(Engine, String), CliError> {
    let engine = engine_for(config, input.records.as_deref())?;
    if engine.records().next().is_none() {
        return Err(CliError::Validation(
            "no gold records: pass --records or set `dataset` in the config".into(),
        ));
    }
    Ok((engine, read_input(&input.traces)?))
}

fn write_out(out: Option<&Path>, stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Runs a parsed command, writing results to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Score(args) => {
            let (engine, traces) = scoring_engine(load_config(config_path)?, &args.input)?;
            let output = engine.score_batch(&parse_trace_inputs(&traces)?)?;
            write_out(args.out.as_deref(), stdout, &output.to_jsonl())
        }
        Command::Metrics(args) => {
            let mut config = load_config(config_path)?;
            match args.mode {
                Some(ModeArg::Strict) => config.coherence_mode = CoherenceMode::Strict,
                Some(ModeArg::Lenient) => config.coherence_mode = CoherenceMode::Lenient,
                None => {}
            }
            let (engine, traces) = scoring_engine(config, &args.input)?;
            let output = engine.score_batch(&parse_trace_inputs(&traces)?)?;
            if output.summary.failed > 0 {
                tracing::warn!(
                    failed = output.summary.failed,
                    "traces without a gold record were skipped"
                );
            }
            let report = output
                .summary
                .summary
                .ok_or_else(|| CliError::Validation("no trace matched a gold record".into()))?;
            let text = match args.format {
                OutputFormat::Json => {
                    serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
                }
                OutputFormat::Text => report.to_table(),
            };
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
        Command::Simulate(args) => simulate(config_path, args, stdout),
        Command::VerifyTheorem(args) => verify_theorem(args, stdout),
        Command::Serve(args) => {
            let config = load_config(config_path)?;
            let bind = args.bind.unwrap_or_else(|| config.bind.clone());
            let engine = Engine::new(config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::http::serve(engine, &bind))?;
            Ok(())
        }
        Command::ValidateConfig => {
            let config = load_config(config_path)?;
            let engine = Engine::new(config)?;
            let mut rows = 0u128;
            for d in BiasDomain::ALL {
                rows += engine
                    .rules()
                    .table(d)
                    .enumerate_truth_table(DEFAULT_TRUTH_TABLE_BOUND)?
                    .len() as u128;
            }
            writeln!(
                stdout,
                "ok: schema {}, rules {}, {} records, {rows} truth-table rows, config hash {}",
                engine.schema().version(),
                engine.rules().version(),
                engine.records().count(),
                engine.config_hash()
            )?;
            Ok(())
        }
    }
}

fn simulate(
    config_path: Option<&Path>,
    args: SimulateArgs,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let engine = Engine::new(config.clone())?;
    let domain: BiasDomain = args.domain.parse()?;
    let mut optim = OptimConfig {
        algo: match args.algo {
            AlgoArg::Grpo => Algo::Grpo,
            AlgoArg::Dapo => Algo::Dapo,
        },
        ..config.optim.clone()
    };
    if let Some(b) = args.beta {
        optim.beta = b;
    }
    let variant = match args.variant {
        VariantArg::Full => RewardVariant::Full,
        VariantArg::StepsOnly => RewardVariant::StepsOnly,
        VariantArg::OutcomeOnly => RewardVariant::OutcomeOnly,
    };
    let train_config = TrainConfig {
        optim,
        reward: config.reward.clone().with_mode(variant, !args.no_outcome),
        group_size: args.group_size,
        iterations: args.iterations,
        learning_rate: args.lr,
        inner_epochs: args.epochs,
        seed: args.seed,
    };
    let data = generate_instances(domain, args.instances, args.seed, engine.rules())?;
    let init = init_policy(
        domain,
        args.seed,
        match args.init {
            InitArg::Uniform => InitMode::Uniform,
            InitArg::Random => InitMode::Random,
        },
    );
    let run = train(&init, &data, &train_config, engine.rules())?;
    let mut text = run.log.to_jsonl();
    text.push_str(
        &serde_json::to_string(&serde_json::json!({ "summary": run.log.summary() }))
            .expect("summary serializes"),
    );
    text.push('\n');
    write_out(args.out.as_deref(), stdout, &text)
}

fn verify_theorem(args: TheoremArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let spec = match &args.spec {
        Some(p) => {
            let spec: RewardLawSpec = serde_json::from_str(&read_input(p)?).map_err(Error::from)?;
            spec.validate()?;
            spec
        }
        None => RewardLawSpec::new(
            args.p,
            RewardLaw::PointMass { value: args.mu_c },
            RewardLaw::PointMass { value: args.mu_i },
        )?,
    };
    let r = dapo_scaling_check(&spec, args.scale, args.g, args.trials, args.seed)?;
    match args.format {
        OutputFormat::Json => {
            writeln!(
                stdout,
                "{}",
                serde_json::to_string_pretty(&r).expect("result serializes")
            )?;
        }
        OutputFormat::Text => {
            writeln!(stdout, "group size       {}", r.g)?;
            writeln!(
                stdout,
                "trials           {} ({} with zero variance)",
                r.trials, r.zero_variance_trials
            )?;
            writeln!(
                stdout,
                "E[A | correct]   analytic {:+.5}  empirical {:+.5} ± {:.5}",
                r.analytic_pos, r.empirical_pos, r.ci_halfwidth_pos
            )?;
            writeln!(
                stdout,
                "E[A | incorrect] analytic {:+.5}  empirical {:+.5} ± {:.5}",
                r.analytic_neg, r.empirical_neg, r.ci_halfwidth_neg
            )?;
            writeln!(
                stdout,
                "sign separation  {}",
                if r.signs_separate() { "holds" } else { "FAILS" }
            )?;
            writeln!(
                stdout,
                "{}",
                serde_json::to_string(&r).expect("result serializes")
            )?;
        }
    }
    Ok(())
}
