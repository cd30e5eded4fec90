use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use specvid::calibration::{fit_calibration, Calibration, FitOptions};
use specvid::engine::{run_video_detailed, RunOptions};
use specvid::router::{AggregationMode, Policy};
use specvid::sweep::{run_sweep, SweepSpec};
use specvid::synth::SyntheticFamily;
use specvid::table::ReferenceTable;
use specvid::traceio::{export_trace, replay, serialize_trace, ReplayOptions, ReplayReport, TraceReader};
use specvid::{default_config, Error, ErrorKind, GenerationConfig, PromptSpec};

const EXIT_IO: u8 = 1;
const EXIT_PARSE: u8 = 3;
const EXIT_VALIDATION: u8 = 4;
const EXIT_CALIBRATION: u8 = 5;
const EXIT_PARETO: u8 = 6;
const EXIT_INTERNAL: u8 = 70;

#[derive(Parser)]
#[command(name = "specvid", version, about = "Speculative block routing for autoregressive video: calibrate, simulate, sweep, replay")]
struct Cli {
    /// More diagnostics on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a calibration from a reference table and print the residual report.
    Fit(FitArgs),
    /// Run one prompt through the synthetic pipeline.
    Simulate(SimulateArgs),
    /// Threshold sweep with both baselines. Exits 6 if the Pareto check fails.
    Sweep(SweepArgs),
    /// Aggregation and routing-signal ablation arms.
    Ablate(AblateArgs),
    /// Counterfactual routing over a recorded JSONL trace.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct CalibrationArg {
    /// Calibration file; the bundled reference table is fitted when absent.
    #[arg(long, env = "SPECVID_CALIBRATION")]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArg {
    /// Generation config (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of blocks per video.
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Threshold,
    Random,
    AlwaysAccept,
    AlwaysReject,
}

#[derive(Clone, Copy, ValueEnum)]
enum Aggregation {
    Min,
    Mean,
}

impl From<Aggregation> for AggregationMode {
    fn from(a: Aggregation) -> Self {
        match a {
            Aggregation::Min => AggregationMode::MinFrame,
            Aggregation::Mean => AggregationMode::MeanFrame,
        }
    }
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, value_enum, default_value = "threshold")]
    policy: PolicyKind,
    /// Acceptance threshold (accept iff score >= tau).
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Accept probability for the random policy.
    #[arg(long)]
    rate: Option<f64>,
    /// Always regenerate block 0 with the target (default for threshold).
    #[arg(long, overrides_with = "no_force_reject_first")]
    force_reject_first: bool,
    /// Let block 0 be routed like any other (default for random).
    #[arg(long, overrides_with = "force_reject_first")]
    no_force_reject_first: bool,
    #[arg(long, value_enum, default_value = "min")]
    aggregation: Aggregation,
}

#[derive(Args)]
struct SeedArg {
    /// Master seed; mandatory when the CI environment variable is set.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    /// Reference table (TOML); the bundled table when absent.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Where to write the calibration (TOML); stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also write the residual report as JSON.
    #[arg(long)]
    report_json: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    calibration: CalibrationArg,
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value = "prompt-0000")]
    prompt_id: String,
    /// Run summary (JSON); stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also export the run as a JSONL trace (scores forced blocks too).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    calibration: CalibrationArg,
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    seed: SeedArg,
    /// Thresholds; the calibration's reference thresholds when absent.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    taus: Vec<f64>,
    /// Prompts per arm.
    #[arg(long = "n", alias = "num-prompts", default_value_t = 1003)]
    n: usize,
    /// Worker thread cap.
    #[arg(long)]
    jobs: Option<usize>,
    /// CSV output; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// JSON report output.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    calibration: CalibrationArg,
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    seed: SeedArg,
    /// Threshold of the default min-frame arm.
    #[arg(long, allow_negative_numbers = true, default_value_t = -0.7)]
    tau: f64,
    /// Prompts per arm.
    #[arg(long = "n", alias = "num-prompts", default_value_t = 1003)]
    n: usize,
    /// Worker thread cap.
    #[arg(long)]
    jobs: Option<usize>,
    /// CSV output; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// JSON report output.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// JSONL trace file.
    trace: PathBuf,
    #[command(flatten)]
    calibration: CalibrationArg,
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    seed: SeedArg,
    /// Report (JSON); stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

struct CliError {
    code: u8,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Io => EXIT_IO,
            ErrorKind::Parse => EXIT_PARSE,
            ErrorKind::Validation => EXIT_VALIDATION,
            ErrorKind::Calibration => EXIT_CALIBRATION,
            ErrorKind::Internal => EXIT_INTERNAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn validation(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_VALIDATION,
        message: message.into(),
    }
}

fn ci_mode() -> bool {
    std::env::var("CI").is_ok_and(|v| !v.is_empty() && v != "0" && v != "false")
}

fn resolve_seed(arg: &SeedArg, default: u64) -> CliResult<u64> {
    match arg.seed {
        Some(s) => Ok(s),
        None if ci_mode() => Err(validation("--seed is required when CI is set")),
        None => Ok(default),
    }
}

fn load_calibration(arg: &CalibrationArg) -> CliResult<Calibration> {
    match &arg.calibration {
        Some(p) => {
            info!("calibration: {}", p.display());
            Ok(Calibration::load(p)?)
        }
        None => {
            info!("calibration: fitting bundled reference table");
            Ok(Calibration::bundled()?)
        }
    }
}

fn load_config(arg: &ConfigArg) -> CliResult<GenerationConfig> {
    let mut c = match &arg.config {
        Some(p) => GenerationConfig::load(p)?,
        None => default_config(),
    };
    if let Some(b) = arg.blocks {
        c.num_blocks = b;
    }
    c.validate()?;
    Ok(c)
}

fn build_policy(args: &PolicyArgs, default_tau: f64, seed: u64) -> CliResult<Policy> {
    let force = |default: bool| {
        if args.force_reject_first {
            true
        } else if args.no_force_reject_first {
            false
        } else {
            default
        }
    };
    let p = match args.policy {
        PolicyKind::Threshold => Policy::Threshold {
            tau: args.tau.unwrap_or(default_tau),
            force_reject_block0: force(true),
        },
        PolicyKind::Random => Policy::Random {
            accept_prob: args.rate.ok_or_else(|| validation("--policy random needs --rate"))?,
            force_reject_block0: force(false),
            rng_seed: seed,
        },
        PolicyKind::AlwaysAccept => Policy::AlwaysAccept,
        PolicyKind::AlwaysReject => Policy::AlwaysReject,
    };
    p.validate()?;
    Ok(p)
}

fn write_output(path: Option<&Path>, content: &str) -> CliResult {
    match path {
        Some(p) => std::fs::write(p, content)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(content.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn cmd_fit(a: FitArgs) -> CliResult {
    let table = match &a.table {
        Some(p) => ReferenceTable::load(p)?,
        None => ReferenceTable::bundled(),
    };
    let (cal, report) = fit_calibration(&table, &FitOptions::default())?;
    eprint!("{}", report.render());
    if let Some(p) = &a.report_json {
        std::fs::write(p, json(&report))?;
    }
    write_output(a.out.as_deref(), &cal.to_toml()?)?;
    if report.latency_max_rel_error > 0.05 {
        return Err(CliError {
            code: EXIT_CALIBRATION,
            message: format!(
                "latency fit residual {:.1}% exceeds 5%",
                100.0 * report.latency_max_rel_error
            ),
        });
    }
    if !report.quality_within_tolerance {
        log::warn!("quality proxy does not reproduce every reference row within tolerance");
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let cal = load_calibration(&a.calibration)?;
    let mut config = load_config(&a.config)?;
    config.seed = resolve_seed(&a.seed, config.seed)?;
    if a.trace.is_some() {
        config.score_forced_blocks = true;
    }
    let policy = build_policy(&a.policy, config.threshold, config.seed)?;
    let family = SyntheticFamily::new(&config, &cal);
    let prompt = PromptSpec::new(a.prompt_id.clone(), "");
    let options = RunOptions {
        aggregation: a.policy.aggregation.into(),
        latency: cal.latency.clone(),
    };
    let mut decoder = family.decoder();
    let mut router = policy.router(&prompt.prompt_id);
    let art = run_video_detailed(&config, &prompt, family.models(), &mut decoder, &mut router, &options)?;
    let s = &art.summary;
    eprintln!(
        "{}: {} frames, accept rate {:.3}, time {:.2} s, quality {:.5}",
        s.prompt_id,
        art.emitted_frame_count(),
        s.accept_rate_excl_block0,
        s.total_time_s,
        s.quality_proxy
    );
    if let Some(p) = &a.trace {
        std::fs::write(p, serialize_trace(&export_trace(s)?))?;
    }
    write_output(a.out.as_deref(), &json(s))
}

fn finish_sweep(report: specvid::sweep::SweepReport, out: Option<&Path>, json_out: Option<&Path>, gate: bool) -> CliResult {
    for r in &report.rows {
        info!(
            "{:<22} quality {:.5}  time {:6.2} s  speedup {:.3}  accept {:.3}",
            r.label, r.quality, r.time_s, r.speedup, r.accept_rate
        );
    }
    if let Some(p) = json_out {
        std::fs::write(p, report.to_json())?;
    }
    write_output(out, &report.to_csv())?;
    if !report.pareto.passed {
        for v in &report.pareto.violations {
            eprintln!(
                "pareto violation: {} {} -> {}: {} -> {}",
                v.metric, v.from_label, v.to_label, v.from, v.to
            );
        }
        if gate {
            return Err(CliError {
                code: EXIT_PARETO,
                message: "pareto check failed".into(),
            });
        }
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let cal = load_calibration(&a.calibration)?;
    let config = load_config(&a.config)?;
    let seed = resolve_seed(&a.seed, config.seed)?;
    let taus = if a.taus.is_empty() { cal.arms.thresholds.clone() } else { a.taus.clone() };
    let spec = SweepSpec::threshold_sweep(&taus, a.n, seed)?.with_jobs(a.jobs);
    spec.validate()?;
    info!("sweep: {} arms x {} prompts, seed {seed}", spec.arms.len(), a.n);
    let report = run_sweep(&spec, &config, &cal)?;
    finish_sweep(report, a.out.as_deref(), a.json.as_deref(), true)
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let cal = load_calibration(&a.calibration)?;
    let config = load_config(&a.config)?;
    let seed = resolve_seed(&a.seed, config.seed)?;
    let spec = SweepSpec::ablation(&cal.arms, a.tau, a.n, seed)?.with_jobs(a.jobs);
    spec.validate()?;
    info!("ablation: {} arms x {} prompts, seed {seed}", spec.arms.len(), a.n);
    let report = run_sweep(&spec, &config, &cal)?;
    finish_sweep(report, a.out.as_deref(), a.json.as_deref(), false)
}

fn cmd_replay(a: ReplayArgs) -> CliResult {
    let cal = load_calibration(&a.calibration)?;
    let config = load_config(&a.config)?;
    let seed = match a.policy.policy {
        PolicyKind::Random => resolve_seed(&a.seed, config.seed)?,
        _ => a.seed.seed.unwrap_or(config.seed),
    };
    let policy = build_policy(&a.policy, config.threshold, seed)?;
    let reader = BufReader::new(File::open(&a.trace)?);
    let records = TraceReader::new(reader, config.num_blocks).collect::<Result<Vec<_>, _>>()?;
    info!("replay: {} records from {}", records.len(), a.trace.display());
    let options = ReplayOptions {
        policy,
        aggregation: a.policy.aggregation.into(),
        latency: cal.latency.clone(),
        num_blocks: config.num_blocks,
    };
    let runs = replay(&records, &options, &cal.quality_proxy)?;
    let report = ReplayReport::new(runs, &options)?;
    eprintln!(
        "{} prompts: accept rate {:.3}, time {:.2} s ({:.2}x vs {:.2} s target-only), quality {:.5}; {} recorded / {} modeled timing components",
        report.num_prompts,
        report.mean_accept_rate,
        report.mean_time_s,
        report.speedup,
        report.target_only_time_s,
        report.mean_quality,
        report.recorded_components,
        report.modeled_components
    );
    write_output(a.out.as_deref(), &json(&report))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
