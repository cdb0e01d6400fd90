//! Command-line entry points.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collab::{run_network, Failure, Layout, NetworkError};
use crate::config::{ConfigError, ExperimentConfig, ScheduleConfig};
use crate::qsched::save_qtable;
use crate::sim::{
    compare_schedules, train_qlearn, write_comparison_csv, ComparisonRow, ScheduleSpec, SimError, SimReport,
};
use crate::trace::{generate_trace, load_trace, write_csv, write_json, EventTrace, TraceError, TraceFormat, SECONDS_PER_DAY};

pub const EXIT_OK: i32 = 0;
// Like `println!`, but a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dutycycle", version, about = "Duty-cycle scheduling simulator for acoustic sensors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic event trace from the config's profile.
    GenTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Compare fixed and learned schedules on one device.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a network of devices.
    RunNetwork {
        #[command(flatten)]
        common: Common,
        /// Device to take offline.
        #[arg(long, requires = "fail_episode")]
        fail_device: Option<u64>,
        /// Episode at which it goes offline.
        #[arg(long, requires = "fail_device")]
        fail_episode: Option<usize>,
    },
    /// Re-render CSV tables from a run's summary.json.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => EXIT_VALIDATION,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io(_) => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::IntervalTooShort { .. } | SimError::TraceTooShort { .. } | SimError::PeriodLength(_) => {
                Self::Validation(e.to_string())
            }
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Sim(s) => s.into(),
            NetworkError::Io(_) => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects output files and writes them with a manifest.
struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig, inputs: BTreeMap<String, String>) -> Result<(), CliError> {
        let files = std::mem::take(&mut self.files);
        let mut hashed = cfg.clone();
        hashed.output = PathBuf::new();
        let manifest = Manifest {
            command: command.into(),
            seed: cfg.seed_value(),
            config_sha256: sha256_hex(hashed.to_json().as_bytes()),
            inputs,
            outputs: files,
        };
        self.json("manifest.json", &manifest)
    }
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, BTreeMap<String, String>), CliError> {
    let mut inputs = BTreeMap::new();
    inputs.insert(common.config.display().to_string(), hash_file(&common.config)?);
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok((cfg, inputs))
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn obtain_trace(cfg: &ExperimentConfig, inputs: &mut BTreeMap<String, String>) -> Result<EventTrace, CliError> {
    match (&cfg.trace.file, &cfg.trace.generate) {
        (Some(path), _) => {
            let format = TraceFormat::from_path(path)
                .ok_or_else(|| CliError::Validation(format!("trace.file: unknown extension on {}", path.display())))?;
            inputs.insert(path.display().to_string(), hash_file(path)?);
            Ok(load_trace(path, format)?)
        }
        (None, Some(g)) => Ok(generate_trace(&g.profile, g.days, cfg.seed_value())?),
        (None, None) => Err(CliError::Validation("trace: no source".into())),
    }
}

pub fn cmd_gen_trace(common: &Common, format: Format) -> Result<(), CliError> {
    let (cfg, inputs) = load_config(common)?;
    let Some(g) = &cfg.trace.generate else {
        return Err(CliError::Validation("trace.generate: gen-trace needs a generator profile".into()));
    };
    let trace = generate_trace(&g.profile, g.days, cfg.seed_value())?;
    let mut out = Outputs::new(&cfg.output)?;
    let mut bytes = Vec::new();
    let name = match format {
        Format::Csv => {
            write_csv(&trace, &mut bytes)?;
            "trace.csv"
        }
        Format::Json => {
            write_json(&trace, &mut bytes)?;
            "trace.json"
        }
    };
    out.write(name, &bytes)?;
    out.finish("gen-trace", &cfg, inputs)?;
    say!("events: {}", trace.len());
    say!("horizon: {}", trace.horizon());
    say!("hour,events");
    for (h, n) in trace.hourly_histogram().iter().enumerate() {
        say!("{h},{n}");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    /// Evaluated span within the trace, seconds.
    pub window: (f64, f64),
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<SimReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<SimReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policies: Option<Vec<Vec<usize>>>,
}

fn periods_csv(reports: &[SimReport]) -> Result<Vec<u8>, CliError> {
    let mut bytes = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        let mut part = Vec::new();
        r.write_periods_csv(&mut part)?;
        let skip = if i == 0 { 0 } else { part.iter().position(|&b| b == b'\n').map_or(part.len(), |p| p + 1) };
        bytes.extend_from_slice(&part[skip..]);
    }
    Ok(bytes)
}

fn comparison_csv(rows: &[ComparisonRow]) -> Result<Vec<u8>, CliError> {
    let mut bytes = Vec::new();
    write_comparison_csv(rows, &mut bytes)?;
    Ok(bytes)
}

pub fn cmd_run(common: &Common) -> Result<(), CliError> {
    let (cfg, mut inputs) = load_config(common)?;
    let trace = obtain_trace(&cfg, &mut inputs)?;
    let setup = cfg.setup();
    let seed = cfg.seed_value();
    let wants_ql = cfg.schedules.contains(&ScheduleConfig::Qlearn);

    let (window_trace, window, trained) = if wants_ql {
        let plan = &cfg.plan;
        let needed = (plan.train_days + plan.eval_days) as f64 * SECONDS_PER_DAY;
        if trace.horizon() < needed {
            return Err(CliError::Validation(format!(
                "plan: needs {} days of trace, have {}",
                plan.train_days + plan.eval_days,
                trace.horizon() / SECONDS_PER_DAY
            )));
        }
        let trained = train_qlearn(&trace, plan, &cfg.actions, &cfg.init, &setup, seed)?;
        let (t0, t1) = (plan.train_days as f64 * SECONDS_PER_DAY, needed);
        (trace.slice(t0, t1), (t0, t1), Some(trained))
    } else {
        (trace.clone(), (0.0, trace.horizon()), None)
    };

    let fixed: Vec<(String, ScheduleSpec)> = cfg
        .schedules
        .iter()
        .filter_map(|s| match s {
            ScheduleConfig::Fixed(v) => Some((s.name(), ScheduleSpec::fixed(*v))),
            ScheduleConfig::Qlearn => None,
        })
        .collect();
    let mut fixed_results = if fixed.is_empty() { Vec::new() } else { compare_schedules(&window_trace, &fixed, &setup, seed)? }.into_iter();

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for s in &cfg.schedules {
        let report = match s {
            ScheduleConfig::Qlearn => {
                let mut r = trained.as_ref().expect("trained when requested").eval.clone();
                r.name = s.name();
                r
            }
            ScheduleConfig::Fixed(_) => fixed_results.next().expect("one result per fixed schedule").1,
        };
        rows.push(ComparisonRow::from(&report));
        reports.push(report);
    }

    let mut out = Outputs::new(&cfg.output)?;
    out.write("comparison.csv", &comparison_csv(&rows)?)?;
    out.json("comparison.json", &rows)?;
    out.write("periods.csv", &periods_csv(&reports)?)?;
    if let Some(t) = &trained {
        out.write("qtable.bin", &save_qtable(&t.table))?;
    }
    let summary = RunSummary {
        seed,
        window,
        rows: rows.clone(),
        reports,
        train: trained.as_ref().map(|t| t.train.clone()),
        policies: trained.as_ref().map(|t| t.policies.clone()),
    };
    out.json("summary.json", &summary)?;
    out.finish("run", &cfg, inputs)?;

    say!("{}", String::from_utf8_lossy(&comparison_csv(&rows)?).trim_end());
    if let Some(t) = &trained {
        match t.train.episodes_to_convergence {
            Some(e) => say!("policy stable from episode {e}"),
            None => say!("policy still changing at the last episode"),
        }
    }
    Ok(())
}

pub fn cmd_run_network(common: &Common, failure: Option<Failure>) -> Result<(), CliError> {
    let (cfg, mut inputs) = load_config(common)?;
    let Some(section) = &cfg.network else {
        return Err(CliError::Validation("network: run-network needs a network section".into()));
    };
    let layout = match (&section.layout_file, &section.layout) {
        (Some(path), _) => {
            inputs.insert(path.display().to_string(), hash_file(path)?);
            Layout::load(path)?
        }
        (None, Some(l)) => l.clone(),
        (None, None) => return Err(CliError::Validation("network: a layout is required".into())),
    };
    let mut settings = section.settings.clone();
    if failure.is_some() {
        settings.failure = failure;
    }
    let trace = obtain_trace(&cfg, &mut inputs)?;
    let outcome = run_network(&layout, &trace, &cfg.actions, &settings, &cfg.setup(), cfg.seed_value())?;
    let report = &outcome.report;

    let mut out = Outputs::new(&cfg.output)?;
    out.json("network.json", report)?;
    for d in &report.devices {
        let mut bytes = Vec::new();
        d.write_csv(&mut bytes)?;
        out.write(&format!("device_{}.csv", d.id), &bytes)?;
    }
    let mut bytes = Vec::new();
    report.write_episodes_csv(&mut bytes)?;
    out.write("episodes.csv", &bytes)?;
    let mut bytes = Vec::new();
    report.write_battery_csv(&mut bytes)?;
    out.write("battery_sd.csv", &bytes)?;
    out.finish("run-network", &cfg, inputs)?;

    let o = &report.overall;
    say!(
        "devices: {}, clusters: {}, detection_rate: {}, mean_duplicates: {}",
        report.devices.len(),
        report.clusters.len(),
        o.detection_rate,
        o.mean_duplicates
    );
    for d in &report.devices {
        match d.failed_at_episode {
            Some(e) => say!("device {}: {} activations, inactive from episode {e}", d.id, d.activations),
            None => say!("device {}: {} activations", d.id, d.activations),
        }
    }
    Ok(())
}

pub fn cmd_report(input: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(input)?;
    let summary: RunSummary =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", input.display())))?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("comparison.csv"), comparison_csv(&summary.rows)?)?;
    fs::write(dir.join("periods.csv"), periods_csv(&summary.reports)?)?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenTrace { common, format } => cmd_gen_trace(common, *format),
        Command::Run { common } => cmd_run(common),
        Command::RunNetwork { common, fail_device, fail_episode } => {
            let failure = fail_device.zip(*fail_episode).map(|(device, episode)| Failure { device, episode });
            cmd_run_network(common, failure)
        }
        Command::Report { input, out } => cmd_report(input, out.as_deref()),
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
