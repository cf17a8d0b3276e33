//! Command-line front end.
//!
//! Exit codes: 0 success, 1 partial result (functions left unassigned, or a
//! failed verification), 2 usage, parse or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gf2::PhysAddr;
use crate::mapfile::{load_mapping, ParseError};
use crate::mapping::DramAddressMapping;
use crate::pipeline::{
    decompose_with_rng, estimate_refresh_function_count, load_pipeline_config, recover_mapping, PipelineConfig,
    Provenance,
};
use crate::probe::{distribution_from_series, SimOracle};
use crate::reference;
use crate::report::{verify, Report};
use crate::sim::{load_timing, NoiseModel, RefreshMode, SimSettings, Simulator};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dramdecomp", version, about = "Recover and label XOR-hash DRAM address mappings from access timing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Mapping file, or `ref:NAME` for a bundled reference mapping.
    #[arg(long)]
    pub mapping: Option<String>,
    /// Timing file (timing parameters, refresh mode, noise).
    #[arg(long)]
    pub timing: Option<PathBuf>,
    /// Pipeline configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the pipeline, the simulator noise and the probe scheduler.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (standard output when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a trace on the simulator and dump per-access latencies.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// `pair:A,B,ROUNDS[,GAP]`, or a file of `ADDR[,GAP]` lines.
        #[arg(long)]
        trace: String,
        /// Emit the latency histogram and its peak instead of the series.
        #[arg(long)]
        histogram: bool,
    },
    /// Recover functions, row and column bits without labeling them.
    Recover {
        #[command(flatten)]
        common: Common,
    },
    /// Recover and label a mapping, with the given mapping as ground truth.
    Decompose {
        #[command(flatten)]
        common: Common,
    },
    /// Compare a report with a ground-truth mapping.
    Verify {
        /// Report produced by `recover` or `decompose`.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render a report (or a mapping as a report) as JSON or CSV.
    Report {
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
struct CliError(String);

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError(e.to_string())
    }
}

type CliResult = Result<(i32, String), CliError>;

/// Parses `args` (including the program name) and runs the command.
/// Output goes to `--out` or `stdout`; diagnostics go to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return code;
        }
    };
    let (common, result) = match &cli.command {
        Command::Simulate {
            common,
            trace,
            histogram,
        } => (common, cmd_simulate(common, trace, *histogram)),
        Command::Recover { common } => (common, cmd_recover(common)),
        Command::Decompose { common } => (common, cmd_decompose(common)),
        Command::Verify { report, common } => (common, cmd_verify(common, report)),
        Command::Report { report, common } => (common, cmd_report(common, report.as_deref())),
    };
    match result {
        Ok((code, text)) => {
            let written = match &common.out {
                Some(p) => std::fs::write(p, &text).map_err(|e| format!("{}: {e}", p.display())),
                None => stdout.write_all(text.as_bytes()).map_err(|e| e.to_string()),
            };
            match written {
                Ok(()) => code,
                Err(e) => {
                    let _ = writeln!(stderr, "error: {e}");
                    EXIT_USAGE
                }
            }
        }
        Err(CliError(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError(format!("{}: {e}", path.display())))
}

fn with_path<T>(path: &str, r: Result<T, ParseError>) -> Result<T, CliError> {
    r.map_err(|e| CliError(format!("{path}: {e}")))
}

/// Loads `--mapping`; returns the platform refresh mode for references.
fn load_truth(common: &Common) -> Result<(DramAddressMapping, Option<RefreshMode>), CliError> {
    let arg = common
        .mapping
        .as_deref()
        .ok_or_else(|| CliError("--mapping is required".into()))?;
    if let Some(name) = arg.strip_prefix("ref:") {
        let r = reference::by_name(name).ok_or_else(|| CliError(format!("unknown reference mapping {name:?}")))?;
        return Ok((r.mapping(), Some(r.refresh_mode())));
    }
    let text = read(Path::new(arg))?;
    Ok((with_path(arg, load_mapping(&text))?, None))
}

fn load_settings(common: &Common) -> Result<SimSettings, CliError> {
    let mut s = match &common.timing {
        Some(p) => with_path(&p.display().to_string(), load_timing(&read(p)?))?,
        None => SimSettings {
            noise: NoiseModel::gaussian(2.0, 0),
            ..Default::default()
        },
    };
    if let Some(seed) = common.seed {
        s.noise.seed = seed;
    }
    Ok(s)
}

fn build_sim(common: &Common) -> Result<(Simulator, DramAddressMapping), CliError> {
    let (truth, platform_refresh) = load_truth(common)?;
    let s = load_settings(common)?;
    let refresh = s.refresh.or(platform_refresh).unwrap_or_default();
    let sim = Simulator::new(truth.clone(), s.timing, refresh, s.noise)?;
    Ok((sim, truth))
}

fn parse_addr(s: &str) -> Result<PhysAddr, CliError> {
    let s = s.trim();
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|_| CliError(format!("bad address or number {s:?}")))
}

fn parse_trace(arg: &str) -> Result<Vec<(PhysAddr, u64)>, CliError> {
    if let Some(rest) = arg.strip_prefix("pair:") {
        let f: Vec<&str> = rest.split(',').collect();
        if !(3..=4).contains(&f.len()) {
            return Err(CliError("pair trace needs A,B,ROUNDS[,GAP]".into()));
        }
        let (a, b, rounds) = (parse_addr(f[0])?, parse_addr(f[1])?, parse_addr(f[2])?);
        let gap = f.get(3).map(|g| parse_addr(g)).transpose()?.unwrap_or(0);
        return Ok((0..rounds).flat_map(|_| [(a, gap), (b, gap)]).collect());
    }
    let text = read(Path::new(arg))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let addr = parse_addr(f.next().unwrap_or("")).map_err(|e| CliError(format!("{arg}:{}: {}", i + 1, e.0)))?;
        let gap = match f.next() {
            Some(g) => parse_addr(g).map_err(|e| CliError(format!("{arg}:{}: {}", i + 1, e.0)))?,
            None => 0,
        };
        out.push((addr, gap));
    }
    Ok(out)
}

fn cmd_simulate(common: &Common, trace: &str, histogram: bool) -> CliResult {
    let (mut sim, _) = build_sim(common)?;
    let trace = parse_trace(trace)?;
    for &(a, _) in &trace {
        sim.check_addr(a)?;
    }
    let series = sim.run_trace(&trace);
    let format = common.format.unwrap_or(Format::Csv);
    let text = match (histogram, format) {
        (false, Format::Csv) => series.to_csv(),
        (false, Format::Json) => {
            let mut s = serde_json::to_string(series.samples())?;
            s.push('\n');
            s
        }
        (true, Format::Csv) => distribution_from_series(&series)?.to_csv(),
        (true, Format::Json) => {
            let mut s = serde_json::to_string_pretty(&distribution_from_series(&series)?)?;
            s.push('\n');
            s
        }
    };
    Ok((EXIT_OK, text))
}

fn pipeline_config(common: &Common, truth: &DramAddressMapping) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => with_path(&p.display().to_string(), load_pipeline_config(&read(p)?))?,
        None => PipelineConfig::default(),
    };
    // The simulated machine fixes the physical address range.
    cfg.addr_width = truth.addr_width();
    cfg.offset_bits = truth.offset_bits();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(CliError)?;
    Ok(cfg)
}

fn render(report: &Report, format: Option<Format>) -> String {
    match format.unwrap_or(Format::Json) {
        Format::Json => report.to_json(),
        Format::Csv => report.functions_csv(),
    }
}

fn cmd_recover(common: &Common) -> CliResult {
    let (sim, truth) = build_sim(common)?;
    let cfg = pipeline_config(common, &truth)?;
    let mut oracle = SimOracle::new(sim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rec = recover_mapping(&mut oracle, &cfg, &mut rng)?;
    let report = Report::from_recovered("recover", cfg.seed, &rec, None);
    Ok((EXIT_OK, render(&report, common.format)))
}

fn cmd_decompose(common: &Common) -> CliResult {
    let (sim, truth) = build_sim(common)?;
    let mut cfg = pipeline_config(common, &truth)?;
    let mut oracle = SimOracle::new(sim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rec = decompose_with_rng(&mut oracle, &cfg, &mut rng)?;
    let mut count = None;
    if cfg.samples.refresh_count_pairs > 0 {
        cfg.refresh_reference = cfg.refresh_reference.or(rec.refresh_reference);
        match estimate_refresh_function_count(&mut oracle, &cfg, &mut rng) {
            Ok(c) => count = Some(c),
            Err(e) => rec.notes.push(format!("refresh function count unavailable: {e}")),
        }
    }
    let report = Report::from_recovered("decompose", cfg.seed, &rec, count);
    let code = if report.unassigned_count() > 0 { EXIT_PARTIAL } else { EXIT_OK };
    Ok((code, render(&report, common.format)))
}

fn cmd_verify(common: &Common, report: &Path) -> CliResult {
    let r = Report::from_json(&read(report)?).map_err(|e| CliError(format!("{}: {e}", report.display())))?;
    let recovered = r.to_mapping()?;
    let (truth, _) = load_truth(common)?;
    let checks = verify(&recovered, &truth);
    let pass = checks.iter().all(|c| c.pass);
    let text = match common.format {
        Some(Format::Json) => {
            let v: Vec<serde_json::Value> = checks
                .iter()
                .map(|c| serde_json::json!({ "check": c.name, "pass": c.pass }))
                .collect();
            let mut s = serde_json::to_string_pretty(&serde_json::json!({ "pass": pass, "checks": v }))?;
            s.push('\n');
            s
        }
        Some(Format::Csv) => {
            let mut s = String::from("check,pass\n");
            for c in &checks {
                s.push_str(&format!("{},{}\n", c.name, c.pass));
            }
            s
        }
        None => checks.iter().map(|c| format!("{c}\n")).collect(),
    };
    Ok((if pass { EXIT_OK } else { EXIT_PARTIAL }, text))
}

fn cmd_report(common: &Common, report: Option<&Path>) -> CliResult {
    let r = match report {
        Some(p) => Report::from_json(&read(p)?).map_err(|e| CliError(format!("{}: {e}", p.display())))?,
        None => {
            let (m, _) = load_truth(common)?;
            Report::from_mapping("report", common.seed.unwrap_or(0), &m, Provenance::Hint)
        }
    };
    Ok((EXIT_OK, render(&r, common.format)))
}
