//! `dmmopt`: trace statistics, grammar generation, DMM simulation,
//! grammatical-evolution search and manager comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dmm_core::evolution::{compare_with, evolve_with, fitness, improvement, normalize_with, GeaConfig, RunOptions};
use dmm_core::grammar::{generate_grammar, parse_bnf, Grammar};
use dmm_core::heap_sim::{simulate_with, DmmSpec, SimConfig};
use dmm_core::reference::{self, PRESET_NAMES};
use dmm_core::trace::{compute_stats, parse_trace_bytes, ProfilingReport};
use serde::Serialize;

const THREADS_ENV: &str = "DMM_EVOLVE_THREADS";

#[derive(Parser)]
#[command(name = "dmmopt", version, about = "Simulate and optimize dynamic memory managers from allocation traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a trace.
    Stats {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write the DMM grammar for a trace.
    Grammar {
        #[arg(long)]
        trace: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a trace against a preset or a spec file.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Preset manager.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESET_NAMES), conflicts_with = "spec", required_unless_present = "spec")]
        dmm: Option<String>,
        /// DMM spec JSON file.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Page size used by simple segregated storage.
        #[arg(long, default_value_t = SimConfig::default().page_size)]
        page_size: u64,
    },
    /// Search for the DMM with the best fitness.
    Evolve {
        #[arg(long)]
        trace: PathBuf,
        /// GA configuration JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grammar file to decode with instead of the generated one.
        #[arg(long)]
        grammar: Option<PathBuf>,
        /// Overrides the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the best spec, history and manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Normalized fitness table for several managers.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Presets to include (repeatable or comma separated).
        #[arg(long, value_delimiter = ',', value_parser = clap::builder::PossibleValuesParser::new(PRESET_NAMES))]
        dmm: Vec<String>,
        /// Spec files to include, named by file stem.
        #[arg(long)]
        spec: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Output file (directory for `compare`). A run manifest is written
    /// next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Table,
    Csv,
    Json,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Input(anyhow::Error),
    Simulation(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Simulation(_) => 3,
        }
    }
}

trait InputContext<T> {
    fn input(self) -> Result<T, Failure>;
    fn simulation(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InputContext<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }

    fn simulation(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Simulation(e.into()))
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    trace: &'a Path,
    config: serde_json::Value,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
}

impl RunManifest<'_> {
    fn write(&self, path: &Path) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_file(path, &text)
    }
}

fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display())).input()?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display())).input()
}

fn load_trace(path: &Path) -> Result<ProfilingReport, Failure> {
    let bytes = fs::read(path).with_context(|| format!("reading trace {}", path.display())).input()?;
    let parsed = parse_trace_bytes(&bytes).with_context(|| format!("parsing {}", path.display())).input()?;
    if !parsed.diagnostics.is_empty() {
        eprintln!("{}: {} diagnostic(s)", path.display(), parsed.diagnostics.len());
        for d in parsed.diagnostics.iter().take(5) {
            eprintln!("  {d}");
        }
    }
    Ok(parsed.report)
}

fn load_spec(path: &Path) -> Result<DmmSpec, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display())).input()?;
    DmmSpec::from_json(&text).with_context(|| format!("parsing spec {}", path.display())).input()
}

fn non_empty(report: &ProfilingReport) -> Result<(), Failure> {
    if report.distinct_sizes().is_empty() {
        return Err(Failure::Input(anyhow!("the trace has no allocations")));
    }
    Ok(())
}

/// Renders `rows` of `(column, value)` pairs.
fn render<T: Serialize>(format: Format, headers: &[&str], rows: &[T], cells: impl Fn(&T) -> Vec<String>) -> String {
    match format {
        Format::Json => {
            let mut text = serde_json::to_string_pretty(rows).expect("rows serialize");
            text.push('\n');
            text
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(headers).expect("in-memory write");
            for row in rows {
                w.write_record(cells(row)).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
        }
        Format::Table => {
            let body: Vec<Vec<String>> = rows.iter().map(&cells).collect();
            let widths: Vec<usize> = (0..headers.len())
                .map(|c| body.iter().map(|r| r[c].len()).chain([headers[c].len()]).max().unwrap_or(0))
                .collect();
            let mut out = String::new();
            let line = |out: &mut String, cols: &mut dyn Iterator<Item = &str>| {
                let padded: Vec<String> = cols.zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
                let _ = writeln!(out, "{}", padded.join("  ").trim_end());
            };
            line(&mut out, &mut headers.iter().copied());
            for r in &body {
                line(&mut out, &mut r.iter().map(String::as_str));
            }
            out
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => write_file(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_stats(common: &CommonArgs) -> Result<(), Failure> {
    let report = load_trace(&common.trace)?;
    let stats = compute_stats(&report);
    let headers = ["objects", "total_memory", "max_in_use", "average_size", "memory_ops"];
    let text = render(common.format, &headers, &[stats], |s| {
        vec![
            s.objects.to_string(),
            s.total_memory.to_string(),
            s.max_in_use.to_string(),
            format!("{:.2}", s.average_size),
            s.memory_ops.to_string(),
        ]
    });
    emit(&text, common.out.as_deref())?;
    if let Some(out) = &common.out {
        RunManifest {
            tool: "dmmopt",
            version: env!("CARGO_PKG_VERSION"),
            command: "stats",
            trace: &common.trace,
            config: serde_json::json!({ "format": common.format }),
            seed: None,
            outputs: vec![out.clone()],
        }
        .write(&manifest_beside(out))?;
    }
    Ok(())
}

fn cmd_grammar(trace: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let report = load_trace(trace)?;
    let grammar = generate_grammar(&report).input()?;
    emit(&grammar.to_string(), out)?;
    if let Some(out) = out {
        RunManifest {
            tool: "dmmopt",
            version: env!("CARGO_PKG_VERSION"),
            command: "grammar",
            trace,
            config: serde_json::json!({}),
            seed: None,
            outputs: vec![out.to_path_buf()],
        }
        .write(&manifest_beside(out))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulationRow {
    dmm: String,
    #[serde(flatten)]
    metrics: dmm_core::Metrics,
    time_ratio: f64,
    memory_ratio: f64,
    fitness: f64,
}

fn cmd_simulate(common: &CommonArgs, dmm: Option<&str>, spec: Option<&Path>, page_size: u64) -> Result<(), Failure> {
    let report = load_trace(&common.trace)?;
    let (name, spec) = match (dmm, spec) {
        (Some(name), _) => (name.to_string(), reference::preset(name, &report).expect("validated preset name")),
        (None, Some(path)) => (path.display().to_string(), load_spec(path)?),
        (None, None) => unreachable!("clap requires --dmm or --spec"),
    };
    if page_size == 0 {
        return Err(Failure::Input(anyhow!("--page-size must be positive")));
    }
    let sim = SimConfig { page_size, ..SimConfig::default() };
    let metrics = simulate_with(&report, &spec, &sim).simulation()?;
    // Ratios need the reference managers, which need at least one allocation.
    let (time_ratio, memory_ratio, f) = match normalize_with(&report, &sim) {
        Ok(ctx) => (
            metrics.time_units as f64 / ctx.t_kng as f64,
            metrics.peak_bytes as f64 / ctx.m_lea as f64,
            fitness(&metrics, &ctx),
        ),
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    };
    let row = SimulationRow { dmm: name, metrics, time_ratio, memory_ratio, fitness: f };
    let headers = [
        "dmm",
        "time_units",
        "memory_accesses",
        "peak_bytes",
        "current_bytes",
        "allocs",
        "frees",
        "splits",
        "coalesces",
        "system_requests",
        "time_ratio",
        "memory_ratio",
        "fitness",
    ];
    let text = render(common.format, &headers, std::slice::from_ref(&row), |r| {
        let m = &r.metrics;
        vec![
            r.dmm.clone(),
            m.time_units.to_string(),
            m.memory_accesses.to_string(),
            m.peak_bytes.to_string(),
            m.current_bytes.to_string(),
            m.n_allocs.to_string(),
            m.n_frees.to_string(),
            m.n_splits.to_string(),
            m.n_coalesces.to_string(),
            m.n_system_requests.to_string(),
            format!("{:.6}", r.time_ratio),
            format!("{:.6}", r.memory_ratio),
            format!("{:.6}", r.fitness),
        ]
    });
    emit(&text, common.out.as_deref())?;
    if let Some(out) = &common.out {
        RunManifest {
            tool: "dmmopt",
            version: env!("CARGO_PKG_VERSION"),
            command: "simulate",
            trace: &common.trace,
            config: serde_json::json!({ "spec": spec, "page_size": page_size, "format": common.format }),
            seed: None,
            outputs: vec![out.clone()],
        }
        .write(&manifest_beside(out))?;
    }
    Ok(())
}

fn evolve_threads() -> Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))
            .input(),
        Err(_) => Ok(0),
    }
}

struct EvolveArgs<'a> {
    trace: &'a Path,
    config: Option<&'a Path>,
    grammar: Option<&'a Path>,
    seed: Option<u64>,
    out: &'a Path,
    format: Format,
}

fn cmd_evolve(args: EvolveArgs<'_>) -> Result<(), Failure> {
    let report = load_trace(args.trace)?;
    non_empty(&report)?;
    let mut config = match args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).input()?;
            GeaConfig::from_json(&text).with_context(|| format!("parsing config {}", path.display())).input()?
        }
        None => GeaConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.rng_seed = seed;
    }
    let grammar: Grammar = match args.grammar {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading grammar {}", path.display())).input()?;
            parse_bnf(&text).with_context(|| format!("parsing grammar {}", path.display())).input()?
        }
        None => generate_grammar(&report).input()?,
    };
    let options = RunOptions { threads: evolve_threads()?, ..RunOptions::default() };
    let run = evolve_with(&report, &grammar, &config, &options).map_err(|e| match e {
        dmm_core::evolution::EvolutionError::InvalidConfig(_) | dmm_core::evolution::EvolutionError::EmptyTrace => {
            Failure::Input(e.into())
        }
        other => Failure::Simulation(other.into()),
    })?;

    let history = args.out.join("history.csv");
    let spec_path = args.out.join("best_spec.json");
    write_file(&history, &run.history_csv())?;
    let Some(spec) = &run.best_spec else {
        return Err(Failure::Simulation(anyhow!("no valid DMM was found; history written to {}", history.display())));
    };
    write_file(&spec_path, &spec.to_json())?;
    RunManifest {
        tool: "dmmopt",
        version: env!("CARGO_PKG_VERSION"),
        command: "evolve",
        trace: args.trace,
        config: serde_json::to_value(&config).expect("config serializes"),
        seed: Some(config.rng_seed),
        outputs: vec![spec_path.clone(), history.clone()],
    }
    .write(&args.out.join("manifest.json"))?;

    #[derive(Serialize)]
    struct Summary<'a> {
        fitness: f64,
        generations: usize,
        best_spec: &'a Path,
        history: &'a Path,
    }
    let summary = Summary {
        fitness: run.best.fitness,
        generations: run.history.len() - 1,
        best_spec: &spec_path,
        history: &history,
    };
    let headers = ["fitness", "generations", "best_spec", "history"];
    let text = render(args.format, &headers, &[summary], |s| {
        vec![
            format!("{:.6}", s.fitness),
            s.generations.to_string(),
            s.best_spec.display().to_string(),
            s.history.display().to_string(),
        ]
    });
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct CompareRow {
    dmm: String,
    fitness: f64,
    time_ratio: f64,
    memory_ratio: f64,
    /// Improvement over the first row, in percent.
    improvement: f64,
}

fn cmd_compare(common: &CommonArgs, presets: &[String], specs: &[PathBuf]) -> Result<(), Failure> {
    let report = load_trace(&common.trace)?;
    non_empty(&report)?;
    let mut named: Vec<(String, DmmSpec)> = Vec::new();
    let presets: Vec<&str> = if presets.is_empty() && specs.is_empty() {
        PRESET_NAMES.to_vec()
    } else {
        presets.iter().map(String::as_str).collect()
    };
    for name in presets {
        named.push((name.to_string(), reference::preset(name, &report).expect("validated preset name")));
    }
    for path in specs {
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        named.push((name, load_spec(path)?));
    }
    let table = compare_with(&report, &named, &SimConfig::default()).simulation()?;
    let baseline = table.rows[0].fitness;
    let rows: Vec<CompareRow> = table
        .rows
        .iter()
        .map(|r| CompareRow {
            dmm: r.name.clone(),
            fitness: r.fitness,
            time_ratio: r.time_ratio,
            memory_ratio: r.memory_ratio,
            improvement: improvement(baseline, r.fitness),
        })
        .collect();
    let headers = ["dmm", "fitness", "time_ratio", "memory_ratio", "improvement"];
    let cells = |r: &CompareRow| {
        vec![
            r.dmm.clone(),
            format!("{:.6}", r.fitness),
            format!("{:.6}", r.time_ratio),
            format!("{:.6}", r.memory_ratio),
            format!("{:.2}", r.improvement),
        ]
    };
    print!("{}", render(common.format, &headers, &rows, cells));
    if let Some(dir) = &common.out {
        let csv_path = dir.join("compare.csv");
        write_file(&csv_path, &render(Format::Csv, &headers, &rows, cells))?;
        RunManifest {
            tool: "dmmopt",
            version: env!("CARGO_PKG_VERSION"),
            command: "compare",
            trace: &common.trace,
            config: serde_json::json!({ "dmms": named }),
            seed: None,
            outputs: vec![csv_path],
        }
        .write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Stats { common } => cmd_stats(common),
        Command::Grammar { trace, out } => cmd_grammar(trace, out.as_deref()),
        Command::Simulate { common, dmm, spec, page_size } => {
            cmd_simulate(common, dmm.as_deref(), spec.as_deref(), *page_size)
        }
        Command::Evolve { trace, config, grammar, seed, out, format } => cmd_evolve(EvolveArgs {
            trace,
            config: config.as_deref(),
            grammar: grammar.as_deref(),
            seed: *seed,
            out,
            format: *format,
        }),
        Command::Compare { common, dmm, spec } => cmd_compare(common, dmm, spec),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Input(e) | Failure::Simulation(e)) = &failure;
            eprintln!("error: {e:#}");
            ExitCode::from(failure.code())
        }
    }
}
