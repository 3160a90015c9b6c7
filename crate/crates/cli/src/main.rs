use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use packsim_core::characterization::{population_stats, triage_protocol, Population};
use packsim_core::economics::{npv_exact, npv_lifetime, replacement_times, total_cost, total_cost_exact, CostModel};
use packsim_core::scenario::{golden, run_scenario_with, CsvWriter, RunMetrics, ScenarioConfig, ScenarioError};

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "packsim", version, about = "Per-cell converter battery pack simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenario files (in parallel when several are given).
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Directory for output files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Write per-step telemetry as <name>.csv.
        #[arg(long)]
        csv: bool,
        /// Write run metrics as <name>.metrics.json.
        #[arg(long)]
        metrics_json: bool,
    },
    /// Check a scenario file and list every problem found.
    Validate { scenario: PathBuf },
    /// Run the shipped reference scenarios against their thresholds.
    Golden,
    /// Triage a population of recovered cells.
    Triage {
        population: PathBuf,
        /// Write report.csv and stats.json here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cost total and lifetime net present value of a cost model.
    Finance { model: PathBuf },
}

/// Failure kinds mapped onto exit codes.
enum Failure {
    Config(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Parse(_) | ScenarioError::Invalid(_) | ScenarioError::Build(_) => Failure::Config(e.to_string()),
            ScenarioError::Io { .. } => Failure::Run(e.into()),
        }
    }
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::from_path(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Ok(seed) = std::env::var("PACKSIM_SEED") {
        cfg.seed = seed.trim().parse().map_err(|_| Failure::Config(format!("PACKSIM_SEED is not an unsigned integer: {seed:?}")))?;
    }
    if cfg.name.is_empty() {
        cfg.name = path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
    }
    cfg.validate().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn run_one(path: &Path, out: &Path, csv: bool, metrics_json: bool) -> Result<RunMetrics, Failure> {
    let cfg = load_scenario(path)?;
    let mut writer = if csv {
        let p = out.join(format!("{}.csv", cfg.name));
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        Some((CsvWriter::new(BufWriter::new(f), cfg.cells.len()).with_context(|| format!("writing {}", p.display()))?, p))
    } else {
        None
    };
    let mut io_error = None;
    let metrics = run_scenario_with(&cfg, &mut |rec| {
        if let Some((w, _)) = writer.as_mut() {
            if io_error.is_none() {
                io_error = w.write(rec).err();
            }
        }
    })?;
    if let Some((w, p)) = writer {
        if let Some(e) = io_error {
            return Err(anyhow::Error::new(e).context(format!("writing {}", p.display())).into());
        }
        w.finish().with_context(|| format!("writing {}", p.display()))?;
    }
    if metrics_json {
        let p = out.join(format!("{}.metrics.json", cfg.name));
        let text = serde_json::to_string_pretty(&metrics).context("serializing metrics")?;
        fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(metrics)
}

fn summary(name: &str, m: &RunMetrics) -> String {
    let mut s = format!(
        "{name}: {} steps, {:.1} s simulated, v_bus mean {:.4} V, std {:.4} V, range [{:.4}, {:.4}] V",
        m.steps, m.duration_s, m.v_bus_mean, m.v_bus_std, m.v_bus_min, m.v_bus_max
    );
    for (k, q) in m.discharged_ah.iter().enumerate() {
        s.push_str(&format!("\n  module {}: discharged {:.4} A·h, q_est {:.4} A·h, k_b {:.4}", k + 1, q, m.final_q_est[k], m.final_k_b[k]));
        if let Some(t) = m.cutoff_time_s[k] {
            s.push_str(&format!(", cut-off at {t:.2} s"));
        }
        if let Some(r) = m.shutdowns[k] {
            s.push_str(&format!(", shut down ({r})"));
        }
    }
    for c in &m.cycles {
        let spread = c.spread.map_or("n/a".to_string(), |s| format!("{:.2}%", 100.0 * s));
        s.push_str(&format!("\n  {:?} {} from {:.0} s: spread {spread}", c.phase, c.index, c.start_t));
    }
    s
}

fn cmd_run(scenarios: &[PathBuf], out: &Path, csv: bool, metrics_json: bool) -> Result<(), Failure> {
    if csv || metrics_json {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    // one worker per scenario, nothing shared between them
    let results: Vec<Result<RunMetrics, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = scenarios.iter().map(|p| s.spawn(move || run_one(p, out, csv, metrics_json))).collect();
        handles.into_iter().map(|h| h.join().expect("scenario worker panicked")).collect()
    });
    let mut worst = None;
    for (path, r) in scenarios.iter().zip(results) {
        match r {
            Ok(m) => println!("{}", summary(&path.display().to_string(), &m)),
            Err(Failure::Config(msg)) => {
                eprintln!("error: {msg}");
                worst = Some(Failure::Config(String::new()));
            }
            Err(Failure::Run(e)) => {
                eprintln!("error: {}: {e:#}", path.display());
                if worst.is_none() {
                    worst = Some(Failure::Run(e));
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    load_scenario(path)?;
    println!("{}: ok", path.display());
    Ok(())
}

fn cmd_golden() -> Result<bool, Failure> {
    let checks = golden::evaluate_all()?;
    let mut all = true;
    for c in &checks {
        all &= c.passed;
        println!("{} {:<7} {:<34} {}", if c.passed { "PASS" } else { "FAIL" }, c.scenario, c.check, c.detail);
    }
    Ok(all)
}

fn cmd_triage(path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pop: Population = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let reports = pop
        .cells
        .iter()
        .map(|c| triage_protocol(c, &pop.options).map_err(|e| Failure::Config(format!("cell {}: {e}", c.id))))
        .collect::<Result<Vec<_>, _>>()?;
    let stats = population_stats(&reports).map_err(|e| Failure::Config(e.to_string()))?;
    let mut csv = String::from("id,initial_voltage_V,defective,measured_capacity_Ah,retention\n");
    for r in &reports {
        csv.push_str(&format!("{},{},{},{},{}\n", r.id, r.initial_voltage, r.defective, r.measured_capacity_ah, r.retention));
    }
    let json = serde_json::to_string_pretty(&stats).context("serializing stats")? + "\n";
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("report.csv"), &csv).with_context(|| format!("writing {}", dir.display()))?;
            fs::write(dir.join("stats.json"), &json).with_context(|| format!("writing {}", dir.display()))?;
        }
        None => print!("{csv}{json}"),
    }
    Ok(())
}

fn cmd_finance(path: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let model: CostModel = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    model.validate().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let name = if model.name.is_empty() { path.display().to_string() } else { model.name.clone() };
    println!("{name}");
    for item in &model.line_items {
        println!("  {:<24} ${:>8.2}", item.name, item.usd);
    }
    println!("  {:<24} ${:>8.2}  (unrounded {:.6})", "total", total_cost(&model), total_cost_exact(&model));
    let times: Vec<String> = replacement_times(&model).iter().map(|t| format!("{t}")).collect();
    if !times.is_empty() {
        println!("  replacements at years {}", times.join(", "));
    }
    println!("  {:<24} ${:>8.2}  (unrounded {:.6})", "net present value", npv_lifetime(&model), npv_exact(&model));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenarios, out, csv, metrics_json } => cmd_run(scenarios, out, *csv, *metrics_json).map(|_| true),
        Command::Validate { scenario } => cmd_validate(scenario).map(|_| true),
        Command::Golden => cmd_golden(),
        Command::Triage { population, out } => cmd_triage(population, out.as_deref()).map(|_| true),
        Command::Finance { model } => cmd_finance(model).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(Failure::Config(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}
