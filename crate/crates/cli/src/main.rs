//! Scenario runner: runs built-in or file-defined scenarios and writes trajectories and metrics.

mod overrides;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use safeguard_core::scenarios;
use safeguard_core::simkit::{run_scenario, MetricReport, Scenario, ScenarioConfig};

use overrides::Override;

#[derive(Parser)]
#[command(name = "safeguard", version, about = "Run safeguarded learning scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trajectory.csv, metrics.txt and config.toml.
    Run {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run one scenario per value of a parameter and write summary.csv.
    Sweep {
        /// Built-in scenario name, or the path of a scenario file.
        target: String,
        /// Override key to vary, e.g. `Ks` or `safeguard.mu`.
        parameter: String,
        /// Comma-separated values.
        values: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run every (mode, start) pair of a scenario family and write comparison.csv.
    Compare {
        /// Family prefix, e.g. `robot-case2` or `pendulum`.
        family: String,
        /// Comma-separated mode suffixes; defaults to every registered member of the family.
        #[arg(long)]
        modes: Option<String>,
        /// Semicolon-separated starts, each a comma-separated leading part of x0 (rest zero).
        /// Defaults to the scenario's own x0, or the four standard starts for robot families.
        #[arg(long, allow_hyphen_values = true)]
        starts: Option<String>,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// List built-in scenarios.
    List,
    /// Check that configs parse and build; with no argument, every built-in scenario.
    Validate {
        scenario: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<Override>,
    },
}

#[derive(Args)]
struct Source {
    /// Built-in scenario name (see `list`).
    #[arg(required_unless_present = "config")]
    scenario: Option<String>,
    /// Scenario file instead of a built-in name.
    #[arg(long, conflicts_with = "scenario")]
    config: Option<PathBuf>,
}

impl Source {
    fn from_target(target: &str) -> Self {
        if Path::new(target).is_file() {
            Source { scenario: None, config: Some(target.into()) }
        } else {
            Source { scenario: Some(target.to_string()), config: None }
        }
    }
}

#[derive(Args, Clone)]
struct RunOpts {
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<Override>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Control frequency in Hz.
    #[arg(long)]
    fc: Option<f64>,
}

impl RunOpts {
    /// Flags first, then `--set` in order.
    fn all_overrides(&self) -> Vec<Override> {
        let mut all = Vec::new();
        if let Some(s) = self.seed {
            all.push(Override { key: "seed".into(), value: toml::Value::Integer(s as i64) });
        }
        if let Some(dt) = self.dt {
            all.push(Override { key: "dt".into(), value: toml::Value::Float(dt) });
        }
        if let Some(fc) = self.fc {
            all.push(Override { key: "control_frequency".into(), value: toml::Value::Float(fc) });
        }
        all.extend(self.overrides.iter().cloned());
        all
    }
}

fn load(name: Option<&str>, config: Option<&Path>, seed: Option<u64>) -> Result<ScenarioConfig> {
    match (name, config) {
        (_, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(ScenarioConfig::from_toml(&text)?)
        }
        (Some(name), None) => match scenarios::build(name, seed) {
            Some(cfg) => Ok(cfg),
            None => bail!("unknown scenario `{name}` (try `list`)"),
        },
        (None, None) => bail!("give a scenario name or --config"),
    }
}

fn resolve(source: &Source, opts: &RunOpts) -> Result<ScenarioConfig> {
    let base = load(source.scenario.as_deref(), source.config.as_deref(), opts.seed)?;
    overrides::apply(&base, &opts.all_overrides())
}

/// Runs `cfg` and writes its three output files into `dir`.
fn run_into(cfg: &ScenarioConfig, dir: &Path) -> Result<MetricReport> {
    Scenario::new(cfg.clone())?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?).context("writing config.toml")?;
    let outcome = run_scenario(cfg)?;
    let file = fs::File::create(dir.join("trajectory.csv")).context("creating trajectory.csv")?;
    let mut w = BufWriter::new(file);
    outcome.trajectory.write_csv(&mut w)?;
    w.flush()?;
    fs::write(dir.join("metrics.txt"), outcome.report.to_string()).context("writing metrics.txt")?;
    Ok(outcome.report)
}

fn exit_for(reports: &[&MetricReport]) -> ExitCode {
    if reports.iter().any(|r| r.safety_regression()) {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_run(source: &Source, opts: &RunOpts) -> Result<ExitCode> {
    let cfg = resolve(source, opts)?;
    let report = run_into(&cfg, &opts.out)?;
    print!("{report}");
    Ok(exit_for(&[&report]))
}

fn constraint_columns(report: &MetricReport) -> Vec<String> {
    report.constraints.iter().map(|c| format!("min_psi_{}", c.label)).collect()
}

fn constraint_values(report: &MetricReport) -> Vec<String> {
    report.constraints.iter().map(|c| format!("{:?}", c.min_psi[0])).collect()
}

fn cmd_sweep(source: &Source, parameter: &str, values: &str, opts: &RunOpts) -> Result<ExitCode> {
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let base = resolve(source, opts)?;
    let configs = values
        .iter()
        .map(|v| {
            let o: Override = format!("{parameter}={v}").parse()?;
            overrides::apply(&base, &[o])
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = configs
        .par_iter()
        .zip(&values)
        .map(|(cfg, v)| run_into(cfg, &opts.out.join(format!("{parameter}={v}"))))
        .collect::<Result<Vec<_>>>()?;

    let mut header = vec!["value".to_string(), "J".into()];
    header.extend(constraint_columns(&reports[0]));
    header.extend(["violation".into(), "oscillation_count".into()]);
    let mut rows = vec![header.join(",")];
    for (v, r) in values.iter().zip(&reports) {
        let mut row = vec![v.to_string(), format!("{:?}", r.total_cost)];
        row.extend(constraint_values(r));
        row.extend([r.violation().to_string(), r.oscillation_count.to_string()]);
        rows.push(row.join(","));
    }
    write_table(&opts.out.join("summary.csv"), &rows)?;
    Ok(exit_for(&reports.iter().collect::<Vec<_>>()))
}

fn parse_starts(text: &str) -> Result<Vec<Vec<f64>>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.split(',')
                .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad start coordinate `{x}`")))
                .collect()
        })
        .collect()
}

fn family_members(family: &str) -> Vec<String> {
    let prefix = format!("{family}-");
    scenarios::registry()
        .iter()
        .filter_map(|e| e.name.strip_prefix(&prefix))
        .map(str::to_string)
        .collect()
}

fn cmd_compare(family: &str, modes: Option<&str>, starts: Option<&str>, opts: &RunOpts) -> Result<ExitCode> {
    let modes: Vec<String> = match modes {
        Some(m) => m.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => family_members(family),
    };
    if modes.is_empty() {
        bail!("no modes for family `{family}`");
    }
    let starts: Vec<Option<Vec<f64>>> = match starts {
        Some(s) => parse_starts(s)?.into_iter().map(Some).collect(),
        None if family.starts_with("robot") => {
            scenarios::ROBOT_STARTS.iter().map(|p| Some(p.to_vec())).collect()
        }
        None => vec![None],
    };
    if starts.is_empty() {
        bail!("no starts given");
    }

    let mut jobs = Vec::new();
    for mode in &modes {
        let source = Source { scenario: Some(format!("{family}-{mode}")), config: None };
        let base = resolve(&source, opts)?;
        for (i, start) in starts.iter().enumerate() {
            let mut cfg = base.clone();
            if let Some(p) = start {
                if p.len() > cfg.x0.len() {
                    bail!("start {p:?} is longer than the state ({} entries)", cfg.x0.len());
                }
                cfg.x0 = p.iter().copied().chain(std::iter::repeat(0.0)).take(cfg.x0.len()).collect();
            }
            jobs.push((mode.clone(), i, cfg));
        }
    }
    let reports = jobs
        .par_iter()
        .map(|(mode, i, cfg)| run_into(cfg, &opts.out.join(format!("{mode}/start{i}"))))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = vec!["mode,x0,J,min_psi0,violation,violated_constraints,oscillation_count".to_string()];
    for ((mode, _, cfg), r) in jobs.iter().zip(&reports) {
        let x0: Vec<String> = cfg.x0.iter().map(|x| format!("{x:?}")).collect();
        let hits: Vec<&str> = r.constraints.iter().filter(|c| c.violated()).map(|c| c.label.as_str()).collect();
        rows.push(format!(
            "{mode},{},{:?},{:?},{},{},{}",
            x0.join(" "),
            r.total_cost,
            r.min_psi0().unwrap_or(f64::NAN),
            r.violation(),
            hits.join(" "),
            r.oscillation_count
        ));
    }
    write_table(&opts.out.join("comparison.csv"), &rows)?;
    Ok(exit_for(&reports.iter().collect::<Vec<_>>()))
}

fn write_table(path: &Path, rows: &[String]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = rows.join("\n") + "\n";
    fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn cmd_list() {
    for e in scenarios::registry() {
        println!("{:<26} {}", e.name, e.description);
    }
}

fn cmd_validate(name: Option<&str>, config: Option<&Path>, overrides: &[Override]) -> Result<ExitCode> {
    let configs = if name.is_none() && config.is_none() {
        scenarios::registry()
            .iter()
            .map(|e| (e.build)(scenarios::DEFAULT_SEED))
            .collect()
    } else {
        vec![load(name, config, None)?]
    };
    let mut ok = true;
    for cfg in configs {
        let checked = overrides::apply(&cfg, overrides).and_then(|c| {
            let scenario = Scenario::new(c)?;
            Ok(scenario.feasibility().into_iter().filter(|f| !f.feasible()).count())
        });
        match checked {
            Ok(0) => println!("{}: ok", cfg.name),
            Ok(n) => println!("{}: ok ({n} constraint(s) start outside their feasible set)", cfg.name),
            Err(e) => {
                ok = false;
                println!("{}: {e:#}", cfg.name);
            }
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    // exit 2 is reserved for safety regressions, so usage errors exit 1
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run { source, opts } => cmd_run(source, opts),
        Command::Sweep { target, parameter, values, opts } => {
            cmd_sweep(&Source::from_target(target), parameter, values, opts)
        }
        Command::Compare { family, modes, starts, opts } => {
            cmd_compare(family, modes.as_deref(), starts.as_deref(), opts)
        }
        Command::List => {
            cmd_list();
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { scenario, config, overrides } => {
            cmd_validate(scenario.as_deref(), config.as_deref(), overrides)
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
