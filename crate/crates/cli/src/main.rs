//! `aggsolve`: generate instances, run and compare experiments, validate
//! schedules and plot traces.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numeric
//! abort (including experiments where some replication aborted).

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aggnash::cournot::{default_inverse_hessian, CournotInstance, HierCournot, Preset, PRESETS};
use aggnash::harness::{compare_regularization, resolve, run_experiment, ExperimentConfig, ExperimentSummary};
use aggnash::network::GraphSchedule;
use aggnash::{Error, Result};
use clap::{Parser, Subcommand};

const EXAMPLE_CONFIG: &str = r#"# aggsolve experiment
horizon = 10000
replications = 20
master_seed = 1
metrics = ["rel_residual", "consensus_error", "gap"]

[game]
preset = "desk-small"

[graph]
kind = "erdos_renyi"
p = 0.5

[schedule]
a = 0.6
b = 0.3
alpha_offset = "uniform(4,5)"
eta_offset = "uniform(2,3)"
"#;

#[derive(Parser)]
#[command(name = "aggsolve", version, about = "Distributed Nash equilibrium experiments for aggregative games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a benchmark instance (or an example config) as JSON/TOML.
    Gen {
        #[arg(long, default_value = "desk-small")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the private follower level.
        #[arg(long)]
        hierarchical: bool,
        /// Print an example experiment config instead.
        #[arg(long, conflicts_with = "hierarchical")]
        template: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a replicated experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run with and without regularization under identical seeds.
    Compare {
        config: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render SVG decay plots from trace CSVs or experiment directories.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long, default_value = "plots")]
        out: PathBuf,
        /// Logarithmic iteration axis.
        #[arg(long)]
        log_x: bool,
    },
    /// Check schedules and graphs of a config, or a graph schedule file.
    Validate {
        /// Experiment config (TOML or JSON).
        config: Option<PathBuf>,
        /// Graph schedule JSON to check on its own.
        #[arg(long, conflicts_with = "config")]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
        /// Lags checked against the mixing bound.
        #[arg(long, default_value_t = 200)]
        lags: usize,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Output directory; defaults to the config's `out`, then
    /// `$AGGSOLVE_OUT/<config name>`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, env = "AGGSOLVE_OUT", hide_env_values = true)]
    out_root: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn apply(&self, path: &Path) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(r) = self.replications {
            cfg.replications = r;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        cfg.validate()?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "experiment".into());
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| self.out_root.clone().unwrap_or_else(|| PathBuf::from("runs")).join(name));
        Ok((cfg, out))
    }
}

fn print_summary(label: &str, s: &ExperimentSummary) {
    println!("{label}: {}/{} replications completed", s.completed, s.replications);
    for (name, v) in &s.final_metrics {
        match s.slopes.get(name) {
            Some(fit) => println!("  {name:<16} {v:>12.4e}  last-decade slope {:>7.3}", fit.slope),
            None => println!("  {name:<16} {v:>12.4e}"),
        }
    }
    if !s.schedule_report.passed {
        println!("  schedule conditions not met: {}", s.schedule_report.violations.join("; "));
    }
    if !s.graph_report.passed {
        if let Some(v) = &s.graph_report.first_violation {
            println!("  graph schedule invalid at k={}: {}", v.k, v.detail);
        }
    }
    for (r, e) in &s.failures {
        println!("  replication {r} aborted: {e}");
    }
}

fn partial(s: &ExperimentSummary) -> Result<()> {
    if s.partial {
        let (r, e) = &s.failures[0];
        return Err(Error::Numeric {
            message: format!("{} of {} replications aborted (first: replication {r}: {e})", s.failures.len(), s.replications),
            residual: f64::NAN,
        });
    }
    Ok(())
}

fn gen(preset: &str, seed: u64, hierarchical: bool, template: bool, output: Option<PathBuf>) -> Result<()> {
    let text = if template {
        EXAMPLE_CONFIG.to_string()
    } else {
        let p = Preset::by_name(preset)?;
        let inst = CournotInstance::generate(&p.spec, seed)?;
        if hierarchical {
            serde_json::to_string_pretty(&HierCournot::generate(inst, default_inverse_hessian(), seed)?)?
        } else {
            serde_json::to_string_pretty(&inst)?
        }
    };
    match output {
        Some(path) => {
            fs::write(&path, text)?;
            println!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn validate_graph(sched: &GraphSchedule, horizon: usize, lags: usize) -> Result<bool> {
    let diag = sched.validate_schedule(horizon);
    match &diag.first_violation {
        None => println!("graph schedule: valid over k <= {horizon}, smallest weight {:.3e}", diag.observed_varsigma),
        Some(v) => println!("graph schedule: invalid at k={}: {:?}: {}", v.k, v.kind, v.detail),
    }
    let mix = sched.mixing_diagnostics(lags)?;
    println!(
        "mixing: theta={:.3e} beta={:.6} period={} bound violations={} fitted rate={}",
        mix.theta,
        mix.beta,
        mix.period,
        mix.bound_violations,
        mix.fitted_rate.map_or("n/a".into(), |r| format!("{r:.4}"))
    );
    Ok(diag.passed && mix.bound_violations == 0 && mix.doubly_stochastic_ok)
}

fn validate(config: Option<PathBuf>, graph: Option<PathBuf>, horizon: usize, lags: usize) -> Result<()> {
    let ok = match (config, graph) {
        (_, Some(g)) => validate_graph(&GraphSchedule::from_json(&fs::read_to_string(g)?)?, horizon, lags)?,
        (Some(c), None) => {
            let resolved = resolve(&ExperimentConfig::load(&c)?)?;
            let rep = &resolved.schedule_report;
            println!("schedules: {}", if rep.passed { "admissible" } else { "NOT admissible" });
            for v in &rep.violations {
                println!("  violation: {v}");
            }
            for w in &rep.warnings {
                println!("  warning: {w}");
            }
            if let Some(case) = rep.case {
                println!("  rate regime {case}");
            }
            let graph_ok = validate_graph(&resolved.graph, horizon, lags)?;
            rep.passed && graph_ok
        }
        (None, None) => return Err(Error::Config("give a config file or --graph".into())),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Validation("checks failed".into()))
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen {
            preset,
            seed,
            hierarchical,
            template,
            output,
        } => gen(&preset, seed, hierarchical, template, output),
        Command::Run { config, run } => {
            let (cfg, out) = run.apply(&config)?;
            let outcome = run_experiment(&cfg, Some(&out))?;
            print_summary("run", &outcome.summary);
            println!("outputs in {}", out.display());
            partial(&outcome.summary)
        }
        Command::Compare { config, run } => {
            let (cfg, out) = run.apply(&config)?;
            let (cmp, _, _) = compare_regularization(&cfg, Some(&out))?;
            print_summary("regularized", &cmp.regularized);
            print_summary("unregularized", &cmp.unregularized);
            println!("{:<16} {:>12} {:>12} {:>8}", "metric", "regularized", "plain", "ratio");
            for (name, (a, b, r)) in &cmp.table {
                println!("{name:<16} {a:>12.4e} {b:>12.4e} {r:>8.3}");
            }
            println!("outputs in {}", out.display());
            partial(&cmp.regularized).and(partial(&cmp.unregularized))
        }
        Command::Plot { inputs, out, log_x } => {
            let series = plot::collect(&inputs)?;
            let (written, skipped) = plot::plot_all(&series, &out, log_x)?;
            for name in skipped {
                eprintln!("skipping `{name}`: no positive finite values");
            }
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Validate {
            config,
            graph,
            horizon,
            lags,
        } => validate(config, graph, horizon, lags),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) && e.to_string().contains("unknown preset") {
                eprintln!("available presets: {}", PRESETS.join(", "));
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
