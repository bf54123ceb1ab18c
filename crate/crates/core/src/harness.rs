//! Replicated experiments: configuration, seed derivation, trace output
//! and summaries.
//!
//! Replication `r` runs with seed `derive_seed(master_seed, [r])`; inside a
//! run, player `i` draws its oracle noise from
//! `stream(replication_seed, [ORACLE, i])` (see [`crate::rng`]), so any single
//! player can be replayed externally.
//!
//! Output layout of `run_experiment`:
//!
//! ```text
//! out/
//!   resolved_config.json   config with every random draw made explicit
//!   run_000.csv/.json      per-replication trace and sidecar
//!   averaged.csv           columnwise mean over completed replications
//!   summary.json           final values, fitted slopes, validation reports
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cournot::{default_inverse_hessian, CournotInstance, HierCournot, Preset};
use crate::game::GameSpec;
use crate::metrics::{last_decade_fit, GapOptions, LineFit, Metric};
use crate::network::{complete, ring_metropolis, GraphSchedule, ScheduleDiagnostics};
use crate::rng::{derive_seed, purpose, stream, uniform};
use crate::schedules::{ParamSchedules, ScheduleReport};
use crate::solver::{run_algorithm1, run_algorithm2, HierarchicalTerm, RunConfig, RunTrace, Table, TRACE_SCHEMA};
use crate::{Error, Result};

/// Where the game comes from: a named preset or a JSON file holding a game
/// document, a Cournot instance, or a hierarchical Cournot instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Instance seed for presets; the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphConfig {
    Complete,
    Ring,
    ErdosRenyi {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        /// Redraw the graph every this many iterations.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reweave: Option<usize>,
    },
    File {
        path: PathBuf,
    },
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig::ErdosRenyi {
            p: None,
            seed: None,
            reweave: None,
        }
    }
}

/// Per-player offsets: one value for all, an explicit list, or a
/// distribution string such as `"uniform(4,5)"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Offsets {
    Fixed(f64),
    List(Vec<f64>),
    Dist(String),
}

impl Offsets {
    fn uniform(lo: f64, hi: f64) -> Self {
        Offsets::Dist(format!("uniform({lo},{hi})"))
    }

    pub fn resolve(&self, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        match self {
            Offsets::Fixed(v) => Ok(vec![*v; n]),
            Offsets::List(v) if v.len() == n => Ok(v.clone()),
            Offsets::List(v) => Err(Error::dim(format!("{} offsets for {n} players", v.len()))),
            Offsets::Dist(s) => {
                let (lo, hi) = parse_uniform(s)?;
                Ok((0..n).map(|_| uniform(lo, hi, rng)).collect())
            }
        }
    }
}

fn parse_uniform(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::config(format!("expected `uniform(lo,hi)`, got `{s}`"));
    let inner = s
        .trim()
        .strip_prefix("uniform(")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(bad)?;
    let (lo, hi) = inner.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo <= hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Unset fields fall back to the preset's values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_offset: Option<Offsets>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_offset: Option<Offsets>,
    /// Smoothing radius `mu0 (k + 1)^-mu_exponent` (hierarchical only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_exponent: Option<f64>,
    /// Follower accuracy `eps0 (k + 1)^-eps_exponent`; zero uses exact
    /// follower responses.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_exponent: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Tikhonov,
    Hierarchical,
    Unregularized,
}

fn twenty() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub game: GameSource,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub solver: SolverKind,
    pub horizon: usize,
    #[serde(default = "twenty")]
    pub replications: usize,
    /// Regular recording interval; `horizon / 100` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub noise_free: bool,
    #[serde(default)]
    pub gap: GapOptions,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::RelResidual, Metric::ConsensusError]
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// TOML for `.toml` files, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text)?,
            _ => Self::from_json_str(&text)?,
        };
        // relative files are resolved against the config's directory
        if let Some(dir) = path.parent() {
            if let Some(f) = &mut cfg.game.file {
                if f.is_relative() {
                    *f = dir.join(&*f);
                }
            }
            if let GraphConfig::File { path: p } = &mut cfg.graph {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::config("replications must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        match (&self.game.preset, &self.game.file) {
            (Some(p), None) => {
                Preset::by_name(p)?;
            }
            (None, Some(_)) => {}
            _ => return Err(Error::config("game source needs exactly one of `preset` or `file`")),
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be at least 1"));
        }
        Ok(())
    }

    fn preset(&self) -> Result<Option<Preset>> {
        self.game.preset.as_deref().map(Preset::by_name).transpose()
    }
}

/// Everything a replication needs, built once per experiment.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub game: GameSpec,
    pub hier: Option<Vec<HierarchicalTerm>>,
    pub graph: GraphSchedule,
    pub params: ParamSchedules,
    pub schedule_report: ScheduleReport,
    pub graph_report: ScheduleDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum GameFile {
    Hier(HierCournot),
    Cournot(CournotInstance),
    Game(crate::game::GameDocument),
}

/// Builds the game, graph and schedules, and returns a copy of the config
/// with every random draw written out.
pub fn resolve(cfg: &ExperimentConfig) -> Result<Resolved> {
    cfg.validate()?;
    let preset = cfg.preset()?;
    let hierarchical_solver = cfg.solver == SolverKind::Hierarchical;
    let (game, hier) = match (&preset, &cfg.game.file) {
        (Some(p), _) => {
            let seed = cfg.game.instance_seed.unwrap_or(cfg.master_seed);
            let inst = CournotInstance::generate(&p.spec, seed)?;
            let hier = if hierarchical_solver {
                if !p.hierarchical {
                    return Err(Error::config(format!("preset `{}` has no hierarchical terms", p.name)));
                }
                Some(HierCournot::generate(inst.clone(), default_inverse_hessian(), seed)?.terms()?)
            } else {
                None
            };
            (inst.to_game()?, hier)
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            match serde_json::from_str::<GameFile>(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))? {
                GameFile::Hier(h) => {
                    let terms = hierarchical_solver.then(|| h.terms()).transpose()?;
                    (h.base.to_game()?, terms)
                }
                GameFile::Cournot(c) => (c.to_game()?, None),
                GameFile::Game(doc) => (GameSpec::from_document(doc)?, None),
            }
        }
        (None, None) => unreachable!("validated"),
    };
    if hierarchical_solver && hier.is_none() {
        return Err(Error::config("the hierarchical solver needs a hierarchical instance"));
    }
    let n = game.n_players();
    let s = &cfg.schedule;
    let a = s.a.or(preset.as_ref().map(|p| p.alpha_exponent)).unwrap_or(0.8);
    let b = s.b.or(preset.as_ref().map(|p| p.eta_exponent)).unwrap_or(0.05);
    let alpha_off = s
        .alpha_offset
        .clone()
        .unwrap_or_else(|| preset.as_ref().map_or(Offsets::uniform(4.0, 5.0), |p| Offsets::uniform(p.alpha_offset.0, p.alpha_offset.1)));
    let eta_off = s
        .eta_offset
        .clone()
        .unwrap_or_else(|| preset.as_ref().map_or(Offsets::uniform(2.0, 3.0), |p| Offsets::uniform(p.eta_offset.0, p.eta_offset.1)));
    let mut rng = stream(cfg.master_seed, &[purpose::OFFSETS]);
    let lambdas = alpha_off.resolve(n, &mut rng)?;
    let deltas = eta_off.resolve(n, &mut rng)?;
    let mut params = ParamSchedules::power(a, b, &lambdas, &deltas)?;
    let mut resolved_sched = ScheduleConfig {
        a: Some(a),
        b: Some(b),
        alpha_offset: Some(Offsets::List(lambdas)),
        eta_offset: Some(Offsets::List(deltas)),
        ..s.clone()
    };
    let schedule_report = if hierarchical_solver {
        let mu_exp = s
            .mu_exponent
            .or(preset.as_ref().and_then(|p| p.smoothing_exponent))
            .unwrap_or(0.24);
        let mu0 = s.mu0.unwrap_or(1.0);
        let eps0 = s.eps0.unwrap_or(0.0);
        let eps_exp = s.eps_exponent.unwrap_or(a + 2.0 * mu_exp + 0.1);
        params = params.with_smoothing(mu0, mu_exp, eps0, eps_exp);
        if eps0 == 0.0 {
            params.eps = None;
        }
        resolved_sched.mu0 = Some(mu0);
        resolved_sched.mu_exponent = Some(mu_exp);
        resolved_sched.eps0 = Some(eps0);
        resolved_sched.eps_exponent = Some(eps_exp);
        params.validate_hierarchical()
    } else {
        params.validate_basic()?
    };

    let mut resolved_graph = cfg.graph.clone();
    let graph = match &cfg.graph {
        GraphConfig::Complete => GraphSchedule::fixed(complete(n))?,
        GraphConfig::Ring => GraphSchedule::fixed(ring_metropolis(n))?,
        GraphConfig::ErdosRenyi { p, seed, reweave } => {
            let p = p.or(preset.as_ref().map(|pr| pr.edge_probability)).unwrap_or(0.2);
            let seed = seed.unwrap_or_else(|| derive_seed(cfg.master_seed, &[purpose::GRAPH]));
            resolved_graph = GraphConfig::ErdosRenyi {
                p: Some(p),
                seed: Some(seed),
                reweave: *reweave,
            };
            GraphSchedule::erdos_renyi(n, p, seed, *reweave)?
        }
        GraphConfig::File { path } => GraphSchedule::from_json(&fs::read_to_string(path)?)?,
    };
    if graph.n() != n {
        return Err(Error::dim(format!("graph has {} nodes for {n} players", graph.n())));
    }
    let graph_report = graph.validate_schedule(cfg.horizon.min(1000));

    let mut config = cfg.clone();
    config.schedule = resolved_sched;
    config.graph = resolved_graph;
    config.game.instance_seed = preset.is_some().then(|| cfg.game.instance_seed.unwrap_or(cfg.master_seed));
    Ok(Resolved {
        config,
        game,
        hier,
        graph,
        params,
        schedule_report,
        graph_report,
    })
}

/// Per-replication seed.
pub fn replication_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, &[r as u64])
}

fn record_every(cfg: &ExperimentConfig) -> usize {
    cfg.record_every.unwrap_or((cfg.horizon / 100).max(1))
}

/// Decade indices `1, 10, ...` up to the horizon, plus any configured ones.
fn checkpoints(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut c = cfg.checkpoints.clone();
    let mut p = 1;
    while p <= cfg.horizon {
        c.push(p);
        p *= 10;
    }
    c.sort_unstable();
    c.dedup();
    c
}

impl Resolved {
    pub fn run_config(&self, r: usize) -> RunConfig {
        let cfg = &self.config;
        RunConfig {
            horizon: cfg.horizon,
            record_every: record_every(cfg),
            checkpoints: checkpoints(cfg),
            metrics: cfg.metrics.clone(),
            seed: replication_seed(cfg.master_seed, r),
            noise_free: cfg.noise_free,
            unregularized: cfg.solver == SolverKind::Unregularized,
            gap: cfg.gap.clone(),
            ..RunConfig::default()
        }
    }

    pub fn run_replication(&self, r: usize) -> Result<RunTrace> {
        let rc = self.run_config(r);
        match (&self.hier, self.config.solver) {
            (Some(terms), SolverKind::Hierarchical) => run_algorithm2(&self.game, terms, &self.graph, &self.params, &rc),
            _ => run_algorithm1(&self.game, &self.graph, &self.params, &rc),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema: u32,
    pub replications: usize,
    pub completed: usize,
    /// Some replication aborted; averages cover the completed ones.
    pub partial: bool,
    pub failures: Vec<(usize, String)>,
    /// Averaged value of every metric at the last recorded index.
    pub final_metrics: BTreeMap<String, f64>,
    /// Log-log fits over the last decade of the averaged columns.
    pub slopes: BTreeMap<String, LineFit>,
    pub schedule_report: ScheduleReport,
    pub graph_report: ScheduleDiagnostics,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub traces: Vec<Option<RunTrace>>,
    pub averaged: Option<Table>,
}

/// Runs every replication (concurrently up to `workers`), writes per-run
/// traces, the averaged table and the summary into `out` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let resolved = resolve(cfg)?;
    let results = run_all(&resolved)?;
    let outcome = summarize(&resolved, results)?;
    if let Some(dir) = out {
        write_outputs(dir, &resolved, &outcome)?;
    }
    Ok(outcome)
}

fn run_all(resolved: &Resolved) -> Result<Vec<Result<RunTrace>>> {
    let reps = resolved.config.replications;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let workers = resolved.config.workers.unwrap_or_else(rayon::current_num_threads);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(|| (0..reps).into_par_iter().map(|r| resolved.run_replication(r)).collect()))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok((0..reps).map(|r| resolved.run_replication(r)).collect())
    }
}

fn summarize(resolved: &Resolved, results: Vec<Result<RunTrace>>) -> Result<ExperimentOutcome> {
    let mut failures = Vec::new();
    let mut traces = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(t) => traces.push(Some(t)),
            Err(e) => {
                log::error!("replication {r} aborted: {e}");
                failures.push((r, e.to_string()));
                traces.push(None);
            }
        }
    }
    let tables: Vec<Table> = traces.iter().flatten().map(Table::from).collect();
    let averaged = if tables.is_empty() { None } else { Some(Table::mean(&tables)?) };
    let mut final_metrics = BTreeMap::new();
    let mut slopes = BTreeMap::new();
    if let Some(avg) = &averaged {
        for (name, col) in &avg.columns {
            if let Some(v) = col.last() {
                final_metrics.insert(name.clone(), *v);
            }
            if let Some(fit) = last_decade_fit(&avg.ks, col) {
                slopes.insert(name.clone(), fit);
            }
        }
    }
    let summary = ExperimentSummary {
        schema: TRACE_SCHEMA,
        replications: resolved.config.replications,
        completed: tables.len(),
        partial: !failures.is_empty(),
        failures,
        final_metrics,
        slopes,
        schedule_report: resolved.schedule_report.clone(),
        graph_report: resolved.graph_report.clone(),
        config: resolved.config.clone(),
    };
    Ok(ExperimentOutcome {
        summary,
        traces,
        averaged,
    })
}

fn write_outputs(dir: &Path, resolved: &Resolved, outcome: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved_config.json"), serde_json::to_string_pretty(&resolved.config)?)?;
    for (r, t) in outcome.traces.iter().enumerate() {
        if let Some(t) = t {
            t.save(dir, &format!("run_{r:03}"))?;
        }
    }
    if let Some(avg) = &outcome.averaged {
        avg.write(fs::File::create(dir.join("averaged.csv"))?)?;
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome.summary)?)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub regularized: ExperimentSummary,
    pub unregularized: ExperimentSummary,
    /// Per metric: final averaged value of each arm and their ratio
    /// (unregularized over regularized).
    pub table: BTreeMap<String, (f64, f64, f64)>,
}

/// Runs the configured schedules with and without regularization under
/// identical seeds and graphs. Writes `regularized/`, `unregularized/` and a
/// paired `comparison.csv` into `out` when given.
pub fn compare_regularization(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(ComparisonSummary, ExperimentOutcome, ExperimentOutcome)> {
    if cfg.solver == SolverKind::Hierarchical {
        return Err(Error::config("regularization comparison runs the plain scheme"));
    }
    let mut reg = cfg.clone();
    reg.solver = SolverKind::Tikhonov;
    let mut unreg = cfg.clone();
    unreg.solver = SolverKind::Unregularized;
    let a = run_experiment(&reg, out.map(|d| d.join("regularized")).as_deref())?;
    let b = run_experiment(&unreg, out.map(|d| d.join("unregularized")).as_deref())?;
    let mut table = BTreeMap::new();
    for (name, va) in &a.summary.final_metrics {
        if let Some(vb) = b.summary.final_metrics.get(name) {
            table.insert(name.clone(), (*va, *vb, vb / va));
        }
    }
    if let (Some(dir), Some(ta), Some(tb)) = (out, &a.averaged, &b.averaged) {
        let mut columns = Vec::new();
        for (name, col) in &ta.columns {
            columns.push((format!("{name}_regularized"), col.clone()));
            if let Some(other) = tb.column(name) {
                columns.push((format!("{name}_unregularized"), other.to_vec()));
            }
        }
        Table {
            ks: ta.ks.clone(),
            columns,
        }
        .write(fs::File::create(dir.join("comparison.csv"))?)?;
    }
    let summary = ComparisonSummary {
        regularized: a.summary.clone(),
        unregularized: b.summary.clone(),
        table,
    };
    if let Some(dir) = out {
        fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok((summary, a, b))
}
