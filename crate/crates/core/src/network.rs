//! Time-varying doubly stochastic weight schedules.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::game::doc::MatrixDoc;
use crate::rng::{purpose, stream};
use crate::{Error, Matrix, Result};

/// Row/column sum tolerance for emitted matrices.
pub const STOCHASTIC_TOL: f64 = 1e-12;
const ER_RETRIES: u64 = 100;

type CustomFn = dyn Fn(usize) -> Matrix + Send + Sync;

#[derive(Clone)]
pub enum Generator {
    Static(Arc<Matrix>),
    Cyclic(Vec<Arc<Matrix>>),
    /// Metropolis weights on an Erdos-Renyi graph, redrawn every
    /// `reweave_period` steps (never when `None`).
    ErdosRenyi {
        p: f64,
        seed: u64,
        reweave_period: Option<usize>,
    },
    Custom(Arc<CustomFn>),
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::Static(_) => write!(f, "Static"),
            Generator::Cyclic(ws) => write!(f, "Cyclic({})", ws.len()),
            Generator::ErdosRenyi {
                p,
                seed,
                reweave_period,
            } => write!(f, "ErdosRenyi(p={p}, seed={seed}, reweave={reweave_period:?})"),
            Generator::Custom(_) => write!(f, "Custom"),
        }
    }
}

pub struct GraphSchedule {
    n: usize,
    generator: Generator,
    /// Declared lower bound on positive weights.
    pub varsigma: f64,
    /// Declared joint-connectivity window.
    pub period: usize,
    cache: Mutex<HashMap<usize, Arc<Matrix>>>,
}

impl fmt::Debug for GraphSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GraphSchedule")
            .field("n", &self.n)
            .field("generator", &self.generator)
            .field("varsigma", &self.varsigma)
            .field("period", &self.period)
            .finish()
    }
}

impl Clone for GraphSchedule {
    fn clone(&self) -> Self {
        GraphSchedule {
            n: self.n,
            generator: self.generator.clone(),
            varsigma: self.varsigma,
            period: self.period,
            cache: Mutex::new(self.cache.lock().expect("cache lock").clone()),
        }
    }
}

fn min_positive(w: &Matrix) -> f64 {
    w.iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min)
}

impl GraphSchedule {
    pub fn new(n: usize, generator: Generator, varsigma: f64, period: usize) -> Result<Self> {
        if n == 0 || period == 0 {
            return Err(Error::config("graph schedules need n >= 1 and period >= 1"));
        }
        if let Generator::ErdosRenyi { p, .. } = &generator {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::config(format!("edge probability {p} outside [0, 1]")));
            }
        }
        Ok(GraphSchedule {
            n,
            generator,
            varsigma,
            period,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn fixed(w: Matrix) -> Result<Self> {
        let s = min_positive(&w);
        Self::new(w.nrows(), Generator::Static(Arc::new(w)), s, 1)
    }

    pub fn cyclic(ws: Vec<Matrix>) -> Result<Self> {
        let n = ws.first().map(|w| w.nrows()).ok_or_else(|| Error::config("empty cycle"))?;
        let s = ws.iter().map(min_positive).fold(f64::INFINITY, f64::min);
        let p = ws.len();
        Self::new(n, Generator::Cyclic(ws.into_iter().map(Arc::new).collect()), s, p)
    }

    pub fn erdos_renyi(n: usize, p: f64, seed: u64, reweave_period: Option<usize>) -> Result<Self> {
        let sched = Self::new(
            n,
            Generator::ErdosRenyi {
                p,
                seed,
                reweave_period,
            },
            0.0,
            1,
        )?;
        let w = sched.weights_at(0)?;
        let mut s = min_positive(&w);
        if reweave_period.is_some() {
            // Metropolis weights are at least 1/n
            s = s.min(1.0 / n as f64);
        }
        Ok(GraphSchedule { varsigma: s, ..sched })
    }

    pub fn custom(n: usize, f: impl Fn(usize) -> Matrix + Send + Sync + 'static, varsigma: f64, period: usize) -> Result<Self> {
        Self::new(n, Generator::Custom(Arc::new(f)), varsigma, period)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    fn er_epoch(&self, p: f64, seed: u64, epoch: usize) -> Result<Arc<Matrix>> {
        if let Some(w) = self.cache.lock().expect("cache lock").get(&epoch) {
            return Ok(w.clone());
        }
        for attempt in 0..ER_RETRIES {
            let mut rng = stream(seed, &[purpose::GRAPH, epoch as u64, attempt]);
            let adj = erdos_renyi_adjacency(self.n, p, &mut rng);
            if is_strongly_connected(&adj) {
                let w = Arc::new(metropolis_weights(&adj));
                self.cache.lock().expect("cache lock").insert(epoch, w.clone());
                return Ok(w);
            }
        }
        Err(Error::Validation(format!(
            "no connected Erdos-Renyi graph with n={} p={p} after {ER_RETRIES} draws",
            self.n
        )))
    }

    fn raw(&self, k: usize) -> Result<Arc<Matrix>> {
        match &self.generator {
            Generator::Static(w) => Ok(w.clone()),
            Generator::Cyclic(ws) => Ok(ws[k % ws.len()].clone()),
            Generator::ErdosRenyi {
                p,
                seed,
                reweave_period,
            } => {
                let epoch = reweave_period.map_or(0, |r| k / r.max(1));
                self.er_epoch(*p, *seed, epoch)
            }
            Generator::Custom(f) => Ok(Arc::new(f(k))),
        }
    }

    /// `W_k`, checked to be doubly stochastic.
    pub fn weights_at(&self, k: usize) -> Result<Arc<Matrix>> {
        let w = self.raw(k)?;
        check_doubly_stochastic(&w, self.n, STOCHASTIC_TOL)
            .map_err(|e| Error::Validation(format!("W_{k}: {e}")))?;
        Ok(w)
    }

    /// Checks stochasticity, the weight floor and windowed strong
    /// connectivity over `[0, horizon]`.
    pub fn validate_schedule(&self, horizon: usize) -> ScheduleDiagnostics {
        let mut diag = ScheduleDiagnostics {
            horizon,
            passed: true,
            first_violation: None,
            observed_varsigma: f64::INFINITY,
        };
        let mut mats = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            let w = match self.raw(k) {
                Ok(w) => w,
                Err(e) => {
                    diag.fail(k, ViolationKind::Generator, e.to_string());
                    return diag;
                }
            };
            if let Err(e) = check_doubly_stochastic(&w, self.n, STOCHASTIC_TOL) {
                diag.fail(k, ViolationKind::NotDoublyStochastic, e);
                return diag;
            }
            let s = min_positive(&w);
            diag.observed_varsigma = diag.observed_varsigma.min(s);
            if s < self.varsigma * (1.0 - 1e-12) {
                diag.fail(k, ViolationKind::WeightFloor, format!("positive weight {s:.3e} below declared {:.3e}", self.varsigma));
                return diag;
            }
            if let Some(i) = (0..self.n).find(|&i| w[(i, i)] <= 0.0) {
                diag.fail(k, ViolationKind::WeightFloor, format!("diagonal entry {i} is not positive"));
                return diag;
            }
            mats.push(w);
        }
        if self.n > 1 {
            let p = self.period;
            for t in 0..=horizon.saturating_sub(p - 1) {
                if t + p > mats.len() {
                    break;
                }
                let adj: Vec<Vec<bool>> = (0..self.n)
                    .map(|i| (0..self.n).map(|j| mats[t..t + p].iter().any(|w| w[(i, j)] > 0.0)).collect())
                    .collect();
                if !is_strongly_connected(&adj) {
                    diag.fail(
                        t,
                        ViolationKind::Disconnected,
                        format!("union over steps {t}..{} is not strongly connected", t + p - 1),
                    );
                    return diag;
                }
            }
        }
        diag
    }

    /// Geometric mixing constants and empirical deviations of the
    /// transition products from `1/N` per lag.
    pub fn mixing_diagnostics(&self, k_max: usize) -> Result<MixingReport> {
        let n = self.n;
        let starts: Vec<usize> = (0..self.period.max(3)).collect();
        let mut varsigma = f64::INFINITY;
        let mut devs = vec![0.0f64; k_max + 1];
        let mut truncation_lag: Option<usize> = None;
        let mut doubly_stochastic_ok = true;
        let mut reached = 0;
        for &s in &starts {
            let mut phi = Matrix::identity(n, n);
            for lag in 0..=k_max {
                let w = self.weights_at(s + lag)?;
                varsigma = varsigma.min(min_positive(&w));
                phi = w.as_ref() * phi;
                let dev = phi.iter().map(|x| (x - 1.0 / n as f64).abs()).fold(0.0, f64::max);
                devs[lag] = devs[lag].max(dev);
                reached = reached.max(lag);
                if (lag + 1) % 100 == 0 && check_doubly_stochastic(&phi, n, 1e-9).is_err() {
                    doubly_stochastic_ok = false;
                }
                if dev < 1e-15 {
                    truncation_lag = Some(truncation_lag.map_or(lag, |t| t.max(lag)));
                    break;
                }
            }
        }
        devs.truncate(reached + 1);
        let c = 1.0 - varsigma / (4.0 * (n * n) as f64);
        let theta = c.powi(-2);
        let beta = c.powf(1.0 / self.period as f64);
        let bound_violations = devs
            .iter()
            .enumerate()
            .filter(|(l, d)| **d > theta * beta.powi(*l as i32) * (1.0 + 1e-12))
            .count();
        let fitted_rate = fit_decay_rate(&devs);
        Ok(MixingReport {
            theta,
            beta,
            varsigma,
            period: self.period,
            starts,
            empirical_max_dev: devs,
            bound_violations,
            truncation_lag,
            doubly_stochastic_ok,
            fitted_rate,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ScheduleDocument = serde_json::from_str(s)?;
        let ws = doc
            .matrices
            .iter()
            .map(|m| m.to_matrix().map_err(Error::Parse))
            .collect::<Result<Vec<_>>>()?;
        if ws.iter().any(|w| w.shape() != (doc.n, doc.n)) {
            return Err(Error::dim(format!("all matrices must be {0}x{0}", doc.n)));
        }
        let mut sched = if ws.len() == 1 {
            Self::fixed(ws.into_iter().next().expect("one matrix"))?
        } else {
            Self::cyclic(ws)?
        };
        if let Some(p) = doc.period {
            sched.period = p;
        }
        if let Some(s) = doc.varsigma {
            sched.varsigma = s;
        }
        Ok(sched)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleDocument {
    pub n: usize,
    #[serde(default)]
    pub period: Option<usize>,
    #[serde(default)]
    pub varsigma: Option<f64>,
    pub matrices: Vec<MatrixDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Generator,
    NotDoublyStochastic,
    WeightFloor,
    Disconnected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub k: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleDiagnostics {
    pub horizon: usize,
    pub passed: bool,
    pub first_violation: Option<Violation>,
    pub observed_varsigma: f64,
}

impl ScheduleDiagnostics {
    fn fail(&mut self, k: usize, kind: ViolationKind, detail: String) {
        self.passed = false;
        self.first_violation = Some(Violation { k, kind, detail });
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixingReport {
    pub theta: f64,
    pub beta: f64,
    /// Smallest positive weight actually emitted.
    pub varsigma: f64,
    pub period: usize,
    pub starts: Vec<usize>,
    /// Index `l` holds `max_s max_ij |Phi(s + l, s)_ij - 1/N|`.
    pub empirical_max_dev: Vec<f64>,
    pub bound_violations: usize,
    /// First lag at which deviations fell below double precision resolution.
    pub truncation_lag: Option<usize>,
    pub doubly_stochastic_ok: bool,
    /// `exp` of the least-squares slope of log deviation against lag.
    pub fitted_rate: Option<f64>,
}

impl MixingReport {
    pub fn bound(&self, lag: usize) -> f64 {
        self.theta * self.beta.powi(lag as i32)
    }
}

fn fit_decay_rate(devs: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = devs
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 1e-14)
        .map(|(l, d)| (l as f64, d.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

/// Names the first row or column whose sum is off by more than `tol`.
pub fn check_doubly_stochastic(w: &Matrix, n: usize, tol: f64) -> std::result::Result<(), String> {
    if w.shape() != (n, n) {
        return Err(format!("matrix is {:?}, expected {n}x{n}", w.shape()));
    }
    if let Some((i, j)) = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).find(|&(i, j)| w[(i, j)] < 0.0) {
        return Err(format!("negative entry at ({i}, {j})"));
    }
    for i in 0..n {
        let r = w.row(i).sum();
        if (r - 1.0).abs() > tol {
            return Err(format!("row {i} sums to {r}"));
        }
    }
    for j in 0..n {
        let c = w.column(j).sum();
        if (c - 1.0).abs() > tol {
            return Err(format!("column {j} sums to {c}"));
        }
    }
    Ok(())
}

/// Adjacency without self loops; `adj[i][j]` means an edge `i -> j`.
pub fn is_strongly_connected(adj: &[Vec<bool>]) -> bool {
    let n = adj.len();
    if n <= 1 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut q = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = q.pop_front() {
            for v in 0..n {
                let e = if forward { adj[u][v] } else { adj[v][u] };
                if e && !seen[v] {
                    seen[v] = true;
                    q.push_back(v);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    reach(true) && reach(false)
}

/// Symmetric Erdos-Renyi adjacency.
pub fn erdos_renyi_adjacency<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
    }
    adj
}

/// Metropolis weights `1 / max(|N_i|, |N_j|)` on an undirected graph, with
/// neighbourhoods counting the node itself; the diagonal absorbs the rest.
pub fn metropolis_weights(adj: &[Vec<bool>]) -> Matrix {
    let n = adj.len();
    let size: Vec<usize> = (0..n)
        .map(|i| 1 + (0..n).filter(|&j| j != i && adj[i][j]).count())
        .collect();
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j && adj[i][j] {
                w[(i, j)] = 1.0 / size[i].max(size[j]) as f64;
            }
        }
        w[(i, i)] = 1.0 - w.row(i).sum();
    }
    w
}

pub fn complete(n: usize) -> Matrix {
    Matrix::from_element(n, n, 1.0 / n as f64)
}

pub fn ring_adjacency(n: usize) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j {
            adj[i][j] = true;
            adj[j][i] = true;
        }
    }
    adj
}

pub fn ring_metropolis(n: usize) -> Matrix {
    metropolis_weights(&ring_adjacency(n))
}
