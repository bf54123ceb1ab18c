//! Distributed regularized proximal stochastic gradient scheme and its
//! smoothed hierarchical variant.
//!
//! One iteration, for every player `i`:
//!
//! 1. consensus: `v_hat_i = sum_j W_k[i, j] v_j`
//! 2. strategy: `x_i+ = prox(x_i - alpha (q_i(x_i, N v_hat_i) + eta x_i))`
//! 3. tracking: `v_i+ = v_hat_i + h_i(x_i+) - h_i(x_i)`
//!
//! The tracking step keeps `sum_i v_i = sigma(x)` exactly, which the runner
//! checks after every iteration.

pub mod hierarchical;
mod trace;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::game::{GameSpec, PlayerSpec};
use crate::metrics::{GapOptions, Metric, TimeAverage};
use crate::network::GraphSchedule;
use crate::rng::{purpose, stream};
use crate::schedules::ParamSchedules;
use crate::{stack, Error, Matrix, Result, Vector};

pub use hierarchical::{
    grad_estimator, run_algorithm2, smoothed_ne_gap_bound_check, smoothed_value, solve_lower_vi, HierarchicalTerm,
    LowerRun, LowerSolve, LowerVi, ProximityReport, SubgradientSet, PROXIMITY_TOL,
};
pub use trace::{RunTrace, Table, TRACE_SCHEMA};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub horizon: usize,
    pub record_every: usize,
    /// Extra iteration indices to record besides the regular grid.
    pub checkpoints: Vec<usize>,
    pub metrics: Vec<Metric>,
    pub seed: u64,
    /// Use mean gradients instead of oracle samples.
    pub noise_free: bool,
    /// Drop the regularization term (`eta = 0`).
    pub unregularized: bool,
    /// Initial joint strategy; defaults to the prox of the origin.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Keep the joint iterate at every recorded index.
    pub keep_iterates: bool,
    pub parallel: bool,
    pub gap: GapOptions,
    /// Override for the aggregate-conservation abort threshold.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conservation_tol: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            horizon: 1000,
            record_every: 100,
            checkpoints: Vec::new(),
            metrics: vec![Metric::Residual, Metric::ConsensusError],
            seed: 0,
            noise_free: false,
            unregularized: false,
            x0: None,
            keep_iterates: false,
            parallel: false,
            gap: GapOptions::default(),
            conservation_tol: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every must be at least 1"));
        }
        Ok(())
    }

    fn records(&self, k: usize) -> bool {
        k == 0 || k == self.horizon || k % self.record_every == 0 || self.checkpoints.contains(&k)
    }
}

/// Per-iteration solver state.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub k: usize,
    pub x: Vec<Vector>,
    pub v: Vec<Vector>,
    pub v_hat: Vec<Vector>,
    pub rngs: Vec<ChaCha8Rng>,
}

impl SolverState {
    /// `v_i = h_i(x_i)` and one oracle stream per player.
    pub fn new(game: &GameSpec, x0: &Vector, seed: u64) -> Result<Self> {
        let x = game.split(x0)?;
        let v: Vec<Vector> = game
            .players
            .iter()
            .zip(&x)
            .map(|(p, xi)| p.model.contribution(xi))
            .collect();
        Ok(SolverState {
            k: 0,
            v_hat: v.clone(),
            v,
            rngs: (0..game.n_players())
                .map(|i| stream(seed, &[purpose::ORACLE, i as u64]))
                .collect(),
            x,
        })
    }

    pub fn joint_x(&self) -> Vector {
        stack(&self.x)
    }

    /// `|| sum_i v_i - sigma(x) ||_inf`.
    pub fn conservation_drift(&self, game: &GameSpec) -> Result<f64> {
        let sigma = game.aggregate_blocks(&self.x)?;
        let total: Vector = self.v.iter().fold(Vector::zeros(game.agg_dim()), |acc, v| acc + v);
        Ok((total - sigma).amax())
    }
}

/// `v_hat_i = sum_j W[i, j] v_j`.
pub fn consensus_step(w: &Matrix, v: &[Vector]) -> Result<Vec<Vector>> {
    let n = v.len();
    if w.shape() != (n, n) {
        return Err(Error::dim(format!("weight matrix is {:?} for {n} blocks", w.shape())));
    }
    let m = v.first().map_or(0, |b| b.len());
    if v.iter().any(|b| b.len() != m) {
        return Err(Error::dim("estimate blocks have different lengths"));
    }
    Ok((0..n)
        .map(|i| {
            let mut acc = Vector::zeros(m);
            for (j, vj) in v.iter().enumerate() {
                let wij = w[(i, j)];
                if wij != 0.0 {
                    acc.axpy(wij, vj, 1.0);
                }
            }
            acc
        })
        .collect())
}

/// One regularized prox-gradient step from the aggregate estimate
/// `N v_hat`. `noise_free` swaps the oracle sample for the mean gradient.
#[allow(clippy::too_many_arguments)]
pub fn strategy_step(
    player: &PlayerSpec,
    x: &Vector,
    v_hat: &Vector,
    n_players: usize,
    alpha: f64,
    eta: f64,
    noise_free: bool,
    rng: &mut dyn RngCore,
) -> Result<Vector> {
    strategy_update(player, x, v_hat, n_players, alpha, eta, noise_free, None, rng)
}

#[allow(clippy::too_many_arguments)]
fn strategy_update(
    player: &PlayerSpec,
    x: &Vector,
    v_hat: &Vector,
    n_players: usize,
    alpha: f64,
    eta: f64,
    noise_free: bool,
    extra: Option<&Vector>,
    rng: &mut dyn RngCore,
) -> Result<Vector> {
    if !(eta >= 0.0) {
        return Err(Error::config(format!("regularization must be nonnegative, got {eta}")));
    }
    let z = v_hat * n_players as f64;
    let mut q = if noise_free {
        player
            .model
            .mean_grad(x, &z)
            .ok_or_else(|| Error::Unsupported("noise-free run needs a mean gradient".into()))?
    } else {
        player.model.sample_grad(x, &z, rng)?
    };
    if let Some(g) = extra {
        q += g;
    }
    let step = x - (q + x * eta) * alpha;
    player.prox(alpha, &step)
}

/// `v_i+ = v_hat_i + h_i(x_i+) - h_i(x_i)`.
pub fn average_step(player: &PlayerSpec, v_hat: &Vector, x: &Vector, x_next: &Vector) -> Vector {
    v_hat + player.model.contribution(x_next) - player.model.contribution(x)
}

/// Runs the distributed scheme for `cfg.horizon` iterations.
pub fn run_algorithm1(
    game: &GameSpec,
    sched: &GraphSchedule,
    params: &ParamSchedules,
    cfg: &RunConfig,
) -> Result<RunTrace> {
    run_inner(game, sched, params, cfg, None)
}

/// Hierarchical terms plus the per-player gradient they contribute.
pub(crate) struct Hier<'a> {
    pub terms: &'a [HierarchicalTerm],
    pub extra: ExtraTerm<'a>,
}

/// Per-player additive gradient term (the smoothed hierarchical part).
pub(crate) type ExtraTerm<'a> = &'a (dyn Fn(usize, usize, &Vector) -> Result<Vector> + Sync);

pub(crate) fn initial_point(game: &GameSpec, cfg: &RunConfig) -> Result<Vector> {
    match &cfg.x0 {
        Some(x0) => {
            let x = Vector::from_column_slice(x0);
            if x.len() != game.total_dim() {
                return Err(Error::dim(format!(
                    "initial point has length {} but the game has dimension {}",
                    x.len(),
                    game.total_dim()
                )));
            }
            if game.sets().is_some() && !game.contains(&x, 1e-9) {
                return Err(Error::config("initial point is not feasible"));
            }
            Ok(x)
        }
        None => game.prox(1.0, &Vector::zeros(game.total_dim())),
    }
}

pub(crate) fn run_inner(
    game: &GameSpec,
    sched: &GraphSchedule,
    params: &ParamSchedules,
    cfg: &RunConfig,
    hier: Option<Hier<'_>>,
) -> Result<RunTrace> {
    let extra = hier.as_ref().map(|h| h.extra);
    cfg.validate()?;
    let n = game.n_players();
    if sched.n() != n {
        return Err(Error::dim(format!("graph has {} nodes for {n} players", sched.n())));
    }
    if params.n_players() != n || params.eta.len() != n {
        return Err(Error::dim(format!("schedules cover {} players, game has {n}", params.n_players())));
    }
    let x0 = initial_point(game, cfg)?;
    let mut state = SolverState::new(game, &x0, cfg.seed)?;
    let mut recorder = trace::Recorder::new(cfg, hier.as_ref().map(|h| h.terms));
    let mut avg = TimeAverage::new(x0.len());
    let mut max_drift: f64 = 0.0;
    let mut drift_scale: f64 = 0.0;

    recorder.record(game, &state, &x0, 0.0)?;

    for k in 0..cfg.horizon {
        avg.push(&state.joint_x(), params.alpha_max(k));
        let w = sched.weights_at(k)?;
        state.v_hat = consensus_step(&w, &state.v)?;

        let step = |i: usize, x: &Vector, v_hat: &Vector, rng: &mut ChaCha8Rng| -> Result<(Vector, Vector)> {
            let player = &game.players[i];
            let alpha = params.alpha(i, k);
            let eta = if cfg.unregularized { 0.0 } else { params.eta(i, k) };
            let g = extra.map(|f| f(i, k, x)).transpose()?;
            let x_next = strategy_update(player, x, v_hat, n, alpha, eta, cfg.noise_free, g.as_ref(), rng)
                .map_err(|e| Error::Oracle {
                    player: i,
                    iteration: k,
                    source: Box::new(e),
                })?;
            let v_next = average_step(player, v_hat, x, &x_next);
            Ok((x_next, v_next))
        };

        let updates: Vec<(Vector, Vector)> = update_players(&mut state, cfg.parallel, &step)?;
        for (i, (xn, vn)) in updates.into_iter().enumerate() {
            state.x[i] = xn;
            state.v[i] = vn;
        }
        state.k = k + 1;

        let drift = state.conservation_drift(game)?;
        let scale = state
            .x
            .iter()
            .zip(&game.players)
            .map(|(x, p)| p.model.contribution(x).norm())
            .fold(0.0, f64::max);
        max_drift = max_drift.max(drift);
        drift_scale = drift_scale.max(scale);
        let tol = cfg
            .conservation_tol
            .unwrap_or(1e-6 * n as f64 * (1.0 + scale));
        if !(drift <= tol) {
            let dump = serde_json::json!({
                "x": state.x.iter().map(|b| b.as_slice().to_vec()).collect::<Vec<_>>(),
                "v": state.v.iter().map(|b| b.as_slice().to_vec()).collect::<Vec<_>>(),
            });
            return Err(Error::Invariant {
                iteration: k + 1,
                message: format!("aggregate conservation drift {drift:.3e} exceeds {tol:.3e}"),
                dump: dump.to_string(),
            });
        }

        if cfg.records(k + 1) {
            recorder.record(game, &state, &avg.value(), drift)?;
        }
    }

    Ok(recorder.finish(state.joint_x(), avg.value(), max_drift, drift_scale, cfg))
}

type StepFn<'a> = dyn Fn(usize, &Vector, &Vector, &mut ChaCha8Rng) -> Result<(Vector, Vector)> + Sync + 'a;

fn update_players(state: &mut SolverState, parallel: bool, step: &StepFn<'_>) -> Result<Vec<(Vector, Vector)>> {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        let x = &state.x;
        let v_hat = &state.v_hat;
        return state
            .rngs
            .par_iter_mut()
            .enumerate()
            .map(|(i, rng)| step(i, &x[i], &v_hat[i], rng))
            .collect();
    }
    let _ = parallel;
    let x = &state.x;
    let v_hat = &state.v_hat;
    state
        .rngs
        .iter_mut()
        .enumerate()
        .map(|(i, rng)| step(i, &x[i], &v_hat[i], rng))
        .collect()
}

/// Centralized reference: `x+ = prox(x - alpha_i (phi_i(x) + eta_i x_i))`
/// with exact aggregates. Returns the iterates `x_0 .. x_K`.
pub fn centralized_reference(
    game: &GameSpec,
    params: &ParamSchedules,
    x0: &Vector,
    horizon: usize,
    unregularized: bool,
) -> Result<Vec<Vector>> {
    let mut xs = vec![x0.clone()];
    let mut x = x0.clone();
    for k in 0..horizon {
        let blocks = game.split(&x)?;
        let phi = game.phi_blocks(&blocks)?;
        let next = blocks
            .iter()
            .zip(&phi)
            .enumerate()
            .map(|(i, (xi, gi))| {
                let eta = if unregularized { 0.0 } else { params.eta(i, k) };
                let alpha = params.alpha(i, k);
                game.players[i].prox(alpha, &(xi - (gi + xi * eta) * alpha))
            })
            .collect::<Result<Vec<_>>>()?;
        x = stack(&next);
        xs.push(x.clone());
    }
    Ok(xs)
}
