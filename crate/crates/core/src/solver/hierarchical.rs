//! Hierarchical terms `d_i(x_i, y_i(x_i))` whose follower response solves a
//! private strongly monotone VI, their ball smoothing, the two-point sphere
//! gradient estimator, and the smoothed distributed scheme.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use log::warn;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{run_inner, Hier, RunConfig, RunTrace};
use crate::game::{ConvexSet, GameSpec};
use crate::network::GraphSchedule;
use crate::rng::{purpose, stream, unit_ball, unit_sphere};
use crate::schedules::ParamSchedules;
use crate::{stack, Error, Result, Vector};

pub type CostFn = Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>;
pub type MapFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
pub type PairMapFn = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;
pub type LowerOracle = Arc<dyn Fn(&Vector, &Vector, &mut dyn RngCore) -> Vector + Send + Sync>;
pub type SubdiffFn = Arc<dyn Fn(&Vector) -> SubgradientSet + Send + Sync>;

/// Zonotope `{anchor + sum_j t_j e_j : t in [0, 1]^n}`; covers the
/// subdifferentials of maxima of affine pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgradientSet {
    pub anchor: Vector,
    pub generators: Vec<Vector>,
}

impl SubgradientSet {
    pub fn single(g: Vector) -> Self {
        SubgradientSet {
            anchor: g,
            generators: Vec::new(),
        }
    }

    /// `max_{g in set} u^T g`.
    pub fn support(&self, u: &Vector) -> f64 {
        u.dot(&self.anchor) + self.generators.iter().map(|e| u.dot(e).max(0.0)).sum::<f64>()
    }

    /// `anchor + sum_j t_j e_j`.
    pub fn select(&self, t: &[f64]) -> Vector {
        let mut g = self.anchor.clone();
        for (e, tj) in self.generators.iter().zip(t) {
            g.axpy(*tj, e, 1.0);
        }
        g
    }

    pub fn center(&self) -> Vector {
        self.select(&vec![0.5; self.generators.len()])
    }
}

/// Private follower problem: find `y in Y(x)` with
/// `(y' - y)^T H(x, y) >= 0` for all `y' in Y(x)`, where
/// `Y(x) = shift(x) + set`, sampled through a stochastic oracle.
#[derive(Clone)]
pub struct LowerVi {
    pub set: ConvexSet,
    pub shift: Option<MapFn>,
    pub oracle: LowerOracle,
    pub mean_map: Option<PairMapFn>,
    /// Oracle ignores its generator; batches then cost one evaluation.
    pub deterministic: bool,
    pub mu_h: f64,
    pub l_h: f64,
    pub gamma: f64,
    pub rho: f64,
    /// Initial-distance bound; the set diameter when absent.
    pub radius: Option<f64>,
    pub y0: Option<Vector>,
}

impl fmt::Debug for LowerVi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LowerVi")
            .field("set", &self.set)
            .field("shifted", &self.shift.is_some())
            .field("deterministic", &self.deterministic)
            .field("mu_h", &self.mu_h)
            .field("l_h", &self.l_h)
            .field("gamma", &self.gamma)
            .field("rho", &self.rho)
            .field("radius", &self.radius)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct LowerSolve {
    pub y: Vector,
    pub iterations: usize,
    /// Oracle samples drawn, counting every batch member.
    pub samples: u64,
}

#[derive(Debug, Clone)]
pub struct LowerRun {
    pub y: Vector,
    pub samples: u64,
    /// `y_0 .. y_J` when requested.
    pub path: Option<Vec<Vector>>,
}

impl LowerVi {
    /// Noise-free VI with the mean map as oracle. Steps default to
    /// `gamma = mu / L^2` and `rho` halfway between `q` and one.
    pub fn deterministic(
        set: ConvexSet,
        mean_map: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
        mu_h: f64,
        l_h: f64,
    ) -> Self {
        let mean: PairMapFn = Arc::new(mean_map);
        let m = mean.clone();
        let mut vi = LowerVi {
            set,
            shift: None,
            oracle: Arc::new(move |x, y, _| m(x, y)),
            mean_map: Some(mean),
            deterministic: true,
            mu_h,
            l_h,
            gamma: mu_h / (l_h * l_h),
            rho: 0.0,
            radius: None,
            y0: None,
        };
        vi.rho = 0.5 * (1.0 + vi.contraction());
        vi
    }

    /// Adds `N(0, std^2 I)` noise to the mean map.
    pub fn with_gaussian_noise(mut self, std: f64) -> Result<Self> {
        let mean = self
            .mean_map
            .clone()
            .ok_or_else(|| Error::config("gaussian noise needs a mean map"))?;
        self.oracle = Arc::new(move |x, y, rng| {
            let mut g = mean(x, y);
            for v in g.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += std * z;
            }
            g
        });
        self.deterministic = std == 0.0;
        Ok(self)
    }

    pub fn with_steps(mut self, gamma: f64, rho: f64) -> Self {
        self.gamma = gamma;
        self.rho = rho;
        self
    }

    pub fn with_shift(mut self, shift: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.shift = Some(Arc::new(shift));
        self
    }

    pub fn with_radius(mut self, r: f64) -> Self {
        self.radius = Some(r);
        self
    }

    /// `q = 1 - 2 gamma mu + gamma^2 L^2`.
    pub fn contraction(&self) -> f64 {
        1.0 - 2.0 * self.gamma * self.mu_h + self.gamma * self.gamma * self.l_h * self.l_h
    }

    /// `max(rho, q)`, the geometric rate of the mean-squared error.
    pub fn rate(&self) -> f64 {
        self.rho.max(self.contraction())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_h > 0.0 && self.l_h >= self.mu_h) {
            return Err(Error::config(format!(
                "need 0 < mu_h <= l_h, got mu_h={} l_h={}",
                self.mu_h, self.l_h
            )));
        }
        let cap = 2.0 * self.mu_h / (self.l_h * self.l_h);
        if !(self.gamma > 0.0 && self.gamma < cap) {
            return Err(Error::config(format!("step {} outside (0, {cap})", self.gamma)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config(format!("batch ratio {} outside (0, 1)", self.rho)));
        }
        let q = self.contraction();
        if (self.rho - q).abs() <= 1e-12 {
            return Err(Error::config(format!("batch ratio {} coincides with contraction {q}", self.rho)));
        }
        Ok(())
    }

    /// `M_j = ceil(rho^-j)`.
    pub fn batch(&self, j: usize) -> u64 {
        self.rho.powi(-(j as i32)).ceil() as u64
    }

    /// `J(eps) = ceil(ln(eps / R0^2) / ln max(rho, q))`, at least zero.
    pub fn iterations_for(&self, eps: f64) -> Result<usize> {
        if !(eps > 0.0) {
            return Err(Error::config(format!("target error must be positive, got {eps}")));
        }
        let r0 = self
            .radius
            .or_else(|| self.set.diameter())
            .ok_or_else(|| Error::config("unbounded follower set needs an explicit radius"))?;
        let j = ((eps / (r0 * r0)).ln() / self.rate().ln()).ceil();
        Ok(if j > 0.0 { j as usize } else { 0 })
    }

    fn project(&self, x: &Vector, y: &Vector) -> Result<Vector> {
        match &self.shift {
            Some(s) => {
                let o = s(x);
                Ok(self.set.project(&(y - &o))? + o)
            }
            None => self.set.project(y),
        }
    }

    /// `iters` projected mini-batch steps from `y0`.
    pub fn run(&self, x: &Vector, iters: usize, rng: &mut dyn RngCore, keep_path: bool) -> Result<LowerRun> {
        let start = self
            .y0
            .clone()
            .unwrap_or_else(|| Vector::zeros(self.set.dim()));
        let mut y = self.project(x, &start)?;
        let mut path = keep_path.then(|| vec![y.clone()]);
        let mut samples = 0u64;
        for j in 0..iters {
            let m = self.batch(j);
            samples = samples.saturating_add(m);
            let g = if self.deterministic {
                (self.oracle)(x, &y, rng)
            } else {
                let mut acc = (self.oracle)(x, &y, rng);
                for _ in 1..m {
                    acc += (self.oracle)(x, &y, rng);
                }
                acc / m as f64
            };
            y = self.project(x, &(&y - g * self.gamma))?;
            if let Some(p) = &mut path {
                p.push(y.clone());
            }
        }
        Ok(LowerRun { y, samples, path })
    }

    /// Sampled `(H(x,y) - H(x,y'))^T (y - y') >= mu_h ||y - y'||^2`.
    pub fn check_strong_monotonicity(&self, x: &Vector, pairs: usize, rng: &mut dyn RngCore) -> Result<bool> {
        let mean = self
            .mean_map
            .as_ref()
            .ok_or_else(|| Error::Unsupported("strong monotonicity check needs a mean map".into()))?;
        let (lo, hi) = self
            .set
            .bounding_box()
            .map(|(lo, hi)| (lo.map(|v| v.max(-1e3)), hi.map(|v| v.min(1e3))))
            .unwrap_or_else(|| {
                let d = self.set.dim();
                (Vector::from_element(d, -10.0), Vector::from_element(d, 10.0))
            });
        let lo = lo.zip_map(&hi, |l, h| if h.is_finite() && l.is_finite() { l } else { h.min(0.0) - 10.0 });
        let hi = hi.zip_map(&lo, |h, l| if h.is_finite() { h } else { l + 20.0 });
        let draw = |rng: &mut dyn RngCore| -> Result<Vector> {
            let p = Vector::from_fn(lo.len(), |j, _| crate::rng::uniform(lo[j], hi[j], rng));
            self.project(x, &p)
        };
        for _ in 0..pairs {
            let a = draw(rng)?;
            let b = draw(rng)?;
            let d = &a - &b;
            let inner = (mean(x, &a) - mean(x, &b)).dot(&d);
            if inner < self.mu_h * d.norm_squared() * (1.0 - 1e-9) - 1e-12 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Geometric mini-batch projected stochastic approximation run for
/// `J(eps)` iterations.
pub fn solve_lower_vi(vi: &LowerVi, x: &Vector, eps: f64, rng: &mut dyn RngCore) -> Result<LowerSolve> {
    vi.validate()?;
    let iterations = vi.iterations_for(eps)?;
    let run = vi.run(x, iterations, rng, false)?;
    Ok(LowerSolve {
        y: run.y,
        iterations,
        samples: run.samples,
    })
}

/// Leader cost `d(x, y(x))` with its follower and declared constants.
#[derive(Clone)]
pub struct HierarchicalTerm {
    pub dim: usize,
    pub cost: CostFn,
    pub lower: Option<LowerVi>,
    pub closed_form: Option<MapFn>,
    pub subdifferential: Option<SubdiffFn>,
    /// Lipschitz constant of `x -> d(x, y(x))`.
    pub l0: f64,
    /// Lipschitz constant of `y -> d(x, y)`.
    pub lt0: f64,
    /// Largest admissible smoothing radius.
    pub mu0: f64,
    /// Leader set; smoothing probes must stay within `mu0` of it.
    pub domain: Option<ConvexSet>,
    warned: Arc<AtomicBool>,
}

impl fmt::Debug for HierarchicalTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HierarchicalTerm")
            .field("dim", &self.dim)
            .field("lower", &self.lower)
            .field("closed_form", &self.closed_form.is_some())
            .field("subdifferential", &self.subdifferential.is_some())
            .field("l0", &self.l0)
            .field("lt0", &self.lt0)
            .field("mu0", &self.mu0)
            .finish()
    }
}

impl HierarchicalTerm {
    pub fn new(dim: usize, cost: impl Fn(&Vector, &Vector) -> f64 + Send + Sync + 'static, l0: f64, lt0: f64, mu0: f64) -> Self {
        HierarchicalTerm {
            dim,
            cost: Arc::new(cost),
            lower: None,
            closed_form: None,
            subdifferential: None,
            l0,
            lt0,
            mu0,
            domain: None,
            warned: Arc::new(AtomicBool::new(false)),
        }
    }

    /// `d == 0`.
    pub fn zero(dim: usize) -> Self {
        HierarchicalTerm::upper_only(dim, |_| 0.0, 0.0, 1.0)
            .with_subdifferential(move |_| SubgradientSet::single(Vector::zeros(dim)))
    }

    /// A leader-only cost `d(x)` with an empty follower.
    pub fn upper_only(dim: usize, d: impl Fn(&Vector) -> f64 + Send + Sync + 'static, l0: f64, mu0: f64) -> Self {
        HierarchicalTerm::new(dim, move |x, _| d(x), l0, 0.0, mu0).with_closed_form(|_| Vector::zeros(0))
    }

    pub fn with_lower(mut self, vi: LowerVi) -> Self {
        self.lower = Some(vi);
        self
    }

    pub fn with_closed_form(mut self, y: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.closed_form = Some(Arc::new(y));
        self
    }

    pub fn with_subdifferential(mut self, f: impl Fn(&Vector) -> SubgradientSet + Send + Sync + 'static) -> Self {
        self.subdifferential = Some(Arc::new(f));
        self
    }

    pub fn with_domain(mut self, set: ConvexSet) -> Self {
        self.domain = Some(set);
        self
    }

    /// Follower response: exact when a closed form exists, otherwise an
    /// `eps`-accurate mini-batch solve.
    pub fn follower(&self, x: &Vector, eps: f64, rng: &mut dyn RngCore) -> Result<Vector> {
        if let Some(f) = &self.closed_form {
            return Ok(f(x));
        }
        let vi = self
            .lower
            .as_ref()
            .ok_or_else(|| Error::config("hierarchical term has neither a closed form nor a follower VI"))?;
        if eps <= 0.0 {
            return Err(Error::config("an exact follower response needs a closed form"));
        }
        Ok(solve_lower_vi(vi, x, eps, rng)?.y)
    }

    /// `d(x, y(x))` with the closed-form follower.
    pub fn value(&self, x: &Vector) -> Result<f64> {
        let f = self
            .closed_form
            .as_ref()
            .ok_or_else(|| Error::Unsupported("exact value needs a closed-form follower".into()))?;
        Ok((self.cost)(x, &f(x)))
    }

    /// Subdifferential oracle, or a single finite-difference selection
    /// of the closed-form value (warned once).
    pub fn subgradients(&self, x: &Vector) -> Result<SubgradientSet> {
        if let Some(f) = &self.subdifferential {
            return Ok(f(x));
        }
        if !self.warned.swap(true, Ordering::Relaxed) {
            warn!("hierarchical term has no subgradient oracle; using a single finite-difference selection");
        }
        let h = 1e-7 * (1.0 + x.norm());
        let mut g = Vector::zeros(x.len());
        let mut xp = x.clone();
        for j in 0..x.len() {
            xp[j] = x[j] + h;
            let fp = self.value(&xp)?;
            xp[j] = x[j] - h;
            let fm = self.value(&xp)?;
            xp[j] = x[j];
            g[j] = (fp - fm) / (2.0 * h);
        }
        Ok(SubgradientSet::single(g))
    }

    fn check_probe(&self, p: &Vector) -> Result<()> {
        if let Some(set) = &self.domain {
            let dist = (p - set.project(p)?).norm();
            if dist > self.mu0 * (1.0 + 1e-12) {
                return Err(Error::Domain(format!(
                    "smoothing probe lies {dist:.3e} from the leader set, beyond mu0 = {}",
                    self.mu0
                )));
            }
        }
        Ok(())
    }

    fn check_radius(&self, mu: f64) -> Result<()> {
        if !(mu > 0.0 && mu <= self.mu0) {
            return Err(Error::config(format!("smoothing radius {mu} outside (0, {}]", self.mu0)));
        }
        Ok(())
    }

    /// Sampled midpoint convexity of the closed-form value and the
    /// declared `l0` on pairs within `mu0` of `set`. Returns the worst
    /// convexity excess and the largest observed Lipschitz ratio.
    pub fn check_declarations(&self, set: &ConvexSet, pairs: usize, rng: &mut dyn RngCore) -> Result<(f64, f64)> {
        let mut worst_convexity: f64 = 0.0;
        let mut worst_ratio: f64 = 0.0;
        for _ in 0..pairs {
            let a = set.sample(rng)? + unit_ball(self.dim, rng) * self.mu0;
            let b = set.sample(rng)? + unit_ball(self.dim, rng) * self.mu0;
            let (fa, fb) = (self.value(&a)?, self.value(&b)?);
            let mid = self.value(&((&a + &b) * 0.5))?;
            worst_convexity = worst_convexity.max(mid - 0.5 * (fa + fb));
            let d = (&a - &b).norm();
            if d > 0.0 {
                worst_ratio = worst_ratio.max((fa - fb).abs() / d);
            }
        }
        Ok((worst_convexity, worst_ratio))
    }
}

/// Monte-Carlo `d_mu(x) = E[d(x + mu u)]`, `u` uniform in the unit ball.
/// Returns the mean and its standard error.
pub fn smoothed_value(term: &HierarchicalTerm, x: &Vector, mu: f64, n_mc: usize, rng: &mut dyn RngCore) -> Result<(f64, f64)> {
    term.check_radius(mu)?;
    if n_mc < 2 {
        return Err(Error::config("smoothed value needs at least two draws"));
    }
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n_mc {
        let p = x + unit_ball(term.dim, rng) * mu;
        term.check_probe(&p)?;
        let y = term.follower(&p, 1e-10, rng)?;
        let v = (term.cost)(&p, &y);
        sum += v;
        sq += v * v;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// `(m / mu) (d(x + mu s, y_eps(x + mu s)) - d(x, y_eps(x))) s` with `s`
/// uniform on the unit sphere and two independent follower solves.
pub fn grad_estimator(term: &HierarchicalTerm, x: &Vector, mu: f64, eps: f64, rng: &mut dyn RngCore) -> Result<Vector> {
    term.check_radius(mu)?;
    if !(eps >= 0.0) {
        return Err(Error::config(format!("follower accuracy must be nonnegative, got {eps}")));
    }
    if x.len() != term.dim {
        return Err(Error::dim(format!("point has length {} for a term of dimension {}", x.len(), term.dim)));
    }
    let s = unit_sphere(term.dim, rng);
    let probe = x + &s * mu;
    term.check_probe(&probe)?;
    let mut r_probe = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut r_base = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let y_probe = term.follower(&probe, eps, &mut r_probe)?;
    let y_base = term.follower(x, eps, &mut r_base)?;
    let diff = (term.cost)(&probe, &y_probe) - (term.cost)(x, &y_base);
    Ok(s * (term.dim as f64 / mu * diff))
}

/// The distributed scheme with each player's gradient augmented by the
/// smoothed hierarchical estimator at radius `mu_k` and accuracy `eps_k`.
pub fn run_algorithm2(
    game: &GameSpec,
    hier: &[HierarchicalTerm],
    sched: &GraphSchedule,
    params: &ParamSchedules,
    cfg: &RunConfig,
) -> Result<RunTrace> {
    if game.sets().is_none() {
        return Err(Error::Unsupported("the smoothed scheme needs indicator terms for every player".into()));
    }
    if hier.len() != game.n_players() {
        return Err(Error::dim(format!("{} hierarchical terms for {} players", hier.len(), game.n_players())));
    }
    for (i, (t, d)) in hier.iter().zip(game.dims()).enumerate() {
        if t.dim != *d {
            return Err(Error::dim(format!("hierarchical term {i} has dimension {} but player has {d}", t.dim)));
        }
    }
    if params.mu.is_none() {
        return Err(Error::config("the smoothed scheme needs a smoothing-radius schedule"));
    }
    let report = params.validate_hierarchical();
    if !report.passed {
        warn!("hierarchical schedule conditions not met: {}", report.violations.join("; "));
    }
    let extra = |i: usize, k: usize, x: &Vector| -> Result<Vector> {
        let mu = params.mu(k).expect("checked above");
        let eps = params.eps(k).unwrap_or(0.0);
        let mut rng = stream(cfg.seed, &[purpose::SMOOTHING, i as u64, k as u64]);
        grad_estimator(&hier[i], x, mu, eps, &mut rng)
    };
    run_inner(game, sched, params, cfg, Some(Hier { terms: hier, extra: &extra }))
}

#[derive(Debug, Clone)]
pub struct ProximityReport {
    pub x_star: Vector,
    pub x_mu: Vector,
    pub distance: f64,
    /// `sqrt(mu N L0 / delta)` with `L0` the largest declared constant.
    pub bound: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Solver tolerance allowed on top of the proximity bound.
pub const PROXIMITY_TOL: f64 = 1e-6;

/// Computes the equilibrium `x*` of the nonsmooth game and `x*_mu` of its
/// smoothed counterpart, and compares their distance with
/// `sqrt(mu N L0 / delta)`.
pub fn smoothed_ne_gap_bound_check(game: &GameSpec, hier: &[HierarchicalTerm], mu: f64, delta: f64) -> Result<ProximityReport> {
    if game.sets().is_none() || game.bounding_box().is_none() {
        return Err(Error::Unsupported("proximity check needs bounded indicator sets".into()));
    }
    if hier.len() != game.n_players() {
        return Err(Error::dim("one hierarchical term per player required"));
    }
    if !(delta > 0.0) {
        return Err(Error::config("strong monotonicity modulus must be positive"));
    }
    for t in hier {
        t.check_radius(mu)?;
    }
    let mut rng = stream(0, &[purpose::METRICS]);
    let mut lip: f64 = 0.0;
    for _ in 0..256 {
        let a = game.sample_point(&mut rng)?;
        let b = game.sample_point(&mut rng)?;
        let d = &a - &b;
        let dp = game.phi(&a)? - game.phi(&b)?;
        if dp.dot(&d) < delta * d.norm_squared() * (1.0 - 1e-9) - 1e-12 {
            return Err(Error::Unsupported(format!("game map is not {delta}-strongly monotone on sampled pairs")));
        }
        if d.norm() > 0.0 {
            lip = lip.max(dp.norm() / d.norm());
        }
    }
    let x0 = game.project(&Vector::zeros(game.total_dim()))?;

    // nonsmooth problem: projected subgradient, steps 1 / (delta (k + 1))
    let mut x = x0.clone();
    for k in 0..200_000 {
        let xs = game.split(&x)?;
        let phi = game.phi_blocks(&xs)?;
        let g = stack(
            &hier
                .iter()
                .zip(&xs)
                .map(|(t, xi)| t.subgradients(xi).map(|s| s.center()))
                .collect::<Result<Vec<_>>>()?,
        );
        let step = 1.0 / (delta * (k + 1) as f64);
        x = game.project(&(&x - (stack(&phi) + g) * step))?;
    }
    let x_star = x;

    // smoothed problem: constant-step projected gradient
    let dirs: Vec<Vec<Vector>> = hier
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.dim == 1 {
                vec![Vector::from_element(1, 1.0)]
            } else {
                let mut r = stream(0, &[purpose::SMOOTHING, i as u64]);
                (0..2048).map(|_| unit_sphere(t.dim, &mut r)).collect()
            }
        })
        .collect();
    let smooth_grad = |i: usize, xi: &Vector| -> Result<Vector> {
        let t = &hier[i];
        let mut g = Vector::zeros(t.dim);
        for s in &dirs[i] {
            let up = t.value(&(xi + s * mu))?;
            let down = t.value(&(xi - s * mu))?;
            g.axpy(up - down, s, 1.0);
        }
        Ok(g * (t.dim as f64 / (2.0 * mu * dirs[i].len() as f64)))
    };
    let l_total = lip + hier.iter().map(|t| t.dim as f64 * t.l0 / mu).fold(0.0, f64::max);
    let step = delta / (l_total * l_total);
    let mut x = x0;
    for _ in 0..5_000_000 {
        let xs = game.split(&x)?;
        let phi = game.phi_blocks(&xs)?;
        let g = stack(&xs.iter().enumerate().map(|(i, xi)| smooth_grad(i, xi)).collect::<Result<Vec<_>>>()?);
        let next = game.project(&(&x - (stack(&phi) + g) * step))?;
        let moved = (&next - &x).norm();
        x = next;
        if moved <= 1e-16 * (1.0 + x.norm()) {
            break;
        }
    }
    let x_mu = x;
    let l0 = hier.iter().map(|t| t.l0).fold(0.0, f64::max);
    let bound = (mu * game.n_players() as f64 * l0 / delta).sqrt();
    let distance = (&x_mu - &x_star).norm();
    Ok(ProximityReport {
        passed: distance <= bound + PROXIMITY_TOL,
        x_star,
        x_mu,
        distance,
        bound,
        tolerance: PROXIMITY_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{AffinePlayer, NonsmoothTerm, PlayerSpec};
    use crate::metrics::Metric;
    use crate::network::complete;
    use crate::{Matrix, Vector};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn abs_term() -> HierarchicalTerm {
        HierarchicalTerm::upper_only(1, |x| x[0].abs(), 1.0, 1.0).with_subdifferential(|x| {
            if x[0] == 0.0 {
                SubgradientSet {
                    anchor: v(&[-1.0]),
                    generators: vec![v(&[2.0])],
                }
            } else {
                SubgradientSet::single(v(&[x[0].signum()]))
            }
        })
    }

    fn scalar_game(offset: f64, lo: f64, hi: f64) -> GameSpec {
        GameSpec::new(vec![PlayerSpec::new(
            AffinePlayer::new(
                Matrix::from_element(1, 1, 1.0),
                Matrix::from_element(1, 1, 1.0),
                Matrix::zeros(1, 1),
                v(&[offset]),
            )
            .unwrap(),
            NonsmoothTerm::indicator(ConvexSet::cube(1, lo, hi)),
        )])
        .unwrap()
    }

    #[test]
    fn identity_follower_converges_to_leader() {
        let vi = LowerVi::deterministic(ConvexSet::cube(1, -10.0, 10.0), |x, y| y - x, 1.0, 1.0).with_steps(0.5, 0.5);
        let mut rng = stream(0, &[]);
        let out = vi.run(&v(&[3.7]), 60, &mut rng, false).unwrap();
        assert!((out.y[0] - 3.7).abs() <= 1e-15 * 4.0);
        let solved = solve_lower_vi(&vi, &v(&[-2.5]), 1e-20, &mut rng).unwrap();
        assert!((solved.y[0] + 2.5).abs() < 1e-9);
    }

    #[test]
    fn step_and_ratio_are_validated() {
        let base = LowerVi::deterministic(ConvexSet::cube(1, -1.0, 1.0), |_, y| y.clone(), 1.0, 1.0);
        assert!(matches!(base.clone().with_steps(2.5, 0.5).validate(), Err(Error::Config(_))));
        let q = base.clone().with_steps(0.5, 0.5).contraction();
        assert!(matches!(base.clone().with_steps(0.5, q).validate(), Err(Error::Config(_))));
        assert!(base.with_steps(0.5, 0.6).validate().is_ok());
        let unbounded = LowerVi::deterministic(
            ConvexSet::Box {
                lower: vec![0.0],
                upper: vec![f64::INFINITY],
            },
            |_, y| y.clone(),
            1.0,
            1.0,
        );
        assert!(matches!(unbounded.iterations_for(1e-3), Err(Error::Config(_))));
    }

    #[test]
    fn halving_eps_adds_log_two_over_log_rate_iterations() {
        let vi = LowerVi::deterministic(ConvexSet::cube(2, -1.0, 1.0), |_, y| y * 2.0, 1.5, 2.0).with_steps(0.2, 0.85);
        let expected = 2f64.ln() / (1.0 / vi.rate()).ln();
        let mut total = 0.0;
        let levels = [1e-3, 1e-4, 1e-5, 1e-6];
        for &eps in &levels {
            total += (vi.iterations_for(eps / 2.0).unwrap() - vi.iterations_for(eps).unwrap()) as f64;
        }
        assert!((total / levels.len() as f64 - expected).abs() <= 1.0);
    }

    #[test]
    fn shifted_set_projects_around_the_offset() {
        let vi = LowerVi::deterministic(
            ConvexSet::Box {
                lower: vec![0.0; 2],
                upper: vec![f64::INFINITY; 2],
            },
            |_, y| y.clone(),
            1.0,
            1.0,
        )
        .with_shift(|x| x.clone())
        .with_radius(10.0)
        .with_steps(0.5, 0.5);
        let mut rng = stream(0, &[]);
        let y = solve_lower_vi(&vi, &v(&[1.0, -1.0]), 1e-14, &mut rng).unwrap().y;
        // argmin ||y||^2 / 2 over y >= x
        assert!((y - v(&[1.0, 0.0])).norm() < 1e-7);
    }

    #[test]
    fn smoothed_abs_at_zero_is_half_radius() {
        let t = abs_term();
        let mut rng = stream(3, &[]);
        for mu in [0.4, 0.1] {
            let (m, se) = smoothed_value(&t, &v(&[0.0]), mu, 20_000, &mut rng).unwrap();
            assert!((m - mu / 2.0).abs() <= 3.0 * se, "{m} {se}");
        }
    }

    #[test]
    fn smoothing_sandwich_and_affine_identity() {
        let t = abs_term();
        let mut rng = stream(4, &[]);
        for x in [-0.3, 0.05, 0.7] {
            let mu = 0.2;
            let (m, se) = smoothed_value(&t, &v(&[x]), mu, 5000, &mut rng).unwrap();
            let d = f64::abs(x);
            assert!(d <= m + 3.0 * se && m <= d + mu * t.l0 + 3.0 * se);
        }
        let lin = HierarchicalTerm::upper_only(2, |x| 2.0 * x[0] - x[1], 3.0, 1.0);
        let (m, se) = smoothed_value(&lin, &v(&[0.3, 0.4]), 0.5, 5000, &mut rng).unwrap();
        assert!((m - 0.2).abs() <= 3.0 * se.max(1e-12));
    }

    #[test]
    fn radius_outside_range_is_rejected() {
        let t = abs_term();
        let mut rng = stream(0, &[]);
        assert!(matches!(smoothed_value(&t, &v(&[0.0]), 2.0, 10, &mut rng), Err(Error::Config(_))));
        assert!(matches!(grad_estimator(&t, &v(&[0.0]), 0.0, 0.0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn probes_far_from_the_domain_are_domain_errors() {
        let t = abs_term().with_domain(ConvexSet::cube(1, -1.0, 1.0));
        let mut rng = stream(0, &[]);
        let r = grad_estimator(&t, &v(&[5.0]), 0.5, 0.0, &mut rng);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn estimator_of_affine_cost_is_unbiased() {
        let c = v(&[1.0, -2.0, 0.5]);
        let cc = c.clone();
        let t = HierarchicalTerm::upper_only(3, move |x| cc.dot(x), c.norm(), 1.0);
        let mut rng = stream(5, &[]);
        let n = 100_000;
        let mut mean = Vector::zeros(3);
        let mut sq = Vector::zeros(3);
        for _ in 0..n {
            let g = grad_estimator(&t, &v(&[0.2, 0.1, -0.3]), 0.3, 0.0, &mut rng).unwrap();
            sq += g.component_mul(&g);
            mean += g;
        }
        mean /= n as f64;
        let var = sq / n as f64 - mean.component_mul(&mean);
        for j in 0..3 {
            let se = (var[j] / n as f64).sqrt();
            assert!((mean[j] - c[j]).abs() <= 3.5 * se, "component {j}: {} vs {}", mean[j], c[j]);
        }
    }

    #[test]
    fn follower_solves_are_used_without_closed_form() {
        // d(x, y) = y with y(x) = x on a box: the estimator tracks d(x) = x
        let vi = LowerVi::deterministic(ConvexSet::cube(1, -10.0, 10.0), |x, y| y - x, 1.0, 1.0).with_steps(0.5, 0.5);
        let t = HierarchicalTerm::new(1, |_, y| y[0], 1.0, 1.0, 1.0).with_lower(vi);
        let mut rng = stream(6, &[]);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| grad_estimator(&t, &v(&[0.5]), 0.1, 1e-12, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 1e-6);
        assert!(matches!(grad_estimator(&t, &v(&[0.5]), 0.1, 0.0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zero_terms_reproduce_the_plain_scheme() {
        let game = scalar_game(0.3, -1.0, 1.0);
        let sched = GraphSchedule::fixed(complete(1)).unwrap();
        let params = ParamSchedules::power(0.75, 0.24, &[4.5], &[2.5]).unwrap().with_smoothing(1.0, 0.24, 0.0, 1.0);
        let cfg = RunConfig {
            horizon: 300,
            record_every: 30,
            seed: 9,
            metrics: vec![Metric::Residual, Metric::ConsensusError],
            ..Default::default()
        };
        let a = super::super::run_algorithm1(&game, &sched, &params, &cfg).unwrap();
        let b = run_algorithm2(&game, &[HierarchicalTerm::zero(1)], &sched, &params, &cfg).unwrap();
        let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.x_final), bits(&b.x_final));
        for ((_, ca), (_, cb)) in a.columns.iter().zip(&b.columns) {
            assert_eq!(bits(ca), bits(cb));
        }
    }

    #[test]
    fn proximity_bound_on_shifted_quadratic() {
        let game = scalar_game(-0.5, -2.0, 2.0);
        let terms = [abs_term()];
        for mu in [0.1, 0.05] {
            let rep = smoothed_ne_gap_bound_check(&game, &terms, mu, 1.0).unwrap();
            let oracle = 0.5 * mu / (1.0 + mu);
            assert!(rep.x_star[0].abs() < 1e-4, "{:?}", rep.x_star);
            assert!((rep.x_mu[0] - oracle).abs() < 1e-9, "{} vs {oracle}", rep.x_mu[0]);
            assert!(rep.passed && (rep.bound - mu.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn proximity_rejects_merely_monotone_games() {
        let game = GameSpec::new(vec![PlayerSpec::new(
            AffinePlayer::new(
                Matrix::from_element(1, 1, 1.0),
                Matrix::zeros(1, 1),
                Matrix::zeros(1, 1),
                v(&[0.0]),
            )
            .unwrap(),
            NonsmoothTerm::indicator(ConvexSet::cube(1, -1.0, 1.0)),
        )])
        .unwrap();
        let r = smoothed_ne_gap_bound_check(&game, &[abs_term()], 0.1, 1.0);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }
}
