//! Convergence diagnostics: gap functions, fixed-point residuals, the
//! hierarchical residual, consensus error, and log-log rate fits.
//!
//! The gap `G(x) = sup_{y in X} (x - y)^T phi(y)` is a nonconcave
//! maximization in general, so every estimator here returns a lower bound
//! attained at an explicit feasible point. The grid method additionally
//! reports a Lipschitz upper bound when the joint set is a box and the game
//! map is affine.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::game::{ConvexSet, GameSpec};
use crate::solver::{HierarchicalTerm, SubgradientSet};
use crate::{stack, Error, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Residual,
    RelResidual,
    ConsensusError,
    Gap,
    RelGap,
    #[serde(rename = "gap_hier")]
    GapHierarchical,
    #[serde(rename = "m")]
    ResidualM,
    #[serde(rename = "rel_m")]
    RelResidualM,
    Norm,
    NormAverage,
    Drift,
}

impl Metric {
    pub const ALL: [Metric; 11] = [
        Metric::Residual,
        Metric::RelResidual,
        Metric::ConsensusError,
        Metric::Gap,
        Metric::RelGap,
        Metric::GapHierarchical,
        Metric::ResidualM,
        Metric::RelResidualM,
        Metric::Norm,
        Metric::NormAverage,
        Metric::Drift,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Residual => "residual",
            Metric::RelResidual => "rel_residual",
            Metric::ConsensusError => "consensus_error",
            Metric::Gap => "gap",
            Metric::RelGap => "rel_gap",
            Metric::GapHierarchical => "gap_hier",
            Metric::ResidualM => "m",
            Metric::RelResidualM => "rel_m",
            Metric::Norm => "norm",
            Metric::NormAverage => "norm_average",
            Metric::Drift => "drift",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown metric `{s}`")))
    }
}

/// Weighted running average `sum_p w_p x_p / sum_p w_p`.
#[derive(Debug, Clone)]
pub struct TimeAverage {
    sum: Vector,
    weight: f64,
}

impl TimeAverage {
    pub fn new(dim: usize) -> Self {
        TimeAverage {
            sum: Vector::zeros(dim),
            weight: 0.0,
        }
    }

    pub fn push(&mut self, x: &Vector, w: f64) {
        self.sum.axpy(w, x, 1.0);
        self.weight += w;
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// The average; the zero vector before the first push.
    pub fn value(&self) -> Vector {
        if self.weight > 0.0 {
            &self.sum / self.weight
        } else {
            self.sum.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMethod {
    Grid,
    Multistart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapOptions {
    pub method: GapMethod,
    /// Random restarts for the ascent, besides `x` itself.
    pub starts: usize,
    pub iters: usize,
    /// Grid points per coordinate; chosen from a 2e6-point budget if absent.
    pub grid_points: Option<usize>,
}

impl Default for GapOptions {
    fn default() -> Self {
        GapOptions {
            method: GapMethod::Multistart,
            starts: 32,
            iters: 200,
            grid_points: None,
        }
    }
}

impl GapOptions {
    pub fn grid() -> Self {
        GapOptions {
            method: GapMethod::Grid,
            ..Default::default()
        }
    }
}

/// Largest joint dimension the grid method accepts.
pub const GRID_MAX_DIM: usize = 6;
const GRID_BUDGET: f64 = 2e6;

#[derive(Debug, Clone)]
pub struct GapEstimate {
    /// Value at `argmax`; never below zero since `y = x` gives zero.
    pub lower: f64,
    pub upper: Option<f64>,
    pub argmax: Vector,
}

impl GapEstimate {
    /// Width of the certified bracket, when there is one.
    pub fn tolerance(&self) -> Option<f64> {
        self.upper.map(|u| u - self.lower)
    }
}

type Objective<'a> = dyn Fn(&Vector) -> Result<f64> + 'a;

/// Lower bound on `G(x)` by the configured search.
pub fn gap(game: &GameSpec, x: &Vector, opts: &GapOptions, rng: &mut dyn RngCore) -> Result<GapEstimate> {
    check_point(game, x)?;
    let affine = game.affine_map();
    let phi = |y: &Vector| -> Result<Vector> {
        match &affine {
            Some((j, c)) => Ok(j * y + c),
            None => game.phi(y),
        }
    };
    let obj = |y: &Vector| -> Result<f64> { Ok((x - y).dot(&phi(y)?)) };
    let grad = |y: &Vector| -> Result<Vector> {
        match &affine {
            Some((j, c)) => Ok(j.tr_mul(&(x - y)) - (j * y + c)),
            None => fd_gradient(&obj, y),
        }
    };
    match opts.method {
        GapMethod::Grid => {
            let mut est = grid_search(game, x, opts, &obj)?;
            if let (Some((j, c)), true) = (&affine, all_boxes(game)) {
                let (lo, hi) = game.bounding_box().expect("boxes are bounded");
                let jn = j.clone().singular_values().max();
                let phi_max = c.norm() + jn * game.norm_bound().unwrap_or(f64::INFINITY);
                let lip = phi_max + jn * (&hi - &lo).norm().max((x - &lo).norm()).max((x - &hi).norm());
                let n = grid_points(game.total_dim(), opts) as f64;
                let radius = 0.5 * ((&hi - &lo) / (n - 1.0)).norm();
                est.upper = Some(est.lower + lip * radius);
            }
            Ok(est)
        }
        GapMethod::Multistart => multistart(game, x, opts, &obj, &grad, rng),
    }
}

/// Lower bound on the hierarchical gap
/// `sup_{y in X, g in prod_i subdiff d_i(y_i)} (x - y)^T (phi(y) + g)`.
///
/// The inner supremum over a zonotope subdifferential has the closed form
/// `u^T anchor + sum_j max(0, u^T e_j)` with `u = x_i - y_i`.
pub fn gap_hierarchical(
    game: &GameSpec,
    terms: &[HierarchicalTerm],
    x: &Vector,
    opts: &GapOptions,
    rng: &mut dyn RngCore,
) -> Result<GapEstimate> {
    check_point(game, x)?;
    check_terms(game, terms)?;
    let affine = game.affine_map();
    let obj = |y: &Vector| -> Result<f64> {
        let phi = match &affine {
            Some((j, c)) => j * y + c,
            None => game.phi(y)?,
        };
        let mut val = (x - y).dot(&phi);
        let xs = game.split(x)?;
        for ((term, yi), xi) in terms.iter().zip(game.split(y)?).zip(&xs) {
            val += term.subgradients(&yi)?.support(&(xi - &yi));
        }
        Ok(val)
    };
    match opts.method {
        GapMethod::Grid => grid_search(game, x, opts, &obj),
        GapMethod::Multistart => {
            let grad = |y: &Vector| fd_gradient(&obj, y);
            multistart(game, x, opts, &obj, &grad, rng)
        }
    }
}

/// `||x - Pi_X(x - phi(x))||`.
pub fn residual_metric(game: &GameSpec, x: &Vector) -> Result<f64> {
    game.fixed_point_residual(x, 1.0)
}

/// Selections enumerated exactly per player up to this many vertices.
pub const MAX_SELECTIONS: usize = 1 << 16;

/// `min_{g in prod_i subdiff d_i(x_i)} ||x - Pi_X[x - (phi(x) + g)]||`.
///
/// The projection is blockwise, so the minimization separates by player.
/// Each block starts from the best zonotope vertex (or a greedy point when
/// there are too many) and is refined by coordinate golden-section search
/// over the generator coefficients, covering the whole hull.
pub fn hierarchical_residual_m(game: &GameSpec, terms: &[HierarchicalTerm], x: &Vector) -> Result<f64> {
    check_terms(game, terms)?;
    let xs = game.split(x)?;
    let phi = game.phi_blocks(&xs)?;
    let mut total = 0.0;
    for (i, term) in terms.iter().enumerate() {
        let sg = term.subgradients(&xs[i])?;
        let base = &xs[i] - &phi[i];
        let player = &game.players[i];
        let eval = |t: &[f64]| -> Result<f64> {
            let g = sg.select(t);
            Ok((&xs[i] - player.prox(1.0, &(&base - g))?).norm_squared())
        };
        total += minimize_over_cube(sg.generators.len(), &eval, i)?;
    }
    Ok(total.sqrt())
}

fn minimize_over_cube(n: usize, eval: &dyn Fn(&[f64]) -> Result<f64>, player: usize) -> Result<f64> {
    if n == 0 {
        return eval(&[]);
    }
    let mut best_t = vec![0.5; n];
    let mut best = eval(&best_t)?;
    if n < 63 && (1usize << n) <= MAX_SELECTIONS {
        let mut t = vec![0.0; n];
        for mask in 0..(1usize << n) {
            for (j, tj) in t.iter_mut().enumerate() {
                *tj = ((mask >> j) & 1) as f64;
            }
            let v = eval(&t)?;
            if v < best {
                best = v;
                best_t.clone_from(&t);
            }
        }
    } else {
        warn!("player {player}: {n} subgradient generators, using greedy selection instead of enumeration");
        for j in 0..n {
            for cand in [0.0, 1.0] {
                let mut t = best_t.clone();
                t[j] = cand;
                let v = eval(&t)?;
                if v < best {
                    best = v;
                    best_t = t;
                }
            }
        }
    }
    for _sweep in 0..3 {
        let before = best;
        for j in 0..n {
            let mut t = best_t.clone();
            let f = |s: f64, t: &mut Vec<f64>| -> Result<f64> {
                t[j] = s;
                eval(t)
            };
            let (s, v) = golden_section(0.0, 1.0, 40, |s| f(s, &mut t))?;
            if v < best {
                best = v;
                best_t[j] = s;
            }
        }
        if before - best <= 1e-14 * (1.0 + best) {
            break;
        }
    }
    Ok(best)
}

fn golden_section(mut a: f64, mut b: f64, iters: usize, mut f: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    // endpoints matter at kinks of the selection
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for e in [a, b] {
        let fe = f(e)?;
        if fe < best.1 {
            best = (e, fe);
        }
    }
    Ok(best)
}

/// Stacked deviation of the estimates from their block mean.
pub fn consensus_error(v: &[Vector]) -> f64 {
    let Some(first) = v.first() else { return 0.0 };
    let mean = v.iter().fold(Vector::zeros(first.len()), |acc, b| acc + b) / v.len() as f64;
    v.iter().map(|b| (b - &mean).norm_squared()).sum::<f64>().sqrt()
}

/// Ordinary least squares `y = slope x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys).take(n) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
        n,
    })
}

/// Fit of `ln value` against `ln k` over entries with `k >= k_min`,
/// `k > 0` and a positive finite value.
pub fn loglog_fit(ks: &[usize], vals: &[f64], k_min: usize) -> Option<LineFit> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = ks
        .iter()
        .zip(vals)
        .filter(|(k, v)| **k > 0 && **k >= k_min && **v > 0.0 && v.is_finite())
        .map(|(k, v)| ((*k as f64).ln(), v.ln()))
        .unzip();
    linear_fit(&lx, &ly)
}

/// Log-log fit over the last decade of recorded indices.
pub fn last_decade_fit(ks: &[usize], vals: &[f64]) -> Option<LineFit> {
    let k_max = *ks.iter().max()?;
    loglog_fit(ks, vals, k_max / 10)
}

/// Values recorded at powers of ten (`k = 1, 10, 100, ...`).
pub fn decade_checkpoints(ks: &[usize], vals: &[f64]) -> Vec<(usize, f64)> {
    ks.iter()
        .zip(vals)
        .filter(|(k, _)| {
            let mut p = 1;
            while p < **k {
                p *= 10;
            }
            p == **k
        })
        .map(|(k, v)| (*k, *v))
        .collect()
}

/// `vals[j+1] <= vals[j] (1 + rel_tol)` for every consecutive pair.
pub fn is_nonincreasing(vals: &[f64], rel_tol: f64) -> bool {
    vals.windows(2).all(|w| w[1] <= w[0] + rel_tol * w[0].abs())
}

fn check_point(game: &GameSpec, x: &Vector) -> Result<()> {
    if x.len() != game.total_dim() {
        return Err(Error::dim(format!("point has length {} for a game of dimension {}", x.len(), game.total_dim())));
    }
    if game.sets().is_none() {
        return Err(Error::Unsupported("gap functions need an indicator term for every player".into()));
    }
    if game.bounding_box().is_none() {
        return Err(Error::config("gap functions need a bounded strategy set"));
    }
    Ok(())
}

fn check_terms(game: &GameSpec, terms: &[HierarchicalTerm]) -> Result<()> {
    if terms.len() != game.n_players() {
        return Err(Error::dim(format!("{} hierarchical terms for {} players", terms.len(), game.n_players())));
    }
    for (i, (t, d)) in terms.iter().zip(game.dims()).enumerate() {
        if t.dim != *d {
            return Err(Error::dim(format!("hierarchical term {i} has dimension {} but player has {d}", t.dim)));
        }
    }
    Ok(())
}

fn all_boxes(game: &GameSpec) -> bool {
    game.sets()
        .is_some_and(|s| s.iter().all(|s| matches!(s, ConvexSet::Box { .. })))
}

fn grid_points(dim: usize, opts: &GapOptions) -> usize {
    let n = opts
        .grid_points
        .unwrap_or_else(|| (GRID_BUDGET.powf(1.0 / dim as f64).floor() as usize).min(10_001));
    // odd counts put the box center on the grid
    if n % 2 == 0 {
        n - 1
    } else {
        n.max(3)
    }
}

fn grid_search(game: &GameSpec, x: &Vector, opts: &GapOptions, obj: &Objective<'_>) -> Result<GapEstimate> {
    let dim = game.total_dim();
    if dim > GRID_MAX_DIM {
        return Err(Error::config(format!("grid gap is limited to dimension {GRID_MAX_DIM}, got {dim}")));
    }
    let (lo, hi) = game.bounding_box().expect("checked bounded");
    let n = grid_points(dim, opts);
    let boxes = all_boxes(game);
    let mut idx = vec![0usize; dim];
    let mut best = GapEstimate {
        lower: 0.0,
        upper: None,
        argmax: x.clone(),
    };
    let mut y = Vector::zeros(dim);
    loop {
        for j in 0..dim {
            y[j] = lo[j] + (hi[j] - lo[j]) * idx[j] as f64 / (n - 1) as f64;
        }
        let feasible = if boxes { y.clone() } else { game.project(&y)? };
        let v = obj(&feasible)?;
        if v > best.lower {
            best.lower = v;
            best.argmax = feasible;
        }
        let mut j = 0;
        loop {
            if j == dim {
                return Ok(best);
            }
            idx[j] += 1;
            if idx[j] < n {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

fn multistart(
    game: &GameSpec,
    x: &Vector,
    opts: &GapOptions,
    obj: &Objective<'_>,
    grad: &dyn Fn(&Vector) -> Result<Vector>,
    rng: &mut dyn RngCore,
) -> Result<GapEstimate> {
    let mut best = GapEstimate {
        lower: 0.0,
        upper: None,
        argmax: x.clone(),
    };
    let mut starts = vec![x.clone()];
    for _ in 0..opts.starts {
        starts.push(game.sample_point(rng)?);
    }
    for y0 in starts {
        let (y, v) = projected_ascent(game, y0, opts.iters, obj, grad)?;
        if v > best.lower {
            best.lower = v;
            best.argmax = y;
        }
    }
    Ok(best)
}

/// Projected gradient ascent with backtracking on the sufficient-increase
/// condition `f(y+) >= f(y) + ||y+ - y||^2 / (4 t)`.
fn projected_ascent(
    game: &GameSpec,
    mut y: Vector,
    iters: usize,
    obj: &Objective<'_>,
    grad: &dyn Fn(&Vector) -> Result<Vector>,
) -> Result<(Vector, f64)> {
    let mut f = obj(&y)?;
    let mut t = 1.0;
    for _ in 0..iters {
        let g = grad(&y)?;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = game.project(&(&y + &g * t))?;
            let step = (&cand - &y).norm_squared();
            let fc = obj(&cand)?;
            if fc >= f + step / (4.0 * t) {
                accepted = step > 0.0;
                let moved = step.sqrt();
                y = cand;
                f = fc;
                t *= 2.0;
                if moved <= 1e-12 * (1.0 + y.norm()) {
                    accepted = false;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((y, f))
}

fn fd_gradient(f: &Objective<'_>, y: &Vector) -> Result<Vector> {
    let h = 1e-7 * (1.0 + y.norm());
    let mut g = Vector::zeros(y.len());
    let mut yp = y.clone();
    for j in 0..y.len() {
        yp[j] = y[j] + h;
        let fp = f(&yp)?;
        yp[j] = y[j] - h;
        let fm = f(&yp)?;
        yp[j] = y[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Concatenated per-player selections at coefficients `t`.
pub fn joint_selection(sets: &[SubgradientSet], t: &[Vec<f64>]) -> Vector {
    stack(&sets.iter().zip(t).map(|(s, ti)| s.select(ti)).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{AffinePlayer, NonsmoothTerm, PlayerSpec};
    use crate::rng::{stream, uniform};
    use crate::Matrix;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    /// One player with `phi(y) = slope * y + offset` on `[lo, hi]`.
    fn scalar_game(slope: f64, offset: f64, lo: f64, hi: f64) -> GameSpec {
        GameSpec::new(vec![PlayerSpec::new(
            AffinePlayer::new(
                Matrix::from_element(1, 1, 1.0),
                Matrix::from_element(1, 1, slope),
                Matrix::zeros(1, 1),
                v(&[offset]),
            )
            .unwrap(),
            NonsmoothTerm::indicator(ConvexSet::cube(1, lo, hi)),
        )])
        .unwrap()
    }

    fn abs_term() -> HierarchicalTerm {
        HierarchicalTerm::upper_only(1, |x| x[0].abs(), 1.0, 1.0).with_subdifferential(|x| {
            if x[0] > 0.0 {
                SubgradientSet::single(v(&[1.0]))
            } else if x[0] < 0.0 {
                SubgradientSet::single(v(&[-1.0]))
            } else {
                SubgradientSet {
                    anchor: v(&[-1.0]),
                    generators: vec![v(&[2.0])],
                }
            }
        })
    }

    #[test]
    fn time_average_examples() {
        let mut a = TimeAverage::new(1);
        a.push(&v(&[0.0]), 1.0);
        assert_eq!(a.value(), v(&[0.0]));
        a.push(&v(&[3.0]), 0.5);
        assert!((a.value()[0] - 1.0).abs() < 1e-15);
        let mut b = TimeAverage::new(1);
        for x in [1.0, 2.0, 6.0] {
            b.push(&v(&[x]), 0.3);
        }
        assert!((b.value()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gap_on_unit_interval() {
        let g = scalar_game(1.0, 0.0, 0.0, 1.0);
        let mut rng = stream(1, &[]);
        let grid = GapOptions {
            grid_points: Some(10_001),
            ..GapOptions::grid()
        };
        assert_eq!(gap(&g, &v(&[0.0]), &grid, &mut rng).unwrap().lower, 0.0);
        let at_one = gap(&g, &v(&[1.0]), &grid, &mut rng).unwrap();
        assert!((at_one.lower - 0.25).abs() < 1e-12);
        assert!(at_one.upper.unwrap() >= 0.25);
        let ms = gap(&g, &v(&[1.0]), &GapOptions::default(), &mut rng).unwrap();
        assert!((ms.lower - 0.25).abs() < 1e-9);
    }

    #[test]
    fn grid_refuses_large_dimension() {
        let players = (0..7)
            .map(|_| scalar_game(1.0, 0.0, 0.0, 1.0).players[0].clone())
            .collect();
        let g = GameSpec::new(players).unwrap();
        let mut rng = stream(1, &[]);
        let r = gap(&g, &Vector::zeros(7), &GapOptions::grid(), &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn hierarchical_gap_examples() {
        let g = scalar_game(1.0, 0.0, -1.0, 1.0);
        let terms = [abs_term()];
        let mut rng = stream(2, &[]);
        let grid = GapOptions::grid();
        let at_zero = gap_hierarchical(&g, &terms, &v(&[0.0]), &grid, &mut rng).unwrap();
        assert!(at_zero.lower.abs() < 1e-12);
        let at_one = gap_hierarchical(&g, &terms, &v(&[1.0]), &grid, &mut rng).unwrap();
        assert!((at_one.lower - 1.0).abs() < 1e-9, "{}", at_one.lower);
    }

    #[test]
    fn hierarchical_gap_with_zero_terms_equals_gap() {
        let g = scalar_game(2.0, -0.3, -1.0, 1.0);
        let terms = [HierarchicalTerm::zero(1)];
        let mut rng = stream(3, &[]);
        for x in [-0.7, 0.1, 0.9] {
            let a = gap(&g, &v(&[x]), &GapOptions::grid(), &mut rng).unwrap().lower;
            let b = gap_hierarchical(&g, &terms, &v(&[x]), &GapOptions::grid(), &mut rng).unwrap().lower;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn residual_m_examples() {
        let g = scalar_game(1.0, 0.0, -2.0, 2.0);
        let terms = [abs_term()];
        assert!(hierarchical_residual_m(&g, &terms, &v(&[0.0])).unwrap() < 1e-12);
        let m = hierarchical_residual_m(&g, &terms, &v(&[0.5])).unwrap();
        assert!((m - 1.5).abs() < 1e-12);
    }

    #[test]
    fn residual_m_with_smooth_term_is_plain_residual() {
        let g = scalar_game(1.0, 0.2, -2.0, 2.0);
        let x = v(&[0.7]);
        let m = hierarchical_residual_m(&g, &[HierarchicalTerm::zero(1)], &x).unwrap();
        assert_eq!(m, residual_metric(&g, &x).unwrap());
    }

    #[test]
    fn consensus_error_examples() {
        assert_eq!(consensus_error(&[v(&[1.0]), v(&[1.0])]), 0.0);
        assert!((consensus_error(&[v(&[0.0]), v(&[2.0])]) - 2f64.sqrt()).abs() < 1e-15);
        let w = crate::network::complete(3);
        let vs = vec![v(&[1.0, 0.0]), v(&[4.0, 2.0]), v(&[-2.0, 7.0])];
        let mixed = crate::solver::consensus_step(&w, &vs).unwrap();
        assert!(consensus_error(&mixed) < 1e-12);
    }

    #[test]
    fn fits_recover_power_laws() {
        let ks: Vec<usize> = (1..=100).map(|j| j * 1000).collect();
        let vals: Vec<f64> = ks.iter().map(|k| 3.0 * (*k as f64).powf(-0.4)).collect();
        let f = loglog_fit(&ks, &vals, 0).unwrap();
        assert!((f.slope + 0.4).abs() < 1e-12 && f.r2 > 1.0 - 1e-12);
        let last = last_decade_fit(&ks, &vals).unwrap();
        assert!((last.slope + 0.4).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn decade_checkpoints_pick_powers_of_ten() {
        let ks = [0, 1, 5, 10, 50, 100, 1000];
        let vals = [9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0];
        assert_eq!(
            decade_checkpoints(&ks, &vals),
            vec![(1, 8.0), (10, 6.0), (100, 4.0), (1000, 3.0)]
        );
        assert!(is_nonincreasing(&[3.0, 2.0, 2.0, 1.0], 0.0));
        assert!(!is_nonincreasing(&[3.0, 2.0, 2.5], 0.1));
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s, format!("\"{}\"", m.name()));
        }
        assert!("bogus".parse::<Metric>().is_err());
    }

    fn random_box_game(seed: u64) -> GameSpec {
        let mut rng = stream(seed, &[]);
        let a = Matrix::from_fn(2, 2, |_, _| uniform(-1.0, 1.0, &mut rng));
        let skew = Matrix::from_fn(2, 2, |_, _| uniform(-1.0, 1.0, &mut rng));
        // monotone: PSD symmetric part plus a skew part
        let own = a.transpose() * &a + (&skew - skew.transpose());
        GameSpec::new(vec![PlayerSpec::new(
            AffinePlayer::new(
                Matrix::identity(2, 2),
                own,
                Matrix::zeros(2, 2),
                Vector::from_fn(2, |_, _| uniform(-1.0, 1.0, &mut rng)),
            )
            .unwrap(),
            NonsmoothTerm::indicator(ConvexSet::cube(2, -1.0, 1.0)),
        )])
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gaps_are_nonnegative_and_bracketed(seed in 0u64..10_000) {
            let g = random_box_game(seed);
            let mut rng = stream(seed, &[1]);
            let x = g.sample_point(&mut rng).unwrap();
            let opts = GapOptions { grid_points: Some(401), ..GapOptions::grid() };
            let grid = gap(&g, &x, &opts, &mut rng).unwrap();
            let ms = gap(&g, &x, &GapOptions::default(), &mut rng).unwrap();
            prop_assert!(grid.lower >= 0.0 && ms.lower >= 0.0);
            let up = grid.upper.unwrap();
            prop_assert!(ms.lower <= up + 1e-9);
            prop_assert!(ms.lower >= grid.lower - 1e-7);
        }

        #[test]
        fn consensus_error_is_shift_invariant(vals in prop::collection::vec(-10.0f64..10.0, 6), shift in -5.0f64..5.0) {
            let vs: Vec<Vector> = vals.chunks(2).map(|c| v(c)).collect();
            let shifted: Vec<Vector> = vs.iter().map(|b| b.add_scalar(shift)).collect();
            prop_assert!((consensus_error(&vs) - consensus_error(&shifted)).abs() < 1e-9);
        }
    }
}
