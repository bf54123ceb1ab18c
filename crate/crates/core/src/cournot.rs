//! Networked Nash-Cournot benchmark.
//!
//! Firm `i` produces `g_i` at its plants and ships `s_i` to its `m_i`
//! markets (participation matrix `A_i`, one unit entry per column). Market
//! `l` clears at price `d_l - b_l sigma_l` where `sigma = sum_j A_j s_j`.
//! The firm's gradient is
//!
//! ```text
//! F_i(x_i, z) = ( kappa_i ; -A_i^T d + A_i^T B A_i s_i + A_i^T B z )
//! ```
//!
//! with oracle noise `( xi_i ; -A_i^T theta )`, `xi_i ~ U(+-kappa_i frac)` and
//! `theta_l ~ U(+-d_l frac)` drawn independently by every firm.
//!
//! The hierarchical variant adds the leader cost
//! `D_i(x_i) = w_i^T max(l_i g_i, t_i K g_i)` with scalar slopes `l_i, t_i`,
//! nonnegative weights `w_i` and a symmetric positive definite `K` standing
//! for the inverse follower Hessian.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::game::{AffinePlayer, ConvexSet, GameSpec, NoiseModel, NonsmoothTerm, PlayerSpec, Polyhedron};
use crate::rng::{purpose, stream, uniform};
use crate::solver::{HierarchicalTerm, LowerVi, SubgradientSet};
use crate::{Error, Matrix, Result, Vector};

/// Sampling ranges for [`CournotInstance::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CournotSpec {
    pub firms: usize,
    pub markets: usize,
    pub markets_per_firm: usize,
    pub fixed_cost: (f64, f64),
    pub marginal_cost: (f64, f64),
    pub capacity: (f64, f64),
    pub intercept: (f64, f64),
    pub slope: (f64, f64),
    /// Noise half-width as a fraction of `kappa` and `d`.
    pub noise_fraction: f64,
}

impl Default for CournotSpec {
    fn default() -> Self {
        CournotSpec {
            firms: 20,
            markets: 10,
            markets_per_firm: 3,
            fixed_cost: (5.0, 6.0),
            marginal_cost: (0.5, 0.6),
            capacity: (2.0, 2.5),
            intercept: (20.0, 25.0),
            slope: (1.0, 1.5),
            noise_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CournotInstance {
    /// Market indices served by each firm, in column order of `A_i`.
    pub participation: Vec<Vec<usize>>,
    pub markets: usize,
    pub intercept: Vec<f64>,
    pub slope: Vec<f64>,
    pub fixed_cost: Vec<f64>,
    pub marginal_cost: Vec<Vec<f64>>,
    pub capacity: Vec<Vec<f64>>,
    pub noise_fraction: f64,
}

impl CournotInstance {
    pub fn generate(spec: &CournotSpec, seed: u64) -> Result<Self> {
        if spec.firms == 0 || spec.markets == 0 || spec.markets_per_firm == 0 {
            return Err(Error::config("firms, markets and markets per firm must be positive"));
        }
        if spec.markets_per_firm > spec.markets {
            return Err(Error::config(format!(
                "{} markets per firm exceeds {} markets",
                spec.markets_per_firm, spec.markets
            )));
        }
        let mut rng = stream(seed, &[purpose::INSTANCE]);
        let mut draw = |r: (f64, f64)| uniform(r.0, r.1, &mut rng);
        let intercept: Vec<f64> = (0..spec.markets).map(|_| draw(spec.intercept)).collect();
        let slope: Vec<f64> = (0..spec.markets).map(|_| draw(spec.slope)).collect();
        let mi = spec.markets_per_firm;
        let mut fixed_cost = Vec::new();
        let mut marginal_cost = Vec::new();
        let mut capacity = Vec::new();
        for _ in 0..spec.firms {
            fixed_cost.push(draw(spec.fixed_cost));
            marginal_cost.push((0..mi).map(|_| draw(spec.marginal_cost)).collect());
            capacity.push((0..mi).map(|_| draw(spec.capacity)).collect());
        }
        let participation = (0..spec.firms)
            .map(|_| sample(&mut rng, spec.markets, mi).into_vec())
            .collect();
        let inst = CournotInstance {
            participation,
            markets: spec.markets,
            intercept,
            slope,
            fixed_cost,
            marginal_cost,
            capacity,
            noise_fraction: spec.noise_fraction,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn firms(&self) -> usize {
        self.participation.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.firms();
        if self.fixed_cost.len() != n || self.marginal_cost.len() != n || self.capacity.len() != n {
            return Err(Error::dim("per-firm parameter lists differ in length"));
        }
        if self.intercept.len() != self.markets || self.slope.len() != self.markets {
            return Err(Error::dim("per-market parameter lists differ in length"));
        }
        if self.intercept.iter().chain(&self.slope).any(|v| !(*v > 0.0)) {
            return Err(Error::config("price intercepts and slopes must be positive"));
        }
        for (i, p) in self.participation.iter().enumerate() {
            let mi = p.len();
            if mi == 0 || self.marginal_cost[i].len() != mi || self.capacity[i].len() != mi {
                return Err(Error::dim(format!("firm {i}: participation and cost vectors disagree")));
            }
            if self.capacity[i].iter().any(|c| !(*c > 0.0)) {
                return Err(Error::config(format!("firm {i}: capacities must be positive")));
            }
            let mut seen = vec![false; self.markets];
            for &l in p {
                if l >= self.markets || seen[l] {
                    return Err(Error::config(format!("firm {i}: market indices must be distinct and below {}", self.markets)));
                }
                seen[l] = true;
            }
        }
        if !(self.noise_fraction >= 0.0) {
            return Err(Error::config("noise fraction must be nonnegative"));
        }
        Ok(())
    }

    /// `A_i`, `m x m_i`.
    pub fn participation_matrix(&self, i: usize) -> Matrix {
        let p = &self.participation[i];
        let mut a = Matrix::zeros(self.markets, p.len());
        for (j, &l) in p.iter().enumerate() {
            a[(l, j)] = 1.0;
        }
        a
    }

    pub fn slope_matrix(&self) -> Matrix {
        Matrix::from_diagonal(&Vector::from_column_slice(&self.slope))
    }

    /// `{g <= cap, 1^T s = 1^T g, g >= 0, s >= 0}` over `(g; s)`.
    pub fn strategy_set(&self, i: usize) -> Result<ConvexSet> {
        let cap = &self.capacity[i];
        let mi = cap.len();
        let mut ineq = Matrix::zeros(3 * mi, 2 * mi);
        let mut rhs = vec![0.0; 3 * mi];
        for j in 0..mi {
            ineq[(j, j)] = 1.0;
            rhs[j] = cap[j];
            ineq[(mi + j, j)] = -1.0;
            ineq[(2 * mi + j, mi + j)] = -1.0;
        }
        let mut eq = Matrix::zeros(1, 2 * mi);
        for j in 0..mi {
            eq[(0, j)] = -1.0;
            eq[(0, mi + j)] = 1.0;
        }
        let mut poly = Polyhedron::new(ineq, rhs, eq, vec![0.0])?;
        let total: f64 = cap.iter().sum();
        poly.bounds = Some((
            vec![0.0; 2 * mi],
            cap.iter().copied().chain(std::iter::repeat_n(total, mi)).collect(),
        ));
        Ok(ConvexSet::Polyhedron(poly))
    }

    /// Affine player model of firm `i`.
    pub fn player(&self, i: usize) -> Result<AffinePlayer> {
        let a = self.participation_matrix(i);
        let b = self.slope_matrix();
        let mi = a.ncols();
        let m = self.markets;
        let mut contribution = Matrix::zeros(m, 2 * mi);
        contribution.view_mut((0, mi), (m, mi)).copy_from(&a);
        let mut own = Matrix::zeros(2 * mi, 2 * mi);
        own.view_mut((mi, mi), (mi, mi)).copy_from(&(a.transpose() * &b * &a));
        let mut cross = Matrix::zeros(2 * mi, m);
        cross.view_mut((mi, 0), (mi, m)).copy_from(&(a.transpose() * &b));
        let d = Vector::from_column_slice(&self.intercept);
        let mut offset = Vector::zeros(2 * mi);
        offset.rows_mut(0, mi).copy_from_slice(&self.marginal_cost[i]);
        offset.rows_mut(mi, mi).copy_from(&(-(a.transpose() * &d)));
        let player = AffinePlayer::new(contribution, own, cross, offset)?;
        if self.noise_fraction == 0.0 {
            return Ok(player);
        }
        let mut loading = Matrix::zeros(2 * mi, mi + m);
        loading.view_mut((0, 0), (mi, mi)).fill_with_identity();
        loading.view_mut((mi, mi), (mi, m)).copy_from(&(-a.transpose()));
        let half_width = self.marginal_cost[i]
            .iter()
            .chain(&self.intercept)
            .map(|v| v * self.noise_fraction)
            .collect();
        player.with_noise(NoiseModel::Uniform { loading, half_width })
    }

    pub fn to_game(&self) -> Result<GameSpec> {
        self.validate()?;
        let players = (0..self.firms())
            .map(|i| Ok(PlayerSpec::new(self.player(i)?, NonsmoothTerm::indicator(self.strategy_set(i)?))))
            .collect::<Result<Vec<_>>>()?;
        GameSpec::new(players)
    }

    /// Smallest eigenvalue of `Q + S^T S`, the monotonicity certificate of
    /// the shipment block.
    pub fn monotonicity_margin(&self) -> f64 {
        let b = self.slope_matrix();
        let sqrt_b = b.map(f64::sqrt);
        let blocks: Vec<Matrix> = (0..self.firms()).map(|i| self.participation_matrix(i)).collect();
        let total: usize = blocks.iter().map(|a| a.ncols()).sum();
        let mut q = Matrix::zeros(total, total);
        let mut s = Matrix::zeros(self.markets, total);
        let mut off = 0;
        for a in &blocks {
            let k = a.ncols();
            q.view_mut((off, off), (k, k)).copy_from(&(a.transpose() * &b * a));
            s.view_mut((0, off), (self.markets, k)).copy_from(&(&sqrt_b * a));
            off += k;
        }
        let m = q + s.transpose() * s;
        m.symmetric_eigenvalues().min()
    }
}

/// Leader-cost parameters for every firm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierCournot {
    pub base: CournotInstance,
    pub weights: Vec<Vec<f64>>,
    /// Inverse follower Hessian, shared by all firms.
    #[serde(with = "crate::game::doc::row_major")]
    pub inverse_hessian: Matrix,
    pub lower_slope: Vec<f64>,
    pub target_slope: Vec<f64>,
}

/// Default inverse follower Hessian of the hierarchical benchmark.
pub fn default_inverse_hessian() -> Matrix {
    Matrix::from_row_slice(3, 3, &[2.0, 1.0, -0.5, 1.0, 1.5, 0.0, -0.5, 0.0, 2.0])
}

impl HierCournot {
    /// Unit weights and slopes drawn from `U[0, 1]`. The inverse Hessian is
    /// symmetrized and must be positive definite.
    pub fn generate(base: CournotInstance, inverse_hessian: Matrix, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, &[purpose::INSTANCE, 1]);
        let n = base.firms();
        let weights = base.participation.iter().map(|p| vec![1.0; p.len()]).collect();
        let lower_slope = (0..n).map(|_| uniform(0.0, 1.0, &mut rng)).collect();
        let target_slope = (0..n).map(|_| uniform(0.0, 1.0, &mut rng)).collect();
        let h = HierCournot {
            base,
            weights,
            inverse_hessian: symmetrize(&inverse_hessian),
            lower_slope,
            target_slope,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let k = self.inverse_hessian.nrows();
        if self.inverse_hessian.ncols() != k {
            return Err(Error::dim("inverse Hessian must be square"));
        }
        if self.inverse_hessian.clone().cholesky().is_none() {
            return Err(Error::config("inverse Hessian is not positive definite"));
        }
        let n = self.base.firms();
        if self.weights.len() != n || self.lower_slope.len() != n || self.target_slope.len() != n {
            return Err(Error::dim("leader parameters must cover every firm"));
        }
        for (i, w) in self.weights.iter().enumerate() {
            if w.len() != k || self.base.participation[i].len() != k {
                return Err(Error::dim(format!("firm {i}: leader weights need {k} markets")));
            }
            if w.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::config(format!("firm {i}: leader weights must be nonnegative for convexity")));
            }
        }
        Ok(())
    }

    fn pieces(&self, i: usize, x: &Vector) -> (Vector, Vector) {
        let k = self.inverse_hessian.nrows();
        let g = x.rows(0, k).into_owned();
        (&g * self.lower_slope[i], &self.inverse_hessian * &g * self.target_slope[i])
    }

    /// `max(l_i g_i, t_i K g_i)` componentwise.
    pub fn lower_level_closed_form(&self, i: usize, x: &Vector) -> Vector {
        let (lo, un) = self.pieces(i, x);
        lo.zip_map(&un, f64::max)
    }

    pub fn leader_cost(&self, i: usize, x: &Vector) -> f64 {
        Vector::from_column_slice(&self.weights[i]).dot(&self.lower_level_closed_form(i, x))
    }

    /// Follower VI `H y - t_i g_i` over `{y >= l_i g_i}`, `H = K^-1`.
    pub fn lower_vi(&self, i: usize) -> Result<LowerVi> {
        let k = self.inverse_hessian.nrows();
        let h = self
            .inverse_hessian
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::config("inverse Hessian is singular"))?;
        let eig = h.clone().symmetric_eigenvalues();
        let (mu, l) = (eig.min(), eig.max());
        let t = self.target_slope[i];
        let ls = self.lower_slope[i];
        let cap = Vector::from_column_slice(&self.base.capacity[i]).norm();
        let radius = 2.0 * cap * (ls + t * self.inverse_hessian.norm()) + 1.0;
        Ok(LowerVi::deterministic(
            ConvexSet::Box {
                lower: vec![0.0; k],
                upper: vec![f64::INFINITY; k],
            },
            move |x, y| &h * y - x.rows(0, k) * t,
            mu,
            l,
        )
        .with_shift(move |x| x.rows(0, k) * ls)
        .with_radius(radius))
    }

    /// Subdifferential of `D_i` at `x`; ties within `1e-12` contribute a
    /// segment generator.
    pub fn subdifferential(&self, i: usize, x: &Vector) -> SubgradientSet {
        let k = self.inverse_hessian.nrows();
        let dim = x.len();
        let (lo, un) = self.pieces(i, x);
        let mut anchor = Vector::zeros(dim);
        let mut generators = Vec::new();
        for j in 0..k {
            let w = self.weights[i][j];
            let mut ga = Vector::zeros(dim);
            ga[j] = self.lower_slope[i] * w;
            let mut gb = Vector::zeros(dim);
            for c in 0..k {
                gb[c] = self.target_slope[i] * self.inverse_hessian[(j, c)] * w;
            }
            let tie = 1e-12 * (1.0 + lo[j].abs() + un[j].abs());
            if lo[j] > un[j] + tie {
                anchor += ga;
            } else if un[j] > lo[j] + tie {
                anchor += gb;
            } else {
                let e = ga - &gb;
                anchor += gb;
                if e.amax() > 0.0 {
                    generators.push(e);
                }
            }
        }
        SubgradientSet { anchor, generators }
    }

    /// One leader term per firm with the closed-form follower.
    pub fn terms(&self) -> Result<Vec<HierarchicalTerm>> {
        (0..self.base.firms())
            .map(|i| {
                let me = self.clone();
                let me2 = self.clone();
                let me3 = self.clone();
                let dim = 2 * self.base.participation[i].len();
                let w = Vector::from_column_slice(&self.weights[i]).norm();
                let l0 = w * (self.lower_slope[i] + self.target_slope[i] * self.inverse_hessian.norm());
                Ok(HierarchicalTerm::new(
                    dim,
                    move |_, y| Vector::from_column_slice(&me.weights[i]).dot(y),
                    l0,
                    w,
                    1.0,
                )
                .with_closed_form(move |x| me2.lower_level_closed_form(i, x))
                .with_subdifferential(move |x| me3.subdifferential(i, x))
                .with_lower(self.lower_vi(i)?))
            })
            .collect()
    }
}

fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Named benchmark settings: instance ranges plus the run parameters that
/// go with them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub spec: CournotSpec,
    pub hierarchical: bool,
    pub alpha_exponent: f64,
    pub eta_exponent: f64,
    pub alpha_offset: (f64, f64),
    pub eta_offset: (f64, f64),
    pub edge_probability: f64,
    /// `mu_k = (k + 1)^-exponent` for hierarchical presets.
    pub smoothing_exponent: Option<f64>,
}

pub const PRESETS: [&str; 3] = ["network-cournot", "hierarchical-cournot", "desk-small"];

impl Preset {
    pub fn by_name(name: &str) -> Result<Self> {
        let base = Preset {
            name: name.to_string(),
            spec: CournotSpec::default(),
            hierarchical: false,
            alpha_exponent: 0.8,
            eta_exponent: 0.05,
            alpha_offset: (4.0, 5.0),
            eta_offset: (2.0, 3.0),
            edge_probability: 0.2,
            smoothing_exponent: None,
        };
        match name {
            "network-cournot" => Ok(base),
            "hierarchical-cournot" => Ok(Preset {
                hierarchical: true,
                alpha_exponent: 0.75,
                eta_exponent: 0.24,
                smoothing_exponent: Some(0.24),
                ..base
            }),
            "desk-small" => Ok(Preset {
                spec: CournotSpec {
                    firms: 5,
                    markets: 3,
                    markets_per_firm: 2,
                    ..CournotSpec::default()
                },
                alpha_exponent: 0.6,
                eta_exponent: 0.3,
                edge_probability: 0.5,
                ..base
            }),
            other => Err(Error::config(format!("unknown preset `{other}`; expected one of {PRESETS:?}"))),
        }
    }
}
