//! Aggregative game model.

pub mod doc;
pub mod player;
pub mod prox;
pub mod set;

use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use player::{finite_diff_jacobian, AffinePlayer, CompositePlayer, FnPlayer, NoiseModel, PlayerModel};
pub use prox::{prox_apply, GradientProx, NonsmoothTerm, ProxMap};
pub use set::{ConvexSet, Polyhedron, SET_TOL};

use crate::{split, stack, Error, Matrix, Result, Vector};

#[derive(Debug, Clone)]
pub struct PlayerSpec {
    pub model: Arc<dyn PlayerModel>,
    pub nonsmooth: NonsmoothTerm,
}

impl PlayerSpec {
    pub fn new(model: impl PlayerModel + 'static, nonsmooth: NonsmoothTerm) -> Self {
        PlayerSpec {
            model: Arc::new(model),
            nonsmooth,
        }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn prox(&self, alpha: f64, x: &Vector) -> Result<Vector> {
        prox_apply(&self.nonsmooth, alpha, x)
    }
}

#[derive(Debug, Clone)]
pub struct GameSpec {
    pub players: Vec<PlayerSpec>,
    agg_dim: usize,
    dims: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub pairs: usize,
    pub min_inner: f64,
    pub max_ratio: f64,
    pub violation: bool,
}

impl GameSpec {
    pub fn new(players: Vec<PlayerSpec>) -> Result<Self> {
        let first = players
            .first()
            .ok_or_else(|| Error::config("a game needs at least one player"))?;
        let agg_dim = first.model.agg_dim();
        for (i, p) in players.iter().enumerate() {
            if p.model.agg_dim() != agg_dim {
                return Err(Error::dim(format!(
                    "player {i} contributes to a {}-dimensional aggregate, expected {agg_dim}",
                    p.model.agg_dim()
                )));
            }
            if let Some(set) = p.nonsmooth.set() {
                set.validate()?;
                if set.dim() != p.dim() {
                    return Err(Error::dim(format!(
                        "player {i} has dimension {} but its set has dimension {}",
                        p.dim(),
                        set.dim()
                    )));
                }
            }
        }
        let dims = players.iter().map(|p| p.dim()).collect();
        Ok(GameSpec {
            players,
            agg_dim,
            dims,
        })
    }

    pub fn n_players(&self) -> usize {
        self.players.len()
    }

    pub fn agg_dim(&self) -> usize {
        self.agg_dim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn split(&self, x: &Vector) -> Result<Vec<Vector>> {
        split(x, &self.dims)
    }

    fn check_blocks(&self, xs: &[Vector]) -> Result<()> {
        if xs.len() != self.n_players() {
            return Err(Error::dim(format!(
                "{} blocks for {} players",
                xs.len(),
                self.n_players()
            )));
        }
        for (i, (x, d)) in xs.iter().zip(&self.dims).enumerate() {
            if x.len() != *d {
                return Err(Error::dim(format!("player {i} block has length {}, expected {d}", x.len())));
            }
        }
        Ok(())
    }

    pub fn aggregate_blocks(&self, xs: &[Vector]) -> Result<Vector> {
        self.check_blocks(xs)?;
        let mut z = Vector::zeros(self.agg_dim);
        for (p, x) in self.players.iter().zip(xs) {
            z += p.model.contribution(x);
        }
        Ok(z)
    }

    /// `sigma(x) = sum_j h_j(x_j)`.
    pub fn aggregate(&self, x: &Vector) -> Result<Vector> {
        self.aggregate_blocks(&self.split(x)?)
    }

    pub fn phi_blocks(&self, xs: &[Vector]) -> Result<Vec<Vector>> {
        let z = self.aggregate_blocks(xs)?;
        self.players
            .iter()
            .zip(xs)
            .enumerate()
            .map(|(i, (p, x))| {
                p.model
                    .mean_grad(x, &z)
                    .ok_or_else(|| Error::Unsupported(format!("player {i} has no mean gradient")))
            })
            .collect()
    }

    /// Concatenated game map `phi(x) = (F_i(x_i, sigma(x)))_i`.
    pub fn phi(&self, x: &Vector) -> Result<Vector> {
        Ok(stack(&self.phi_blocks(&self.split(x)?)?))
    }

    /// Blockwise prox of the nonsmooth terms.
    pub fn prox(&self, alpha: f64, x: &Vector) -> Result<Vector> {
        let blocks = self
            .split(x)?
            .iter()
            .zip(&self.players)
            .map(|(xi, p)| p.prox(alpha, xi))
            .collect::<Result<Vec<_>>>()?;
        Ok(stack(&blocks))
    }

    /// Joint strategy set when every nonsmooth term is an indicator.
    pub fn sets(&self) -> Option<Vec<&ConvexSet>> {
        self.players
            .iter()
            .map(|p| match &p.nonsmooth {
                NonsmoothTerm::Indicator { set } => Some(set),
                _ => None,
            })
            .collect()
    }

    pub fn project(&self, x: &Vector) -> Result<Vector> {
        if self.sets().is_none() {
            return Err(Error::Unsupported("projection needs indicator terms for every player".into()));
        }
        self.prox(1.0, x)
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        match (self.sets(), self.split(x)) {
            (Some(sets), Ok(xs)) => sets.iter().zip(&xs).all(|(s, xi)| s.contains(xi, tol)),
            _ => false,
        }
    }

    /// Feasible joint point from per-player set sampling.
    pub fn sample_point(&self, rng: &mut dyn RngCore) -> Result<Vector> {
        let blocks = self
            .players
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.nonsmooth
                    .set()
                    .ok_or_else(|| Error::config(format!("player {i} has no bounded set to sample from")))?
                    .sample(rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(stack(&blocks))
    }

    /// Bounding box of the joint set.
    pub fn bounding_box(&self) -> Option<(Vector, Vector)> {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for p in &self.players {
            let (l, h) = p.nonsmooth.set()?.bounding_box()?;
            lo.push(l);
            hi.push(h);
        }
        Some((stack(&lo), stack(&hi)))
    }

    /// `max ||x||` over the joint set.
    pub fn norm_bound(&self) -> Option<f64> {
        let mut s = 0.0;
        for p in &self.players {
            s += p.nonsmooth.set()?.norm_bound()?.powi(2);
        }
        Some(f64::sqrt(s))
    }

    /// `phi(x) = J x + c` when every player is affine.
    pub fn affine_map(&self) -> Option<(Matrix, Vector)> {
        let aff: Vec<&AffinePlayer> = self.players.iter().map(|p| p.model.as_affine()).collect::<Option<_>>()?;
        let n = self.total_dim();
        let mut jac = Matrix::zeros(n, n);
        let mut c = Vector::zeros(n);
        let offs: Vec<usize> = self
            .dims
            .iter()
            .scan(0, |o, d| {
                let r = *o;
                *o += d;
                Some(r)
            })
            .collect();
        for (i, pi) in aff.iter().enumerate() {
            let di = self.dims[i];
            c.rows_mut(offs[i], di).copy_from(&pi.offset);
            for (j, pj) in aff.iter().enumerate() {
                let mut block = &pi.cross * &pj.contribution;
                if i == j {
                    block += &pi.own;
                }
                jac.view_mut((offs[i], offs[j]), (di, self.dims[j])).copy_from(&block);
            }
        }
        Some((jac, c))
    }

    /// Samples feasible pairs and reports the worst monotonicity inner
    /// product and the largest observed Lipschitz ratio.
    pub fn check_monotone(&self, n_pairs: usize, rng: &mut dyn RngCore) -> Result<MonotoneReport> {
        self.check_monotone_with(n_pairs, rng, &mut |g, r| g.sample_point(r))
    }

    pub fn check_monotone_with(
        &self,
        n_pairs: usize,
        rng: &mut dyn RngCore,
        sampler: &mut dyn FnMut(&GameSpec, &mut dyn RngCore) -> Result<Vector>,
    ) -> Result<MonotoneReport> {
        let mut min_inner = f64::INFINITY;
        let mut max_ratio: f64 = 0.0;
        let mut violation = false;
        for _ in 0..n_pairs {
            let x = sampler(self, rng)?;
            let y = sampler(self, rng)?;
            let dx = &x - &y;
            let dphi = self.phi(&x)? - self.phi(&y)?;
            let inner = dphi.dot(&dx);
            min_inner = min_inner.min(inner);
            if dx.norm() > 0.0 {
                max_ratio = max_ratio.max(dphi.norm() / dx.norm());
            }
            if inner < -1e-8 * (1.0 + dx.norm() * (dphi.norm() + dx.norm())) {
                violation = true;
            }
        }
        Ok(MonotoneReport {
            pairs: n_pairs,
            min_inner,
            max_ratio,
            violation,
        })
    }

    /// Largest sampled `||h(x) - h(x')|| / ||x - x'||` per player.
    pub fn contribution_lipschitz_estimate(&self, n_pairs: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.players
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let set = p
                    .nonsmooth
                    .set()
                    .ok_or_else(|| Error::config(format!("player {i} has no bounded set to sample from")))?;
                let mut worst: f64 = 0.0;
                for _ in 0..n_pairs {
                    let a = set.sample(rng)?;
                    let b = set.sample(rng)?;
                    let d = (&a - &b).norm();
                    if d > 0.0 {
                        worst = worst.max((p.model.contribution(&a) - p.model.contribution(&b)).norm() / d);
                    }
                }
                Ok(worst)
            })
            .collect()
    }

    /// `||x - prox(x - alpha phi(x))||`; zero exactly at equilibria.
    pub fn fixed_point_residual(&self, x: &Vector, alpha: f64) -> Result<f64> {
        let step = x - self.phi(x)? * alpha;
        Ok((x - self.prox(alpha, &step)?).norm())
    }

    pub fn to_document(&self) -> Result<GameDocument> {
        let players = self
            .players
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let model = p
                    .model
                    .as_affine()
                    .ok_or_else(|| Error::Unsupported(format!("player {i} is not affine and cannot be serialized")))?
                    .clone();
                if matches!(p.nonsmooth, NonsmoothTerm::Custom(_)) {
                    return Err(Error::Unsupported(format!("player {i} has a custom prox")));
                }
                Ok(PlayerDocument {
                    model,
                    nonsmooth: p.nonsmooth.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(GameDocument {
            agg_dim: self.agg_dim,
            players,
        })
    }

    pub fn from_document(doc: GameDocument) -> Result<Self> {
        let players = doc
            .players
            .into_iter()
            .map(|p| {
                p.model.validate()?;
                Ok(PlayerSpec::new(p.model, p.nonsmooth))
            })
            .collect::<Result<Vec<_>>>()?;
        let g = GameSpec::new(players)?;
        if g.agg_dim != doc.agg_dim {
            return Err(Error::dim(format!(
                "document declares aggregate dimension {} but players use {}",
                doc.agg_dim, g.agg_dim
            )));
        }
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document()?)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlayerDocument {
    pub model: AffinePlayer,
    pub nonsmooth: NonsmoothTerm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GameDocument {
    pub agg_dim: usize,
    pub players: Vec<PlayerDocument>,
}
