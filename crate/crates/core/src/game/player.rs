//! Player oracles: aggregate contributions and (stochastic) gradient maps.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::doc::{row_major, vector};
use crate::{Error, Matrix, Result, Vector};

/// One player's oracle. `F(x, z)` is the player's gradient with the
/// aggregate argument frozen at `z`; evaluating it at `z = sigma(x)` gives
/// the player's block of the game map.
pub trait PlayerModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn agg_dim(&self) -> usize;

    /// Aggregate contribution `h(x)`.
    fn contribution(&self, x: &Vector) -> Vector;

    /// Jacobian of `h`; central differences unless overridden.
    fn contribution_jacobian(&self, x: &Vector) -> Matrix {
        finite_diff_jacobian(|y| self.contribution(y), x, self.agg_dim())
    }

    /// Mean gradient `F(x, z)`, if known in closed form.
    fn mean_grad(&self, x: &Vector, z: &Vector) -> Option<Vector>;

    /// One stochastic gradient sample `q(x, z; xi)`.
    fn sample_grad(&self, x: &Vector, z: &Vector, rng: &mut dyn RngCore) -> Result<Vector>;

    /// Declared bound on the oracle noise standard deviation.
    fn noise_bound(&self) -> f64 {
        0.0
    }

    /// Declared Lipschitz constant of `h` on the strategy set.
    fn contribution_lipschitz(&self) -> Option<f64> {
        None
    }

    fn as_affine(&self) -> Option<&AffinePlayer> {
        None
    }
}

/// Central differences with step `1e-6 (1 + ||x||)`.
pub fn finite_diff_jacobian(f: impl Fn(&Vector) -> Vector, x: &Vector, rows: usize) -> Matrix {
    let h = 1e-6 * (1.0 + x.norm());
    let mut jac = Matrix::zeros(rows, x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Additive zero-mean oracle noise `L w` with independent `w_j`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    None,
    Gaussian {
        #[serde(with = "row_major")]
        loading: Matrix,
        std: Vec<f64>,
    },
    Uniform {
        #[serde(with = "row_major")]
        loading: Matrix,
        half_width: Vec<f64>,
    },
}

impl NoiseModel {
    pub fn isotropic_gaussian(dim: usize, std: f64) -> Self {
        NoiseModel::Gaussian {
            loading: Matrix::identity(dim, dim),
            std: vec![std; dim],
        }
    }

    pub fn draw(&self, dim: usize, rng: &mut dyn RngCore) -> Vector {
        match self {
            NoiseModel::None => Vector::zeros(dim),
            NoiseModel::Gaussian { loading, std } => {
                let w = Vector::from_fn(std.len(), |j, _| {
                    std[j] * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                });
                loading * w
            }
            NoiseModel::Uniform { loading, half_width } => {
                let w = Vector::from_fn(half_width.len(), |j, _| {
                    let u: f64 = rand::Rng::random(rng);
                    half_width[j] * (2.0 * u - 1.0)
                });
                loading * w
            }
        }
    }

    /// Exact `sqrt(E||L w||^2)`.
    pub fn std_bound(&self) -> f64 {
        let (loading, var): (&Matrix, Vec<f64>) = match self {
            NoiseModel::None => return 0.0,
            NoiseModel::Gaussian { loading, std } => (loading, std.iter().map(|s| s * s).collect()),
            NoiseModel::Uniform { loading, half_width } => {
                (loading, half_width.iter().map(|w| w * w / 3.0).collect())
            }
        };
        (0..var.len())
            .map(|j| var[j] * loading.column(j).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    fn check(&self, dim: usize) -> Result<()> {
        let (loading, n) = match self {
            NoiseModel::None => return Ok(()),
            NoiseModel::Gaussian { loading, std } => (loading, std.len()),
            NoiseModel::Uniform { loading, half_width } => (loading, half_width.len()),
        };
        if loading.nrows() != dim || loading.ncols() != n {
            return Err(Error::dim(format!(
                "noise loading is {}x{}, expected {}x{}",
                loading.nrows(),
                loading.ncols(),
                dim,
                n
            )));
        }
        Ok(())
    }
}

/// `h(x) = H x`, `F(x, z) = P x + C z + c`, plus additive noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffinePlayer {
    /// `H`, aggregate-dim x dim.
    #[serde(with = "row_major")]
    pub contribution: Matrix,
    /// `P`, dim x dim.
    #[serde(with = "row_major")]
    pub own: Matrix,
    /// `C`, dim x aggregate-dim.
    #[serde(with = "row_major")]
    pub cross: Matrix,
    #[serde(with = "vector")]
    pub offset: Vector,
    #[serde(default)]
    pub noise: NoiseModel,
}

impl AffinePlayer {
    pub fn new(contribution: Matrix, own: Matrix, cross: Matrix, offset: Vector) -> Result<Self> {
        let p = AffinePlayer {
            contribution,
            own,
            cross,
            offset,
            noise: NoiseModel::None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        noise.check(self.offset.len())?;
        self.noise = noise;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.offset.len();
        let m = self.contribution.nrows();
        if self.contribution.ncols() != n
            || self.own.shape() != (n, n)
            || self.cross.shape() != (n, m)
        {
            return Err(Error::dim(format!(
                "affine player shapes disagree: H {:?}, P {:?}, C {:?}, c {}",
                self.contribution.shape(),
                self.own.shape(),
                self.cross.shape(),
                n
            )));
        }
        self.noise.check(n)
    }
}

impl PlayerModel for AffinePlayer {
    fn dim(&self) -> usize {
        self.offset.len()
    }
    fn agg_dim(&self) -> usize {
        self.contribution.nrows()
    }
    fn contribution(&self, x: &Vector) -> Vector {
        &self.contribution * x
    }
    fn contribution_jacobian(&self, _x: &Vector) -> Matrix {
        self.contribution.clone()
    }
    fn mean_grad(&self, x: &Vector, z: &Vector) -> Option<Vector> {
        Some(&self.own * x + &self.cross * z + &self.offset)
    }
    fn sample_grad(&self, x: &Vector, z: &Vector, rng: &mut dyn RngCore) -> Result<Vector> {
        let mean = &self.own * x + &self.cross * z + &self.offset;
        Ok(mean + self.noise.draw(self.dim(), rng))
    }
    fn noise_bound(&self) -> f64 {
        self.noise.std_bound()
    }
    fn contribution_lipschitz(&self) -> Option<f64> {
        Some(self.contribution.norm())
    }
    fn as_affine(&self) -> Option<&AffinePlayer> {
        Some(self)
    }
}

type VecFn = dyn Fn(&Vector) -> Vector + Send + Sync;
type PairFn = dyn Fn(&Vector, &Vector) -> Vector + Send + Sync;
type NoisyFn = dyn Fn(&Vector, &Vector, &mut dyn RngCore) -> Result<Vector> + Send + Sync;

/// Player built from closures. Without a sampler the oracle is exact.
#[derive(Clone)]
pub struct FnPlayer {
    dim: usize,
    agg_dim: usize,
    h: Arc<VecFn>,
    jac: Option<Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>>,
    mean: Option<Arc<PairFn>>,
    sampler: Option<Arc<NoisyFn>>,
    noise_bound: f64,
    lipschitz: Option<f64>,
}

impl fmt::Debug for FnPlayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnPlayer")
            .field("dim", &self.dim)
            .field("agg_dim", &self.agg_dim)
            .field("has_mean", &self.mean.is_some())
            .field("has_sampler", &self.sampler.is_some())
            .finish()
    }
}

impl FnPlayer {
    pub fn new(dim: usize, agg_dim: usize, h: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        FnPlayer {
            dim,
            agg_dim,
            h: Arc::new(h),
            jac: None,
            mean: None,
            sampler: None,
            noise_bound: 0.0,
            lipschitz: None,
        }
    }

    /// Identity contribution `h(x) = x`.
    pub fn identity(dim: usize) -> Self {
        Self::new(dim, dim, |x| x.clone()).jacobian(move |_| Matrix::identity(dim, dim))
    }

    pub fn jacobian(mut self, jac: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }

    pub fn mean(mut self, f: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.mean = Some(Arc::new(f));
        self
    }

    pub fn sampler(
        mut self,
        noise_bound: f64,
        f: impl Fn(&Vector, &Vector, &mut dyn RngCore) -> Result<Vector> + Send + Sync + 'static,
    ) -> Self {
        self.sampler = Some(Arc::new(f));
        self.noise_bound = noise_bound;
        self
    }

    pub fn lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }
}

impl PlayerModel for FnPlayer {
    fn dim(&self) -> usize {
        self.dim
    }
    fn agg_dim(&self) -> usize {
        self.agg_dim
    }
    fn contribution(&self, x: &Vector) -> Vector {
        (self.h)(x)
    }
    fn contribution_jacobian(&self, x: &Vector) -> Matrix {
        match &self.jac {
            Some(j) => j(x),
            None => finite_diff_jacobian(|y| (self.h)(y), x, self.agg_dim),
        }
    }
    fn mean_grad(&self, x: &Vector, z: &Vector) -> Option<Vector> {
        self.mean.as_ref().map(|f| f(x, z))
    }
    fn sample_grad(&self, x: &Vector, z: &Vector, rng: &mut dyn RngCore) -> Result<Vector> {
        match (&self.sampler, &self.mean) {
            (Some(s), _) => s(x, z, rng),
            (None, Some(m)) => Ok(m(x, z)),
            (None, None) => Err(Error::Unsupported("player has neither a sampler nor a mean gradient".into())),
        }
    }
    fn noise_bound(&self) -> f64 {
        self.noise_bound
    }
    fn contribution_lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// Player given by a cost `f(x, z)` through its partial gradients; the
/// game gradient is `grad_x f + Jh(x)' grad_z f`.
#[derive(Clone)]
pub struct CompositePlayer {
    inner: FnPlayer,
    grad_x: Arc<PairFn>,
    grad_z: Arc<PairFn>,
}

impl fmt::Debug for CompositePlayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompositePlayer").field("inner", &self.inner).finish()
    }
}

impl CompositePlayer {
    pub fn new(
        contribution: FnPlayer,
        grad_x: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
        grad_z: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        CompositePlayer {
            inner: contribution,
            grad_x: Arc::new(grad_x),
            grad_z: Arc::new(grad_z),
        }
    }
}

impl PlayerModel for CompositePlayer {
    fn dim(&self) -> usize {
        self.inner.dim
    }
    fn agg_dim(&self) -> usize {
        self.inner.agg_dim
    }
    fn contribution(&self, x: &Vector) -> Vector {
        self.inner.contribution(x)
    }
    fn contribution_jacobian(&self, x: &Vector) -> Matrix {
        self.inner.contribution_jacobian(x)
    }
    fn mean_grad(&self, x: &Vector, z: &Vector) -> Option<Vector> {
        let jac = self.contribution_jacobian(x);
        Some((self.grad_x)(x, z) + jac.transpose() * (self.grad_z)(x, z))
    }
    fn sample_grad(&self, x: &Vector, z: &Vector, rng: &mut dyn RngCore) -> Result<Vector> {
        let mean = self.mean_grad(x, z).expect("composite players always have a mean");
        match &self.inner.sampler {
            Some(s) => Ok(mean + s(x, z, rng)?),
            None => Ok(mean),
        }
    }
    fn noise_bound(&self) -> f64 {
        self.inner.noise_bound
    }
    fn contribution_lipschitz(&self) -> Option<f64> {
        self.inner.lipschitz
    }
}
