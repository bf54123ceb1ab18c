//! Nonsmooth terms and their proximal maps.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::set::ConvexSet;
use crate::{Error, Result, Vector};

/// User-supplied proximal evaluator.
pub trait ProxMap: Send + Sync + fmt::Debug {
    /// `argmin_y r(y) + ||y - x||^2 / (2 alpha)`.
    fn prox(&self, alpha: f64, x: &Vector) -> Result<Vector>;

    /// Bounding set of the effective domain, if known (used for sampling).
    fn domain(&self) -> Option<&ConvexSet> {
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonsmoothTerm {
    Indicator { set: ConvexSet },
    L1 { weight: f64 },
    #[serde(skip)]
    Custom(Arc<dyn ProxMap>),
}

impl NonsmoothTerm {
    pub fn indicator(set: ConvexSet) -> Self {
        NonsmoothTerm::Indicator { set }
    }

    pub fn set(&self) -> Option<&ConvexSet> {
        match self {
            NonsmoothTerm::Indicator { set } => Some(set),
            NonsmoothTerm::Custom(p) => p.domain(),
            NonsmoothTerm::L1 { .. } => None,
        }
    }
}

pub fn prox_apply(term: &NonsmoothTerm, alpha: f64, x: &Vector) -> Result<Vector> {
    if !(alpha > 0.0) {
        return Err(Error::config(format!("prox step must be positive, got {alpha}")));
    }
    match term {
        NonsmoothTerm::Indicator { set } => set.project(x),
        NonsmoothTerm::L1 { weight } => {
            let t = alpha * weight;
            Ok(x.map(|v| v.signum() * (v.abs() - t).max(0.0)))
        }
        NonsmoothTerm::Custom(p) => p.prox(alpha, x),
    }
}

type GradFn = dyn Fn(&Vector) -> Vector + Send + Sync;

/// Prox of a smooth convex `r` with `L`-Lipschitz gradient, computed by
/// gradient descent on the strongly convex prox objective.
#[derive(Clone)]
pub struct GradientProx {
    grad: Arc<GradFn>,
    lipschitz: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl fmt::Debug for GradientProx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradientProx")
            .field("lipschitz", &self.lipschitz)
            .field("tol", &self.tol)
            .field("max_iter", &self.max_iter)
            .finish()
    }
}

impl GradientProx {
    pub fn new(grad: impl Fn(&Vector) -> Vector + Send + Sync + 'static, lipschitz: f64) -> Self {
        GradientProx {
            grad: Arc::new(grad),
            lipschitz,
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

impl ProxMap for GradientProx {
    fn prox(&self, alpha: f64, x: &Vector) -> Result<Vector> {
        let step = 1.0 / (self.lipschitz + 1.0 / alpha);
        let mut y = x.clone();
        let mut res = f64::INFINITY;
        for _ in 0..self.max_iter {
            let g = (self.grad)(&y) + (&y - x) / alpha;
            res = g.norm();
            if res <= self.tol * (1.0 + x.norm()) {
                return Ok(y);
            }
            y -= g * step;
        }
        Err(Error::Numeric {
            message: format!("custom prox did not converge in {} iterations", self.max_iter),
            residual: res,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn shipped_examples() {
        let ind = NonsmoothTerm::indicator(ConvexSet::cube(1, -1.0, 1.0));
        assert_eq!(prox_apply(&ind, 0.5, &v(&[2.0])).unwrap(), v(&[1.0]));
        assert_eq!(prox_apply(&ind, 0.5, &v(&[0.2])).unwrap(), v(&[0.2]));
        let l1 = NonsmoothTerm::L1 { weight: 1.0 };
        assert_eq!(prox_apply(&l1, 1.0, &v(&[2.5])).unwrap(), v(&[1.5]));
        assert_eq!(prox_apply(&l1, 1.0, &v(&[-0.5])).unwrap(), v(&[0.0]));
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let l1 = NonsmoothTerm::L1 { weight: 1.0 };
        assert!(matches!(prox_apply(&l1, 0.0, &v(&[1.0])), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_prox_matches_quadratic_closed_form() {
        // r(y) = c ||y||^2 / 2  =>  prox(x) = x / (1 + alpha c)
        let c = 3.0;
        let term = NonsmoothTerm::Custom(Arc::new(GradientProx::new(move |y| y * c, c)));
        let y = prox_apply(&term, 0.5, &v(&[2.0, -1.0])).unwrap();
        assert!((y - v(&[2.0, -1.0]) / 2.5).norm() < 1e-9);
    }

    #[test]
    fn gradient_prox_reports_iteration_cap() {
        let mut p = GradientProx::new(|y| y.map(|t| 3.0 * t.tanh()), 3.0);
        p.max_iter = 2;
        let term = NonsmoothTerm::Custom(Arc::new(p));
        match prox_apply(&term, 1.0, &v(&[5.0])) {
            Err(Error::Numeric { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn every_variant_is_nonexpansive_on_random_pairs() {
        let terms = vec![
            NonsmoothTerm::indicator(ConvexSet::cube(3, -1.0, 1.0)),
            NonsmoothTerm::indicator(ConvexSet::Ball {
                center: vec![0.0; 3],
                radius: 0.7,
            }),
            NonsmoothTerm::L1 { weight: 0.8 },
            NonsmoothTerm::Custom(Arc::new(GradientProx::new(|y| y.map(|t| t.tanh()), 1.0))),
        ];
        let mut rng = stream(5, &[]);
        for term in &terms {
            for _ in 0..1000 {
                let x = Vector::from_fn(3, |_, _| uniform(-3.0, 3.0, &mut rng));
                let y = Vector::from_fn(3, |_, _| uniform(-3.0, 3.0, &mut rng));
                let a = uniform(0.05, 2.0, &mut rng);
                let d = (prox_apply(term, a, &x).unwrap() - prox_apply(term, a, &y).unwrap()).norm();
                assert!(d <= (&x - &y).norm() + 1e-9, "{term:?}");
            }
        }
    }

    #[test]
    fn indicator_prox_ignores_step() {
        let term = NonsmoothTerm::indicator(ConvexSet::Ball {
            center: vec![1.0, 1.0],
            radius: 0.5,
        });
        let x = v(&[3.0, -2.0]);
        let base = prox_apply(&term, 0.1, &x).unwrap();
        for a in [1.0, 10.0] {
            assert!((prox_apply(&term, a, &x).unwrap() - &base).amax() <= 1e-12);
        }
    }

    #[test]
    fn serde_round_trip_keeps_variant() {
        let term = NonsmoothTerm::L1 { weight: 0.25 };
        let s = serde_json::to_string(&term).unwrap();
        assert!(s.contains("\"kind\":\"l1\""));
        let back: NonsmoothTerm = serde_json::from_str(&s).unwrap();
        assert!(matches!(back, NonsmoothTerm::L1 { weight } if weight == 0.25));
    }
}
