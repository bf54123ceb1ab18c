//! Closed convex strategy sets with Euclidean projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::doc::row_major;
use crate::{Error, Matrix, Result, Vector};

/// Membership tolerance used by the invariant checks.
pub const SET_TOL: f64 = 1e-10;
/// Iteration cap for the polyhedral projection.
pub const POLY_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexSet {
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Polyhedron(Polyhedron),
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
}

/// `{x : A x <= b, E x = d}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polyhedron {
    #[serde(with = "row_major")]
    pub ineq: Matrix,
    pub ineq_rhs: Vec<f64>,
    #[serde(with = "row_major")]
    pub eq: Matrix,
    pub eq_rhs: Vec<f64>,
    /// Optional explicit bounding box, used for sampling when bound
    /// propagation cannot close the set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl ConvexSet {
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        ConvexSet::Box {
            lower: vec![lo; dim],
            upper: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Polyhedron(p) => p.dim(),
            ConvexSet::Ball { center, .. } => center.len(),
        }
    }

    /// Structural checks: matching dimensions, nonempty box, positive radius.
    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexSet::Box { lower, upper } => {
                if lower.len() != upper.len() {
                    return Err(Error::dim("box bounds have different lengths"));
                }
                if let Some(j) = (0..lower.len()).find(|&j| !(lower[j] <= upper[j])) {
                    return Err(Error::config(format!("empty box in coordinate {j}")));
                }
                Ok(())
            }
            ConvexSet::Polyhedron(p) => p.validate(),
            ConvexSet::Ball { radius, .. } => {
                if *radius > 0.0 {
                    Ok(())
                } else {
                    Err(Error::config("ball radius must be positive"))
                }
            }
        }
    }

    pub fn project(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.dim() {
            return Err(Error::dim(format!(
                "projecting a {}-vector onto a {}-dimensional set",
                x.len(),
                self.dim()
            )));
        }
        Ok(match self {
            ConvexSet::Box { lower, upper } => {
                Vector::from_fn(x.len(), |j, _| x[j].max(lower[j]).min(upper[j]))
            }
            ConvexSet::Ball { center, radius } => {
                let c = Vector::from_column_slice(center);
                let d = x - &c;
                let n = d.norm();
                if n <= *radius {
                    x.clone()
                } else {
                    c + d * (*radius / n)
                }
            }
            ConvexSet::Polyhedron(p) => p.project(x)?,
        })
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        match self {
            ConvexSet::Box { lower, upper } => {
                (0..x.len()).all(|j| x[j] >= lower[j] - tol && x[j] <= upper[j] + tol)
            }
            ConvexSet::Ball { center, radius } => {
                (x - Vector::from_column_slice(center)).norm() <= radius + tol
            }
            ConvexSet::Polyhedron(p) => p.max_violation(x) <= tol,
        }
    }

    /// Axis-aligned box containing the set, if one can be established.
    pub fn bounding_box(&self) -> Option<(Vector, Vector)> {
        match self {
            ConvexSet::Box { lower, upper } => {
                let lo = Vector::from_column_slice(lower);
                let hi = Vector::from_column_slice(upper);
                (lo.iter().chain(hi.iter()).all(|v| v.is_finite())).then_some((lo, hi))
            }
            ConvexSet::Ball { center, radius } => {
                let c = Vector::from_column_slice(center);
                Some((c.add_scalar(-radius), c.add_scalar(*radius)))
            }
            ConvexSet::Polyhedron(p) => p.bounding_box(),
        }
    }

    /// Upper bound on the diameter (diagonal of the bounding box).
    pub fn diameter(&self) -> Option<f64> {
        match self {
            ConvexSet::Ball { radius, .. } => Some(2.0 * radius),
            _ => self.bounding_box().map(|(lo, hi)| (hi - lo).norm()),
        }
    }

    /// `max ||x||` over the set, bounded via the bounding box corners.
    pub fn norm_bound(&self) -> Option<f64> {
        match self {
            ConvexSet::Ball { center, radius } => {
                Some(Vector::from_column_slice(center).norm() + radius)
            }
            _ => self.bounding_box().map(|(lo, hi)| {
                lo.iter()
                    .zip(hi.iter())
                    .map(|(a, b)| a.abs().max(b.abs()).powi(2))
                    .sum::<f64>()
                    .sqrt()
            }),
        }
    }

    /// Feasible sample: rejection inside the bounding box, then projection.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vector> {
        let (lo, hi) = self.bounding_box().ok_or_else(|| {
            Error::config("cannot sample an unbounded set without an explicit sampler")
        })?;
        let mut last = lo.clone();
        for _ in 0..100 {
            last = Vector::from_fn(lo.len(), |j, _| lo[j] + (hi[j] - lo[j]) * rng.random::<f64>());
            if self.contains(&last, 0.0) {
                return Ok(last);
            }
        }
        self.project(&last)
    }
}

impl Polyhedron {
    pub fn new(ineq: Matrix, ineq_rhs: Vec<f64>, eq: Matrix, eq_rhs: Vec<f64>) -> Result<Self> {
        let p = Polyhedron {
            ineq,
            ineq_rhs,
            eq,
            eq_rhs,
            bounds: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.ineq.ncols().max(self.eq.ncols())
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if (self.ineq.nrows() > 0 && self.ineq.ncols() != n)
            || (self.eq.nrows() > 0 && self.eq.ncols() != n)
        {
            return Err(Error::dim("polyhedron constraint matrices disagree on dimension"));
        }
        if self.ineq.nrows() != self.ineq_rhs.len() || self.eq.nrows() != self.eq_rhs.len() {
            return Err(Error::dim("polyhedron right-hand sides do not match row counts"));
        }
        Ok(())
    }

    fn n_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    fn n_cons(&self) -> usize {
        self.ineq_rhs.len() + self.eq_rhs.len()
    }

    fn normal(&self, c: usize) -> Vector {
        if c < self.n_ineq() {
            self.ineq.row(c).transpose()
        } else {
            self.eq.row(c - self.n_ineq()).transpose()
        }
    }

    fn rhs(&self, c: usize) -> f64 {
        if c < self.n_ineq() {
            self.ineq_rhs[c]
        } else {
            self.eq_rhs[c - self.n_ineq()]
        }
    }

    fn violation(&self, c: usize, x: &Vector) -> f64 {
        let r = self.normal(c).dot(x) - self.rhs(c);
        if c < self.n_ineq() {
            r.max(0.0)
        } else {
            r.abs()
        }
    }

    pub fn max_violation(&self, x: &Vector) -> f64 {
        (0..self.n_cons())
            .map(|c| self.violation(c, x))
            .fold(0.0, f64::max)
    }

    /// Euclidean projection by a dual active-set method (Goldfarb-Idnani with
    /// identity Hessian). Starts from the unconstrained minimizer `y = x` and
    /// adds the most violated constraint until primal feasibility; every
    /// intermediate point is optimal for the constraints in the working set.
    pub fn project(&self, x: &Vector) -> Result<Vector> {
        let n = x.len();
        let tol = SET_TOL * 1e-2 * (1.0 + x.amax());
        let norms: Vec<f64> = (0..self.n_cons()).map(|c| self.normal(c).norm()).collect();

        let mut y = x.clone();
        // working set: (constraint id, signed normal, signed rhs, multiplier)
        let mut work: Vec<(usize, Vector, f64, f64)> = Vec::new();
        let mut iters = 0usize;

        loop {
            let mut pick: Option<(usize, f64)> = None;
            for c in 0..self.n_cons() {
                if norms[c] == 0.0 || work.iter().any(|w| w.0 == c) {
                    continue;
                }
                let v = self.violation(c, &y) / norms[c];
                if v > tol && pick.is_none_or(|(_, best)| v > best) {
                    pick = Some((c, v));
                }
            }
            let Some((p, _)) = pick else { break };

            let mut a_p = self.normal(p);
            let mut b_p = self.rhs(p);
            if p >= self.n_ineq() && a_p.dot(&y) < b_p {
                a_p = -a_p;
                b_p = -b_p;
            }
            let mut u_p = 0.0;

            loop {
                iters += 1;
                if iters > POLY_MAX_ITER {
                    return Err(Error::Numeric {
                        message: "polyhedral projection hit its iteration cap".into(),
                        residual: self.max_violation(&y),
                    });
                }
                let k = work.len();
                let (r, z) = if k == 0 {
                    (Vector::zeros(0), a_p.clone())
                } else {
                    let nmat = Matrix::from_fn(n, k, |i, j| work[j].1[i]);
                    let gram = nmat.transpose() * &nmat;
                    let rhs = nmat.transpose() * &a_p;
                    let r = match gram.clone().cholesky() {
                        Some(ch) => ch.solve(&rhs),
                        None => gram.lu().solve(&rhs).ok_or_else(|| Error::Numeric {
                            message: "singular working set in polyhedral projection".into(),
                            residual: self.max_violation(&y),
                        })?,
                    };
                    let z = &a_p - &nmat * &r;
                    (r, z)
                };

                let viol = a_p.dot(&y) - b_p;
                let zz = z.norm_squared();
                let t2 = if zz > 1e-14 * a_p.norm_squared() {
                    viol / zz
                } else {
                    f64::INFINITY
                };
                let mut t1 = f64::INFINITY;
                let mut block = None;
                for (j, w) in work.iter().enumerate() {
                    if w.0 < self.n_ineq() && r[j] > 1e-14 {
                        let t = w.3 / r[j];
                        if t < t1 {
                            t1 = t;
                            block = Some(j);
                        }
                    }
                }
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(Error::Numeric {
                        message: "polyhedron appears to be empty".into(),
                        residual: viol,
                    });
                }
                if t2.is_finite() {
                    y -= &z * t;
                }
                for (j, w) in work.iter_mut().enumerate() {
                    w.3 -= t * r[j];
                }
                u_p += t;
                if t2 <= t1 {
                    work.push((p, a_p, b_p, u_p));
                    break;
                }
                work.remove(block.expect("finite t1 has a blocking constraint"));
            }
        }
        Ok(y)
    }

    /// Bounding box from explicit bounds or interval constraint propagation.
    pub fn bounding_box(&self) -> Option<(Vector, Vector)> {
        if let Some((lo, hi)) = &self.bounds {
            return Some((Vector::from_column_slice(lo), Vector::from_column_slice(hi)));
        }
        let n = self.dim();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        let mut rows: Vec<(Vector, f64)> = (0..self.n_ineq())
            .map(|c| (self.normal(c), self.rhs(c)))
            .collect();
        for c in self.n_ineq()..self.n_cons() {
            rows.push((self.normal(c), self.rhs(c)));
            rows.push((-self.normal(c), -self.rhs(c)));
        }
        for _ in 0..50 {
            let mut changed = false;
            for (a, b) in &rows {
                for j in 0..n {
                    if a[j] == 0.0 {
                        continue;
                    }
                    let mut rest = 0.0;
                    for k in (0..n).filter(|&k| k != j && a[k] != 0.0) {
                        rest += (a[k] * lo[k]).min(a[k] * hi[k]);
                    }
                    if !rest.is_finite() {
                        continue;
                    }
                    let bound = (b - rest) / a[j];
                    if a[j] > 0.0 && bound < hi[j] - 1e-12 {
                        hi[j] = bound;
                        changed = true;
                    } else if a[j] < 0.0 && bound > lo[j] + 1e-12 {
                        lo[j] = bound;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        lo.iter()
            .chain(hi.iter())
            .all(|v| v.is_finite())
            .then(|| (Vector::from_vec(lo), Vector::from_vec(hi)))
    }
}
