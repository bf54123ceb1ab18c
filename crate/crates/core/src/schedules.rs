//! Steplength, regularization, smoothing and inexactness sequences.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `coefficient * (k + offset)^(-exponent)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSchedule {
    #[serde(default = "one")]
    pub coefficient: f64,
    pub offset: f64,
    pub exponent: f64,
}

fn one() -> f64 {
    1.0
}

impl PowerSchedule {
    pub fn new(offset: f64, exponent: f64) -> Self {
        PowerSchedule {
            coefficient: 1.0,
            offset,
            exponent,
        }
    }

    /// `c0 (k + 1)^(-exponent)`.
    pub fn scaled(c0: f64, exponent: f64) -> Self {
        PowerSchedule {
            coefficient: c0,
            offset: 1.0,
            exponent,
        }
    }

    pub fn value(&self, k: usize) -> f64 {
        self.coefficient * (k as f64 + self.offset).powf(-self.exponent)
    }
}

/// A per-player sequence: a power law, or an explicit table that repeats
/// its last value past the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sequence {
    Power(PowerSchedule),
    Table { values: Vec<f64> },
}

impl Sequence {
    pub fn value(&self, k: usize) -> f64 {
        match self {
            Sequence::Power(p) => p.value(k),
            Sequence::Table { values } => values.get(k).or(values.last()).copied().unwrap_or(0.0),
        }
    }

    fn power(&self) -> Option<&PowerSchedule> {
        match self {
            Sequence::Power(p) => Some(p),
            Sequence::Table { .. } => None,
        }
    }
}

impl From<PowerSchedule> for Sequence {
    fn from(p: PowerSchedule) -> Self {
        Sequence::Power(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSchedules {
    pub alpha: Vec<Sequence>,
    pub eta: Vec<Sequence>,
    #[serde(default)]
    pub mu: Option<PowerSchedule>,
    #[serde(default)]
    pub eps: Option<PowerSchedule>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub passed: bool,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
    /// Implied `tau` for the paired-exponent regime.
    pub tau: Option<f64>,
    /// Rate regime (1-4) of the hierarchical bound; `None` on a boundary.
    pub case: Option<u8>,
}

impl ScheduleReport {
    fn finish(mut self) -> Self {
        self.passed = self.violations.is_empty();
        self
    }
}

impl ParamSchedules {
    /// Shared exponents, per-player offsets.
    pub fn power(a: f64, b: f64, lambdas: &[f64], deltas: &[f64]) -> Result<Self> {
        if lambdas.len() != deltas.len() {
            return Err(Error::dim("alpha and eta offsets differ in length"));
        }
        if lambdas.iter().chain(deltas).any(|o| !(*o > 0.0)) {
            return Err(Error::config("schedule offsets must be positive"));
        }
        Ok(ParamSchedules {
            alpha: lambdas.iter().map(|&l| PowerSchedule::new(l, a).into()).collect(),
            eta: deltas.iter().map(|&d| PowerSchedule::new(d, b).into()).collect(),
            mu: None,
            eps: None,
        })
    }

    pub fn with_smoothing(mut self, mu0: f64, d: f64, eps0: f64, c: f64) -> Self {
        self.mu = Some(PowerSchedule::scaled(mu0, d));
        self.eps = Some(PowerSchedule::scaled(eps0, c));
        self
    }

    pub fn n_players(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, i: usize, k: usize) -> f64 {
        self.alpha[i].value(k)
    }

    pub fn eta(&self, i: usize, k: usize) -> f64 {
        self.eta[i].value(k)
    }

    pub fn alpha_max(&self, k: usize) -> f64 {
        self.alpha.iter().map(|s| s.value(k)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn alpha_min(&self, k: usize) -> f64 {
        self.alpha.iter().map(|s| s.value(k)).fold(f64::INFINITY, f64::min)
    }

    pub fn eta_max(&self, k: usize) -> f64 {
        self.eta.iter().map(|s| s.value(k)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn eta_min(&self, k: usize) -> f64 {
        self.eta.iter().map(|s| s.value(k)).fold(f64::INFINITY, f64::min)
    }

    pub fn mu(&self, k: usize) -> Option<f64> {
        self.mu.map(|m| m.value(k))
    }

    pub fn eps(&self, k: usize) -> Option<f64> {
        self.eps.map(|e| e.value(k))
    }

    /// `(a, b)` if every player uses a power law with the same exponents,
    /// `Ok(None)` when some sequence is tabulated.
    pub fn shared_exponents(&self) -> Result<Option<(f64, f64)>> {
        if self.alpha.is_empty() || self.alpha.len() != self.eta.len() {
            return Err(Error::config("need one alpha and one eta sequence per player"));
        }
        let (Some(al), Some(et)) = (
            self.alpha.iter().map(Sequence::power).collect::<Option<Vec<_>>>(),
            self.eta.iter().map(Sequence::power).collect::<Option<Vec<_>>>(),
        ) else {
            return Ok(None);
        };
        let a = al[0].exponent;
        let b = et[0].exponent;
        if al.iter().any(|p| p.exponent != a) || et.iter().any(|p| p.exponent != b) {
            return Err(Error::Unsupported(
                "players use different exponents; only shared exponents can be certified".into(),
            ));
        }
        Ok(Some((a, b)))
    }

    /// Exponent conditions `1/2 < a < 1`, `a > b > 0`, `a + b < 1`.
    pub fn validate_basic(&self) -> Result<ScheduleReport> {
        let Some((a, b)) = self.shared_exponents()? else {
            return Ok(self.validate_empirical(100_000));
        };
        let mut r = ScheduleReport::default();
        if !(a > 0.5) {
            r.violations.push(format!("a = {a} must exceed 1/2"));
        }
        if !(a < 1.0) {
            r.violations.push(format!("a = {a} must be below 1"));
        }
        if !(a > b) {
            r.violations.push(format!("a = {a} must exceed b = {b}"));
        }
        if !(b > 0.0) {
            r.violations.push(format!("b = {b} must be positive"));
        }
        if !(a + b < 1.0) {
            r.violations.push(format!("a + b = {} must be below 1", a + b));
        }
        Ok(r.finish())
    }

    /// Paired regime `a = 1/2 + tau`, `b = 1/2 - 2 tau`, `0 < tau < 1/4`.
    pub fn validate_corollary1(&self) -> ScheduleReport {
        let mut r = ScheduleReport::default();
        let (a, b) = match self.shared_exponents() {
            Ok(Some(ab)) => ab,
            Ok(None) => {
                r.violations.push("tabulated sequences have no exponents".into());
                return r.finish();
            }
            Err(e) => {
                r.violations.push(e.to_string());
                return r.finish();
            }
        };
        let tau = a - 0.5;
        let tau_b = (0.5 - b) / 2.0;
        r.tau = Some(tau);
        if (tau - tau_b).abs() > 1e-12 {
            r.violations.push(format!("a implies tau = {tau} but b implies tau = {tau_b}"));
        }
        if !(tau > 0.0 && tau < 0.25) {
            r.violations.push(format!("tau = {tau} outside (0, 1/4)"));
        }
        r.finish()
    }

    /// `c > a + 2d`, `d > 0`; reports the rate regime.
    pub fn validate_hierarchical(&self) -> ScheduleReport {
        let mut r = ScheduleReport::default();
        let (Some(mu), Some(eps)) = (self.mu, self.eps) else {
            r.violations.push("smoothing and inexactness schedules are required".into());
            return r.finish();
        };
        let a = match self.shared_exponents() {
            Ok(Some((a, _))) => a,
            Ok(None) => {
                r.violations.push("tabulated steplengths have no exponent".into());
                return r.finish();
            }
            Err(e) => {
                r.violations.push(e.to_string());
                return r.finish();
            }
        };
        let (c, d) = (eps.exponent, mu.exponent);
        if !(d > 0.0) {
            r.violations.push(format!("d = {d} must be positive"));
        }
        if !(c > a + 2.0 * d) {
            r.violations.push(format!("c = {c} must exceed a + 2d = {}", a + 2.0 * d));
        }
        let s1 = (1.0 - (a + d)).partial_cmp(&0.0);
        let s2 = (1.0 + 2.0 * d - c).partial_cmp(&0.0);
        r.case = match (s1, s2) {
            (Some(Ordering::Less), Some(Ordering::Less)) => Some(1),
            (Some(Ordering::Greater), Some(Ordering::Less)) => Some(2),
            (Some(Ordering::Less), Some(Ordering::Greater)) => Some(3),
            (Some(Ordering::Greater), Some(Ordering::Greater)) => Some(4),
            _ => None,
        };
        if r.case.is_none() {
            r.warnings.push("exponents sit on a regime boundary".into());
        }
        r.finish()
    }

    /// Partial sum over `k < horizon` of the regularization-drift series
    /// `(1 + 1/(alpha_min eta_min)) ((eta_max(k-1) - eta_min(k)) / eta_min(k))^2`.
    pub fn drift_series(&self, horizon: usize) -> f64 {
        (1..horizon)
            .map(|k| {
                let am = self.alpha_min(k);
                let en = self.eta_min(k);
                (1.0 + 1.0 / (am * en)) * ((self.eta_max(k - 1) - en) / en).powi(2)
            })
            .sum()
    }

    /// Finite-horizon checks for sequences outside the power-law family.
    /// Asymptotic conditions cannot be certified this way.
    pub fn validate_empirical(&self, horizon: usize) -> ScheduleReport {
        let horizon = horizon.max(200);
        let mut r = ScheduleReport::default();
        r.warnings.push(format!(
            "finite-horizon check over {horizon} steps; asymptotic conditions are not certified"
        ));
        log::warn!("schedules are not power laws; validating empirically over {horizon} steps");
        for (name, seqs) in [("alpha", &self.alpha), ("eta", &self.eta)] {
            for (i, s) in seqs.iter().enumerate() {
                if let Some(k) = (0..horizon).find(|&k| !(s.value(k) > 0.0)) {
                    r.violations.push(format!("{name}[{i}] is not positive at k = {k}"));
                } else if let Some(k) = (0..horizon - 1).find(|&k| s.value(k + 1) > s.value(k)) {
                    r.violations.push(format!("{name}[{i}] increases at k = {k}"));
                }
            }
        }
        if !r.violations.is_empty() {
            return r.finish();
        }
        let ratio = |k: usize| self.alpha_max(k).powi(2) / (self.alpha_min(k) * self.eta_min(k));
        let spread = |k: usize| (self.alpha_max(k) - self.alpha_min(k)) / (self.alpha_min(k) * self.eta_min(k));
        let early = horizon / 100;
        let late = horizon - 1;
        if ratio(late) >= ratio(early) {
            r.violations.push("alpha_max^2 / (alpha_min eta_min) is not decreasing".into());
        }
        if spread(late) > spread(early).max(1e-12) {
            r.violations.push("steplength spread relative to alpha_min eta_min is not decreasing".into());
        }
        // divergence proxy: the second half of the horizon still adds mass
        let half: f64 = (horizon / 2..horizon).map(|k| self.alpha_min(k) * self.eta_min(k)).sum();
        let total: f64 = (0..horizon).map(|k| self.alpha_min(k) * self.eta_min(k)).sum();
        if half < 0.05 * total {
            r.warnings.push("sum of alpha_min eta_min appears to converge".into());
        }
        for (i, s) in self.alpha.iter().enumerate() {
            let tail: f64 = (horizon / 2..horizon).map(|k| s.value(k).powi(2)).sum();
            let all: f64 = (0..horizon).map(|k| s.value(k).powi(2)).sum();
            if tail > 0.5 * all {
                r.warnings.push(format!("sum of alpha[{i}]^2 appears to diverge"));
            }
        }
        if !self.drift_series(horizon).is_finite() {
            r.violations.push("regularization drift series is not finite".into());
        }
        r.finish()
    }
}
