//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and returns a JSON string so the page
//! needs no bundler or generated type definitions.

use aggnash::cournot::{CournotInstance, CournotSpec};
use aggnash::game::{AffinePlayer, ConvexSet, GameSpec, NoiseModel, NonsmoothTerm, PlayerSpec};
use aggnash::metrics::Metric;
use aggnash::network::{complete, GraphSchedule};
use aggnash::rng::{stream, uniform};
use aggnash::schedules::ParamSchedules;
use aggnash::solver::{run_algorithm1, RunConfig};
use aggnash::{Matrix, Result, Vector};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_HORIZON: usize = 200_000;

#[derive(Serialize)]
struct Curve {
    ks: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct CournotResult {
    firms: usize,
    markets: usize,
    residual: Curve,
    consensus: Curve,
    max_drift: f64,
    supplies: Vec<f64>,
}

fn offsets(n: usize, seed: u64, lo: f64, hi: f64, key: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[key]);
    (0..n).map(|_| uniform(lo, hi, &mut rng)).collect()
}

fn horizon_ok(horizon: usize) -> Result<()> {
    if horizon == 0 || horizon > MAX_HORIZON {
        return Err(aggnash::Error::Config(format!("horizon must be in 1..={MAX_HORIZON}")));
    }
    Ok(())
}

fn column(trace: &aggnash::solver::RunTrace, name: &str) -> Curve {
    Curve {
        ks: trace.ks.clone(),
        values: trace.column(name).map(<[f64]>::to_vec).unwrap_or_default(),
    }
}

pub fn cournot_json(firms: usize, markets: usize, p: f64, a: f64, b: f64, horizon: usize, seed: u64) -> Result<String> {
    horizon_ok(horizon)?;
    let spec = CournotSpec {
        firms,
        markets,
        markets_per_firm: markets.min(2),
        ..CournotSpec::default()
    };
    let inst = CournotInstance::generate(&spec, seed)?;
    let game = inst.to_game()?;
    let graph = GraphSchedule::erdos_renyi(firms, p, seed, None)?;
    let params = ParamSchedules::power(a, b, &offsets(firms, seed, 4.0, 5.0, 1), &offsets(firms, seed, 2.0, 3.0, 2))?;
    let cfg = RunConfig {
        horizon,
        record_every: (horizon / 60).max(1),
        metrics: vec![Metric::RelResidual, Metric::ConsensusError],
        seed,
        ..Default::default()
    };
    let trace = run_algorithm1(&game, &graph, &params, &cfg)?;
    let x = Vector::from_column_slice(&trace.x_final);
    let supplies = game.split(&x)?.iter().map(|xi| xi.rows(0, xi.len() / 2).sum()).collect();
    Ok(serde_json::to_string(&CournotResult {
        firms,
        markets,
        residual: column(&trace, "rel_residual"),
        consensus: column(&trace, "consensus_error"),
        max_drift: trace.max_drift,
        supplies,
    })?)
}

#[derive(Serialize)]
struct SelectionResult {
    regularized: Curve,
    plain: Curve,
    final_regularized: Vec<f64>,
    final_plain: Vec<f64>,
}

/// Two players on `[-1, 1]` whose equilibria form the diagonal `x_1 = x_2`.
fn diagonal_game(noise: f64) -> Result<GameSpec> {
    let player = || -> Result<PlayerSpec> {
        let p = AffinePlayer::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 2.0),
            Matrix::from_element(1, 1, -1.0),
            Vector::zeros(1),
        )?
        .with_noise(NoiseModel::isotropic_gaussian(1, noise))?;
        Ok(PlayerSpec::new(p, NonsmoothTerm::indicator(ConvexSet::cube(1, -1.0, 1.0))))
    };
    GameSpec::new(vec![player()?, player()?])
}

pub fn selection_json(x1: f64, x2: f64, noise: f64, horizon: usize, seed: u64) -> Result<String> {
    horizon_ok(horizon)?;
    let game = diagonal_game(noise)?;
    let graph = GraphSchedule::fixed(complete(2))?;
    let params = ParamSchedules::power(0.75, 0.2, &[4.0, 4.5], &[2.0, 2.5])?;
    let cfg = RunConfig {
        horizon,
        record_every: (horizon / 60).max(1),
        metrics: vec![Metric::Norm],
        seed,
        noise_free: noise == 0.0,
        x0: Some(vec![x1.clamp(-1.0, 1.0), x2.clamp(-1.0, 1.0)]),
        ..Default::default()
    };
    let reg = run_algorithm1(&game, &graph, &params, &cfg)?;
    let plain = run_algorithm1(&game, &graph, &params, &RunConfig { unregularized: true, ..cfg })?;
    Ok(serde_json::to_string(&SelectionResult {
        regularized: column(&reg, "norm"),
        plain: column(&plain, "norm"),
        final_regularized: reg.x_final,
        final_plain: plain.x_final,
    })?)
}

#[derive(Serialize)]
struct MixingResult {
    lags: Vec<usize>,
    deviation: Vec<f64>,
    bound: Vec<f64>,
    violations: usize,
    fitted_rate: Option<f64>,
}

pub fn mixing_json(n: usize, p: f64, reweave: usize, lags: usize, seed: u64) -> Result<String> {
    let graph = GraphSchedule::erdos_renyi(n, p, seed, (reweave > 0).then_some(reweave))?;
    let rep = graph.mixing_diagnostics(lags.min(2000))?;
    let lags: Vec<usize> = (0..rep.empirical_max_dev.len()).collect();
    Ok(serde_json::to_string(&MixingResult {
        bound: lags.iter().map(|&l| rep.bound(l)).collect(),
        deviation: rep.empirical_max_dev.clone(),
        lags,
        violations: rep.bound_violations,
        fitted_rate: rep.fitted_rate,
    })?)
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Simulates a random networked Cournot market.
#[wasm_bindgen]
pub fn run_cournot(firms: usize, markets: usize, p: f64, a: f64, b: f64, horizon: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(cournot_json(firms, markets, p, a, b, horizon, seed as u64))
}

/// Regularized and plain runs on a game with a segment of equilibria.
#[wasm_bindgen]
pub fn run_selection(x1: f64, x2: f64, noise: f64, horizon: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(selection_json(x1, x2, noise, horizon, seed as u64))
}

/// Deviation of weight-matrix products from uniform averaging against the
/// geometric bound.
#[wasm_bindgen]
pub fn mixing_profile(n: usize, p: f64, reweave: usize, lags: usize, seed: u32) -> std::result::Result<String, JsError> {
    js(mixing_json(n, p, reweave, lags, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn cournot_output_has_both_curves() {
        let v: Value = serde_json::from_str(&cournot_json(4, 3, 0.6, 0.6, 0.3, 500, 1).unwrap()).unwrap();
        assert_eq!(v["residual"]["ks"].as_array().unwrap().len(), v["residual"]["values"].as_array().unwrap().len());
        assert_eq!(v["supplies"].as_array().unwrap().len(), 4);
        assert!(v["max_drift"].as_f64().unwrap() < 1e-9);
    }

    #[test]
    fn regularized_arm_ends_closer_to_origin() {
        let v: Value = serde_json::from_str(&selection_json(0.8, 0.4, 0.0, 20_000, 2).unwrap()).unwrap();
        let last = |arm: &str| *v[arm]["values"].as_array().unwrap().last().unwrap().as_f64().as_ref().unwrap();
        assert!(last("regularized") < 0.1 * last("plain"));
    }

    #[test]
    fn mixing_profile_respects_its_bound() {
        let v: Value = serde_json::from_str(&mixing_json(6, 0.5, 3, 100, 5).unwrap()).unwrap();
        assert_eq!(v["violations"], 0);
    }

    #[test]
    fn oversized_horizons_are_refused() {
        assert!(selection_json(0.0, 0.0, 0.1, MAX_HORIZON + 1, 0).is_err());
    }
}
