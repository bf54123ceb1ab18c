use std::fs;

use aggnash::game::{AffinePlayer, ConvexSet, GameSpec, NoiseModel, NonsmoothTerm, PlayerSpec};
use aggnash::harness::{compare_regularization, run_experiment, ExperimentConfig};
use aggnash::metrics::{decade_checkpoints, is_nonincreasing};
use aggnash::{Matrix, Vector};

fn scalar_game(own: f64, cross: f64, noise: f64) -> GameSpec {
    let player = || {
        let p = AffinePlayer::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, own),
            Matrix::from_element(1, 1, cross),
            Vector::zeros(1),
        )
        .unwrap()
        .with_noise(NoiseModel::isotropic_gaussian(1, noise))
        .unwrap();
        PlayerSpec::new(p, NonsmoothTerm::indicator(ConvexSet::cube(1, -1.0, 1.0)))
    };
    GameSpec::new(vec![player(), player()]).unwrap()
}

fn file_config(dir: &std::path::Path, game: &GameSpec, horizon: usize) -> ExperimentConfig {
    fs::write(dir.join("game.json"), game.to_json().unwrap()).unwrap();
    let cfg = format!(
        r#"{{
            "game": {{ "file": "game.json" }},
            "graph": {{ "kind": "complete" }},
            "schedule": {{ "a": 0.75, "b": 0.2, "alpha_offset": [4.0, 4.5], "eta_offset": [2.0, 2.5] }},
            "horizon": {horizon},
            "replications": 4,
            "record_every": {},
            "metrics": ["norm", "residual"],
            "master_seed": 17
        }}"#,
        horizon / 10
    );
    fs::write(dir.join("exp.json"), cfg).unwrap();
    ExperimentConfig::load(&dir.join("exp.json")).unwrap()
}

#[test]
fn plain_scheme_converges_on_a_strongly_monotone_toy() {
    let dir = tempfile::tempdir().unwrap();
    // phi = [[2, 0.5], [0.5, 2]] x, unique equilibrium at the origin
    let cfg = file_config(dir.path(), &scalar_game(2.0, 0.5, 0.05), 20_000);
    let (summary, _, _) = compare_regularization(&cfg, None).unwrap();
    let (_, plain, _) = summary.table["residual"];
    assert!(plain < 1e-2, "plain residual {plain}");
    assert!(summary.unregularized.final_metrics["norm"] < 2e-2);
}

#[test]
fn plain_scheme_stalls_away_from_the_least_norm_point() {
    let dir = tempfile::tempdir().unwrap();
    // phi = [[1, -1], [-1, 1]] x; without regularization nothing pulls play
    // back along the equilibrium diagonal, so noise spreads it out
    let cfg = file_config(dir.path(), &scalar_game(2.0, -1.0, 0.05), 30_000);
    let out = dir.path().join("cmp");
    let (summary, reg, plain) = compare_regularization(&cfg, Some(&out)).unwrap();
    let (r, p, _) = summary.table["norm"];
    assert!(r < 0.1 * p, "regularized {r} vs plain {p}");
    let pk = plain.averaged.unwrap();
    let tail = pk.column("norm").unwrap();
    assert!(tail[tail.len() - 1] > 0.5 * tail[tail.len() / 2], "plain arm kept shrinking");
    assert!(reg.summary.completed == 4);
    assert!(out.join("comparison.csv").exists());
}

#[test]
fn smoothed_scheme_runs_on_the_hierarchical_preset() {
    let cfg = ExperimentConfig::from_toml_str(
        r#"
        horizon = 400
        replications = 2
        solver = "hierarchical"
        metrics = ["rel_residual", "consensus_error", "m"]
        [game]
        preset = "hierarchical-cournot"
        instance_seed = 2
        [schedule]
        mu0 = 0.5
        "#,
    )
    .unwrap();
    let out = run_experiment(&cfg, None).unwrap();
    assert_eq!(out.summary.completed, 2);
    let avg = out.averaged.unwrap();
    let m = avg.column("m").unwrap();
    assert!(m.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(m.last().unwrap() < &m[0]);
}

#[test]
fn network_preset_residual_and_consensus_fall_across_decades() {
    let cfg = ExperimentConfig::from_toml_str(
        r#"
        horizon = 10000
        replications = 3
        master_seed = 5
        record_every = 10000
        metrics = ["rel_residual", "consensus_error"]
        [game]
        preset = "network-cournot"
        "#,
    )
    .unwrap();
    let out = run_experiment(&cfg, None).unwrap();
    let avg = out.averaged.unwrap();
    for name in ["rel_residual", "consensus_error"] {
        let d: Vec<f64> = decade_checkpoints(&avg.ks, avg.column(name).unwrap())
            .into_iter()
            .filter(|(k, _)| *k >= 10)
            .map(|(_, v)| v)
            .collect();
        assert!(d.len() >= 3 && is_nonincreasing(&d, 0.0), "{name}: {d:?}");
    }
}
