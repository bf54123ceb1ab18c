//! Acceptance gate. Each test prints one `[PASS]` / `[FAIL]` line and then
//! asserts on the same condition.

use std::time::Instant;

use aggnash::cournot::{CournotInstance, CournotSpec, HierCournot};
use aggnash::game::{AffinePlayer, ConvexSet, GameSpec, NoiseModel, NonsmoothTerm, PlayerSpec};
use aggnash::harness::{resolve, run_experiment, ExperimentConfig};
use aggnash::metrics::{decade_checkpoints, gap, is_nonincreasing, linear_fit, loglog_fit, GapOptions, Metric};
use aggnash::network::{complete, erdos_renyi_adjacency, is_strongly_connected, metropolis_weights, GraphSchedule};
use aggnash::rng::stream;
use aggnash::schedules::ParamSchedules;
use aggnash::solver::{
    centralized_reference, grad_estimator, run_algorithm1, run_algorithm2, smoothed_ne_gap_bound_check, smoothed_value,
    solve_lower_vi, HierarchicalTerm, LowerVi, RunConfig, RunTrace,
};
use aggnash::{Matrix, Vector};
use rand::Rng;

fn report(id: u32, name: &str, pass: bool, started: Instant, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!(
        "acceptance {id:>2} [{tag}] {name}: {detail} ({:.1}s)",
        started.elapsed().as_secs_f64()
    );
    assert!(pass, "acceptance criterion {id} ({name}) failed: {detail}");
}

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn conserved(trace: &RunTrace, n: usize) -> bool {
    trace.max_drift <= 1e-9 * n as f64 * trace.drift_scale.max(1.0)
}

#[test]
fn criterion_01_aggregate_conservation() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::from_toml_str(
        r#"
        horizon = 10000
        replications = 1
        master_seed = 2024
        record_every = 1000
        metrics = ["drift", "consensus_error"]
        [game]
        preset = "network-cournot"
        "#,
    )
    .unwrap();
    let resolved = resolve(&cfg).unwrap();
    let n = resolved.game.n_players();
    let trace = resolved.run_replication(0).unwrap();
    let bound = 1e-9 * n as f64 * trace.drift_scale.max(1.0);
    report(
        1,
        "aggregate conservation",
        n == 20 && trace.max_drift <= bound,
        t0,
        format!("N={n}, K=1e4, max drift {:.2e} <= {bound:.2e}", trace.max_drift),
    );
}

/// Metropolis weights on `p` random graphs whose union is connected.
fn random_cycle(n: usize, p: usize, rng: &mut impl Rng) -> Vec<Matrix> {
    loop {
        let adjs: Vec<Vec<Vec<bool>>> = (0..p).map(|_| erdos_renyi_adjacency(n, 0.35, rng)).collect();
        let union: Vec<Vec<bool>> = (0..n)
            .map(|i| (0..n).map(|j| adjs.iter().any(|a| a[i][j])).collect())
            .collect();
        if is_strongly_connected(&union) {
            return adjs.iter().map(|a| metropolis_weights(a)).collect();
        }
    }
}

#[test]
fn criterion_02_mixing_bound() {
    let t0 = Instant::now();
    let mut rng = stream(7, &[2]);
    let mut violations = 0;
    let mut invalid = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=10);
        let p = rng.random_range(1..=3);
        let sched = GraphSchedule::cyclic(random_cycle(n, p, &mut rng)).unwrap();
        if !sched.validate_schedule(200).passed {
            invalid += 1;
            continue;
        }
        let rep = sched.mixing_diagnostics(200).unwrap();
        violations += rep.bound_violations;
        for (lag, d) in rep.empirical_max_dev.iter().enumerate() {
            worst_ratio = worst_ratio.max(d / rep.bound(lag));
        }
    }
    report(
        2,
        "mixing bound",
        violations == 0 && invalid == 0,
        t0,
        format!("50 schedules, {violations} violations, {invalid} invalid, worst deviation/bound {worst_ratio:.3}"),
    );
}

/// Two scalar players on `[-1, 1]` with `phi(x) = [[1, -1], [-1, 1]] x`:
/// every point with `x_1 = x_2` is an equilibrium.
fn degenerate_game(noise: f64) -> GameSpec {
    let player = || {
        let p = AffinePlayer::new(
            Matrix::from_element(1, 1, 1.0),
            Matrix::from_element(1, 1, 2.0),
            Matrix::from_element(1, 1, -1.0),
            Vector::zeros(1),
        )
        .unwrap()
        .with_noise(NoiseModel::isotropic_gaussian(1, noise))
        .unwrap();
        PlayerSpec::new(p, NonsmoothTerm::indicator(ConvexSet::cube(1, -1.0, 1.0)))
    };
    GameSpec::new(vec![player(), player()]).unwrap()
}

#[test]
fn criterion_03_least_norm_selection() {
    let t0 = Instant::now();
    let game = degenerate_game(0.1);
    let sched = GraphSchedule::fixed(complete(2)).unwrap();
    let params = ParamSchedules::power(0.75, 0.2, &[4.0, 4.5], &[2.0, 2.5]).unwrap();
    assert!(params.validate_basic().unwrap().passed);
    let paths = 20;
    let mut reg = 0.0;
    let mut base = 0.0;
    let mut all_conserved = true;
    for r in 0..paths {
        let cfg = RunConfig {
            horizon: 100_000,
            record_every: 100_000,
            metrics: vec![Metric::Norm],
            seed: 1000 + r,
            x0: Some(vec![0.8, 0.4]),
            ..Default::default()
        };
        let a = run_algorithm1(&game, &sched, &params, &cfg).unwrap();
        let b = run_algorithm1(&game, &sched, &params, &RunConfig { unregularized: true, ..cfg }).unwrap();
        all_conserved &= conserved(&a, 2) && conserved(&b, 2);
        reg += v(&a.x_final).norm() / paths as f64;
        base += v(&b.x_final).norm() / paths as f64;
    }
    report(
        3,
        "least-norm selection",
        reg <= 1e-2 && base >= 5.0 * reg && all_conserved,
        t0,
        format!("mean ||x_K|| {reg:.2e} regularized vs {base:.2e} without, ratio {:.1}", base / reg),
    );
}

#[test]
fn criterion_04_gap_decay_trend() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::from_toml_str(
        r#"
        horizon = 100000
        replications = 20
        master_seed = 4
        record_every = 100000
        checkpoints = [1000, 2000, 5000, 10000, 20000, 50000]
        metrics = ["gap", "drift"]
        [game]
        preset = "desk-small"
        [gap]
        starts = 8
        iters = 100
        "#,
    )
    .unwrap();
    let out = run_experiment(&cfg, None).unwrap();
    let n = 5;
    let all_conserved = out.traces.iter().flatten().all(|t| conserved(t, n));
    let avg = out.averaged.unwrap();
    let g = avg.column("gap").unwrap();
    let window: Vec<(usize, f64)> = avg.ks.iter().zip(g).filter(|(k, _)| **k <= 100_000).map(|(k, v)| (*k, *v)).collect();
    let (ks, vals): (Vec<usize>, Vec<f64>) = window.into_iter().unzip();
    let fit = loglog_fit(&ks, &vals, 1000).unwrap();
    let decades: Vec<f64> = decade_checkpoints(&avg.ks, g).into_iter().map(|(_, v)| v).collect();
    let monotone = is_nonincreasing(&decades, 0.0);
    report(
        4,
        "gap decay trend",
        fit.slope <= -0.1 && monotone && all_conserved && out.summary.completed == 20,
        t0,
        format!(
            "slope {:.3} over [1e3, 1e5], decades {:?}",
            fit.slope,
            decades.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_05_lower_solver_geometric_rate() {
    let t0 = Instant::now();
    let h = Matrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, -0.5, 1.5, 0.3, 0.0, -0.3, 1.0]);
    let b = v(&[0.4, -0.2, 0.7]);
    let (hm, bm) = (h.clone(), b.clone());
    let set = ConvexSet::cube(3, -1.0, 1.0);
    let vi = LowerVi::deterministic(set.clone(), move |_, y| &hm * y - &bm, 1.0, 2.2)
        .with_steps(0.2, 0.85)
        .with_gaussian_noise(0.5)
        .unwrap();
    vi.validate().unwrap();
    let q = vi.contraction();
    let rate = vi.rate();
    // noise-free solution by long projected iteration
    let exact = LowerVi::deterministic(set, move |_, y| &h * y - &b, 1.0, 2.2);
    let x = Vector::zeros(1);
    let y_star = exact.run(&x, 5000, &mut stream(0, &[]), false).unwrap().y;

    let iters = 60;
    let reps = 10;
    let mut mse = vec![0.0; iters + 1];
    for r in 0..reps {
        let run = vi.run(&x, iters, &mut stream(55, &[r]), true).unwrap();
        for (j, y) in run.path.unwrap().iter().enumerate() {
            mse[j] += (y - &y_star).norm_squared() / reps as f64;
        }
    }
    let js: Vec<f64> = (10..=iters).map(|j| j as f64).collect();
    let lm: Vec<f64> = (10..=iters).map(|j| mse[j].ln()).collect();
    let slope = linear_fit(&js, &lm).unwrap().slope;
    let rel = (slope - rate.ln()).abs() / rate.ln().abs();

    let eps = [1e-2, 1e-3, 1e-4, 1e-5];
    let samples: Vec<f64> = eps
        .iter()
        .map(|&e| solve_lower_vi(&vi, &x, e, &mut stream(56, &[])).unwrap().samples as f64)
        .collect();
    let inv: Vec<f64> = eps.iter().map(|e| 1.0 / e).collect();
    let r2 = linear_fit(&inv, &samples).unwrap().r2;
    report(
        5,
        "lower solver geometric rate",
        rel <= 0.2 && r2 >= 0.95,
        t0,
        format!(
            "log-MSE slope {slope:.4} vs ln max(rho, q) {:.4} (q={q:.3}, off by {:.1}%), samples ~ 1/eps R^2 {r2:.4}",
            rate.ln(),
            100.0 * rel
        ),
    );
}

#[test]
fn criterion_06_smoothing_sandwich_and_moments() {
    let t0 = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for (idx, mu) in [0.4, 0.1].into_iter().enumerate() {
        let term = HierarchicalTerm::upper_only(1, |x: &Vector| x[0].abs(), 1.0, mu);
        let mut rng = stream(6, &[idx as u64]);
        let (m0, se0) = smoothed_value(&term, &Vector::zeros(1), mu, 100_000, &mut rng).unwrap();
        let centered = (m0 - mu / 2.0).abs() <= 3.0 * se0;
        let mut sandwich = true;
        for x in [-0.3, 0.05, 0.7] {
            let (m, se) = smoothed_value(&term, &v(&[x]), mu, 20_000, &mut rng).unwrap();
            let d = f64::abs(x);
            sandwich &= m >= d - 3.0 * se && m <= d + mu + 3.0 * se;
        }
        // exact followers: first moment <= m L0, second <= 3 m^2 L0^2
        let draws = 100_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..draws {
            let g = grad_estimator(&term, &v(&[0.02]), mu, 0.0, &mut rng).unwrap().norm();
            m1 += g / draws as f64;
            m2 += g * g / draws as f64;
        }
        ok &= centered && sandwich && m1 <= 1.0 && m2 <= 3.0;
        notes.push(format!("mu={mu}: d_mu(0)={m0:.5}±{se0:.5} (target {:.3}), E|g|={m1:.3}, E|g|^2={m2:.3}", mu / 2.0));
    }
    report(6, "smoothing sandwich and estimator moments", ok, t0, notes.join("; "));
}

#[test]
fn criterion_07_smoothed_equilibrium_proximity() {
    let t0 = Instant::now();
    // cost (x - 0.5)^2 / 2 + |x| on [-2, 2]; equilibrium at 0
    let p = AffinePlayer::new(
        Matrix::from_element(1, 1, 1.0),
        Matrix::from_element(1, 1, 1.0),
        Matrix::zeros(1, 1),
        v(&[-0.5]),
    )
    .unwrap();
    let game = GameSpec::new(vec![PlayerSpec::new(p, NonsmoothTerm::indicator(ConvexSet::cube(1, -2.0, 2.0)))]).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for mu in [0.1, 0.05, 0.025] {
        let term = HierarchicalTerm::upper_only(1, |x: &Vector| x[0].abs(), 1.0, mu);
        let rep = smoothed_ne_gap_bound_check(&game, &[term], mu, 1.0).unwrap();
        ok &= rep.passed;
        notes.push(format!("mu={mu}: {:.2e} <= {:.2e}", rep.distance, rep.bound));
    }
    report(7, "smoothed equilibrium proximity", ok, t0, notes.join("; "));
}

fn random_pd(rng: &mut impl Rng) -> Matrix {
    let a = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() / 3.0 + Matrix::identity(3, 3)
}

/// Exact minimizer of `y^T H y / 2 - t^T y` over `y >= l` by enumerating
/// active sets and checking the KKT conditions.
fn box_qp_exact(h: &Matrix, t: &Vector, l: &Vector) -> Vector {
    let n = t.len();
    for mask in 0..(1u32 << n) {
        let active: Vec<bool> = (0..n).map(|j| mask & (1 << j) != 0).collect();
        let free: Vec<usize> = (0..n).filter(|&j| !active[j]).collect();
        let mut y = l.clone();
        if !free.is_empty() {
            let hff = Matrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let mut rhs = Vector::from_fn(free.len(), |a, _| t[free[a]]);
            for (a, &fa) in free.iter().enumerate() {
                for j in (0..n).filter(|&j| active[j]) {
                    rhs[a] -= h[(fa, j)] * l[j];
                }
            }
            let yf = hff.lu().solve(&rhs).unwrap();
            for (a, &fa) in free.iter().enumerate() {
                y[fa] = yf[a];
            }
        }
        let grad = h * &y - t;
        let primal = (0..n).all(|j| y[j] >= l[j] - 1e-12);
        let dual = (0..n).filter(|&j| active[j]).all(|j| grad[j] >= -1e-12);
        if primal && dual {
            return y;
        }
    }
    unreachable!("strictly convex problem has a KKT point")
}

#[test]
fn criterion_08_follower_closed_form_matches_solver() {
    let t0 = Instant::now();
    let spec = CournotSpec {
        firms: 4,
        markets: 5,
        markets_per_firm: 3,
        ..CournotSpec::default()
    };
    let mut rng = stream(8, &[]);
    let mut agree = 0;
    let mut worst: f64 = 0.0;
    let mut solver_exact = 0;
    for draw in 0..100u64 {
        let base = CournotInstance::generate(&spec, draw).unwrap();
        let hier = HierCournot::generate(base, random_pd(&mut rng), draw).unwrap();
        let i = (draw % 4) as usize;
        let x = hier.base.strategy_set(i).unwrap().sample(&mut rng).unwrap();
        let closed = hier.lower_level_closed_form(i, &x);
        let solved = solve_lower_vi(&hier.lower_vi(i).unwrap(), &x, 1e-10, &mut rng).unwrap().y;
        let g = x.rows(0, 3).into_owned();
        let h = hier.inverse_hessian.clone().try_inverse().unwrap();
        let exact = box_qp_exact(&h, &(&g * hier.target_slope[i]), &(&g * hier.lower_slope[i]));
        if (&solved - &exact).amax() <= 1e-6 {
            solver_exact += 1;
        }
        let err = (&closed - &solved).amax();
        worst = worst.max(err);
        if err <= 1e-4 {
            agree += 1;
        }
    }
    report(
        8,
        "follower closed form vs solver",
        agree == 100,
        t0,
        format!("{agree}/100 draws within 1e-4, worst deviation {worst:.3e}; solver matches exact KKT point on {solver_exact}/100"),
    );
}

fn toy_player(own: f64, cross: f64, offset: f64) -> PlayerSpec {
    let p = AffinePlayer::new(
        Matrix::from_element(1, 1, 1.0),
        Matrix::from_element(1, 1, own),
        Matrix::from_element(1, 1, cross),
        v(&[offset]),
    )
    .unwrap()
    .with_noise(NoiseModel::isotropic_gaussian(1, 0.2))
    .unwrap();
    PlayerSpec::new(p, NonsmoothTerm::indicator(ConvexSet::cube(1, -1.0, 1.0)))
}

#[test]
fn criterion_09_reduction_consistency() {
    let t0 = Instant::now();
    let game = GameSpec::new(vec![toy_player(1.0, 0.5, -0.3), toy_player(1.5, 0.5, 0.2), toy_player(2.0, 0.5, 0.6)]).unwrap();
    let params = ParamSchedules::power(0.7, 0.2, &[4.0, 4.3, 4.8], &[2.0, 2.4, 2.9])
        .unwrap()
        .with_smoothing(0.5, 0.2, 0.0, 1.0);

    let ring = GraphSchedule::erdos_renyi(3, 0.5, 9, Some(5)).unwrap();
    let cfg = RunConfig {
        horizon: 2000,
        record_every: 10,
        metrics: vec![Metric::Residual, Metric::ConsensusError, Metric::Norm],
        seed: 99,
        ..Default::default()
    };
    let zeros: Vec<HierarchicalTerm> = (0..3).map(|_| HierarchicalTerm::zero(1)).collect();
    let a = run_algorithm1(&game, &ring, &params, &cfg).unwrap();
    let b = run_algorithm2(&game, &zeros, &ring, &params, &cfg).unwrap();
    let bits = |t: &RunTrace| -> Vec<u64> {
        t.columns
            .iter()
            .flat_map(|(_, c)| c.iter().map(|x| x.to_bits()))
            .chain(t.x_final.iter().map(|x| x.to_bits()))
            .chain(t.x_average.iter().map(|x| x.to_bits()))
            .collect()
    };
    let bitwise = a.ks == b.ks && bits(&a) == bits(&b);

    let horizon = 500;
    let x0 = vec![0.9, -0.4, 0.1];
    let cfg = RunConfig {
        horizon,
        record_every: 1,
        noise_free: true,
        keep_iterates: true,
        x0: Some(x0.clone()),
        metrics: vec![Metric::Residual],
        ..Default::default()
    };
    let dist = run_algorithm1(&game, &GraphSchedule::fixed(complete(3)).unwrap(), &params, &cfg).unwrap();
    let central = centralized_reference(&game, &params, &v(&x0), horizon, false).unwrap();
    let iterates = dist.iterates.unwrap();
    let worst = iterates
        .iter()
        .zip(&central)
        .map(|(d, c)| (v(d) - c).amax())
        .fold(0.0, f64::max);
    let matched = iterates.len() == horizon + 1 && worst <= 1e-10;
    report(
        9,
        "reduction consistency",
        bitwise && matched,
        t0,
        format!("zero-term trace bitwise equal: {bitwise}; centralized deviation {worst:.1e} over {horizon} steps"),
    );
}

/// Random strongly monotone affine game with scalar or planar players on
/// boxes, total dimension at most four.
fn random_affine_game(rng: &mut impl Rng) -> GameSpec {
    let dims: Vec<usize> = match rng.random_range(0..3) {
        0 => vec![1, 1],
        1 => vec![2, 1],
        _ => vec![2, 2],
    };
    let agg = 2;
    let players = dims
        .iter()
        .map(|&d| {
            let hmat = Matrix::from_fn(agg, d, |_, _| rng.random_range(-1.0..1.0));
            let cross = Matrix::from_fn(d, agg, |_, _| rng.random_range(-0.3..0.3));
            let g = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let skew = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            // diagonal shift absorbs the coupling so the joint map stays monotone
            let own = &g * g.transpose() + (&skew - skew.transpose()) + Matrix::identity(d, d) * 2.5;
            let offset = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let p = AffinePlayer::new(hmat, own, cross, offset).unwrap();
            PlayerSpec::new(p, NonsmoothTerm::indicator(ConvexSet::cube(d, -1.0, 1.0)))
        })
        .collect();
    GameSpec::new(players).unwrap()
}

/// Projected fixed-point iteration of the joint map.
fn solve_equilibrium(game: &GameSpec) -> Vector {
    let (j, c) = game.affine_map().unwrap();
    let sym = (&j + j.transpose()) * 0.5;
    let mu = sym.symmetric_eigenvalues().min();
    assert!(mu > 0.0, "instance not strongly monotone");
    let l = j.clone().singular_values().max();
    let step = mu / (l * l);
    let mut x = Vector::zeros(game.total_dim());
    for _ in 0..200_000 {
        let next = game.project(&(&x - (&j * &x + &c) * step)).unwrap();
        let done = (&next - &x).amax() < 1e-15;
        x = next;
        if done {
            break;
        }
    }
    x
}

#[test]
fn criterion_10_gap_oracle_correctness() {
    let t0 = Instant::now();
    let mut rng = stream(10, &[]);
    let mut agree = 0;
    let mut at_solution = 0;
    let mut widest: f64 = 0.0;
    for _ in 0..20 {
        let game = random_affine_game(&mut rng);
        let x = game.sample_point(&mut rng).unwrap();
        let grid = gap(&game, &x, &GapOptions::grid(), &mut rng).unwrap();
        let ms = gap(&game, &x, &GapOptions::default(), &mut rng).unwrap();
        let tol = grid.tolerance().unwrap();
        widest = widest.max(tol);
        if (grid.lower - ms.lower).abs() <= tol && ms.lower <= grid.upper.unwrap() {
            agree += 1;
        }
        let star = solve_equilibrium(&game);
        let g = gap(&game, &star, &GapOptions::grid(), &mut rng).unwrap();
        if g.lower <= g.tolerance().unwrap() {
            at_solution += 1;
        }
    }
    report(
        10,
        "gap oracle correctness",
        agree == 20 && at_solution == 20,
        t0,
        format!("{agree}/20 grid-vs-ascent agreements, {at_solution}/20 solved points within tolerance, widest bracket {widest:.3}"),
    );
}
