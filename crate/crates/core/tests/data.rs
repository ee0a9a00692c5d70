use approx::assert_relative_eq;
use gpssm_core::data::{
    mss_check, read_trajectories, simulate_dubins, simulate_linear, subsequences, write_trajectories, ColumnSpec,
    Dataset, DubinsParams, LinearSim, LinearSystem, NormStats, Trajectory,
};
use gpssm_core::rng;
use gpssm_core::tensor::Array;
use nalgebra::{Complex, DMatrix};
use proptest::prelude::*;

fn trajectory(rows: usize, du: usize, dy: usize, values: &[f64]) -> Trajectory {
    let take = |offset: usize, n: usize| (0..n).map(|i| values[(offset + i) % values.len()]).collect();
    Trajectory::new(
        Array::matrix(rows, du, take(0, rows * du)),
        Array::matrix(rows, dy, take(rows * du, rows * dy)),
        None,
        "test",
    )
    .unwrap()
}

fn spec(du: usize, dy: usize, seq: bool) -> ColumnSpec {
    ColumnSpec {
        u: (0..du).map(|i| format!("u{i}")).collect(),
        y: (0..dy).map(|i| format!("y{i}")).collect(),
        seq: seq.then(|| "seq".to_string()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_bit_exact(
        values in prop::collection::vec(
            prop_oneof![-1e300..1e300f64, -1.0..1.0f64, Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE)],
            8..64,
        ),
        rows in 2usize..12,
        n_traj in 1usize..4,
        du in 1usize..3,
        dy in 1usize..3,
    ) {
        let trajs: Vec<_> = (0..n_traj)
            .map(|k| trajectory(rows + k, du, dy, &values[k..]))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let columns = spec(du, dy, n_traj > 1);
        write_trajectories(&path, &trajs, &columns).unwrap();
        let back = read_trajectories(&path, &columns).unwrap();
        prop_assert_eq!(back.len(), trajs.len());
        for (a, b) in trajs.iter().zip(&back) {
            let bits = |x: &Array| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.u), bits(&b.u));
            prop_assert_eq!(bits(&a.y), bits(&b.y));
        }
    }

    #[test]
    fn denormalize_inverts_normalize(
        values in prop::collection::vec(-1e3..1e3f64, 16..64),
        rows in 3usize..20,
    ) {
        let t = trajectory(rows, 2, 2, &values);
        let stats = NormStats::from_trajectories(std::slice::from_ref(&t));
        let back = stats.denormalize(&stats.normalize(&t));
        for (a, b) in t.u.data().iter().chain(t.y.data()).zip(back.u.data().iter().chain(back.y.data())) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

/// Chi-squared quantile matching the standard-normal quantile `z`, by the Wilson-Hilferty
/// cube-root approximation, accurate to well under one percent for df > 30.
fn chi2_upper(df: f64, z: f64) -> f64 {
    let c = 2.0 / (9.0 * df);
    df * (1.0 - c + z * c.sqrt()).powi(3)
}

#[test]
fn window_starts_are_uniform() {
    let r: Vec<f64> = (0..200).map(|i| i as f64 * 0.37).collect();
    let trajs = vec![trajectory(60, 1, 1, &r), trajectory(100, 1, 1, &r)];
    let len = 30;
    let mut sub = subsequences(&trajs, len, 11).unwrap();
    let offsets = [0, 60 - len + 1];
    let cells = offsets[1] + 100 - len + 1;
    let mut counts = vec![0usize; cells];
    let draws = 10_000;
    for _ in 0..draws {
        let w = sub.next_window();
        assert!(w.start + len <= trajs[w.trajectory].len());
        assert_eq!(w.y.data(), &trajs[w.trajectory].y.data()[w.start..w.start + len]);
        counts[offsets[w.trajectory] + w.start] += 1;
    }
    let expected = draws as f64 / cells as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // z for the upper 1% point of the standard normal
    let critical = chi2_upper((cells - 1) as f64, 2.326_348);
    assert!(chi2 < critical, "chi2 {chi2:.1} exceeds {critical:.1} over {cells} cells");
}

#[test]
fn normalization_uses_train_split_only() {
    let sim = LinearSim {
        system: LinearSystem::scalar(0.8, 1.0, 0.1, 0.1),
        x0_std: 1.0,
        control_std: 2.0,
    };
    let train = simulate_linear(&sim, 200, 3, 1).unwrap();
    let mut test = simulate_linear(&sim, 200, 2, 2).unwrap();
    let a = Dataset::new("a", train.clone(), test.clone(), 5).unwrap();
    for t in &mut test {
        t.y = Array::matrix(t.len(), 1, t.y.data().iter().map(|v| v * 100.0 + 50.0).collect());
    }
    let b = Dataset::new("b", train.clone(), test, 5).unwrap();
    assert_eq!(a.stats, b.stats);

    let ys: Vec<f64> = train.iter().flat_map(|t| t.y.data().to_vec()).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let std = (ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
    assert_relative_eq!(a.stats.y_mean[0], mean, epsilon = 1e-12);
    assert_relative_eq!(a.stats.y_std[0], std, epsilon = 1e-12);

    let norm = a.normalize();
    let pooled: Vec<f64> = norm.train.iter().flat_map(|t| t.y.data().to_vec()).collect();
    let m = pooled.iter().sum::<f64>() / pooled.len() as f64;
    assert!(m.abs() < 1e-10, "normalized train mean {m}");
    let pooled_u: Vec<f64> = norm.train.iter().flat_map(|t| t.u.data().to_vec()).collect();
    assert!((pooled_u.iter().sum::<f64>() / pooled_u.len() as f64).abs() < 1e-10);
    let v = pooled.iter().map(|x| x * x).sum::<f64>() / pooled.len() as f64;
    assert_relative_eq!(v, 1.0, epsilon = 1e-10);
}

#[test]
fn dubins_constant_curvature_traces_a_circle() {
    let kappa = 0.5;
    let p = DubinsParams {
        dt: 1e-3,
        process_std: [0.0; 3],
        obs_std: 0.0,
        theta0: (0.3, 0.3),
        constant_controls: Some((1.0, kappa)),
        ..DubinsParams::default()
    };
    let t = &simulate_dubins(&p, 6000, 1, 0).unwrap()[0];
    let x = t.x.as_ref().unwrap();
    let point = |i: usize| (x.at(i, 0), x.at(i, 1));
    let (a, b, c) = (point(0), point(2000), point(4000));
    // circumcircle of three points
    let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
    let sq = |p: (f64, f64)| p.0 * p.0 + p.1 * p.1;
    let cx = (sq(a) * (b.1 - c.1) + sq(b) * (c.1 - a.1) + sq(c) * (a.1 - b.1)) / d;
    let cy = (sq(a) * (c.0 - b.0) + sq(b) * (a.0 - c.0) + sq(c) * (b.0 - a.0)) / d;
    let radius = ((a.0 - cx).powi(2) + (a.1 - cy).powi(2)).sqrt();
    assert!((radius - 1.0 / kappa).abs() < 1e-6, "radius {radius}");
    for i in [1000, 3000, 5999] {
        let r = ((x.at(i, 0) - cx).powi(2) + (x.at(i, 1) - cy).powi(2)).sqrt();
        assert!((r - 1.0 / kappa).abs() < 1e-6, "step {i}: radius {r}");
    }
    assert_relative_eq!(x.at(5999, 2), 0.3 + 5999.0 * 1e-3 * kappa, epsilon = 1e-9);
}

#[test]
fn dubins_position_spread_grows() {
    let p = DubinsParams {
        theta0: (0.0, 0.0),
        constant_controls: Some((1.0, 0.2)),
        ..DubinsParams::default()
    };
    let trajs = simulate_dubins(&p, 200, 500, 3).unwrap();
    let var_at = |i: usize| {
        let xs: Vec<f64> = trajs.iter().map(|t| t.x.as_ref().unwrap().at(i, 0)).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let checkpoints = [10, 50, 100, 199];
    for w in checkpoints.windows(2) {
        assert!(var_at(w[1]) > var_at(w[0]), "variance fell between steps {} and {}", w[0], w[1]);
    }
}

#[test]
fn stable_scalar_system_reaches_lyapunov_variance() {
    let sim = LinearSim {
        system: LinearSystem::scalar(0.5, 0.0, 1.0, 0.0),
        x0_std: 0.0,
        control_std: 0.0,
    };
    let t = &simulate_linear(&sim, 100_000, 1, 4).unwrap()[0];
    let x = &t.x.as_ref().unwrap().data()[100..];
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    let lyapunov = 1.0 / (1.0 - 0.25);
    assert!((v / lyapunov - 1.0).abs() < 0.05, "variance {v}");
}

#[test]
fn unstable_scalar_system_spreads() {
    let sim = LinearSim {
        system: LinearSystem::scalar(1.05, 0.0, 1.0, 0.0),
        x0_std: 1.0,
        control_std: 0.0,
    };
    let trajs = simulate_linear(&sim, 101, 400, 5).unwrap();
    let var_at = |i: usize| {
        let xs: Vec<f64> = trajs.iter().map(|t| t.x.as_ref().unwrap().at(i, 0)).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    assert!(var_at(100) > 10.0 * var_at(10));
    assert!(!mss_check(&sim.system.a).unwrap().is_mss);
}

#[test]
fn memoryless_system_delays_controls_by_one_step() {
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, -1.0]);
    let system = LinearSystem::new(
        DMatrix::zeros(2, 2),
        DMatrix::identity(2, 2),
        c.clone(),
        DMatrix::zeros(2, 2),
        DMatrix::zeros(2, 2),
    )
    .unwrap();
    let sim = LinearSim {
        system,
        x0_std: 1.0,
        control_std: 1.0,
    };
    let t = &simulate_linear(&sim, 50, 1, 6).unwrap()[0];
    for i in 0..49 {
        let u = nalgebra::DVector::from_column_slice(t.u.row(i));
        let expected = &c * u;
        for j in 0..2 {
            assert_relative_eq!(t.y.at(i + 1, j), expected[j], epsilon = 1e-12);
        }
    }
}

/// Characteristic polynomial coefficients `[c_0, ..., c_{n-1}]` of
/// `λ^n + c_{n-1} λ^{n-1} + ... + c_0` by the Faddeev-LeVerrier recursion.
fn characteristic_polynomial(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut coeffs = vec![0.0; n + 1];
    coeffs[n] = 1.0;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        m = a * &m + DMatrix::identity(n, n) * coeffs[n - k + 1];
        coeffs[n - k] = -(a * &m).trace() / k as f64;
    }
    coeffs.truncate(n);
    coeffs
}

/// Roots of a monic polynomial by Durand-Kerner iteration.
fn polynomial_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let n = coeffs.len();
    let eval = |z: Complex<f64>| {
        let mut acc = Complex::new(1.0, 0.0);
        for c in coeffs.iter().rev() {
            acc = acc * z + *c;
        }
        acc
    };
    let seed = Complex::new(0.4, 0.9);
    let mut roots: Vec<Complex<f64>> = (0..n).map(|i| seed.powu(i as u32)).collect();
    for _ in 0..5000 {
        let mut shift = 0.0f64;
        for i in 0..n {
            let mut denom = Complex::new(1.0, 0.0);
            for j in 0..n {
                if i != j {
                    denom *= roots[i] - roots[j];
                }
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            shift = shift.max(step.norm());
        }
        if shift < 1e-15 {
            break;
        }
    }
    roots
}

#[test]
fn spectral_radius_matches_polynomial_roots() {
    let mut r = rng::seeded(7);
    for _ in 0..50 {
        let a = DMatrix::from_fn(4, 4, |_, _| 0.5 * rng::normal(&mut r));
        let oracle = polynomial_roots(&characteristic_polynomial(&a))
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        let report = mss_check(&a).unwrap();
        assert!(
            (report.spectral_radius - oracle).abs() < 1e-8,
            "radius {} vs oracle {oracle}",
            report.spectral_radius
        );
        assert_eq!(report.is_mss, oracle < 1.0);
    }
}
