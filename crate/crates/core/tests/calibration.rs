use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use phm_core::calibration::*;
use phm_core::engine::{evaluate_model, HealthState, OperatingPoint};
use phm_core::fleet::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Textbook linear Kalman filter with a random-walk state.
struct LinearKf {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl LinearKf {
    fn step(&mut self, a: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, z: &DVector<f64>) {
        let p = &self.cov + q;
        let s = a * &p * a.transpose() + r;
        let k = &p * a.transpose() * s.try_inverse().unwrap();
        self.mean = &self.mean + &k * (z - a * &self.mean);
        let eye = DMatrix::<f64>::identity(3, 3);
        self.cov = (eye - &k * a) * p;
    }
}

fn run_pair(a: DMatrix<f64>, r_diag: Vec<f64>, steps: usize, seed: u64) -> (f64, f64, f64) {
    let m = a.nrows();
    let cfg = UkfConfig { r_diag: r_diag.clone(), q_diag: [1e-6, 2e-6, 5e-7], ..Default::default() };
    let ukf = Ukf::<f64>::new(&cfg).unwrap();
    let mut state = ukf.init();
    let mut kf = LinearKf { mean: DVector::zeros(3), cov: DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.p0_diag)) };
    let q = DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.q_diag));
    let r = DMatrix::from_diagonal(&DVector::from_vec(r_diag.clone()));
    let truth = DVector::from_vec(vec![-0.03, -0.01, 0.02]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_mean: f64 = 0.0;
    let mut worst_cov: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    for _ in 0..steps {
        let noise = DVector::from_iterator(m, r_diag.iter().map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e * v.sqrt()
        }));
        let z = &a * &truth + noise;
        ukf.step(&mut state, &z, |t| Ok(&a * DVector::from_column_slice(t.as_slice()))).unwrap();
        kf.step(&a, &q, &r, &z);
        for i in 0..3 {
            worst_mean = worst_mean.max((state.theta_mean[i] - kf.mean[i]).abs());
            for j in 0..3 {
                worst_cov = worst_cov.max((state.theta_cov[(i, j)] - kf.cov[(i, j)]).abs());
            }
        }
        min_eig = min_eig.min(SymmetricEigen::new(state.theta_cov).eigenvalues.min());
    }
    (worst_mean, worst_cov, min_eig)
}

#[test]
fn matches_linear_kalman_filter() {
    let a = DMatrix::from_row_slice(4, 3, &[1.0, 0.5, 0.0, 0.2, -1.0, 0.3, 0.0, 0.4, 2.0, 0.7, 0.7, 0.7]);
    let t = std::time::Instant::now();
    let (dm, dc, eig) = run_pair(a, vec![1e-4, 2e-4, 5e-5, 1e-4], 200, 3);
    assert!(dm < 1e-8, "mean deviation {dm}");
    assert!(dc < 1e-6, "covariance deviation {dc}");
    assert!(eig >= -1e-10);
    assert!(t.elapsed().as_secs_f64() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn oracle_equivalence_and_psd(
        coeffs in prop::collection::vec(-2.0..2.0f64, 15),
        r in prop::collection::vec(1e-5..1e-2f64, 5),
        seed in any::<u64>(),
    ) {
        let a = DMatrix::from_row_slice(5, 3, &coeffs);
        let (dm, dc, eig) = run_pair(a, r, 40, seed);
        prop_assert!(dm < 1e-8, "mean deviation {}", dm);
        prop_assert!(dc < 1e-6, "cov deviation {}", dc);
        prop_assert!(eig >= -1e-10);
    }
}

fn stationary_unit(theta: HealthState<f64>, n: usize, sigma: f64, seed: u64) -> UnitRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = gen_flight_profile(seed, RouteClass::Long, n).unwrap();
    let samples = profile
        .into_iter()
        .map(|w| {
            let (xs, xv) = evaluate_model(&w, &theta).unwrap();
            let noisy = phm_core::engine::SensorFrame::from_array(xs.to_array().map(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v * (1.0 + sigma * e)
            }));
            Sample { w, xs_noisy: noisy, xs_true: xs, xv_true: xv }
        })
        .collect();
    UnitRecord {
        unit_id: 1,
        route: RouteClass::Long,
        failure_mode: FailureMode::HptPlusLpt,
        seed,
        cycles: vec![FlightCycle { cycle_index: 1, samples, rul_label: 1 }],
        t_s: 1,
        t_eol: 2,
        ground_truth_theta: vec![theta],
    }
}

#[test]
fn stationary_truth_within_three_sigma() {
    let truth = HealthState::new(-0.06, -0.04, -0.03);
    let unit = stationary_unit(truth, 500, 0.004, 8);
    let cfg = UkfConfig::with_relative_noise(0.004);
    let tr = calibrate_trajectory::<f64, _>(&unit, &ExactModel, &cfg, 0).unwrap();
    let last = tr.len() - 1;
    for k in 0..3 {
        let err = (tr.theta_hat[last][k] - truth.to_array()[k]).abs();
        assert!(err < 3.0 * tr.theta_var[last][k].sqrt(), "component {k}: {err}");
    }
}

#[test]
fn innovations_shrink_on_stationary_segment() {
    let unit = stationary_unit(HealthState::new(-0.08, -0.05, -0.02), 400, 0.0, 2);
    let cfg = UkfConfig::with_relative_noise(1e-4);
    let tr = calibrate_trajectory::<f64, _>(&unit, &ExactModel, &cfg, 0).unwrap();
    assert!(tr.innovation_norm[199] < tr.innovation_norm[0]);
}

fn small_fleet() -> FleetConfig {
    FleetConfig { samples_per_cycle: 40, ..FleetConfig::default() }
}

#[test]
fn noise_free_recovery() {
    let cfg = FleetConfig { sensor_noise_sigma: 0.0, ..small_fleet() };
    let (dev, _) = build_fleet(&cfg).unwrap();
    let ukf = UkfConfig::for_sampling(1e-4, cfg.samples_per_cycle);
    for u in [&dev[0], &dev[4]] {
        let tr = calibrate_trajectory::<f64, _>(u, &ExactModel, &ukf, cfg.samples_per_cycle).unwrap();
        let rmse = theta_rmse(&tr, u, cfg.samples_per_cycle).unwrap();
        assert!(rmse.iter().all(|r| *r < 0.005), "unit {}: {rmse:?}", u.unit_id);
    }
}

#[test]
fn trace_is_self_consistent() {
    let (dev, _) = build_fleet(&small_fleet()).unwrap();
    let u = &dev[3];
    let tr = calibrate_trajectory::<f64, _>(u, &ExactModel, &UkfConfig::for_sampling(0.004, 40), 40).unwrap();
    assert_eq!(tr.len(), u.n_samples());
    for (i, (_, _, s)) in u.iter_samples().enumerate() {
        let th = HealthState::from_array(tr.theta_hat[i]);
        assert!(th.validate().is_ok());
        let (xs, xv) = evaluate_model(&s.w, &th).unwrap();
        assert_eq!(tr.xs_hat[i], xs.to_array());
        assert_eq!(tr.xv_hat[i], xv.to_array());
    }
}

#[test]
fn matched_noise_credible_coverage() {
    let cfg = small_fleet();
    let (dev, test) = build_fleet(&cfg).unwrap();
    let ukf = UkfConfig::for_sampling(cfg.sensor_noise_sigma, cfg.samples_per_cycle);
    let mut inside = 0.0;
    let mut total = 0.0;
    for u in dev.iter().chain(&test) {
        let tr = calibrate_trajectory::<f64, _>(u, &ExactModel, &ukf, cfg.samples_per_cycle).unwrap();
        let n = (u.n_samples() - cfg.samples_per_cycle) as f64;
        let cov = credible_coverage(&tr, u, cfg.samples_per_cycle, 2.576);
        inside += cov.iter().sum::<f64>() * n;
        total += 3.0 * n;
    }
    assert!(inside / total >= 0.95, "coverage {}", inside / total);
}

#[test]
fn surrogate_dynamics() {
    let cfg = small_fleet();
    let (dev, test) = build_fleet(&cfg).unwrap();
    let ukf = UkfConfig::for_sampling(cfg.sensor_noise_sigma, cfg.samples_per_cycle);
    let traces: Vec<_> = dev
        .iter()
        .map(|u| calibrate_trajectory::<f64, _>(u, &ExactModel, &ukf, 0).unwrap())
        .collect();
    let pairs: Vec<_> = dev.iter().zip(&traces).collect();
    let sur = fit_surrogate(&pairs, &SurrogateConfig::default()).unwrap();
    for (k, e) in sur.heldout_rel_error.iter().take(16).enumerate() {
        assert!(*e < 0.02, "sensor {k}: held-out relative error {e}");
    }

    // constant inputs: self-fed rollout settles
    let w = OperatingPoint::new(33000.0, 0.8, 80.0).unwrap();
    let th = [-0.05, -0.02, -0.01];
    let mut r = sur.cold_start(&w).unwrap();
    let mut after_first = None;
    for step in 0..50 {
        r = sur.step(&w, &r, &th).unwrap();
        if step == 0 {
            after_first = Some(r);
        }
    }
    let first = after_first.unwrap();
    for k in 0..16 {
        let drift = (r.xs[k] - first.xs[k]).abs() / first.xs[k].abs();
        assert!(drift < 0.05, "sensor {k} drift {drift}");
    }

    // paired calibration on a test unit
    let u = &test[0];
    let exact = calibrate_trajectory::<f64, _>(u, &ExactModel, &ukf, 0).unwrap();
    let approx = calibrate_trajectory::<f64, _>(u, &sur, &ukf, 0).unwrap();
    for k in 0..3 {
        let a: Vec<f64> = exact.theta_hat.iter().map(|t| t[k]).collect();
        let b: Vec<f64> = approx.theta_hat.iter().map(|t| t[k]).collect();
        let c = correlation(&a, &b);
        assert!(c > 0.95, "component {k}: correlation {c}");
    }

    let mut buf = Vec::new();
    sur.write(&mut buf).unwrap();
    assert_eq!(SurrogateModel::read(buf.as_slice()).unwrap(), sur);
}

#[test]
fn surrogate_needs_data() {
    let unit = stationary_unit(HealthState::new(-0.01, 0.0, 0.0), 100, 0.0, 1);
    let tr = CalibratedTrace::ground_truth(&unit);
    let err = fit_surrogate(&[(&unit, &tr)], &SurrogateConfig::default()).unwrap_err();
    assert!(matches!(err, phm_core::Error::Config(_)));
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn noise_injection_hits_requested_snr() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s: Vec<[f64; 3]> = (0..10_000)
        .map(|i| {
            let t = i as f64 / 10_000.0;
            let e: f64 = StandardNormal.sample(&mut rng);
            [-0.15 * t, -0.05 * t * t, -0.02 + 1e-4 * e]
        })
        .collect();
    let noisy = inject_noise(&s, 20.0, 11).unwrap();
    for k in 0..3 {
        let p_sig: f64 = s.iter().map(|t| t[k] * t[k]).sum::<f64>();
        let p_noise: f64 = s.iter().zip(&noisy).map(|(a, b)| (b[k] - a[k]).powi(2)).sum::<f64>();
        let snr = 10.0 * (p_sig / p_noise).log10();
        assert!((snr - 20.0).abs() < 1.0, "component {k}: {snr} dB");
    }
}

#[test]
fn ground_truth_trace_lengths() {
    let (dev, _) = build_fleet(&small_fleet()).unwrap();
    let t = CalibratedTrace::ground_truth(&dev[0]);
    assert_eq!(t.len(), dev[0].n_samples());
    assert_eq!(theta_rmse(&t, &dev[0], 0).unwrap(), [0.0; 3]);
    let _ = (Matrix3::<f64>::zeros(), Vector3::<f64>::zeros());
}
