use super::*;
use ndarray::Array1;
use rand::Rng;

struct Table {
    x: Array2<f64>,
    y: Array1<f64>,
    rows_per: usize,
}

impl Samples<f64> for Table {
    fn len(&self) -> usize {
        self.y.len()
    }
    fn gather(&self, idx: &[usize]) -> (Array2<f64>, Array1<f64>) {
        let r = self.rows_per;
        let mut x = Array2::zeros((idx.len() * r, self.x.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            x.slice_mut(s![k * r..(k + 1) * r, ..]).assign(&self.x.slice(s![i * r..(i + 1) * r, ..]));
        }
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Parameters drawn uniformly from `[-a, a]`, biases included, so that
/// pre-activations sit well away from the ReLU kink at zero.
fn randomize(net: &mut Network<f64>, seed: u64, a: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut() {
        *p = rng.random_range(-a..a);
    }
}

/// Central finite differences over every parameter; returns the worst
/// relative error `|a - n| / max(|a| + |n|, floor)`.
fn worst_fd_error(net: &Network<f64>, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let (_, analytic) = net.gradients(x.view(), y.view()).unwrap();
    let eps = 1e-5;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for i in 0..net.param_count() {
        let p0 = probe.params()[i];
        probe.params_mut()[i] = p0 + eps;
        let (lp, _) = probe.gradients(x.view(), y.view()).unwrap();
        probe.params_mut()[i] = p0 - eps;
        let (lm, _) = probe.gradients(x.view(), y.view()).unwrap();
        probe.params_mut()[i] = p0;
        let numeric = (lp - lm) / (2.0 * eps);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-6);
        let e = (analytic[i] - numeric).abs() / denom;
        worst = worst.max(e);
    }
    worst
}

#[test]
fn fnn_parameter_counts() {
    assert_eq!(build_fnn::<f64>(20).unwrap().param_count(), 94_701);
    assert_eq!(build_fnn::<f64>(50).unwrap().param_count(), 100_701);
}

#[test]
fn cnn_parameter_counts_per_layer() {
    let net = build_cnn::<f64>(50, 50).unwrap();
    let counts: Vec<usize> = net.layer_param_counts().into_iter().filter(|&c| c > 0).collect();
    assert_eq!(counts, vec![5010, 1010, 101, 2550, 51]);
    assert_eq!(net.param_count(), 8722);
    for n in [1usize, 20, 36, 47] {
        let closed = (10 * n * 10 + 10) + 1010 + 101 + 2550 + 51;
        assert_eq!(build_cnn::<f64>(n, 50).unwrap().param_count(), closed);
    }
}

#[test]
fn batch_output_shape() {
    let mut net = build_fnn::<f64>(20).unwrap();
    net.xavier_init(1);
    let y = net.forward(random_matrix(7, 20, 2).view()).unwrap();
    assert_eq!(y.dim(), (7, 1));
    assert!(net.forward(random_matrix(7, 21, 2).view()).is_err());
}

#[test]
fn zero_weights_predict_zero() {
    let net = build_fnn::<f64>(5).unwrap();
    let y = net.forward(random_matrix(4, 5, 3).view()).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
    let cnn = build_cnn::<f64>(3, 12).unwrap();
    let y = cnn.forward(random_matrix(2 * 12, 3, 3).view()).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn identity_dense_layer_passes_input() {
    let mut net = Network::<f64>::new(InputShape::Flat(3), vec![LayerSpec::Dense { units: 3 }]).unwrap();
    for i in 0..3 {
        net.params_mut()[i * 3 + i] = 1.0;
    }
    let x = random_matrix(5, 3, 4);
    assert_eq!(net.forward(x.view()).unwrap(), x);
}

#[test]
fn constant_window_convolution_edges() {
    // Single conv layer with kernel 10 on a constant sequence: only the
    // padded border positions differ from the interior value.
    let (len, k) = (30usize, 10usize);
    let mut net = Network::<f64>::new(
        InputShape::Sequence { len, channels: 2 },
        vec![LayerSpec::Conv1d { channels: 1, kernel: k }, LayerSpec::Flatten],
    )
    .unwrap();
    net.xavier_init(9);
    let x = Array2::from_elem((len, 2), 0.7);
    let y = net.forward(x.view()).unwrap();
    // Direct convolution oracle.
    let w = net.params()[..k * 2].to_vec();
    let b = net.params()[k * 2];
    let pl = (k - 1) / 2;
    for t in 0..len {
        let mut acc = b;
        for kk in 0..k {
            let src = t as isize + kk as isize - pl as isize;
            if src >= 0 && (src as usize) < len {
                acc += 0.7 * (w[kk * 2] + w[kk * 2 + 1]);
            }
        }
        assert!((y[[0, t]] - acc).abs() < 1e-12);
    }
    let interior = y[[0, pl]];
    for t in pl..len - (k - 1 - pl) {
        assert!((y[[0, t]] - interior).abs() < 1e-12);
    }
    assert!((y[[0, 0]] - interior).abs() > 1e-9);
}

#[test]
fn fnn_gradients_match_finite_differences() {
    let mut net = build_fnn::<f64>(20).unwrap();
    randomize(&mut net, 11, 0.3);
    let x = random_matrix(16, 20, 12);
    let y = Array1::from_iter((0..16).map(|i| i as f64 * 0.1));
    let worst = worst_fd_error(&net, &x, &y);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn cnn_gradients_match_finite_differences() {
    let mut net = build_cnn::<f64>(6, 14).unwrap();
    randomize(&mut net, 13, 0.5);
    let x = random_matrix(16 * 14, 6, 14);
    let y = Array1::from_iter((0..16).map(|i| 1.0 - i as f64 * 0.05));
    let worst = worst_fd_error(&net, &x, &y);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_network_gradients_only_on_output_bias() {
    // All weights zero and zero targets: every activation is zero, so only
    // the output bias sees a (zero) error signal; all gradients vanish.
    let net = build_fnn::<f64>(4).unwrap();
    let x = random_matrix(8, 4, 5);
    let (loss, g) = net.gradients(x.view(), Array1::zeros(8).view()).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn duplicated_batch_has_same_gradient() {
    let mut net = build_fnn::<f64>(6).unwrap();
    net.xavier_init(21);
    let x1 = random_matrix(1, 6, 22);
    let x2 = ndarray::concatenate![Axis(0), x1.view(), x1.view(), x1.view()];
    let (_, g1) = net.gradients(x1.view(), Array1::from(vec![0.4]).view()).unwrap();
    let (_, g3) = net.gradients(x2.view(), Array1::from(vec![0.4; 3]).view()).unwrap();
    for (a, b) in g1.iter().zip(&g3) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn non_finite_input_is_reported() {
    let mut net = build_fnn::<f64>(3).unwrap();
    net.xavier_init(1);
    let mut x = random_matrix(2, 3, 1);
    x[[0, 0]] = f64::NAN;
    assert!(matches!(net.gradients(x.view(), Array1::zeros(2).view()), Err(Error::Numeric(_))));
}

#[test]
fn xavier_statistics() {
    let mut net = Network::<f64>::new(InputShape::Flat(200), vec![LayerSpec::Dense { units: 200 }]).unwrap();
    net.xavier_init(77);
    let w = &net.params()[..200 * 200];
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let target = 2.0 / 400.0;
    assert!((var - target).abs() / target < 0.15, "var {var}");
    assert!(net.params()[200 * 200..].iter().all(|&b| b == 0.0));
    let mut again = Network::<f64>::new(InputShape::Flat(200), vec![LayerSpec::Dense { units: 200 }]).unwrap();
    again.xavier_init(77);
    assert_eq!(again, net);
}

#[test]
fn batch_size_independent_predictions() {
    let mut net = build_cnn::<f32>(5, 20).unwrap();
    net.xavier_init(3);
    let x = random_matrix(37 * 20, 5, 8).mapv(|v| v as f32);
    let table = F32Table { x, y: Array1::zeros(37), rows_per: 20 };
    let whole = predict(&net, &table, 1000).unwrap();
    let pieces = predict(&net, &table, 4).unwrap();
    assert_eq!(whole, pieces);
    assert_eq!(whole, predict(&net, &table, 1000).unwrap());
}

struct F32Table {
    x: Array2<f32>,
    y: Array1<f32>,
    rows_per: usize,
}

impl Samples<f32> for F32Table {
    fn len(&self) -> usize {
        self.y.len()
    }
    fn gather(&self, idx: &[usize]) -> (Array2<f32>, Array1<f32>) {
        let r = self.rows_per;
        let mut x = Array2::zeros((idx.len() * r, self.x.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            x.slice_mut(s![k * r..(k + 1) * r, ..]).assign(&self.x.slice(s![i * r..(i + 1) * r, ..]));
        }
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }
}

#[test]
fn linear_target_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 2000;
    let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
    let y = Array1::from_iter((0..n).map(|i| 0.5 * x[[i, 0]] - 0.3 * x[[i, 1]] + 0.2 * x[[i, 2]]));
    let tr = Table { x: x.slice(s![..1800, ..]).to_owned(), y: y.slice(s![..1800]).to_owned(), rows_per: 1 };
    let va = Table { x: x.slice(s![1800.., ..]).to_owned(), y: y.slice(s![1800..]).to_owned(), rows_per: 1 };
    let cfg = TrainConfig { batch_size: 64, ..TrainConfig::fnn(1) };
    let (net, log) = train(build_fnn::<f64>(3).unwrap(), &tr, &va, &cfg).unwrap();
    let p = predict(&net, &tr, 512).unwrap();
    let rmse = (p.iter().zip(tr.y.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 1800.0).sqrt();
    assert!(rmse < 0.05, "train rmse {rmse}");
    let min = log.epochs.iter().map(|e| e.val_rmse).fold(f64::INFINITY, f64::min);
    assert_eq!(log.best_val_rmse, min);
    assert!(log.epochs.len() <= 60);
}

#[test]
fn training_is_reproducible_and_v_hat_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Array2::from_shape_fn((300, 4), |_| rng.random_range(-1.0..1.0));
    let y = x.column(0).mapv(|v| v * v);
    let tr = Table { x: x.clone(), y: y.clone(), rows_per: 1 };
    let va = Table { x, y, rows_per: 1 };
    let cfg = TrainConfig { batch_size: 32, max_epochs: 6, ..TrainConfig::fnn(9) };
    let mut prev: Option<Vec<f64>> = None;
    let mut monotone = true;
    let (a, la) = train_observed(dense_stack::<f64>(4, &[8], 1).unwrap(), &tr, &va, &cfg, &mut |opt| {
        if let Some(p) = &prev {
            monotone &= opt.v_hat.iter().zip(p).all(|(n, o)| n >= o);
        }
        prev = Some(opt.v_hat.clone());
    })
    .unwrap();
    assert!(monotone);
    let (b, lb) = train(dense_stack::<f64>(4, &[8], 1).unwrap(), &tr, &va, &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

