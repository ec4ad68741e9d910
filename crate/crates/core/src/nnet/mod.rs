//! Small dense / 1-D convolutional network engine with reverse-mode gradients.
//!
//! Parameters of every layer live in one flat buffer so the optimizer and the
//! serializer only ever see a `[T]`. Layer kernels borrow typed views into it.
//!
//! Batch layout: a flat-input network takes a `(batch, features)` matrix. A
//! sequence network takes the windows stacked row-wise, i.e. a
//! `(batch * len, channels)` matrix where rows `b*len .. (b+1)*len` are the
//! time steps of sample `b`.

mod io;
mod optim;
mod train;

pub use io::{read_network, write_network, ContainerHeader};
pub use optim::{AmsGrad, OptimizerState};
pub use train::{train, train_observed, EarlyStopping, EpochRecord, Samples, StopDecision, TrainConfig, TrainLog};

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    /// Temporal convolution with SAME zero padding (left pad `(k-1)/2`).
    Conv1d { channels: usize, kernel: usize },
    Flatten,
    Activation(Activation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Flat(usize),
    Sequence { len: usize, channels: usize },
}

impl InputShape {
    fn rows_per_sample(self) -> usize {
        match self {
            InputShape::Flat(_) => 1,
            InputShape::Sequence { len, .. } => len,
        }
    }

    fn cols(self) -> usize {
        match self {
            InputShape::Flat(n) => n,
            InputShape::Sequence { channels, .. } => channels,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Dense { fan_in: usize, units: usize },
    Conv { len: usize, cin: usize, cout: usize, kernel: usize },
    Flatten { len: usize, channels: usize },
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy)]
struct Plan {
    kind: Kind,
    w_off: usize,
    b_off: usize,
    n_params: usize,
}

/// Network parameters together with the layer chain they belong to.
#[derive(Debug, Clone)]
pub struct Network<T> {
    input: InputShape,
    specs: Vec<LayerSpec>,
    params: Vec<T>,
    plans: Vec<Plan>,
}

impl<T: PartialEq> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input && self.specs == other.specs && self.params == other.params
    }
}

fn plan_chain(input: InputShape, specs: &[LayerSpec]) -> Result<(Vec<Plan>, usize, usize)> {
    let mut shape = input;
    let mut off = 0usize;
    let mut plans = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (kind, n_w, n_b, next) = match (*spec, shape) {
            (LayerSpec::Dense { units }, InputShape::Flat(n)) if units > 0 => {
                (Kind::Dense { fan_in: n, units }, n * units, units, InputShape::Flat(units))
            }
            (LayerSpec::Conv1d { channels, kernel }, InputShape::Sequence { len, channels: cin })
                if kernel >= 1 && channels > 0 =>
            {
                (
                    Kind::Conv { len, cin, cout: channels, kernel },
                    kernel * cin * channels,
                    channels,
                    InputShape::Sequence { len, channels },
                )
            }
            (LayerSpec::Flatten, InputShape::Sequence { len, channels }) => {
                (Kind::Flatten { len, channels }, 0, 0, InputShape::Flat(len * channels))
            }
            (LayerSpec::Activation(Activation::Relu), s) => (Kind::Relu, 0, 0, s),
            (LayerSpec::Activation(Activation::Identity), s) => (Kind::Identity, 0, 0, s),
            (spec, s) => {
                return Err(Error::Shape(format!("layer {i} ({spec:?}) cannot follow shape {s:?}")))
            }
        };
        plans.push(Plan { kind, w_off: off, b_off: off + n_w, n_params: n_w + n_b });
        off += n_w + n_b;
        shape = next;
    }
    let out = match shape {
        InputShape::Flat(n) => n,
        InputShape::Sequence { .. } => {
            return Err(Error::Shape("network must end in a flat representation".into()))
        }
    };
    Ok((plans, off, out))
}

/// Activations recorded by a forward pass, consumed by the backward pass.
struct Tape<T> {
    /// Per layer: its input (Conv: zero-padded input; ReLU: its output).
    inputs: Vec<Array2<T>>,
    output: Array2<T>,
}

impl<T: Scalar> Network<T> {
    /// Zero-initialised network. Use [`Network::xavier_init`] before training.
    pub fn new(input: InputShape, specs: Vec<LayerSpec>) -> Result<Self> {
        match input {
            InputShape::Flat(0) | InputShape::Sequence { len: 0, .. } | InputShape::Sequence { channels: 0, .. } => {
                return Err(Error::Shape("input dimension must be >= 1".into()))
            }
            _ => {}
        }
        let (plans, n, _) = plan_chain(input, &specs)?;
        Ok(Self {
            input,
            specs,
            params: vec![T::zero(); n],
            plans,
        })
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn output_dim(&self) -> usize {
        plan_chain(self.input, &self.specs).map(|(_, _, o)| o).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Per-layer parameter counts (zero for parameter-free layers).
    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.plans.iter().map(|p| p.n_params).collect()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn xavier_init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for plan in &self.plans {
            let (fan_in, fan_out) = match plan.kind {
                Kind::Dense { fan_in, units } => (fan_in, units),
                Kind::Conv { cin, cout, kernel, .. } => (kernel * cin, kernel * cout),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut self.params[plan.w_off..plan.b_off] {
                *w = T::lit(rng.random_range(-limit..limit));
            }
            for b in &mut self.params[plan.b_off..plan.w_off + plan.n_params] {
                *b = T::zero();
            }
        }
    }

    fn check_batch(&self, x: &ArrayView2<T>) -> Result<usize> {
        let rps = self.input.rows_per_sample();
        if x.ncols() != self.input.cols() || x.nrows() % rps != 0 {
            return Err(Error::Shape(format!(
                "batch {:?} incompatible with input {:?}",
                x.dim(),
                self.input
            )));
        }
        Ok(x.nrows() / rps)
    }

    /// Forward pass; returns a `(batch, output_dim)` matrix.
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let batch = self.check_batch(&x)?;
        Ok(self.run(x, batch, false).output)
    }

    /// Forward pass over windows laid out as `(batch, len, channels)`.
    pub fn forward_windows(&self, x: ArrayView3<T>) -> Result<Array2<T>> {
        let (b, l, c) = x.dim();
        let owned = x.as_standard_layout().into_owned();
        let flat = owned
            .into_shape_with_order((b * l, c))
            .map_err(|e| Error::Shape(e.to_string()))?;
        self.forward(flat.view())
    }

    fn run(&self, x: ArrayView2<T>, batch: usize, record: bool) -> Tape<T> {
        let mut inputs = Vec::with_capacity(if record { self.plans.len() } else { 0 });
        let mut cur: Array2<T> = x.to_owned();
        for plan in &self.plans {
            let p = &self.params;
            let next = match plan.kind {
                Kind::Dense { fan_in, units } => {
                    let w = ArrayView2::from_shape((fan_in, units), &p[plan.w_off..plan.b_off]).unwrap();
                    let b = ArrayView1::from(&p[plan.b_off..plan.b_off + units]);
                    let mut y = Array2::from_shape_fn((cur.nrows(), units), |(_, j)| b[j]);
                    general_mat_mul(T::one(), &cur, &w, T::one(), &mut y);
                    if record {
                        inputs.push(cur);
                    }
                    y
                }
                Kind::Conv { len, cin, cout, kernel } => {
                    let w = ArrayView3::from_shape((kernel, cin, cout), &p[plan.w_off..plan.b_off]).unwrap();
                    let b = ArrayView1::from(&p[plan.b_off..plan.b_off + cout]);
                    let xpad = pad_sequences(cur.view(), batch, len, kernel);
                    let y = conv_forward(&xpad, &w, &b, batch, len, kernel);
                    if record {
                        inputs.push(xpad);
                    }
                    y
                }
                Kind::Flatten { len, channels } => {
                    let y = cur
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((batch, len * channels))
                        .expect("contiguous flatten");
                    if record {
                        inputs.push(Array2::zeros((0, 0)));
                    }
                    y
                }
                Kind::Relu => {
                    let y = cur.mapv(|v| if v <= T::zero() { T::zero() } else { v });
                    if record {
                        // Backward only needs the sign pattern, which the output carries.
                        inputs.push(y.clone());
                    }
                    y
                }
                Kind::Identity => {
                    if record {
                        inputs.push(Array2::zeros((0, 0)));
                    }
                    cur
                }
            };
            cur = next;
        }
        Tape { inputs, output: cur }
    }

    /// Mean-squared-error loss and its exact gradient with respect to every
    /// parameter, in the same layout as [`Network::params`].
    ///
    /// `targets` holds `batch * output_dim` values in row-major order.
    pub fn gradients(&self, x: ArrayView2<T>, targets: ArrayView1<T>) -> Result<(T, Vec<T>)> {
        let batch = self.check_batch(&x)?;
        let out_dim = self.output_dim();
        if targets.len() != batch * out_dim {
            return Err(Error::Shape(format!(
                "{} targets for batch {batch} x {out_dim}",
                targets.len()
            )));
        }
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let tape = self.run(x, batch, true);
        let scale = T::one() / T::from_usize(batch * out_dim).unwrap();
        let mut loss = T::zero();
        let mut grad_out = Array2::zeros((batch, out_dim));
        for ((g, &o), &t) in grad_out.iter_mut().zip(tape.output.iter()).zip(targets.iter()) {
            let d = o - t;
            loss += d * d;
            *g = (d + d) * scale;
        }
        loss = loss * scale;
        if !loss.is_finite() {
            let bad = x.iter().filter(|v| !v.is_finite()).count();
            return Err(Error::Numeric(format!(
                "non-finite loss on batch of {batch} ({bad} non-finite inputs)"
            )));
        }
        let grads = self.backward(&tape, grad_out, batch);
        Ok((loss, grads))
    }

    fn backward(&self, tape: &Tape<T>, grad_out: Array2<T>, batch: usize) -> Vec<T> {
        let mut grads = vec![T::zero(); self.params.len()];
        let mut dy = grad_out;
        let n = self.plans.len();
        for li in (0..n).rev() {
            let plan = self.plans[li];
            let need_dx = li > 0;
            dy = match plan.kind {
                Kind::Dense { fan_in, units } => {
                    let x = &tape.inputs[li];
                    let w = ArrayView2::from_shape((fan_in, units), &self.params[plan.w_off..plan.b_off]).unwrap();
                    {
                        let (gw, gb) = grads[plan.w_off..plan.w_off + plan.n_params].split_at_mut(fan_in * units);
                        let mut gw = ndarray::ArrayViewMut2::from_shape((fan_in, units), gw).unwrap();
                        general_mat_mul(T::one(), &x.t(), &dy, T::zero(), &mut gw);
                        for (g, col) in gb.iter_mut().zip(dy.axis_iter(Axis(1))) {
                            *g = col.sum();
                        }
                    }
                    if need_dx {
                        dy.dot(&w.t())
                    } else {
                        dy
                    }
                }
                Kind::Conv { len, cin, cout, kernel } => {
                    let xpad = &tape.inputs[li];
                    let w = ArrayView3::from_shape((kernel, cin, cout), &self.params[plan.w_off..plan.b_off]).unwrap();
                    let (gw, gb) = grads[plan.w_off..plan.w_off + plan.n_params].split_at_mut(kernel * cin * cout);
                    conv_backward(xpad, &w, &dy, batch, len, kernel, gw, gb, need_dx)
                }
                Kind::Flatten { len, channels } => dy
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((batch * len, channels))
                    .expect("contiguous unflatten"),
                Kind::Relu => {
                    ndarray::Zip::from(&mut dy).and(&tape.inputs[li]).for_each(|d, &o| {
                        if o <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    dy
                }
                Kind::Identity => dy,
            };
        }
        grads
    }
}

fn pad_sequences<T: Scalar>(x: ArrayView2<T>, batch: usize, len: usize, kernel: usize) -> Array2<T> {
    let tp = len + kernel - 1;
    let pl = (kernel - 1) / 2;
    let mut xpad = Array2::zeros((batch * tp, x.ncols()));
    for b in 0..batch {
        xpad.slice_mut(s![b * tp + pl..b * tp + pl + len, ..])
            .assign(&x.slice(s![b * len..(b + 1) * len, ..]));
    }
    xpad
}

// All taps share one GEMM: the padded input times the weights laid out as
// (cin, kernel * cout), followed by a shifted sum over the tap blocks.
fn taps_side_by_side<T: Scalar>(w: &ArrayView3<T>) -> Array2<T> {
    let (kernel, cin, cout) = w.dim();
    Array2::from_shape_fn((cin, kernel * cout), |(i, j)| w[(j / cout, i, j % cout)])
}

fn conv_forward<T: Scalar>(
    xpad: &Array2<T>,
    w: &ArrayView3<T>,
    bias: &ArrayView1<T>,
    batch: usize,
    len: usize,
    kernel: usize,
) -> Array2<T> {
    let tp = len + kernel - 1;
    let cout = w.dim().2;
    let u = xpad.dot(&taps_side_by_side(w));
    let u = u.as_slice().expect("fresh GEMM output is contiguous");
    let kc = kernel * cout;
    let bias = bias.to_vec();
    let mut y = Array2::zeros((batch * len, cout));
    let ys = y.as_slice_mut().unwrap();
    for b in 0..batch {
        for t in 0..len {
            let row = &mut ys[(b * len + t) * cout..(b * len + t + 1) * cout];
            row.copy_from_slice(&bias);
            for k in 0..kernel {
                let base = (b * tp + t + k) * kc + k * cout;
                for (o, v) in row.iter_mut().zip(&u[base..base + cout]) {
                    *o += *v;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    xpad: &Array2<T>,
    w: &ArrayView3<T>,
    dy: &Array2<T>,
    batch: usize,
    len: usize,
    kernel: usize,
    gw: &mut [T],
    gb: &mut [T],
    need_dx: bool,
) -> Array2<T> {
    let tp = len + kernel - 1;
    let pl = (kernel - 1) / 2;
    let (_, cin, cout) = w.dim();
    for (g, col) in gb.iter_mut().zip(dy.axis_iter(Axis(1))) {
        *g = col.sum();
    }
    // d[b*tp + t + k, tap k] = dy[b*len + t]
    let kc = kernel * cout;
    let mut d = Array2::zeros((batch * tp, kc));
    {
        let ds = d.as_slice_mut().unwrap();
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().unwrap();
        for b in 0..batch {
            for t in 0..len {
                let src = &dys[(b * len + t) * cout..(b * len + t + 1) * cout];
                for k in 0..kernel {
                    let base = (b * tp + t + k) * kc + k * cout;
                    ds[base..base + cout].copy_from_slice(src);
                }
            }
        }
    }
    let g_all = xpad.t().dot(&d);
    let mut gw = ndarray::ArrayViewMut3::from_shape((kernel, cin, cout), gw).unwrap();
    for ((k, i, o), g) in gw.indexed_iter_mut() {
        *g = g_all[(i, k * cout + o)];
    }
    if !need_dx {
        return Array2::zeros((0, cin));
    }
    let dxpad = d.dot(&taps_side_by_side(w).t());
    let mut dx = Array2::zeros((batch * len, cin));
    for b in 0..batch {
        dx.slice_mut(s![b * len..(b + 1) * len, ..])
            .assign(&dxpad.slice(s![b * tp + pl..b * tp + pl + len, ..]));
    }
    dx
}

/// `[n, 200, 200, 200, 50, 1]` perceptron with ReLU hidden layers and a
/// linear output unit.
pub fn build_fnn<T: Scalar>(n: usize) -> Result<Network<T>> {
    dense_stack(n, &[200, 200, 200, 50], 1)
}

/// Dense stack with ReLU on every hidden layer and an identity output layer.
pub fn dense_stack<T: Scalar>(n: usize, hidden: &[usize], out: usize) -> Result<Network<T>> {
    let mut specs = Vec::new();
    for &h in hidden {
        specs.push(LayerSpec::Dense { units: h });
        specs.push(LayerSpec::Activation(Activation::Relu));
    }
    specs.push(LayerSpec::Dense { units: out });
    specs.push(LayerSpec::Activation(Activation::Identity));
    Network::new(InputShape::Flat(n), specs)
}

/// Three SAME-padded temporal convolutions (10, 10, 1 channels, kernel 10),
/// flatten, a 50-unit dense layer and a linear output unit.
pub fn build_cnn<T: Scalar>(n: usize, n_tw: usize) -> Result<Network<T>> {
    let relu = LayerSpec::Activation(Activation::Relu);
    Network::new(
        InputShape::Sequence { len: n_tw, channels: n },
        vec![
            LayerSpec::Conv1d { channels: 10, kernel: 10 },
            relu,
            LayerSpec::Conv1d { channels: 10, kernel: 10 },
            relu,
            LayerSpec::Conv1d { channels: 1, kernel: 10 },
            relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 50 },
            relu,
            LayerSpec::Dense { units: 1 },
            LayerSpec::Activation(Activation::Identity),
        ],
    )
}

/// Forward pass in chunks. Outputs are concatenated row-major, so a
/// single-output network yields one value per sample.
pub fn predict<T: Scalar>(net: &Network<T>, data: &dyn Samples<T>, chunk: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(data.len() * net.output_dim());
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let (x, _) = data.gather(c);
        let y = net.forward(x.view())?;
        out.extend(y.iter().copied());
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
