//! Learned one-step response model x̂(t) = D(w(t), x̂(t−1), θ(t)).

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CalibratedTrace, Response, ResponseModel};
use crate::engine::{isa_ambient, ram_conditions, HealthState, OperatingPoint};
use crate::error::{Error, Result};
use crate::fleet::UnitRecord;
use crate::nnet::{dense_stack, read_network, train, write_network, Network, Samples, TrainConfig};

pub const SURROGATE_INPUTS: usize = 4 + 27 + 3;
const OUTPUTS: usize = 27;
const MIN_TUPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Fraction held out for the reported relative error.
    pub holdout_frac: f64,
    /// Fraction used for early stopping.
    pub val_frac: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            hidden: vec![64, 64],
            train: TrainConfig {
                batch_size: 128,
                lr: 2e-3,
                max_epochs: 80,
                patience: 10,
                seed: 17,
                target_scale: 1.0,
            },
            holdout_frac: 0.1,
            val_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Scaling {
    in_min: Vec<f64>,
    in_max: Vec<f64>,
    out_min: Vec<f64>,
    out_max: Vec<f64>,
    cold_start: Vec<f64>,
    /// Least-squares linear map (inputs plus bias, row-major by input) that
    /// the network corrects.
    linear: Vec<f64>,
    /// Per-output spread of the linear-fit residual.
    residual_scale: Vec<f64>,
}

impl Scaling {
    fn linear_part(&self, x: &[f64], k: usize) -> f64 {
        let mut acc = self.linear[SURROGATE_INPUTS * OUTPUTS + k];
        for (j, v) in x.iter().enumerate() {
            acc += v * self.linear[j * OUTPUTS + k];
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    net: Network<f64>,
    scaling: Scaling,
    /// Mean relative error per output channel on the held-out split.
    pub heldout_rel_error: Vec<f64>,
}

fn concat(r: &Response<f64>) -> [f64; OUTPUTS] {
    let mut o = [0.0; OUTPUTS];
    o[..16].copy_from_slice(&r.xs);
    o[16..].copy_from_slice(&r.xv);
    o
}

fn split(v: &[f64]) -> Response<f64> {
    let mut xs = [0.0; 16];
    let mut xv = [0.0; 11];
    xs.copy_from_slice(&v[..16]);
    xv.copy_from_slice(&v[16..OUTPUTS]);
    Response { xs, xv }
}

fn raw_input(w: &OperatingPoint<f64>, prev: &[f64; OUTPUTS], theta: &[f64; 3]) -> Result<[f64; SURROGATE_INPUTS]> {
    let mut x = [0.0; SURROGATE_INPUTS];
    // w enters through the inlet state it implies: (ln P2, ln T2, mach, tra)
    let (t_amb, p_amb) = isa_ambient(w.alt)?;
    let (_, p2) = ram_conditions(t_amb, p_amb, w.mach)?;
    x[..4].copy_from_slice(&[p2.ln(), w.t2.ln(), w.mach, w.tra]);
    for (k, v) in prev.iter().enumerate() {
        if !(*v > 0.0) {
            return Err(Error::ModelRange(format!("non-positive response channel {k}: {v}")));
        }
        x[4 + k] = v.ln();
    }
    x[31..].copy_from_slice(theta);
    Ok(x)
}

fn scale_to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 }
}

fn unscale(v: f64, lo: f64, hi: f64) -> f64 {
    (v + 1.0) * 0.5 * (hi - lo) + lo
}

struct Tuples<'a> {
    x: &'a Array2<f64>,
    y: &'a Array2<f64>,
    idx: Vec<usize>,
}

impl Samples<f64> for Tuples<'_> {
    fn len(&self) -> usize {
        self.idx.len()
    }

    fn gather(&self, idx: &[usize]) -> (Array2<f64>, Array1<f64>) {
        let mut x = Array2::zeros((idx.len(), self.x.ncols()));
        let mut y = Vec::with_capacity(idx.len() * OUTPUTS);
        for (k, &i) in idx.iter().enumerate() {
            let r = self.idx[i];
            x.row_mut(k).assign(&self.x.row(r));
            y.extend(self.y.row(r).iter().copied());
        }
        (x, Array1::from(y))
    }
}

/// Regresses the next calibrated response on (w, previous response, θ̂).
pub fn fit_surrogate(data: &[(&UnitRecord, &CalibratedTrace)], cfg: &SurrogateConfig) -> Result<SurrogateModel> {
    let mut xs: Vec<[f64; SURROGATE_INPUTS]> = Vec::new();
    let mut ys: Vec<[f64; OUTPUTS]> = Vec::new();
    for (unit, trace) in data {
        if trace.len() != unit.n_samples() {
            return Err(Error::Shape(format!("trace/unit length mismatch for unit {}", unit.unit_id)));
        }
        let resp: Vec<[f64; OUTPUTS]> = (0..trace.len())
            .map(|i| concat(&Response { xs: trace.xs_hat[i], xv: trace.xv_hat[i] }))
            .collect();
        for (i, (_, _, s)) in unit.iter_samples().enumerate().skip(1) {
            xs.push(raw_input(&s.w, &resp[i - 1], &trace.theta_hat[i])?);
            let mut y = resp[i];
            for v in y.iter_mut() {
                *v = v.ln();
            }
            ys.push(y);
        }
    }
    if xs.len() < MIN_TUPLES {
        return Err(Error::Config(format!(
            "{} transition tuples; the surrogate needs at least {MIN_TUPLES}",
            xs.len()
        )));
    }
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5117));
    let n_hold = ((n as f64) * cfg.holdout_frac).round() as usize;
    let n_val = ((n as f64) * cfg.val_frac).round().max(1.0) as usize;
    let hold = order[..n_hold].to_vec();
    let val = order[n_hold..n_hold + n_val].to_vec();
    let fit = order[n_hold + n_val..].to_vec();

    let minmax = |rows: &dyn Fn(usize) -> Vec<f64>, dim: usize| {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &fit {
            for (k, v) in rows(i).into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        (lo, hi)
    };
    let (in_min, in_max) = minmax(&|i| xs[i].to_vec(), SURROGATE_INPUTS);
    let (out_min, out_max) = minmax(&|i| ys[i].to_vec(), OUTPUTS);
    let mut cold = [0.0; OUTPUTS];
    for &i in &fit {
        for k in 0..OUTPUTS {
            cold[k] += ys[i][k];
        }
    }
    let cold_start = cold.iter().map(|s| (s / fit.len() as f64).exp()).collect();
    let mut scaling = Scaling {
        in_min,
        in_max,
        out_min,
        out_max,
        cold_start,
        linear: Vec::new(),
        residual_scale: Vec::new(),
    };

    let x = Array2::from_shape_fn((n, SURROGATE_INPUTS), |(r, k)| {
        scale_to_unit(xs[r][k], scaling.in_min[k], scaling.in_max[k])
    });
    let y_lin = Array2::from_shape_fn((n, OUTPUTS), |(r, k)| {
        scale_to_unit(ys[r][k], scaling.out_min[k], scaling.out_max[k])
    });
    scaling.linear = ridge_fit(&x, &y_lin, &fit)?;
    let mut y = Array2::from_shape_fn((n, OUTPUTS), |(r, k)| {
        y_lin[(r, k)] - scaling.linear_part(x.row(r).as_slice().unwrap(), k)
    });
    scaling.residual_scale = (0..OUTPUTS)
        .map(|k| {
            let ss: f64 = fit.iter().map(|&r| y[(r, k)] * y[(r, k)]).sum();
            (ss / fit.len() as f64).sqrt().max(1e-12)
        })
        .collect();
    for ((_, k), v) in y.indexed_iter_mut() {
        *v /= scaling.residual_scale[k];
    }
    let set = |idx: Vec<usize>| Tuples { x: &x, y: &y, idx };
    let (fit_set, val_set, hold_set) = (set(fit), set(val), set(hold));

    let net = dense_stack::<f64>(SURROGATE_INPUTS, &cfg.hidden, OUTPUTS)?;
    let (net, log) = train(net, &fit_set, &val_set, &cfg.train)?;
    log::info!(
        "surrogate: {} tuples, best epoch {} val rmse {:.4}",
        n,
        log.best_epoch,
        log.best_val_rmse
    );
    let mut model = SurrogateModel { net, scaling, heldout_rel_error: vec![0.0; OUTPUTS] };
    if !hold_set.idx.is_empty() {
        let mut err = vec![0.0; OUTPUTS];
        for &r in &hold_set.idx {
            let pred = model.forward_row(x.row(r).as_slice().unwrap())?;
            for k in 0..OUTPUTS {
                let truth = ys[r][k].exp();
                err[k] += ((pred[k] - truth) / truth).abs();
            }
        }
        model.heldout_rel_error = err.iter().map(|e| e / hold_set.idx.len() as f64).collect();
    }
    Ok(model)
}

/// Ridge-regularized least squares of `y` on `[x, 1]` over the given rows.
fn ridge_fit(x: &Array2<f64>, y: &Array2<f64>, rows: &[usize]) -> Result<Vec<f64>> {
    let d = SURROGATE_INPUTS + 1;
    let mut ata = DMatrix::<f64>::zeros(d, d);
    let mut aty = DMatrix::<f64>::zeros(d, OUTPUTS);
    let mut a = vec![1.0; d];
    for &r in rows {
        a[..SURROGATE_INPUTS].copy_from_slice(x.row(r).as_slice().unwrap());
        for i in 0..d {
            for j in 0..d {
                ata[(i, j)] += a[i] * a[j];
            }
            for k in 0..OUTPUTS {
                aty[(i, k)] += a[i] * y[(r, k)];
            }
        }
    }
    for i in 0..d {
        ata[(i, i)] += 1e-8 * rows.len() as f64;
    }
    let chol = Cholesky::new(ata).ok_or_else(|| Error::Numeric("singular surrogate design".into()))?;
    let b = chol.solve(&aty);
    let mut out = vec![0.0; d * OUTPUTS];
    for i in 0..d {
        for k in 0..OUTPUTS {
            out[i * OUTPUTS + k] = b[(i, k)];
        }
    }
    Ok(out)
}

impl SurrogateModel {
    fn forward_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = Array2::from_shape_vec((1, SURROGATE_INPUTS), x.to_vec()).expect("row shape");
        let y = self.net.forward(row.view())?;
        let s = &self.scaling;
        Ok(y.iter()
            .enumerate()
            .map(|(k, v)| {
                let norm = s.linear_part(x, k) + v * s.residual_scale[k];
                unscale(norm, s.out_min[k], s.out_max[k]).exp()
            })
            .collect())
    }

    pub fn network(&self) -> &Network<f64> {
        &self.net
    }

    /// One step of the learned dynamics.
    pub fn step(&self, w: &OperatingPoint<f64>, prev: &Response<f64>, theta: &[f64; 3]) -> Result<Response<f64>> {
        let raw = raw_input(w, &concat(prev), theta)?;
        let s = &self.scaling;
        let x: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(k, v)| scale_to_unit(*v, s.in_min[k], s.in_max[k]))
            .collect();
        Ok(split(&self.forward_row(&x)?))
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({
            "scaling": self.scaling,
            "heldout_rel_error": self.heldout_rel_error,
        });
        write_network(&self.net, meta, w)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let (net, header) = read_network::<f64, R>(r)?;
        let scaling: Scaling = serde_json::from_value(header.meta["scaling"].clone())?;
        let heldout_rel_error = serde_json::from_value(header.meta["heldout_rel_error"].clone())?;
        Ok(SurrogateModel { net, scaling, heldout_rel_error })
    }
}

impl ResponseModel<f64> for SurrogateModel {
    fn respond(&self, w: &OperatingPoint<f64>, prev: &Response<f64>, theta: &HealthState<f64>) -> Result<Response<f64>> {
        self.step(w, prev, &theta.to_array())
    }

    fn cold_start(&self, _: &OperatingPoint<f64>) -> Result<Response<f64>> {
        Ok(split(&self.scaling.cold_start))
    }
}
