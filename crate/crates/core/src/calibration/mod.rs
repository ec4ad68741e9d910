//! Sample-by-sample inference of the health modifiers from sensor streams,
//! calibrated model responses, and θ̂ perturbations for robustness studies.

mod perturb;
mod surrogate;
mod ukf;

use nalgebra::{DVector, RealField, Vector3};

use crate::engine::{evaluate_model_relaxed, reference_health, HealthState, OperatingPoint};
use crate::error::{Error, Result};
use crate::fleet::UnitRecord;
use crate::scalar::Scalar;

pub use perturb::{inject_bias, inject_noise};
pub use surrogate::{fit_surrogate, SurrogateConfig, SurrogateModel, SURROGATE_INPUTS};
pub use ukf::{ukf_init, StepOutput, Ukf, UkfConfig, UkfState, N_STATE};

/// Model outputs at one sample: measured then virtual channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response<T> {
    pub xs: [T; 16],
    pub xv: [T; 11],
}

/// Anything that maps (w, previous response, θ) to a response: the exact
/// gas-path model or a learned one-step surrogate of it.
pub trait ResponseModel<T>: Sync {
    fn respond(&self, w: &OperatingPoint<T>, prev: &Response<T>, theta: &HealthState<T>)
        -> Result<Response<T>>;

    /// Response used as the "previous" one before the first sample.
    fn cold_start(&self, w: &OperatingPoint<T>) -> Result<Response<T>>;
}

/// The analytic model; ignores the previous response.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactModel;

impl<T: Scalar> ResponseModel<T> for ExactModel {
    fn respond(&self, w: &OperatingPoint<T>, _: &Response<T>, theta: &HealthState<T>) -> Result<Response<T>> {
        let (xs, xv) = evaluate_model_relaxed(w, theta)?;
        Ok(Response { xs: xs.to_array(), xv: xv.to_array() })
    }

    fn cold_start(&self, w: &OperatingPoint<T>) -> Result<Response<T>> {
        let (xs, xv) = evaluate_model_relaxed(w, &reference_health())?;
        Ok(Response { xs: xs.to_array(), xv: xv.to_array() })
    }
}

/// Per-sample calibration output for one unit, in time order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibratedTrace {
    pub unit_id: u32,
    pub theta_hat: Vec<[f64; 3]>,
    pub xs_hat: Vec<[f64; 16]>,
    pub xv_hat: Vec<[f64; 11]>,
    /// Posterior variance diagonal after each step.
    pub theta_var: Vec<[f64; 3]>,
    pub innovation_norm: Vec<f64>,
    /// Set where the emitted θ̂ had to be projected onto the valid box.
    pub clamped: Vec<bool>,
    pub burn_in: usize,
}

impl CalibratedTrace {
    pub fn len(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_hat.is_empty()
    }

    /// Perfect calibration: the true θ and noise-free model responses.
    pub fn ground_truth(unit: &UnitRecord) -> Self {
        let n = unit.n_samples();
        let mut t = CalibratedTrace { unit_id: unit.unit_id, ..Default::default() };
        t.theta_hat.reserve(n);
        for (_, th, s) in unit.iter_samples() {
            t.theta_hat.push(th.to_array());
            t.xs_hat.push(s.xs_true.to_array());
            t.xv_hat.push(s.xv_true.to_array());
            t.theta_var.push([0.0; 3]);
            t.innovation_norm.push(0.0);
            t.clamped.push(false);
        }
        t
    }

    /// Copy with θ̂ replaced, e.g. by a perturbed series.
    pub fn with_theta(&self, theta_hat: Vec<[f64; 3]>) -> Result<Self> {
        if theta_hat.len() != self.len() {
            return Err(Error::Shape(format!(
                "theta series length {} != trace length {}",
                theta_hat.len(),
                self.len()
            )));
        }
        Ok(CalibratedTrace { theta_hat, ..self.clone() })
    }
}

fn to_t<T: Scalar, const N: usize>(a: [f64; N]) -> [T; N] {
    a.map(T::lit)
}

fn to_f64<T: Scalar, const N: usize>(a: [T; N]) -> [f64; N] {
    a.map(|v| v.as_f64())
}

/// Runs the filter over every sample of a unit, carrying the state across
/// flight cycles. Measurements are normalized by the model response at
/// reference health, so R is expressed in relative terms.
pub fn calibrate_trajectory<T, M>(
    unit: &UnitRecord,
    model: &M,
    cfg: &UkfConfig,
    burn_in: usize,
) -> Result<CalibratedTrace>
where
    T: Scalar + RealField,
    M: ResponseModel<T> + ?Sized,
{
    if unit.cycles.is_empty() || unit.n_samples() == 0 {
        return Err(Error::Config(format!("unit {} has no samples", unit.unit_id)));
    }
    if cfg.r_diag.len() != 16 {
        return Err(Error::Config(format!("r_diag needs 16 entries, got {}", cfg.r_diag.len())));
    }
    let ukf = Ukf::<T>::new(cfg)?;
    let mut state = ukf.init();
    let n = unit.n_samples();
    let mut out = CalibratedTrace { unit_id: unit.unit_id, burn_in, ..Default::default() };
    out.theta_hat.reserve(n);
    let theta_ref = reference_health::<T>();

    let first = unit.cycles[0].samples[0].w.cast::<T>();
    let mut prev = model.cold_start(&first)?;
    let mut n_jitter = 0usize;
    for (_, _, s) in unit.iter_samples() {
        let w = s.w.cast::<T>();
        let reference = model.respond(&w, &prev, &theta_ref)?.xs;
        let obs: [T; 16] = to_t(s.xs_noisy.to_array());
        let z = DVector::from_iterator(16, obs.iter().zip(&reference).map(|(o, r)| *o / *r));
        let h = |th: &Vector3<T>| -> Result<DVector<T>> {
            let resp = model.respond(&w, &prev, &HealthState::new(th[0], th[1], th[2]))?;
            Ok(DVector::from_iterator(16, resp.xs.iter().zip(&reference).map(|(v, r)| *v / *r)))
        };
        let step = ukf.step(&mut state, &z, h).map_err(|e| match e {
            Error::Cholesky { step } => {
                log::error!("unit {}: covariance factorisation failed at step {step}", unit.unit_id);
                e
            }
            other => other,
        })?;
        n_jitter += step.jittered as usize;
        let m = state.theta_mean;
        let (theta_c, moved) = HealthState::new(m[0], m[1], m[2]).clamped();
        let resp = model.respond(&w, &prev, &theta_c)?;
        out.theta_hat.push(to_f64(theta_c.to_array()));
        out.xs_hat.push(to_f64(resp.xs));
        out.xv_hat.push(to_f64(resp.xv));
        let d = state.theta_cov.diagonal();
        out.theta_var.push([d[0].as_f64(), d[1].as_f64(), d[2].as_f64()]);
        out.innovation_norm.push(step.innovation_norm.as_f64());
        out.clamped.push(moved);
        prev = resp;
    }
    let n_clamped = out.clamped.iter().filter(|c| **c).count();
    if n_clamped > 0 {
        log::info!("unit {}: θ̂ clamped to the valid box at {n_clamped} of {n} samples", unit.unit_id);
    }
    if n_jitter > 0 {
        log::warn!("unit {}: covariance jitter applied at {n_jitter} steps", unit.unit_id);
    }
    Ok(out)
}

/// Per-component RMSE of θ̂ against the ground truth after `burn_in` samples.
pub fn theta_rmse(trace: &CalibratedTrace, unit: &UnitRecord, burn_in: usize) -> Result<[f64; 3]> {
    if trace.len() != unit.n_samples() {
        return Err(Error::Shape(format!(
            "trace length {} != unit {} samples {}",
            trace.len(),
            unit.unit_id,
            unit.n_samples()
        )));
    }
    let mut ss = [0.0; 3];
    let mut n = 0.0;
    for (i, (_, th, _)) in unit.iter_samples().enumerate().skip(burn_in) {
        let truth = th.to_array();
        for k in 0..3 {
            let d = trace.theta_hat[i][k] - truth[k];
            ss[k] += d * d;
        }
        n += 1.0;
    }
    if n == 0.0 {
        return Err(Error::Config("burn-in covers the whole trace".into()));
    }
    Ok(ss.map(|s| (s / n).sqrt()))
}

/// Fraction of post-burn-in steps whose true θ lies within ±z posterior
/// standard deviations, per component.
pub fn credible_coverage(trace: &CalibratedTrace, unit: &UnitRecord, burn_in: usize, z: f64) -> [f64; 3] {
    let mut hit = [0usize; 3];
    let mut n = 0usize;
    for (i, (_, th, _)) in unit.iter_samples().enumerate().skip(burn_in) {
        let truth = th.to_array();
        for k in 0..3 {
            let half = z * trace.theta_var[i][k].max(0.0).sqrt();
            if (trace.theta_hat[i][k] - truth[k]).abs() <= half {
                hit[k] += 1;
            }
        }
        n += 1;
    }
    hit.map(|h| h as f64 / n.max(1) as f64)
}
