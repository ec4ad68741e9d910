//! Scaled unscented Kalman filter over a random-walk parameter state.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, RealField, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_STATE: usize = 3;
const N_SIGMA: usize = 2 * N_STATE + 1;
const JITTER: f64 = 1e-9;
const REFERENCE_SAMPLES_PER_CYCLE: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UkfConfig {
    /// Random-walk variance added per filter step.
    pub q_diag: [f64; N_STATE],
    /// Measurement-noise variance per measured channel.
    pub r_diag: Vec<f64>,
    pub alpha_sp: f64,
    pub beta_sp: f64,
    pub kappa_sp: f64,
    pub theta0: [f64; N_STATE],
    pub p0_diag: [f64; N_STATE],
}

impl Default for UkfConfig {
    fn default() -> Self {
        UkfConfig {
            q_diag: [1e-7; N_STATE],
            r_diag: vec![0.004 * 0.004; 16],
            alpha_sp: 1e-3,
            beta_sp: 2.0,
            kappa_sp: 0.0,
            theta0: [0.0; N_STATE],
            p0_diag: [1e-4; N_STATE],
        }
    }
}

impl UkfConfig {
    /// Measurement noise matched to a relative sensor noise level.
    pub fn with_relative_noise(sigma: f64) -> Self {
        UkfConfig { r_diag: vec![sigma * sigma; 16], ..Default::default() }
    }

    /// Relative measurement noise `sigma` with the default random-walk variance
    /// rescaled so the variance accumulated per flight cycle does not depend on
    /// the sampling density (the default is stated for 200 samples per cycle).
    pub fn for_sampling(sigma: f64, samples_per_cycle: usize) -> Self {
        let q = 1e-7 * REFERENCE_SAMPLES_PER_CYCLE / samples_per_cycle.max(1) as f64;
        UkfConfig { q_diag: [q; N_STATE], ..Self::with_relative_noise(sigma) }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &f64| *v > 0.0 && v.is_finite();
        if !self.q_diag.iter().all(positive) {
            return Err(Error::Config(format!("q_diag must be positive: {:?}", self.q_diag)));
        }
        if self.r_diag.is_empty() || !self.r_diag.iter().all(positive) {
            return Err(Error::Config("r_diag must be non-empty and positive".into()));
        }
        if !self.p0_diag.iter().all(positive) {
            return Err(Error::Config(format!("p0_diag must be positive: {:?}", self.p0_diag)));
        }
        if !(self.alpha_sp > 0.0) {
            return Err(Error::Config("alpha_sp must be positive".into()));
        }
        let n = N_STATE as f64;
        if !(self.alpha_sp * self.alpha_sp * (n + self.kappa_sp) > 0.0) {
            return Err(Error::Config("sigma-point spread n + lambda must be positive".into()));
        }
        Ok(())
    }

    /// Mean weights, covariance weights and the spread factor n + λ.
    pub fn sigma_weights(&self) -> ([f64; N_SIGMA], [f64; N_SIGMA], f64) {
        let n = N_STATE as f64;
        let a2 = self.alpha_sp * self.alpha_sp;
        let spread = a2 * (n + self.kappa_sp);
        let lambda = spread - n;
        let mut wm = [0.5 / spread; N_SIGMA];
        let mut wc = wm;
        wm[0] = lambda / spread;
        wc[0] = wm[0] + (1.0 - a2 + self.beta_sp);
        (wm, wc, spread)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UkfState<T: RealField + Copy> {
    pub theta_mean: Vector3<T>,
    pub theta_cov: Matrix3<T>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput<T> {
    /// Whitened innovation norm sqrt(νᵀ R⁻¹ ν).
    pub innovation_norm: T,
    /// True when the jitter retry was needed.
    pub jittered: bool,
}

#[derive(Debug, Clone)]
pub struct Ukf<T: RealField + Copy> {
    q: Matrix3<T>,
    r: DVector<T>,
    wm: [T; N_SIGMA],
    wc: [T; N_SIGMA],
    spread: T,
    theta0: Vector3<T>,
    p0: Matrix3<T>,
}

fn lit<T: RealField + Copy>(v: f64) -> T {
    nalgebra::convert(v)
}

pub fn ukf_init<T: RealField + Copy>(cfg: &UkfConfig) -> Result<UkfState<T>> {
    Ok(Ukf::<T>::new(cfg)?.init())
}

impl<T: RealField + Copy> Ukf<T> {
    pub fn new(cfg: &UkfConfig) -> Result<Self> {
        cfg.validate()?;
        let (wm, wc, spread) = cfg.sigma_weights();
        Ok(Ukf {
            q: Matrix3::from_diagonal(&Vector3::from(cfg.q_diag.map(lit))),
            r: DVector::from_iterator(cfg.r_diag.len(), cfg.r_diag.iter().map(|v| lit(*v))),
            wm: wm.map(lit),
            wc: wc.map(lit),
            spread: lit(spread),
            theta0: Vector3::from(cfg.theta0.map(lit)),
            p0: Matrix3::from_diagonal(&Vector3::from(cfg.p0_diag.map(lit))),
        })
    }

    pub fn init(&self) -> UkfState<T> {
        UkfState { theta_mean: self.theta0, theta_cov: self.p0, step: 0 }
    }

    pub fn measurement_dim(&self) -> usize {
        self.r.len()
    }

    /// Random-walk predict followed by the unscented update against `z`.
    pub fn step<F>(&self, state: &mut UkfState<T>, z: &DVector<T>, mut h: F) -> Result<StepOutput<T>>
    where
        F: FnMut(&Vector3<T>) -> Result<DVector<T>>,
    {
        let m_dim = self.r.len();
        if z.len() != m_dim {
            return Err(Error::Shape(format!("measurement length {} != {m_dim}", z.len())));
        }
        let step = state.step + 1;
        let mean = state.theta_mean;
        let cov = state.theta_cov + self.q;

        let mut jittered = false;
        let chol = match Cholesky::new(cov * self.spread) {
            Some(c) => c,
            None => {
                jittered = true;
                Cholesky::new((cov + Matrix3::identity() * lit::<T>(JITTER)) * self.spread)
                    .ok_or(Error::Cholesky { step })?
            }
        };
        let l = chol.l();

        let mut chi = [mean; N_SIGMA];
        for i in 0..N_STATE {
            let col = l.column(i).into_owned();
            chi[1 + i] = mean + col;
            chi[1 + N_STATE + i] = mean - col;
        }
        let mut ys = Vec::with_capacity(N_SIGMA);
        for x in &chi {
            let y = h(x)?;
            if y.len() != m_dim {
                return Err(Error::Shape(format!("model output length {} != {m_dim}", y.len())));
            }
            ys.push(y);
        }

        // weighted sums relative to the centre point keep the large opposite-sign
        // weights from cancelling catastrophically
        let mut y_mean = ys[0].clone();
        for i in 1..N_SIGMA {
            y_mean.axpy(self.wm[i], &(&ys[i] - &ys[0]), T::one());
        }
        let mut pyy = DMatrix::<T>::from_diagonal(&self.r);
        let mut pxy = DMatrix::<T>::zeros(N_STATE, m_dim);
        for i in 0..N_SIGMA {
            let dy = &ys[i] - &y_mean;
            let dx = chi[i] - mean;
            pyy.ger(self.wc[i], &dy, &dy, T::one());
            let dx = DVector::from_column_slice(dx.as_slice());
            pxy.ger(self.wc[i], &dx, &dy, T::one());
        }
        let s_chol = match Cholesky::new(pyy.clone()) {
            Some(c) => c,
            None => {
                jittered = true;
                let eye = DMatrix::<T>::identity(m_dim, m_dim) * lit::<T>(JITTER);
                Cholesky::new(pyy.clone() + eye).ok_or(Error::Cholesky { step })?
            }
        };
        // K = Pxy S⁻¹, solved as S Kᵀ = Pxyᵀ
        let k = s_chol.solve(&pxy.transpose()).transpose();
        let nu = z - &y_mean;
        let dm = &k * &nu;
        let new_mean = mean + Vector3::new(dm[0], dm[1], dm[2]);
        let ksk = &k * &pyy * k.transpose();
        let mut new_cov = cov;
        for r in 0..N_STATE {
            for c in 0..N_STATE {
                new_cov[(r, c)] -= ksk[(r, c)];
            }
        }
        let half: T = lit(0.5);
        new_cov = (new_cov + new_cov.transpose()) * half;

        let mut q = T::zero();
        for i in 0..m_dim {
            q += nu[i] * nu[i] / self.r[i];
        }
        if !new_mean.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite filter mean at step {step}")));
        }
        *state = UkfState { theta_mean: new_mean, theta_cov: new_cov, step };
        Ok(StepOutput { innovation_norm: q.sqrt(), jittered })
    }
}
