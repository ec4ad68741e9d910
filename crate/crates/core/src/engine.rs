//! Simplified two-spool turbofan gas-path model.
//!
//! Station chain: ISA ambient, ram recovery, fan / LPC / HPC compression with
//! throttle-scheduled pressure ratios, a scheduled burner temperature rise,
//! fixed-ratio HPT / LPT expansion, and corrected-flow scaling for the mass
//! flows. Health modifiers shift the compressor operating lines, scale the
//! turbine efficiencies and the LPT flow capacity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const T_SL: f64 = 518.67;
pub const P_SL: f64 = 14.696;
pub const ALT_TROPOPAUSE: f64 = 36089.0;
const LAPSE: f64 = 0.0035662;
const T_TROPOPAUSE: f64 = 389.97;
const P_EXPONENT: f64 = 5.2559;
const SCALE_HEIGHT: f64 = 20806.0;

pub const ALT_MAX: f64 = 45000.0;
pub const MACH_MAX: f64 = 0.9;
pub const THETA_MIN: f64 = -0.2;

const GAMMA_COLD: f64 = 1.4;
const GAMMA_HOT: f64 = 1.33;

const K_FAN: f64 = 0.6;
const K_LPC: f64 = 1.2;
const K_HPC: f64 = 8.0;

pub const ETA_FAN: f64 = 0.89;
pub const ETA_LPC: f64 = 0.88;
pub const ETA_HPC: f64 = 0.87;
pub const ETA_HPT: f64 = 0.90;
pub const ETA_LPT: f64 = 0.91;

/// Choke pressure ratio sits this far above the full-throttle ratio at
/// reference health.
const CHOKE_MARGIN: f64 = 1.15;

const BYPASS_RATIO: f64 = 5.0;
const W_REF: f64 = 300.0;
const FUEL_HEATING: f64 = 18400.0;
const CP_GAS: f64 = 0.24;

pub const W_NAMES: [&str; 4] = ["alt", "mach", "tra", "T2"];
pub const SENSOR_NAMES: [&str; 16] = [
    "Wf", "Nf", "Nc", "T24", "T30", "T40", "T48", "T50", "P15", "P2", "P21", "P24", "Ps30", "P30",
    "P40", "P50",
];
pub const VIRTUAL_NAMES: [&str; 11] = [
    "P45", "W21", "W22", "W25", "W31", "W32", "W48", "W50", "SmFan", "SmLPC", "SmHPC",
];
pub const THETA_NAMES: [&str; 3] = ["hpt_eff_mod", "lpt_eff_mod", "lpt_flow_mod"];

/// Standard-atmosphere static temperature (°R) and pressure (psia).
pub fn isa_ambient<T: Scalar>(alt: T) -> Result<(T, T)> {
    let a = alt.as_f64();
    if !(0.0..=ALT_MAX).contains(&a) {
        return Err(Error::Domain(format!("altitude {a} ft outside [0, {ALT_MAX}]")));
    }
    let t_sl = T::lit(T_SL);
    let p_sl = T::lit(P_SL);
    let trop = T::lit(ALT_TROPOPAUSE);
    if alt <= trop {
        let t = t_sl - T::lit(LAPSE) * alt;
        let p = p_sl * (t / t_sl).powf(T::lit(P_EXPONENT));
        Ok((t, p))
    } else {
        let t = T::lit(T_TROPOPAUSE);
        let t_trop = t_sl - T::lit(LAPSE) * trop;
        let p_trop = p_sl * (t_trop / t_sl).powf(T::lit(P_EXPONENT));
        Ok((t, p_trop * (-(alt - trop) / T::lit(SCALE_HEIGHT)).exp()))
    }
}

/// Total temperature and pressure after isentropic ram recovery.
pub fn ram_conditions<T: Scalar>(t_amb: T, p_amb: T, mach: T) -> Result<(T, T)> {
    if !(mach >= T::zero()) {
        return Err(Error::Domain(format!("negative mach {mach}")));
    }
    let f = T::one() + T::lit(0.2) * mach * mach;
    Ok((t_amb * f, p_amb * f.powf(T::lit(3.5))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint<T> {
    pub alt: T,
    pub mach: T,
    pub tra: T,
    pub t2: T,
}

impl<T: Scalar> OperatingPoint<T> {
    /// Builds a point with `t2` from the ram relation.
    pub fn new(alt: T, mach: T, tra: T) -> Result<Self> {
        let w = OperatingPoint { alt, mach, tra, t2: T::zero() };
        w.check_box()?;
        let (t_amb, p_amb) = isa_ambient(alt)?;
        let (t2, _) = ram_conditions(t_amb, p_amb, mach)?;
        Ok(OperatingPoint { t2, ..w })
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.alt, self.mach, self.tra, self.t2]
    }

    pub fn cast<U: Scalar>(&self) -> OperatingPoint<U> {
        OperatingPoint {
            alt: U::lit(self.alt.as_f64()),
            mach: U::lit(self.mach.as_f64()),
            tra: U::lit(self.tra.as_f64()),
            t2: U::lit(self.t2.as_f64()),
        }
    }

    fn check_box(&self) -> Result<()> {
        let (alt, mach, tra) = (self.alt.as_f64(), self.mach.as_f64(), self.tra.as_f64());
        if !(0.0..=ALT_MAX).contains(&alt) {
            return Err(Error::Domain(format!("altitude {alt} outside [0, {ALT_MAX}]")));
        }
        if !(0.0..=MACH_MAX).contains(&mach) {
            return Err(Error::Domain(format!("mach {mach} outside [0, {MACH_MAX}]")));
        }
        if !(0.0..=100.0).contains(&tra) {
            return Err(Error::Domain(format!("tra {tra} outside [0, 100]")));
        }
        Ok(())
    }

    /// Checks the box and the ram consistency of `t2`.
    pub fn validate(&self) -> Result<()> {
        self.check_box()?;
        let (t_amb, p_amb) = isa_ambient(self.alt)?;
        let (t2, _) = ram_conditions(t_amb, p_amb, self.mach)?;
        let tol = 1e-9f64.max(16.0 * T::epsilon().as_f64() * t2.as_f64());
        if !((self.t2 - t2).abs().as_f64() <= tol) {
            return Err(Error::Domain(format!(
                "t2 {} inconsistent with ram relation ({})",
                self.t2, t2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HealthState<T> {
    pub hpt_eff_mod: T,
    pub lpt_eff_mod: T,
    pub lpt_flow_mod: T,
}

impl<T: Scalar> HealthState<T> {
    pub fn new(hpt_eff_mod: T, lpt_eff_mod: T, lpt_flow_mod: T) -> Self {
        HealthState { hpt_eff_mod, lpt_eff_mod, lpt_flow_mod }
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.hpt_eff_mod, self.lpt_eff_mod, self.lpt_flow_mod]
    }

    pub fn validate(&self) -> Result<()> {
        for (v, name) in self.to_array().iter().zip(THETA_NAMES) {
            let v = v.as_f64();
            if !(THETA_MIN..=0.0).contains(&v) {
                return Err(Error::Domain(format!("{name} = {v} outside [{THETA_MIN}, 0]")));
            }
        }
        Ok(())
    }

    /// Projects every modifier onto the valid box. Returns whether anything moved.
    pub fn clamped(&self) -> (Self, bool) {
        let lo = T::lit(THETA_MIN);
        let mut moved = false;
        let a = self.to_array().map(|v| {
            let c = v.max(lo).min(T::zero());
            moved |= c != v;
            c
        });
        (Self::from_array(a), moved)
    }
}

/// The non-degraded reference unit.
pub fn reference_health<T: Scalar>() -> HealthState<T> {
    HealthState::new(T::zero(), T::zero(), T::zero())
}

/// Measured gas-path signals: fuel flow (pps), spool speeds (rpm),
/// temperatures (°R) and pressures (psia).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame<T> {
    pub wf: T,
    pub nf: T,
    pub nc: T,
    pub t24: T,
    pub t30: T,
    pub t40: T,
    pub t48: T,
    pub t50: T,
    pub p15: T,
    pub p2: T,
    pub p21: T,
    pub p24: T,
    pub ps30: T,
    pub p30: T,
    pub p40: T,
    pub p50: T,
}

impl<T: Scalar> SensorFrame<T> {
    pub fn to_array(&self) -> [T; 16] {
        [
            self.wf, self.nf, self.nc, self.t24, self.t30, self.t40, self.t48, self.t50,
            self.p15, self.p2, self.p21, self.p24, self.ps30, self.p30, self.p40, self.p50,
        ]
    }

    pub fn from_array(a: [T; 16]) -> Self {
        SensorFrame {
            wf: a[0],
            nf: a[1],
            nc: a[2],
            t24: a[3],
            t30: a[4],
            t40: a[5],
            t48: a[6],
            t50: a[7],
            p15: a[8],
            p2: a[9],
            p21: a[10],
            p24: a[11],
            ps30: a[12],
            p30: a[13],
            p40: a[14],
            p50: a[15],
        }
    }
}

/// Unmeasured quantities: P45 (psia), flows (pps), stall margins (%).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualFrame<T> {
    pub p45: T,
    pub w21: T,
    pub w22: T,
    pub w25: T,
    pub w31: T,
    pub w32: T,
    pub w48: T,
    pub w50: T,
    pub sm_fan: T,
    pub sm_lpc: T,
    pub sm_hpc: T,
}

impl<T: Scalar> VirtualFrame<T> {
    pub fn to_array(&self) -> [T; 11] {
        [
            self.p45, self.w21, self.w22, self.w25, self.w31, self.w32, self.w48, self.w50,
            self.sm_fan, self.sm_lpc, self.sm_hpc,
        ]
    }

    pub fn from_array(a: [T; 11]) -> Self {
        VirtualFrame {
            p45: a[0],
            w21: a[1],
            w22: a[2],
            w25: a[3],
            w31: a[4],
            w32: a[5],
            w48: a[6],
            w50: a[7],
            sm_fan: a[8],
            sm_lpc: a[9],
            sm_hpc: a[10],
        }
    }
}

/// Evaluates the gas-path chain at a validated operating point and health state.
pub fn evaluate_model<T: Scalar>(
    w: &OperatingPoint<T>,
    theta: &HealthState<T>,
) -> Result<(SensorFrame<T>, VirtualFrame<T>)> {
    w.validate()?;
    theta.validate()?;
    chain(w, theta)
}

/// Same chain without the validity-box checks on `theta`; used at filter sigma
/// points, which may step slightly outside the box. Operating point is still
/// checked and non-physical intermediates still fail.
pub fn evaluate_model_relaxed<T: Scalar>(
    w: &OperatingPoint<T>,
    theta: &HealthState<T>,
) -> Result<(SensorFrame<T>, VirtualFrame<T>)> {
    w.validate()?;
    if theta.to_array().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite health state {theta:?}")));
    }
    chain(w, theta)
}

fn positive<T: Scalar>(v: T, what: &str) -> Result<T> {
    if v > T::zero() && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::ModelRange(format!("{what} = {v}")))
    }
}

/// Outlet temperature ratio of a compressor stage.
fn compress<T: Scalar>(pr: T, eta: T, gamma: f64) -> T {
    let k = T::lit((gamma - 1.0) / gamma);
    T::one() + (pr.powf(k) - T::one()) / eta
}

/// Outlet temperature ratio of a turbine stage.
fn expand<T: Scalar>(er: T, eta: T, gamma: f64) -> T {
    let k = T::lit((gamma - 1.0) / gamma);
    T::one() - eta * (T::one() - er.powf(-k))
}

fn chain<T: Scalar>(
    w: &OperatingPoint<T>,
    theta: &HealthState<T>,
) -> Result<(SensorFrame<T>, VirtualFrame<T>)> {
    let one = T::one();
    let c = T::lit;
    let (he, le, lf) = (theta.hpt_eff_mod, theta.lpt_eff_mod, theta.lpt_flow_mod);

    let (t_amb, p_amb) = isa_ambient(w.alt)?;
    let (_, p2) = ram_conditions(t_amb, p_amb, w.mach)?;
    let t2 = w.t2;

    let throttle = w.tra / c(100.0);
    let s = c(0.3) + c(0.7) * throttle;

    let pr_fan_s = one + c(K_FAN) * s;
    let pr_lpc_s = one + c(K_LPC) * s;
    let pr_hpc_s = one + c(K_HPC) * s;
    let pr_fan = positive(pr_fan_s * (one - c(0.05) * le - c(0.05) * lf), "fan pressure ratio")?;
    let pr_lpc = positive(pr_lpc_s * (one - c(0.1) * le - c(0.15) * lf), "LPC pressure ratio")?;
    let pr_hpc = positive(pr_hpc_s * (one - c(0.3) * he - c(0.1) * lf), "HPC pressure ratio")?;

    let t21 = positive(t2 * compress(pr_fan, c(ETA_FAN), GAMMA_COLD), "T21")?;
    let p21 = p2 * pr_fan;
    let p15 = c(0.985) * p21;
    let t24 = positive(t21 * compress(pr_lpc, c(ETA_LPC), GAMMA_COLD), "T24")?;
    let p24 = p21 * pr_lpc;
    let t30 = positive(t24 * compress(pr_hpc, c(ETA_HPC), GAMMA_COLD), "T30")?;
    let p30 = p24 * pr_hpc;
    let ps30 = c(0.93) * p30;

    let t40 = t30 + c(600.0) + c(1200.0) * s;
    let p40 = c(0.95) * p30;

    let er_hpt = positive(pr_hpc_s.powf(c(0.55)) * (one + c(0.8) * lf), "HPT expansion ratio")?;
    let eta_hpt = c(ETA_HPT) * (one + he);
    let t48 = positive(t40 * expand(er_hpt, eta_hpt, GAMMA_HOT), "T48")?;
    let p45 = p40 / er_hpt;

    let er_lpt = (pr_fan_s * pr_lpc_s).powf(c(0.8));
    let eta_lpt = c(ETA_LPT) * (one + le);
    let t50 = positive(t48 * expand(er_lpt, eta_lpt, GAMMA_HOT), "T50")?;
    let p50 = p45 / er_lpt;

    let ram = (t2 / c(T_SL)).sqrt();
    let nf = (c(1400.0) + c(1000.0) * throttle) * ram;
    let nc = (c(7000.0) + c(2500.0) * throttle) * ram * (one - c(0.1) * he);

    let w21 = c(W_REF) * (p2 / c(P_SL)) * (c(T_SL) / t2).sqrt() * (c(0.6) + c(0.4) * s);
    let w22 = w21 / (one + c(BYPASS_RATIO));
    let w25 = c(0.99) * w22;
    let w31 = c(0.03) * w25;
    let w32 = c(0.02) * w25;
    let w48 = positive(c(0.98) * w25 * (one + lf), "W48")?;
    let w50 = w48 + w32;
    let wf = w25 * c(CP_GAS) * (t40 - t30) / c(FUEL_HEATING);

    let hundred = c(100.0);
    // the choke line is fixed, so margins open up at part throttle
    let sm = |k: f64, actual: T| hundred * (c(CHOKE_MARGIN * (1.0 + k)) / actual - one);

    let xs = SensorFrame {
        wf,
        nf,
        nc,
        t24,
        t30,
        t40,
        t48,
        t50,
        p15,
        p2,
        p21,
        p24,
        ps30,
        p30,
        p40,
        p50,
    };
    let xv = VirtualFrame {
        p45,
        w21,
        w22,
        w25,
        w31,
        w32,
        w48,
        w50,
        sm_fan: sm(K_FAN, pr_fan),
        sm_lpc: sm(K_LPC, pr_lpc),
        sm_hpc: sm(K_HPC, pr_hpc),
    };
    Ok((xs, xv))
}

/// Deterministic pinned (w, θ) pairs covering the operating envelope and the
/// health box; used for the frozen golden file.
pub fn pinned_pairs() -> Vec<(OperatingPoint<f64>, HealthState<f64>)> {
    (0..100)
        .map(|i| {
            let f = |k: usize, m: usize| ((i * k) % m) as f64 / (m - 1) as f64;
            let alt = 45000.0 * f(7, 11);
            let mach = 0.9 * f(3, 10);
            let tra = 100.0 * f(13, 17);
            let theta = HealthState::new(-0.2 * f(1, 5), -0.2 * f(3, 7), -0.2 * f(5, 9));
            let w = OperatingPoint::new(alt, mach, tra).expect("pinned point in box");
            (w, theta)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn isa_examples() {
        let (t, p) = isa_ambient(0.0f64).unwrap();
        assert_eq!((t, p), (518.67, 14.696));
        let (t, p) = isa_ambient(10000.0f64).unwrap();
        // 518.67 - 35.662 = 483.008; 14.696 * (483.008/518.67)^5.2559
        assert_relative_eq!(t, 483.008, epsilon = 1e-9);
        assert!((p - 10.106).abs() < 5e-3, "{p}");
        let (t, _) = isa_ambient(ALT_TROPOPAUSE).unwrap();
        assert!((t - 389.97).abs() < 5e-3);
        assert_eq!(isa_ambient(40000.0f64).unwrap().0, 389.97);
        assert!(isa_ambient(-1.0f64).is_err());
        assert!(isa_ambient(45001.0f64).is_err());
    }

    #[test]
    fn isa_pressure_continuous_at_tropopause() {
        let below = isa_ambient(ALT_TROPOPAUSE).unwrap().1;
        let above = isa_ambient(ALT_TROPOPAUSE + 1e-6).unwrap().1;
        assert_relative_eq!(below, above, max_relative = 1e-9);
    }

    #[test]
    fn ram_examples() {
        assert_eq!(ram_conditions(500.0f64, 10.0, 0.0).unwrap(), (500.0, 10.0));
        let (t2, _) = ram_conditions(518.67f64, 14.696, 0.8).unwrap();
        // factor 1 + 0.2 * 0.64 = 1.128
        assert!((t2 - 585.06).abs() < 5e-3);
        assert!(ram_conditions(500.0f64, 10.0, -0.1).is_err());
    }

    #[test]
    fn reference_is_zero() {
        assert_eq!(reference_health::<f64>().to_array(), [0.0; 3]);
    }

    #[test]
    fn invariant_violations_are_domain_errors() {
        let w = OperatingPoint::new(30000.0, 0.8, 80.0).unwrap();
        let bad = HealthState::new(0.01, 0.0, 0.0);
        assert!(matches!(evaluate_model(&w, &bad), Err(Error::Domain(_))));
        assert!(evaluate_model_relaxed(&w, &bad).is_ok());
        let mut w2 = w;
        w2.t2 += 1e-3;
        assert!(matches!(evaluate_model(&w2, &reference_health()), Err(Error::Domain(_))));
        assert!(OperatingPoint::new(1000.0, 0.95, 50.0).is_err());
    }

    #[test]
    fn far_outside_box_is_model_range_error() {
        let w = OperatingPoint::new(30000.0, 0.8, 80.0).unwrap();
        let theta = HealthState::new(0.0, 0.0, -1.3);
        assert!(matches!(evaluate_model_relaxed(&w, &theta), Err(Error::ModelRange(_))));
    }

    #[test]
    fn clamp_flags_movement() {
        let (c, moved) = HealthState::new(0.01, -0.3, -0.1).clamped();
        assert!(moved);
        assert_eq!(c.to_array(), [0.0, -0.2, -0.1]);
        assert!(!HealthState::new(0.0, -0.2, -0.1).clamped().1);
    }

    #[test]
    fn f32_tracks_f64() {
        let w = OperatingPoint::new(33000.0, 0.78, 85.0).unwrap();
        let th = HealthState::new(-0.05, -0.02, -0.03);
        let (a, _) = evaluate_model(&w, &th).unwrap();
        let (b, _) = evaluate_model(&w.cast::<f32>(), &HealthState::new(-0.05f32, -0.02, -0.03))
            .unwrap();
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert_relative_eq!(*x, y as f64, max_relative = 1e-5);
        }
    }
}
