//! Synthetic run-to-failure fleet: flight profiles, two-phase degradation,
//! noisy sensor streams and RUL labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{
    evaluate_model, HealthState, OperatingPoint, SensorFrame, VirtualFrame, ALT_MAX, MACH_MAX,
};
use crate::error::{Error, Result};

/// Modifier magnitude at which a component is considered failed.
pub const FAILURE_MAGNITUDE: f64 = 0.15;
const MIN_PROFILE_SAMPLES: usize = 30;
/// Climb starts and descent ends here, so every sample stays above 10000 ft.
const TERMINAL_ALT: f64 = 10500.0;
const RESAMPLE_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureMode {
    Hpt,
    HptPlusLpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RouteClass {
    Long,
    Short,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub failure_mode: FailureMode,
    /// Largest initial health-index deficit.
    pub initial_spread: f64,
    /// Per-cycle HI loss before the transition.
    pub normal_rate_range: [f64; 2],
    /// Per-cycle HI loss after the transition.
    pub abnormal_rate_range: [f64; 2],
    /// Width of the logistic blend, in cycles.
    pub transition_smoothness: f64,
    pub eol_threshold: f64,
    /// Range for the transition cycle t_s.
    pub transition_cycle_range: [u32; 2],
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            failure_mode: FailureMode::HptPlusLpt,
            initial_spread: 0.10,
            normal_rate_range: [0.001, 0.003],
            abnormal_rate_range: [0.008, 0.02],
            transition_smoothness: 5.0,
            eol_threshold: 0.0,
            transition_cycle_range: [12, 36],
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let [n0, n1] = self.normal_rate_range;
        let [a0, a1] = self.abnormal_rate_range;
        if !(n0 > 0.0 && n0 <= n1 && a0 <= a1) {
            return Err(Error::Config(format!(
                "rate ranges must be positive and ordered: normal {n0}..{n1}, abnormal {a0}..{a1}"
            )));
        }
        if a0 <= n1 {
            return Err(Error::Config(format!(
                "abnormal rates ({a0}..) must strictly exceed normal rates (..{n1})"
            )));
        }
        if !(0.0..=0.3).contains(&self.initial_spread) {
            return Err(Error::Config(format!("initial spread {} outside [0, 0.3]", self.initial_spread)));
        }
        if !(self.transition_smoothness > 0.0) {
            return Err(Error::Config("transition smoothness must be positive".into()));
        }
        let [t0, t1] = self.transition_cycle_range;
        if t0 < 1 || t0 > t1 {
            return Err(Error::Config(format!("transition cycle range {t0}..{t1} invalid")));
        }
        Ok(())
    }
}

/// One sample of a flight cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub w: OperatingPoint<f64>,
    pub xs_noisy: SensorFrame<f64>,
    pub xs_true: SensorFrame<f64>,
    pub xv_true: VirtualFrame<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlightCycle {
    pub cycle_index: u32,
    pub samples: Vec<Sample>,
    pub rul_label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub unit_id: u32,
    pub route: RouteClass,
    pub failure_mode: FailureMode,
    pub seed: u64,
    pub cycles: Vec<FlightCycle>,
    pub t_s: u32,
    pub t_eol: u32,
    /// θ per cycle, indexed like `cycles`.
    pub ground_truth_theta: Vec<HealthState<f64>>,
}

impl UnitRecord {
    pub fn n_samples(&self) -> usize {
        self.cycles.iter().map(|c| c.samples.len()).sum()
    }

    /// Samples in time order with their cycle and ground-truth θ.
    pub fn iter_samples(&self) -> impl Iterator<Item = (&FlightCycle, &HealthState<f64>, &Sample)> {
        self.cycles
            .iter()
            .zip(&self.ground_truth_theta)
            .flat_map(|(c, th)| c.samples.iter().map(move |s| (c, th, s)))
    }
}

/// Splitmix64 finalizer; derives independent stream seeds from a parent.
pub fn split_seed(parent: u64, stream: u64) -> u64 {
    let mut z = parent ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn health_index(theta: &HealthState<f64>) -> f64 {
    let worst = theta.to_array().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    1.0 - worst / FAILURE_MAGNITUDE
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

/// Climb, cruise and descent at one sample per time step.
pub fn gen_flight_profile(
    seed: u64,
    route: RouteClass,
    n_samples: usize,
) -> Result<Vec<OperatingPoint<f64>>> {
    if n_samples < MIN_PROFILE_SAMPLES {
        return Err(Error::Config(format!(
            "{n_samples} samples cannot hold climb, cruise and descent (need {MIN_PROFILE_SAMPLES})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (alt_range, mach_range, cruise_frac) = match route {
        RouteClass::Long => ([28000.0, 38000.0], [0.7, 0.85], 0.5),
        RouteClass::Short => ([12000.0, 24000.0], [0.55, 0.7], 0.5 * 0.6),
    };
    let cruise_alt = uniform(&mut rng, alt_range);
    let cruise_mach = uniform(&mut rng, mach_range);
    let cruise_tra = uniform(&mut rng, [70.0, 85.0]);
    let climb_tra = uniform(&mut rng, [88.0, 98.0]);
    let descent_tra = uniform(&mut rng, [20.0, 40.0]);

    let n_cruise = ((n_samples as f64 * cruise_frac).round() as usize).max(1);
    let n_climb = (n_samples - n_cruise) / 2;
    let n_descent = n_samples - n_cruise - n_climb;

    let mut out = Vec::with_capacity(n_samples);
    let jitter = |rng: &mut ChaCha8Rng, scale: f64| scale * (rng.random::<f64>() * 2.0 - 1.0);
    for i in 0..n_samples {
        let (alt, mach, tra) = if i < n_climb {
            let f = (i as f64 + 0.5) / n_climb as f64;
            (
                TERMINAL_ALT + f * (cruise_alt - TERMINAL_ALT),
                0.45 + f * (cruise_mach - 0.45),
                climb_tra + jitter(&mut rng, 2.0),
            )
        } else if i < n_climb + n_cruise {
            (
                cruise_alt + jitter(&mut rng, 400.0),
                cruise_mach + jitter(&mut rng, 0.01),
                cruise_tra + jitter(&mut rng, 4.0),
            )
        } else {
            let f = (i - n_climb - n_cruise) as f64 / n_descent as f64;
            (
                cruise_alt + f * (TERMINAL_ALT - cruise_alt),
                cruise_mach + f * (0.45 - cruise_mach),
                descent_tra + jitter(&mut rng, 3.0),
            )
        };
        let alt = alt.clamp(TERMINAL_ALT, ALT_MAX);
        let mach = mach.clamp(0.0, MACH_MAX);
        let tra = tra.clamp(0.0, 100.0);
        out.push(OperatingPoint::new(alt, mach, tra)?);
    }
    Ok(out)
}

/// θ per cycle (cycle 1 first) with the transition and end-of-life cycles.
pub fn gen_degradation_trajectory(
    seed: u64,
    cfg: &DegradationConfig,
    max_cycles: u32,
) -> Result<(Vec<HealthState<f64>>, u32, u32)> {
    cfg.validate()?;
    if max_cycles < 20 {
        return Err(Error::Config(format!("max_cycles {max_cycles} below 20")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let active: &[usize] = match cfg.failure_mode {
        FailureMode::Hpt => &[0],
        FailureMode::HptPlusLpt => &[0, 1, 2],
    };
    let [t0, t1] = cfg.transition_cycle_range;
    let t_s = rng.random_range(t0..=t1);
    // deficit per component in HI units
    let mut d = [0.0f64; 3];
    let mut normal = [0.0f64; 3];
    let mut abnormal = [0.0f64; 3];
    for &i in active {
        d[i] = uniform(&mut rng, [0.0, cfg.initial_spread]);
        normal[i] = uniform(&mut rng, cfg.normal_rate_range);
        abnormal[i] = uniform(&mut rng, cfg.abnormal_rate_range);
    }
    let tau = cfg.transition_smoothness;
    let centre = t_s as f64 + tau / 2.0;
    let to_theta = |d: &[f64; 3]| {
        HealthState::from_array(d.map(|v| (-FAILURE_MAGNITUDE * v).max(crate::engine::THETA_MIN)))
    };

    let mut thetas = vec![to_theta(&d)];
    for c in 2..=max_cycles {
        if health_index(thetas.last().unwrap()) <= cfg.eol_threshold {
            break;
        }
        let blend = 1.0 / (1.0 + (-(c as f64 - centre) * 8.0 / tau).exp());
        for &i in active {
            d[i] += normal[i] + (abnormal[i] - normal[i]) * blend;
        }
        thetas.push(to_theta(&d));
    }
    let last = thetas.last().unwrap();
    if health_index(last) > cfg.eol_threshold {
        return Err(Error::Generation(format!(
            "trajectory did not reach end of life within {max_cycles} cycles"
        )));
    }
    let t_eol = thetas.len() as u32;
    if t_s >= t_eol {
        return Err(Error::Generation(format!("end of life {t_eol} before transition {t_s}")));
    }
    Ok((thetas, t_s, t_eol))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub unit_id: u32,
    pub route: RouteClass,
    pub failure_mode: FailureMode,
}

impl UnitSpec {
    pub fn new(unit_id: u32, route: RouteClass, failure_mode: FailureMode) -> Self {
        UnitSpec { unit_id, route, failure_mode }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub master_seed: u64,
    pub dev: Vec<UnitSpec>,
    pub test: Vec<UnitSpec>,
    pub degradation: DegradationConfig,
    pub samples_per_cycle: usize,
    pub sensor_noise_sigma: f64,
    pub max_cycles: u32,
}

impl Default for FleetConfig {
    fn default() -> Self {
        use FailureMode::*;
        use RouteClass::*;
        FleetConfig {
            master_seed: 2021,
            dev: vec![
                UnitSpec::new(2, Long, Hpt),
                UnitSpec::new(5, Long, Hpt),
                UnitSpec::new(10, Long, Hpt),
                UnitSpec::new(16, Long, HptPlusLpt),
                UnitSpec::new(18, Long, HptPlusLpt),
                UnitSpec::new(20, Long, HptPlusLpt),
            ],
            test: vec![
                UnitSpec::new(11, Long, HptPlusLpt),
                UnitSpec::new(14, Short, HptPlusLpt),
                UnitSpec::new(15, Short, HptPlusLpt),
            ],
            degradation: DegradationConfig::default(),
            samples_per_cycle: 200,
            sensor_noise_sigma: 0.004,
            max_cycles: 300,
        }
    }
}

impl FleetConfig {
    /// Keeps only the listed development units.
    pub fn restrict_dev(&mut self, ids: &[u32]) -> Result<()> {
        for id in ids {
            if !self.dev.iter().any(|u| u.unit_id == *id) {
                return Err(Error::Config(format!("unit {id} is not a development unit")));
            }
        }
        self.dev.retain(|u| ids.contains(&u.unit_id));
        Ok(())
    }

    pub fn unit_seed(&self, unit_id: u32) -> u64 {
        split_seed(self.master_seed, unit_id as u64)
    }

    pub fn validate(&self) -> Result<()> {
        self.degradation.validate()?;
        let mut ids: Vec<u32> = self.dev.iter().chain(&self.test).map(|u| u.unit_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Config("duplicate unit ids".into()));
        }
        if !(self.sensor_noise_sigma >= 0.0) {
            return Err(Error::Config("negative sensor noise".into()));
        }
        Ok(())
    }
}

pub fn simulate_unit(
    seed: u64,
    unit_id: u32,
    route: RouteClass,
    cfg: &DegradationConfig,
    samples_per_cycle: usize,
    sensor_noise_sigma: f64,
    max_cycles: u32,
) -> Result<UnitRecord> {
    // a trajectory that fails to reach end of life is resampled under a new stream
    let mut attempt = 0;
    let (thetas, t_s, t_eol) = loop {
        match gen_degradation_trajectory(split_seed(seed, 1 + attempt), cfg, max_cycles) {
            Ok(t) => break t,
            Err(Error::Generation(msg)) if attempt + 1 < RESAMPLE_ATTEMPTS => {
                log::warn!("unit {unit_id}: {msg}; resampling");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 0x6e6f_6973_65));
    let mut cycles = Vec::with_capacity(thetas.len());
    for (k, theta) in thetas.iter().enumerate() {
        let c = k as u32 + 1;
        let profile = gen_flight_profile(
            split_seed(seed, 0x7072_6f66_0000_0000 + c as u64),
            route,
            samples_per_cycle,
        )?;
        let mut samples = Vec::with_capacity(profile.len());
        for w in profile {
            let (xs, xv) = evaluate_model(&w, theta)?;
            let xs_noisy = if sensor_noise_sigma > 0.0 {
                SensorFrame::from_array(xs.to_array().map(|v| {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    v + sensor_noise_sigma * v.abs() * e
                }))
            } else {
                xs
            };
            samples.push(Sample { w, xs_noisy, xs_true: xs, xv_true: xv });
        }
        cycles.push(FlightCycle { cycle_index: c, samples, rul_label: t_eol - c });
    }
    Ok(UnitRecord {
        unit_id,
        route,
        failure_mode: cfg.failure_mode,
        seed,
        cycles,
        t_s,
        t_eol,
        ground_truth_theta: thetas,
    })
}

pub fn simulate_spec(cfg: &FleetConfig, spec: &UnitSpec) -> Result<UnitRecord> {
    let deg = DegradationConfig { failure_mode: spec.failure_mode, ..cfg.degradation.clone() };
    simulate_unit(
        cfg.unit_seed(spec.unit_id),
        spec.unit_id,
        spec.route,
        &deg,
        cfg.samples_per_cycle,
        cfg.sensor_noise_sigma,
        cfg.max_cycles,
    )
}

/// Development and test units; each unit depends only on its own derived seed.
pub fn build_fleet(cfg: &FleetConfig) -> Result<(Vec<UnitRecord>, Vec<UnitRecord>)> {
    cfg.validate()?;
    let sim = |specs: &[UnitSpec]| specs.iter().map(|s| simulate_spec(cfg, s)).collect::<Result<Vec<_>>>();
    Ok((sim(&cfg.dev)?, sim(&cfg.test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn health_index_examples() {
        assert_eq!(health_index(&HealthState::new(0.0, 0.0, 0.0)), 1.0);
        assert_eq!(health_index(&HealthState::new(-0.15, 0.0, 0.0)), 0.0);
        assert!((health_index(&HealthState::new(-0.075, -0.03, 0.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_overlapping_rates() {
        let cfg = DegradationConfig { abnormal_rate_range: [0.002, 0.02], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = DegradationConfig { initial_spread: 0.4, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn profile_needs_room_for_three_phases() {
        assert!(matches!(gen_flight_profile(1, RouteClass::Long, 29), Err(Error::Config(_))));
        assert_eq!(gen_flight_profile(1, RouteClass::Long, 30).unwrap().len(), 30);
    }

    #[test]
    fn split_seed_separates_streams() {
        assert_ne!(split_seed(1, 2), split_seed(1, 3));
        assert_ne!(split_seed(1, 2), split_seed(2, 2));
        assert_eq!(split_seed(7, 9), split_seed(7, 9));
    }

    #[test]
    fn short_horizon_is_generation_error() {
        let cfg = DegradationConfig::default();
        assert!(matches!(gen_degradation_trajectory(3, &cfg, 20), Err(Error::Generation(_))));
    }
}
