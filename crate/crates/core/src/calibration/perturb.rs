use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Adds white Gaussian noise per component at the requested SNR, with signal
/// power measured per component over the series. `f64::INFINITY` is the
/// no-noise sentinel and returns the input unchanged.
pub fn inject_noise(series: &[[f64; 3]], snr_db: f64, seed: u64) -> Result<Vec<[f64; 3]>> {
    if series.is_empty() {
        return Err(Error::Config("empty θ̂ series".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(series.to_vec());
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr_db {snr_db} must be finite or +inf")));
    }
    let n = series.len() as f64;
    let mut sd = [0.0; 3];
    for k in 0..3 {
        let power = series.iter().map(|t| t[k] * t[k]).sum::<f64>() / n;
        if power == 0.0 {
            log::warn!("θ̂ component {k} has zero power; left noise-free");
        }
        sd[k] = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(series
        .iter()
        .map(|t| {
            let mut o = *t;
            for k in 0..3 {
                let e: f64 = StandardNormal.sample(&mut rng);
                o[k] += sd[k] * e;
            }
            o
        })
        .collect())
}

/// θ_α(t) = θ(t) + α (θ(0) − θ(t)), with θ(0) the first sample of the series.
pub fn inject_bias(series: &[[f64; 3]], alpha_bias: f64) -> Result<Vec<[f64; 3]>> {
    let first = *series.first().ok_or_else(|| Error::Config("empty θ̂ series".into()))?;
    Ok(series
        .iter()
        .map(|t| std::array::from_fn(|k| t[k] + alpha_bias * (first[k] - t[k])))
        .collect())
}
