//! Prognostic metrics: RMSE, the NASA s-score, per-cycle aggregation,
//! prediction horizon and a mutual-information feature ranking.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HORIZON_THRESHOLD: f64 = 5.0;
pub const MI_BINS: usize = 32;
pub const MI_TOP: usize = 9;

/// Predictions with aligned truth and unit / cycle labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub y_hat: Vec<f64>,
    pub y: Vec<f64>,
    pub unit: Vec<u32>,
    pub cycle: Vec<u32>,
}

impl PredictionSet {
    pub fn new(y_hat: Vec<f64>, y: Vec<f64>, unit: Vec<u32>, cycle: Vec<u32>) -> Result<Self> {
        let n = y.len();
        if y_hat.len() != n || unit.len() != n || cycle.len() != n {
            return Err(Error::Shape(format!(
                "prediction set lengths differ: {} / {n} / {} / {}",
                y_hat.len(),
                unit.len(),
                cycle.len()
            )));
        }
        Ok(PredictionSet { y_hat, y, unit, cycle })
    }

    /// Unlabelled predictions, for the metric-only paths.
    pub fn from_pairs(y_hat: &[f64], y: &[f64]) -> Result<Self> {
        Self::new(y_hat.to_vec(), y.to_vec(), vec![0; y.len()], vec![1; y.len()])
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Δ = y − ŷ per sample.
    pub fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.y.iter().zip(&self.y_hat).map(|(y, p)| y - p)
    }

    fn non_empty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Domain("empty prediction set".into()));
        }
        Ok(())
    }
}

pub fn rmse(p: &PredictionSet) -> Result<f64> {
    p.non_empty()?;
    Ok((p.errors().map(|d| d * d).sum::<f64>() / p.len() as f64).sqrt())
}

/// Σ exp(α |Δ|), α = 1/13 for under-estimation (Δ > 0) and 1/10 otherwise.
pub fn nasa_score(p: &PredictionSet) -> Result<f64> {
    p.non_empty()?;
    Ok(p.errors().map(s_term).sum())
}

fn s_term(d: f64) -> f64 {
    let a = if d > 0.0 { 1.0 / 13.0 } else { 1.0 / 10.0 };
    (a * d.abs()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleStat {
    pub cycle: u32,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// True RUL of the cycle (constant within a cycle).
    pub truth: f64,
}

impl CycleStat {
    pub fn error(&self) -> f64 {
        self.truth - self.mean
    }

    /// Largest absolute error over the min/max band.
    pub fn band_error(&self) -> f64 {
        (self.truth - self.min).abs().max((self.truth - self.max).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSeries {
    pub unit: u32,
    pub cycles: Vec<CycleStat>,
}

/// Mean, min and max of ŷ per (unit, cycle), units and cycles ascending.
pub fn per_cycle_average(p: &PredictionSet) -> Vec<UnitSeries> {
    let mut acc: BTreeMap<u32, BTreeMap<u32, CycleStat>> = BTreeMap::new();
    for i in 0..p.len() {
        let v = p.y_hat[i];
        acc.entry(p.unit[i])
            .or_default()
            .entry(p.cycle[i])
            .and_modify(|s| {
                s.n += 1;
                s.mean += v;
                s.min = s.min.min(v);
                s.max = s.max.max(v);
            })
            .or_insert(CycleStat { cycle: p.cycle[i], n: 1, mean: v, min: v, max: v, truth: p.y[i] });
    }
    acc.into_iter()
        .map(|(unit, m)| UnitSeries {
            unit,
            cycles: m
                .into_values()
                .map(|mut s| {
                    s.mean /= s.n as f64;
                    s
                })
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonMode {
    /// Test the per-cycle mean error.
    #[default]
    Mean,
    /// Test the worst error over the per-cycle min/max band.
    Band,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    /// First cycle from which every later error stays within the threshold.
    pub t_within: Option<u32>,
    pub horizon: u32,
    /// Set when no cycle qualifies (horizon forced to 0).
    pub flagged: bool,
}

/// `errors` are (cycle, Δ) pairs in ascending cycle order.
pub fn prediction_horizon(errors: &[(u32, f64)], t_eol: u32, threshold: f64) -> Horizon {
    let mut t_within = None;
    for &(c, d) in errors.iter().rev() {
        if d.abs() > threshold {
            break;
        }
        t_within = Some(c);
    }
    match t_within {
        Some(c) => Horizon { t_within, horizon: t_eol.saturating_sub(c), flagged: false },
        None => Horizon { t_within: None, horizon: 0, flagged: true },
    }
}

pub fn unit_horizon(series: &UnitSeries, t_eol: u32, threshold: f64, mode: HorizonMode) -> Horizon {
    let errors: Vec<(u32, f64)> = series
        .cycles
        .iter()
        .map(|s| {
            let e = match mode {
                HorizonMode::Mean => s.error(),
                HorizonMode::Band => s.band_error(),
            };
            (s.cycle, e)
        })
        .collect();
    prediction_horizon(&errors, t_eol, threshold)
}

fn bin_index(v: f64, lo: f64, hi: f64, n_bins: usize) -> usize {
    let k = ((v - lo) / (hi - lo) * n_bins as f64).floor();
    (k.max(0.0) as usize).min(n_bins - 1)
}

fn binned(v: &[f64], n_bins: usize) -> Option<Vec<usize>> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi > lo).then(|| v.iter().map(|x| bin_index(*x, lo, hi, n_bins)).collect())
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts.iter().filter(|c| **c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum()
}

/// Plug-in MI between two binned variables, normalized by the smaller entropy.
fn nmi(a: &[usize], b: &[usize], n_bins: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; n_bins * n_bins];
    let mut ca = vec![0usize; n_bins];
    let mut cb = vec![0usize; n_bins];
    for (&i, &j) in a.iter().zip(b) {
        joint[i * n_bins + j] += 1;
        ca[i] += 1;
        cb[j] += 1;
    }
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    let h_min = ha.min(hb);
    if h_min <= 0.0 {
        return 0.0;
    }
    let mi = ha + hb - entropy(&joint, n);
    (mi / h_min).clamp(0.0, 1.0)
}

/// Features sorted by NMI with `y`, descending (ties keep column order).
pub fn mutual_information_ranking(
    x: ArrayView2<f64>,
    names: &[String],
    y: &[f64],
    n_bins: usize,
) -> Result<Vec<(String, f64)>> {
    if x.nrows() != y.len() || x.ncols() != names.len() {
        return Err(Error::Shape(format!(
            "features {:?}, {} names, {} targets",
            x.dim(),
            names.len(),
            y.len()
        )));
    }
    if y.len() < 1000 {
        return Err(Error::Domain(format!("mutual information needs at least 1000 samples, got {}", y.len())));
    }
    if n_bins < 2 {
        return Err(Error::Config("at least two bins are needed".into()));
    }
    let yb = binned(y, n_bins);
    let mut out: Vec<(String, f64)> = names
        .iter()
        .zip(x.columns())
        .map(|(name, col)| {
            let col = col.to_vec();
            let v = match (&yb, binned(&col, n_bins)) {
                (Some(yb), Some(xb)) => nmi(&xb, yb, n_bins),
                _ => 0.0,
            };
            (name.clone(), v)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub unit: u32,
    pub t_eol: u32,
    pub rmse: f64,
    pub horizon: Horizon,
    pub series: Vec<CycleStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrognosticReport {
    pub rmse: f64,
    pub s_score: f64,
    /// s-score × 10⁻⁵, the scale used in published tables.
    pub s_score_e5: f64,
    pub horizon_mode: HorizonMode,
    pub horizon_threshold: f64,
    pub units: Vec<UnitReport>,
    pub fleet_avg_horizon: f64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// `t_eol` maps every unit in the set to its end-of-life cycle.
pub fn build_report(
    p: &PredictionSet,
    t_eol: &BTreeMap<u32, u32>,
    threshold: f64,
    mode: HorizonMode,
    meta: serde_json::Value,
) -> Result<PrognosticReport> {
    let mut units = Vec::new();
    for series in per_cycle_average(p) {
        let eol = *t_eol
            .get(&series.unit)
            .ok_or_else(|| Error::Config(format!("no end of life given for unit {}", series.unit)))?;
        let idx: Vec<usize> = (0..p.len()).filter(|&i| p.unit[i] == series.unit).collect();
        let sub = PredictionSet {
            y_hat: idx.iter().map(|&i| p.y_hat[i]).collect(),
            y: idx.iter().map(|&i| p.y[i]).collect(),
            unit: vec![series.unit; idx.len()],
            cycle: idx.iter().map(|&i| p.cycle[i]).collect(),
        };
        units.push(UnitReport {
            unit: series.unit,
            t_eol: eol,
            rmse: rmse(&sub)?,
            horizon: unit_horizon(&series, eol, threshold, mode),
            series: series.cycles,
        });
    }
    let s = nasa_score(p)?;
    let fleet_avg_horizon = units.iter().map(|u| u.horizon.horizon as f64).sum::<f64>() / units.len() as f64;
    Ok(PrognosticReport {
        rmse: rmse(p)?,
        s_score: s,
        s_score_e5: s * 1e-5,
        horizon_mode: mode,
        horizon_threshold: threshold,
        units,
        fleet_avg_horizon,
        meta,
    })
}

impl PrognosticReport {
    /// unit,cycle,n,truth,mean,min,max
    pub fn per_cycle_csv(&self) -> String {
        let mut s = String::from("unit,cycle,n,truth,mean,min,max\n");
        for u in &self.units {
            for c in &u.series {
                s.push_str(&format!("{},{},{},{},{},{},{}\n", u.unit, c.cycle, c.n, c.truth, c.mean, c.min, c.max));
            }
        }
        s
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
