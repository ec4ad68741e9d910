//! Model-ready inputs: variant assembly, min/max normalization, sliding
//! windows and validation splits.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedTrace;
use crate::engine::{SENSOR_NAMES, THETA_NAMES, VIRTUAL_NAMES, W_NAMES};
use crate::error::{Error, Result};
use crate::fleet::UnitRecord;
use crate::nnet::Samples;
use crate::scalar::Scalar;

/// Window length used throughout.
pub const N_TW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeatureVariant {
    /// w, x_s
    DataDriven,
    /// w, x_s, x̂_s
    PlusXsHat,
    /// w, x_s, x̂_s, x̂_v
    PlusXvHat,
    /// w, x_s, x̂_s, x̂_v, θ̂
    FullHybrid,
}

impl FeatureVariant {
    pub const ALL: [FeatureVariant; 4] = [
        FeatureVariant::DataDriven,
        FeatureVariant::PlusXsHat,
        FeatureVariant::PlusXvHat,
        FeatureVariant::FullHybrid,
    ];

    fn blocks(self) -> usize {
        match self {
            FeatureVariant::DataDriven => 2,
            FeatureVariant::PlusXsHat => 3,
            FeatureVariant::PlusXvHat => 4,
            FeatureVariant::FullHybrid => 5,
        }
    }

    pub fn n_columns(self) -> usize {
        [4, 16, 16, 11, 3][..self.blocks()].iter().sum()
    }

    pub fn needs_trace(self) -> bool {
        self != FeatureVariant::DataDriven
    }

    /// Column names in the fixed order w | x_s | x̂_s | x̂_v | θ̂.
    pub fn column_names(self) -> Vec<String> {
        let hat = |n: &&str| format!("{n}_hat");
        let blocks: [Vec<String>; 5] = [
            W_NAMES.iter().map(|s| s.to_string()).collect(),
            SENSOR_NAMES.iter().map(|s| s.to_string()).collect(),
            SENSOR_NAMES.iter().map(hat).collect(),
            VIRTUAL_NAMES.iter().map(hat).collect(),
            THETA_NAMES.iter().map(hat).collect(),
        ];
        blocks.into_iter().take(self.blocks()).flatten().collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureVariant::DataDriven => "DATA_DRIVEN",
            FeatureVariant::PlusXsHat => "PLUS_XS_HAT",
            FeatureVariant::PlusXvHat => "PLUS_XV_HAT",
            FeatureVariant::FullHybrid => "FULL_HYBRID",
        }
    }
}

impl std::str::FromStr for FeatureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureVariant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown feature variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
}

/// Samples × columns with aligned RUL targets and unit / cycle labels.
/// Rows of one unit are contiguous and in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub variant: FeatureVariant,
    pub split: Split,
    pub columns: Vec<String>,
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub unit: Vec<u32>,
    pub cycle: Vec<u32>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Row ranges of each unit, in order of appearance.
    pub fn unit_ranges(&self) -> Vec<(u32, std::ops::Range<usize>)> {
        let mut out: Vec<(u32, std::ops::Range<usize>)> = Vec::new();
        for (i, &u) in self.unit.iter().enumerate() {
            match out.last_mut() {
                Some((last, r)) if *last == u => r.end = i + 1,
                _ => out.push((u, i..i + 1)),
            }
        }
        out
    }
}

pub fn assemble_variant(
    unit: &UnitRecord,
    trace: Option<&CalibratedTrace>,
    variant: FeatureVariant,
    split: Split,
) -> Result<FeatureMatrix> {
    let n = unit.n_samples();
    let trace = match (variant.needs_trace(), trace) {
        (false, _) => None,
        (true, Some(t)) => {
            if t.len() != n {
                return Err(Error::Shape(format!(
                    "trace for unit {} has {} rows, unit has {n}",
                    unit.unit_id,
                    t.len()
                )));
            }
            Some(t)
        }
        (true, None) => {
            return Err(Error::Config(format!(
                "variant {} needs a calibrated trace for unit {}",
                variant.as_str(),
                unit.unit_id
            )))
        }
    };
    let cols = variant.n_columns();
    let mut x = Array2::zeros((n, cols));
    let mut y = Vec::with_capacity(n);
    let mut units = Vec::with_capacity(n);
    let mut cycles = Vec::with_capacity(n);
    for (i, (c, _, s)) in unit.iter_samples().enumerate() {
        let mut row = Vec::with_capacity(cols);
        row.extend(s.w.to_array());
        row.extend(s.xs_noisy.to_array());
        if let Some(t) = trace {
            row.extend(t.xs_hat[i]);
            if variant >= FeatureVariant::PlusXvHat {
                row.extend(t.xv_hat[i]);
            }
            if variant == FeatureVariant::FullHybrid {
                row.extend(t.theta_hat[i]);
            }
        }
        x.row_mut(i).assign(&Array1::from(row));
        y.push(c.rul_label as f64);
        units.push(unit.unit_id);
        cycles.push(c.cycle_index);
    }
    Ok(FeatureMatrix { variant, split, columns: variant.column_names(), x, y, unit: units, cycle: cycles })
}

/// Concatenates per-unit matrices of one variant and split.
pub fn stack(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let first = parts.first().ok_or_else(|| Error::Config("nothing to stack".into()))?;
    if parts.iter().any(|p| p.variant != first.variant || p.split != first.split) {
        return Err(Error::Config("cannot stack matrices of different variants or splits".into()));
    }
    let views: Vec<_> = parts.iter().map(|p| p.x.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FeatureMatrix {
        variant: first.variant,
        split: first.split,
        columns: first.columns.clone(),
        x,
        y: parts.iter().flat_map(|p| p.y.iter().copied()).collect(),
        unit: parts.iter().flat_map(|p| p.unit.iter().copied()).collect(),
        cycle: parts.iter().flat_map(|p| p.cycle.iter().copied()).collect(),
    })
}

/// Which data the parameters were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub split: Split,
    pub units: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerParams {
    pub columns: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Columns with max == min; they map to 0.
    pub degenerate: Vec<bool>,
    pub provenance: Provenance,
}

/// Per-column min / max from development rows only.
pub fn fit_normalizer(m: &FeatureMatrix) -> Result<NormalizerParams> {
    if m.split != Split::Dev {
        return Err(Error::Config("normalizer must be fitted on development data".into()));
    }
    if m.n_rows() == 0 {
        return Err(Error::Config("cannot fit a normalizer on an empty matrix".into()));
    }
    let mut min = Vec::with_capacity(m.x.ncols());
    let mut max = Vec::with_capacity(m.x.ncols());
    for col in m.x.columns() {
        min.push(col.iter().copied().fold(f64::INFINITY, f64::min));
        max.push(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let degenerate: Vec<bool> = min.iter().zip(&max).map(|(a, b)| !(b > a)).collect();
    for (name, d) in m.columns.iter().zip(&degenerate) {
        if *d {
            log::warn!("feature column {name} is constant on the development set");
        }
    }
    let mut units: Vec<u32> = m.unit.clone();
    units.dedup();
    Ok(NormalizerParams {
        columns: m.columns.clone(),
        min,
        max,
        degenerate,
        provenance: Provenance { split: Split::Dev, units },
    })
}

impl NormalizerParams {
    /// x' = 2 (x − min) / (max − min) − 1, unclipped.
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mut out = x.to_owned();
        for (k, mut col) in out.columns_mut().into_iter().enumerate() {
            if self.degenerate[k] {
                col.fill(0.0);
            } else {
                let (lo, span) = (self.min[k], self.max[k] - self.min[k]);
                col.mapv_inplace(|v| 2.0 * (v - lo) / span - 1.0);
            }
        }
        Ok(out)
    }

    /// Inverse map; degenerate columns return their constant.
    pub fn invert(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mut out = x.to_owned();
        for (k, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, span) = (self.min[k], self.max[k] - self.min[k]);
            if self.degenerate[k] {
                col.fill(lo);
            } else {
                col.mapv_inplace(|v| (v + 1.0) * 0.5 * span + lo);
            }
        }
        Ok(out)
    }

    fn check(&self, ncols: usize) -> Result<()> {
        if ncols != self.min.len() {
            return Err(Error::Shape(format!("{ncols} columns, normalizer has {}", self.min.len())));
        }
        Ok(())
    }
}

pub fn apply_normalizer(m: &FeatureMatrix, p: &NormalizerParams) -> Result<FeatureMatrix> {
    if m.columns != p.columns {
        return Err(Error::Shape("feature columns differ from the normalizer's".into()));
    }
    Ok(FeatureMatrix { x: p.apply(m.x.view())?, ..m.clone() })
}

/// Overlapping windows over contiguous rows; windows never cross units.
#[derive(Debug, Clone)]
pub struct WindowSet<T> {
    data: Array2<T>,
    starts: Vec<usize>,
    pub n_tw: usize,
    pub targets: Vec<T>,
    /// Unit and cycle of each window's last row.
    pub unit: Vec<u32>,
    pub cycle: Vec<u32>,
}

pub fn sliding_windows<T: Scalar>(m: &FeatureMatrix, n_tw: usize, stride: usize) -> Result<WindowSet<T>> {
    if n_tw == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    let mut starts = Vec::new();
    for (u, range) in m.unit_ranges() {
        if range.len() < n_tw {
            log::warn!("unit {u}: {} rows, shorter than window {n_tw}; skipped", range.len());
            continue;
        }
        starts.extend((range.start..=range.end - n_tw).step_by(stride));
    }
    let last = |s: &usize| s + n_tw - 1;
    Ok(WindowSet {
        data: m.x.mapv(T::lit),
        targets: starts.iter().map(|s| T::lit(m.y[last(s)])).collect(),
        unit: starts.iter().map(|s| m.unit[last(s)]).collect(),
        cycle: starts.iter().map(|s| m.cycle[last(s)]).collect(),
        starts,
        n_tw,
    })
}

impl<T: Scalar> WindowSet<T> {
    pub fn window(&self, i: usize) -> ArrayView2<'_, T> {
        let s = self.starts[i];
        self.data.slice(s![s..s + self.n_tw, ..])
    }

    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }
}

impl<T: Scalar> Samples<T> for WindowSet<T> {
    fn len(&self) -> usize {
        self.starts.len()
    }

    fn gather(&self, idx: &[usize]) -> (Array2<T>, Array1<T>) {
        let mut x = Array2::zeros((idx.len() * self.n_tw, self.data.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            x.slice_mut(s![k * self.n_tw..(k + 1) * self.n_tw, ..]).assign(&self.window(i));
        }
        (x, idx.iter().map(|&i| self.targets[i]).collect())
    }
}

/// One row per sample, for the dense network.
#[derive(Debug, Clone)]
pub struct RowSet<T> {
    data: Array2<T>,
    pub targets: Vec<T>,
    pub unit: Vec<u32>,
    pub cycle: Vec<u32>,
}

impl<T: Scalar> RowSet<T> {
    pub fn new(m: &FeatureMatrix) -> Self {
        RowSet {
            data: m.x.mapv(T::lit),
            targets: m.y.iter().map(|v| T::lit(*v)).collect(),
            unit: m.unit.clone(),
            cycle: m.cycle.clone(),
        }
    }
}

impl<T: Scalar> Samples<T> for RowSet<T> {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn gather(&self, idx: &[usize]) -> (Array2<T>, Array1<T>) {
        (self.data.select(Axis(0), idx), idx.iter().map(|&i| self.targets[i]).collect())
    }
}

/// Index view into another sample set.
pub struct Subset<'a, T> {
    inner: &'a dyn Samples<T>,
    idx: Vec<usize>,
}

impl<'a, T> Subset<'a, T> {
    pub fn new(inner: &'a dyn Samples<T>, idx: Vec<usize>) -> Self {
        Subset { inner, idx }
    }
}

impl<T> Samples<T> for Subset<'_, T> {
    fn len(&self) -> usize {
        self.idx.len()
    }

    fn gather(&self, idx: &[usize]) -> (Array2<T>, Array1<T>) {
        let mapped: Vec<usize> = idx.iter().map(|&i| self.idx[i]).collect();
        self.inner.gather(&mapped)
    }
}

/// Random sample-level split stratified by unit: each unit contributes
/// round(frac · n_u) samples to validation. Returns sorted (train, val) indices.
pub fn split_validation(unit_of_sample: &[u32], frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 0.5) {
        return Err(Error::Config(format!("validation fraction {frac} outside (0, 0.5)")));
    }
    let mut ids: Vec<u32> = unit_of_sample.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for id in ids {
        let mut members: Vec<usize> = (0..unit_of_sample.len()).filter(|&i| unit_of_sample[i] == id).collect();
        members.shuffle(&mut rng);
        let n_val = (members.len() as f64 * frac).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_inventory() {
        let n: Vec<usize> = FeatureVariant::ALL.iter().map(|v| v.n_columns()).collect();
        assert_eq!(n, vec![20, 36, 47, 50]);
        for v in FeatureVariant::ALL {
            assert_eq!(v.column_names().len(), v.n_columns());
            assert_eq!(v.as_str().parse::<FeatureVariant>().unwrap(), v);
        }
    }

    #[test]
    fn variants_nest() {
        for p in FeatureVariant::ALL.windows(2) {
            let (a, b) = (p[0].column_names(), p[1].column_names());
            assert!(b.len() > a.len());
            assert_eq!(&b[..a.len()], &a[..]);
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split_validation(&[1, 1, 2], 0.0, 1).is_err());
        assert!(split_validation(&[1, 1, 2], 0.5, 1).is_err());
    }
}
