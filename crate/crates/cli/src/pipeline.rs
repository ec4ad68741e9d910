//! In-memory experiment steps: generate, calibrate, assemble, train, predict.

use std::collections::BTreeMap;

use ndarray::Axis;

use phm_core::calibration::{
    calibrate_trajectory, inject_bias, inject_noise, CalibratedTrace, ExactModel, ResponseModel, SurrogateModel,
};
use phm_core::evaluation::{build_report, HorizonMode, PredictionSet, PrognosticReport, HORIZON_THRESHOLD};
use phm_core::features::{
    apply_normalizer, assemble_variant, fit_normalizer, sliding_windows, split_validation, stack, FeatureMatrix,
    FeatureVariant, NormalizerParams, RowSet, Split, Subset,
};
use phm_core::fleet::{build_fleet, UnitRecord};
use phm_core::nnet::{build_cnn, build_fnn, predict, train, Network, Samples, TrainLog};
use phm_core::{Error, Result, Scalar};

use crate::config::{Arch, CalibrationSource, ExperimentConfig, Perturbation, Precision};

const PREDICT_CHUNK: usize = 2048;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dev: Vec<UnitRecord>,
    pub test: Vec<UnitRecord>,
}

impl Dataset {
    /// End-of-life cycle of every unit.
    pub fn t_eol(&self) -> BTreeMap<u32, u32> {
        self.dev.iter().chain(&self.test).map(|u| (u.unit_id, u.t_eol)).collect()
    }

    pub fn dev_subset(&self, ids: &[u32]) -> Vec<UnitRecord> {
        self.dev.iter().filter(|u| ids.contains(&u.unit_id)).cloned().collect()
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (dev, test) = build_fleet(&cfg.fleet)?;
    Ok(Dataset { dev, test })
}

/// UKF over every unit with the exact model or a fitted surrogate.
pub fn calibrate_units(
    cfg: &ExperimentConfig,
    units: &[UnitRecord],
    surrogate: Option<&SurrogateModel>,
) -> Result<Vec<CalibratedTrace>> {
    let ukf = cfg.ukf_config();
    let model: &dyn ResponseModel<f64> = match surrogate {
        Some(s) => s,
        None => &ExactModel,
    };
    units
        .iter()
        .map(|u| calibrate_trajectory::<f64, _>(u, model, &ukf, cfg.burn_in_samples))
        .collect()
}

/// Model information for the requested source; `ukf` must hold the filter
/// traces when the source is the filter.
pub fn model_information(
    source: CalibrationSource,
    units: &[UnitRecord],
    ukf: Option<&[CalibratedTrace]>,
) -> Result<Vec<CalibratedTrace>> {
    match source {
        CalibrationSource::GroundTruth => Ok(units.iter().map(CalibratedTrace::ground_truth).collect()),
        CalibrationSource::Ukf => {
            let t = ukf.ok_or_else(|| Error::Config("filter traces are required".into()))?;
            if t.len() != units.len() || t.iter().zip(units).any(|(t, u)| t.unit_id != u.unit_id) {
                return Err(Error::Config("filter traces do not match the units".into()));
            }
            Ok(t.to_vec())
        }
    }
}

/// Applies noise and / or bias to θ̂, unit by unit.
pub fn perturb_traces(cfg: &ExperimentConfig, traces: &[CalibratedTrace], p: &Perturbation) -> Result<Vec<CalibratedTrace>> {
    traces
        .iter()
        .map(|t| {
            let mut theta = t.theta_hat.clone();
            if let Some(a) = p.alpha_bias {
                theta = inject_bias(&theta, a)?;
            }
            if let Some(s) = p.snr_db {
                theta = inject_noise(&theta, s, cfg.perturb_seed(t.unit_id))?;
            }
            t.with_theta(theta)
        })
        .collect()
}

/// Stacked features of a split; traces are ignored for the data-driven variant.
pub fn feature_matrix(
    variant: FeatureVariant,
    split: Split,
    units: &[UnitRecord],
    traces: Option<&[CalibratedTrace]>,
) -> Result<FeatureMatrix> {
    let parts = units
        .iter()
        .enumerate()
        .map(|(i, u)| assemble_variant(u, traces.map(|t| &t[i]), variant, split))
        .collect::<Result<Vec<_>>>()?;
    stack(&parts)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyNetwork {
    F32(Network<f32>),
    F64(Network<f64>),
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub variant: FeatureVariant,
    pub arch: Arch,
    pub seed: u64,
    pub n_tw: usize,
    pub net: AnyNetwork,
    pub normalizer: NormalizerParams,
    pub log: TrainLog,
}

fn network<T: Scalar>(arch: Arch, n: usize, n_tw: usize) -> Result<Network<T>> {
    match arch {
        Arch::Fnn => build_fnn(n),
        Arch::Cnn => build_cnn(n, n_tw),
    }
}

fn every_nth_row(m: &FeatureMatrix, stride: usize) -> FeatureMatrix {
    let idx: Vec<usize> = (0..m.n_rows()).step_by(stride).collect();
    FeatureMatrix {
        variant: m.variant,
        split: m.split,
        columns: m.columns.clone(),
        x: m.x.select(Axis(0), &idx),
        y: idx.iter().map(|&i| m.y[i]).collect(),
        unit: idx.iter().map(|&i| m.unit[i]).collect(),
        cycle: idx.iter().map(|&i| m.cycle[i]).collect(),
    }
}

/// Samples in the layout of the architecture, with the unit of each sample.
fn sample_set<T: Scalar>(arch: Arch, m: &FeatureMatrix, n_tw: usize, stride: usize) -> Result<(Box<dyn Samples<T>>, Vec<u32>, Vec<u32>)> {
    Ok(match arch {
        Arch::Fnn => {
            let r = if stride > 1 { RowSet::<T>::new(&every_nth_row(m, stride)) } else { RowSet::<T>::new(m) };
            let (u, c) = (r.unit.clone(), r.cycle.clone());
            (Box::new(r), u, c)
        }
        Arch::Cnn => {
            let w = sliding_windows::<T>(m, n_tw, stride)?;
            let (u, c) = (w.unit.clone(), w.cycle.clone());
            (Box::new(w), u, c)
        }
    })
}

fn train_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    arch: Arch,
    dev: &FeatureMatrix,
    seed: u64,
) -> Result<(Network<T>, TrainLog)> {
    let (set, units, _) = sample_set::<T>(arch, dev, cfg.n_tw, cfg.train_stride)?;
    let (tr, va) = split_validation(&units, cfg.val_frac, seed)?;
    let tr = Subset::new(set.as_ref(), tr);
    let va = Subset::new(set.as_ref(), va);
    let net = network::<T>(arch, dev.x.ncols(), cfg.n_tw)?;
    train(net, &tr, &va, &cfg.train_config(arch, seed))
}

/// Fits the normalizer on `dev` (raw features) and trains one network.
pub fn train_model(cfg: &ExperimentConfig, arch: Arch, dev: &FeatureMatrix, seed: u64) -> Result<TrainedModel> {
    let normalizer = fit_normalizer(dev)?;
    let dev_n = apply_normalizer(dev, &normalizer)?;
    let (net, log) = match cfg.precision {
        Precision::F32 => {
            let (n, l) = train_typed::<f32>(cfg, arch, &dev_n, seed)?;
            (AnyNetwork::F32(n), l)
        }
        Precision::F64 => {
            let (n, l) = train_typed::<f64>(cfg, arch, &dev_n, seed)?;
            (AnyNetwork::F64(n), l)
        }
    };
    log::info!(
        "{} {} seed {seed}: best epoch {} val rmse {:.3}",
        dev.variant.as_str(),
        arch.as_str(),
        log.best_epoch,
        log.best_val_rmse
    );
    Ok(TrainedModel { variant: dev.variant, arch, seed, n_tw: cfg.n_tw, net, normalizer, log })
}

fn predict_typed<T: Scalar>(net: &Network<T>, arch: Arch, m: &FeatureMatrix, n_tw: usize, scale: f64) -> Result<PredictionSet> {
    let (set, unit, cycle) = sample_set::<T>(arch, m, n_tw, 1)?;
    let y_hat: Vec<f64> = predict(net, set.as_ref(), PREDICT_CHUNK)?.into_iter().map(|v| v.as_f64() * scale).collect();
    let idx: Vec<usize> = (0..set.len()).collect();
    let (_, y) = set.gather(&idx);
    PredictionSet::new(y_hat, y.iter().map(|v| v.as_f64()).collect(), unit, cycle)
}

/// Predictions on raw (unnormalized) features of the model's variant.
pub fn predict_model(cfg: &ExperimentConfig, model: &TrainedModel, m: &FeatureMatrix) -> Result<PredictionSet> {
    if m.variant != model.variant {
        return Err(Error::Config(format!(
            "model expects {} features, got {}",
            model.variant.as_str(),
            m.variant.as_str()
        )));
    }
    let m = apply_normalizer(m, &model.normalizer)?;
    let scale = cfg.train_config(model.arch, model.seed).target_scale;
    match &model.net {
        AnyNetwork::F32(n) => predict_typed(n, model.arch, &m, model.n_tw, scale),
        AnyNetwork::F64(n) => predict_typed(n, model.arch, &m, model.n_tw, scale),
    }
}

pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &TrainedModel,
    test: &FeatureMatrix,
    t_eol: &BTreeMap<u32, u32>,
) -> Result<PrognosticReport> {
    let p = predict_model(cfg, model, test)?;
    let meta = serde_json::json!({
        "variant": model.variant,
        "arch": model.arch,
        "seed": model.seed,
        "best_epoch": model.log.best_epoch,
        "best_val_rmse": model.log.best_val_rmse,
    });
    build_report(&p, t_eol, HORIZON_THRESHOLD, HorizonMode::Mean, meta)
}

/// One (variant, architecture) configuration over every seed.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    arch: Arch,
    dev: &FeatureMatrix,
    test: &FeatureMatrix,
    t_eol: &BTreeMap<u32, u32>,
) -> Result<Vec<(TrainedModel, PrognosticReport)>> {
    (0..cfg.n_seeds)
        .map(|k| {
            let model = train_model(cfg, arch, dev, cfg.run_seed(k))?;
            let report = evaluate_model(cfg, &model, test, t_eol)?;
            Ok((model, report))
        })
        .collect()
}
