//! The experiment matrix: seeded multi-run configurations and the three
//! ablation studies, with shared runs computed once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use phm_core::calibration::CalibratedTrace;
use phm_core::evaluation::{mean_std, mutual_information_ranking, PrognosticReport, MI_TOP};
use phm_core::features::{FeatureVariant, Split};
use phm_core::nnet::TrainLog;
use phm_core::{Error, Result};

use crate::config::{Arch, CalibrationSource, ExperimentConfig, Perturbation};
use crate::pipeline::{feature_matrix, model_information, perturb_traces, run_seeds, Dataset, TrainedModel};
use crate::store::MetricSummary;

/// One cell of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub variant: FeatureVariant,
    pub arch: Arch,
    pub source: CalibrationSource,
    pub perturbation: Perturbation,
    /// Restricts the development units; None keeps all of them.
    pub dev_units: Option<Vec<u32>>,
}

impl RunSpec {
    pub fn new(variant: FeatureVariant, arch: Arch, source: CalibrationSource) -> Self {
        RunSpec { variant, arch, source, perturbation: Perturbation::default(), dev_units: None }
    }

    /// The data-driven variant ignores model information, so its source and
    /// perturbation are normalized away and equivalent runs share a tag.
    pub fn canonical(mut self) -> Self {
        if self.variant == FeatureVariant::DataDriven {
            self.source = CalibrationSource::Ukf;
            self.perturbation = Perturbation::default();
        }
        self
    }

    pub fn tag(&self) -> String {
        let mut t = format!("{}_{}", self.variant.as_str(), self.arch.as_str());
        if self.variant != FeatureVariant::DataDriven && self.source == CalibrationSource::GroundTruth {
            t.push_str("_gt");
        }
        if !self.perturbation.is_none() {
            t.push('_');
            t.push_str(&self.perturbation.label());
        }
        if let Some(units) = &self.dev_units {
            let ids: Vec<String> = units.iter().map(|u| u.to_string()).collect();
            t.push_str("_dev");
            t.push_str(&ids.join("-"));
        }
        t
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigResult {
    pub spec: RunSpec,
    pub tag: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<PrognosticReport>,
    pub logs: Vec<TrainLog>,
    pub summary: MetricSummary,
}

pub fn summarize(reports: &[PrognosticReport]) -> MetricSummary {
    let pick = |f: &dyn Fn(&PrognosticReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (rmse_mean, rmse_std) = pick(&|r| r.rmse);
    let (s_mean, s_std) = pick(&|r| r.s_score);
    let (horizon_mean, horizon_std) = pick(&|r| r.fleet_avg_horizon);
    MetricSummary { rmse_mean, rmse_std, s_mean, s_std, horizon_mean, horizon_std, n_seeds: reports.len() }
}

/// Relative change (b − a) / a.
pub fn rel_delta(a: f64, b: f64) -> f64 {
    (b - a) / a
}

/// Dataset plus filter traces, and a cache of finished configurations.
pub struct Runner {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub dev_ukf: Option<Vec<CalibratedTrace>>,
    pub test_ukf: Option<Vec<CalibratedTrace>>,
    cache: BTreeMap<String, ConfigResult>,
    /// Trained models of the most recent configuration, kept for persistence.
    pub last_models: Vec<TrainedModel>,
}

impl Runner {
    pub fn new(
        cfg: ExperimentConfig,
        data: Dataset,
        dev_ukf: Option<Vec<CalibratedTrace>>,
        test_ukf: Option<Vec<CalibratedTrace>>,
    ) -> Self {
        Runner { cfg, data, dev_ukf, test_ukf, cache: BTreeMap::new(), last_models: Vec::new() }
    }

    pub fn seed_cache(&mut self, result: ConfigResult) {
        self.cache.insert(result.tag.clone(), result);
    }

    pub fn cached(&self, spec: &RunSpec) -> Option<&ConfigResult> {
        self.cache.get(&spec.clone().canonical().tag())
    }

    fn information(&self, spec: &RunSpec, split: Split) -> Result<(Vec<phm_core::fleet::UnitRecord>, Option<Vec<CalibratedTrace>>)> {
        let (all, ukf) = match split {
            Split::Dev => (&self.data.dev, self.dev_ukf.as_deref()),
            Split::Test => (&self.data.test, self.test_ukf.as_deref()),
        };
        let keep: Vec<usize> = match (&spec.dev_units, split) {
            (Some(ids), Split::Dev) => (0..all.len()).filter(|&i| ids.contains(&all[i].unit_id)).collect(),
            _ => (0..all.len()).collect(),
        };
        if keep.is_empty() {
            return Err(Error::Config(format!("no units selected for {}", spec.tag())));
        }
        let units: Vec<_> = keep.iter().map(|&i| all[i].clone()).collect();
        if spec.variant == FeatureVariant::DataDriven {
            return Ok((units, None));
        }
        let ukf_sel: Option<Vec<CalibratedTrace>> = ukf.map(|t| keep.iter().map(|&i| t[i].clone()).collect());
        let info = model_information(spec.source, &units, ukf_sel.as_deref())?;
        let info = if spec.perturbation.is_none() {
            info
        } else {
            perturb_traces(&self.cfg, &info, &spec.perturbation)?
        };
        Ok((units, Some(info)))
    }

    /// Trains and evaluates a configuration over all seeds, or returns the
    /// cached result.
    pub fn run(&mut self, spec: RunSpec) -> Result<ConfigResult> {
        let spec = spec.canonical();
        let tag = spec.tag();
        if let Some(r) = self.cache.get(&tag) {
            return Ok(r.clone());
        }
        let (dev_units, dev_info) = self.information(&spec, Split::Dev)?;
        let (test_units, test_info) = self.information(&spec, Split::Test)?;
        let dev = feature_matrix(spec.variant, Split::Dev, &dev_units, dev_info.as_deref())?;
        let test = feature_matrix(spec.variant, Split::Test, &test_units, test_info.as_deref())?;
        let runs = run_seeds(&self.cfg, spec.arch, &dev, &test, &self.data.t_eol())?;
        let reports: Vec<PrognosticReport> = runs.iter().map(|(_, r)| r.clone()).collect();
        let result = ConfigResult {
            tag: tag.clone(),
            seeds: runs.iter().map(|(m, _)| m.seed).collect(),
            logs: runs.iter().map(|(m, _)| m.log.clone()).collect(),
            summary: summarize(&reports),
            reports,
            spec,
        };
        log::info!(
            "{tag}: rmse {:.3} ± {:.3}, horizon {:.2}",
            result.summary.rmse_mean,
            result.summary.rmse_std,
            result.summary.horizon_mean
        );
        self.last_models = runs.into_iter().map(|(m, _)| m).collect();
        self.cache.insert(tag, result.clone());
        Ok(result)
    }

    /// Normalized mutual information of every full-hybrid feature with RUL
    /// on the development set.
    pub fn mi_ranking(&self, source: CalibrationSource) -> Result<Vec<(String, f64)>> {
        let spec = RunSpec::new(FeatureVariant::FullHybrid, self.cfg.arch, source);
        let (units, info) = self.information(&spec, Split::Dev)?;
        let m = feature_matrix(FeatureVariant::FullHybrid, Split::Dev, &units, info.as_deref())?;
        mutual_information_ranking(m.x.view(), &m.columns, &m.y, self.cfg.mi_bins)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSizeReport {
    pub arch: Arch,
    pub small_dev_units: Vec<u32>,
    pub full_data_driven: MetricSummary,
    pub full_hybrid: MetricSummary,
    pub small_data_driven: MetricSummary,
    pub small_hybrid: MetricSummary,
    /// rel. Δ RMSE from the full to the reduced development set.
    pub rel_delta_rmse_data_driven: f64,
    pub rel_delta_rmse_hybrid: f64,
    pub rel_delta_s_data_driven: f64,
    pub rel_delta_s_hybrid: f64,
}

pub fn dataset_size_study(r: &mut Runner) -> Result<DatasetSizeReport> {
    let arch = r.cfg.arch;
    let src = r.cfg.calibration_source;
    let small = r.cfg.small_dev_units.clone();
    let spec = |v: FeatureVariant, units: Option<Vec<u32>>| RunSpec { dev_units: units, ..RunSpec::new(v, arch, src) };
    let fd = r.run(spec(FeatureVariant::DataDriven, None))?.summary;
    let fh = r.run(spec(FeatureVariant::FullHybrid, None))?.summary;
    let sd = r.run(spec(FeatureVariant::DataDriven, Some(small.clone())))?.summary;
    let sh = r.run(spec(FeatureVariant::FullHybrid, Some(small.clone())))?.summary;
    Ok(DatasetSizeReport {
        arch,
        small_dev_units: small,
        rel_delta_rmse_data_driven: rel_delta(fd.rmse_mean, sd.rmse_mean),
        rel_delta_rmse_hybrid: rel_delta(fh.rmse_mean, sh.rmse_mean),
        rel_delta_s_data_driven: rel_delta(fd.s_mean, sd.s_mean),
        rel_delta_s_hybrid: rel_delta(fh.s_mean, sh.s_mean),
        full_data_driven: fd,
        full_hybrid: fh,
        small_data_driven: sd,
        small_hybrid: sh,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSetRow {
    pub variant: FeatureVariant,
    pub n_features: usize,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSetReport {
    pub arch: Arch,
    pub source: CalibrationSource,
    pub rows: Vec<FeatureSetRow>,
    pub mi_bins: usize,
    /// The most informative features, highest first.
    pub mi_top: Vec<(String, f64)>,
    pub mi_all: Vec<(String, f64)>,
}

pub fn feature_set_study(r: &mut Runner) -> Result<FeatureSetReport> {
    let arch = r.cfg.arch;
    let source = r.cfg.feature_set_source;
    let mut rows = Vec::new();
    for v in FeatureVariant::ALL {
        let s = r.run(RunSpec::new(v, arch, source))?.summary;
        rows.push(FeatureSetRow { variant: v, n_features: v.n_columns(), summary: s });
    }
    let mi_all = r.mi_ranking(source)?;
    Ok(FeatureSetReport {
        arch,
        source,
        rows,
        mi_bins: r.cfg.mi_bins,
        mi_top: mi_all.iter().take(MI_TOP).cloned().collect(),
        mi_all,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub label: String,
    pub perturbation: Perturbation,
    pub summary: MetricSummary,
    /// Relative RMSE change against the clean hybrid model.
    pub rel_delta_rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationQualityReport {
    pub arch: Arch,
    pub clean_hybrid: MetricSummary,
    pub data_driven: MetricSummary,
    pub rows: Vec<PerturbationRow>,
}

/// Bias rows first, then noise rows, as in the published table.
pub fn default_perturbations() -> Vec<Perturbation> {
    vec![
        Perturbation { snr_db: None, alpha_bias: Some(0.5) },
        Perturbation { snr_db: None, alpha_bias: Some(-0.5) },
        Perturbation { snr_db: Some(20.0), alpha_bias: None },
        Perturbation { snr_db: Some(15.0), alpha_bias: None },
    ]
}

pub fn calibration_quality_study(r: &mut Runner, perturbations: &[Perturbation]) -> Result<CalibrationQualityReport> {
    let arch = r.cfg.arch;
    let src = r.cfg.calibration_source;
    let clean = r.run(RunSpec::new(FeatureVariant::FullHybrid, arch, src))?.summary;
    let dd = r.run(RunSpec::new(FeatureVariant::DataDriven, arch, src))?.summary;
    let mut rows = Vec::new();
    for p in perturbations {
        let s = r.run(RunSpec { perturbation: *p, ..RunSpec::new(FeatureVariant::FullHybrid, arch, src) })?.summary;
        rows.push(PerturbationRow {
            label: p.label(),
            perturbation: *p,
            rel_delta_rmse: rel_delta(clean.rmse_mean, s.rmse_mean),
            summary: s,
        });
    }
    Ok(CalibrationQualityReport { arch, clean_hybrid: clean, data_driven: dd, rows })
}
