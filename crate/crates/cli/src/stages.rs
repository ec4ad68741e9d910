//! Pipeline stages behind the CLI. Every stage hashes its configuration and
//! input artifacts; when the manifest already holds that hash and the
//! recorded outputs are intact the stage is skipped.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use phm_core::calibration::{fit_surrogate, theta_rmse, CalibratedTrace, SurrogateModel};
use phm_core::evaluation::{build_report, HorizonMode, PrognosticReport, HORIZON_THRESHOLD};
use phm_core::features::{FeatureVariant, NormalizerParams, Split};
use phm_core::fleet::{simulate_spec, UnitRecord, UnitSpec};
use phm_core::nnet::{read_network, write_network, TrainLog};

use crate::config::{Ablation, Arch, CalibrationSource, ExperimentConfig, Precision};
use crate::experiments::{
    calibration_quality_study, dataset_size_study, default_perturbations, feature_set_study, summarize, RunSpec,
    Runner,
};
use crate::pipeline::{
    calibrate_units, feature_matrix, model_information, perturb_traces, predict_model, train_model, AnyNetwork,
    Dataset, TrainedModel,
};
use crate::store::{
    file_hash, parse_dataset, parse_trace, sha256_hex, trace_csv, dataset_csv, MetricSummary, RunManifest,
    StageRecord, Store, UnitMeta,
};

pub const CONFIG_FILE: &str = "config.json";
pub const UNITS_FILE: &str = "data/units.json";
pub const SURROGATE_FILE: &str = "models/surrogate.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTable {
    pub dev: Vec<UnitMeta>,
    pub test: Vec<UnitMeta>,
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

pub fn data_file(split: Split, unit: u32) -> String {
    format!("data/{}/unit_{unit:02}.csv", split_name(split))
}

pub fn trace_file(split: Split, unit: u32) -> String {
    format!("traces/{}/unit_{unit:02}.csv", split_name(split))
}

/// Tag of the main configuration, e.g. `FULL_HYBRID_CNN` or
/// `FULL_HYBRID_CNN_snr15`.
pub fn run_tag(cfg: &ExperimentConfig) -> String {
    main_spec(cfg).tag()
}

fn main_spec(cfg: &ExperimentConfig) -> RunSpec {
    RunSpec { perturbation: cfg.perturbation, ..RunSpec::new(cfg.variant, cfg.arch, cfg.calibration_source) }
        .canonical()
}

pub fn model_file(tag: &str, k: usize) -> String {
    format!("models/{tag}/seed_{k}.bin")
}

/// Outputs written by a stage body: relative path and bytes.
type Outputs = Vec<(String, Vec<u8>)>;

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Configuration, output directory and manifest of one pipeline run.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub store: Store,
    pub manifest: RunManifest,
}

impl Pipeline {
    pub fn open(cfg: ExperimentConfig, store: Store) -> Result<Self> {
        cfg.validate()?;
        let mut manifest = RunManifest::load(&store)?;
        manifest.config = Some(cfg.clone());
        manifest.seeds = (0..cfg.n_seeds).map(|k| cfg.run_seed(k)).collect();
        let hash = store.write_json(CONFIG_FILE, &cfg)?;
        manifest.artifacts.insert(CONFIG_FILE.into(), hash);
        Ok(Pipeline { cfg, store, manifest })
    }

    /// Runs `body` unless the stage is up to date. Returns whether it ran.
    fn stage<F>(&mut self, key: &str, settings: Value, inputs: &[String], body: F) -> Result<bool>
    where
        F: FnOnce(&mut Self) -> Result<Outputs>,
    {
        let mut hashes = BTreeMap::new();
        for rel in inputs {
            let h = file_hash(&self.store.path(rel)).with_context(|| format!("stage {key} needs {rel}"))?;
            hashes.insert(rel.clone(), h);
        }
        let input_hash = sha256_hex(serde_json::to_string(&json!({ "stage": key, "settings": settings, "inputs": hashes }))?.as_bytes());
        if self.manifest.up_to_date(&self.store, key, &input_hash) {
            log::info!("{key}: up to date");
            self.store.log_stage(&format!("{key} skipped"))?;
            return Ok(false);
        }
        let t = Instant::now();
        let outputs = body(self)?;
        let mut out = BTreeMap::new();
        for (rel, bytes) in outputs {
            let h = self.store.write(&rel, &bytes)?;
            out.insert(rel, h);
        }
        for (k, v) in &hashes {
            self.manifest.artifacts.insert(k.clone(), v.clone());
        }
        self.manifest.record(key, StageRecord { input_hash, inputs: hashes, outputs: out, seconds: t.elapsed().as_secs_f64() });
        self.manifest.save(&self.store)?;
        self.store.log_stage(key)?;
        log::info!("{key}: done in {:.1} s", t.elapsed().as_secs_f64());
        Ok(true)
    }

    fn specs(&self, split: Split) -> &[UnitSpec] {
        match split {
            Split::Dev => &self.cfg.fleet.dev,
            Split::Test => &self.cfg.fleet.test,
        }
    }

    fn data_files(&self, split: Split) -> Vec<String> {
        let mut v = vec![UNITS_FILE.to_string()];
        v.extend(self.specs(split).iter().map(|s| data_file(split, s.unit_id)));
        v
    }

    fn trace_files(&self, split: Split) -> Vec<String> {
        self.specs(split).iter().map(|s| trace_file(split, s.unit_id)).collect()
    }

    /// Simulates the fleet, one CSV per unit plus the unit table.
    pub fn generate(&mut self) -> Result<bool> {
        let settings = serde_json::to_value(&self.cfg.fleet)?;
        self.stage("generate", settings, &[], |p| {
            let fleet = &p.cfg.fleet;
            let mut out = Outputs::new();
            let mut table = UnitTable { dev: Vec::new(), test: Vec::new() };
            let mut failures = Vec::new();
            for (split, specs) in [(Split::Dev, &fleet.dev), (Split::Test, &fleet.test)] {
                for spec in specs {
                    match simulate_spec(fleet, spec) {
                        Ok(u) => {
                            out.push((data_file(split, u.unit_id), dataset_csv(std::slice::from_ref(&u))?));
                            match split {
                                Split::Dev => table.dev.push(UnitMeta::of(&u)),
                                Split::Test => table.test.push(UnitMeta::of(&u)),
                            }
                        }
                        Err(e) => failures.push(format!("unit {}: {e}", spec.unit_id)),
                    }
                }
            }
            if !failures.is_empty() {
                bail!("generation failed for {}", failures.join("; "));
            }
            out.push((UNITS_FILE.into(), json_bytes(&table)?));
            Ok(out)
        })
    }

    pub fn load_units(&self, split: Split) -> Result<Vec<UnitRecord>> {
        let table: UnitTable = self.store.read_json(UNITS_FILE)?;
        let metas = match split {
            Split::Dev => table.dev,
            Split::Test => table.test,
        };
        let mut units = Vec::with_capacity(metas.len());
        for m in &metas {
            let bytes = self.store.read(&data_file(split, m.unit_id))?;
            units.extend(parse_dataset(&bytes, std::slice::from_ref(m))?);
        }
        Ok(units)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        Ok(Dataset { dev: self.load_units(Split::Dev)?, test: self.load_units(Split::Test)? })
    }

    /// Loads the filter traces of a split; every unit must have one.
    pub fn load_traces(&self, split: Split, units: &[UnitRecord]) -> Result<Vec<CalibratedTrace>> {
        units
            .iter()
            .map(|u| {
                let rel = trace_file(split, u.unit_id);
                if !self.store.exists(&rel) {
                    bail!("no calibrated trace for unit {} ({rel}); run calibrate first", u.unit_id);
                }
                Ok(parse_trace(&self.store.read(&rel)?, u.unit_id, self.cfg.burn_in_samples)?)
            })
            .collect()
    }

    /// Fits the response surrogate on the development units' noise-free
    /// responses at their true θ.
    fn surrogate(&mut self) -> Result<SurrogateModel> {
        let inputs = self.data_files(Split::Dev);
        let settings = serde_json::to_value(&self.cfg.surrogate)?;
        self.stage("surrogate", settings, &inputs, |p| {
            let dev = p.load_units(Split::Dev)?;
            let truth: Vec<CalibratedTrace> = dev.iter().map(CalibratedTrace::ground_truth).collect();
            let pairs: Vec<(&UnitRecord, &CalibratedTrace)> = dev.iter().zip(&truth).collect();
            let model = fit_surrogate(&pairs, &p.cfg.surrogate)?;
            log::info!("surrogate held-out relative error {:?}", model.heldout_rel_error);
            let mut bytes = Vec::new();
            model.write(&mut bytes)?;
            Ok(vec![(SURROGATE_FILE.into(), bytes)])
        })?;
        Ok(SurrogateModel::read(&self.store.read(SURROGATE_FILE)?[..])?)
    }

    /// Runs the filter over every unit of a split. A unit whose filter fails
    /// is quarantined: reported in the manifest, no trace written.
    pub fn calibrate(&mut self, split: Split) -> Result<bool> {
        let surrogate = if self.cfg.use_surrogate { Some(self.surrogate()?) } else { None };
        let mut inputs = self.data_files(split);
        if surrogate.is_some() {
            inputs.push(SURROGATE_FILE.into());
        }
        let settings = json!({
            "ukf": self.cfg.ukf_config(),
            "burn_in": self.cfg.burn_in_samples,
            "surrogate": self.cfg.use_surrogate,
        });
        let key = format!("calibrate:{}", split_name(split));
        self.stage(&key, settings, &inputs, |p| {
            let units = p.load_units(split)?;
            let mut out = Outputs::new();
            for u in &units {
                match calibrate_units(&p.cfg, std::slice::from_ref(u), surrogate.as_ref()) {
                    Ok(mut t) => {
                        let t = t.remove(0);
                        let rmse = theta_rmse(&t, u, p.cfg.burn_in_samples)?;
                        log::info!("unit {}: θ̂ rmse {:.2e} {:.2e} {:.2e}", u.unit_id, rmse[0], rmse[1], rmse[2]);
                        p.manifest.calibration_rmse.insert(u.unit_id, rmse);
                        p.manifest.quarantined.remove(&u.unit_id);
                        out.push((trace_file(split, u.unit_id), trace_csv(&t)?));
                    }
                    Err(e) => {
                        log::warn!("unit {} quarantined: {e}", u.unit_id);
                        p.manifest.calibration_rmse.remove(&u.unit_id);
                        p.manifest.quarantined.insert(u.unit_id, e.to_string());
                    }
                }
            }
            Ok(out)
        })
    }

    /// Model information for a split in the main configuration: None for the
    /// data-driven variant, otherwise filter or ground-truth traces with the
    /// configured perturbation applied.
    fn information(&self, split: Split, units: &[UnitRecord]) -> Result<Option<Vec<CalibratedTrace>>> {
        if !self.cfg.variant.needs_trace() {
            return Ok(None);
        }
        let ukf = match self.cfg.calibration_source {
            CalibrationSource::Ukf => Some(self.load_traces(split, units)?),
            CalibrationSource::GroundTruth => None,
        };
        let info = model_information(self.cfg.calibration_source, units, ukf.as_deref())?;
        Ok(Some(if self.cfg.perturbation.is_none() { info } else { perturb_traces(&self.cfg, &info, &self.cfg.perturbation)? }))
    }

    fn info_inputs(&self, split: Split) -> Vec<String> {
        let mut v = self.data_files(split);
        if self.cfg.variant.needs_trace() && self.cfg.calibration_source == CalibrationSource::Ukf {
            v.extend(self.trace_files(split));
        }
        v
    }

    fn model_settings(&self) -> Value {
        json!({
            "variant": self.cfg.variant,
            "arch": self.cfg.arch,
            "source": self.cfg.calibration_source,
            "perturbation": self.cfg.perturbation,
            "train": self.cfg.train_config(self.cfg.arch, 0),
            "precision": self.cfg.precision,
            "n_tw": self.cfg.n_tw,
            "train_stride": self.cfg.train_stride,
            "val_frac": self.cfg.val_frac,
            "seeds": self.manifest.seeds,
        })
    }

    /// Trains one network per seed. A seed that fails is logged and skipped;
    /// the stage fails only when no seed succeeds.
    pub fn train(&mut self) -> Result<bool> {
        let tag = run_tag(&self.cfg);
        let inputs = self.info_inputs(Split::Dev);
        let settings = self.model_settings();
        self.stage(&format!("train:{tag}"), settings, &inputs, |p| {
            let units = p.load_units(Split::Dev)?;
            let info = p.information(Split::Dev, &units)?;
            let dev = feature_matrix(p.cfg.variant, Split::Dev, &units, info.as_deref())?;
            let mut out = Outputs::new();
            for k in 0..p.cfg.n_seeds {
                let seed = p.cfg.run_seed(k);
                match train_model(&p.cfg, p.cfg.arch, &dev, seed) {
                    Ok(m) => {
                        out.push((model_file(&tag, k), model_bytes(&m)?));
                        out.push((format!("models/{tag}/seed_{k}_log.csv"), m.log.to_csv().into_bytes()));
                    }
                    Err(e) => log::error!("{tag} seed {seed} failed: {e}"),
                }
            }
            if out.is_empty() {
                bail!("every seed of {tag} failed to train");
            }
            Ok(out)
        })
    }

    fn load_models(&self, tag: &str) -> Result<Vec<TrainedModel>> {
        let rec = self
            .manifest
            .stages
            .get(&format!("train:{tag}"))
            .ok_or_else(|| anyhow!("no trained models for {tag}; run train first"))?;
        rec.outputs
            .keys()
            .filter(|k| k.ends_with(".bin"))
            .map(|rel| {
                if !self.store.exists(rel) {
                    bail!("model file {rel} is missing");
                }
                read_model(&self.store.read(rel)?, self.cfg.precision)
            })
            .collect()
    }

    /// Per-seed reports, per-cycle CSVs and the mean ± std summary.
    pub fn evaluate(&mut self) -> Result<bool> {
        let tag = run_tag(&self.cfg);
        let train_key = format!("train:{tag}");
        let models_rec = self
            .manifest
            .stages
            .get(&train_key)
            .ok_or_else(|| anyhow!("no trained models for {tag}; run train first"))?;
        let mut inputs: Vec<String> = models_rec.outputs.keys().filter(|k| k.ends_with(".bin")).cloned().collect();
        inputs.extend(self.info_inputs(Split::Test));
        let settings = json!({ "horizon_threshold": HORIZON_THRESHOLD, "target_scale": self.cfg.train_config(self.cfg.arch, 0).target_scale });
        let ran = self.stage(&format!("evaluate:{tag}"), settings, &inputs, |p| {
            let models = p.load_models(&tag)?;
            let units = p.load_units(Split::Test)?;
            let info = p.information(Split::Test, &units)?;
            let test = feature_matrix(p.cfg.variant, Split::Test, &units, info.as_deref())?;
            let t_eol = units.iter().map(|u| (u.unit_id, u.t_eol)).collect();
            let mut out = Outputs::new();
            let mut reports = Vec::new();
            for (k, m) in models.iter().enumerate() {
                let pred = predict_model(&p.cfg, m, &test)?;
                let meta = json!({ "variant": m.variant, "arch": m.arch, "seed": m.seed, "best_epoch": m.log.best_epoch });
                let r = build_report(&pred, &t_eol, HORIZON_THRESHOLD, HorizonMode::Mean, meta)?;
                out.push((format!("reports/{tag}/seed_{k}.json"), json_bytes(&r)?));
                out.push((format!("reports/{tag}/seed_{k}_cycles.csv"), r.per_cycle_csv().into_bytes()));
                reports.push(r);
            }
            let summary = summarize(&reports);
            out.push((format!("reports/{tag}/summary.json"), json_bytes(&summary)?));
            p.manifest.metrics.insert(tag.clone(), summary);
            Ok(out)
        })?;
        Ok(ran)
    }

    /// One ablation study over freshly trained models, written as JSON.
    pub fn ablate(&mut self, study: Ablation) -> Result<bool> {
        let name = match study {
            Ablation::None => bail!("choose an ablation study"),
            Ablation::DatasetSize => "dataset_size",
            Ablation::FeatureSet => "feature_set",
            Ablation::CalibrationQuality => "calibration_quality",
        };
        let mut inputs = self.data_files(Split::Dev);
        inputs.extend(self.data_files(Split::Test).into_iter().skip(1));
        let needs_ukf = study != Ablation::FeatureSet || self.cfg.feature_set_source == CalibrationSource::Ukf;
        if needs_ukf {
            inputs.extend(self.trace_files(Split::Dev));
            inputs.extend(self.trace_files(Split::Test));
        }
        let mut settings = self.model_settings();
        settings["small_dev_units"] = json!(self.cfg.small_dev_units);
        settings["feature_set_source"] = json!(self.cfg.feature_set_source);
        settings["mi_bins"] = json!(self.cfg.mi_bins);
        let key = format!("ablate:{name}_{}", self.cfg.arch.as_str());
        self.stage(&key, settings, &inputs, |p| {
            let data = p.load_dataset()?;
            let (dev_ukf, test_ukf) = if needs_ukf {
                (Some(p.load_traces(Split::Dev, &data.dev)?), Some(p.load_traces(Split::Test, &data.test)?))
            } else {
                (None, None)
            };
            let mut r = Runner::new(p.cfg.clone(), data, dev_ukf, test_ukf);
            let report = match study {
                Ablation::DatasetSize => serde_json::to_value(dataset_size_study(&mut r)?)?,
                Ablation::FeatureSet => serde_json::to_value(feature_set_study(&mut r)?)?,
                Ablation::CalibrationQuality => {
                    serde_json::to_value(calibration_quality_study(&mut r, &default_perturbations())?)?
                }
                Ablation::None => unreachable!(),
            };
            Ok(vec![(format!("ablations/{name}_{}.json", p.cfg.arch.as_str()), json_bytes(&report)?)])
        })
    }

    /// Collects metric summaries and finished ablations into one report.
    pub fn report(&mut self) -> Result<bool> {
        let mut inputs: Vec<String> = self
            .manifest
            .artifacts
            .keys()
            .filter(|k| k.ends_with("summary.json") || k.starts_with("ablations/"))
            .cloned()
            .collect();
        inputs.sort();
        self.stage("report", json!({}), &inputs, |p| {
            let mut ablations = BTreeMap::new();
            for rel in inputs.iter().filter(|k| k.starts_with("ablations/")) {
                let v: Value = p.store.read_json(rel)?;
                let name = rel.trim_start_matches("ablations/").trim_end_matches(".json").to_string();
                ablations.insert(name, v);
            }
            let report = json!({
                "metrics": p.manifest.metrics,
                "calibration_rmse": p.manifest.calibration_rmse,
                "quarantined": p.manifest.quarantined,
                "ablations": ablations,
            });
            let mut csv = String::from("config,rmse_mean,rmse_std,s_mean,s_std,horizon_mean,horizon_std,n_seeds\n");
            for (tag, m) in &p.manifest.metrics {
                csv.push_str(&metric_row(tag, m));
            }
            Ok(vec![("report.json".into(), json_bytes(&report)?), ("report.csv".into(), csv.into_bytes())])
        })
    }

    /// The whole pipeline in the order: calibrate dev, train, calibrate test,
    /// predict.
    pub fn run_all(&mut self) -> Result<()> {
        self.generate()?;
        self.calibrate(Split::Dev)?;
        self.train()?;
        self.calibrate(Split::Test)?;
        self.evaluate()?;
        self.report()?;
        Ok(())
    }
}

fn metric_row(tag: &str, m: &MetricSummary) -> String {
    format!(
        "{tag},{},{},{},{},{},{},{}\n",
        m.rmse_mean, m.rmse_std, m.s_mean, m.s_std, m.horizon_mean, m.horizon_std, m.n_seeds
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    variant: FeatureVariant,
    arch: Arch,
    seed: u64,
    n_tw: usize,
    normalizer: NormalizerParams,
    log: TrainLog,
}

pub fn model_bytes(m: &TrainedModel) -> Result<Vec<u8>> {
    let meta = serde_json::to_value(ModelMeta {
        variant: m.variant,
        arch: m.arch,
        seed: m.seed,
        n_tw: m.n_tw,
        normalizer: m.normalizer.clone(),
        log: m.log.clone(),
    })?;
    let mut bytes = Vec::new();
    match &m.net {
        AnyNetwork::F32(n) => write_network(n, meta, &mut bytes)?,
        AnyNetwork::F64(n) => write_network(n, meta, &mut bytes)?,
    }
    Ok(bytes)
}

pub fn read_model(bytes: &[u8], precision: Precision) -> Result<TrainedModel> {
    let (net, header) = match precision {
        Precision::F32 => {
            let (n, h) = read_network::<f32, _>(bytes)?;
            (AnyNetwork::F32(n), h)
        }
        Precision::F64 => {
            let (n, h) = read_network::<f64, _>(bytes)?;
            (AnyNetwork::F64(n), h)
        }
    };
    let meta: ModelMeta = serde_json::from_value(header.meta)?;
    Ok(TrainedModel {
        variant: meta.variant,
        arch: meta.arch,
        seed: meta.seed,
        n_tw: meta.n_tw,
        net,
        normalizer: meta.normalizer,
        log: meta.log,
    })
}

/// Reports of the main configuration, read back from disk.
pub fn load_reports(store: &Store, tag: &str, n: usize) -> Result<Vec<PrognosticReport>> {
    (0..n).map(|k| store.read_json(&format!("reports/{tag}/seed_{k}.json"))).collect()
}
