//! On-disk artifacts: dataset and trace CSVs, feature files, the run
//! manifest with content hashes, and the stage-order log.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use phm_core::calibration::CalibratedTrace;
use phm_core::engine::{
    evaluate_model, HealthState, OperatingPoint, SensorFrame, SENSOR_NAMES, THETA_NAMES, VIRTUAL_NAMES,
};
use phm_core::features::{FeatureMatrix, NormalizerParams};
use phm_core::fleet::{FailureMode, FlightCycle, RouteClass, Sample, UnitRecord};

use crate::config::ExperimentConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

/// Output directory with path helpers relative to its root.
#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Store { root })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Writes `bytes` to `rel` and returns its hash.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(sha256_hex(bytes))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<String> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let p = self.path(rel);
        fs::read(&p).with_context(|| format!("reading {}", p.display()))
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.read(rel)?).with_context(|| format!("parsing {rel}"))?)
    }

    pub fn log_stage(&self, line: &str) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.path(STAGE_LOG))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn stage_log(&self) -> Result<Vec<String>> {
        if !self.exists(STAGE_LOG) {
            return Ok(Vec::new());
        }
        Ok(String::from_utf8(self.read(STAGE_LOG)?)?.lines().map(str::to_owned).collect())
    }
}

pub const STAGE_LOG: &str = "stages.log";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash over the stage key, its configuration and its input artifacts.
    pub input_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub s_mean: f64,
    pub s_std: f64,
    pub horizon_mean: f64,
    pub horizon_std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<ExperimentConfig>,
    pub seeds: Vec<u64>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Every artifact produced so far, with its SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Per-unit, per-component θ̂ RMSE against the ground truth.
    pub calibration_rmse: BTreeMap<u32, [f64; 3]>,
    /// Units whose filter failed, with the error.
    #[serde(default)]
    pub quarantined: BTreeMap<u32, String>,
}

impl RunManifest {
    pub fn load(store: &Store) -> Result<Self> {
        if store.exists(MANIFEST) {
            store.read_json(MANIFEST)
        } else {
            Ok(RunManifest::default())
        }
    }

    pub fn save(&self, store: &Store) -> Result<()> {
        store.write_json(MANIFEST, self)?;
        Ok(())
    }

    /// True when the stage ran with the same inputs and its outputs are intact.
    pub fn up_to_date(&self, store: &Store, key: &str, input_hash: &str) -> bool {
        let Some(rec) = self.stages.get(key) else { return false };
        rec.input_hash == input_hash
            && rec
                .outputs
                .iter()
                .all(|(rel, h)| file_hash(&store.path(rel)).map(|x| &x == h).unwrap_or(false))
    }

    pub fn record(&mut self, key: &str, rec: StageRecord) {
        for (k, v) in &rec.outputs {
            self.artifacts.insert(k.clone(), v.clone());
        }
        self.stages.insert(key.to_owned(), rec);
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))
}

fn num(v: f64) -> String {
    // Display prints the shortest string that parses back to the same value.
    v.to_string()
}

/// Per-unit facts that the sample CSV does not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMeta {
    pub unit_id: u32,
    pub route: RouteClass,
    pub failure_mode: FailureMode,
    pub seed: u64,
    pub t_s: u32,
    pub t_eol: u32,
    pub n_samples: usize,
}

impl UnitMeta {
    pub fn of(u: &UnitRecord) -> Self {
        UnitMeta {
            unit_id: u.unit_id,
            route: u.route,
            failure_mode: u.failure_mode,
            seed: u.seed,
            t_s: u.t_s,
            t_eol: u.t_eol,
            n_samples: u.n_samples(),
        }
    }
}

pub fn dataset_header() -> Vec<String> {
    let mut h: Vec<String> = ["unit", "cycle", "sample", "alt", "mach", "tra", "t2"].map(String::from).to_vec();
    h.extend(SENSOR_NAMES.iter().map(|s| s.to_string()));
    h.extend(THETA_NAMES.iter().map(|s| s.to_string()));
    h.push("rul".into());
    h
}

/// One split as CSV: unit, cycle, sample, w, noisy sensors, true θ, rul.
pub fn dataset_csv(units: &[UnitRecord]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(dataset_header())?;
    for u in units {
        for c in &u.cycles {
            let theta = u.ground_truth_theta[(c.cycle_index - 1) as usize].to_array();
            for (k, s) in c.samples.iter().enumerate() {
                let mut rec = vec![u.unit_id.to_string(), c.cycle_index.to_string(), k.to_string()];
                rec.extend(s.w.to_array().map(num));
                rec.extend(s.xs_noisy.to_array().map(num));
                rec.extend(theta.map(num));
                rec.push(c.rul_label.to_string());
                w.write_record(&rec)?;
            }
        }
    }
    finish(w)
}

/// Rebuilds unit records; noise-free responses are recomputed from (w, θ),
/// which reproduces the generator's values exactly.
pub fn parse_dataset(bytes: &[u8], meta: &[UnitMeta]) -> Result<Vec<UnitRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != dataset_header() {
        bail!("unexpected dataset header");
    }
    let mut units: Vec<UnitRecord> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> { Ok(rec[i].parse::<f64>().with_context(|| format!("field {i}"))?) };
        let unit_id: u32 = rec[0].parse()?;
        let cycle: u32 = rec[1].parse()?;
        let w = OperatingPoint { alt: f(3)?, mach: f(4)?, tra: f(5)?, t2: f(6)? };
        let xs: [f64; 16] = std::array::from_fn(|i| f(7 + i).unwrap_or(f64::NAN));
        let theta = HealthState::new(f(23)?, f(24)?, f(25)?);
        let rul: u32 = rec[26].parse()?;
        if units.last().map(|u| u.unit_id) != Some(unit_id) {
            let m = meta
                .iter()
                .find(|m| m.unit_id == unit_id)
                .ok_or_else(|| anyhow!("unit {unit_id} missing from the unit table"))?;
            units.push(UnitRecord {
                unit_id,
                route: m.route,
                failure_mode: m.failure_mode,
                seed: m.seed,
                cycles: Vec::new(),
                t_s: m.t_s,
                t_eol: m.t_eol,
                ground_truth_theta: Vec::new(),
            });
        }
        let u = units.last_mut().expect("pushed above");
        if u.cycles.last().map(|c| c.cycle_index) != Some(cycle) {
            u.cycles.push(FlightCycle { cycle_index: cycle, samples: Vec::new(), rul_label: rul });
            u.ground_truth_theta.push(theta);
        }
        let (xs_true, xv_true) = evaluate_model(&w, &theta)?;
        u.cycles.last_mut().unwrap().samples.push(Sample {
            w,
            xs_noisy: SensorFrame::from_array(xs),
            xs_true,
            xv_true,
        });
    }
    for (u, m) in units.iter().zip(meta) {
        if u.n_samples() != m.n_samples {
            bail!("unit {}: {} samples on disk, {} expected", u.unit_id, u.n_samples(), m.n_samples);
        }
    }
    Ok(units)
}

fn trace_header() -> Vec<String> {
    let mut h: Vec<String> = THETA_NAMES.iter().map(|s| format!("{s}_hat")).collect();
    h.extend(SENSOR_NAMES.iter().map(|s| format!("{s}_hat")));
    h.extend(VIRTUAL_NAMES.iter().map(|s| format!("{s}_hat")));
    h.extend(THETA_NAMES.iter().map(|s| format!("{s}_var")));
    h.push("innovation_norm".into());
    h.push("clamped".into());
    h
}

pub fn trace_csv(t: &CalibratedTrace) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(trace_header())?;
    for i in 0..t.len() {
        let mut rec: Vec<String> = t.theta_hat[i].map(num).to_vec();
        rec.extend(t.xs_hat[i].map(num));
        rec.extend(t.xv_hat[i].map(num));
        rec.extend(t.theta_var[i].map(num));
        rec.push(num(t.innovation_norm[i]));
        rec.push((t.clamped[i] as u8).to_string());
        w.write_record(&rec)?;
    }
    finish(w)
}

pub fn parse_trace(bytes: &[u8], unit_id: u32, burn_in: usize) -> Result<CalibratedTrace> {
    let mut r = csv::Reader::from_reader(bytes);
    if r.headers()?.iter().map(String::from).collect::<Vec<_>>() != trace_header() {
        bail!("unexpected trace header for unit {unit_id}");
    }
    let mut t = CalibratedTrace { unit_id, burn_in, ..Default::default() };
    for rec in r.records() {
        let rec = rec?;
        let v: Vec<f64> = rec.iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>()?;
        t.theta_hat.push(std::array::from_fn(|k| v[k]));
        t.xs_hat.push(std::array::from_fn(|k| v[3 + k]));
        t.xv_hat.push(std::array::from_fn(|k| v[19 + k]));
        t.theta_var.push(std::array::from_fn(|k| v[30 + k]));
        t.innovation_norm.push(v[33]);
        t.clamped.push(v[34] != 0.0);
    }
    Ok(t)
}

/// Feature rows with unit / cycle / rul columns in front.
pub fn features_csv(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    let mut h = vec!["unit".to_string(), "cycle".into(), "rul".into()];
    h.extend(m.columns.iter().cloned());
    w.write_record(&h)?;
    for i in 0..m.n_rows() {
        let mut rec = vec![m.unit[i].to_string(), m.cycle[i].to_string(), num(m.y[i])];
        rec.extend(m.x.row(i).iter().map(|v| num(*v)));
        w.write_record(&rec)?;
    }
    finish(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub variant: phm_core::features::FeatureVariant,
    pub split: phm_core::features::Split,
    pub columns: Vec<String>,
    pub normalizer: Option<NormalizerParams>,
    pub seed: u64,
    pub perturbation: String,
}
