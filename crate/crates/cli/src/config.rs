use serde::{Deserialize, Serialize};

use phm_core::calibration::{SurrogateConfig, UkfConfig};
use phm_core::features::{FeatureVariant, N_TW};
use phm_core::fleet::{split_seed, FleetConfig};
use phm_core::nnet::TrainConfig;
use phm_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Arch {
    Fnn,
    Cnn,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Fnn => "FNN",
            Arch::Cnn => "CNN",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FNN" => Ok(Arch::Fnn),
            "CNN" => Ok(Arch::Cnn),
            _ => Err(Error::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ablation {
    None,
    DatasetSize,
    FeatureSet,
    CalibrationQuality,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "NONE" => Ok(Ablation::None),
            "DATASET_SIZE" => Ok(Ablation::DatasetSize),
            "FEATURE_SET" => Ok(Ablation::FeatureSet),
            "CALIBRATION_QUALITY" => Ok(Ablation::CalibrationQuality),
            _ => Err(Error::Config(format!("unknown ablation study {s:?}"))),
        }
    }
}

/// Where θ̂, x̂_s and x̂_v come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    Ukf,
    /// The simulator's true θ and noise-free responses.
    GroundTruth,
}

/// Training precision of the prognostics networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    pub snr_db: Option<f64>,
    pub alpha_bias: Option<f64>,
}

impl Perturbation {
    pub fn is_none(&self) -> bool {
        self.snr_db.is_none() && self.alpha_bias.is_none()
    }

    pub fn label(&self) -> String {
        match (self.snr_db, self.alpha_bias) {
            (None, None) => "clean".into(),
            (Some(s), None) => format!("snr{s}"),
            (None, Some(a)) => format!("alpha{a:+}"),
            (Some(s), Some(a)) => format!("snr{s}_alpha{a:+}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub fleet: FleetConfig,
    /// None derives the filter noise from the fleet's sensor noise and sampling.
    pub ukf: Option<UkfConfig>,
    /// Samples skipped when scoring θ̂ against the ground truth.
    pub burn_in_samples: usize,
    pub use_surrogate: bool,
    pub surrogate: SurrogateConfig,
    pub variant: FeatureVariant,
    pub arch: Arch,
    pub fnn_train: TrainConfig,
    pub cnn_train: TrainConfig,
    pub precision: Precision,
    pub n_tw: usize,
    /// Stride between training windows; evaluation always uses every window.
    pub train_stride: usize,
    pub val_frac: f64,
    pub n_seeds: usize,
    pub ablation: Ablation,
    pub perturbation: Perturbation,
    /// Source of model information in the main comparison.
    pub calibration_source: CalibrationSource,
    /// Source used by the feature-set study.
    pub feature_set_source: CalibrationSource,
    /// Development units kept by the dataset-size study.
    pub small_dev_units: Vec<u32>,
    pub mi_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Smaller batches than the library defaults: the synthetic fleet is
        // far smaller than the published one and needs more optimizer steps.
        let train = |cfg: TrainConfig| TrainConfig { target_scale: 100.0, batch_size: 128, ..cfg };
        ExperimentConfig {
            fleet: FleetConfig::default(),
            ukf: None,
            burn_in_samples: 400,
            use_surrogate: false,
            surrogate: SurrogateConfig::default(),
            variant: FeatureVariant::FullHybrid,
            arch: Arch::Cnn,
            fnn_train: train(TrainConfig::fnn(0)),
            // a larger step kills the single-channel ReLU layer; the slower
            // rate needs more epochs to converge
            cnn_train: TrainConfig { lr: 1e-4, max_epochs: 100, patience: 10, ..train(TrainConfig::cnn(0)) },
            precision: Precision::F32,
            n_tw: N_TW,
            train_stride: 7,
            val_frac: 0.1,
            n_seeds: 5,
            ablation: Ablation::None,
            perturbation: Perturbation::default(),
            calibration_source: CalibrationSource::Ukf,
            feature_set_source: CalibrationSource::GroundTruth,
            small_dev_units: vec![16, 18, 20],
            mi_bins: 32,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.fleet.validate()?;
        if let Some(u) = &self.ukf {
            u.validate()?;
        }
        self.fnn_train.validate()?;
        self.cnn_train.validate()?;
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if self.n_tw == 0 || self.train_stride == 0 {
            return Err(Error::Config("window length and stride must be positive".into()));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 0.5) {
            return Err(Error::Config(format!("val_frac {} outside (0, 0.5)", self.val_frac)));
        }
        for id in &self.small_dev_units {
            if !self.fleet.dev.iter().any(|u| u.unit_id == *id) {
                return Err(Error::Config(format!("small_dev_units references unknown unit {id}")));
            }
        }
        Ok(())
    }

    pub fn ukf_config(&self) -> UkfConfig {
        self.ukf.clone().unwrap_or_else(|| {
            UkfConfig::for_sampling(self.fleet.sensor_noise_sigma.max(1e-4), self.fleet.samples_per_cycle)
        })
    }

    pub fn train_config(&self, arch: Arch, seed: u64) -> TrainConfig {
        let base = match arch {
            Arch::Fnn => &self.fnn_train,
            Arch::Cnn => &self.cnn_train,
        };
        TrainConfig { seed, ..base.clone() }
    }

    /// Seed of the k-th training run, derived from the master seed.
    pub fn run_seed(&self, k: usize) -> u64 {
        split_seed(self.fleet.master_seed, 10_000 + k as u64)
    }

    /// Seed of the noise injected for a perturbed θ̂ of one unit.
    pub fn perturb_seed(&self, unit_id: u32) -> u64 {
        split_seed(self.fleet.master_seed, 20_000 + unit_id as u64)
    }
}
