use std::path::Path;
use std::process::Command;

use phm_cli::config::{Ablation, Arch, ExperimentConfig, Perturbation};
use phm_cli::pipeline::{calibrate_units, generate};
use phm_cli::stages::{data_file, model_file, run_tag, trace_file, Pipeline};
use phm_cli::store::{
    dataset_csv, parse_dataset, parse_trace, trace_csv, RunManifest, Store, UnitMeta, STAGE_LOG,
};
use phm_core::evaluation::PrognosticReport;
use phm_core::features::{FeatureVariant, Split};
use serde_json::Value;

/// A fleet small enough for stage tests: coarse sampling, short training.
fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.fleet.samples_per_cycle = 30;
    cfg.n_seeds = 2;
    cfg.fnn_train.max_epochs = 2;
    cfg.cnn_train.max_epochs = 2;
    cfg.train_stride = 5;
    cfg
}

fn open(cfg: ExperimentConfig, dir: &Path) -> Pipeline {
    Pipeline::open(cfg, Store::new(dir).unwrap()).unwrap()
}

fn phm(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_phm"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("experiment.json");
    std::fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn default_config_writes_one_file_per_unit() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = open(ExperimentConfig::default(), dir.path());
    assert!(p.generate().unwrap());
    for id in [2, 5, 10, 16, 18, 20] {
        assert!(p.store.exists(&data_file(Split::Dev, id)), "dev unit {id}");
    }
    for id in [11, 14, 15] {
        assert!(p.store.exists(&data_file(Split::Test, id)), "test unit {id}");
    }
    let before = p.manifest.artifacts.clone();
    assert!(!p.generate().unwrap(), "second run must be a no-op");
    let mut again = open(ExperimentConfig::default(), dir.path());
    assert!(!again.generate().unwrap());
    assert_eq!(again.manifest.artifacts, before);
}

#[test]
fn same_seed_same_hashes_in_fresh_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut pa = open(small(), a.path());
    let mut pb = open(small(), b.path());
    pa.generate().unwrap();
    pb.generate().unwrap();
    assert_eq!(pa.manifest.artifacts, pb.manifest.artifacts);
    let mut other = small();
    other.fleet.master_seed += 1;
    let c = tempfile::tempdir().unwrap();
    let mut pc = open(other, c.path());
    pc.generate().unwrap();
    assert_ne!(pa.manifest.artifacts[&data_file(Split::Dev, 2)], pc.manifest.artifacts[&data_file(Split::Dev, 2)]);
}

#[test]
fn units_flag_keeps_three_dev_units() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &small());
    let out = dir.path().join("run");
    let o = phm(&out, &["generate", "--config", &cfg_path, "--units", "16,18,20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<_> = std::fs::read_dir(out.join("data/dev")).unwrap().collect();
    assert_eq!(files.len(), 3);
    let table: Value = serde_json::from_slice(&std::fs::read(out.join("data/units.json")).unwrap()).unwrap();
    let ids: Vec<u64> = table["dev"].as_array().unwrap().iter().map(|u| u["unit_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![16, 18, 20]);
}

#[test]
fn dataset_csv_round_trip() {
    let data = generate(&small()).unwrap();
    let units = &data.dev[..2];
    let bytes = dataset_csv(units).unwrap();
    let meta: Vec<UnitMeta> = units.iter().map(UnitMeta::of).collect();
    let back = parse_dataset(&bytes, &meta).unwrap();
    assert_eq!(back, units);
}

#[test]
fn trace_csv_round_trip() {
    let cfg = small();
    let data = generate(&cfg).unwrap();
    let t = calibrate_units(&cfg, &data.test[..1], None).unwrap().remove(0);
    let back = parse_trace(&trace_csv(&t).unwrap(), t.unit_id, t.burn_in).unwrap();
    assert_eq!(back, t);
}

#[test]
fn calibrate_writes_full_length_traces_and_quality() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = open(small(), dir.path());
    p.generate().unwrap();
    p.calibrate(Split::Dev).unwrap();
    p.calibrate(Split::Test).unwrap();
    let data = p.load_dataset().unwrap();
    for (split, units) in [(Split::Dev, &data.dev), (Split::Test, &data.test)] {
        for u in units {
            let rows = std::fs::read_to_string(p.store.path(&trace_file(split, u.unit_id))).unwrap().lines().count();
            assert_eq!(rows - 1, u.n_samples(), "unit {}", u.unit_id);
            let rmse = p.manifest.calibration_rmse[&u.unit_id];
            assert!(rmse.iter().all(|r| r.is_finite() && *r < 0.02), "unit {}: {rmse:?}", u.unit_id);
        }
    }
    assert!(p.manifest.quarantined.is_empty());
}

#[test]
fn data_driven_trains_without_traces() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.variant = FeatureVariant::DataDriven;
    cfg.arch = Arch::Fnn;
    let mut p = open(cfg.clone(), dir.path());
    p.generate().unwrap();
    p.train().unwrap();
    let tag = run_tag(&cfg);
    for k in 0..cfg.n_seeds {
        assert!(p.store.exists(&model_file(&tag, k)));
        assert!(p.store.exists(&format!("models/{tag}/seed_{k}_log.csv")));
    }
    assert!(!p.store.exists("traces"));
}

#[test]
fn hybrid_training_requires_traces() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = open(small(), dir.path());
    p.generate().unwrap();
    let err = p.train().unwrap_err();
    assert!(format!("{err:#}").contains("traces/dev"), "{err:#}");
}

#[test]
fn evaluate_without_models_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &small());
    let out = dir.path().join("run");
    let o = phm(&out, &["evaluate", "--config", &cfg_path]);
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    let record: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(record["status"], "error");
    assert_eq!(record["command"], "evaluate");
    assert!(record["message"].as_str().unwrap().contains("run train first"));
}

#[test]
fn bad_config_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.n_seeds = 0;
    let cfg_path = write_config(dir.path(), &cfg);
    let o = phm(&dir.path().join("run"), &["generate", "--config", &cfg_path]);
    assert_eq!(o.status.code(), Some(2));
    let record: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(record["kind"], "config");
}

#[test]
fn full_run_follows_algorithm_order_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let mut p = open(cfg.clone(), dir.path());
    p.run_all().unwrap();
    let tag = run_tag(&cfg);
    let log = p.store.stage_log().unwrap();
    let expected = [
        "generate".to_string(),
        "calibrate:dev".into(),
        format!("train:{tag}"),
        "calibrate:test".into(),
        format!("evaluate:{tag}"),
        "report".into(),
    ];
    assert_eq!(log, expected);

    // per-seed reports, per-cycle CSVs and the summary
    let reports: Vec<PrognosticReport> =
        (0..cfg.n_seeds).map(|k| p.store.read_json(&format!("reports/{tag}/seed_{k}.json")).unwrap()).collect();
    for r in &reports {
        let ids: Vec<u32> = r.units.iter().map(|u| u.unit).collect();
        assert_eq!(ids, vec![11, 14, 15]);
        assert!(r.rmse.is_finite() && r.s_score > 0.0 && r.fleet_avg_horizon >= 0.0);
    }
    assert!(p.store.exists(&format!("reports/{tag}/seed_0_cycles.csv")));
    let summary = &p.manifest.metrics[&tag];
    assert_eq!(summary.n_seeds, cfg.n_seeds);

    // every recorded artifact is on disk with the recorded hash
    let manifest = RunManifest::load(&p.store).unwrap();
    for (rel, h) in &manifest.artifacts {
        assert_eq!(&phm_cli::store::file_hash(&p.store.path(rel)).unwrap(), h, "{rel}");
    }

    // a second run skips every stage and changes nothing
    let before = std::fs::read(p.store.path(&format!("reports/{tag}/seed_0.json"))).unwrap();
    let mut again = open(cfg.clone(), dir.path());
    again.run_all().unwrap();
    let log = again.store.stage_log().unwrap();
    assert!(log[6..].iter().all(|l| l.ends_with(" skipped")), "{log:?}");
    assert_eq!(std::fs::read(again.store.path(&format!("reports/{tag}/seed_0.json"))).unwrap(), before);

    // a damaged output makes its stage run again
    std::fs::write(again.store.path(&format!("reports/{tag}/seed_0.json")), b"{}").unwrap();
    assert!(again.evaluate().unwrap());
    assert_eq!(std::fs::read(again.store.path(&format!("reports/{tag}/seed_0.json"))).unwrap(), before);
}

#[test]
fn evaluating_twice_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.variant = FeatureVariant::DataDriven;
    let mut p = open(cfg.clone(), dir.path());
    p.generate().unwrap();
    p.train().unwrap();
    p.evaluate().unwrap();
    let tag = run_tag(&cfg);
    let first = std::fs::read(p.store.path(&format!("reports/{tag}/summary.json"))).unwrap();
    std::fs::remove_dir_all(p.store.path("reports")).unwrap();
    assert!(p.evaluate().unwrap());
    assert_eq!(std::fs::read(p.store.path(&format!("reports/{tag}/summary.json"))).unwrap(), first);
}

#[test]
fn perturbation_flags_select_a_separate_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.n_seeds = 1;
    let cfg_path = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    for args in [
        vec!["generate"],
        vec!["calibrate", "--split", "dev"],
        vec!["train", "--snr-db", "15", "--alpha-bias", "-0.5"],
    ] {
        let mut a = args.clone();
        a.extend(["--config", &cfg_path]);
        let o = phm(&out, &a);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    cfg.perturbation = Perturbation { snr_db: Some(15.0), alpha_bias: Some(-0.5) };
    let tag = run_tag(&cfg);
    assert_eq!(tag, "FULL_HYBRID_CNN_snr15_alpha-0.5");
    assert!(out.join(model_file(&tag, 0)).exists());
}

#[test]
fn surrogate_flag_routes_calibration_through_the_surrogate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.surrogate.train.max_epochs = 3;
    let mut exact = open(cfg.clone(), &dir.path().join("exact"));
    exact.generate().unwrap();
    exact.calibrate(Split::Test).unwrap();
    cfg.use_surrogate = true;
    let mut sur = open(cfg, &dir.path().join("sur"));
    sur.generate().unwrap();
    sur.calibrate(Split::Test).unwrap();
    assert!(sur.store.exists("models/surrogate.bin"));
    let rel = trace_file(Split::Test, 11);
    assert_ne!(exact.manifest.artifacts[&rel], sur.manifest.artifacts[&rel]);
    let log = sur.store.stage_log().unwrap();
    assert_eq!(log, vec!["generate", "surrogate", "calibrate:test"]);
}

#[test]
fn ablation_reports_have_the_published_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.n_seeds = 1;
    cfg.cnn_train.max_epochs = 1;
    cfg.train_stride = 20;
    let mut p = open(cfg, dir.path());
    p.generate().unwrap();
    p.calibrate(Split::Dev).unwrap();
    p.calibrate(Split::Test).unwrap();
    for study in [Ablation::FeatureSet, Ablation::CalibrationQuality, Ablation::DatasetSize] {
        p.ablate(study).unwrap();
    }
    let fs: Value = p.store.read_json("ablations/feature_set_CNN.json").unwrap();
    let variants: Vec<&str> = fs["rows"].as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["DATA_DRIVEN", "PLUS_XS_HAT", "PLUS_XV_HAT", "FULL_HYBRID"]);
    assert_eq!(fs["mi_top"].as_array().unwrap().len(), 9);
    assert_eq!(fs["source"], "ground_truth");

    let cq: Value = p.store.read_json("ablations/calibration_quality_CNN.json").unwrap();
    let labels: Vec<&str> = cq["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["alpha+0.5", "alpha-0.5", "snr20", "snr15"]);

    let ds: Value = p.store.read_json("ablations/dataset_size_CNN.json").unwrap();
    assert_eq!(ds["small_dev_units"], serde_json::json!([16, 18, 20]));
    assert!(ds["rel_delta_rmse_data_driven"].is_f64() && ds["rel_delta_rmse_hybrid"].is_f64());

    p.report().unwrap();
    let report: Value = p.store.read_json("report.json").unwrap();
    assert_eq!(report["ablations"].as_object().unwrap().len(), 3);
}

#[test]
fn partial_config_file_takes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"n_seeds": 3, "arch": "FNN"}"#).unwrap();
    let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(cfg.n_seeds, 3);
    assert_eq!(cfg.arch, Arch::Fnn);
    assert_eq!(cfg.fleet, ExperimentConfig::default().fleet);
    let round: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(round, cfg);
}

#[test]
fn stage_log_name_is_stable() {
    assert_eq!(STAGE_LOG, "stages.log");
}
