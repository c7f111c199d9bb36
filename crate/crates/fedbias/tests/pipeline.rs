//! End-to-end harness tests: config handling, run/audit orchestration,
//! dataset export, and the on-disk report bundle.

use std::fs;
use std::path::{Path, PathBuf};

use fedbias::harness::{
    cmd_audit, cmd_generate, cmd_run, cmd_sweep, config_hash, load_config, ExperimentConfig,
    RunPaths,
};
use fedbias::Error;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn small_config_json(out_dir: &Path, audit_overrides: &str) -> String {
    format!(
        r#"{{
  "data": {{ "synthetic": {{ "d_num": 3, "parties": 3, "n_train": 64, "n_test": 120,
                             "bias_levels": [0.0, 0.5, 0.9] }} }},
  "training": {{ "rounds": 6, "lr": 0.1, "hidden_width": 8 }},
  "seeds": [0, 1],
  "audit": {{ "stride": 2, "ig_steps": 8, "sweep_factors": [0.1, 1.0, 10.0]{audit_overrides} }},
  "output_dir": "{}"
}}"#,
        out_dir.display()
    )
}

fn load_small(dir: &Path, audit_overrides: &str) -> ExperimentConfig {
    let out = dir.join("out");
    let path = write_config(dir, &small_config_json(&out, audit_overrides));
    load_config(&path).unwrap()
}

#[test]
fn config_rejects_unknown_keys_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = r#"{
  "data": { "synthetic": { "d_num": 3, "parties": 3, "notakey": 1 } },
  "output_dir": "out"
}"#;
    let path = write_config(dir.path(), bad);
    let err = load_config(&path).unwrap_err();
    match &err {
        Error::Config { path, message } => {
            assert!(path.contains("data"), "path was `{path}`");
            assert!(message.contains("notakey"), "message was `{message}`");
        }
        other => panic!("expected config error, got {other}"),
    }
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn config_validates_fields_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = r#"{
  "data": { "synthetic": {} },
  "training": { "lr": -1.0 },
  "output_dir": "out"
}"#;
    let path = write_config(dir.path(), bad);
    let err = load_config(&path).unwrap_err();
    match &err {
        Error::Config { path, .. } => assert!(path.starts_with("training")),
        other => panic!("expected config error, got {other}"),
    }

    let bad = r#"{
  "data": { "synthetic": { "bias_levels": [0.1], "bias_linspace": [0.0, 0.9] } },
  "output_dir": "out"
}"#;
    let path = write_config(dir.path(), bad);
    let err = load_config(&path).unwrap_err();
    match &err {
        Error::Config { path, .. } => assert!(path.contains("bias_levels")),
        other => panic!("expected config error, got {other}"),
    }
}

#[test]
fn config_hash_tracks_training_fields_only() {
    let dir = tempfile::tempdir().unwrap();
    let base = load_small(dir.path(), "");
    let mut lr_changed = base.clone();
    lr_changed.training.lr = 0.05;
    assert_ne!(config_hash(&base), config_hash(&lr_changed));

    let mut rounds_changed = base.clone();
    rounds_changed.training.rounds = 7;
    assert_ne!(config_hash(&base), config_hash(&rounds_changed));

    // Audit toggles and seeds do not invalidate trained artifacts.
    let mut audit_changed = base.clone();
    audit_changed.audit.stride = 1;
    audit_changed.seeds = vec![7];
    assert_eq!(config_hash(&base), config_hash(&audit_changed));
}

#[test]
fn generate_is_deterministic_and_manifest_recounts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_small(dir.path(), "");
    let out_a = cmd_generate(&cfg, Some(&dir.path().join("a")), None).unwrap();
    let out_b = cmd_generate(&cfg, Some(&dir.path().join("b")), None).unwrap();

    let parties = 3;
    let mut csv_files = 0;
    for entry in fs::read_dir(&out_a).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.ends_with(".csv") {
            csv_files += 1;
            let a = fs::read(out_a.join(&name)).unwrap();
            let b = fs::read(out_b.join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }
    assert_eq!(csv_files, parties);

    // Recount oracle: per-party (group, label) cells from the CSVs match
    // the manifest.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("manifest.json")).unwrap()).unwrap();
    for pm in manifest["parties"].as_array().unwrap() {
        let party = pm["party_id"].as_u64().unwrap();
        let mut counts: std::collections::BTreeMap<(String, String, String), usize> =
            Default::default();
        let mut reader =
            csv::Reader::from_path(out_a.join(format!("party_{party:03}.csv"))).unwrap();
        let headers: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
        let gi = headers.iter().position(|h| h == "group").unwrap();
        let li = headers.iter().position(|h| h == "label").unwrap();
        let si = headers.iter().position(|h| h == "split").unwrap();
        for record in reader.records() {
            let r = record.unwrap();
            *counts
                .entry((r[si].to_string(), r[gi].to_string(), r[li].to_string()))
                .or_insert(0) += 1;
        }
        for (split, key) in [("train", "train_cells"), ("test", "test_cells")] {
            for cell in pm[key].as_array().unwrap() {
                let group = format!("g{}", cell["group"].as_u64().unwrap());
                let label = cell["label"].as_u64().unwrap().to_string();
                let expected = cell["count"].as_u64().unwrap() as usize;
                let found = counts
                    .get(&(split.to_string(), group.clone(), label.clone()))
                    .copied()
                    .unwrap_or(0);
                assert_eq!(found, expected, "party {party} {split} ({group},{label})");
            }
        }
    }
}

#[test]
fn generate_requires_synthetic_source() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("data.csv");
    fs::write(&csv_path, "age,sex,label\n1,F,0\n2,M,1\n3,F,1\n4,M,0\n").unwrap();
    let body = format!(
        r#"{{
  "data": {{ "csv": {{ "path": "{}",
      "schema": {{ "label": "label", "sensitive": "sex",
                   "features": ["age", "sex"],
                   "categorical": {{ "sex": ["F", "M"] }} }},
      "partition": {{ "num_parties": 2 }},
      "test_fraction": 0.5 }} }},
  "training": {{ "rounds": 2 }},
  "seeds": [0],
  "output_dir": "{}"
}}"#,
        csv_path.display(),
        dir.path().join("out").display()
    );
    let path = write_config(dir.path(), &body);
    let cfg = load_config(&path).unwrap();
    let err = cmd_generate(&cfg, None, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn run_is_idempotent_per_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_small(dir.path(), "");
    let root = cmd_run(&cfg, None, Some(&[0]), false).unwrap();
    let paths = RunPaths::new(&cfg, None);
    assert_eq!(root, paths.root());

    let canary = paths.standalone_ckpt(0, 1);
    assert!(canary.is_file());
    fs::remove_file(&canary).unwrap();

    // Second run is a no-op because the seed manifest marks completion.
    cmd_run(&cfg, None, Some(&[0]), false).unwrap();
    assert!(!canary.exists(), "completed seed was retrained");

    // Removing the manifest invalidates the seed and it retrains.
    fs::remove_file(paths.seed_manifest(0)).unwrap();
    cmd_run(&cfg, None, Some(&[0]), false).unwrap();
    assert!(canary.is_file());
}

#[test]
fn run_writes_expected_layout_and_parallel_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_small(dir.path(), "");
    cmd_run(&cfg, Some(&dir.path().join("serial")), None, false).unwrap();
    cmd_run(&cfg, Some(&dir.path().join("parallel")), None, true).unwrap();

    let serial = RunPaths::new(&cfg, Some(&dir.path().join("serial")));
    let parallel = RunPaths::new(&cfg, Some(&dir.path().join("parallel")));
    for seed in [0u64, 1] {
        for k in 0..3 {
            let a = fs::read(serial.standalone_ckpt(seed, k)).unwrap();
            let b = fs::read(parallel.standalone_ckpt(seed, k)).unwrap();
            assert_eq!(a, b, "standalone seed {seed} party {k}");
        }
        let rounds = fs::read_dir(serial.regime_dir(seed, "federated")).unwrap().count();
        assert_eq!(rounds, 6, "six persisted rounds");
        assert!(serial.regime_dir(seed, "reweighed_local").join("model.ckpt").is_file());
    }
}

#[test]
fn audit_emits_bundle_and_reproducible_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_small(dir.path(), "");
    cmd_run(&cfg, None, None, false).unwrap();
    let summary_path = cmd_audit(&cfg, None, None, None).unwrap();
    let paths = RunPaths::new(&cfg, None);

    for seed in [0u64, 1] {
        let audit = paths.audit_dir(seed);
        for required in [
            "benefits.json",
            "influence.json",
            "influence_rounds.csv",
            "top_pairs.json",
            "norms.csv",
            "sweep_sensitive.csv",
            "sweep_other.csv",
        ] {
            assert!(audit.join(required).is_file(), "missing {required}");
        }
        let dynamics = fs::read_dir(&audit)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .into_string()
                    .unwrap()
                    .starts_with("dynamics_")
            })
            .count();
        assert_eq!(dynamics, 2, "dynamics for most and least biased party");
        let attributions = fs::read_dir(&audit)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .into_string()
                    .unwrap()
                    .starts_with("attribution_")
            })
            .count();
        assert_eq!(attributions, 6, "three regimes x two parties");
    }

    // Summary means equal hand-averaged per-seed values, and every entry
    // carries a stdev.
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&summary_path).unwrap()).unwrap();
    for (regime, stats) in summary["table"].as_object().unwrap() {
        for field in ["accuracy", "dp_gap", "eo_gap", "acc_gap"] {
            let mean = stats[field]["mean"].as_f64().unwrap();
            assert!(stats[field]["stdev"].is_number(), "{regime}.{field} stdev");
            let per_seed: Vec<f64> = summary["per_seed"]
                .as_object()
                .unwrap()
                .values()
                .map(|row| row["table"][regime][field].as_f64().unwrap())
                .collect();
            let hand = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            assert!((mean - hand).abs() < 1e-12, "{regime}.{field}: {mean} vs {hand}");
        }
    }
    assert!(summary["table"].get("reweighed_local").is_some());

    // Re-auditing the same artifacts yields byte-identical summary.json.
    let first = fs::read(&summary_path).unwrap();
    cmd_audit(&cfg, None, None, None).unwrap();
    let second = fs::read(&summary_path).unwrap();
    assert_eq!(first, second);
}

#[test]
fn audit_with_all_toggles_off_emits_only_summary() {
    let dir = tempfile::tempdir().unwrap();
    let toggles = r#", "benefits": false, "influence": false, "dynamics": false,
        "attribution": false, "norms": false, "sweeps": false, "reweigh": "off""#;
    let cfg = load_small(dir.path(), toggles);
    cmd_run(&cfg, None, Some(&[0]), false).unwrap();
    cmd_audit(&cfg, None, Some(&[0]), None).unwrap();
    let paths = RunPaths::new(&cfg, None);
    assert!(paths.summary_path().is_file());
    let audit_entries = fs::read_dir(paths.audit_dir(0))
        .map(|entries| entries.count())
        .unwrap_or(0);
    assert_eq!(audit_entries, 0, "no audit files expected");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(paths.summary_path()).unwrap()).unwrap();
    assert!(summary["table"].get("reweighed_local").is_none());
}

#[test]
fn audit_of_incomplete_run_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_small(dir.path(), "");
    cmd_run(&cfg, None, Some(&[0]), false).unwrap();
    let paths = RunPaths::new(&cfg, None);
    fs::remove_file(paths.centralized_ckpt(0)).unwrap();
    let err = cmd_audit(&cfg, None, Some(&[0]), None).unwrap_err();
    match &err {
        Error::NotFound(msg) => assert!(msg.contains("centralized"), "{msg}"),
        other => panic!("expected not-found, got {other}"),
    }
    assert_eq!(err.exit_code(), 3);

    // Auditing before any run at all is a not-found too.
    let cfg2 = load_small(dir.path(), "");
    let err = cmd_audit(&cfg2, Some(&dir.path().join("nowhere")), None, None).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn sweep_subcommand_writes_sweep_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load_small(dir.path(), "");
    cmd_run(&cfg, None, Some(&[0]), false).unwrap();
    let written = cmd_sweep(&cfg, None, Some(&[0])).unwrap();
    assert_eq!(written.len(), 2);
    for path in &written {
        let text = fs::read_to_string(path).unwrap();
        assert!(text.starts_with("factor,mean_accuracy,mean_dp_gap,mean_eo_gap"));
        // Factor rows: 0.1, 1.0, 10.0.
        assert_eq!(text.lines().count(), 4);
    }
}

#[test]
fn csv_source_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    // 120 rows, binary sensitive column, numeric feature.
    let mut body = String::from("age,sex,label\n");
    for i in 0..120 {
        let sex = if i % 2 == 0 { "F" } else { "M" };
        let label = u8::from((i / 2) % 2 == 0);
        body.push_str(&format!("{}.5,{sex},{label}\n", i % 40));
    }
    let csv_path = dir.path().join("data.csv");
    fs::write(&csv_path, body).unwrap();

    let config_body = format!(
        r#"{{
  "data": {{ "csv": {{ "path": "{}",
      "schema": {{ "label": "label", "sensitive": "sex",
                   "features": ["age", "sex"],
                   "categorical": {{ "sex": ["F", "M"] }} }},
      "partition": {{ "mode": "iid", "num_parties": 2 }},
      "test_fraction": 0.5 }} }},
  "training": {{ "rounds": 3, "hidden_width": 4 }},
  "seeds": [0],
  "audit": {{ "stride": 1, "ig_steps": 4, "min_cell": 2 }},
  "output_dir": "{}"
}}"#,
        csv_path.display(),
        dir.path().join("out").display()
    );
    let path = write_config(dir.path(), &config_body);
    let cfg = load_config(&path).unwrap();
    cmd_run(&cfg, None, None, false).unwrap();
    let summary_path = cmd_audit(&cfg, None, None, None).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(summary_path).unwrap()).unwrap();
    assert!(summary["table"]["federated"]["accuracy"]["mean"].is_number());
}
