//! Black-box tests of the `tta` binary: exit-code taxonomy, artifact
//! layout, and the shapes promised for the emitted files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tta_core::cli::CliError;

/// Miniature experiment config: everything runs in seconds. The tiny
/// model cannot reach the release floor, so `pretrain` exits 3 after
/// writing its artifacts; the later commands run normally on top.
const SMALL_CONFIG: &str = r#"{
  "seed": 0,
  "scene": {"img_h": 16, "img_w": 16, "min_size": 6.0, "max_size": 8.0, "seed": 0},
  "model": {"img_h": 16, "img_w": 16, "anchor_size": 7.0},
  "pretrain": {"train_scenes": 48, "val_scenes": 16, "epochs": 3},
  "stream": {"scenes": 16, "corruptions": [{"kind": "gaussian_noise", "severity": 3}]},
  "tta": {"batch_size": 4, "steps_per_batch": 1},
  "seeds": [0, 1]
}
"#;

struct Workbench {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Workbench {
    fn new(config_text: &str) -> Self {
        let dir = tempfile::tempdir().expect("workspace");
        let config = dir.path().join("experiment.json");
        std::fs::write(&config, config_text).expect("config written");
        let out = dir.path().join("out");
        Workbench { _dir: dir, config, out }
    }

    fn run(&self, command: &str) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tta"))
            .arg(command)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .output()
            .expect("command launches")
    }

    fn code(&self, command: &str) -> i32 {
        self.run(command).status.code().expect("normal exit")
    }
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn exit_codes_follow_the_documented_taxonomy() {
    assert_eq!(CliError::Config("x".into()).exit_code(), 2);
    assert_eq!(CliError::Floor(0.1).exit_code(), 3);
    assert_eq!(CliError::NotPd("x".into()).exit_code(), 4);
    assert_eq!(CliError::DimMismatch("x".into()).exit_code(), 5);
    assert_eq!(CliError::Other("x".into()).exit_code(), 1);
}

#[test]
fn malformed_config_exits_two_with_a_diagnostic() {
    let bench = Workbench::new("{ not json");
    let out = bench.run("pretrain");
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("config"),
        "diagnostic should mention the config: {}",
        stderr_of(&out)
    );
}

#[test]
fn invalid_config_value_exits_two_and_names_the_field() {
    let bench = Workbench::new(r#"{"tta": {"gamma": -1.0}}"#);
    let out = bench.run("adapt");
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("gamma"),
        "diagnostic should name the offending field: {}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let bench = Workbench::new(r#"{"modle": {}}"#);
    let out = bench.run("pretrain");
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("modle"),
        "diagnostic should name the unknown key: {}",
        stderr_of(&out)
    );
}

#[test]
fn missing_learnability_floor_exits_three_but_keeps_artifacts() {
    let bench = Workbench::new(SMALL_CONFIG);
    let out = bench.run("pretrain");
    assert_eq!(out.status.code(), Some(3));
    assert!(bench.out.join("checkpoint").join("manifest.json").exists());
    assert!(bench.out.join("pretrain_report.json").exists());
}

#[test]
fn adapting_without_a_checkpoint_exits_one() {
    let bench = Workbench::new(SMALL_CONFIG);
    let out = bench.run("adapt");
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("checkpoint"),
        "diagnostic should say what is missing: {}",
        stderr_of(&out)
    );
}

#[test]
fn tampered_stats_dimension_fails_adapt_with_exit_five() {
    let bench = Workbench::new(SMALL_CONFIG);
    assert_eq!(bench.code("pretrain"), 3);
    assert_eq!(bench.code("fit-stats"), 0);

    let global = bench.out.join("stats").join("global.json");
    std::fs::write(
        &global,
        r#"{"dim":4,"mean":[0.0,0.0,0.0,0.0],"cov":[[1.0,0.0,0.0,0.0],[0.0,1.0,0.0,0.0],[0.0,0.0,1.0,0.0],[0.0,0.0,0.0,1.0]]}"#,
    )
    .expect("tamper stats");

    let out = bench.run("adapt");
    assert_eq!(out.status.code(), Some(5));
    assert!(
        stderr_of(&out).contains("dimension mismatch"),
        "diagnostic should report the mismatch: {}",
        stderr_of(&out)
    );
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {path:?}: {e}"));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parsing {path:?}: {e}"))
}

#[test]
fn full_pipeline_writes_the_documented_artifacts() {
    let bench = Workbench::new(SMALL_CONFIG);
    assert_eq!(bench.code("pretrain"), 3); // floor miss still writes artifacts
    assert_eq!(bench.code("fit-stats"), 0);
    assert_eq!(bench.code("adapt"), 0);
    assert_eq!(bench.code("ablate"), 0);
    assert_eq!(bench.code("report"), 0);

    // Fitted statistics match the model's feature dimensions.
    let global = read_json(&bench.out.join("stats").join("global.json"));
    let foreground = read_json(&bench.out.join("stats").join("foreground.json"));
    assert_eq!(global["dim"], 16);
    assert_eq!(foreground["dim"], 16);

    // One run directory per corruption, CSV with one row per batch.
    let run_dir = bench.out.join("runs").join("gaussian_noise_s3");
    let csv = std::fs::read_to_string(run_dir.join("log.csv")).expect("run log");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "batch_index,l_st_cls,l_st_reg,l_al_f,l_al_a,sym_kl_f,sym_kl_a,n_pseudo,cum_map"
    );
    assert_eq!(lines.len(), 1 + 16 / 4, "header plus one row per batch");
    assert!(run_dir.join("summary.json").exists());
    assert!(run_dir.join("state").join("state.json").exists());

    let adapt = read_json(&bench.out.join("adapt_summary.json"));
    assert_eq!(adapt["runs"].as_array().expect("runs array").len(), 1);
    assert!(adapt["mean_direct_map"].is_number());
    assert!(adapt["mean_adapted_map"].is_number());

    // Ablation: five component combinations over the configured seeds,
    // and the unadapted row cannot vary across seeds.
    let ablation = read_json(&bench.out.join("ablation").join("summary.json"));
    let rows = ablation.as_array().expect("ablation rows");
    assert_eq!(rows.len(), 5);
    let modes: Vec<&str> = rows.iter().map(|r| r["mode"].as_str().expect("mode")).collect();
    assert_eq!(modes, ["direct", "st", "global", "st-global", "full"]);
    let direct_per_seed = rows[0]["per_seed_map"].as_array().expect("per-seed values");
    assert_eq!(direct_per_seed.len(), 2);
    assert_eq!(direct_per_seed[0], direct_per_seed[1]);

    let table = std::fs::read_to_string(bench.out.join("ablation").join("table.csv"))
        .expect("ablation table");
    assert_eq!(table.lines().count(), 1 + 5, "header plus five mode rows");

    // The report aggregates everything that exists.
    let report = read_json(&bench.out.join("report").join("report.json"));
    assert!(report["pretrain"].is_object());
    assert!(report["adapt"].is_object());
    assert!(report["ablation"].is_array());
}

#[test]
fn seed_override_changes_the_adaptation_but_not_the_stream() {
    let bench = Workbench::new(SMALL_CONFIG);
    assert_eq!(bench.code("pretrain"), 3);
    assert_eq!(bench.code("fit-stats"), 0);

    let run = |seed: &str| -> String {
        let out = Command::new(env!("CARGO_BIN_EXE_tta"))
            .arg("adapt")
            .arg("--config")
            .arg(&bench.config)
            .arg("--out")
            .arg(&bench.out)
            .arg("--seed")
            .arg(seed)
            .output()
            .expect("command launches");
        assert_eq!(out.status.code(), Some(0));
        std::fs::read_to_string(bench.out.join("runs").join("gaussian_noise_s3").join("log.csv"))
            .expect("run log")
    };

    let base = run("0");
    let again = run("0");
    let other = run("1");
    assert_eq!(base, again, "same seed must reproduce the log");
    assert_ne!(base, other, "a different seed must change the adaptation");
}
