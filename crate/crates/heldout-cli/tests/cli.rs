//! End-to-end checks of the command-line surface through `cli_main`.

use std::fs;
use std::path::Path;

use heldout_cli::cli::cli_main;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["heldout"];
    argv.extend_from_slice(args);
    cli_main(argv)
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let text = r#"{
        "dataset": {"synth": {"classes": ["disk", "square", "cross"],
                               "n_train_per_class": 8,
                               "n_test_per_class": 4,
                               "image_size": 16}},
        "model": {"widths": [4]},
        "train": {"epochs": 1, "batch_size": 8, "lr_schedule": []},
        "scorers": ["msp"],
        "trials_per_split": 1,
        "seed": 9
    }"#;
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_and_flag_exit_with_usage_code() {
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["split", "--bogus"]), 2);
    assert_eq!(run(&[]), 2);
}

#[test]
fn help_exits_zero() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["run", "--help"]), 0);
}

#[test]
fn missing_config_file_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "run",
            "--config",
            "/nonexistent/config.json",
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );
}

#[test]
fn invalid_config_json_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, "{not json").unwrap();
    assert_eq!(run(&["split", "--config", path.to_str().unwrap()]), 1);
}

#[test]
fn split_prints_protocol_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    assert_eq!(run(&["split", "--config", &config]), 0);
}

#[test]
fn full_pipeline_run_report_train_score_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap().to_string();

    assert_eq!(run(&["run", "--config", &config, "--out", &out_s]), 0);
    let record_path = out.join("record.json");
    assert!(record_path.exists());
    assert!(out.join("report.md").exists());

    assert_eq!(
        run(&["report", "--record", record_path.to_str().unwrap()]),
        0
    );
    assert_eq!(
        run(&[
            "report",
            "--record",
            record_path.to_str().unwrap(),
            "--format",
            "csv"
        ]),
        0
    );
    assert_eq!(
        run(&[
            "report",
            "--record",
            record_path.to_str().unwrap(),
            "--format",
            "yaml"
        ]),
        2
    );

    let model_dir = dir.path().join("models");
    assert_eq!(
        run(&[
            "train",
            "--config",
            &config,
            "--split",
            "1",
            "--out",
            model_dir.to_str().unwrap()
        ]),
        0
    );
    let checkpoint = model_dir.join("model_split1_trial0.semm");
    assert!(checkpoint.exists());

    let scores_dir = dir.path().join("scores");
    assert_eq!(
        run(&[
            "score",
            "--config",
            &config,
            "--model",
            checkpoint.to_str().unwrap(),
            "--split",
            "1",
            "--out",
            scores_dir.to_str().unwrap()
        ]),
        0
    );
    let scores_csv = scores_dir.join("msp.csv");
    assert!(scores_csv.exists());

    let eval_dir = dir.path().join("eval");
    assert_eq!(
        run(&[
            "eval",
            "--scores",
            scores_csv.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap()
        ]),
        0
    );
    assert!(eval_dir.join("pr.csv").exists());
}

#[test]
fn resume_skips_completed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap().to_string();
    assert_eq!(run(&["run", "--config", &config, "--out", &out_s]), 0);
    let before = fs::read(out.join("record.json")).unwrap();
    assert_eq!(
        run(&["run", "--config", &config, "--out", &out_s, "--resume"]),
        0
    );
    let after = fs::read(out.join("record.json")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn seed_override_changes_the_recorded_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "run",
            "--config",
            &config,
            "--seed",
            "123",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let text = fs::read_to_string(out.join("record.json")).unwrap();
    let record: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(record["config"]["seed"], 123);
}

#[test]
fn eval_computes_ap_from_scores_and_flags_files() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(
        &scores,
        "example_index,score,is_anomaly\n0,0.9,1\n1,0.8,0\n2,0.7,1\n3,0.6,0\n",
    )
    .unwrap();
    assert_eq!(run(&["eval", "--scores", scores.to_str().unwrap()]), 0);

    let flags = dir.path().join("flags.csv");
    fs::write(&flags, "example_index,is_anomaly\n0,0\n1,1\n2,0\n3,1\n").unwrap();
    assert_eq!(
        run(&[
            "eval",
            "--scores",
            scores.to_str().unwrap(),
            "--flags",
            flags.to_str().unwrap()
        ]),
        0
    );

    let short_flags = dir.path().join("short.csv");
    fs::write(&short_flags, "example_index,is_anomaly\n0,1\n").unwrap();
    assert_eq!(
        run(&[
            "eval",
            "--scores",
            scores.to_str().unwrap(),
            "--flags",
            short_flags.to_str().unwrap()
        ]),
        1
    );
}
