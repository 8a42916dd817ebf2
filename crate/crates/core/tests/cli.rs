use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sae_steering::report::{read_summary, RunReport};

const SMALL: &str = "\
[corpus]
rounds = 8
[sae]
steps = 3000
m_dim = 256
[router]
train_problems = 200
heldout_contexts = 50
steps = 300
[correct]
problems = 60
";

fn cli(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sae-steer"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("SAE_STEER_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timings.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn invalid_config_is_rejected_before_any_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[sae]\nk = 0\n").unwrap();
    let out = cli(&["run", "--config", cfg.to_str().unwrap()], &tmp.path().join("r"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("invalid"), "{}", stderr(&out));
    assert!(!tmp.path().join("r/model.json").exists());

    let out = cli(&["build", "--set", "sae.nonsense=1"], &tmp.path().join("r2"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nonsense"), "{}", stderr(&out));
}

#[test]
fn untrained_sae_aborts_at_stage2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    let out = cli(&["run", "--set", "sae.steps=0"], &dir);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("stage2-rank") && err.contains("no-recovered-features"), "{err}");
    for kept in ["model.json", "corpus.bin", "sae.bin", "keywords.json", "candidates.json"] {
        assert!(dir.join(kept).exists(), "{kept} should be retained");
    }
    assert!(!dir.join("effectiveness.json").exists());
    assert!(!dir.join(".lock").exists());
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(".lock"), "1\n").unwrap();
    let out = cli(&["build"], &dir);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("locked"), "{}", stderr(&out));
}

#[test]
fn stages_need_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    assert!(cli(&["build"], &dir).status.success());
    let out = cli(&["rank"], &dir);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("stage2-rank"), "{}", stderr(&out));
    // a different config cannot take over an existing run directory
    let out = cli(&["sample", "--seed", "4"], &dir);
    assert!(!out.status.success());
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sae-steer"))
        .arg("build")
        .env("SAE_STEER_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("run/model.json").exists());
    assert!(tmp.path().join("run/model.bin").exists());
}

#[test]
fn stagewise_and_resumed_runs_match_a_single_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());

    let whole = tmp.path().join("whole");
    let out = cli(&["run", "--config", &cfg], &whole);
    assert!(out.status.success(), "{}", stderr(&out));

    let staged = tmp.path().join("staged");
    let stages = [
        "build",
        "sample",
        "train-sae",
        "keywords",
        "recall",
        "rank",
        "select",
        "train-router",
        "correct",
        "report",
    ];
    for (i, stage) in stages.iter().enumerate() {
        let args: Vec<&str> = if i == 0 { vec![stage, "--config", &cfg] } else { vec![stage] };
        let out = cli(&args, &staged);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    assert_eq!(artifacts(&whole), artifacts(&staged));

    // drop everything downstream of stage 2 and resume
    for f in ["selection.json", "router.bin", "router.json", "correction.json", "report.json", "summary.csv"] {
        fs::remove_file(whole.join(f)).unwrap();
    }
    let out = cli(&["run"], &whole);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(artifacts(&whole), artifacts(&staged));

    let report: RunReport = sae_steering::report::read_json(&whole.join("report.json")).unwrap();
    let rows = read_summary(&whole.join("summary.csv")).unwrap();
    let selected: usize = report.effectiveness.iter().map(|t| t.rows.iter().filter(|r| r.selected).count()).sum();
    assert_eq!(rows.len(), selected);
    assert_eq!(report.routing.pool.len(), selected);
    assert_eq!(report.correction.problems, 60);
    assert_eq!(report.config.sae.steps, 3000);
}
