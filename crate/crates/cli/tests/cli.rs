use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const QUICK: &str = r#"
manifest = "data/manifest.csv"

[synth]
n = 24
train_fraction = 0.6
val_fraction = 0.2

[train]
scheme = SCHEME
views = 1
pc_max_per_class = 40

[train.pc]
backbone = { name = "small-conv", dim = 8 }
input_size = 16
epochs = 2

[train.abmil]
epochs = 3
batch_size = 4
hidden = 16

[train.joints]
patch_size = 16

[landmarks]
epochs = 1
"#;

fn ramil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ramil")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, scheme: u8) {
    fs::write(dir.join(name), QUICK.replace("SCHEME", &scheme.to_string())).unwrap();
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout: {}\nstderr: {}", stdout(o), stderr(o));
}

fn metric(o: &Output, key: &str) -> f64 {
    let line = stdout(o);
    let kv = line.split("key-metrics=").nth(1).unwrap().trim();
    kv.split(',').find_map(|p| p.strip_prefix(&format!("{key}="))).unwrap().parse().unwrap()
}

#[test]
fn tiling_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, "c.toml", 1);
    let o = ramil(d, &["synth", "--config", "c.toml", "--out", "data"]);
    ok(&o);
    assert!(stdout(&o).starts_with("stage=synth status=ok key-metrics=images=24,"));
    assert!(d.join("data/manifest.csv").exists());

    ok(&ramil(d, &["masks", "--config", "c.toml", "--out", "masks"]));
    let o = ramil(d, &["train-abmil", "--config", "c.toml", "--out", "run"]);
    ok(&o);
    for f in ["history.csv", "config-snapshot.toml", "seed", "summary.json", "checkpoints/abmil_best.json", "reports/test_report.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    let o = ramil(d, &["score", "--scheme", "1", "--checkpoint", "run", "--config", "c.toml", "--out", "scored"]);
    ok(&o);
    assert!(d.join("scored/scores.csv").exists());
    assert!(d.join("scored/reports/score_report.json").exists());
    assert!(metric(&o, "rmse") >= metric(&o, "mae"));

    let id = fs::read_to_string(d.join("data/manifest.csv")).unwrap().lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let o = ramil(d, &["explain", "--image", &id, "--checkpoint", "run", "--config", "c.toml", "--out", "ex"]);
    ok(&o);
    assert!((metric(&o, "weight_sum") - 1.0).abs() <= 1e-6);
    assert!(d.join(format!("ex/explain/{id}_overlay.png")).exists());

    let o = ramil(d, &["report", "--checkpoint", "run", "--config", "c.toml", "--out", "rep"]);
    ok(&o);
    assert!(fs::read_to_string(d.join("rep/report.md")).unwrap().contains("| run |"));
}

#[test]
fn joint_scoring_without_landmarks_names_the_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, "c.toml", 2);
    ok(&ramil(d, &["synth", "--config", "c.toml", "--out", "data"]));
    ok(&ramil(d, &["train-abmil", "--config", "c.toml", "--out", "run"]));

    let o = ramil(d, &["score", "--scheme", "2", "--checkpoint", "run", "--config", "c.toml", "--out", "s"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("landmarks.json"), "{}", stderr(&o));
    assert!(stdout(&o).contains("stage=score status=fail"));

    // reference landmarks stand in for a landmark model
    ok(&ramil(d, &["score", "--scheme", "2", "--checkpoint", "run", "--reference-landmarks", "--config", "c.toml", "--out", "s"]));

    let o = ramil(d, &["score", "--scheme", "1", "--checkpoint", "run", "--reference-landmarks", "--config", "c.toml", "--out", "s"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`scheme`"));
}

#[test]
fn configuration_errors_exit_one_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "[train]\nbogus_key = 1\n").unwrap();
    let o = ramil(d, &["synth", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus_key"));

    fs::write(d.join("k.toml"), "[train]\nk = 35\n").unwrap();
    let o = ramil(d, &["synth", "--config", "k.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.k"), "{}", stderr(&o));

    fs::write(d.join("b.toml"), "[train.abmil]\nbatch_size = 7\n").unwrap();
    let o = ramil(d, &["synth", "--config", "b.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.abmil.batch_size"));

    let o = ramil(d, &["score", "--scheme", "3", "--checkpoint", "r", "--config", "k.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));

    fs::write(d.join("nomanifest.toml"), "").unwrap();
    let o = ramil(d, &["masks", "--config", "nomanifest.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest"));
}

#[test]
fn missing_inputs_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = ramil(d, &["synth", "--config", "absent.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.toml"));

    write_config(d, "c.toml", 1);
    let o = ramil(d, &["eval-landmarks", "--config", "c.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("landmarks.json"));
}

#[test]
fn help_exits_zero() {
    let o = Command::new(env!("CARGO_BIN_EXE_ramil")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    for sub in ["synth", "train-landmarks", "train-pc", "train-abmil", "score", "ensemble", "explain"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}
