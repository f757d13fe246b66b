use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn debugcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debugcn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes 24+24 bundles and trains a one-run model on them.
struct Workspace {
    dir: tempfile::TempDir,
    train_stdout: String,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::write(root.join("spec.json"), r#"{"num_clean": 24, "num_trojaned": 24, "seed": 3}"#).unwrap();
        fs::write(root.join("config.json"), r#"{"epochs": 10, "num_runs": 1, "seed": 1}"#).unwrap();
        let o = debugcn(&["synth", "--spec", path(&root.join("spec.json")), "--out", path(&root.join("pop"))]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = Self::train(root, "model.dwb", "report.json");
        assert!(o.status.success(), "{}", stderr(&o));
        Self {
            train_stdout: stdout(&o),
            dir,
        }
    }

    fn train(root: &Path, model: &str, report: &str) -> Output {
        debugcn(&[
            "train",
            "--manifest",
            path(&root.join("pop/manifest.json")),
            "--config",
            path(&root.join("config.json")),
            "--out",
            path(&root.join(model)),
            "--report",
            path(&root.join(report)),
        ])
    }

    fn file(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }
}

#[test]
fn pipeline_commands_compose() {
    let ws = Workspace::new();
    assert!(ws.train_stdout.contains("mean_test_accuracy\t"));
    let (model, manifest) = (ws.file("model.dwb"), ws.file("pop/manifest.json"));

    let o = debugcn(&["predict", "--model", &model, "--bundle", &ws.file("pop/clean-0000.dwb")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let fields: Vec<&str> = line.trim_end().split('\t').collect();
    assert_eq!(fields[..2], ["clean-0000", "clean"]);
    let p: f64 = fields[2].parse().unwrap();
    assert!((0.0..0.5).contains(&p));

    let eval = debugcn(&["eval", "--model", &model, "--manifest", &manifest]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let eval = stdout(&eval);
    assert_eq!(eval.lines().count(), 48 + 2);
    let permute = debugcn(&["permute", "--model", &model, "--manifest", &manifest, "--swaps", "0", "--seed", "4"]);
    assert!(permute.status.success(), "{}", stderr(&permute));
    let accuracy = |s: &str| s.lines().find(|l| l.starts_with("accuracy\t")).unwrap().to_string();
    assert_eq!(accuracy(&stdout(&permute)), accuracy(&eval));
    assert!(stdout(&permute).contains("identical_predictions\ttrue"));

    let o = debugcn(&["bundle", "validate", &manifest]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "ok\tmanifest\t48 bundles\n");
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let ws = Workspace::new();
    let root = ws.dir.path();
    let again = Workspace::train(root, "model2.dwb", "report2.json");
    assert_eq!(stdout(&again), ws.train_stdout);
    assert_eq!(fs::read(root.join("model.dwb")).unwrap(), fs::read(root.join("model2.dwb")).unwrap());
    assert_eq!(fs::read(root.join("report.json")).unwrap(), fs::read(root.join("report2.json")).unwrap());

    let out2 = root.join("pop2");
    let o = debugcn(&["synth", "--spec", &ws.file("spec.json"), "--out", path(&out2)]);
    assert!(o.status.success());
    for name in ["manifest.json", "trojaned-0017.dwb"] {
        assert_eq!(fs::read(root.join("pop").join(name)).unwrap(), fs::read(out2.join(name)).unwrap());
    }
}

#[test]
fn stats_lists_each_stored_tensor() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), r#"{"num_clean": 1, "num_trojaned": 0}"#).unwrap();
    let out = dir.path().join("pop");
    assert!(debugcn(&["synth", "--spec", path(&dir.path().join("spec.json")), "--out", path(&out)]).status.success());
    let o = debugcn(&["stats", "--bundle", path(&out.join("clean-0000.dwb"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tensor\tcount\tmin\tq1\tmedian\tq3\tmax\tmean");
    assert!(lines[1].starts_with("fc.weight\t5120\t"));
    assert!(lines[2].starts_with("conv1.weight\t400\t"));
}

#[test]
fn failures_exit_with_one_line_reasons() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), r#"{"num_clean": 1, "num_trojaned": 0}"#).unwrap();
    let out = dir.path().join("pop");
    assert!(debugcn(&["synth", "--spec", path(&dir.path().join("spec.json")), "--out", path(&out)]).status.success());
    let bundle = out.join("clean-0000.dwb");
    let bytes = fs::read(&bundle).unwrap();
    let cut = dir.path().join("cut.dwb");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();

    let o = debugcn(&["bundle", "validate", path(&cut)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: ") && err.contains("truncated payload"), "{err}");

    let o = debugcn(&["bundle", "validate", path(&bundle)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("ok\tclean-0000\tfc=[10, 512]"));

    // unknown config key
    fs::write(dir.path().join("bad.json"), r#"{"epochs": 1, "epoch": 2}"#).unwrap();
    let o = debugcn(&[
        "train",
        "--manifest",
        path(&out.join("manifest.json")),
        "--config",
        path(&dir.path().join("bad.json")),
        "--out",
        path(&dir.path().join("m.dwb")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"));

    assert_eq!(debugcn(&["stats", "--bundle", path(&bundle), "--bogus"]).status.code(), Some(2));
    assert_eq!(debugcn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(debugcn(&["--help"]).status.code(), Some(0));

    let o = Command::new(env!("CARGO_BIN_EXE_debugcn"))
        .args(["stats", "--bundle", path(&bundle)])
        .env("DEBUGCN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("DEBUGCN_THREADS"));
    let o = Command::new(env!("CARGO_BIN_EXE_debugcn"))
        .args(["stats", "--bundle", path(&bundle)])
        .env("DEBUGCN_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
}
