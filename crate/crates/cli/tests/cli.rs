use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "mpm": {"grid_resolution": 32},
  "datagen": {"n_objects": 2, "points_per_object": 40, "n_frames": 8, "seed": 2},
  "model": {
    "encoder": {"mlp_widths": [[8, 8], [8, 8]], "samples": [16, 4], "radii": [0.05, 0.1], "max_neighbors": [8, 8]},
    "decoder": {"hidden": 8, "context_width": 8, "n_frequencies": 4},
    "processor": {"hidden": 8, "basis_dim": 8},
    "seed": 1
  },
  "train": {"epochs": 2, "batch_size": 1, "window": 3, "schedule": "constant"}
}"#;

fn eqcollide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqcollide"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = eqcollide(args);
    assert!(
        out.status.success(),
        "`eqcollide {}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.json");
        std::fs::write(&config, CONFIG).unwrap();
        Self {
            config: s(&config),
            _dir: dir,
            root,
        }
    }

    fn path(&self, rel: &str) -> String {
        s(&self.root.join(rel))
    }

    fn with_data(self) -> Self {
        ok(&[
            "datagen",
            "--config",
            &self.config,
            "--out",
            &self.path("data"),
            "--count",
            "2",
        ]);
        self
    }

    fn train(&self, stage: &str, out: &str, extra: &[&str]) -> Output {
        let data = self.path("data/train");
        let out = self.path(out);
        let mut args = vec![
            "train",
            "--config",
            &self.config,
            "--data",
            &data,
            "--stage",
            stage,
            "--out",
            &out,
        ];
        args.extend_from_slice(extra);
        eqcollide(&args)
    }
}

#[test]
fn help_lists_every_verb() {
    let help = ok(&["--help"]);
    for verb in [
        "datagen",
        "train",
        "finetune",
        "eval",
        "rollout",
        "verify-equivariance",
        "plot",
    ] {
        assert!(help.contains(verb), "missing {verb}");
    }
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let ws = Workspace::new();
    let bad = ws.path("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = eqcollide(&["datagen", "--config", &bad, "--out", &ws.path("data"), "--count", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epochz"), "{}", stderr(&out));
    let out = eqcollide(&[
        "datagen",
        "--set",
        "datagen.colour=3",
        "--out",
        &ws.path("data"),
        "--count",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("colour"), "{}", stderr(&out));
}

#[test]
fn missing_inputs_fail() {
    let ws = Workspace::new();
    let out = eqcollide(&["plot", "--input", &ws.path("nope.csv"), "--out", &ws.path("plots")]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(1));
    let out = eqcollide(&[
        "datagen",
        "--config",
        &ws.path("absent.json"),
        "--out",
        &ws.path("d"),
        "--count",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage_two_needs_a_stage_one_checkpoint() {
    let ws = Workspace::new().with_data();
    let out = ws.train("2", "s2", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--init"), "{}", stderr(&out));
    let out = ws.train("3", "s3", &[]);
    assert_eq!(out.status.code(), Some(2));
}

fn without_wall_clock(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn resumed_run_continues_the_same_curve() {
    let ws = Workspace::new().with_data();
    assert!(ws.train("1", "full", &[]).status.success());
    assert!(ws.train("1", "split", &["--epochs", "1"]).status.success());
    assert!(ws.train("1", "split", &["--resume"]).status.success());
    let log = |d: &str| std::fs::read_to_string(ws.root.join(d).join("loss.csv")).unwrap();
    let (full, split) = (without_wall_clock(&log("full")), without_wall_clock(&log("split")));
    assert_eq!(full.len(), 3);
    assert_eq!(full, split);
    for entry in std::fs::read_dir(ws.root.join("full")).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name();
        if name.to_string_lossy().ends_with(".f32") {
            let other = std::fs::read(ws.root.join("split").join(&name)).unwrap();
            assert!(std::fs::read(entry.path()).unwrap() == other, "{name:?} differs");
        }
    }
}

#[test]
fn equivariance_check_respects_the_model_group() {
    let ws = Workspace::new().with_data();
    assert!(ws.train("1", "s1", &["--epochs", "0"]).status.success());
    let (ckpt, data) = (ws.path("s1"), ws.path("data/train"));
    let report = ws.path("eq.csv");
    let args = |group: &'static str| -> Vec<String> {
        [
            "verify-equivariance",
            "--config",
            &ws.config,
            "--checkpoint",
            &ckpt,
            "--data",
            &data,
            "--group",
            group,
            "--out",
            &report,
            "--steps",
            "2",
        ]
        .iter()
        .map(|a| a.to_string())
        .collect()
    };
    let run = |group: &'static str| {
        let a = args(group);
        eqcollide(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let out = run("angle=0.5,tx=0,ty=0");
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = run("identity");
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&report).unwrap();
    let mut rows = text.lines().skip(1).peekable();
    assert!(rows.peek().is_some());
    for row in rows {
        let dev: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(dev, 0.0, "{row}");
    }
    let out = run("tx=0.05,ty=-0.02");
    assert!(out.status.success(), "{}", stderr(&out));
}
