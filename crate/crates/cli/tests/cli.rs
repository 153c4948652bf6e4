use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "[network]\nhidden = 16\n[pretrain.train]\nsteps = 30\n[finetune.train]\nsteps = 20\n\
                    [distill.train]\nsteps = 20\n[eval]\nepisodes = 3\n";

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.toml"), config).unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rwfm"))
            .current_dir(self.dir.path())
            .env("RWFM_LOG", "warn")
            .arg("--config")
            .arg("cfg.toml")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    fn dataset(&self, name: &str, seed: &str) {
        self.ok(&["gen-data", "--out", name, "--count", "6", "--seed", seed]);
        self.ok(&["calibrate", "--data", name]);
        self.ok(&["annotate", "--data", name]);
    }
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_chain_produces_every_artifact() {
    let s = Sandbox::new(TINY);
    s.ok(&["gen-data", "--out", "d", "--count", "6"]);
    s.ok(&["calibrate", "--data", "d"]);
    let kinds = s.ok(&["annotate", "--data", "d"]);
    assert!(kinds.contains("clean") && kinds.contains("over_force"), "{kinds}");
    s.ok(&["train-teacher", "--data", "d", "--mode", "plain-fm", "--out", "plain"]);
    s.ok(&[
        "train-teacher",
        "--data",
        "d",
        "--mode",
        "sa-rwfm",
        "--init",
        "plain/checkpoints/30.ckpt",
        "--out",
        "sa",
    ]);
    s.ok(&[
        "distill",
        "--data",
        "d",
        "--teacher",
        "sa/checkpoints/20.ckpt",
        "--alpha",
        "0.25",
        "--out",
        "td",
    ]);
    s.ok(&[
        "eval",
        "--data",
        "d",
        "--checkpoint",
        "plain/checkpoints/30.ckpt",
        "--checkpoint",
        "sa/checkpoints/20.ckpt",
        "--checkpoint",
        "td/checkpoints/20.ckpt",
        "--out",
        "ev",
    ]);
    let report = s.ok(&["report", "--run", "ev"]);
    assert!(report.contains("| td-student |"), "{report}");

    for f in ["run-gen-data.json", "run-calibrate.json", "run-annotate.json"] {
        assert!(s.path("d").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_dir(s.path("d/targets")).unwrap().count(), 1);
    let loss = fs::read_to_string(s.path("plain/loss.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 31);
    for f in [
        "metrics.json",
        "overall.tsv",
        "task-jar.tsv",
        "task-egg.tsv",
        "episodes.tsv",
        "report.md",
    ] {
        assert!(s.path("ev").join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(s.path("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics[2]["label"], "td-student");
    assert_eq!(metrics[2]["overall"]["tactile_reads"], 0);
    assert!(metrics[1]["overall"]["tactile_reads"].as_u64().unwrap() > 0);

    let run: serde_json::Value = serde_json::from_slice(&fs::read(s.path("td/run-distill.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["distill"]["alpha_blend"], 0.25);
    assert!(run["inputs"]["teacher"].is_string());
}

#[test]
fn exit_codes_separate_config_data_and_numeric_failures() {
    let s = Sandbox::new(TINY);
    assert_eq!(s.code(&["gen-data", "--out", "z", "--count", "0"]), 2);
    assert_eq!(s.code(&["calibrate", "--data", "missing"]), 3);
    s.ok(&["gen-data", "--out", "d", "--count", "6"]);
    assert_eq!(s.code(&["gen-data", "--out", "d", "--count", "6"]), 3);
    assert_eq!(s.code(&["annotate", "--data", "d"]), 3);
    s.ok(&["calibrate", "--data", "d"]);
    assert_eq!(
        s.code(&["train-teacher", "--data", "d", "--mode", "plain-fm", "--out", "p"]),
        3
    );
    s.ok(&["annotate", "--data", "d"]);
    assert_eq!(
        s.code(&["train-teacher", "--data", "d", "--mode", "sa-rwfm", "--out", "p"]),
        2
    );

    fs::write(
        s.path("cfg.toml"),
        format!("{TINY}[pretrain.optim]\nlearning_rate = 1e200\n"),
    )
    .unwrap();
    assert_eq!(
        s.code(&["train-teacher", "--data", "d", "--mode", "plain-fm", "--out", "p"]),
        4
    );
    fs::write(
        s.path("cfg.toml"),
        format!("{TINY}[pretrain.optim]\nlearnin_rate = 1.0\n"),
    )
    .unwrap();
    let out = s.run(&["train-teacher", "--data", "d", "--mode", "plain-fm", "--out", "p"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain.optim.learnin_rate"));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let s = Sandbox::new(TINY);
    s.dataset("a", "5");
    s.dataset("b", "5");
    let strip = |v: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        v.into_iter()
            .filter(|(n, _)| !n.starts_with("run-") && !n.ends_with(".lock"))
            .collect()
    };
    let (a, b) = (strip(files_under(&s.path("a"))), strip(files_under(&s.path("b"))));
    assert!(a.len() > 18);
    assert_eq!(a, b);
    s.dataset("c", "6");
    assert_ne!(strip(files_under(&s.path("c"))), a);

    for d in ["a", "b"] {
        s.ok(&[
            "train-teacher",
            "--data",
            d,
            "--mode",
            "plain-fm",
            "--out",
            &format!("{d}-p"),
        ]);
    }
    assert_eq!(
        fs::read(s.path("a-p/checkpoints/30.ckpt")).unwrap(),
        fs::read(s.path("b-p/checkpoints/30.ckpt")).unwrap()
    );
}

#[test]
fn cached_targets_for_other_samples_are_refused() {
    let s = Sandbox::new(TINY);
    s.dataset("d", "1");
    s.ok(&["train-teacher", "--data", "d", "--mode", "plain-fm", "--out", "p"]);
    s.ok(&[
        "train-teacher",
        "--data",
        "d",
        "--mode",
        "sa-rwfm",
        "--init",
        "p/checkpoints/30.ckpt",
        "--out",
        "t",
    ]);
    s.ok(&[
        "distill",
        "--data",
        "d",
        "--teacher",
        "t/checkpoints/20.ckpt",
        "--out",
        "s1",
    ]);
    // A second distillation reuses the cache.
    s.ok(&[
        "distill",
        "--data",
        "d",
        "--teacher",
        "t/checkpoints/20.ckpt",
        "--out",
        "s2",
    ]);
    assert_eq!(
        fs::read(s.path("s1/checkpoints/20.ckpt")).unwrap(),
        fs::read(s.path("s2/checkpoints/20.ckpt")).unwrap()
    );

    fs::write(s.path("cfg.toml"), format!("{TINY}[samples]\nstride = 3\n")).unwrap();
    let out = s.run(&[
        "distill",
        "--data",
        "d",
        "--teacher",
        "t/checkpoints/20.ckpt",
        "--out",
        "s3",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
    assert!(!s.path("s3/checkpoints/20.ckpt").exists());
}
