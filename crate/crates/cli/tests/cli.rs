use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[synth]
leaves_per_region = 4
places_per_leaf = 8
users = 300
mean_len = 6
seed = 3

[model]
d = 8
readout = 8
hidden = 8
layers = 1
epochs = 2
batch_size = 16

[run]
methods = hier,nonhier
seeds = 0,1

[probe]
epochs = 30
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "{TINY}\n[data]\nstaypoints = {}\n[probe]\nlabels = {}\n[run]\nout = {}\n{extra}",
            dir.path().join("stays.tsv").display(),
            dir.path().join("truth.tsv").display(),
            dir.path().join("out").display(),
        );
        fs::write(dir.path().join("run.cfg"), text).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("run.cfg");
        Command::new(env!("CARGO_BIN_EXE_hierplace"))
            .args(args)
            .arg("--config")
            .arg(&cfg)
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
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_pipeline() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    assert!(read(&ws.path("stays.tsv")).lines().count() > 300);

    ws.ok(&["train"]);
    let summary = read(&ws.path("out/summary.csv"));
    assert!(
        summary.starts_with("method,mean,std,p_vs_next\n"),
        "{summary}"
    );
    assert_eq!(summary.lines().count(), 3);

    let jsonl = read(&ws.path("out/runs/hier_s1/metrics.jsonl"));
    let records: Vec<serde_json::Value> = jsonl
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 3);
    assert_eq!(records[0]["run_id"], "hier_s1");
    assert_eq!(records[1]["epoch"], 2);
    assert!(records[0]["val_loss"].as_f64().unwrap().is_finite());
    let trained_test = records[2]["test_loss"].as_f64().unwrap();

    // Re-evaluating the saved checkpoint reproduces the recorded test loss.
    ws.ok(&["evaluate"]);
    let eval = read(&ws.path("out/evaluation.csv"));
    let line = eval.lines().find(|l| l.starts_with("hier,1,")).unwrap();
    let reloaded: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
    assert!(
        (reloaded - trained_test).abs() < 1e-5,
        "{reloaded} vs {trained_test}"
    );

    ws.ok(&["export"]);
    let emb = read(&ws.path("out/runs/nonhier_s0/embeddings.txt"));
    let header: Vec<&str> = emb.lines().next().unwrap().split(' ').collect();
    assert_eq!(header[1], "8");
    assert_eq!(header[2], "place:8");
    assert_eq!(emb.lines().count(), header[0].parse::<usize>().unwrap() + 1);

    let acc = ws.ok(&["probe"]);
    assert!(acc.starts_with("city,method,stratum,mean,std\n"), "{acc}");
    assert_eq!(acc.lines().count(), 5);
    assert!(ws.path("out/probe/hier_s0_rural_confusion.csv").exists());
    assert!(ws.path("out/probe/nonhier_s1_predictions.tsv").exists());
}

#[test]
fn reruns_are_identical() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&[
        "train",
        "--method",
        "hier",
        "--seed",
        "4",
        "--out",
        ws.path("a").to_str().unwrap(),
    ]);
    ws.ok(&[
        "train",
        "--method",
        "hier",
        "--seed",
        "4",
        "--threads",
        "2",
        "--out",
        ws.path("b").to_str().unwrap(),
    ]);
    for f in [
        "runs/hier_s4/model.ckpt",
        "runs/hier_s4/metrics.jsonl",
        "summary.csv",
    ] {
        let a = fs::read(ws.path("a").join(f)).unwrap();
        let b = fs::read(ws.path("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn exit_codes() {
    let ws = Workspace::new("");
    // Data missing.
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("stays.tsv"));

    ws.ok(&["synth"]);
    // Checkpoint missing: the error names the file.
    let out = ws.run(&["evaluate", "--method", "hier", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr(&out).contains("hier_s0/model.ckpt"),
        "{}",
        stderr(&out)
    );

    // Bad configuration.
    let out = ws.run(&["train", "--set", "model.width=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.width"));
    let out = ws.run(&["train", "--set", "model.readout=16"]);
    assert_eq!(out.status.code(), Some(2));

    // Divergence: a learning rate this large blows up the loss.
    let out = ws.run(&[
        "train",
        "--method",
        "nonhier",
        "--seed",
        "0",
        "--set",
        "model.lr=1e30",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn too_many_malformed_lines() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    let mut text = read(&ws.path("stays.tsv"));
    text.push_str("garbage line\nu1\tx\t1\t2\t3\n");
    fs::write(ws.path("stays.tsv"), text).unwrap();
    let out = ws.run(&["train", "--method", "hier", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(3));
    let out = ws.run(&[
        "train",
        "--method",
        "hier",
        "--seed",
        "0",
        "--set",
        "data.max_malformed=2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn vocabulary_mismatch_is_an_error() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["train", "--method", "hier", "--seed", "0"]);
    // Different synthetic world, same checkpoints.
    ws.ok(&["synth", "--seed", "99"]);
    let out = ws.run(&["evaluate", "--method", "hier", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("vocabulary"), "{}", stderr(&out));
    let out = ws.run(&["probe", "--method", "hier", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn single_checkpoint_export() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["train", "--method", "hier", "--seed", "0"]);
    let dest = ws.path("e.txt");
    ws.ok(&[
        "export",
        "--checkpoint",
        ws.path("out/runs/hier_s0/model.ckpt").to_str().unwrap(),
        "--output",
        dest.to_str().unwrap(),
    ]);
    let text = read(&dest);
    assert!(
        text.lines()
            .next()
            .unwrap()
            .ends_with(" 10km:2,1km:2,place:4"),
        "{}",
        text.lines().next().unwrap()
    );

    let mut bytes = fs::read(ws.path("out/runs/hier_s0/model.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(ws.path("bad.ckpt"), bytes).unwrap();
    let out = ws.run(&[
        "export",
        "--checkpoint",
        ws.path("bad.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn gradcheck_command() {
    let ws = Workspace::new("");
    let out = ws.ok(&[
        "gradcheck",
        "--instances",
        "2",
        "--places",
        "12",
        "--entries",
        "8",
    ]);
    assert!(out.contains("ok: max relative error"), "{out}");
}
