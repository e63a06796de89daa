use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mico::train::{Checkpoint, MetricsLine};

const CONFIG: &str = "\
[data]
pair_size = 24
joint_size = 24
eval_size = 12

[model]
width = 16
heads = 2
proj_dim = 16

[train]
steps = 10
batch_size = 4
warmup = 2
lr = 0.001
checkpoint_every = 5
wall_clock = false
";

fn mico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mico")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.cfg");
        std::fs::write(&config, CONFIG).unwrap();
        let data = dir.path().join("data");
        let out = mico(&["gen-data", "--config", s(&config), "--out", s(&data)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Self { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let train = self.data.join("train");
        let mut args = vec!["train", "--config", s(&self.config), "--data", s(&train), "--out", s(&out)];
        args.extend_from_slice(extra);
        mico(&args)
    }
}

fn metrics(dir: &Path) -> Vec<MetricsLine> {
    mico::train::read_metrics(&dir.join("metrics.jsonl")).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_complete() {
    let f = Fixture::new();
    let again = f.path("again");
    assert_eq!(code(&mico(&["gen-data", "--config", s(&f.config), "--out", s(&again)])), 0);
    for sub in ["train", "eval"] {
        let mut names: Vec<_> = std::fs::read_dir(f.data.join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        let expected = if sub == "train" { 8 } else { 6 };
        assert_eq!(names.len(), expected, "{names:?}");
        for n in names {
            assert_eq!(
                std::fs::read(f.data.join(sub).join(&n)).unwrap(),
                std::fs::read(again.join(sub).join(&n)).unwrap()
            );
        }
    }
    assert!(!f.data.join(".mico.lock").exists());
}

#[test]
fn train_writes_one_metrics_line_per_step() {
    let f = Fixture::new();
    let out = f.train("run", &["--steps", "7"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lines = std::fs::read_to_string(f.path("run").join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 7);
    for (i, l) in lines.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 7, "{keys:?}");
        assert_eq!(v["step"], i as u64 + 1);
        assert_eq!(v["wall_ms"], 0);
    }
    assert!(f.path("run").join("step-000005.mick").exists());
    assert!(f.path("run").join("final.mick").exists());

    let con = f.train("con", &["--objectives", "con"]);
    assert_eq!(code(&con), 0);
    for m in metrics(&f.path("con")) {
        assert_eq!((m.l_match, m.l_gen), (0.0, 0.0));
        assert_eq!(m.total, m.l_con);
    }
}

#[test]
fn resume_continues_the_same_run() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("full", &[])), 0);
    let ckpt = f.path("full").join("step-000005.mick");
    let out = f.train("tail", &["--resume", s(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(&metrics(&f.path("full"))[5..], &metrics(&f.path("tail"))[..]);
    assert_eq!(
        std::fs::read(f.path("full").join("final.mick")).unwrap(),
        std::fs::read(f.path("tail").join("final.mick")).unwrap()
    );
}

#[test]
fn eval_reports_and_rerank_one_is_a_no_op() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let ckpt = f.path("run").join("final.mick");
    let report = f.path("report.json");
    let eval = f.data.join("eval");
    let out = mico(&["eval", "--checkpoint", s(&ckpt), "--data", s(&eval), "--out", s(&report), "--rerank-k", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let retrieval = v["retrieval"].as_array().unwrap();
    assert_eq!(retrieval.len(), 6);
    for r in retrieval {
        assert_eq!(r["ranks_pre"], r["ranks_post"]);
        assert_eq!(r["reranked"], true);
    }

    let oracle = f.path("oracle.json");
    let out = mico(&["eval", "--config", s(&f.config), "--oracle", "--data", s(&eval), "--out", s(&oracle)]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&oracle).unwrap()).unwrap();
    assert!(v["mean_r1_post"].as_f64().unwrap() > 0.9);
}

#[test]
fn ablate_single_cell() {
    let f = Fixture::new();
    let out_dir = f.path("abl");
    let train = f.data.join("train");
    let eval = f.data.join("eval");
    let out = mico(&[
        "ablate", "--config", s(&f.config), "--axis", "objectives", "--rows", "l", "--steps", "3",
        "--data", s(&train), "--eval-data", s(&eval), "--out", s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("ablation-objectives.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    // eval files load in name order
    assert_eq!(lines[0], "row,axis,delta,seeds,r1_T-A,r1_T-I,r1_T-V,mean_r1,per_seed");
    assert!(lines[1].starts_with("l,objectives,"));
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let train = f.data.join("train");
    assert_eq!(code(&mico(&["--help"])), 0);
    assert_eq!(code(&mico(&["train", "--no-such-flag"])), 1);

    let bad = f.path("bad.cfg");
    std::fs::write(&bad, "[train]\nlr = abc\n").unwrap();
    let out = mico(&["train", "--config", s(&bad), "--data", s(&train), "--out", s(&f.path("x"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));

    let missing = f.path("missing.mico");
    assert_eq!(code(&mico(&["train", "--data", s(&missing), "--out", s(&f.path("y"))])), 2);

    let input = train.join("T-I.mico");
    let split = f.path("split.mico");
    assert_eq!(code(&mico(&["split", "--input", s(&input), "--size", "25", "--out", s(&split)])), 2);
    assert_eq!(code(&mico(&["split", "--input", s(&input), "--size", "10", "--out", s(&split)])), 0);
    assert_eq!(mico::data::load_dataset(&split).unwrap().len(), 10);

    let eval = f.data.join("eval");
    let out = mico(&["ablate", "--axis", "colour", "--data", s(&train), "--eval-data", s(&eval), "--out", s(&f.path("z"))]);
    assert_eq!(code(&out), 1);

    // an output directory held by another invocation
    let locked = f.path("locked");
    std::fs::create_dir_all(&locked).unwrap();
    std::fs::write(locked.join(".mico.lock"), "").unwrap();
    assert_eq!(code(&f.train("locked", &[])), 1);

    // a non-finite parameter surfaces as a numeric failure
    assert_eq!(code(&f.train("run", &["--steps", "5"])), 0);
    let mut ckpt = Checkpoint::load(&f.path("run").join("final.mick")).unwrap();
    let id = ckpt.params.id("cls.text").unwrap();
    ckpt.params.get_mut(id).data_mut()[0] = f32::NAN;
    let nan = f.path("nan.mick");
    ckpt.save(&nan).unwrap();
    let out = f.train("nan", &["--resume", s(&nan)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step 6"));
}
