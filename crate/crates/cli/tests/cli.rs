use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentmine::datakit::KEYS;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentmine")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const FAST: [&str; 8] = [
    "--set", "iterations=40",
    "--set", "mine_iterations=15",
    "--set", "batch_size=16",
    "--set", "finetune_iterations=5",
];

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).display().to_string()
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let o = self.s(out);
        let mut args = vec![cmd];
        args.extend(FAST);
        args.extend(extra);
        args.extend(["--out", &o]);
        bin(&args)
    }

    fn ok(&self, cmd: &str, out: &str, extra: &[&str]) {
        let r = self.run(cmd, out, extra);
        assert!(r.status.success(), "{cmd}: {}", String::from_utf8_lossy(&r.stderr));
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn help_lists_every_key_with_default_and_origin() {
    let out = bin(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for k in KEYS {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(k.key))
            .unwrap_or_else(|| panic!("{} missing from help", k.key));
        assert!(line.contains(&format!("[{}]", k.origin)), "{line}");
        if !k.default.is_empty() {
            assert!(line.contains(k.default), "{line}");
        }
    }
}

#[test]
fn eval_of_identical_checkpoints_gives_identical_bytes() {
    let w = Work::new();
    w.ok("pretrain", "a", &[]);
    std::fs::copy(w.p("a/model.ckpt"), w.p("copy.ckpt")).unwrap();
    w.ok("eval", "e1", &["--set", &format!("checkpoint={}", w.s("a/model.ckpt"))]);
    w.ok("eval", "e2", &["--set", &format!("checkpoint={}", w.s("copy.ckpt"))]);
    let a = read(&w.p("e1/report.json"));
    assert_eq!(a, read(&w.p("e2/report.json")));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    for key in ["frechet", "kmmd", "mean_variance", "classifier_error", "n_generated", "n_real", "seed"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["n_generated"], 1000);
}

#[test]
fn two_source_mining_trace_ends_on_a_distribution() {
    let w = Work::new();
    w.ok("pretrain", "a", &[]);
    w.ok("pretrain", "b", &["--seed", "3"]);
    let sources = format!("sources={},{}", w.s("a/model.ckpt"), w.s("b/model.ckpt"));
    w.ok("mine", "m", &["--set", &sources]);
    let trace = read(&w.p("m/selector_trace.csv"));
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iteration,p0,p1"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 15);
    let last: Vec<f64> = rows[14].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert!((last.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let metrics = read(&w.p("m/metrics.jsonl"));
    assert!(metrics.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    w.ok("finetune", "f", &["--set", &format!("checkpoint={}", w.s("m/mined.ckpt"))]);
    assert!(w.p("f/finetuned.ckpt").exists());
    assert!(w.p("f/selector_trace.csv").exists());
}

#[test]
fn conditional_sources_mine_both_ways() {
    let w = Work::new();
    w.ok("pretrain", "c", &["--set", "conditional=true", "--set", "source_data=0.5@-1,0:0.02|0.5@1,0:0.02"]);
    let src = format!("sources={}", w.s("c/model.ckpt"));
    w.ok("mine", "dual", &["--set", &src]);
    w.ok("mine", "fam", &["--set", &src, "--set", "cond_strategy=as-family"]);
    assert!(w.p("fam/selector_trace.csv").exists());
    assert!(!w.p("dual/selector_trace.csv").exists());
    w.ok("finetune", "dual-ft", &["--set", &format!("checkpoint={}", w.s("dual/mined.ckpt"))]);
    w.ok("sample", "s", &["--set", &format!("checkpoint={}", w.s("c/model.ckpt"))]);
}

#[test]
fn sample_writes_svg_for_planar_data_and_projection_otherwise() {
    let w = Work::new();
    w.ok("pretrain", "p2", &[]);
    w.ok("pretrain", "p3", &["--set", "source_data=0.5@0,0,0:0.1|0.5@1,1,1:0.1"]);
    w.ok("sample", "s2", &["--set", &format!("checkpoint={}", w.s("p2/model.ckpt")), "--set", "samples=50"]);
    w.ok("sample", "s3", &["--set", &format!("checkpoint={}", w.s("p3/model.ckpt")), "--set", "samples=50"]);
    assert!(w.p("s2/scatter.svg").exists() && !w.p("s2/pca.csv").exists());
    assert!(w.p("s3/pca.csv").exists() && !w.p("s3/scatter.svg").exists());
    assert_eq!(read(&w.p("s3/samples.csv")).lines().next(), Some("x0,x1,x2"));
    assert_eq!(read(&w.p("s3/pca.csv")).lines().count(), 51);
}

#[test]
fn ablate_emits_selection_and_depth_rows() {
    let w = Work::new();
    w.ok("pretrain", "a", &[]);
    w.ok("pretrain", "b", &["--seed", "1"]);
    let sources = format!("sources={},{}", w.s("a/model.ckpt"), w.s("b/model.ckpt"));
    w.ok("ablate", "ab", &["--set", &sources]);
    let csv = read(&w.p("ab/ablate.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "sweep,variant,seed,frechet,kmmd,mean_variance,p");
    let variants: Vec<(&str, &str)> = rows[1..]
        .iter()
        .map(|r| {
            let mut c = r.split(',');
            (c.next().unwrap(), c.next().unwrap())
        })
        .collect();
    assert_eq!(
        variants,
        [("selection", "max"), ("selection", "mean"), ("depth", "1"), ("depth", "2"), ("depth", "3"), ("depth", "4")]
    );
}

#[test]
fn report_collates_runs_in_argument_order() {
    let w = Work::new();
    w.ok("pretrain", "a", &[]);
    let ck = format!("checkpoint={}", w.s("a/model.ckpt"));
    w.ok("eval", "e0", &["--set", &ck]);
    w.ok("eval", "e1", &["--set", &ck, "--seed", "1"]);
    ok(&["report", &w.s("e1"), &w.s("e0/report.json"), "--out", &w.s("r")]);
    let csv = read(&w.p("r/report.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "run,frechet,kmmd,mean_variance,classifier_error,n_generated,n_real,seed");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with(&w.s("e1")) && rows[1].ends_with(",1000,1000,1"));
    assert!(rows[2].ends_with(",,1000,1000,0"));
}

#[test]
fn config_file_seed_flag_and_overrides_agree() {
    let w = Work::new();
    std::fs::write(w.p("run.cfg"), "iterations = 40\nbatch_size = 16\nseed = 4\n").unwrap();
    ok(&["pretrain", "--config", &w.s("run.cfg"), "--out", &w.s("a")]);
    ok(&["pretrain", "--set", "iterations=40", "--set", "batch_size=16", "--seed", "4", "--out", &w.s("b")]);
    assert_eq!(std::fs::read(w.p("a/model.ckpt")).unwrap(), std::fs::read(w.p("b/model.ckpt")).unwrap());
    assert_eq!(read(&w.p("a/resolved.cfg")), read(&w.p("b/resolved.cfg")));
    ok(&["pretrain", "--config", &w.s("a/resolved.cfg"), "--out", &w.s("c")]);
    assert_eq!(std::fs::read(w.p("a/model.ckpt")).unwrap(), std::fs::read(w.p("c/model.ckpt")).unwrap());
}

fn error_kind(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str::<serde_json::Value>(line.trim()).unwrap()["error"].clone()
}

#[test]
fn config_errors_exit_with_2() {
    let w = Work::new();
    let r = w.run("pretrain", "x", &["--set", "no_such_key=1"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_kind(&r)["kind"], "config");
    assert_eq!(error_kind(&r)["key"], "no_such_key");
    let r = w.run("finetune", "y", &[]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(bin(&["pretrain", "--bogus"]).status.code(), Some(2));
    assert!(!w.p("x").exists() && !w.p("y").exists());
}

#[test]
fn divergence_exits_with_3_and_keeps_the_last_finite_state() {
    let w = Work::new();
    let r = w.run("pretrain", "d", &["--set", "lr_generator=1e200", "--set", "lr_critic=1e200"]);
    assert_eq!(r.status.code(), Some(3));
    assert_eq!(error_kind(&r)["kind"], "divergence");
    assert!(!w.p("d").exists());
    assert!(w.p("d.failed/last_finite.ckpt").exists());
    assert!(w.p("d.failed/error.json").exists());
}

#[test]
fn io_and_format_errors_exit_with_4() {
    let w = Work::new();
    std::fs::write(w.p("junk.ckpt"), b"not a checkpoint").unwrap();
    let r = w.run("sample", "s", &["--set", &format!("checkpoint={}", w.s("junk.ckpt"))]);
    assert_eq!(r.status.code(), Some(4));
    w.ok("pretrain", "a", &[]);
    let r = w.run("pretrain", "a", &[]);
    assert_eq!(r.status.code(), Some(4));
    assert_eq!(error_kind(&r)["kind"], "io");
}

#[test]
fn replay_refuses_changed_inputs() {
    let w = Work::new();
    w.ok("pretrain", "a", &[]);
    w.ok("sample", "s", &["--set", &format!("checkpoint={}", w.s("a/model.ckpt"))]);
    std::fs::copy(w.p("a/model.ckpt"), w.p("backup.ckpt")).unwrap();
    w.ok("pretrain", "b", &["--seed", "9"]);
    std::fs::copy(w.p("b/model.ckpt"), w.p("a/model.ckpt")).unwrap();
    let r = bin(&["--replay", &w.s("s/manifest.json"), "--out", &w.s("s2")]);
    assert_eq!(r.status.code(), Some(4));
    std::fs::copy(w.p("backup.ckpt"), w.p("a/model.ckpt")).unwrap();
    ok(&["--replay", &w.s("s/manifest.json"), "--out", &w.s("s3")]);
    assert_eq!(read(&w.p("s/samples.csv")), read(&w.p("s3/samples.csv")));
}
