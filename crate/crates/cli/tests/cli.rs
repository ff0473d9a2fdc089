use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pekd_cli::metrics::{read_records, MetricsRecord};

const TINY: &str = r#"
split_seeds = [1, 2]
trial_seeds = [1, 2, 3]
variants = [
  { peft = "lora", kd = false, gate = "none" },
  { peft = "lora", kd = true, gate = "entropy" },
]

[encoder]
layers = 1
vision_width = 8
text_width = 8
embed_dim = 4
heads = 2
patches = 4

[data]
n_examples = 2000
n_test = 100
patches = 4
patch_dim = 8

[teacher]
max_epochs = 2

[student]
max_epochs = 2

[adapter]
bottleneck = 2

[lora]
rank = 2
"#;

fn pekd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pekd")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "failed: {}\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(w.path("tiny.toml"), TINY).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        let p = self.path("data.pkds");
        if !p.exists() {
            ok(pekd(&["gen-data", "--config", s(&self.path("tiny.toml")), "--out", s(&p)]));
        }
        p
    }

    fn teacher(&self) -> PathBuf {
        let p = self.path("teacher.ckpt");
        if !p.exists() {
            let d = self.data();
            ok(pekd(&[
                "train-teacher",
                "--config",
                s(&self.path("tiny.toml")),
                "--data",
                s(&d),
                "--out",
                s(&p),
            ]));
        }
        p
    }
}

fn records(text: &str) -> Vec<MetricsRecord> {
    read_records(text.as_bytes()).unwrap()
}

fn sha_line(out: &str) -> String {
    out.lines().find(|l| l.starts_with("sha256")).unwrap().to_string()
}

#[test]
fn gen_data_is_reproducible_and_balanced() {
    let w = Work::new();
    let a = ok(pekd(&["gen-data", "--n", "20000", "--n-test", "10", "--out", s(&w.path("a"))]));
    assert!(a.contains("pool\t20000\tclass0\t10000\tclass1\t10000"), "{a}");
    let b = ok(pekd(&["gen-data", "--n", "20000", "--n-test", "10", "--out", s(&w.path("b"))]));
    assert_eq!(sha_line(&a), sha_line(&b));
    assert_eq!(std::fs::read(w.path("a")).unwrap(), std::fs::read(w.path("b")).unwrap());
    let c = ok(pekd(&["gen-data", "--n", "20000", "--n-test", "10", "--seed", "9", "--out", s(&w.path("c"))]));
    assert_ne!(sha_line(&a), sha_line(&c));
    assert!(a.starts_with("# effective config"));
}

#[test]
fn gen_data_guards_its_inputs() {
    let w = Work::new();
    let d = w.data();
    let again = pekd(&["gen-data", "--config", s(&w.path("tiny.toml")), "--out", s(&d)]);
    assert_eq!(again.status.code(), Some(1), "{}", stderr(&again));
    ok(pekd(&["gen-data", "--config", s(&w.path("tiny.toml")), "--out", s(&d), "--force"]));

    let shift = pekd(&["gen-data", "--shift", "0.5", "--out", s(&w.path("shifted"))]);
    assert_eq!(shift.status.code(), Some(1));
    assert!(stderr(&shift).contains("--base"));
    let out = ok(pekd(&["gen-data", "--shift", "0.5", "--base", s(&d), "--out", s(&w.path("shifted"))]));
    assert!(out.contains("pool\t0\t"), "{out}");

    let garbage = w.path("garbage");
    std::fs::write(&garbage, b"not a dataset").unwrap();
    let bad = pekd(&["gen-data", "--shift", "0.5", "--base", s(&garbage), "--out", s(&w.path("x"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn every_command_documents_its_flags() {
    for (cmd, flag) in [
        (vec!["gen-data"], "--force"),
        (vec!["train-teacher"], "--data"),
        (vec!["train-student"], "--gate"),
        (vec!["eval"], "--dump-activations"),
        (vec!["protocol"], "--keep-students"),
        (vec!["analyze", "cca"], "--ridge"),
        (vec!["analyze", "errors"], "--student"),
        (vec!["analyze", "gate-curve"], "--teacher"),
        (vec!["analyze", "confidence"], "--records"),
    ] {
        let mut args = cmd.clone();
        args.push("--help");
        let out = ok(pekd(&args));
        assert!(out.contains(flag), "{cmd:?}: {out}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let w = Work::new();
    let bad_peft = pekd(&[
        "train-student",
        "--data",
        "d",
        "--teacher",
        "t",
        "--peft",
        "bitfit",
        "--out",
        "o",
    ]);
    assert_eq!(bad_peft.status.code(), Some(1));
    assert_eq!(pekd(&["no-such-command"]).status.code(), Some(1));
    std::fs::write(w.path("bad.toml"), "bogus = 1\n").unwrap();
    let bad_cfg = pekd(&["gen-data", "--config", s(&w.path("bad.toml")), "--out", s(&w.path("x"))]);
    assert_eq!(bad_cfg.status.code(), Some(1));
    assert!(!w.path("x").exists());
}

#[test]
fn teacher_training_is_reproducible_and_fails_loudly_on_nan() {
    let w = Work::new();
    let t = w.teacher();
    let d = w.data();
    let cfg = s(&w.path("tiny.toml")).to_string();
    let again = w.path("again.ckpt");
    let out = ok(pekd(&["train-teacher", "--config", &cfg, "--data", s(&d), "--out", s(&again), "--seed", "1"]));
    assert_eq!(std::fs::read(&t).unwrap(), std::fs::read(&again).unwrap());
    assert!(matches!(records(&out).as_slice(), [MetricsRecord::Teacher(_)]));
    let other = w.path("other.ckpt");
    ok(pekd(&["train-teacher", "--config", &cfg, "--data", s(&d), "--out", s(&other), "--seed", "2"]));
    assert_ne!(std::fs::read(&t).unwrap(), std::fs::read(&other).unwrap());

    let hot = TINY.replace(
        "[teacher]\nmax_epochs = 2\n",
        "[teacher]\nmax_epochs = 2\nlr_backbone = 1e300\nlr_head = 1e300\n",
    );
    std::fs::write(w.path("hot.toml"), hot).unwrap();
    let nan = pekd(&[
        "train-teacher",
        "--config",
        s(&w.path("hot.toml")),
        "--data",
        s(&d),
        "--out",
        s(&w.path("nan.ckpt")),
    ]);
    assert_eq!(nan.status.code(), Some(3), "{}", stderr(&nan));
    assert!(!w.path("nan.ckpt").exists());
}

#[test]
fn students_eval_and_analyses_chain_together() {
    let w = Work::new();
    let d = w.data();
    let t = w.teacher();
    let cfg = s(&w.path("tiny.toml")).to_string();
    let student = |name: &str, extra: &[&str]| {
        let out = w.path(name);
        let mut args = vec!["train-student", "--config", &cfg, "--data", s(&d), "--teacher", s(&t)];
        args.extend_from_slice(&["--peft", "lora", "--out", s(&out)]);
        args.extend_from_slice(extra);
        pekd(&args)
    };
    let kd = student("kd.ckpt", &["--kd", "on", "--gate", "entropy"]);
    let out = ok(kd);
    match records(&out).as_slice() {
        [MetricsRecord::Run(r)] => assert_eq!(r.variant.to_string(), "lora/kd/entropy"),
        other => panic!("{other:?}"),
    }
    let plain = student("plain.ckpt", &["--kd", "off", "--gate", "hard"]);
    assert!(stderr(&plain).contains("ignored"), "{}", stderr(&plain));
    match records(&ok(plain)).as_slice() {
        [MetricsRecord::Run(r)] => assert_eq!(r.variant.to_string(), "lora/nokd"),
        other => panic!("{other:?}"),
    }

    let eval = |model: &Path, tag: &str| {
        ok(pekd(&[
            "eval",
            "--model",
            s(model),
            "--data",
            s(&d),
            "--teacher",
            s(&t),
            "--tag",
            tag,
            "--records",
            s(&w.path(&format!("{tag}.tsv"))),
            "--dump-activations",
            s(&w.path(&format!("{tag}.dump"))),
            "--export-embeddings",
            s(&w.path(&format!("{tag}.emb"))),
        ]))
    };
    let e = eval(&w.path("kd.ckpt"), "kd");
    assert!(e.contains("accuracy\t"), "{e}");
    eval(&t, "teacher");
    let emb = records(&std::fs::read_to_string(w.path("kd.emb")).unwrap());
    assert_eq!(emb.len(), 100);

    let cca = ok(pekd(&["analyze", "cca", "--a", s(&w.path("teacher.dump")), "--b", s(&w.path("kd.dump"))]));
    let rows = records(&cca);
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let MetricsRecord::Cca { row, .. } = r else { panic!("{r:?}") };
        assert!((0.0..=1.0).contains(&row.mean_cca));
    }
    let self_cca = ok(pekd(&["analyze", "cca", "--a", s(&w.path("kd.dump")), "--b", s(&w.path("kd.dump"))]));
    for r in records(&self_cca) {
        let MetricsRecord::Cca { row, .. } = r else { panic!() };
        // the ridge shaves a little off directions with tiny variance
        assert!((row.mean_cca - 1.0).abs() < 1e-3, "{row:?}");
    }
    let missing = pekd(&["analyze", "cca", "--a", s(&w.path("kd.dump")), "--b", s(&w.path("nope.dump"))]);
    assert_eq!(missing.status.code(), Some(2));

    let errors = records(&ok(pekd(&[
        "analyze",
        "errors",
        "--student",
        s(&w.path("kd.tsv")),
        "--teacher",
        s(&w.path("teacher.tsv")),
    ])));
    assert_eq!(errors.len(), 2);
    let gates = records(&ok(pekd(&["analyze", "gate-curve", "--teacher", s(&w.path("teacher.tsv"))])));
    assert_eq!(gates.len(), 100);
    let conf = records(&ok(pekd(&["analyze", "confidence", "--records", s(&w.path("kd.tsv"))])));
    assert_eq!(conf.len(), 2);
    let wrong = pekd(&["analyze", "gate-curve", "--teacher", s(&w.path("kd.emb"))]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn protocol_aggregates_six_runs_per_variant_deterministically() {
    let w = Work::new();
    let cfg = s(&w.path("tiny.toml")).to_string();
    let run = |dir: &str, threads: &str| {
        let out = w.path(dir);
        ok(Command::new(env!("CARGO_BIN_EXE_pekd"))
            .args(["protocol", "--config", &cfg, "--out", s(&out)])
            .env("PEKD_THREADS", threads)
            .output()
            .unwrap());
        out
    };
    let a = run("a", "1");
    let b = run("b", "3");
    let metrics = std::fs::read_to_string(a.join("metrics.tsv")).unwrap();
    assert_eq!(metrics, std::fs::read_to_string(b.join("metrics.tsv")).unwrap());
    for seed in [1, 2] {
        let name = format!("teacher-split{seed}.ckpt");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    let recs = records(&metrics);
    let aggs: Vec<_> = recs
        .iter()
        .filter_map(|r| match r {
            MetricsRecord::Aggregate(a) => Some(a),
            _ => None,
        })
        .collect();
    assert_eq!(aggs.len(), 2);
    assert!(aggs.iter().all(|a| a.runs == 6));
    assert!(recs.iter().any(|r| matches!(r, MetricsRecord::Delta(c) if c.axis == "kd")));
    assert!(std::fs::read_to_string(a.join("timing.tsv")).unwrap().lines().count() > 12);
    let clash = pekd(&["protocol", "--config", &cfg, "--out", s(&a)]);
    assert_eq!(clash.status.code(), Some(1));
}
