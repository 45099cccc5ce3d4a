use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 3
domain.n = 3
domain.vocab = 3
teacher.stay = 0.8
solver.steps = 16
data.count = 300
train.width = 16
train.heads = 2
train.layers = 1
train.epochs = 2
train.batch = 64
train.grad_chunks = 2
sample.count = 5
sample.path = 1+2
eval.samples = 2000
eval.systems = teacher,dd:1,dd:1+2,hybrid:2:3,onestep,skip:1
";

fn dd(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dd"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("DD_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn pipeline(dir: &Path, cfg: &Path) {
    for cmd in ["train-teacher", "gen-data", "distill", "sample", "eval", "plot"] {
        ok(dd(cmd, cfg, dir, &[]));
    }
}

#[test]
fn full_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &cfg);
    pipeline(&b, &cfg);
    for f in ["teacher.ddtc", "pairs.ddpr", "student.ddtc", "samples.jsonl", "manifest.distill.json", "manifest.gen-data.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let samples = fs::read_to_string(a.join("samples.jsonl")).unwrap();
    assert_eq!(samples.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(samples.lines().next().unwrap()).unwrap();
    assert_eq!(first["tokens"].as_array().unwrap().len(), 3);
    assert_eq!(first["student_calls"], 2);
    assert_eq!(first["teacher_calls"], 0);

    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    let rows: Vec<&str> = results.lines().collect();
    assert_eq!(rows[0], "system,steps,tv_joint,tv_marginal_mean,wall_ms,samples");
    let steps: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(steps, ["3", "1", "2", "3", "1", "3"]);
    let eval = fs::read_to_string(a.join("eval.txt")).unwrap();
    assert!(eval.contains("system=onestep\n") && eval.contains("speedup=3.000000"));
    assert!(fs::read_to_string(a.join("plot.svg")).unwrap().starts_with("<svg"));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.distill.json")).unwrap()).unwrap();
    assert!(manifest["inputs"]["pairs.ddpr"].is_string());
    assert!(manifest["outputs"]["student.ddtc"].is_string());
    let log = fs::read_to_string(a.join("log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["command"].is_string() && v["event"].is_string());
    }
    assert!(log.contains("\"event\":\"config\""));
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let o = ok(dd("gen-data", &cfg, &out, &["--dry-run", "--seed", "11"]));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 11\n") && text.contains("domain.n = 3\n"));
    assert!(!out.exists());
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");

    let bad = write_config(tmp.path(), "domain.nn = 3\n");
    assert_eq!(dd("gen-data", &bad, &out, &[]).status.code(), Some(2));
    assert_eq!(dd("gen-data", &tmp.path().join("absent.cfg"), &out, &[]).status.code(), Some(3));

    let cfg = write_config(tmp.path(), TINY);
    let o = dd("gen-data", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    // A pair store made for one teacher, distilled against another.
    ok(dd("train-teacher", &cfg, &out, &[]));
    ok(dd("gen-data", &cfg, &out, &[]));
    let other = write_config(tmp.path(), &TINY.replace("teacher.stay = 0.8", "teacher.stay = 0.6"));
    ok(dd("train-teacher", &other, &out, &[]));
    let o = dd("distill", &other, &out, &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
}

#[test]
fn neural_and_fitted_teachers_train() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.txt");
    fs::write(&corpus, "0 0 1\n1 1 2\n2 2 0\n0 0 1\n").unwrap();
    let fitted = write_config(
        tmp.path(),
        &format!("{TINY}teacher.kind = tabular\nteacher.alpha = 0.5\nteacher.corpus = {}\n", corpus.display()),
    );
    ok(dd("train-teacher", &fitted, &tmp.path().join("fit"), &[]));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("fit/manifest.train-teacher.json")).unwrap()).unwrap();
    assert!(m["inputs"][corpus.to_str().unwrap()].is_string());

    let neural = write_config(
        tmp.path(),
        &format!("{TINY}teacher.kind = neural\nteacher.corpus_size = 200\nteacher.epochs = 1\nteacher.width = 16\nteacher.heads = 2\nteacher.layers = 1\n"),
    );
    let out = tmp.path().join("nn");
    for cmd in ["train-teacher", "gen-data", "distill"] {
        ok(dd(cmd, &neural, &out, &[]));
    }
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = dd_core::cli::RunConfig::load(&path).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
