use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_margin-forge");
const FIXTURE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../core/tests/fixtures/ten.jsonl"
);

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MARGIN_FORGE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn chain(dir: &Path) {
    let p = |f: &str| dir.join(f).to_str().unwrap().to_string();
    ok(&["ingest", "--input", FIXTURE, "--output", &p("in.jsonl")]);
    ok(&[
        "score",
        "--input",
        &p("in.jsonl"),
        "--output",
        &p("scored.jsonl"),
        "--source",
        "ex",
        "--source",
        "im",
        "--min-tail",
        "0",
        "--no-tail-width",
        "--specs",
        &p("specs.json"),
    ]);
    ok(&[
        "aggregate",
        "--input",
        &p("scored.jsonl"),
        "--output",
        &p("agg.jsonl"),
    ]);
    ok(&[
        "select",
        "--input",
        &p("agg.jsonl"),
        "--output",
        &p("bees.jsonl"),
        "--strategy",
        "bees",
        "--k",
        "4",
    ]);
    ok(&[
        "select",
        "--input",
        &p("in.jsonl"),
        "--output",
        &p("z.jsonl"),
        "--strategy",
        "z",
        "--source",
        "ex",
        "--k",
        "2",
        "--seed",
        "5",
    ]);
    ok(&[
        "stats",
        "--input",
        &p("in.jsonl"),
        "--sources",
        "ex,im",
        "--bins",
        "4",
        "--output",
        &p("stats.json"),
    ]);
}

#[test]
fn staged_chain_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    chain(a.path());
    chain(b.path());
    for f in [
        "in.jsonl",
        "scored.jsonl",
        "specs.json",
        "agg.jsonl",
        "bees.jsonl",
        "z.jsonl",
        "stats.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let bees = fs::read_to_string(a.path().join("bees.jsonl")).unwrap();
    let ids: Vec<&str> = bees
        .lines()
        .skip(1)
        .map(|l| l.split('"').nth(3).unwrap())
        .collect();
    assert_eq!(ids, ["r1", "r0", "r8", "r6"]);
}

#[test]
fn pipeline_config_and_field_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(FIXTURE, dir.path().join("data.jsonl")).unwrap();
    let base = "input = \"data.jsonl\"\noutput_dir = \"out\"\nsources = [\"ex\", \"im\"]\n\n[projection]\nmin_tail = 0\ntail_width_rule = false\n\n[select]\nk = 4\n";
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{base}strategy = \"bees\"\n")).unwrap();
    ok(&["pipeline", "--config", cfg.to_str().unwrap()]);
    let sel = fs::read_to_string(dir.path().join("out/selection.jsonl")).unwrap();
    assert!(sel.starts_with("#config=bees:"));

    fs::write(&cfg, format!("{base}strategy = \"greedy\"\n")).unwrap();
    let out = run(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("select.strategy") && err.contains("greedy"),
        "{err}"
    );
}

#[test]
fn strict_mode_rejects_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    let mut text = fs::read_to_string(FIXTURE).unwrap();
    text.push_str("{not json\n");
    fs::write(&input, text).unwrap();
    let output = dir.path().join("out.jsonl");
    let (i, o) = (input.to_str().unwrap(), output.to_str().unwrap());
    let lenient = ok(&["ingest", "--input", i, "--output", o]);
    assert!(String::from_utf8_lossy(&lenient.stderr).contains("skipped 1"));
    assert_eq!(fs::read_to_string(&output).unwrap().lines().count(), 10);
    assert!(!run(&["--strict", "ingest", "--input", i, "--output", o])
        .status
        .success());
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str, seed: Option<&str>| {
        let path = dir.path().join(name);
        let mut cmd = Command::new(BIN);
        cmd.args([
            "select",
            "--input",
            FIXTURE,
            "--output",
            path.to_str().unwrap(),
            "--strategy",
            "random",
            "--k",
            "5",
        ]);
        cmd.env_remove("MARGIN_FORGE_SEED");
        if let Some(s) = seed {
            cmd.env("MARGIN_FORGE_SEED", s);
        }
        assert!(cmd.status().unwrap().success());
        fs::read_to_string(path).unwrap()
    };
    let env = out("env.jsonl", Some("42"));
    let flag = {
        let path = dir.path().join("flag.jsonl");
        ok(&[
            "select",
            "--input",
            FIXTURE,
            "--output",
            path.to_str().unwrap(),
            "--strategy",
            "random",
            "--k",
            "5",
            "--seed",
            "42",
        ]);
        fs::read_to_string(path).unwrap()
    };
    assert_eq!(env, flag);
    assert_ne!(env, out("zero.jsonl", None));
}

#[test]
fn lab_dpo_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&[
        "lab",
        "dpo",
        "--epochs",
        "20",
        "--strategy",
        "p",
        "--strategy",
        "bees",
        "--output-dir",
        d,
    ]);
    for s in ["p", "bees"] {
        let csv = fs::read_to_string(dir.path().join(format!("trace_{s}.csv"))).unwrap();
        assert_eq!(csv.lines().next(), Some("step,loss,margin"));
        assert_eq!(csv.lines().count(), 22);
    }
    assert!(!dir.path().join("trace_z.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert!(summary["weak_to_strong_correlation"].is_number());
}

#[test]
fn lab_dpo_reads_pair_files() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    let mut text = String::new();
    for i in 0..40 {
        let (w, l, ext) = if i % 2 == 0 {
            (2, 0, 1.5)
        } else {
            (0, 1, -0.5)
        };
        text.push_str(&format!(
            "{{\"id\":\"q{i}\",\"prompt\":{},\"winner\":{w},\"loser\":{l},\"external\":{ext}}}\n",
            i % 3
        ));
    }
    fs::write(&pairs, text).unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&[
        "lab",
        "dpo",
        "--prompts",
        "3",
        "--responses",
        "3",
        "--pairs",
        pairs.to_str().unwrap(),
        "--k",
        "8",
        "--epochs",
        "10",
        "--strategy",
        "p",
        "--output-dir",
        d,
    ]);
    assert!(dir.path().join("trace_p.csv").exists());
}

#[test]
fn lab_shrinkage_writes_report_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&[
        "lab",
        "shrinkage",
        "--n",
        "4000",
        "--sigmas",
        "0,2",
        "--seeds",
        "2",
        "--output-dir",
        d,
    ]);
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["selected_norm"].as_f64().unwrap() > report["full_norm"].as_f64().unwrap());
    assert!(!run(&["lab", "shrinkage", "--dim", "3", "--output-dir", d])
        .status
        .success());
}
