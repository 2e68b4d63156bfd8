use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecg-tamperlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn generate(dir: &Path, subjects: &str, duration: &str, seed: &str) -> Output {
    run(&[
        "generate",
        "--subjects",
        subjects,
        "--duration",
        duration,
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ])
}

fn sidecars(dir: &Path) -> Vec<serde_json::Value> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|p| serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap())
        .collect()
}

fn donor_spans(side: &serde_json::Value) -> Vec<(u64, u64)> {
    side["spans"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["source"] == "B")
        .map(|s| (s["start"].as_u64().unwrap(), s["end"].as_u64().unwrap()))
        .collect()
}

#[test]
fn help_everywhere_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["generate", "tamper", "run", "flops", "gradcheck", "report"] {
        assert!(stdout(&o).contains(sub), "{sub} missing from top-level help");
        let h = run(&[sub, "--help"]);
        assert_eq!(code(&h), 0, "{sub}");
        let text = stdout(&h);
        for flag in ["--seed", "--out", "--jobs", "--verbose"] {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
    }
    assert!(stdout(&run(&["tamper", "--help"])).contains("--render"));
    assert!(stdout(&run(&["run", "--help"])).contains("--dry-run"));
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["tamper", "--data", ".", "--strategy", "sporadic30"])), 1);
    assert_eq!(code(&run(&["flops", "--scale", "big"])), 1);
    assert_eq!(code(&run(&["gradcheck", "--kind", "lstm"])), 1);
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&generate(&a, "3", "8", "1")), 0);
    assert_eq!(code(&generate(&b, "3", "8", "1")), 0);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["records"].as_array().unwrap().len(), 21);
    let mut files: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.iter().filter(|f| f.to_str().unwrap().ends_with(".f64")).count(), 21);
    for f in &files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f:?}");
    }
    let c = dir.path().join("c");
    assert_eq!(code(&generate(&c, "3", "8", "2")), 0);
    assert_ne!(std::fs::read(a.join(&files[0])).unwrap(), std::fs::read(c.join(&files[0])).unwrap());
}

#[test]
fn generate_rejects_short_records() {
    let dir = tempfile::tempdir().unwrap();
    let o = generate(&dir.path().join("d"), "3", "2", "1");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("4 s"));
}

#[test]
fn tamper_writes_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&generate(&data, "3", "8", "1")), 0);
    let tamper = |strategy: &str, out: &Path, render: &str| {
        run(&[
            "tamper",
            "--data",
            data.to_str().unwrap(),
            "--strategy",
            strategy,
            "--count",
            "6",
            "--render",
            render,
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ])
    };

    let sp = dir.path().join("sp");
    assert_eq!(code(&tamper("sporadic20", &sp, "2")), 0);
    let sides = sidecars(&sp);
    assert_eq!(sides.len(), 6);
    for s in &sides {
        let d = donor_spans(s);
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|(a, b)| b - a == 102));
        assert_ne!(s["host_id"], s["donor_id"]);
    }
    let svgs = std::fs::read_dir(&sp)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 2);
    let raw = std::fs::read(sp.join("sporadic20_0000.f64")).unwrap();
    assert_eq!(raw.len(), 2048 * 8);

    let again = dir.path().join("again");
    assert_eq!(code(&tamper("sporadic20", &again, "2")), 0);
    assert_eq!(raw, std::fs::read(again.join("sporadic20_0000.f64")).unwrap());

    let half = dir.path().join("half");
    assert_eq!(code(&tamper("half5050", &half, "0")), 0);
    for s in sidecars(&half) {
        let spans: Vec<(u64, u64, String)> = s["spans"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| (x["start"].as_u64().unwrap(), x["end"].as_u64().unwrap(), x["source"].as_str().unwrap().to_string()))
            .collect();
        assert_eq!(spans, vec![(0, 1024, "A".to_string()), (1024, 2048, "B".to_string())]);
    }
}

#[test]
fn tamper_needs_two_subjects_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one");
    assert_eq!(code(&generate(&one, "1", "8", "1")), 0);
    let out = dir.path().join("out");
    let o = run(&["tamper", "--data", one.to_str().unwrap(), "--strategy", "aba", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("nothing");
    let o = run(&["tamper", "--data", missing.to_str().unwrap(), "--strategy", "aba"]);
    assert_eq!(code(&o), 2);
}

fn write_spec(dir: &Path, body: &str) -> String {
    let p = dir.join("spec.json");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY: &str = r#"{"model":"cnn","strategies":"half5050","repeats":1,"master_seed":4,
    "model_config":{"scale":0.1},"dataset":{"subjects":3,"duration_s":12},"hyper":{"epochs":2}}"#;

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = run(&["run", &spec, "--dry-run", "--repeats", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let resolved: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(resolved["repeats"], 7);
    assert_eq!(resolved["model_config"]["scale"], 0.1);
    assert_eq!(resolved["hyper"]["epochs"], 2);
    assert!(!out.exists());
}

#[test]
fn minimal_spec_produces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = run(&["run", &spec, "--repeats", "2", "--svg", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["entries"][0]["runs"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("accuracy_mean,accuracy_std"));
    assert!(lines[1].starts_with("CNN,half5050,2,2,"));
    assert!(out.join("report_half5050.svg").exists());

    let o = run(&["report", out.join("report.json").to_str().unwrap(), out.join("report.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 3);
}

#[test]
fn invalid_spec_lists_problems() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), r#"{"model":"cnn","repeats":0,"model_config":{"scale":5}}"#);
    let o = run(&["run", &spec]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("repeats:") && err.contains("model_config:"), "{err}");
    let spec = write_spec(dir.path(), r#"{"model":"cnn","colour":"red"}"#);
    assert_eq!(code(&run(&["run", &spec])), 2);
}

#[test]
fn flops_table() {
    let o = run(&["flops"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().filter(|l| l.matches(" | ").count() == 2).skip(1).collect();
    assert_eq!(rows.len(), 9);
    let cnn = rows.iter().find(|r| r.starts_with("CNN | 2048×1 | ")).unwrap();
    let m: f64 = cnn.rsplit(" | ").next().unwrap().trim_end_matches(" M").parse().unwrap();
    assert!((144.0..=576.0).contains(&m), "{m}");

    let totals = |scale: &str| -> Vec<u64> {
        let o = run(&["flops", "--json", "--scale", scale]);
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v.as_array().unwrap().iter().map(|r| r["total_flops"].as_u64().unwrap()).collect()
    };
    for (half, full) in totals("0.5").iter().zip(totals("1.0")) {
        assert!(*half < full);
    }
}

#[test]
fn gradcheck_reports_and_fails_on_corruption() {
    let o = run(&["gradcheck", "--kind", "cnn"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("< 1e-4"), "{text}");
    let o = run(&["gradcheck", "--kind", "cnn", "--corrupt-gradient"]);
    assert_ne!(code(&o), 0);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&run(&["gradcheck", "--scale", "0.5"])), 2);
}
