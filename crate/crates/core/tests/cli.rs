use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ties::attention::{write_atns_file, AttentionStack, TokenLayout};
use ties::policy::CalibrationProfile;

fn ties(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ties"))
        .args(args)
        .current_dir(dir)
        .env_remove("TIES_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.json"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        ties(self.dir.path(), args)
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    }
}

const SMALL: &str = r#"{
  "scenario": {"n_visual": 32, "n_language": 4, "layers": 4, "n_signal": 3, "n_sinks": 2},
  "calibration_frames": 20,
  "episode": {"n_frames": 12},
  "sweep": {"frames_per_regime": 8, "budgets": [8, 32]}
}"#;

#[test]
fn calibrate_then_run_small_episode() {
    let sb = Sandbox::new(SMALL);
    let msg = sb.ok(&["calibrate", "cfg.json", "--set", "output=profile.json"]);
    assert!(msg.starts_with("M=20 tau_med="), "{msg}");
    assert!(msg.contains("q10=") && msg.contains("q90="));
    let p = CalibrationProfile::load(&sb.path("profile.json")).unwrap();
    assert_eq!(p.sample_count, 20);

    sb.ok(&[
        "run",
        "cfg.json",
        "--set",
        "profile=profile.json",
        "--set",
        "output=run.ndjson",
    ]);
    let text = fs::read_to_string(sb.path("run.ndjson")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 13);
    assert!(lines.iter().all(|l| l["schema_version"] == 1));
    assert_eq!(lines[12]["type"], "summary");
    assert_eq!(lines[12]["complete"], true);
    assert_eq!(lines[0]["triggered"], true);
}

#[test]
fn one_frame_episode_gives_two_lines() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&["calibrate", "cfg.json", "--set", "output=p.json"]);
    sb.ok(&[
        "run",
        "cfg.json",
        "--set",
        "episode.n_frames=1",
        "--set",
        "profile=p.json",
        "--set",
        "output=r.ndjson",
    ]);
    assert_eq!(fs::read_to_string(sb.path("r.ndjson")).unwrap().lines().count(), 2);
}

#[test]
fn default_episode_reduction_is_exact() {
    let sb = Sandbox::new("{}");
    sb.ok(&["calibrate", "cfg.json", "--set", "output=p.json"]);
    sb.ok(&["run", "cfg.json", "--set", "profile=p.json", "--set", "output=r.ndjson"]);
    let text = fs::read_to_string(sb.path("r.ndjson")).unwrap();
    let steps: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .filter(|v: &serde_json::Value| v["type"] == "step")
        .collect();
    assert_eq!(steps.len(), 50);
    for s in &steps {
        assert_eq!(s["reduction"].as_f64().unwrap(), 0.78125);
        assert_eq!(s["retained_count"], 56);
    }
}

#[test]
fn run_is_byte_identical_and_seed_sensitive() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&["calibrate", "cfg.json", "--set", "output=p.json"]);
    let run = |out: &str, seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_ties"));
        c.args([
            "run",
            "cfg.json",
            "--set",
            "profile=p.json",
            "--set",
            "dual_execution=true",
        ])
        .args(["--set", &format!("output={out}")])
        .current_dir(sb.dir.path())
        .env_remove("TIES_SEED");
        if let Some(s) = seed {
            c.env("TIES_SEED", s);
        }
        assert!(c.status().unwrap().success());
        fs::read(sb.path(out)).unwrap()
    };
    let a = run("a.ndjson", None);
    let b = run("b.ndjson", None);
    let c = run("c.ndjson", Some("99"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(String::from_utf8(a).unwrap().contains("output_drift"));
}

#[test]
fn calibrate_on_two_frames_takes_the_mean() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&[
        "generate",
        "cfg.json",
        "--set",
        "generate.frames_per_regime=1",
        "--set",
        "output=ds",
    ]);
    sb.ok(&["calibrate", "cfg.json", "--set", "input=ds", "--set", "output=p.json"]);
    let p = CalibrationProfile::load(&sb.path("p.json")).unwrap();
    assert_eq!(p.sample_count, 2);
    let (a, b) = (p.tau_samples[0], p.tau_samples[1]);
    assert!((p.tau_med - (a + b) / 2.0).abs() < 1e-15);
    assert!(p.source_id.starts_with("dataset:"));
}

#[test]
fn default_profile_reloads_bit_identically() {
    let sb = Sandbox::new("{}");
    sb.ok(&["calibrate", "cfg.json", "--set", "output=p.json"]);
    let text = fs::read_to_string(sb.path("p.json")).unwrap();
    let p = CalibrationProfile::from_json(&text).unwrap();
    assert_eq!(p.sample_count, 100);
    assert_eq!(p.to_json().unwrap(), text);
}

#[test]
fn missing_input_exits_2_without_output() {
    let sb = Sandbox::new(SMALL);
    let o = sb.run(&[
        "calibrate",
        "cfg.json",
        "--set",
        "input=nowhere",
        "--set",
        "output=p.json",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere"));
    assert!(!sb.path("p.json").exists());
}

#[test]
fn unreadable_frame_is_named() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&[
        "generate",
        "cfg.json",
        "--set",
        "generate.frames_per_regime=2",
        "--set",
        "output=ds",
    ]);
    fs::write(sb.path("ds/frame_00001.atns"), b"NOPE 1 1 1 1 0\n").unwrap();
    let o = sb.run(&["calibrate", "cfg.json", "--set", "input=ds", "--set", "output=p.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("frame_00001.atns"), "{}", stderr(&o));
    assert!(!sb.path("p.json").exists());
}

#[test]
fn dimension_mismatch_exits_3() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&[
        "generate",
        "cfg.json",
        "--set",
        "generate.frames_per_regime=2",
        "--set",
        "output=ds",
    ]);
    sb.ok(&["calibrate", "cfg.json", "--set", "output=p.json"]);
    // A valid ATNS file whose token count disagrees with the manifest.
    let n = 10;
    let stack = AttentionStack::new(
        4,
        2,
        n,
        TokenLayout::language_first(4, 6),
        vec![1.0 / n as f64; 4 * 2 * n * n],
    )
    .unwrap();
    write_atns_file(&stack, &sb.path("ds/frame_00002.atns")).unwrap();
    let o = sb.run(&[
        "run",
        "cfg.json",
        "--set",
        "input=ds",
        "--set",
        "profile=p.json",
        "--set",
        "output=r.ndjson",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn tampered_profile_exits_3() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&["calibrate", "cfg.json", "--set", "output=p.json"]);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(sb.path("p.json")).unwrap()).unwrap();
    v["tau_med"] = serde_json::json!(0.123456);
    fs::write(sb.path("p.json"), v.to_string()).unwrap();
    let o = sb.run(&["run", "cfg.json", "--set", "profile=p.json", "--set", "output=r.ndjson"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn input_errors_exit_2() {
    let sb = Sandbox::new(SMALL);
    let bad = [
        vec!["run", "cfg.json", "--set", "output=r.ndjson"],
        vec![
            "bench",
            "cfg.json",
            "--set",
            "output=b.csv",
            "--set",
            "sweep.budgets=[64]",
        ],
        vec!["bench", "cfg.json", "--set", "output=b.csv", "--set", "gama=0.9"],
        vec!["bench", "missing.json"],
        vec!["inspect", "cfg.json"],
        vec!["frobnicate", "cfg.json"],
        vec!["calibrate", "cfg.json", "--set", "output=no/such/dir/p.json"],
    ];
    for args in bad {
        let o = sb.run(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    fs::write(sb.path("broken.json"), "{").unwrap();
    assert_eq!(code(&sb.run(&["bench", "broken.json"])), 2);
}

#[test]
fn hard_mode_with_threshold_needs_no_profile() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&[
        "run",
        "cfg.json",
        "--set",
        "prune.mode=hard",
        "--set",
        "prune.tau_threshold=0.5",
        "--set",
        "output=r.ndjson",
    ]);
    let text = fs::read_to_string(sb.path("r.ndjson")).unwrap();
    for l in text.lines().filter(|l| l.contains("\"step\"")) {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let w = v["w_used"].as_f64().unwrap();
        assert!(w == 0.0 || w == 1.0);
        assert_eq!(w == 0.0, v["tau_used"].as_f64().unwrap() > 0.5);
    }
}

#[test]
fn inspect_dumps_tau_and_trace() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&[
        "generate",
        "cfg.json",
        "--set",
        "generate.frames_per_regime=1",
        "--set",
        "output=ds",
    ]);
    let out = sb.ok(&["inspect", "cfg.json", "--set", "input=ds/frame_00001.atns"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["type"], "inspect");
    assert_eq!(v["n_visual"], 32);
    assert_eq!(v["per_pair"].as_array().unwrap().len(), 2);
    let trace = v["trace"].as_array().unwrap();
    assert_eq!(trace.len(), 3);
    assert_eq!(
        trace[0]["top_k"].as_array().unwrap().len(),
        v["tau_k"].as_u64().unwrap() as usize
    );

    let o = sb.run(&[
        "inspect",
        "cfg.json",
        "--set",
        "input=ds/frame_00001.atns",
        "--set",
        "prune.prune_from_layer=3",
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bench_rows_have_the_expected_shape() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&["bench", "cfg.json", "--set", "output=b.csv"]);
    let text = fs::read_to_string(sb.path("b.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "strategy",
            "regime",
            "budget",
            "mean_recall",
            "mean_tau",
            "auc",
            "flops_ratio",
            "n_frames",
            "seed",
            "schema_version"
        ]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 7 * 3 * 2);
    for r in rows.iter().filter(|r| &r[2] == "32") {
        assert_eq!(&r[3], "1.0", "{r:?}");
    }
}

#[test]
fn default_bench_prefers_uniform_on_type2() {
    let sb =
        Sandbox::new(r#"{"sweep": {"budgets": [56], "strategies": ["top_k", "uniform_rank"], "regimes": ["type2"]}}"#);
    sb.ok(&["bench", "cfg.json", "--set", "output=b.csv"]);
    let text = fs::read_to_string(sb.path("b.csv")).unwrap();
    let recall = |s: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(&format!("{s},type2,56,"))).unwrap();
        line.split(',').nth(3).unwrap().parse().unwrap()
    };
    assert!(recall("top_k") < recall("uniform_rank"));
}
