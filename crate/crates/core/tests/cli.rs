use std::path::Path;
use std::process::{Command, Output};

fn scope(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scope"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("SCOPE_THREADS", t);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = scope(args, None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn synth(dir: &Path) -> String {
    let bench = dir.join("bench");
    ok(&["synth", "--out", bench.to_str().unwrap(), "--seed", "4", "--increments", "2"]);
    bench.join("manifest.json").to_string_lossy().into_owned()
}

#[test]
fn eval_reproduces_run_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let run = dir.path().join("run");
    let ev = dir.path().join("ev");
    ok(&["run", "--manifest", &manifest, "--out", run.to_str().unwrap(), "--exclude-stage0"]);
    ok(&[
        "eval",
        "--predictions",
        run.join("predictions").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
        "--exclude-stage0",
    ]);
    for f in ["metrics.csv", "summary.json"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(ev.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let mut trees = Vec::new();
    for t in ["1", "4"] {
        let out = dir.path().join(format!("t{t}"));
        let o = scope(&["run", "--manifest", &manifest, "--out", out.to_str().unwrap()], Some(t));
        assert!(o.status.success());
        let mut files = Vec::new();
        for name in ["ipb.ipbb", "metrics.csv", "summary.json", "run.json", "predictions/stage_2.prdb"] {
            files.push(std::fs::read(out.join(name)).unwrap());
        }
        trees.push(files);
    }
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn outputs_hold_no_absolute_paths() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("run");
    ok(&["run", "--manifest", &manifest, "--out", out.to_str().unwrap()]);
    let root = dir.path().to_string_lossy().into_owned();
    for f in ["run.json", "summary.json", "build_ipb.log", "metrics.csv"] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(!text.contains(&root), "{f} mentions {root}");
    }
    let manifest_text = std::fs::read_to_string(&manifest).unwrap();
    assert!(!manifest_text.contains(&root));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"manifest": {manifest:?}, "hyperparams": {{"tau": 0.6, "lambda": 0.3}}, "out": "from_cfg"}}"#),
    )
    .unwrap();
    let out = dir.path().join("flag_out");
    ok(&["run", "--config", cfg.to_str().unwrap(), "--lambda", "0.9", "--out", out.to_str().unwrap()]);
    let details: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(details["hyperparams"]["tau"], 0.6);
    assert_eq!(details["hyperparams"]["lambda"], 0.9);
    assert!(!dir.path().join("from_cfg").exists());
}

#[test]
fn build_ipb_matches_run_bank() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let b = dir.path().join("bank");
    let r = dir.path().join("run");
    ok(&["build-ipb", "--manifest", &manifest, "--tau", "0.6", "--out", b.to_str().unwrap()]);
    ok(&["run", "--manifest", &manifest, "--tau", "0.6", "--out", r.to_str().unwrap()]);
    assert_eq!(std::fs::read(b.join("ipb.ipbb")).unwrap(), std::fs::read(r.join("ipb.ipbb")).unwrap());
    let log = std::fs::read_to_string(b.join("build_ipb.log")).unwrap();
    assert!(log.contains("tau=0.6"));

    let reused = dir.path().join("reused");
    ok(&[
        "run",
        "--manifest",
        &manifest,
        "--bank",
        b.join("ipb.ipbb").to_str().unwrap(),
        "--out",
        reused.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(r.join("summary.json")).unwrap(),
        std::fs::read(reused.join("summary.json")).unwrap()
    );
}

#[test]
fn seeds_change_support_draws() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let mut schedules = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("s{seed}"));
        ok(&["run", "--manifest", &manifest, "--seed", seed, "--k-shot", "2", "--out", out.to_str().unwrap()]);
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
        assert_eq!(v["schedule"]["stages"][0]["k_shot"], 2);
        schedules.push(v["schedule"].clone());
    }
    assert_ne!(schedules[0], schedules[1]);
}

#[test]
fn sweep_reports_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("sw");
    ok(&[
        "sweep",
        "--manifest",
        &manifest,
        "--out",
        out.to_str().unwrap(),
        "--sweep-tau",
        "0.5,2.0",
        "--sweep-lambda",
        "0.4",
    ]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("param,value,seed,stage,metric,score,error\n"));
    assert!(csv.lines().any(|l| l.starts_with("tau,2,0,,,,\"")));
    assert!(csv.lines().any(|l| l.starts_with("lambda,0.4,0,2,hm,")));
    assert!(csv.contains(",novel_proto_dist,"));
    let banks = std::fs::read_to_string(out.join("sweep_banks.csv")).unwrap();
    assert_eq!(banks.lines().count(), 3, "{banks}");
    let agg = std::fs::read_to_string(out.join("sweep_aggregate.csv")).unwrap();
    assert!(agg.contains("tau,0.5,per-run-hm,1,"));
    assert!(agg.contains("lambda,0.4,averaged-hm,1,"));
}

#[test]
fn empty_sweep_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let o = scope(&["sweep", "--manifest", &manifest, "--out", dir.path().join("x").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sweep grid is empty"));
}

#[test]
fn errors_exit_with_code_two_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let scene = dir.path().join("bench/scenes/test_000.scnb");
    let mut bytes = std::fs::read(&scene).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&scene, bytes).unwrap();
    let o = scope(&["run", "--manifest", &manifest, "--out", dir.path().join("x").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum mismatch"));

    let bad = dir.path().join("bad.ipbb");
    std::fs::write(&bad, b"IPBB\x07\x00\x00\x00").unwrap();
    let o = scope(
        &["run", "--manifest", &manifest, "--bank", bad.to_str().unwrap(), "--out", dir.path().join("y").to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.ipbb") || err.contains("checksum"), "{err}");

    let o = scope(&["run", "--manifest", &manifest, "--lambda", "1.5"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn partition_writes_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    drop(manifest);
    let input = dir.path().join("bench/scenes/base_000.scnb");
    let out = dir.path().join("blocks");
    let o = ok(&[
        "partition",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--block-size",
        "2",
        "--samples",
        "64",
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("blocks"));
    let blocks: Vec<_> = std::fs::read_dir(&out).unwrap().collect();
    assert!(!blocks.is_empty());
    for b in blocks {
        let s = scope_core::ingestion::load_scene(&b.unwrap().path()).unwrap();
        assert_eq!(s.num_points(), 64);
        assert_eq!(s.dim(), 9);
    }
}
