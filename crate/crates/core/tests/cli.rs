use std::path::Path;
use std::process::{Command, Output};

use spatialstack::config::RunConfig;
use spatialstack::experiment::EvalReport;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatialstack"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path, steps: usize) -> std::path::PathBuf {
    let mut cfg = RunConfig::toy();
    cfg.train.total_steps = steps;
    cfg.data.eval_count = 8;
    cfg.data.seeds = vec![1];
    cfg.train.checkpoint_every = Some(2);
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.emit().unwrap()).unwrap();
    path
}

#[test]
fn usage_errors_exit_one_with_a_single_line() {
    for args in [
        vec!["frobnicate"],
        vec!["gen-data", "--seed", "1"],
        vec!["eval", "--checkpoint", "x", "--suite", "medium"],
    ] {
        let o = bin(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error[E_USAGE]: "), "{err}");
    }
    assert!(stderr(&bin(&["gen-data", "--seed", "1"])).contains("--count"));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two_with_their_code() {
    let o = bin(&["eval", "--checkpoint", "/nonexistent/ck.sstk"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[E_FILE]: "), "{err}");
    assert!(err.contains("/nonexistent/ck.sstk"));
    assert_eq!(err.lines().count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy().emit().unwrap()).unwrap();
    v["train"]["surprise"] = serde_json::json!(1);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = bin(&["train", "--config", p(&cfg), "--out-dir", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[E_CONFIG]: "), "{err}");
    assert!(err.contains("surprise"), "{err}");

    let o = bin(&[
        "ablate",
        "--config",
        p(&cfg),
        "--variants",
        "stack,hover",
        "--out",
        "x.json",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_writes_one_record_per_line() {
    let o = bin(&[
        "gen-data", "--seed", "5", "--count", "3", "--level", "low", "--out", "-",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in [
            "seed",
            "level",
            "frames",
            "geometry_frames",
            "question_ids",
            "answer_ids",
            "scene_seed",
            "objects",
            "markers",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["seed"], 5 + i as u64);
        assert_eq!(v["level"], "low");
        assert_eq!(v["frames"].as_array().unwrap().len(), 2);
    }
    let again = bin(&[
        "gen-data", "--seed", "5", "--count", "3", "--level", "low", "--out", "-",
    ]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn default_config_round_trips() {
    let o = bin(&["default-config"]);
    assert!(o.status.success());
    let parsed = RunConfig::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(parsed, RunConfig::toy());
}

#[test]
fn train_eval_and_similarity_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 4);
    let run = dir.path().join("run");
    let o = bin(&[
        "train",
        "--config",
        p(&cfg),
        "--out-dir",
        p(&run),
        "--steps",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = run.join("checkpoint.sstk");
    assert!(run.join("checkpoint_step2.sstk").exists());
    let o = bin(&["train", "--resume", p(&ck), "--out-dir", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, [0, 1, 2, 3]);

    let report = dir.path().join("eval.json");
    let o = bin(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--suite",
        "low",
        "--out",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: EvalReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r.step, 4);

    let maps = dir.path().join("maps");
    let o = bin(&[
        "similarity",
        "--checkpoint",
        p(&ck),
        "--scene-seed",
        "3",
        "--encoder",
        "geo",
        "--roi",
        "1,1,2,2",
        "--out-dir",
        p(&maps),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["geo_d50.pgm", "geo_d75.pgm", "geo_d100.pgm"] {
        let bytes = std::fs::read(maps.join(name)).unwrap();
        assert!(bytes.starts_with(b"P5\n"), "{name}");
    }
}

#[test]
fn ablation_reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for (out, extra) in [(&a, None), (&b, Some("--parallel"))] {
        let mut args = vec![
            "ablate",
            "--config",
            p(&cfg),
            "--variants",
            "base,stack",
            "--out",
            p(out),
        ];
        args.extend(extra);
        let o = bin(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
