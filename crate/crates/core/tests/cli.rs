use std::fs;
use std::path::Path;

use adamorph::cli::{run, EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use adamorph::synth::io::read_windows;
use adamorph::synth::{read_dataset, read_manifest, StyleFamily};

const CONFIG: &str = r#"{
  "seed": 3,
  "data": {"families": 2, "robots_per_family": 2, "train_windows": 12, "val_windows": 2,
           "test_windows": 6, "zero_shot_windows": 6, "sequence_seconds": 2.0},
  "train": {"total_steps": 10, "checkpoint_interval": 5}
}"#;

fn cmd(args: &[&str]) -> i32 {
    run(std::iter::once("adamorph").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let (data, data2) = (root.join("data"), root.join("data2"));
    assert_eq!(cmd(&["gen-data", "--config", p(&cfg), "--out", p(&data)]), EXIT_OK);
    assert_eq!(cmd(&["gen-data", "--config", p(&cfg), "--out", p(&data2)]), EXIT_OK);
    let (m1, m2) = (read_manifest(&data).unwrap(), read_manifest(&data2).unwrap());
    assert_eq!(m1.splits, m2.splits);
    for entry in m1.splits.values() {
        assert_eq!(read_windows(&data.join(&entry.file)).unwrap().len(), entry.records);
    }
    let ds = read_dataset(&data).unwrap();
    assert!(ds.zero_shot.iter().all(|w| w.style == StyleFamily::Squat));

    let run_dir = root.join("run");
    assert_eq!(cmd(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run_dir)]), EXIT_OK);
    let log = fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    for (s, row) in rows.iter().enumerate() {
        let robot: usize = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(robot, s % 4);
    }

    let resumed = root.join("resumed");
    let ckpt = run_dir.join("step_000005.ckpt");
    assert_eq!(
        cmd(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&resumed), "--resume", p(&ckpt)]),
        EXIT_OK
    );
    assert_eq!(fs::read(run_dir.join("final.ckpt")).unwrap(), fs::read(resumed.join("final.ckpt")).unwrap());
    assert_eq!(log, fs::read_to_string(resumed.join("train_log.csv")).unwrap());

    // Re-running from the echoed configuration reproduces the run.
    let echoed = root.join("echoed");
    let echo_cfg = run_dir.join("run_config.json");
    assert_eq!(cmd(&["train", "--config", p(&echo_cfg), "--out", p(&echoed)]), EXIT_OK);
    assert_eq!(fs::read(run_dir.join("final.ckpt")).unwrap(), fs::read(echoed.join("final.ckpt")).unwrap());

    let final_ckpt = run_dir.join("final.ckpt");
    for (i, split) in ["test", "zero_shot"].iter().enumerate() {
        let out = root.join(format!("eval{i}"));
        let args = ["eval", "--checkpoint", p(&final_ckpt), "--data", p(&data), "--split", split, "--out", p(&out)];
        assert_eq!(cmd(&args), EXIT_OK);
        for f in ["report.json", "pcc_per_window.csv", "prompt_similarity.csv", "prompt_pca.csv", "run_config.json"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let again = root.join(format!("eval{i}b"));
        let args = ["eval", "--checkpoint", p(&final_ckpt), "--data", p(&data), "--split", split, "--out", p(&again)];
        assert_eq!(cmd(&args), EXIT_OK);
        assert_eq!(fs::read(out.join("report.json")).unwrap(), fs::read(again.join("report.json")).unwrap());
        let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["schema"], "adamorph-eval/1");
    }

    let input = data.join("test.admr");
    let out_file = root.join("retargeted").join("robot2.admr");
    let args = ["retarget", "--checkpoint", p(&final_ckpt), "--input", p(&input), "--robot", "2", "--out", p(&out_file)];
    assert_eq!(cmd(&args), EXIT_OK);
    let src = read_windows(&input).unwrap();
    let out = read_windows(&out_file).unwrap();
    assert_eq!(out.len(), src.len());
    for (o, s) in out.iter().zip(&src) {
        assert_eq!((o.robot, o.target.dof), (2, ds.robots[2].dof));
        assert_eq!((o.p[0], o.r[0]), (s.p[0], s.r[0]));
        assert_eq!(o.human, s.human);
    }
    let args = ["retarget", "--checkpoint", p(&final_ckpt), "--input", p(&input), "--robot", "9", "--out", p(&out_file)];
    assert_eq!(cmd(&args), EXIT_DATA);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(cmd(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]), EXIT_DATA);
    assert_eq!(cmd(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cmd(&["check", "--suite", "nonsense"]), EXIT_USAGE);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    assert_eq!(cmd(&["gen-data", "--config", p(&bad), "--out", p(&dir.path().join("d"))]), EXIT_USAGE);
    assert_eq!(cmd(&["train", "--out", p(&dir.path().join("o"))]), EXIT_USAGE);
}

#[test]
fn check_suites_and_fault_injection() {
    assert_eq!(cmd(&["check", "--suite", "geometry"]), EXIT_OK);
    assert_eq!(cmd(&["check", "--suite", "kinematics"]), EXIT_OK);
    assert_eq!(cmd(&["check", "--suite", "kinematics", "--inject-fault", "skip-gram-schmidt"]), EXIT_CHECK);
}
