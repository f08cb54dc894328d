use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ida(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ida")).args(args).output().unwrap()
}

fn small(out: &Path) -> Vec<String> {
    [
        "--task",
        "grasp-cube",
        "--seeds",
        "0,1",
        "--budget",
        "6",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "grid=32",
        "--set",
        "schedule=2,6",
        "--set",
        "batch=4",
        "--set",
        "update_steps=1",
        "--set",
        "warmup=2",
        "--set",
        "eval_episodes=3",
        "--set",
        "bootstrap_reps=200",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn with<'a>(sub: &'a str, extra: &'a [String], more: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![sub];
    v.extend(extra.iter().map(String::as_str));
    v.extend_from_slice(more);
    v
}

fn success_rates(csv: &Path) -> Vec<String> {
    fs::read_to_string(csv)
        .unwrap()
        .lines()
        .map(|l| l.split(',').take(5).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn oracle_check_exits_zero_and_is_seeded() {
    let a = ida(&["oracle-check", "--seed", "5"]);
    assert!(a.status.success());
    let b = ida(&["oracle-check", "--seed", "5"]);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).contains("1000 instances"));
}

#[test]
fn grad_check_exits_zero() {
    let out = ida(&["grad-check", "--seed", "1", "--instances", "2", "--coords", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn run_writes_csv_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let args = small(dir.path());
    let out = ida(&with("run", &args, &["--method", "greedy,random"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,task,seed,checkpoint,success_rate,wall_time_seconds");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    assert!(lines[1].starts_with("greedy,grasp-cube,0,2,"));
    assert!(dir.path().join("checkpoints/random-grasp-cube-seed1.ckpt").exists());

    let maps = ida(&with("dump-maps", &args, &["--method", "random", "--set", "seeds=1"]));
    assert!(maps.status.success(), "{}", String::from_utf8_lossy(&maps.stderr));
    let scene = dir.path().join("maps/random-grasp-cube-seed1/scene.pgm");
    assert!(fs::read_to_string(scene).unwrap().starts_with("P2\n32 32\n255\n"));
}

#[test]
fn bench_is_deterministic_and_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let args = small(&dir.path().join(name));
        let out = ida(&with("bench", &args, &["--method", "ida,jsd"]));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.lines().any(|l| l.starts_with("ida 6 2 ")), "{text}");
        runs.push(success_rates(&dir.path().join(name).join("results.csv")));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "method = random\nseeds = 0..4\nbudget = 1000\n").unwrap();
    let args = small(&dir.path().join("out"));
    let mut argv = with("run", &args, &["--config"]);
    let cfg_str = cfg.to_str().unwrap();
    argv.push(cfg_str);
    let out = ida(&argv);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    // file picks the method, flags pick seeds and budget
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("random,")));
}

#[test]
fn bad_input_exits_nonzero() {
    assert_eq!(ida(&["run", "--method", "nope"]).status.code(), Some(2));
    assert_eq!(ida(&["run", "--seeds", "1,1"]).status.code(), Some(2));
    assert_eq!(ida(&["run", "--set", "grid"]).status.code(), Some(2));
    assert!(!ida(&["frobnicate"]).status.success());

    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let target = blocker.join("x");
    let out = ida(&["run", "--out", target.to_str().unwrap(), "--set", "grid=32"]);
    assert_eq!(out.status.code(), Some(2));
}
