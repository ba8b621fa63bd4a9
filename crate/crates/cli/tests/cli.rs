use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dumeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dumeta")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "out = \"{out}\"\n\
         [data]\nroot = \"{data}\"\nper_domain = 3\nsupport = 2\ntest = 2\n\
         [network]\ndepth = 2\nbase_channels = 2\n\
         [train]\niterations = 3\ncheckpoint_every = 2\n\
         [test]\nshots = [0, 1]\nsteps = 2\n{extra}",
        out = dir.join("run").display(),
        data = dir.join("data").display(),
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn hash_line(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

#[test]
fn gen_data_is_idempotent_and_creates_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let nested = dir.path().join("a/b/data");
    let first = dumeta(&["gen-data", "--config", &cfg, "--out", nested.to_str().unwrap()]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert!(nested.join("dataset.manifest").is_file());
    let second = dumeta(&["gen-data", "--config", &cfg, "--out", nested.to_str().unwrap()]);
    assert_eq!(hash_line(&first), hash_line(&second));
    let other = dumeta(&["gen-data", "--config", &cfg, "--seed", "1", "--out", nested.to_str().unwrap()]);
    assert_ne!(hash_line(&first).split("sha256").last(), hash_line(&other).split("sha256").last());
}

#[test]
fn train_then_test_and_reproduce_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    assert_eq!(code(&dumeta(&["gen-data", "--config", &cfg])), 0);
    let train = dumeta(&["meta-train", "--config", &cfg]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let run = dir.path().join("run");
    assert!(run.join("checkpoint/params.manifest").is_file());
    let metrics = fs::read(run.join("metrics.csv")).unwrap();

    let snapshot = dir.path().join("snapshot.toml");
    fs::copy(run.join("config.toml"), &snapshot).unwrap();
    let again = dumeta(&["meta-train", "--config", snapshot.to_str().unwrap()]);
    assert_eq!(code(&again), 0);
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), metrics);
    assert_eq!(hash_line(&train), hash_line(&again));

    let test = dumeta(&["meta-test", "--config", &cfg]);
    assert_eq!(code(&test), 0, "{}", String::from_utf8_lossy(&test.stderr));
    let csv = fs::read_to_string(run.join("meta_test.csv")).unwrap();
    assert!(csv.starts_with("run_id,domain,shots,class,dice,asd\n"));
    let one = dumeta(&["meta-test", "--config", &cfg, "--shots", "1"]);
    assert_eq!(code(&one), 0);
}

#[test]
fn ablation_flags_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "[ablate]\ncapacity = [1, 10]\n");
    assert_eq!(code(&dumeta(&["gen-data", "--config", &cfg])), 0);
    for flags in [&["--mfl-only"][..], &["--no-reg"], &["--capacity", "5"]] {
        let mut args = vec!["meta-train", "--config", &cfg];
        args.extend_from_slice(flags);
        let o = dumeta(&args);
        assert_eq!(code(&o), 0, "{flags:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = dumeta(&["ablate", "--config", &cfg, "--axis", "capacity", "--shots", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("run/ablate_capacity.csv")).unwrap();
    assert!(csv.contains("capacity=1,") && csv.contains("capacity=10,"));
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    // no dataset yet
    assert_eq!(code(&dumeta(&["meta-train", "--config", &cfg])), 2);
    assert_eq!(code(&dumeta(&["meta-train", "--config", &cfg, "--capacity", "0"])), 2);
    assert_eq!(code(&dumeta(&["meta-test", "--config", &cfg, "--shots", "9"])), 2);
    assert_eq!(code(&dumeta(&["ablate", "--config", &cfg, "--axis", "depth"])), 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[reg]\nmargin = \"wide\"\n").unwrap();
    assert_eq!(code(&dumeta(&["gen-data", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn divergence_exits_with_3_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("iterations = 3", "iterations = 20\nalpha = 1e9\nbeta = 1e9");
    fs::write(&cfg, text).unwrap();
    assert_eq!(code(&dumeta(&["gen-data", "--config", &cfg])), 0);
    let o = dumeta(&["meta-train", "--config", &cfg]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("run/checkpoint/params.manifest").is_file());
}

#[test]
fn convlab_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "[convlab]\nrepeats = 4\nhorizons = [100, 1000, 10000]\n");
    let o = dumeta(&["convlab", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = fs::read_to_string(dir.path().join("run/convlab_report.txt")).unwrap();
    assert!(report.contains("overall: PASS"));
    let trace = fs::read_to_string(dir.path().join("run/convlab_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 101);
}
