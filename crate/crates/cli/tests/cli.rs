use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: [&str; 8] = [
    "--set",
    "scene.height=64",
    "--set",
    "scene.width=64",
    "--set",
    "scene.object_size=12",
    "--frames",
    "24",
];

fn amde(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amde")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn with_small<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    args.extend_from_slice(&SMALL);
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn sync_output_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    for dir in ["a", "b"] {
        let o = amde(&with_small(vec!["run-sync", "--n", "5", "--out", dir]), tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["run_log.csv", "lag_profile.csv"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let profile = fs::read_to_string(tmp.path().join("a/lag_profile.csv")).unwrap();
    assert!(profile.starts_with("lag,count,absrel,rmse,delta1,mean_t,fastpath_pct\n"));
    assert!(profile.lines().last().unwrap().starts_with("cycle_avg,24,"));
}

#[test]
fn virtual_async_output_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let mut outs = Vec::new();
    for dir in ["a", "b"] {
        let o = amde(&with_small(vec!["run-async", "--virtual-clock", "--out", dir]), tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("adoptions"));
        outs.push(stdout(&o).lines().filter(|l| !l.starts_with("wrote ")).collect::<Vec<_>>().join("\n"));
    }
    assert_eq!(outs[0], outs[1]);
    for f in ["run_log.csv", "lag_profile.csv", "publishes.csv"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn generated_sequence_replays() {
    let tmp = TempDir::new().unwrap();
    let o = amde(&with_small(vec!["generate", "--out", "world", "--seed", "4"]), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("world/manifest.txt").exists());
    let o = amde(&["run-sync", "--set", "run.input=world", "--n", "6", "--out", "replay"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(tmp.path().join("replay/run_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 25);
}

#[test]
fn config_file_sections_and_precedence() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("c.toml"),
        "[scene]\nheight = 64\nwidth = 64\nobject_size = 12\n\n[run]\nframes = 12\nn = 3\n",
    )
    .unwrap();
    let o = amde(&["run-sync", "--config", "c.toml", "--set", "run.n=4", "--out", "o"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("run-sync: 12 frames, N = 4, 3 refreshes"));
    let o = amde(&["run-sync", "--config", "c.toml", "--set", "run.n=4", "--n", "6", "--out", "o"], tmp.path());
    assert!(stdout(&o).starts_with("run-sync: 12 frames, N = 6, 2 refreshes"));
}

#[test]
fn config_errors_exit_one_without_side_effects() {
    let tmp = TempDir::new().unwrap();
    let cases: [&[&str]; 6] = [
        &["run-sync", "--set", "scene.colour=2", "--out", "o"],
        &["run-sync", "--set", "scene.height=100", "--out", "o"],
        &["run-sync", "--mode", "async", "--out", "o"],
        &["sweep-lag", "--n", "0", "--out", "o"],
        &["generate", "--set", "run.frames=0", "--out", "o"],
        &["run-sync", "--bogus-flag"],
    ];
    for args in cases {
        let o = amde(args, tmp.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert!(!tmp.path().join("o").exists(), "{args:?} wrote output");
    }
    fs::write(tmp.path().join("bad.toml"), "[scene]\nshade = 1\n").unwrap();
    let o = amde(&["run-sync", "--config", "bad.toml", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("valid keys: scene.height"));
}

#[test]
fn io_errors_exit_three() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("blocker"), "").unwrap();
    let o = amde(&with_small(vec!["run-sync", "--out", "blocker/sub"]), tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = amde(&["run-sync", "--config", "missing.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = amde(&["run-sync", "--set", "run.input=nowhere"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn sweep_with_unit_interval_has_only_lag_zero() {
    let tmp = TempDir::new().unwrap();
    let args = with_small(vec!["sweep-lag", "--n", "1", "--set", "sweep.seeds=2", "--out", "s"]);
    let o = amde(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["lag_seed_0000.csv", "lag_seed_0001.csv", "lag_mean.csv", "encoder_only.csv"] {
        let rows = csv_rows(&tmp.path().join("s").join(f));
        assert_eq!(rows.len(), 2, "{f}");
        assert_eq!(rows[0][0], "0");
        assert_eq!(rows[1][0], "cycle_avg");
        assert_eq!(rows[0][2], rows[1][2]);
    }
}

#[test]
fn static_sweep_is_flat() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "sweep-lag", "--n", "20", "--frames", "40", "--set", "sweep.seeds=2", "--set", "scene.height=64", "--set",
        "scene.width=64", "--set", "scene.drift_x=0", "--set", "scene.objects=0", "--set", "scene.sigma_b=0", "--set",
        "scene.sigma_s=0", "--out", "s",
    ];
    let o = amde(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&tmp.path().join("s/lag_mean.csv"));
    assert_eq!(rows.len(), 21);
    assert!(rows.iter().all(|r| r[2] == rows[0][2]));
    assert!(stdout(&o).contains("adjacent-lag rank violations 0"));
}

#[test]
fn bench_cache_reports() {
    let tmp = TempDir::new().unwrap();
    let o = amde(&["bench-cache", "--set", "bench.iterations=300", "--set", "bench.publishes=0"], tmp.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("reads = 300\n") && text.contains("empty_reads = 300\n"));
    let o = amde(
        &["bench-cache", "--set", "bench.mode=single", "--set", "bench.iterations=2000", "--out", "b"],
        tmp.path(),
    );
    assert!(o.status.success());
    let report = fs::read_to_string(tmp.path().join("b/bench_cache.txt")).unwrap();
    assert!(report.contains("torn_reads = 0\n") && report.contains("mode = single\n"));
}

#[test]
fn help_documents_every_key() {
    let o = amde(&["--help"], Path::new("."));
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["scene.drift_x", "run.clock", "sweep.seeds", "bench.mode", "modulator.trust_override"] {
        assert!(text.contains(key), "{key}");
    }
}
