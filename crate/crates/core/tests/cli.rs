use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qkd_core::experiment::read_csv;

fn qkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkd")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn zero_duration_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "duration = 0\n");
    let csv = path(dir.path(), "out.csv");
    let out = qkd(&["run", "--config", &cfg, "--csv", &csv]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("block_index,"));
}

#[test]
fn full_attack_exits_insecure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "duration = 10\nintercept_fraction = 1\n");
    let csv = path(dir.path(), "out.csv");
    let keys = path(dir.path(), "keys");
    let out = qkd(&["run", "--config", &cfg, "--csv", &csv, "--keys", &keys]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((rows[0].s_value - std::f64::consts::SQRT_2).abs() < 0.1, "{}", rows[0].s_value);
    assert_eq!(rows[0].final_bits, 0);
    assert!(!Path::new(&keys).join("alice.key").exists());
}

#[test]
fn invalid_config_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "pair_rate = -5\n");
    let out = qkd(&["run", "--config", &cfg]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pair_rate"));
}

#[test]
fn replay_matches_live_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "duration = 12\nrng_seed = 8\n");
    let rec = path(dir.path(), "tags");
    let (live_csv, replay_csv) = (path(dir.path(), "live.csv"), path(dir.path(), "replay.csv"));
    let (live_keys, replay_keys) = (path(dir.path(), "live"), path(dir.path(), "replay"));
    let out = qkd(&["run", "--config", &cfg, "--csv", &live_csv, "--keys", &live_keys, "--record", &rec]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let alice = path(Path::new(&rec), "alice.qkdt");
    let bob = path(Path::new(&rec), "bob.qkdt");
    let out = qkd(&[
        "replay", "--alice", &alice, "--bob", &bob, "--config", &cfg, "--csv", &replay_csv, "--keys", &replay_keys,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&live_csv).unwrap(), fs::read(&replay_csv).unwrap());
    for name in ["alice.key", "bob.key"] {
        let live = fs::read(Path::new(&live_keys).join(name)).unwrap();
        assert!(!live.is_empty());
        assert_eq!(live, fs::read(Path::new(&replay_keys).join(name)).unwrap());
    }
    assert_eq!(
        fs::read(Path::new(&live_keys).join("alice.key")).unwrap(),
        fs::read(Path::new(&live_keys).join("bob.key")).unwrap()
    );
}

#[test]
fn truncated_tag_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "duration = 2\n");
    let rec = path(dir.path(), "tags");
    assert_eq!(code(&qkd(&["run", "--config", &cfg, "--record", &rec])), 0);
    let bob = Path::new(&rec).join("bob.qkdt");
    let bytes = fs::read(&bob).unwrap();
    fs::write(&bob, &bytes[..bytes.len() - 4]).unwrap();
    let alice = path(Path::new(&rec), "alice.qkdt");
    let out = qkd(&["replay", "--alice", &alice, "--bob", bob.to_str().unwrap(), "--config", &cfg]);
    assert_eq!(code(&out), 5);
}

#[test]
fn swapped_tag_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "duration = 1\n");
    let rec = path(dir.path(), "tags");
    assert_eq!(code(&qkd(&["run", "--config", &cfg, "--record", &rec])), 0);
    let alice = path(Path::new(&rec), "alice.qkdt");
    let bob = path(Path::new(&rec), "bob.qkdt");
    assert_eq!(code(&qkd(&["replay", "--alice", &bob, "--bob", &alice, "--config", &cfg])), 5);
}

#[test]
fn unrelated_streams_report_no_peak() {
    let dir = tempfile::tempdir().unwrap();
    let rec_a = path(dir.path(), "a");
    let rec_b = path(dir.path(), "b");
    let cfg_a = write_config(dir.path(), "duration = 2\nrng_seed = 1\n");
    assert_eq!(code(&qkd(&["run", "--config", &cfg_a, "--record", &rec_a])), 0);
    // Bob's stream from an unrelated source far outside the search span.
    let cfg_b = write_config(dir.path(), "duration = 2\nrng_seed = 2\nbob_delay = 5e7\n");
    assert_eq!(code(&qkd(&["run", "--config", &cfg_b, "--record", &rec_b])), 6);
    let alice = path(Path::new(&rec_a), "alice.qkdt");
    let bob = path(Path::new(&rec_b), "bob.qkdt");
    let out = qkd(&["replay", "--alice", &alice, "--bob", &bob, "--config", &cfg_a]);
    assert_eq!(code(&out), 6, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn keyrate_reports_final_length() {
    let out = qkd(&["keyrate", "--s", "2.5", "--qber", "0.0", "--n", "10000", "--tag-bits", "2000"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("final_length: 2564"), "{text}");
    assert_eq!(code(&qkd(&["keyrate", "--s", "1.9", "--qber", "0.02", "--n", "10000"])), 2);
    assert_eq!(code(&qkd(&["keyrate", "--s", "2.5", "--qber", "1.5", "--n", "10000"])), 5);
}
