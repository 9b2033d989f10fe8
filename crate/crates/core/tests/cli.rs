use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn arz(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arz"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn steady_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = arz(&["steady", "--out", "s"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("boundary dissipativity: PASS"), "{text}");
    assert!(dir.path().join("s/steady.txt").exists());
}

#[test]
fn infeasible_flow_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[network]\nq_star = \"7.6 veh/s\"\n").unwrap();
    let o = arz(&["steady", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("segment 1"), "{err}");
}

#[test]
fn bad_flag_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = arz(&["simulate", "--loop", "sideways"], dir.path());
    assert!(!o.status.success());
    let o = arz(&["simulate", "--resolution", "8", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn kernels_command_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = arz(&["kernels", "--resolution", "32", "--out", "k"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["kernels_seg1.csv", "kernels_seg2.csv", "kernels_report.txt"] {
        assert!(dir.path().join("k").join(f).exists(), "{f}");
    }
    let first = fs::read(dir.path().join("k/kernels_seg1.csv")).unwrap();
    assert!(arz(&["kernels", "--resolution", "32", "--out", "k"], dir.path()).status.success());
    assert_eq!(first, fs::read(dir.path().join("k/kernels_seg1.csv")).unwrap());
}

#[test]
fn simulate_open_and_closed() {
    let dir = tempfile::tempdir().unwrap();
    let summary = |loop_mode: &str| {
        let out = format!("sim_{loop_mode}");
        let o = arz(
            &["simulate", "--resolution", "64", "--loop", loop_mode, "--out", &out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("wall time"));
        fs::read_to_string(dir.path().join(out).join("summary.txt")).unwrap()
    };
    assert!(summary("closed").contains("converged = true"));
    assert!(summary("open").contains("converged = false"));
}
