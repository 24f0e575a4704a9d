//! Runs the `lshg` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lshg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lshg"))
        .args(args)
        .env("LSHG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
num_stacks = 2
variant = dw1
hg_depth = 1
stem_channels = 4,8
hg_channels = 8
input_res = 32
heatmap_res = 8
batch_size = 4
lr = 1e-3
";

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn all_table1_prints_ten_rows_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = lshg(&["count-params", "--all-table1", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("reconciliation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    let order = ["baseline8", "hg1", "hg2", "dw1_1", "dw3_1", "ghost_1", "ghost_reduced_1", "multidilated_1", "dw1_2", "multidilated_2"];
    for (row, name) in rows.iter().zip(order) {
        assert!(row.starts_with(name), "{row}");
    }
    assert!(dir.path().join("reconciliation.txt").exists());
    assert!(stdout(&o).contains("baseline8"));
}

#[test]
fn single_config_audit() {
    let o = lshg(&["count-params", "--config", "ghost_reduced_1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("audit: ok"));
}

#[test]
fn unknown_variant_names_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "variant = resnet\n").unwrap();
    for o in [
        lshg(&["count-params", "--config", path(&cfg)]),
        lshg(&["gradcheck", "--variant", "resnet"]),
    ] {
        assert_eq!(o.status.code(), Some(1));
        let err = stderr(&o);
        for v in ["original", "dw1", "dw3", "ghost", "ghost_reduced", "multidilated"] {
            assert!(err.contains(v), "{err}");
        }
    }
}

#[test]
fn unknown_key_and_bad_usage_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "widht = 3\n").unwrap();
    let o = lshg(&["count-params", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hg_channels"));
    assert_eq!(lshg(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_is_repeatable_and_catches_a_fault() {
    let a = lshg(&["gradcheck", "--variant", "dw1", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}{}", stdout(&a), stderr(&a));
    assert!(!stdout(&a).contains("FAIL"));
    let b = lshg(&["gradcheck", "--variant", "dw1", "--seed", "3"]);
    assert_eq!(stdout(&a), stdout(&b));

    let bad = lshg(&["gradcheck", "--variant", "dw1", "--seed", "3", "--inject-fault", "conv2d"]);
    assert_eq!(bad.status.code(), Some(2));
    let err = stderr(&bad);
    assert!(err.contains("gradient check failed in"), "{err}");
    assert!(err.contains("conv2d"), "{err}");
}

#[test]
fn synth_train_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();

    let o = lshg(&["synth", "--n", "8", "--seed", "7", "--out", path(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(data.join("annotations.jsonl")).unwrap().lines().count(), 8);
    assert!(data.join("img_0007.png").exists());

    let o = lshg(&["train", "--config", path(&cfg), "--data", path(&data), "--epochs", "2", "--out", path(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("final.lshg").exists() && run.join("best.lshg").exists());
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");

    let eval_dir = dir.path().join("eval");
    let o = lshg(&[
        "eval",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--checkpoint",
        path(&run.join("final.lshg")),
        "--out",
        path(&eval_dir),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::read_to_string(eval_dir.join("pckh.csv")).unwrap().starts_with("Head,"));

    // default 64×64 heatmaps; an 8×8 grid is too coarse to land within half a head
    let o = lshg(&["eval", "--data", path(&data), "--from-targets"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let row = out.lines().nth(1).unwrap();
    assert!(row.ends_with(",100.00"), "{out}");

    let o = lshg(&["train", "--config", path(&cfg), "--data", path(&dir.path().join("missing")), "--out", path(&run)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(lshg(&["synth", "--n", "2", "--out", path(&data)]).status.code(), Some(0));
    let o = lshg(&["eval", "--data", path(&data), "--checkpoint", path(&dir.path().join("nope.lshg"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bench_lightweight_row_has_fewer_macs() {
    let o = lshg(&["bench", "--config", "dw1_1stack", "--also", "original_1stack", "--iterations", "3", "--warmup", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let macs = |name: &str| -> u64 {
        out.lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(2))
            .and_then(|m| m.parse().ok())
            .unwrap_or_else(|| panic!("no row for {name} in\n{out}"))
    };
    assert!(macs("dw1_1stack") < macs("original_1stack"));
}
