use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml")
}

fn fpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpn")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_data_twice_gives_identical_bytes() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let o = fpn(&[
            "gen-data",
            "--seed",
            "7",
            "--train-images",
            "5",
            "--eval-images",
            "2",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for split in ["train", "eval"] {
        for f in ["images.bin", "annotations.txt"] {
            assert_eq!(fs::read(a.join(split).join(f)).unwrap(), fs::read(b.join(split).join(f)).unwrap());
        }
    }
}

#[test]
fn validation_errors_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    let bad = t.path().join("bad.toml");
    fs::write(&bad, "[fpn]\nd = 0\n").unwrap();
    let unknown = t.path().join("unknown.toml");
    fs::write(&unknown, "[fpn]\nwidth = 3\n").unwrap();
    let out = t.path().join("o");
    let out = out.to_str().unwrap();
    for args in [
        vec!["--config", bad.to_str().unwrap(), "gen-data", "--out", out],
        vec!["--config", unknown.to_str().unwrap(), "gen-data", "--out", out],
        vec!["--variant", "sideways", "gen-data", "--out", out],
        vec!["--seed", "x", "gen-data"],
        vec!["eval", "--checkpoint", "c.bin"],
        vec!["no-such-command"],
    ] {
        let o = fpn(&args);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn runtime_failures_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("missing.bin");
    let o = fpn(&["eval", "--task", "proposals", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = fpn(&[
        "train-rpn",
        "--data",
        t.path().to_str().unwrap(),
        "--out",
        t.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn help_exits_with_zero() {
    let o = fpn(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["gen-data", "train-rpn", "train-det", "train-mask", "eval", "ablate", "grad-check"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}

#[test]
fn train_then_evaluate_each_task() {
    let t = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let cfg = cfg.to_str().unwrap();
    let dir = |n: &str| t.path().join(n).to_str().unwrap().to_string();
    let run = |args: &[&str]| {
        let o = fpn(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["--config", cfg, "--out", &dir("data"), "gen-data"]);
    let data = dir("data");
    run(&["--config", cfg, "--out", &dir("rpn"), "train-rpn", "--data", &data]);
    let rpn_ck = format!("{}/checkpoint.bin", dir("rpn"));
    run(&[
        "--config",
        cfg,
        "--out",
        &dir("det"),
        "train-det",
        "--rpn",
        &rpn_ck,
        "--data",
        &data,
    ]);
    run(&[
        "--config",
        cfg,
        "--out",
        &dir("mask"),
        "--variant",
        "nolateral",
        "train-mask",
        "--data",
        &data,
    ]);
    for (task, run_dir, key) in [
        ("proposals", "rpn", "ar_100"),
        ("detection", "det", "ap50"),
        ("masks", "mask", "segment_ar_100"),
    ] {
        let ck = format!("{}/checkpoint.bin", dir(run_dir));
        let out = dir(&format!("eval_{task}"));
        let o = run(&["--out", &out, "eval", "--task", task, "--checkpoint", &ck, "--data", &data]);
        assert!(stdout(&o).contains(key), "{task}");
        let report = fs::read_to_string(Path::new(&out).join("metrics.txt")).unwrap();
        assert!(report.starts_with(&format!("task = {task}\nimages = 3\n")), "{report}");
    }
    // a proposal checkpoint evaluated as a detector is a validation error
    let o = fpn(&[
        "--out",
        &dir("x"),
        "eval",
        "--task",
        "detection",
        "--checkpoint",
        &rpn_ck,
        "--data",
        &data,
    ]);
    assert_eq!(code(&o), 1);
    // train-det refuses a non-proposal checkpoint too
    let mask_ck = format!("{}/checkpoint.bin", dir("mask"));
    let o = fpn(&["--config", cfg, "--out", &dir("y"), "train-det", "--rpn", &mask_ck, "--data", &data]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ablate_writes_six_reports() {
    let t = tempfile::tempdir().unwrap();
    let o = fpn(&["--config", tiny().to_str().unwrap(), "--out", t.path().to_str().unwrap(), "ablate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut reports: Vec<String> = fs::read_dir(t.path())
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            p.join("metrics.txt")
                .exists()
                .then(|| p.file_name().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    reports.sort();
    assert_eq!(
        reports,
        [
            "a_baseline_c4",
            "b_baseline_c5",
            "c_fpn",
            "d_bottom_up_only",
            "e_top_down_no_lateral",
            "f_finest_only"
        ]
    );
    assert_eq!(stdout(&o).lines().count(), 7);
    assert!(t.path().join("table.txt").exists());
}

#[test]
fn grad_check_passes_and_reports_its_worst_error() {
    let o = fpn(&["grad-check"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    let worst: f64 = last.strip_prefix("max relative error = ").unwrap().parse().unwrap();
    assert!(worst < 1e-4, "{worst}");
    assert!(!text.contains("FAIL"));
}
