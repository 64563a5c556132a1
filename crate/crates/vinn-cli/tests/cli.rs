//! End-to-end subcommand tests on a miniature world: every subcommand runs
//! against real files in a temp directory, and the main error paths exit
//! non-zero with a message on stderr.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn vinn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vinn"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn vinn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn vinn");
    assert!(
        !out.status.success(),
        "expected failure, got success\nstdout: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Generate a small three-phantom dataset and return its directory.
fn tiny_dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    run_ok(vinn().args([
        "phantom-gen",
        "--out-dir",
        data.to_str().unwrap(),
        "--count",
        "3",
        "--voxel-mm",
        "1.0",
        "--fov-mm",
        "28",
        "--val",
        "1",
        "--seed",
        "41",
    ]));
    data
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        "version = 1\n\n[net]\nfilters = 4\n\n[train]\nepochs = 1\nbatch = 8\nseed = 5\n",
    )
    .unwrap();
}

#[test]
fn full_pipeline_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path());
    let manifest = data.join("manifest.json");
    assert!(manifest.is_file());

    let cfg = tmp.path().join("cfg.toml");
    write_tiny_config(&cfg);
    let run = tmp.path().join("run");
    for plane in ["axial", "coronal", "sagittal"] {
        let out = run_ok(vinn().args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--plane",
            plane,
            "--out-dir",
            run.to_str().unwrap(),
        ]));
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        assert!(text.contains("epoch   0"), "no epoch log for {plane}: {text}");
        assert!(run.join(format!("model-{plane}.ckpt")).is_file());
        let csv = std::fs::read_to_string(run.join(format!("train-{plane}.csv"))).unwrap();
        assert!(csv.starts_with("epoch,lr,mean_loss,val_dsc\n"));
        assert_eq!(csv.lines().count(), 2, "one epoch line: {csv}");
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run.join(format!("train-{plane}.json"))).unwrap())
                .unwrap();
        assert_eq!(summary["plane"], plane);
        assert_eq!(summary["epochs_run"], 1);
        assert!(summary["diverged"].is_null());
    }

    let pred = tmp.path().join("pred");
    run_ok(vinn().args([
        "infer",
        "--checkpoint",
        run.join("model-axial.ckpt").to_str().unwrap(),
        run.join("model-coronal.ckpt").to_str().unwrap(),
        run.join("model-sagittal.ckpt").to_str().unwrap(),
        "--volume",
        data.join("p002.img.vvol").to_str().unwrap(),
        "--out",
        pred.join("p002.seg.vvol").to_str().unwrap(),
    ]));
    assert!(pred.join("p002.seg.vvol").is_file());

    let eval_csv = tmp.path().join("eval.csv");
    run_ok(vinn().args([
        "evaluate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--pred-dir",
        pred.to_str().unwrap(),
        "--model",
        "tiny",
        "--split",
        "val",
        "--out",
        eval_csv.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&eval_csv).unwrap();
    assert!(text.starts_with("subject,model,structure,dsc,asd,flags\n"));
    // 8 foreground structures for the one validation subject.
    assert_eq!(text.lines().count(), 9, "{text}");
    for line in text.lines().skip(1) {
        assert_eq!(line.split(',').count(), 6, "{line}");
        assert!(line.starts_with("p002,tiny,"), "{line}");
    }
}

#[test]
fn stats_compares_two_result_files() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    let header = "subject,model,structure,dsc,asd,flags\n";
    let mut ta = header.to_string();
    let mut tb = header.to_string();
    for s in 0..6 {
        // Model A consistently better on structure 1, tied on structure 2.
        ta.push_str(&format!("s{s},a,1,{},1.0,\n", 90.0 + s as f64));
        tb.push_str(&format!("s{s},b,1,{},1.2,\n", 85.0 + s as f64));
        ta.push_str(&format!("s{s},a,2,80.0,1.0,\n"));
        tb.push_str(&format!("s{s},b,2,80.0,1.0,\n"));
    }
    std::fs::write(&a, ta).unwrap();
    std::fs::write(&b, tb).unwrap();

    let out = run_ok(vinn().args([
        "stats",
        "--first",
        a.to_str().unwrap(),
        "--second",
        b.to_str().unwrap(),
        "--metric",
        "dsc",
    ]));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "structure,W,p_raw,p_bh");
    assert_eq!(lines.len(), 3, "{text}");
    // All six differences positive: W = 21, exact one-sided-pair p = 2/64.
    assert!(lines[1].starts_with("1,21,0.03125,"), "{text}");

    let err = run_err(vinn().args([
        "stats",
        "--first",
        a.to_str().unwrap(),
        "--second",
        b.to_str().unwrap(),
        "--metric",
        "median",
    ]));
    assert!(err.contains("unknown metric"), "{err}");
}

#[test]
fn gradcheck_passes_and_prints_per_op_lines() {
    let out = run_ok(vinn().args([
        "gradcheck",
        "--instances",
        "3",
        "--grad-cases",
        "2",
    ]));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("forward oracles"), "{text}");
    assert!(text.contains("finite-difference gradients"), "{text}");
    assert!(text.contains("conv2d"), "{text}");
    assert!(text.trim_end().ends_with("all checks passed"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn masks_writes_five_pgm_maps() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path());
    let out_dir = tmp.path().join("maps");
    run_ok(vinn().args([
        "masks",
        "--labels",
        data.join("p000.lab.vvol").to_str().unwrap(),
        "--plane",
        "coronal",
        "--w-hires",
        "2.0",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]));
    for name in ["median_freq", "gradient", "outer_gm", "wm_sulci", "total"] {
        let bytes = std::fs::read(out_dir.join(format!("{name}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n28 28\n255\n"), "{name} header");
        assert_eq!(bytes.len(), "P5\n28 28\n255\n".len() + 28 * 28, "{name} size");
    }
}

#[test]
fn error_paths_exit_nonzero_with_messages() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path());
    let manifest = data.join("manifest.json");

    // Split arithmetic that does not add up.
    let err = run_err(vinn().args([
        "phantom-gen",
        "--out-dir",
        tmp.path().join("x").to_str().unwrap(),
        "--count",
        "2",
        "--val",
        "2",
        "--test",
        "1",
    ]));
    assert!(err.contains("exceed count"), "{err}");

    // Config version from a different build.
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "version = 99\n").unwrap();
    let err = run_err(vinn().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--plane",
        "axial",
        "--out-dir",
        tmp.path().join("run").to_str().unwrap(),
    ]));
    assert!(err.contains("version"), "{err}");

    // Unknown config keys are rejected, not ignored.
    std::fs::write(&cfg, "version = 1\n\n[train]\nlearning_rate = 0.1\n").unwrap();
    let err = run_err(vinn().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--plane",
        "axial",
        "--out-dir",
        tmp.path().join("run").to_str().unwrap(),
    ]));
    assert!(err.contains("unknown field"), "{err}");

    // Inference requires one checkpoint per plane.
    let cfg_ok = tmp.path().join("ok.toml");
    write_tiny_config(&cfg_ok);
    let run = tmp.path().join("one-plane");
    run_ok(vinn().args([
        "train",
        "--config",
        cfg_ok.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--plane",
        "axial",
        "--out-dir",
        run.to_str().unwrap(),
    ]));
    let err = run_err(vinn().args([
        "infer",
        "--checkpoint",
        run.join("model-axial.ckpt").to_str().unwrap(),
        "--volume",
        data.join("p000.img.vvol").to_str().unwrap(),
        "--out",
        tmp.path().join("seg.vvol").to_str().unwrap(),
    ]));
    assert!(err.contains("one checkpoint per plane"), "{err}");

    // Model labels that would corrupt the CSV.
    let err = run_err(vinn().args([
        "evaluate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--pred-dir",
        data.to_str().unwrap(),
        "--model",
        "a,b",
    ]));
    assert!(err.contains("model label"), "{err}");

    // Worker count sanity from the environment.
    let err = run_err(
        vinn()
            .env("VINN_THREADS", "zero")
            .args(["gradcheck", "--instances", "1", "--grad-cases", "1"]),
    );
    assert!(err.contains("VINN_THREADS"), "{err}");
}
