//! End-to-end tests of the `cystseg` binary: exit codes, run determinism,
//! and the on-disk layout of each subcommand's outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cystseg")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_phantoms(dir: &Path, volumes: usize, seed: u64) -> Vec<PathBuf> {
    run_ok(&[
        "phantom-gen",
        "--out",
        dir.to_str().unwrap(),
        "--volumes",
        &volumes.to_string(),
        "--slices",
        "3",
        "--seed",
        &seed.to_string(),
        "--speckle-sigma",
        "0.2",
    ]);
    (0..volumes)
        .map(|v| dir.join(format!("vol_{v:03}")).join("manifest.txt"))
        .collect()
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries = Vec::new();
    for entry in walk(dir) {
        let rel = entry
            .strip_prefix(dir)
            .unwrap()
            .to_string_lossy()
            .into_owned();
        entries.push((rel, std::fs::read(&entry).unwrap()));
    }
    entries.sort();
    entries
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files
}

#[test]
fn phantom_gen_writes_expected_layout_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("a");
    let d2 = tmp.path().join("b");
    let out = run_ok(&[
        "phantom-gen",
        "--out",
        d1.to_str().unwrap(),
        "--volumes",
        "3",
        "--seed",
        "7",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 3, "one manifest path per volume");
    for v in 0..3 {
        let vol = d1.join(format!("vol_{v:03}"));
        assert!(vol.join("manifest.txt").is_file());
        assert!(vol.join("slice_000.pgm").is_file());
        assert!(vol.join("gt1_000.pgm").is_file());
        assert!(vol.join("gt2_000.pgm").is_file());
        assert!(vol.join("truth_layers.txt").is_file());
        assert!(vol.join("truth_cysts.txt").is_file());
    }

    run_ok(&[
        "phantom-gen",
        "--out",
        d2.to_str().unwrap(),
        "--volumes",
        "3",
        "--seed",
        "7",
    ]);
    assert_eq!(
        dir_snapshot(&d1),
        dir_snapshot(&d2),
        "same seed must give identical trees"
    );
}

#[test]
fn phantom_gen_unwritable_output_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("blocker");
    std::fs::write(&blocker, b"a plain file").unwrap();
    let out = run(&[
        "phantom-gen",
        "--out",
        blocker.join("sub").to_str().unwrap(),
        "--volumes",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty(), "diagnostic expected on stderr");
}

#[test]
fn bad_flags_exit_2() {
    let out = run(&["segment", "--nonsense"]);
    assert_eq!(out.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let manifests = gen_phantoms(&tmp.path().join("d"), 1, 3);
    // Invalid tunable value caught by config validation.
    let out = run(&[
        "preprocess",
        "--manifest",
        manifests[0].to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--tv-lambda",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_manifest_exits_1() {
    let out = run(&[
        "preprocess",
        "--manifest",
        "/nonexistent/m.txt",
        "--out",
        "/tmp/unused_out",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn preprocess_writes_denoised_slices_and_config_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let manifests = gen_phantoms(&tmp.path().join("d"), 1, 11);
    let out_dir = tmp.path().join("pre");
    run_ok(&[
        "preprocess",
        "--manifest",
        manifests[0].to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--dump-saliency",
    ]);
    for i in 0..3 {
        assert!(out_dir.join(format!("denoised_{i:03}.pgm")).is_file());
        assert!(out_dir.join(format!("saliency_{i:03}.pgm")).is_file());
    }
    let dump = std::fs::read_to_string(out_dir.join("cystseg_config.txt")).unwrap();
    assert!(dump.contains("tv_lambda = 8"));
    assert!(dump.contains("seed = 42"));
    assert!(dump.contains("# command = preprocess"));
}

/// Full train -> segment -> eval -> overlay flow, plus determinism and the
/// forced-empty threshold case.
#[test]
fn train_segment_eval_overlay_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let manifests = gen_phantoms(&tmp.path().join("d"), 3, 21);
    let list = tmp.path().join("list.txt");
    std::fs::write(
        &list,
        manifests
            .iter()
            .map(|m| m.display().to_string())
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .unwrap();

    // Train.
    let model = tmp.path().join("model.ocsf");
    run_ok(&[
        "train",
        "--manifest-list",
        list.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
    ]);
    assert!(model.is_file());
    let summary = std::fs::read_to_string(tmp.path().join("model.summary.txt")).unwrap();
    assert!(
        summary.contains("oob_accuracy = "),
        "summary must carry OOB accuracy:\n{summary}"
    );
    assert!(summary.contains("trees = 50"));

    // Segment, twice, byte-identical.
    let seg1 = tmp.path().join("seg1");
    let seg2 = tmp.path().join("seg2");
    for out_dir in [&seg1, &seg2] {
        run_ok(&[
            "segment",
            "--manifest",
            manifests[0].to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--dump-layers",
        ]);
    }
    for i in 0..3 {
        let name = format!("pred_{i:03}.pgm");
        assert_eq!(
            std::fs::read(seg1.join(&name)).unwrap(),
            std::fs::read(seg2.join(&name)).unwrap(),
            "segment runs with identical config must match"
        );
        assert!(seg1.join(format!("layers_{i:03}.pgm")).is_file());
    }
    assert!(seg1.join("cystseg_config.txt").is_file());

    // Threshold above 1 forces empty masks.
    let seg_empty = tmp.path().join("seg_empty");
    run_ok(&[
        "segment",
        "--manifest",
        manifests[0].to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        seg_empty.to_str().unwrap(),
        "--threshold",
        "1.01",
    ]);
    for i in 0..3 {
        let (w, h, data) =
            cystseg::pgm::read_pgm(&seg_empty.join(format!("pred_{i:03}.pgm"))).unwrap();
        assert_eq!((w, h), (512, 256));
        assert!(
            data.iter().all(|&b| b == 0),
            "mask {i} not empty at threshold 1.01"
        );
    }

    // Eval with a fixed model and exclude-zero blocks.
    let report = tmp.path().join("report.txt");
    run_ok(&[
        "eval",
        "--manifest-list",
        list.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--report-out",
        report.to_str().unwrap(),
        "--exclude-zero",
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("per-volume dice (all slices)"));
    assert!(text.contains("per-volume dice (excluding zero-DC slices)"));
    assert!(report.with_extension("kv").is_file());
    assert!(report.with_extension("config.txt").is_file());

    // LOOCV eval (no --model) also runs and is deterministic.
    let r1 = tmp.path().join("loocv1.txt");
    let r2 = tmp.path().join("loocv2.txt");
    for r in [&r1, &r2] {
        run_ok(&[
            "eval",
            "--manifest-list",
            list.to_str().unwrap(),
            "--report-out",
            r.to_str().unwrap(),
            "--seed",
            "3",
        ]);
    }
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let loocv_text = std::fs::read_to_string(&r1).unwrap();
    assert!(
        !loocv_text.contains("excluding zero-DC"),
        "nonzero block present without --exclude-zero"
    );

    // Overlay from the segmentation masks.
    let overlays = tmp.path().join("ov");
    run_ok(&[
        "overlay",
        "--manifest",
        manifests[0].to_str().unwrap(),
        "--masks",
        seg1.to_str().unwrap(),
        "--out",
        overlays.to_str().unwrap(),
    ]);
    for i in 0..3 {
        assert!(overlays.join(format!("overlay_{i:03}.pgm")).is_file());
    }
}

#[test]
fn eval_without_ground_truth_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let manifests = gen_phantoms(&tmp.path().join("d"), 2, 31);
    // Strip the ground-truth keys out of one manifest.
    let text = std::fs::read_to_string(&manifests[0]).unwrap();
    let stripped: String = text
        .lines()
        .filter(|l| !l.starts_with("gt_"))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&manifests[0], stripped).unwrap();

    let list = tmp.path().join("list.txt");
    std::fs::write(
        &list,
        manifests
            .iter()
            .map(|m| m.display().to_string())
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .unwrap();
    let report = tmp.path().join("r.txt");
    let out = run(&[
        "eval",
        "--manifest-list",
        list.to_str().unwrap(),
        "--report-out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("ground truth required"), "stderr: {stderr}");
}

#[test]
fn train_on_cystless_volumes_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    run_ok(&[
        "phantom-gen",
        "--out",
        data.to_str().unwrap(),
        "--volumes",
        "3",
        "--slices",
        "6",
        "--seed",
        "13",
        "--speckle-sigma",
        "0.3",
        "--cysts",
        "0:0",
    ]);
    let list = tmp.path().join("list.txt");
    let mut text = String::new();
    for v in 0..3 {
        text.push_str(&format!("{}/vol_{v:03}/manifest.txt\n", data.display()));
    }
    std::fs::write(&list, text).unwrap();
    let out = run(&[
        "train",
        "--manifest-list",
        list.to_str().unwrap(),
        "--model",
        tmp.path().join("m.ocsf").to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn config_file_is_applied_with_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let manifests = gen_phantoms(&tmp.path().join("d"), 1, 41);
    let cfg_file = tmp.path().join("cfg.txt");
    std::fs::write(&cfg_file, "tv_lambda = 5\nseed = 100\n").unwrap();
    let out_dir = tmp.path().join("pre");
    run_ok(&[
        "preprocess",
        "--manifest",
        manifests[0].to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        cfg_file.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    let dump = std::fs::read_to_string(out_dir.join("cystseg_config.txt")).unwrap();
    // Config file set tv_lambda; the explicit flag overrode the seed.
    assert!(dump.contains("tv_lambda = 5"), "dump: {dump}");
    assert!(dump.contains("seed = 7"), "dump: {dump}");
}
