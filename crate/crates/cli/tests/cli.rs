use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use ndarray_npy::write_npy;

fn rockseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rockseg")).args(args).output().expect("spawn rockseg")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

/// Three intensity bands (0.1, 0.5, 0.9) in horizontal stripes, with matching GT.
fn banded(h: usize, w: usize, shift: usize) -> (Array2<f32>, Array2<u8>) {
    let gt = Array2::from_shape_fn((h, w), |(y, x)| (((y + shift) * 3 / h + x / w) % 3) as u8);
    let img = gt.mapv(|c| 0.1 + 0.4 * c as f32);
    (img, gt)
}

fn write_sample(root: &Path, id: &str, n: usize, size: usize) {
    fs::create_dir_all(root.join(id).join("images")).unwrap();
    fs::create_dir_all(root.join(id).join("gt")).unwrap();
    for i in 0..n {
        let (img, gt) = banded(size, size, i);
        write_npy(root.join(id).join("images").join(format!("{i:03}.npy")), &img).unwrap();
        write_npy(root.join(id).join("gt").join(format!("{i:03}.npy")), &gt).unwrap();
    }
}

fn write_catalog(root: &Path) -> std::path::PathBuf {
    for id in ["S1", "S2", "S3"] {
        write_sample(root, id, 3, 24);
    }
    let mut text = String::from(
        "dataset = \"carbonates\"\n\n[palettes.carbonates]\nnames = [\"crude_oil\", \"brine\", \"rock_matrix\"]\n",
    );
    for id in ["S1", "S2", "S3"] {
        text.push_str(&format!(
            "\n[[samples]]\nid = \"{id}\"\nrole = \"segmentation\"\nimage_dir = \"{id}/images\"\ngt_dir = \"{id}/gt\"\npalette = \"carbonates\"\n"
        ));
    }
    let p = root.join("catalog.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn help_lists_config_keys() {
    let out = rockseg(&["segment", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["segment.method", "segment.n_classes", "output", "seed"] {
        assert!(text.contains(key), "missing {key} in:\n{text}");
    }
    let out = rockseg(&["finetune", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("finetune.train.epochs") && text.contains("split.n_train"));
}

#[test]
fn segment_otsu_writes_masks_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    let gt = dir.path().join("gt");
    fs::create_dir_all(&input).unwrap();
    fs::create_dir_all(&gt).unwrap();
    for i in 0..2 {
        let (img, m) = banded(24, 24, i);
        write_npy(input.join(format!("s{i}.npy")), &img).unwrap();
        write_npy(gt.join(format!("s{i}.npy")), &m).unwrap();
    }
    let out_dir = dir.path().join("out");
    let out = rockseg(&[
        "segment",
        "--method",
        "otsu",
        "--input",
        input.to_str().unwrap(),
        "--classes",
        "3",
        "--gt",
        gt.to_str().unwrap(),
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for i in 0..2 {
        assert!(out_dir.join("masks").join(format!("s{i}.npy")).is_file());
        assert!(out_dir.join("masks").join(format!("s{i}.png")).is_file());
    }
    assert!(out_dir.join("resolved_config.toml").is_file());
    assert!(out_dir.join("figures").join("confusion.pdf").is_file());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "otsu");
    assert_eq!(report["n_classes"], 3);
    // three well-separated bands: thresholds recover the GT exactly
    assert_eq!(report["evaluation"]["mean_iou"].as_f64().unwrap(), 1.0);
}

#[test]
fn resolved_config_reproduces_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir_all(&input).unwrap();
    write_npy(input.join("a.npy"), &banded(24, 24, 0).0).unwrap();
    let out_dir = dir.path().join("out");
    let out = rockseg(&[
        "segment",
        "--input",
        input.to_str().unwrap(),
        "--set",
        "segment.method=\"kmeans\"",
        "--set",
        "seed=7",
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = fs::read_to_string(out_dir.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert!(resolved.contains("method = \"kmeans\""));
    // feeding the echo back yields the same masks
    let again = dir.path().join("again");
    let cfg = out_dir.join("resolved_config.toml");
    let out = rockseg(&[
        "segment",
        "--input",
        input.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "-o",
        again.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(
        fs::read(out_dir.join("masks/a.npy")).unwrap(),
        fs::read(again.join("masks/a.npy")).unwrap()
    );
}

#[test]
fn unknown_override_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = rockseg(&["segment", "--input", dir.path().to_str().unwrap(), "--set", "segment.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["exit_code"], 2);
}

#[test]
fn bad_flag_exits_2_with_json() {
    let out = rockseg(&["segment", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");
}

#[test]
fn missing_dataset_exits_2() {
    let out = rockseg(&["segment", "--input", "/nonexistent/slices"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "missing_dataset");
}

#[test]
fn missing_checkpoint_exits_2() {
    let out = rockseg(&["evaluate", "--checkpoint", "/nonexistent/model.safetensors"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "missing_checkpoint");
}

#[test]
fn knn_is_not_a_finetune_head() {
    let out = rockseg(&["finetune", "--head", "knn"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "config");
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // intensities must lie in [0, 1]
    write_npy(dir.path().join("bad.npy"), &Array2::<f32>::from_elem((4, 4), 7.0)).unwrap();
    let out = rockseg(&["segment", "--input", dir.path().join("bad.npy").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["exit_code"], 1);
}

#[test]
fn probe_bfe_knn_on_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let cat = write_catalog(dir.path());
    let runs = dir.path().join("runs");
    let out = rockseg(&[
        "probe",
        "--features",
        "bfe",
        "--head",
        "knn",
        "--n-train",
        "4",
        "--set",
        &format!("catalog=\"{}\"", cat.display()),
        "--set",
        "split.view.crop.size=24",
        "--set",
        "split.view.upsample=24",
        "-o",
        runs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let run_dir = Path::new(summary["run_dir"].as_str().unwrap());
    assert!(run_dir.join("report.json").is_file());
    assert!(run_dir.join("resolved_config.toml").is_file());
    assert_eq!(fs::read_dir(run_dir.join("masks")).unwrap().count(), 6);
    let miou = summary["mean_iou"].as_f64().unwrap();
    assert!(miou > 0.5, "mean IoU {miou}");
}
