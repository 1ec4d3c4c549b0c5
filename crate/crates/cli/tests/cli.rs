use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use radpath::image::{write_label_volume, Grid2D, LabelMask2D, LabelVolume3D};

fn radpath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radpath"))
        .args(args)
        .env_remove("RAPSODI_THREADS")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A phantom with two histology sections, cheap enough for CLI tests.
fn small_spec(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("spec.json");
    let text = format!(
        r#"{{
            "geometry": {{"histology_slices": [5, 6]}},
            "degradation": {{"rotation_deg": 5.0, "seed": 7}}
            {extra}
        }}"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn generate(dir: &Path) -> PathBuf {
    let case = dir.join("case");
    let o = radpath(&["phantom", "generate", "--spec", s(&small_spec(dir, "")), "--out", s(&case)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(case.join("ground_truth.json").exists());
    assert!(case.join("reproducibility.json").exists());
    case.join("manifest.json")
}

fn csv_cells(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn duplicate_slice_index_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    fs::write(
        &manifest,
        r#"{"case_id": "dup",
            "mri": {"t2": "t2.nii.gz", "prostate_mask": "p.nii.gz"},
            "histology": {"slices": [
              {"image": "a.png", "prostate_mask": "a_m.png", "mri_slice_index": 3,
               "rotation_deg": 0, "flip_lr": false, "pixel_spacing_mm": 0.2},
              {"image": "b.png", "prostate_mask": "b_m.png", "mri_slice_index": 3,
               "rotation_deg": 0, "flip_lr": false, "pixel_spacing_mm": 0.2}]}}"#,
    )
    .unwrap();
    let o = radpath(&["register", "--manifest", s(&manifest), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("histology.slices[1].mri_slice_index") && err.contains("3 does not increase"), "{err}");
}

#[test]
fn unreadable_mri_path_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    fs::write(
        &manifest,
        r#"{"case_id": "one",
            "mri": {"t2": "nowhere/t2.nii.gz", "prostate_mask": "p.nii.gz"},
            "histology": {"slices": [
              {"image": "a.png", "prostate_mask": "a_m.png", "mri_slice_index": 0,
               "rotation_deg": 0, "flip_lr": false, "pixel_spacing_mm": 0.2}]}}"#,
    )
    .unwrap();
    let o = radpath(&["register", "--manifest", s(&manifest), "--out", s(&dir.path().join("out"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere/t2.nii.gz"), "{}", stderr(&o));
}

#[test]
fn register_then_evaluate_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(dir.path());
    let out1 = dir.path().join("run1");
    let o = radpath(&["register", "--manifest", s(&manifest), "--threads", "1", "--out", s(&out1)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["mapped_prostate.nii.gz", "run_log.json", "metrics.csv", "reproducibility.json", "transforms/slice_000.json"] {
        assert!(out1.join(f).exists(), "{f}");
    }
    let metrics = csv_cells(&out1.join("metrics.csv"));
    assert_eq!(metrics[0], ["case_id", "dice", "hausdorff_mm", "urethra_dev_mm", "landmark_dev_mm", "n_slices", "n_landmarks"]);
    let dice: f64 = metrics[1][1].parse().unwrap();
    assert!(dice >= 0.99, "dice {dice}");

    // Thread count changes wall time only.
    let out2 = dir.path().join("run2");
    let o = Command::new(env!("CARGO_BIN_EXE_radpath"))
        .args(["register", "--manifest", s(&manifest), "--out", s(&out2)])
        .env("RAPSODI_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "transforms/slice_000.json", "transforms/slice_001.json", "mapped_landmarks.json"] {
        assert_eq!(fs::read(out1.join(f)).unwrap(), fs::read(out2.join(f)).unwrap(), "{f}");
    }
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out2.join("reproducibility.json")).unwrap()).unwrap();
    assert_eq!(record["threads"], 2);
    assert_eq!(record["resolved"]["profile"]["name"], "standard");

    // Against the case's own reference: the pipeline's numbers, exactly.
    let eval = dir.path().join("eval");
    let o = radpath(&["evaluate", "--results", s(&out1), "--reference", s(&manifest), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(eval.join("evaluation.csv")).unwrap(), fs::read_to_string(out1.join("metrics.csv")).unwrap());

    // Against itself: perfect agreement.
    let reference = dir.path().join("self.json");
    fs::write(
        &reference,
        format!(
            r#"{{"case_id": "self", "prostate_mask": "{0}/mapped_prostate.nii.gz",
                "urethra_mask": "{0}/mapped_urethra.nii.gz", "cancer_mask": "{0}/mapped_cancer.nii.gz"}}"#,
            s(&out1)
        ),
    )
    .unwrap();
    let o = radpath(&["evaluate", "--results", s(&out1), "--reference", s(&reference), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(e["report"]["dice"], 1.0);
    assert_eq!(e["report"]["hausdorff_mm"], 0.0);
    assert_eq!(e["report"]["urethra_dev_mm"], 0.0);
    assert_eq!(e["cancer"]["dice"], 1.0);
    assert_eq!(e["cancer"]["com_dev_mm"], 0.0);
}

#[test]
fn fast_profile_logs_skipped_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(dir.path());
    let o = radpath(&["register", "--manifest", s(&manifest), "--profile", "fast", "--out", s(&dir.path().join("out"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("Step 1 (stack reconstruction) skipped") && err.contains("pyramid [16, 8]"), "{err}");
}

#[test]
fn study_is_deterministic_and_counts_reps() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(
        dir.path(),
        r#", "grid": {"rotations_deg": [0.0, 5.0], "shrinks": [0.0], "offsets_mm": [0.0], "reps": 2}"#,
    );
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = radpath(&["phantom", "study", "--spec", s(&spec), "--profile", "fast", "--seed", "3", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["study_long.csv", "study_summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let long = csv_cells(&a.join("study_long.csv"));
    assert_eq!(long[0], ["condition", "rep", "metric", "value"]);
    let dice_rows: Vec<_> = long.iter().filter(|r| r[0] == "r0_s0_o0" && r[2] == "dice").collect();
    assert_eq!(dice_rows.len(), 2);
    let summary = csv_cells(&a.join("study_summary.csv"));
    let conditions: std::collections::BTreeSet<&str> = summary[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(conditions.len(), 2);
    assert!(a.join("curves_dice_vs_rotation.svg").exists());
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("reproducibility.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 3);
    assert_eq!(record["resolved"]["profile"]["fast_mode"], true);
}

#[test]
fn disjoint_cancer_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid2D::new(20, 20, [0.5, 0.5], [0.0, 0.0]).unwrap();
    let square = |x0: usize, y0: usize| {
        LabelMask2D::from_fn(g, |x, y| u16::from((x0..x0 + 4).contains(&x) && (y0..y0 + 4).contains(&y)))
    };
    let volume = |m: LabelMask2D| LabelVolume3D::new(g, 3.0, 0.0, vec![m]).unwrap();
    let prostate = LabelMask2D::from_fn(g, |x, y| u16::from((2..18).contains(&x) && (2..18).contains(&y)));
    let results = dir.path().join("results");
    fs::create_dir_all(&results).unwrap();
    write_label_volume(results.join("mapped_prostate.nii.gz"), &volume(prostate.clone())).unwrap();
    write_label_volume(results.join("mapped_cancer.nii.gz"), &volume(square(3, 3))).unwrap();
    write_label_volume(dir.path().join("ref_prostate.nii.gz"), &volume(prostate)).unwrap();
    write_label_volume(dir.path().join("ref_cancer.nii.gz"), &volume(square(9, 7))).unwrap();
    let reference = dir.path().join("ref.json");
    fs::write(&reference, r#"{"prostate_mask": "ref_prostate.nii.gz", "cancer_mask": "ref_cancer.nii.gz"}"#).unwrap();
    let o = radpath(&["evaluate", "--results", s(&results), "--reference", s(&reference)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(results.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(e["report"]["dice"], 1.0);
    assert_eq!(e["cancer"]["dice"], 0.0);
    // Centres 6 px apart in x and 4 in y at 0.5 mm.
    let d = e["cancer"]["com_dev_mm"].as_f64().unwrap();
    assert!((d - 0.5 * 52f64.sqrt()).abs() < 1e-12, "{d}");
}

#[test]
fn missing_results_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref.json");
    fs::write(&reference, r#"{"prostate_mask": "p.nii.gz"}"#).unwrap();
    let o = radpath(&["evaluate", "--results", s(&dir.path().join("nothing")), "--reference", s(&reference)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mapped_prostate.nii.gz"));
}
