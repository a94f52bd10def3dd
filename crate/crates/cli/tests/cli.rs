use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use annoreg::config::RunConfig;
use annoreg::deform::{save_field, DeformationField};
use annoreg::geojson::{parse_annotations, to_geojson};
use annoreg::metrics::{calibrate_threshold, read_slide_metrics_csv, PredictionTable};
use annoreg::model::{AnnotationSet, ClassLabel, Polygon, Region};
use annoreg::synth::SynthSpec;
use annoreg::tissue::{LabelColumn, TileManifest};
use annoreg_cli::{ThresholdMode, EXIT_INPUT, EXIT_PARTIAL};

fn annoreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_annoreg")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cohort(dir: &Path, seed: u64, n_cases: usize) -> PathBuf {
    let spec = SynthSpec { seed, n_cases, ..SynthSpec::default() };
    let out = dir.join("cohort");
    annoreg_cli::synth_cohort_from(&spec, &out, None).unwrap();
    out.join("cases.csv")
}

fn square_annotations(slide: &str) -> AnnotationSet {
    let region = |class, x: f64| Region { class, polygon: Polygon::rect(x, 10.0, x + 90.0, 80.0).unwrap() };
    AnnotationSet::new(
        slide,
        vec![region(ClassLabel::InvasiveCancer, 10.0), region(ClassLabel::Dcis, 200.0)],
    )
    .unwrap()
}

#[test]
fn warp_through_zero_field_keeps_geometry() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = tmp.path().join("he.geojson");
    let field = tmp.path().join("zero.wdf");
    let out = tmp.path().join("out/registered.geojson");
    let set = square_annotations("S_HE");
    fs::write(&ann, to_geojson(&set)).unwrap();
    fs::write(&field, save_field(&DeformationField::zero(4, 4, 100.0).unwrap())).unwrap();
    let o = annoreg(&["warp", s(&ann), s(&field), "--target-slide-id", "S_KI67", "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let warped = parse_annotations(&fs::read(&out).unwrap(), None).unwrap();
    assert_eq!(warped.slide_id(), "S_KI67");
    assert_eq!(warped.regions, set.regions);
    let side: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("out/registered.geojson.run.json")).unwrap()).unwrap();
    assert_eq!(side["command"], "warp");
    assert_eq!(side["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn warp_matches_library_for_constant_field() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = tmp.path().join("he.geojson");
    let field_path = tmp.path().join("shift.wdf");
    let out = tmp.path().join("reg.geojson");
    let set = square_annotations("S_HE");
    let field = DeformationField::constant(5, 5, 100.0, 0.5, -0.25).unwrap();
    fs::write(&ann, to_geojson(&set)).unwrap();
    fs::write(&field_path, save_field(&field)).unwrap();
    annoreg_cli::warp(&ann, &field_path, "S_KI67", &out).unwrap();
    let expected = annoreg::deform::warp_annotation_set(&field, &set, "S_KI67").unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), to_geojson(&expected));
    let first = parse_annotations(&fs::read(&out).unwrap(), None).unwrap().regions[0].polygon.outer()[0];
    assert_eq!((first.x, first.y), (60.0, -15.0));
}

#[test]
fn missing_input_exits_with_input_code_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let ghost = tmp.path().join("nowhere.geojson");
    let field = tmp.path().join("f.wdf");
    fs::write(&field, save_field(&DeformationField::zero(2, 2, 1.0).unwrap())).unwrap();
    let o = annoreg(&["warp", s(&ghost), s(&field), "--target-slide-id", "X", "-o", s(&tmp.path().join("o.geojson"))]);
    assert_eq!(o.status.code(), Some(EXIT_INPUT as i32));
    assert!(stderr(&o).contains("nowhere.geojson"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = tmp.path().join("cases.csv");
    fs::write(&cases, "case_id\n").unwrap();
    let o = annoreg(&["pipeline", s(&cases), "--set", "tile_sise_px=10", "-o", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(EXIT_INPUT as i32));
    assert!(stderr(&o).contains("tile_sise_px"), "{}", stderr(&o));
}

fn cases_csv(n: usize) -> String {
    let mut out = String::from("case_id,he_slide_id,ihc_slide_id,ki67_score\n");
    for i in 0..n {
        let score = if i % 17 == 3 { String::new() } else { format!("{:.1}", (i * 37 % 1000) as f64 / 10.0) };
        out.push_str(&format!("c{i:03},c{i:03}_HE,c{i:03}_KI67,{score}\n"));
    }
    out
}

#[test]
fn split_command_counts_and_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = tmp.path().join("cases.csv");
    fs::write(&cases, cases_csv(272)).unwrap();
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let o = annoreg(&["split", s(&cases), "--seed", seed, "-o", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out).unwrap()
    };
    let a = run("a.csv", "11");
    let b = run("b.csv", "11");
    let c = run("c.csv", "12");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let test = a.lines().filter(|l| l.split(',').nth(1) == Some("test")).count();
    let dev = a.lines().filter(|l| l.split(',').nth(1) == Some("dev")).count();
    assert_eq!((dev, test), (218, 54));
    assert!(tmp.path().join("a.csv.run.json").exists());
}

#[test]
fn pipeline_is_deterministic_and_reports_partial_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = cohort(tmp.path(), 31, 3);
    let config = RunConfig::default();
    let a = annoreg_cli::pipeline(&cases, &config, &tmp.path().join("a"), Some(1)).unwrap();
    let b = annoreg_cli::pipeline(&cases, &config, &tmp.path().join("b"), Some(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.succeeded.len(), 3);
    for f in ["manifest.csv", "agreement.csv", "pipeline.log", "run.json"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }

    fs::write(tmp.path().join("cohort/case001/field.wdf"), b"WDF1 truncated").unwrap();
    let out = tmp.path().join("broken");
    let o = annoreg(&["pipeline", s(&cases), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(EXIT_PARTIAL as i32), "{}", stderr(&o));
    assert!(out.join("cases/case000/manifest.csv").exists());
    assert!(!out.join("cases/case001/manifest.csv").exists());
    assert!(out.join("cases/case002/manifest.csv").exists());
    let log = fs::read_to_string(out.join("pipeline.log")).unwrap();
    let line = log.lines().find(|l| l.starts_with("case001")).unwrap();
    assert!(line.contains("failed") && line.contains("field.wdf"), "{line}");
    let merged = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert!(!merged.contains("case001_KI67"));
}

fn pipeline_outputs(dir: &Path, seed: u64, n: usize) -> (PathBuf, RunConfig) {
    let cases = cohort(dir, seed, n);
    let config = RunConfig { n_boot: 500, ..RunConfig::default() };
    let out = dir.join("pipe");
    annoreg_cli::pipeline(&cases, &config, &out, None).unwrap();
    (out, config)
}

#[test]
fn evaluate_fixed_and_calibrated_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let (pipe, config) = pipeline_outputs(tmp.path(), 41, 3);
    let manifest = pipe.join("manifest.csv");
    let preds = tmp.path().join("preds.csv");
    annoreg_cli::synth_predictions(&manifest, LabelColumn::Ihc, 1.0, 5, 3, &config, &preds).unwrap();

    // perfect scores reproduce the ground truth exactly
    let out = tmp.path().join("eval");
    let summary =
        annoreg_cli::evaluate(&manifest, &preds, &ThresholdMode::Fixed(0.5), LabelColumn::Ihc, &config, None, &out).unwrap();
    assert_eq!(summary.slides.len(), 3);
    for m in &summary.slides {
        assert_eq!(m.auroc, Some(1.0));
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.dice, Some(1.0));
    }
    let written = read_slide_metrics_csv(fs::read(out.join("slide_metrics.csv")).unwrap().as_slice()).unwrap();
    assert_eq!(written, summary.slides);
    for f in ["aggregate.csv", "threshold.txt", "run.json", "masks/case000_KI67_prediction.png", "overlays/case000_KI67.png"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let noisy = tmp.path().join("noisy.csv");
    annoreg_cli::synth_predictions(&manifest, LabelColumn::Ihc, 0.9, 6, 3, &config, &noisy).unwrap();
    let mode = ThresholdMode::Calibrate { manifest: manifest.clone(), predictions: noisy.clone() };
    let cal = annoreg_cli::evaluate(&manifest, &noisy, &mode, LabelColumn::Ihc, &config, None, &tmp.path().join("cal")).unwrap();
    let m = TileManifest::read_csv(fs::read(&manifest).unwrap().as_slice(), config.tile_params()).unwrap();
    let p = PredictionTable::read_csv(fs::read(&noisy).unwrap().as_slice()).unwrap();
    assert_eq!(cal.threshold, calibrate_threshold(&m, &p, LabelColumn::Ihc).unwrap().threshold);
}

#[test]
fn evaluate_rejects_orphan_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let (pipe, config) = pipeline_outputs(tmp.path(), 43, 1);
    let manifest = pipe.join("manifest.csv");
    let preds = tmp.path().join("preds.csv");
    annoreg_cli::synth_predictions(&manifest, LabelColumn::Ihc, 0.95, 1, 2, &config, &preds).unwrap();
    let mut text = fs::read_to_string(&preds).unwrap();
    text.push_str("ghost_KI67,0,0,0.5,0.5\n");
    fs::write(&preds, text).unwrap();
    let o = annoreg(&["evaluate", s(&manifest), s(&preds), "--threshold", "0.5", "-o", s(&tmp.path().join("e"))]);
    assert_eq!(o.status.code(), Some(EXIT_INPUT as i32));
    assert!(stderr(&o).contains("ghost_KI67"), "{}", stderr(&o));
}

#[test]
fn compare_identical_and_mismatched_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    let header = "slide_id,n_tiles,auroc,dice,jaccard,accuracy,f1,specificity,sensitivity,precision\n";
    let row = |id: &str, v: f64| format!("{id},10,{v},{v},{v},{v},{v},{v},{v},NA\n");
    fs::write(&a, format!("{header}{}{}{}", row("s1", 0.9), row("s2", 0.8), row("s3", 0.7))).unwrap();
    let rows = annoreg_cli::compare(&a, &a, &tmp.path().join("same.csv")).unwrap();
    assert!(rows.iter().all(|r| r.p_raw.is_none()));
    let text = fs::read_to_string(tmp.path().join("same.csv")).unwrap();
    assert!(text.starts_with("metric,mean_a,mean_b,p_raw,p_bh"));

    fs::write(&b, format!("{header}{}{}", row("s1", 0.9), row("s9", 0.8))).unwrap();
    let o = annoreg(&["compare", s(&a), s(&b), "-o", s(&tmp.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(EXIT_INPUT as i32));
    assert!(stderr(&o).contains("s9") || stderr(&o).contains("s2"), "{}", stderr(&o));
}

#[test]
fn synth_cohort_command_writes_a_runnable_case_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"seed": 3, "n_cases": 2}"#).unwrap();
    let out = tmp.path().join("cohort");
    let o = annoreg(&["synth", "cohort", s(&spec), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cases = annoreg_cli::read_case_manifest(&out.join("cases.csv")).unwrap();
    assert_eq!(cases.len(), 2);
    assert!(cases.iter().all(|c| c.field.exists() && c.he_tissue_mask.exists()));
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(out.join("case000/truth.json")).unwrap()).unwrap();
    let d = truth["achieved_annotation_dice"].as_f64().unwrap();
    assert!((0.80..=0.86).contains(&d), "{d}");

    fs::write(&spec, r#"{"seed": 3, "n_casez": 2}"#).unwrap();
    let o = annoreg(&["synth", "cohort", s(&spec), "-o", s(&tmp.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(EXIT_INPUT as i32));
    assert!(stderr(&o).contains("n_casez"), "{}", stderr(&o));
}

#[test]
fn overlay_command_reports_dice_in_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let a = annoreg::raster::BinaryMask::from_ascii(&["##..", "##.."], 2.0).unwrap();
    let b = annoreg::raster::BinaryMask::from_ascii(&[".#..", ".#.."], 2.0).unwrap();
    let (pa, pb) = (tmp.path().join("a.png"), tmp.path().join("b.png"));
    annoreg::raster::save_mask(&a, &pa).unwrap();
    annoreg::raster::save_mask(&b, &pb).unwrap();
    let out = tmp.path().join("ov.png");
    let o = annoreg(&["overlay", s(&pa), s(&pb), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let side: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("ov.png.run.json")).unwrap()).unwrap();
    assert!((side["parameters"]["dice"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
}
