use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use annoreg::config::RunConfig;
use annoreg::metrics::{
    aggregate, calibrate_threshold, compare_reports, ensemble_average, evaluate_slide, join_predictions,
    read_slide_metrics_csv, write_aggregate_csv, write_comparison_csv, write_slide_metrics_csv, PredictionTable,
    ReportOptions, SlideMetrics,
};
use annoreg::morph::overlay_rgb;
use annoreg::raster::{decode_mask_png, encode_mask_png, parse_sidecar, sidecar_path};
use annoreg::tissue::{LabelColumn, TileManifest};
use rayon::prelude::*;

use crate::{at, create_dir, read, write, CliResult, Sidecar};

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdMode {
    Fixed(f64),
    /// Youden threshold over the pooled tiles of a tuning manifest.
    Calibrate { manifest: PathBuf, predictions: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub threshold: f64,
    pub slides: Vec<SlideMetrics>,
}

fn load_manifest(path: &Path, config: &RunConfig, side: &mut Sidecar, role: &str) -> CliResult<TileManifest> {
    let bytes = read(path)?;
    side.inputs.push(crate::InputDigest::new(role, path, &bytes));
    TileManifest::read_csv(bytes.as_slice(), config.tile_params()).map_err(|e| at(path, e))
}

fn load_predictions(path: &Path, side: &mut Sidecar, role: &str) -> CliResult<PredictionTable> {
    let bytes = read(path)?;
    side.inputs.push(crate::InputDigest::new(role, path, &bytes));
    PredictionTable::read_csv(bytes.as_slice()).map_err(|e| at(path, e))
}

/// Per-slide metrics, the cohort aggregate, and per-slide prediction masks
/// and overlays. Ground-truth masks are read from
/// `<gt_masks>/<slide_id>_<column>.png` when a directory is given and such a
/// file exists.
pub fn evaluate(
    manifest_path: &Path,
    predictions_path: &Path,
    mode: &ThresholdMode,
    column: LabelColumn,
    config: &RunConfig,
    gt_masks: Option<&Path>,
    out_dir: &Path,
) -> CliResult<EvaluateSummary> {
    config.validate()?;
    let mut side = Sidecar::new("evaluate").with_config(config).param("ground_truth", column.name());
    let manifest = load_manifest(manifest_path, config, &mut side, "manifest")?;
    let predictions = load_predictions(predictions_path, &mut side, "predictions")?;
    let threshold = match mode {
        ThresholdMode::Fixed(t) => {
            if !(0.0..=1.0).contains(t) {
                return Err(crate::CliError::Input(format!("threshold {t} outside [0, 1]")));
            }
            *t
        }
        ThresholdMode::Calibrate { manifest, predictions } => {
            let m = load_manifest(manifest, config, &mut side, "tune_manifest")?;
            let p = load_predictions(predictions, &mut side, "tune_predictions")?;
            let y = calibrate_threshold(&m, &p, column)?;
            side = side.param("youden_j", y.j);
            y.threshold
        }
    };
    side = side.param("threshold", threshold);

    let scores = ensemble_average(&predictions)?;
    let groups = join_predictions(&manifest, &scores, column)?;
    let mut opts = ReportOptions {
        mask_resolution_um: config.mask_resolution_um,
        min_area_px: config.sp_min_area_px,
        gt_masks: BTreeMap::new(),
    };
    if let Some(dir) = gt_masks {
        for g in &groups {
            let path = dir.join(format!("{}_{}.png", g.slide_id, column.name()));
            if !path.exists() {
                continue;
            }
            let side_path = sidecar_path(&path);
            let text = String::from_utf8(read(&side_path)?).map_err(|e| at(&side_path, e))?;
            let res = parse_sidecar(&text).map_err(|e| at(&side_path, e))?;
            let png = read(&path)?;
            side.inputs.push(crate::InputDigest::new(format!("gt_mask/{}", g.slide_id), &path, &png));
            opts.gt_masks.insert(g.slide_id.clone(), decode_mask_png(&png, res).map_err(|e| at(&path, e))?);
        }
    }
    let params = manifest.params;
    let evaluations = groups
        .par_iter()
        .map(|g| evaluate_slide(g, &params, threshold, &opts))
        .collect::<Result<Vec<_>, _>>()?;

    create_dir(out_dir)?;
    let slides: Vec<SlideMetrics> = evaluations.iter().map(|e| e.metrics.clone()).collect();
    let mut buf = Vec::new();
    write_slide_metrics_csv(&slides, &mut buf)?;
    write(&out_dir.join("slide_metrics.csv"), &buf)?;
    let agg = aggregate(&slides, config.n_boot, 0.05, config.seed)?;
    let mut buf = Vec::new();
    write_aggregate_csv(column.name(), &agg, &mut buf)?;
    write(&out_dir.join("aggregate.csv"), &buf)?;
    write(&out_dir.join("threshold.txt"), format!("{threshold}\n"))?;
    for e in &evaluations {
        let id = &e.metrics.slide_id;
        write(&out_dir.join("masks").join(format!("{id}_prediction.png")), encode_mask_png(&e.prediction_mask)?)?;
        write(
            &out_dir.join("overlays").join(format!("{id}.png")),
            overlay_rgb(&e.gt_mask, &e.prediction_mask)?.encode_png()?,
        )?;
    }
    let undefined: BTreeMap<&str, Vec<&str>> = slides
        .iter()
        .filter(|s| !s.undefined().is_empty())
        .map(|s| (s.slide_id.as_str(), s.undefined()))
        .collect();
    side.param("undefined_metrics", undefined).write_in(out_dir)?;
    Ok(EvaluateSummary { threshold, slides })
}

/// Paired comparison of two per-slide metric reports.
pub fn compare(metrics_a: &Path, metrics_b: &Path, out: &Path) -> CliResult<Vec<annoreg::metrics::ComparisonRow>> {
    let a_bytes = read(metrics_a)?;
    let b_bytes = read(metrics_b)?;
    let a = read_slide_metrics_csv(a_bytes.as_slice()).map_err(|e| at(metrics_a, e))?;
    let b = read_slide_metrics_csv(b_bytes.as_slice()).map_err(|e| at(metrics_b, e))?;
    let rows = compare_reports(&a, &b)?;
    let mut buf = Vec::new();
    write_comparison_csv(&rows, &mut buf)?;
    write(out, &buf)?;
    Sidecar::new("compare")
        .param("family_size", rows.iter().filter(|r| r.p_raw.is_some()).count())
        .input("metrics_a", metrics_a, &a_bytes)
        .input("metrics_b", metrics_b, &b_bytes)
        .write_beside(out)?;
    Ok(rows)
}
