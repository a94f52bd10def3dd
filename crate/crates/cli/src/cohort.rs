use std::fmt::Write as _;
use std::path::Path;

use annoreg::config::RunConfig;
use annoreg::deform::{load_field, save_field, warp_annotation_set};
use annoreg::geojson::{parse_annotations, to_geojson};
use annoreg::raster::{encode_mask_png, sidecar_path};
use annoreg::synth::{annotation_dice, gen_case, gen_predictions, truth_json, SynthCase, SynthSpec};
use annoreg::tissue::{LabelColumn, TileManifest};
use rayon::prelude::*;

use crate::{at, create_dir, read, write, CliError, CliResult, Sidecar};

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSummary {
    pub case_ids: Vec<String>,
    pub annotation_dice: Vec<f64>,
}

fn write_case(c: &SynthCase, dir: &Path) -> CliResult<()> {
    write(&dir.join("he.geojson"), to_geojson(&c.he_annotations))?;
    write(&dir.join("ihc.geojson"), to_geojson(&c.ihc_annotations))?;
    write(&dir.join("field.wdf"), save_field(&c.field))?;
    for (name, m) in [("he_tissue.png", &c.he_tissue), ("ihc_tissue.png", &c.ihc_tissue)] {
        let p = dir.join(name);
        write(&p, encode_mask_png(m)?)?;
        write(&sidecar_path(&p), format!("resolution_um = {}\n", m.resolution_um()))?;
    }
    write(&dir.join("truth.json"), truth_json(&c.truth))
}

/// Re-measures the annotation Dice from the written files.
fn self_check(c: &SynthCase, dir: &Path, spec: &SynthSpec) -> CliResult<f64> {
    let he_path = dir.join("he.geojson");
    let ihc_path = dir.join("ihc.geojson");
    let field_path = dir.join("field.wdf");
    let he = parse_annotations(&read(&he_path)?, None).map_err(|e| at(&he_path, e))?;
    let ihc = parse_annotations(&read(&ihc_path)?, None).map_err(|e| at(&ihc_path, e))?;
    let field = load_field(&read(&field_path)?).map_err(|e| at(&field_path, e))?;
    let registered = warp_annotation_set(&field, &he, &c.case.ihc_slide_id)?;
    let d = annotation_dice(&registered, &ihc, spec.slide_extent_um, spec.mask_resolution_um)?;
    let (lo, hi) = spec.target_annotation_dice;
    if d < lo || d > hi {
        return Err(CliError::Input(format!(
            "{}: annotation dice {d} outside the target band [{lo}, {hi}]",
            c.case.case_id
        )));
    }
    Ok(d)
}

/// Writes `spec.n_cases` synthetic cases plus a `cases.csv` case manifest
/// that the pipeline command reads directly.
pub fn synth_cohort(spec_path: &Path, out_dir: &Path) -> CliResult<CohortSummary> {
    let spec_bytes = read(spec_path)?;
    let spec: SynthSpec = serde_json::from_slice(&spec_bytes).map_err(|e| at(spec_path, e))?;
    spec.validate().map_err(|e| at(spec_path, e))?;
    synth_cohort_from(&spec, out_dir, Some((spec_path, &spec_bytes)))
}

pub fn synth_cohort_from(spec: &SynthSpec, out_dir: &Path, spec_file: Option<(&Path, &[u8])>) -> CliResult<CohortSummary> {
    let cases: Vec<SynthCase> = (0..spec.n_cases as u64)
        .into_par_iter()
        .map(|k| gen_case(spec, k))
        .collect::<Result<_, _>>()?;
    create_dir(out_dir)?;
    let mut csv = String::from(
        "case_id,he_slide_id,ihc_slide_id,he_annotations,ihc_annotations,field,he_tissue_mask,ihc_tissue_mask,ki67_score\n",
    );
    let mut summary = CohortSummary { case_ids: vec![], annotation_dice: vec![] };
    for c in &cases {
        let id = &c.case.case_id;
        let dir = out_dir.join(id);
        write_case(c, &dir)?;
        summary.annotation_dice.push(self_check(c, &dir, spec)?);
        summary.case_ids.push(id.clone());
        let score = c.case.ki67_score.map_or(String::new(), |s| s.to_string());
        let _ = writeln!(
            csv,
            "{id},{},{},{id}/he.geojson,{id}/ihc.geojson,{id}/field.wdf,{id}/he_tissue.png,{id}/ihc_tissue.png,{score}",
            c.case.he_slide_id, c.case.ihc_slide_id
        );
    }
    write(&out_dir.join("cases.csv"), csv)?;
    let mut side = Sidecar::new("synth").param("spec", spec);
    side.seed = Some(spec.seed);
    if let Some((p, b)) = spec_file {
        side = side.input("spec", p, b);
    }
    side.write_in(out_dir)?;
    Ok(summary)
}

/// Synthetic base-model predictions for a manifest at a target pooled AUROC.
pub fn synth_predictions(
    manifest_path: &Path,
    column: LabelColumn,
    auroc_target: f64,
    seed: u64,
    n_models: usize,
    config: &RunConfig,
    out: &Path,
) -> CliResult<f64> {
    let bytes = read(manifest_path)?;
    let manifest = TileManifest::read_csv(bytes.as_slice(), config.tile_params()).map_err(|e| at(manifest_path, e))?;
    let generated = gen_predictions(&manifest, column, auroc_target, seed, n_models)?;
    write(out, generated.table.to_csv_string())?;
    let mut side = Sidecar::new("synth-predictions")
        .param("ground_truth", column.name())
        .param("auroc_target", auroc_target)
        .param("n_models", n_models)
        .param("sigma", if generated.sigma.is_finite() { Some(generated.sigma) } else { None })
        .param("pooled_auroc", generated.pooled_auroc)
        .input("manifest", manifest_path, &bytes);
    side.seed = Some(seed);
    side.write_beside(out)?;
    Ok(generated.pooled_auroc)
}
