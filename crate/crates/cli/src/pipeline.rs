use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use annoreg::config::RunConfig;
use annoreg::deform::{load_field_any, warp_annotation_set};
use annoreg::geojson::{parse_annotations, to_geojson};
use annoreg::metrics::mask_dims;
use annoreg::model::{AnnotationSet, CaseRecord, ClassLabel};
use annoreg::morph::{overlap_counts, overlay_rgb, RgbImage};
use annoreg::raster::{decode_mask_png, encode_mask_png, parse_sidecar, rasterize_class, sidecar_path, BinaryMask};
use annoreg::tissue::{build_manifest, clean_tissue_mask, exclude_control_tissue, TileManifest};
use rayon::prelude::*;

use crate::{at, create_dir, read, write, CliError, CliResult, InputDigest, Sidecar};

/// One row of the case manifest. Paths are resolved against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseInputs {
    pub case: CaseRecord,
    pub he_annotations: PathBuf,
    pub ihc_annotations: Option<PathBuf>,
    pub field: PathBuf,
    pub he_tissue_mask: PathBuf,
    pub ihc_tissue_mask: PathBuf,
}

const CASE_COLUMNS: [&str; 9] = [
    "case_id",
    "he_slide_id",
    "ihc_slide_id",
    "he_annotations",
    "ihc_annotations",
    "field",
    "he_tissue_mask",
    "ihc_tissue_mask",
    "ki67_score",
];

pub fn read_case_manifest(path: &Path) -> CliResult<Vec<CaseInputs>> {
    let bytes = read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let headers = rdr.headers().map_err(|e| at(path, e))?.clone();
    let mut idx = [0usize; 9];
    for (k, name) in CASE_COLUMNS.iter().enumerate() {
        idx[k] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| at(path, format!("missing column {name:?}")))?;
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| at(path, e))?;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("").trim();
        let row_err = |e: String| at(path, format!("row {}: {e}", line + 2));
        let resolve = |s: &str| base.join(s);
        let score = match get(8) {
            "" | "NA" => None,
            s => Some(s.parse::<f64>().map_err(|_| row_err(format!("bad ki67_score {s:?}")))?),
        };
        let case = CaseRecord::new(get(0), get(1), get(2), score).map_err(|e| row_err(e.to_string()))?;
        for k in [3, 5, 6, 7] {
            if get(k).is_empty() {
                return Err(row_err(format!("empty {}", CASE_COLUMNS[k])));
            }
        }
        out.push(CaseInputs {
            case,
            he_annotations: resolve(get(3)),
            ihc_annotations: (!get(4).is_empty()).then(|| resolve(get(4))),
            field: resolve(get(5)),
            he_tissue_mask: resolve(get(6)),
            ihc_tissue_mask: resolve(get(7)),
        });
    }
    Ok(out)
}

struct CaseOutput {
    manifest: TileManifest,
    tissue: BinaryMask,
    ihc_mask: Option<BinaryMask>,
    registered_mask: BinaryMask,
    overlay: Option<RgbImage>,
    registered_geojson: String,
    agreement: Option<(f64, f64)>,
}

struct Reader<'a> {
    case_id: &'a str,
    digests: Vec<InputDigest>,
}

impl Reader<'_> {
    fn read(&mut self, role: &str, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = read(path)?;
        self.digests.push(InputDigest::new(format!("{}/{role}", self.case_id), path, &bytes));
        Ok(bytes)
    }

    fn mask(&mut self, role: &str, path: &Path, expected_res: f64) -> CliResult<BinaryMask> {
        let side = sidecar_path(path);
        let side_text = String::from_utf8(self.read(&format!("{role}_sidecar"), &side)?).map_err(|e| at(&side, e))?;
        let res = parse_sidecar(&side_text).map_err(|e| at(&side, e))?;
        if (res - expected_res).abs() > 1e-9 * expected_res {
            return Err(at(path, format!("resolution {res} µm/px differs from configured {expected_res}")));
        }
        let png = self.read(role, path)?;
        decode_mask_png(&png, res).map_err(|e| at(path, e))
    }

    fn annotations(&mut self, role: &str, path: &Path, slide_id: &str) -> CliResult<AnnotationSet> {
        let bytes = self.read(role, path)?;
        let set = parse_annotations(&bytes, Some(slide_id)).map_err(|e| at(path, e))?;
        if set.slide_id() != slide_id {
            return Err(at(path, format!("annotations belong to slide {:?}, expected {slide_id:?}", set.slide_id())));
        }
        Ok(set)
    }
}

fn run_case(inputs: &CaseInputs, config: &RunConfig) -> (Vec<InputDigest>, CliResult<CaseOutput>) {
    let mut r = Reader { case_id: &inputs.case.case_id, digests: Vec::new() };
    let out = run_case_with(&mut r, inputs, config);
    (r.digests, out)
}

fn run_case_with(r: &mut Reader<'_>, inputs: &CaseInputs, config: &RunConfig) -> CliResult<CaseOutput> {
    let case = &inputs.case;
    let he_raw = r.mask("he_tissue_mask", &inputs.he_tissue_mask, config.tissue_resolution_um)?;
    let ihc_raw = r.mask("ihc_tissue_mask", &inputs.ihc_tissue_mask, config.tissue_resolution_um)?;
    let clean = |m: &BinaryMask| clean_tissue_mask(m, config.sp_min_area_px, config.edge_fraction, config.edge_area_fraction);
    let he_clean = clean(&he_raw)?;
    let ihc_clean = clean(&ihc_raw)?;
    let tissue = exclude_control_tissue(&he_clean, &ihc_clean)?;

    let he = r.annotations("he_annotations", &inputs.he_annotations, &case.he_slide_id)?;
    let field_bytes = r.read("field", &inputs.field)?;
    let field = load_field_any(&field_bytes).map_err(|e| at(&inputs.field, e))?;
    let registered = warp_annotation_set(&field, &he, &case.ihc_slide_id)?;
    let ihc = match &inputs.ihc_annotations {
        Some(p) => Some(r.annotations("ihc_annotations", p, &case.ihc_slide_id)?),
        None => None,
    };

    let params = config.tile_params();
    let manifest = build_manifest(case, ihc.as_ref(), Some(&registered), &tissue, &params)?;

    let res = config.mask_resolution_um;
    let (w, h) = mask_dims(tissue.extent_um(), res);
    let registered_mask = rasterize_class(&registered, ClassLabel::InvasiveCancer, res, w, h)?;
    let ihc_mask = ihc.as_ref().map(|a| rasterize_class(a, ClassLabel::InvasiveCancer, res, w, h)).transpose()?;
    let (overlay, agreement) = match &ihc_mask {
        Some(m) => {
            let c = overlap_counts(m, &registered_mask)?;
            (Some(overlay_rgb(m, &registered_mask)?), Some((c.dice(), c.jaccard())))
        }
        None => (None, None),
    };
    Ok(CaseOutput {
        manifest,
        tissue,
        ihc_mask,
        registered_mask,
        overlay,
        registered_geojson: to_geojson(&registered),
        agreement,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub succeeded: Vec<String>,
    /// `(case_id, message)` per failed case.
    pub failed: Vec<(String, String)>,
    pub total_tiles: usize,
}

impl PipelineSummary {
    /// 0 when every case succeeded, 3 otherwise.
    pub fn exit_code(&self) -> u8 {
        if self.failed.is_empty() {
            0
        } else {
            crate::EXIT_PARTIAL
        }
    }
}

fn save_mask(mask: &BinaryMask, path: &Path) -> CliResult<()> {
    write(path, encode_mask_png(mask)?)?;
    write(&sidecar_path(path), format!("resolution_um = {}\n", mask.resolution_um()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| v.to_string())
}

/// Runs clean → exclude-control → warp → tile → label for every case of the
/// case manifest, `jobs` cases at a time. Outputs do not depend on `jobs`.
/// Failed cases are logged and skipped; see [`PipelineSummary::exit_code`].
pub fn pipeline(case_manifest: &Path, config: &RunConfig, out_dir: &Path, jobs: Option<usize>) -> CliResult<PipelineSummary> {
    config.validate()?;
    let manifest_bytes = read(case_manifest)?;
    let cases = read_case_manifest(case_manifest)?;
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = cases.iter().find(|c| !ids.insert(c.case.case_id.clone())) {
        return Err(at(case_manifest, format!("duplicate case id {:?}", dup.case.case_id)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
    let results: Vec<(Vec<InputDigest>, CliResult<CaseOutput>)> =
        pool.install(|| cases.par_iter().map(|c| run_case(c, config)).collect());

    create_dir(out_dir)?;
    let mut log = String::new();
    let mut agreement = String::from("case_id,slide_id,dice,jaccard\n");
    let mut parts = Vec::new();
    let mut summary = PipelineSummary { succeeded: vec![], failed: vec![], total_tiles: 0 };
    let mut sidecar = Sidecar::new("pipeline").with_config(config).input("case_manifest", case_manifest, &manifest_bytes);
    for (inputs, (digests, result)) in cases.iter().zip(results) {
        sidecar.inputs.extend(digests);
        let case_id = &inputs.case.case_id;
        let slide = &inputs.case.ihc_slide_id;
        match result {
            Ok(o) => {
                let case_dir = out_dir.join("cases").join(case_id);
                write(&case_dir.join("manifest.csv"), o.manifest.to_csv_string())?;
                write(&case_dir.join("registered.geojson"), &o.registered_geojson)?;
                let masks = out_dir.join("masks");
                save_mask(&o.tissue, &masks.join(format!("{slide}_tissue.png")))?;
                save_mask(&o.registered_mask, &masks.join(format!("{slide}_registered.png")))?;
                if let Some(m) = &o.ihc_mask {
                    save_mask(m, &masks.join(format!("{slide}_ihc.png")))?;
                }
                if let Some(img) = &o.overlay {
                    write(&out_dir.join("overlays").join(format!("{slide}_annotations.png")), img.encode_png()?)?;
                }
                let n = o.manifest.records.len();
                let pos = |f: fn(&annoreg::tissue::TileRecord) -> Option<u8>| {
                    o.manifest.records.iter().filter(|r| f(r) == Some(1)).count()
                };
                let disagree = o.manifest.records.iter().filter(|r| r.label_ihc.is_some() && r.label_ihc != r.label_registered).count();
                let _ = writeln!(
                    log,
                    "{case_id}\tok\ttiles={n}\tihc_positive={}\tregistered_positive={}\tdisagreements={disagree}",
                    pos(|r| r.label_ihc),
                    pos(|r| r.label_registered)
                );
                let (d, j) = o.agreement.map_or((None, None), |(d, j)| (Some(d), Some(j)));
                let _ = writeln!(agreement, "{case_id},{slide},{},{}", fmt_opt(d), fmt_opt(j));
                summary.total_tiles += n;
                summary.succeeded.push(case_id.clone());
                parts.push(o.manifest);
            }
            Err(e) => {
                let msg = e.to_string();
                let _ = writeln!(log, "{case_id}\tfailed\t{}", msg.replace(['\n', '\t'], " "));
                summary.failed.push((case_id.clone(), msg));
            }
        }
    }
    let merged = TileManifest::merge(config.tile_params(), parts)?;
    write(&out_dir.join("manifest.csv"), merged.to_csv_string())?;
    write(&out_dir.join("agreement.csv"), agreement)?;
    write(&out_dir.join("pipeline.log"), log)?;
    sidecar
        .param("cases", cases.len())
        .param("failed", summary.failed.iter().map(|f| f.0.clone()).collect::<Vec<_>>())
        .write_in(out_dir)?;
    Ok(summary)
}
