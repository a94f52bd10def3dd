//! Synthetic slide pairs, deformation fields and tile predictions with known
//! ground truth.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::deform::{warp_annotation_set, warp_polygon, DeformationField};
use crate::error::{invalid, Error, Result};
use crate::metrics::{auroc, mask_dims, PredictionRow, PredictionTable};
use crate::model::{AnnotationSet, CaseRecord, ClassLabel, PointUm, Polygon, Region};
use crate::morph::mask_dice;
use crate::raster::{rasterize_class, BinaryMask};
use crate::rng::{self, derive_seed};
use crate::tissue::{LabelColumn, TileManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_cases: usize,
    pub slide_extent_um: (f64, f64),
    pub n_regions: usize,
    pub target_annotation_dice: (f64, f64),
    pub max_displacement_um: f64,
    pub field_spacing_um: f64,
    /// Probability that a registered region is missing from the IHC
    /// annotations.
    pub dropout_prob: f64,
    /// Small extra tissue components on the IHC slide.
    pub control_patches: usize,
    /// Isolated foreground pixels added to, and background pixels punched
    /// into, each raw tissue mask.
    pub salt_pixels: usize,
    pub tissue_resolution_um: f64,
    /// Resolution at which annotation agreement is measured.
    pub mask_resolution_um: f64,
    pub ki67_missing_prob: f64,
    pub score_noise_sigma: f64,
    pub auroc_target: Option<f64>,
    pub n_models: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_cases: 3,
            slide_extent_um: (8000.0, 6000.0),
            n_regions: 3,
            target_annotation_dice: (0.80, 0.86),
            max_displacement_um: 60.0,
            field_spacing_um: 500.0,
            dropout_prob: 0.0,
            control_patches: 2,
            salt_pixels: 40,
            tissue_resolution_um: 3.64,
            mask_resolution_um: 7.264,
            ki67_missing_prob: 0.0,
            score_noise_sigma: 0.3,
            auroc_target: Some(0.974),
            n_models: 10,
        }
    }
}

impl SynthSpec {
    /// A configuration under which IHC annotations equal the H&E
    /// annotations and the field is zero.
    pub fn identity(seed: u64) -> Self {
        Self {
            seed,
            target_annotation_dice: (1.0, 1.0),
            max_displacement_um: 0.0,
            dropout_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.slide_extent_um;
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(invalid(format!("slide extent must be positive, got {w}x{h}")));
        }
        let (lo, hi) = self.target_annotation_dice;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(invalid(format!("dice band [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")));
        }
        if !(self.max_displacement_um.is_finite() && self.max_displacement_um >= 0.0) {
            return Err(invalid("max_displacement_um must be finite and non-negative"));
        }
        for (name, v) in [
            ("field_spacing_um", self.field_spacing_um),
            ("tissue_resolution_um", self.tissue_resolution_um),
            ("mask_resolution_um", self.mask_resolution_um),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("dropout_prob", self.dropout_prob), ("ki67_missing_prob", self.ki67_missing_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.score_noise_sigma.is_finite() && self.score_noise_sigma >= 0.0) {
            return Err(invalid("score_noise_sigma must be finite and non-negative"));
        }
        if let Some(t) = self.auroc_target {
            if !(0.5..=1.0).contains(&t) {
                return Err(invalid(format!("auroc_target must lie in [0.5, 1], got {t}")));
            }
        }
        if self.n_models == 0 {
            return Err(invalid("n_models must be positive"));
        }
        Ok(())
    }
}

/// Parameters and measurements behind one generated case.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub case_index: u64,
    pub case_seed: u64,
    pub case_id: String,
    pub field_grid: (usize, usize),
    pub field_max_displacement_um: f64,
    pub perturbation_scale: f64,
    pub search_iterations: usize,
    pub dropped_regions: Vec<usize>,
    pub achieved_annotation_dice: f64,
    pub he_tissue_components: usize,
    pub control_patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub case: CaseRecord,
    pub he_annotations: AnnotationSet,
    pub ihc_annotations: AnnotationSet,
    /// H&E annotations warped into the IHC frame without perturbation.
    pub registered_annotations: AnnotationSet,
    pub field: DeformationField,
    pub he_tissue: BinaryMask,
    pub ihc_tissue: BinaryMask,
    pub truth: SynthTruth,
}

// per-case stream numbers
const GEOMETRY: u64 = 0;
const FIELD: u64 = 1;
const PERTURB: u64 = 2;
const TISSUE: u64 = 3;
const CLINICAL: u64 = 4;

const BLOB_VERTICES: usize = 48;

/// Star-shaped ring: radius `r · (1 + Σ a_h cos(hθ + φ_h))`.
fn star_ring(rng: &mut rng::Rng, cx: f64, cy: f64, rx: f64, ry: f64, roughness: f64) -> Vec<PointUm> {
    let harmonics: Vec<(f64, f64)> =
        (2..=4).map(|_| (rng.random_range(0.0..roughness), rng.random_range(0.0..TAU))).collect();
    (0..BLOB_VERTICES)
        .map(|k| {
            let t = TAU * k as f64 / BLOB_VERTICES as f64;
            let f = 1.0 + harmonics.iter().enumerate().map(|(i, (a, p))| a * ((i + 2) as f64 * t + p).cos()).sum::<f64>();
            PointUm::new(cx + rx * f * t.cos(), cy + ry * f * t.sin())
        })
        .collect()
}

/// Displacement field built from a few Gaussian bumps with unit-weighted
/// directions, scaled so no node moves more than `max_displacement_um`.
/// Bump widths are at least a quarter of the smaller grid side, which bounds
/// the difference between adjacent nodes by
/// `max_displacement_um / spacing_um / (σ_min · √e)` field pixels.
pub fn gen_smooth_field(
    seed: u64,
    grid_w: usize,
    grid_h: usize,
    spacing_um: f64,
    max_displacement_um: f64,
) -> Result<DeformationField> {
    if max_displacement_um == 0.0 {
        return DeformationField::zero(grid_w, grid_h, spacing_um);
    }
    if !(max_displacement_um.is_finite() && max_displacement_um > 0.0) {
        return Err(invalid("max_displacement_um must be finite and non-negative"));
    }
    let mut rng = rng::stream(seed, 0);
    let bumps = 4;
    let sigma_min = smooth_field_sigma_min(grid_w, grid_h);
    let params: Vec<(f64, f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let cx = rng.random_range(0.0..grid_w as f64);
            let cy = rng.random_range(0.0..grid_h as f64);
            let sigma = rng.random_range(sigma_min..2.0 * sigma_min);
            let weight = rng.random_range(0.2..1.0);
            let angle = rng.random_range(0.0..TAU);
            (cx, cy, sigma, weight, angle)
        })
        .collect();
    let total: f64 = params.iter().map(|p| p.3).sum();
    // keep the f32-rounded field under the bound
    let scale = max_displacement_um / spacing_um / total * (1.0 - 1e-6);
    let n = grid_w * grid_h;
    let (mut dx, mut dy) = (vec![0f32; n], vec![0f32; n]);
    for j in 0..grid_h {
        for i in 0..grid_w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for &(cx, cy, sigma, weight, angle) in &params {
                let d2 = (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                sx += weight * g * angle.cos();
                sy += weight * g * angle.sin();
            }
            dx[j * grid_w + i] = (scale * sx) as f32;
            dy[j * grid_w + i] = (scale * sy) as f32;
        }
    }
    DeformationField::new(grid_w, grid_h, spacing_um, dx, dy)
}

/// Smallest bump width used by [`gen_smooth_field`], in field pixels.
pub fn smooth_field_sigma_min(grid_w: usize, grid_h: usize) -> f64 {
    (0.25 * grid_w.min(grid_h) as f64).max(0.5)
}

/// Rasterized invasive-cancer Dice between two annotation sets over a slide.
pub fn annotation_dice(a: &AnnotationSet, b: &AnnotationSet, extent_um: (f64, f64), resolution_um: f64) -> Result<f64> {
    let (w, h) = mask_dims(extent_um, resolution_um);
    let ma = rasterize_class(a, ClassLabel::InvasiveCancer, resolution_um, w, h)?;
    let mb = rasterize_class(b, ClassLabel::InvasiveCancer, resolution_um, w, h)?;
    mask_dice(&ma, &mb)
}

/// Fixed random shape of a region's annotation disagreement; the scale
/// is applied later.
struct RegionNoise {
    harmonics: Vec<(f64, f64)>,
    shift: (f64, f64),
}

fn region_noise(rng: &mut rng::Rng) -> RegionNoise {
    let harmonics = (1..=3).map(|h| (rng.random_range(-1.0..1.0) / h as f64, rng.random_range(0.0..TAU))).collect();
    let a = rng.random_range(0.0..TAU);
    let m = rng.random_range(0.0..0.5);
    RegionNoise { harmonics, shift: (m * a.cos(), m * a.sin()) }
}

fn centroid(ring: &[PointUm]) -> (PointUm, f64) {
    let n = ring.len() as f64;
    let cx = ring.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = ring.iter().map(|p| p.y).sum::<f64>() / n;
    let r = ring.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    (PointUm::new(cx, cy), r)
}

fn perturb(base: &AnnotationSet, noise: &[RegionNoise], keep: &[bool], s: f64, slide_id: &str) -> Result<AnnotationSet> {
    if s == 0.0 {
        let regions = base.regions.iter().zip(keep).filter(|(_, &k)| k).map(|(r, _)| r.clone()).collect();
        return AnnotationSet::new(slide_id, regions);
    }
    let mut regions = Vec::new();
    for ((region, nz), &k) in base.regions.iter().zip(noise).zip(keep) {
        if !k {
            continue;
        }
        let (c, r) = centroid(region.polygon.outer());
        let polygon = region.polygon.map_vertices(|p| {
            let t = (p.y - c.y).atan2(p.x - c.x);
            let rho: f64 = nz.harmonics.iter().enumerate().map(|(h, (a, ph))| a * ((h + 1) as f64 * t + ph).cos()).sum();
            let f = (1.0 + s * rho).max(0.05);
            PointUm::new(c.x + (p.x - c.x) * f + s * r * nz.shift.0, c.y + (p.y - c.y) * f + s * r * nz.shift.1)
        })?;
        regions.push(Region { class: region.class, polygon });
    }
    AnnotationSet::new(slide_id, regions)
}

fn in_band(d: f64, band: (f64, f64)) -> bool {
    d >= band.0 && d <= band.1
}

struct Search {
    scale: f64,
    iterations: usize,
    dice: f64,
    annotations: AnnotationSet,
}

/// Finds a perturbation scale whose annotation Dice lies in `band`: doubles
/// the scale until Dice drops below the band, then bisects. At most 200
/// evaluations.
fn search_band(
    registered: &AnnotationSet,
    noise: &[RegionNoise],
    keep: &[bool],
    slide_id: &str,
    band: (f64, f64),
    extent: (f64, f64),
    res: f64,
) -> Result<Search> {
    const MAX_ITERATIONS: usize = 200;
    let eval = |s: f64| -> Result<(f64, AnnotationSet)> {
        let a = perturb(registered, noise, keep, s, slide_id)?;
        let d = annotation_dice(registered, &a, extent, res)?;
        Ok((d, a))
    };
    let mut iterations = 1;
    let (d0, a0) = eval(0.0)?;
    if in_band(d0, band) {
        return Ok(Search { scale: 0.0, iterations, dice: d0, annotations: a0 });
    }
    if d0 < band.0 {
        return Err(Error::Synth(format!(
            "dice band [{}, {}] unreachable: unperturbed dice is {d0:.4}",
            band.0, band.1
        )));
    }
    let (mut lo, mut hi) = (0.0, 0.05);
    let mut seen = (d0, d0);
    while iterations < MAX_ITERATIONS {
        let (d, a) = eval(hi)?;
        iterations += 1;
        seen = (seen.0.min(d), seen.1.max(d));
        if in_band(d, band) {
            return Ok(Search { scale: hi, iterations, dice: d, annotations: a });
        }
        if d < band.0 {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > 64.0 {
            return Err(Error::Synth(format!(
                "dice band [{}, {}] unreachable: achieved [{:.4}, {:.4}]",
                band.0, band.1, seen.0, seen.1
            )));
        }
    }
    while iterations < MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let (d, a) = eval(mid)?;
        iterations += 1;
        seen = (seen.0.min(d), seen.1.max(d));
        if in_band(d, band) {
            return Ok(Search { scale: mid, iterations, dice: d, annotations: a });
        }
        if d > band.1 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Synth(format!(
        "dice band [{}, {}] not reached in {MAX_ITERATIONS} iterations: achieved [{:.4}, {:.4}]",
        band.0, band.1, seen.0, seen.1
    )))
}

fn add_salt_and_pepper(mask: &mut BinaryMask, rng: &mut rng::Rng, count: usize) {
    let (w, h) = (mask.width(), mask.height());
    for _ in 0..count {
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        mask.set(x, y, true);
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        mask.set(x, y, false);
    }
}

fn case_ids(index: u64) -> (String, String, String) {
    let case_id = format!("case{index:03}");
    (case_id.clone(), format!("{case_id}_HE"), format!("{case_id}_KI67"))
}

/// Generates case `case_index` of the cohort described by `spec`. Every
/// random quantity comes from streams of `derive_seed(spec.seed, case_index)`.
pub fn gen_case(spec: &SynthSpec, case_index: u64) -> Result<SynthCase> {
    spec.validate()?;
    let case_seed = derive_seed(spec.seed, case_index);
    let (case_id, he_id, ihc_id) = case_ids(case_index);
    let (w, h) = spec.slide_extent_um;
    let m = w.min(h);

    // specimen on the left two thirds, control patches to its right
    let mut geo = rng::stream(case_seed, GEOMETRY);
    let (sx, sy, srx, sry) = (0.40 * w, 0.5 * h, 0.25 * w, 0.34 * h);
    let specimen = Polygon::simple(star_ring(&mut geo, sx, sy, srx, sry, 0.04))?;
    let mut regions = Vec::with_capacity(spec.n_regions);
    for _ in 0..spec.n_regions {
        let t = geo.random_range(0.0..TAU);
        let u = geo.random_range(0.0..0.55);
        let (cx, cy) = (sx + u * srx * t.cos(), sy + u * sry * t.sin());
        let r = geo.random_range(0.10..0.16) * m;
        let aspect = geo.random_range(0.75..1.25);
        let ring = star_ring(&mut geo, cx, cy, r * aspect, r / aspect, 0.08);
        regions.push(Region { class: ClassLabel::InvasiveCancer, polygon: Polygon::simple(ring)? });
    }
    let he_annotations = AnnotationSet::new(&he_id, regions)?;

    let grid_w = (w / spec.field_spacing_um).ceil() as usize + 1;
    let grid_h = (h / spec.field_spacing_um).ceil() as usize + 1;
    let field = gen_smooth_field(
        derive_seed(case_seed, FIELD),
        grid_w.max(2),
        grid_h.max(2),
        spec.field_spacing_um,
        spec.max_displacement_um,
    )?;
    let registered = warp_annotation_set(&field, &he_annotations, &ihc_id)?;

    let mut pr = rng::stream(case_seed, PERTURB);
    let noise: Vec<RegionNoise> = registered.regions.iter().map(|_| region_noise(&mut pr)).collect();
    let keep: Vec<bool> = registered.regions.iter().map(|_| !pr.random_bool(spec.dropout_prob)).collect();
    let dropped: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect();
    let search = search_band(
        &registered,
        &noise,
        &keep,
        &ihc_id,
        spec.target_annotation_dice,
        spec.slide_extent_um,
        spec.mask_resolution_um,
    )?;

    let tres = spec.tissue_resolution_um;
    let (tw, th) = mask_dims(spec.slide_extent_um, tres);
    let he_specimen =
        AnnotationSet::new(&he_id, vec![Region { class: ClassLabel::Tissue, polygon: specimen.clone() }])?;
    let mut he_tissue = rasterize_class(&he_specimen, ClassLabel::Tissue, tres, tw, th)?;
    let mut ihc_regions = vec![Region { class: ClassLabel::Tissue, polygon: warp_polygon(&field, &specimen) }];
    let mut tn = rng::stream(case_seed, TISSUE);
    for k in 0..spec.control_patches {
        let cy = h * (k as f64 + 1.0) / (spec.control_patches as f64 + 1.0);
        let r = 0.035 * m;
        let ring = star_ring(&mut tn, 0.80 * w, cy, r, r, 0.05);
        ihc_regions.push(Region { class: ClassLabel::Tissue, polygon: Polygon::simple(ring)? });
    }
    let ihc_specimen = AnnotationSet::new(&ihc_id, ihc_regions)?;
    let mut ihc_tissue = rasterize_class(&ihc_specimen, ClassLabel::Tissue, tres, tw, th)?;
    add_salt_and_pepper(&mut he_tissue, &mut tn, spec.salt_pixels);
    add_salt_and_pepper(&mut ihc_tissue, &mut tn, spec.salt_pixels);

    let mut clinical = rng::stream(case_seed, CLINICAL);
    let score: f64 = clinical.random_range(0.0..100.0);
    let ki67 = (!clinical.random_bool(spec.ki67_missing_prob)).then_some((score * 10.0).round() / 10.0);
    let case = CaseRecord::new(&case_id, &he_id, &ihc_id, ki67)?;

    let truth = SynthTruth {
        spec: spec.clone(),
        case_index,
        case_seed,
        case_id,
        field_grid: (field.grid_w(), field.grid_h()),
        field_max_displacement_um: field.max_displacement_um(),
        perturbation_scale: search.scale,
        search_iterations: search.iterations,
        dropped_regions: dropped,
        achieved_annotation_dice: search.dice,
        he_tissue_components: 1,
        control_patches: spec.control_patches,
    };
    Ok(SynthCase {
        case,
        he_annotations,
        ihc_annotations: search.annotations,
        registered_annotations: registered,
        field,
        he_tissue,
        ihc_tissue,
        truth,
    })
}

pub fn truth_json(truth: &SynthTruth) -> String {
    let mut s = serde_json::to_string_pretty(truth).expect("truth serializes");
    s.push('\n');
    s
}

/// Result of a prediction generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPredictions {
    pub table: PredictionTable,
    pub sigma: f64,
    /// Pooled AUROC of the ensemble-averaged scores.
    pub pooled_auroc: f64,
}

const AUROC_TOLERANCE: f64 = 0.01;

/// Base-model scores `clip(label + σ z)` with independent standard normal `z`
/// per tile and model (model `m` draws from stream `m` of `seed`), tiles in
/// manifest order. σ is bisected until the pooled AUROC of the
/// ensemble-averaged scores is within 0.01 of `auroc_target` (searching for a
/// value within a fifth of that). A target of 0.5 yields uniform scores that
/// ignore the labels.
pub fn gen_predictions(
    manifest: &TileManifest,
    column: LabelColumn,
    auroc_target: f64,
    seed: u64,
    n_models: usize,
) -> Result<GeneratedPredictions> {
    if !(0.5..=1.0).contains(&auroc_target) {
        return Err(invalid(format!("auroc_target must lie in [0.5, 1], got {auroc_target}")));
    }
    if n_models == 0 {
        return Err(invalid("n_models must be positive"));
    }
    if manifest.records.is_empty() {
        return Err(invalid("manifest has no tiles"));
    }
    let labels: Vec<u8> = manifest
        .records
        .iter()
        .map(|r| {
            r.label(column).ok_or_else(|| {
                invalid(format!("tile ({}, {}, {}) has no {} label", r.slide_id, r.tile_x, r.tile_y, column.name()))
            })
        })
        .collect::<Result<_>>()?;
    let n = labels.len();
    let build = |scores: Vec<Vec<f64>>| -> Result<PredictionTable> {
        let rows = manifest
            .records
            .iter()
            .enumerate()
            .map(|(t, r)| PredictionRow {
                slide_id: r.slide_id.clone(),
                tile_x: r.tile_x,
                tile_y: r.tile_y,
                scores: scores.iter().map(|m| m[t]).collect(),
            })
            .collect();
        PredictionTable::new(n_models, rows)
    };
    let pooled = |scores: &[Vec<f64>]| -> Result<f64> {
        let mean: Vec<f64> = (0..n).map(|t| scores.iter().map(|m| m[t]).sum::<f64>() / n_models as f64).collect();
        auroc(&labels, &mean)?.ok_or_else(|| invalid("pooled AUROC needs both classes in the manifest"))
    };

    if auroc_target == 0.5 {
        let scores: Vec<Vec<f64>> = (0..n_models as u64)
            .map(|m| {
                let mut r = rng::stream(seed, m);
                (0..n).map(|_| r.random::<f64>()).collect()
            })
            .collect();
        let achieved = pooled(&scores)?;
        return Ok(GeneratedPredictions { table: build(scores)?, sigma: f64::INFINITY, pooled_auroc: achieved });
    }

    let z: Vec<Vec<f64>> = (0..n_models as u64)
        .map(|m| {
            let mut r = rng::stream(seed, m);
            (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
        })
        .collect();
    let scores_at = |sigma: f64| -> Vec<Vec<f64>> {
        z.iter()
            .map(|zm| labels.iter().zip(zm).map(|(&l, &e)| (l as f64 + sigma * e).clamp(0.0, 1.0)).collect())
            .collect()
    };
    let goal = AUROC_TOLERANCE / 5.0;
    let mut best: Option<(f64, f64)> = None;
    let consider = |sigma: f64, a: f64, best: &mut Option<(f64, f64)>| {
        if best.is_none_or(|(_, b)| (a - auroc_target).abs() < (b - auroc_target).abs()) {
            *best = Some((sigma, a));
        }
    };
    let a0 = pooled(&scores_at(0.0))?;
    consider(0.0, a0, &mut best);
    if (a0 - auroc_target).abs() > goal {
        let (mut lo, mut hi) = (0.0, 0.1);
        let mut iterations = 0;
        loop {
            let a = pooled(&scores_at(hi))?;
            consider(hi, a, &mut best);
            iterations += 1;
            if a < auroc_target || hi > 1e3 || iterations >= 200 {
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        while iterations < 200 && best.is_some_and(|(_, b)| (b - auroc_target).abs() > goal) {
            let mid = 0.5 * (lo + hi);
            let a = pooled(&scores_at(mid))?;
            consider(mid, a, &mut best);
            iterations += 1;
            if a > auroc_target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let (sigma, achieved) = best.expect("evaluated at least once");
    if (achieved - auroc_target).abs() > AUROC_TOLERANCE {
        return Err(Error::Synth(format!(
            "AUROC target {auroc_target} unreachable: closest pooled AUROC {achieved:.4} at sigma {sigma}"
        )));
    }
    Ok(GeneratedPredictions { table: build(scores_at(sigma))?, sigma, pooled_auroc: achieved })
}

/// Scores `clip(label + sigma z)` at a fixed noise level.
pub fn gen_predictions_sigma(
    manifest: &TileManifest,
    column: LabelColumn,
    sigma: f64,
    seed: u64,
    n_models: usize,
) -> Result<PredictionTable> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(invalid("sigma must be finite and non-negative"));
    }
    let rows = (0..n_models as u64)
        .map(|m| {
            let mut r = rng::stream(seed, m);
            manifest
                .records
                .iter()
                .map(|rec| {
                    let l = rec.label(column).ok_or_else(|| invalid("tile without label"))?;
                    let e: f64 = StandardNormal.sample(&mut r);
                    Ok((l as f64 + sigma * e).clamp(0.0, 1.0))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let table = manifest
        .records
        .iter()
        .enumerate()
        .map(|(t, rec)| PredictionRow {
            slide_id: rec.slide_id.clone(),
            tile_x: rec.tile_x,
            tile_y: rec.tile_y,
            scores: rows.iter().map(|m| m[t]).collect(),
        })
        .collect();
    PredictionTable::new(n_models, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec { seed, slide_extent_um: (4000.0, 3000.0), ..SynthSpec::default() }
    }

    #[test]
    fn identity_configuration() {
        let c = gen_case(&SynthSpec { slide_extent_um: (4000.0, 3000.0), ..SynthSpec::identity(4) }, 0).unwrap();
        assert_eq!(c.ihc_annotations.regions, c.he_annotations.regions);
        assert_eq!(c.ihc_annotations.slide_id(), c.case.ihc_slide_id);
        assert_eq!(c.truth.achieved_annotation_dice, 1.0);
    }

    #[test]
    fn band_is_reached_and_deterministic() {
        let spec = small_spec(11);
        let a = gen_case(&spec, 2).unwrap();
        let d = a.truth.achieved_annotation_dice;
        assert!((0.80..=0.86).contains(&d), "{d}");
        let measured = annotation_dice(&a.registered_annotations, &a.ihc_annotations, spec.slide_extent_um, 7.264).unwrap();
        assert_eq!(measured, d);
        assert_eq!(gen_case(&spec, 2).unwrap(), a);
        assert_ne!(gen_case(&spec, 3).unwrap().he_annotations, a.he_annotations);
    }

    #[test]
    fn unreachable_band_is_reported() {
        let spec = SynthSpec { target_annotation_dice: (0.0, 0.0), ..small_spec(1) };
        let err = gen_case(&spec, 0).unwrap_err();
        assert!(err.to_string().contains("achieved"), "{err}");
    }

    #[test]
    fn field_respects_bound() {
        let f = gen_smooth_field(3, 17, 13, 500.0, 60.0).unwrap();
        assert!(f.max_displacement_um() <= 60.0);
        assert!(f.max_displacement_um() > 1.0);
        assert_eq!(gen_smooth_field(3, 5, 5, 500.0, 0.0).unwrap(), DeformationField::zero(5, 5, 500.0).unwrap());
    }
}
