//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Outlines cross the boundary as flat `[x0, y0, x1, y1, ...]` arrays in
//! micrometres. Every function is plain Rust as well, so the crate tests
//! natively.

use annoreg::deform::{displace_point, warp_polygon};
use annoreg::metrics::{auroc, binarize, mask_dims, youden_threshold, Confusion};
use annoreg::model::{AnnotationSet, ClassLabel, PointUm, Polygon, Region};
use annoreg::morph::{overlap_counts, overlay_rgb};
use annoreg::raster::rasterize_class;
use annoreg::rng::stream;
use annoreg::synth::gen_smooth_field;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

const FIELD_SPACING_UM: f64 = 40.0;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn outline(xy: &[f64]) -> Result<Polygon, String> {
    if xy.len() % 2 != 0 {
        return Err("outline needs an even number of coordinates".into());
    }
    let pts = xy.chunks_exact(2).map(|c| PointUm::new(c[0], c[1])).collect();
    Polygon::simple(pts).map_err(|e| e.to_string())
}

fn flatten(p: &Polygon) -> Vec<f64> {
    p.outer().iter().flat_map(|v| [v.x, v.y]).collect()
}

#[wasm_bindgen]
pub struct Warped {
    outline: Vec<f64>,
    arrows: Vec<f64>,
    max_displacement_um: f64,
}

#[wasm_bindgen]
impl Warped {
    /// Warped outline, flat xy.
    #[wasm_bindgen(getter)]
    pub fn outline(&self) -> Vec<f64> {
        self.outline.clone()
    }

    /// Field node displacements as `[x, y, dx, dy, ...]` in micrometres.
    #[wasm_bindgen(getter)]
    pub fn arrows(&self) -> Vec<f64> {
        self.arrows.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn max_displacement_um(&self) -> f64 {
        self.max_displacement_um
    }
}

pub fn warp_outline_native(xy: &[f64], width_um: f64, height_um: f64, max_displacement_um: f64, seed: u32) -> Result<Warped, String> {
    let poly = outline(xy)?;
    let gw = (width_um / FIELD_SPACING_UM).ceil() as usize + 1;
    let gh = (height_um / FIELD_SPACING_UM).ceil() as usize + 1;
    let field = gen_smooth_field(seed as u64, gw.max(2), gh.max(2), FIELD_SPACING_UM, max_displacement_um)
        .map_err(|e| e.to_string())?;
    let mut arrows = Vec::with_capacity(gw * gh * 4);
    for j in 0..field.grid_h() {
        for i in 0..field.grid_w() {
            let p = PointUm::new(i as f64 * FIELD_SPACING_UM, j as f64 * FIELD_SPACING_UM);
            let q = displace_point(&field, p);
            arrows.extend([p.x, p.y, q.x - p.x, q.y - p.y]);
        }
    }
    Ok(Warped {
        outline: flatten(&warp_polygon(&field, &poly)),
        arrows,
        max_displacement_um: field.max_displacement_um(),
    })
}

/// Warps an outline through a smooth random field of the given amplitude.
#[wasm_bindgen]
pub fn warp_outline(xy: &[f64], width_um: f64, height_um: f64, max_displacement_um: f64, seed: u32) -> Result<Warped, JsError> {
    warp_outline_native(xy, width_um, height_um, max_displacement_um, seed).map_err(err)
}

#[wasm_bindgen]
pub struct Agreement {
    rgba: Vec<u8>,
    width: usize,
    height: usize,
    dice: f64,
    jaccard: f64,
}

#[wasm_bindgen]
impl Agreement {
    /// Overlay pixels for `ImageData`: green both, red first only, blue
    /// second only.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn dice(&self) -> f64 {
        self.dice
    }

    #[wasm_bindgen(getter)]
    pub fn jaccard(&self) -> f64 {
        self.jaccard
    }
}

pub fn compare_outlines_native(a: &[f64], b: &[f64], width_um: f64, height_um: f64, resolution_um: f64) -> Result<Agreement, String> {
    let set = |xy: &[f64]| -> Result<AnnotationSet, String> {
        let region = Region { class: ClassLabel::InvasiveCancer, polygon: outline(xy)? };
        AnnotationSet::new("demo", vec![region]).map_err(|e| e.to_string())
    };
    let (w, h) = mask_dims((width_um, height_um), resolution_um);
    let ma = rasterize_class(&set(a)?, ClassLabel::InvasiveCancer, resolution_um, w, h).map_err(|e| e.to_string())?;
    let mb = rasterize_class(&set(b)?, ClassLabel::InvasiveCancer, resolution_um, w, h).map_err(|e| e.to_string())?;
    let counts = overlap_counts(&ma, &mb).map_err(|e| e.to_string())?;
    let img = overlay_rgb(&ma, &mb).map_err(|e| e.to_string())?;
    Ok(Agreement { rgba: img.to_rgba(), width: w, height: h, dice: counts.dice(), jaccard: counts.jaccard() })
}

/// Rasterizes two outlines at `resolution_um` and measures their agreement.
#[wasm_bindgen]
pub fn compare_outlines(a: &[f64], b: &[f64], width_um: f64, height_um: f64, resolution_um: f64) -> Result<Agreement, JsError> {
    compare_outlines_native(a, b, width_um, height_um, resolution_um).map_err(err)
}

#[wasm_bindgen]
pub struct Calibration {
    auroc: f64,
    threshold: f64,
    j: f64,
    sensitivity: f64,
    specificity: f64,
    roc: Vec<f64>,
}

#[wasm_bindgen]
impl Calibration {
    #[wasm_bindgen(getter)]
    pub fn auroc(&self) -> f64 {
        self.auroc
    }

    #[wasm_bindgen(getter)]
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    #[wasm_bindgen(getter)]
    pub fn j(&self) -> f64 {
        self.j
    }

    #[wasm_bindgen(getter)]
    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    #[wasm_bindgen(getter)]
    pub fn specificity(&self) -> f64 {
        self.specificity
    }

    /// ROC curve as `[fpr, tpr, ...]`, from (1, 1) down to (0, 0).
    #[wasm_bindgen(getter)]
    pub fn roc(&self) -> Vec<f64> {
        self.roc.clone()
    }
}

pub fn calibrate_native(n_tiles: usize, prevalence: f64, sigma: f64, seed: u32) -> Result<Calibration, String> {
    if n_tiles < 2 {
        return Err("need at least two tiles".into());
    }
    if !(0.0..=1.0).contains(&prevalence) || !(sigma.is_finite() && sigma >= 0.0) {
        return Err("prevalence must lie in [0, 1] and sigma must be non-negative".into());
    }
    let mut rng = stream(seed as u64, 0);
    let mut labels: Vec<u8> = (0..n_tiles).map(|_| rng.random_bool(prevalence) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (l as f64 + sigma * z).clamp(0.0, 1.0)
        })
        .collect();
    let area = auroc(&labels, &scores).map_err(|e| e.to_string())?.expect("both classes present");
    let y = youden_threshold(&labels, &scores).map_err(|e| e.to_string())?;
    let c = Confusion::from_predictions(&labels, &binarize(&scores, y.threshold)).map_err(|e| e.to_string())?;
    let m = c.metrics();
    let (p, n) = ((c.tp + c.fn_) as f64, (c.tn + c.fp) as f64);
    let mut cuts: Vec<f64> = scores.clone();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.push(f64::INFINITY);
    let mut roc = Vec::with_capacity(cuts.len() * 2);
    for t in cuts {
        let k = Confusion::from_predictions(&labels, &binarize(&scores, t)).map_err(|e| e.to_string())?;
        roc.extend([k.fp as f64 / n, k.tp as f64 / p]);
    }
    Ok(Calibration {
        auroc: area,
        threshold: y.threshold,
        j: y.j,
        sensitivity: m.sensitivity.unwrap_or(f64::NAN),
        specificity: m.specificity.unwrap_or(f64::NAN),
        roc,
    })
}

/// Simulated tile scores `clip(label + sigma z)`, their AUROC and the Youden
/// threshold.
#[wasm_bindgen]
pub fn calibrate(n_tiles: usize, prevalence: f64, sigma: f64, seed: u32) -> Result<Calibration, JsError> {
    calibrate_native(n_tiles, prevalence, sigma, seed).map_err(err)
}
