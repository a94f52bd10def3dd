//! Tissue-mask cleanup, control-tissue exclusion, tiling and tile labels.

use std::cmp::Reverse;
use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{AnnotationSet, CaseRecord, ClassLabel};
use crate::morph::{connected_components, keep_components, remove_edge_components, remove_small_components};
use crate::raster::{covered_pixel_count, BinaryMask, Window};

pub fn clean_tissue_mask(
    raw: &BinaryMask,
    min_area_px: usize,
    edge_fraction: f64,
    area_fraction: f64,
) -> Result<BinaryMask> {
    let denoised = remove_small_components(raw, min_area_px);
    remove_edge_components(&denoised, edge_fraction, area_fraction)
}

/// Keeps as many of the largest IHC tissue regions as the H&E slide has
/// regions. Equal areas keep the region that comes first in scan order.
pub fn exclude_control_tissue(he_clean: &BinaryMask, ihc_clean: &BinaryMask) -> Result<BinaryMask> {
    let n = connected_components(he_clean).count();
    if n == 0 {
        return Err(invalid("H&E tissue mask has no tissue regions"));
    }
    let cc = connected_components(ihc_clean);
    if cc.count() <= n {
        return Ok(ihc_clean.clone());
    }
    let mut order: Vec<u32> = (1..=cc.count() as u32).collect();
    order.sort_by_key(|&l| (Reverse(cc.component_areas[l as usize - 1]), l));
    order.truncate(n);
    Ok(keep_components(&cc, &order, ihc_clean.resolution_um()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileParams {
    pub tile_size_px: usize,
    pub stride_px: usize,
    pub tile_resolution_um: f64,
    pub min_tissue_fraction: f64,
    pub min_cancer_fraction: f64,
}

impl Default for TileParams {
    fn default() -> Self {
        Self {
            tile_size_px: 598,
            stride_px: 598,
            tile_resolution_um: 0.454,
            min_tissue_fraction: 0.5,
            min_cancer_fraction: 0.5,
        }
    }
}

impl TileParams {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size_px == 0 || self.stride_px == 0 {
            return Err(invalid("tile size and stride must be positive"));
        }
        if !(self.tile_resolution_um.is_finite() && self.tile_resolution_um > 0.0) {
            return Err(invalid("tile resolution must be positive"));
        }
        for (name, v) in [
            ("min_tissue_fraction", self.min_tissue_fraction),
            ("min_cancer_fraction", self.min_cancer_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Tile edge length in micrometres.
    pub fn tile_extent_um(&self) -> f64 {
        self.tile_size_px as f64 * self.tile_resolution_um
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileCandidate {
    pub tile_x: usize,
    pub tile_y: usize,
    pub tissue_fraction: f64,
}

/// Absolute slack for threshold comparisons on accumulated fractions.
const FRACTION_EPS: f64 = 1e-12;

/// Number of grid positions along one axis whose tiles fit in `extent_um`.
fn positions(extent_um: f64, params: &TileParams) -> usize {
    let res = params.tile_resolution_um;
    let fits = |k: usize| ((k * params.stride_px + params.tile_size_px) as f64) * res <= extent_um * (1.0 + 1e-12);
    if !fits(0) {
        return 0;
    }
    let mut k = ((extent_um / res - params.tile_size_px as f64) / params.stride_px as f64).floor().max(0.0) as usize;
    while !fits(k) {
        k -= 1;
    }
    while fits(k + 1) {
        k += 1;
    }
    k + 1
}

/// Overlap lengths of `[lo, hi)` with mask cells `[i r, (i + 1) r)`, as
/// `(first_index, weights)`.
pub(crate) fn axis_weights(lo: f64, hi: f64, res: f64, cells: usize) -> (usize, Vec<f64>) {
    let first = ((lo / res).floor().max(0.0) as usize).min(cells);
    let last = ((hi / res).ceil().max(0.0) as usize).min(cells);
    let weights = (first..last)
        .map(|i| {
            let a = (i as f64 * res).max(lo);
            let b = ((i + 1) as f64 * res).min(hi);
            (b - a).max(0.0)
        })
        .collect();
    (first, weights)
}

/// Area-weighted tissue coverage of the square `[x0, x0 + side) × [y0, y0 + side)`
/// (µm). Area outside the mask counts as background.
pub fn footprint_fraction(tissue: &BinaryMask, x0: f64, y0: f64, side: f64) -> f64 {
    let res = tissue.resolution_um();
    let (cx, wx) = axis_weights(x0, x0 + side, res, tissue.width());
    let (cy, wy) = axis_weights(y0, y0 + side, res, tissue.height());
    let mut covered = 0.0;
    for (j, &h) in wy.iter().enumerate() {
        let mut row = 0.0;
        for (i, &w) in wx.iter().enumerate() {
            if tissue.get(cx + i, cy + j) {
                row += w;
            }
        }
        covered += row * h;
    }
    covered / (side * side)
}

/// Grid anchored at the origin; emits tiles fully inside the slide whose
/// tissue fraction is at least `min_tissue_fraction`, in row-major order.
pub fn tile_grid(slide_extent_um: (f64, f64), tissue: &BinaryMask, params: &TileParams) -> Result<Vec<TileCandidate>> {
    params.validate()?;
    let (w, h) = slide_extent_um;
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(invalid(format!("slide extent must be positive, got {w}x{h}")));
    }
    let nx = positions(w, params);
    let ny = positions(h, params);
    let side = params.tile_extent_um();
    let res = params.tile_resolution_um;
    let mut out = Vec::new();
    for l in 0..ny {
        for k in 0..nx {
            let tile_x = k * params.stride_px;
            let tile_y = l * params.stride_px;
            let fraction = footprint_fraction(tissue, tile_x as f64 * res, tile_y as f64 * res, side);
            if fraction >= params.min_tissue_fraction - FRACTION_EPS {
                out.push(TileCandidate { tile_x, tile_y, tissue_fraction: fraction.min(1.0) });
            }
        }
    }
    Ok(out)
}

/// Number of tile pixels whose centre lies inside `cls`.
pub fn tile_cancer_pixels(tile: (usize, usize), annotations: &AnnotationSet, cls: ClassLabel, params: &TileParams) -> usize {
    covered_pixel_count(
        annotations,
        cls,
        Window {
            x0: tile.0 as i64,
            y0: tile.1 as i64,
            width: params.tile_size_px,
            height: params.tile_size_px,
            resolution_um: params.tile_resolution_um,
        },
    )
}

/// 1 iff at least `min_cancer_fraction` of the tile's pixels are `cls`.
pub fn assign_tile_label(tile: (usize, usize), annotations: &AnnotationSet, cls: ClassLabel, params: &TileParams) -> u8 {
    let covered = tile_cancer_pixels(tile, annotations, cls, params);
    let total = params.tile_size_px * params.tile_size_px;
    (covered as f64 >= params.min_cancer_fraction * total as f64) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub slide_id: String,
    pub tile_x: usize,
    pub tile_y: usize,
    pub tissue_fraction: f64,
    pub label_ihc: Option<u8>,
    pub label_registered: Option<u8>,
}

/// Which label column acts as ground truth or training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelColumn {
    Ihc,
    Registered,
}

impl LabelColumn {
    pub fn name(self) -> &'static str {
        match self {
            LabelColumn::Ihc => "label_ihc",
            LabelColumn::Registered => "label_registered",
        }
    }
}

impl std::str::FromStr for LabelColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_ihc" | "ihc" => Ok(LabelColumn::Ihc),
            "label_registered" | "registered" => Ok(LabelColumn::Registered),
            _ => Err(invalid(format!("unknown label column {s:?}"))),
        }
    }
}

impl TileRecord {
    pub fn label(&self, column: LabelColumn) -> Option<u8> {
        match column {
            LabelColumn::Ihc => self.label_ihc,
            LabelColumn::Registered => self.label_registered,
        }
    }

    pub fn key(&self) -> (&str, usize, usize) {
        (&self.slide_id, self.tile_x, self.tile_y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileManifest {
    pub params: TileParams,
    pub records: Vec<TileRecord>,
}

impl TileManifest {
    pub fn new(params: TileParams, mut records: Vec<TileRecord>) -> Result<Self> {
        records.sort_by(|a, b| (&a.slide_id, a.tile_y, a.tile_x).cmp(&(&b.slide_id, b.tile_y, b.tile_x)));
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.key()) {
                return Err(invalid(format!(
                    "duplicate tile ({}, {}, {})",
                    r.slide_id, r.tile_x, r.tile_y
                )));
            }
        }
        Ok(Self { params, records })
    }

    /// Concatenates per-slide manifests built with the same parameters.
    pub fn merge(params: TileParams, parts: impl IntoIterator<Item = TileManifest>) -> Result<Self> {
        let mut records = Vec::new();
        for p in parts {
            if p.params != params {
                return Err(invalid("cannot merge manifests built with different tile parameters"));
            }
            records.extend(p.records);
        }
        Self::new(params, records)
    }

    pub fn slide_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.slide_id.as_str()).collect();
        ids.dedup();
        ids
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wtr.write_record(["slide_id", "tile_x", "tile_y", "tissue_fraction", "label_ihc", "label_registered"])?;
        let opt = |v: Option<u8>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.records {
            wtr.write_record([
                r.slide_id.clone(),
                r.tile_x.to_string(),
                r.tile_y.to_string(),
                format!("{:.6}", r.tissue_fraction),
                opt(r.label_ihc),
                opt(r.label_registered),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn read_csv<R: Read>(r: R, params: TileParams) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let expected = ["slide_id", "tile_x", "tile_y", "tissue_fraction", "label_ihc", "label_registered"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Csv(format!("unexpected manifest header {:?}", headers)));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let ctx = |what: &str| Error::Csv(format!("manifest row {}: bad {what}", line + 2));
            let label = |s: &str| -> Result<Option<u8>> {
                match s {
                    "" => Ok(None),
                    "0" => Ok(Some(0)),
                    "1" => Ok(Some(1)),
                    _ => Err(ctx("label")),
                }
            };
            let fraction: f64 = row[3].parse().map_err(|_| ctx("tissue_fraction"))?;
            if !(0.0..=1.0).contains(&fraction) {
                return Err(ctx("tissue_fraction"));
            }
            records.push(TileRecord {
                slide_id: row[0].to_string(),
                tile_x: row[1].parse().map_err(|_| ctx("tile_x"))?,
                tile_y: row[2].parse().map_err(|_| ctx("tile_y"))?,
                tissue_fraction: fraction,
                label_ihc: label(&row[4])?,
                label_registered: label(&row[5])?,
            });
        }
        Self::new(params, records)
    }
}

/// Tiles one IHC slide and labels every tile from both annotation sources.
/// The slide extent is the tissue mask's physical extent.
pub fn build_manifest(
    case: &CaseRecord,
    ihc_annotations: Option<&AnnotationSet>,
    registered_annotations: Option<&AnnotationSet>,
    tissue: &BinaryMask,
    params: &TileParams,
) -> Result<TileManifest> {
    for (what, a) in [("IHC", ihc_annotations), ("registered", registered_annotations)] {
        if let Some(a) = a {
            if a.slide_id() != case.ihc_slide_id {
                return Err(invalid(format!(
                    "{what} annotations belong to slide {:?}, expected {:?}",
                    a.slide_id(),
                    case.ihc_slide_id
                )));
            }
        }
    }
    let tiles = tile_grid(tissue.extent_um(), tissue, params)?;
    let label = |a: Option<&AnnotationSet>, t: &TileCandidate| {
        a.map(|a| assign_tile_label((t.tile_x, t.tile_y), a, ClassLabel::InvasiveCancer, params))
    };
    let records = tiles
        .iter()
        .map(|t| TileRecord {
            slide_id: case.ihc_slide_id.clone(),
            tile_x: t.tile_x,
            tile_y: t.tile_y,
            tissue_fraction: t.tissue_fraction,
            label_ihc: label(ihc_annotations, t),
            label_registered: label(registered_annotations, t),
        })
        .collect();
    TileManifest::new(*params, records)
}
