//! Dense displacement fields and vertex warping from the source (H&E) frame
//! to the target (IHC) frame.
//!
//! Grid node `(i, j)` sits at `(i · spacing_um, j · spacing_um)` in the source
//! frame. Displacements are stored in field pixels and point forward, so a
//! source point `p` maps to `p + spacing_um · d(p)`.

use crate::error::{Error, Result};
use crate::model::{AnnotationSet, PointUm, Polygon, Region};

pub const FIELD_MAGIC: &[u8; 4] = b"WDF1";
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    grid_w: usize,
    grid_h: usize,
    spacing_um: f64,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl DeformationField {
    pub fn new(grid_w: usize, grid_h: usize, spacing_um: f64, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self> {
        if grid_w < 2 || grid_h < 2 {
            return Err(Error::Field(format!("grid must be at least 2x2, got {grid_w}x{grid_h}")));
        }
        if grid_w > u32::MAX as usize || grid_h > u32::MAX as usize {
            return Err(Error::Field("grid dimensions exceed u32".into()));
        }
        if !(spacing_um.is_finite() && spacing_um > 0.0) {
            return Err(Error::Field(format!("spacing_um must be positive, got {spacing_um}")));
        }
        let n = grid_w * grid_h;
        if dx.len() != n || dy.len() != n {
            return Err(Error::Field(format!(
                "expected {n} values per plane, got dx={} dy={}",
                dx.len(),
                dy.len()
            )));
        }
        for (plane, values) in [("dx", &dx), ("dy", &dy)] {
            if let Some(k) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Field(format!(
                    "non-finite {plane} at grid index ({}, {})",
                    k % grid_w,
                    k / grid_w
                )));
            }
        }
        Ok(Self { grid_w, grid_h, spacing_um, dx, dy })
    }

    pub fn zero(grid_w: usize, grid_h: usize, spacing_um: f64) -> Result<Self> {
        let n = grid_w * grid_h;
        Self::new(grid_w, grid_h, spacing_um, vec![0.0; n], vec![0.0; n])
    }

    pub fn constant(grid_w: usize, grid_h: usize, spacing_um: f64, dx: f32, dy: f32) -> Result<Self> {
        let n = grid_w * grid_h;
        Self::new(grid_w, grid_h, spacing_um, vec![dx; n], vec![dy; n])
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn spacing_um(&self) -> f64 {
        self.spacing_um
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    /// Displacement at node `(i, j)` in field pixels.
    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        let k = j * self.grid_w + i;
        (self.dx[k] as f64, self.dy[k] as f64)
    }

    /// Bilinearly interpolated displacement in field pixels at field
    /// coordinates `(fx, fy)`. Coordinates outside the grid clamp to the
    /// nearest edge first.
    pub fn interpolate(&self, fx: f64, fy: f64) -> (f64, f64) {
        let max_x = (self.grid_w - 1) as f64;
        let max_y = (self.grid_h - 1) as f64;
        let fx = fx.clamp(0.0, max_x);
        let fy = fy.clamp(0.0, max_y);
        let i0 = (fx.floor() as usize).min(self.grid_w - 2);
        let j0 = (fy.floor() as usize).min(self.grid_h - 2);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let (a00, b00) = self.node(i0, j0);
        let (a10, b10) = self.node(i0 + 1, j0);
        let (a01, b01) = self.node(i0, j0 + 1);
        let (a11, b11) = self.node(i0 + 1, j0 + 1);
        let lerp2 = |v00: f64, v10: f64, v01: f64, v11: f64| {
            let top = v00 + (v10 - v00) * tx;
            let bottom = v01 + (v11 - v01) * tx;
            top + (bottom - top) * ty
        };
        (lerp2(a00, a10, a01, a11), lerp2(b00, b10, b01, b11))
    }

    /// Largest displacement magnitude over all nodes, in micrometres.
    pub fn max_displacement_um(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(&x, &y)| (x as f64).hypot(y as f64))
            .fold(0.0, f64::max)
            * self.spacing_um
    }
}

/// Serializes to the `WDF1` binary format.
pub fn save_field(field: &DeformationField) -> Vec<u8> {
    let n = field.grid_w * field.grid_h;
    let mut out = Vec::with_capacity(HEADER_LEN + n * 8);
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&(field.grid_w as u32).to_le_bytes());
    out.extend_from_slice(&(field.grid_h as u32).to_le_bytes());
    out.extend_from_slice(&field.spacing_um.to_le_bytes());
    for v in field.dx.iter().chain(&field.dy) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_field(bytes: &[u8]) -> Result<DeformationField> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Field(format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != FIELD_MAGIC {
        return Err(Error::Field(format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let grid_w = u32_at(4);
    let grid_h = u32_at(8);
    let spacing_um = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = grid_w
        .checked_mul(grid_h)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Field("grid size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Field(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Field(format!(
            "trailing data: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let n = grid_w * grid_h;
    let dy = floats[n..].to_vec();
    let mut dx = floats;
    dx.truncate(n);
    DeformationField::new(grid_w, grid_h, spacing_um, dx, dy)
}

/// Plain-text field: `grid_w grid_h spacing_um` on the first line, then all
/// dx values, then all dy values, whitespace separated and row-major.
pub fn load_field_text(text: &str) -> Result<DeformationField> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Field("empty text field".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 {
        return Err(Error::Field(format!("header needs 3 values, got {}", h.len())));
    }
    let parse_dim = |s: &str| s.parse::<usize>().map_err(|e| Error::Field(format!("bad dimension {s:?}: {e}")));
    let grid_w = parse_dim(h[0])?;
    let grid_h = parse_dim(h[1])?;
    let spacing_um: f64 = h[2]
        .parse()
        .map_err(|e| Error::Field(format!("bad spacing {:?}: {e}", h[2])))?;
    let values = lines
        .flat_map(str::split_whitespace)
        .map(|s| s.parse::<f32>().map_err(|e| Error::Field(format!("bad value {s:?}: {e}"))))
        .collect::<Result<Vec<f32>>>()?;
    let n = grid_w * grid_h;
    if values.len() != 2 * n {
        return Err(Error::Field(format!("expected {} values, found {}", 2 * n, values.len())));
    }
    DeformationField::new(grid_w, grid_h, spacing_um, values[..n].to_vec(), values[n..].to_vec())
}

/// Loads either format, picking by magic.
pub fn load_field_any(bytes: &[u8]) -> Result<DeformationField> {
    if bytes.starts_with(FIELD_MAGIC) {
        load_field(bytes)
    } else {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::Field("neither WDF1 binary nor UTF-8 text".into()))?;
        load_field_text(text)
    }
}

pub fn displace_point(field: &DeformationField, pt: PointUm) -> PointUm {
    let s = field.spacing_um;
    let (dx, dy) = field.interpolate(pt.x / s, pt.y / s);
    PointUm::new(pt.x + s * dx, pt.y + s * dy)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WarpOptions {
    /// Insert vertices so no edge is longer than this before warping.
    /// `None` transforms the original vertices only.
    pub densify_max_edge_um: Option<f64>,
}

pub fn warp_polygon(field: &DeformationField, p: &Polygon) -> Polygon {
    p.map_vertices(|v| displace_point(field, v))
        .expect("warping finite vertices through a finite field keeps them finite")
}

pub fn warp_polygon_with(field: &DeformationField, p: &Polygon, opts: WarpOptions) -> Polygon {
    match opts.densify_max_edge_um {
        Some(max_edge) if max_edge > 0.0 => {
            let outer = densify_ring(p.outer(), max_edge);
            let holes = p.holes().iter().map(|h| densify_ring(h, max_edge)).collect();
            let dense = Polygon::new(outer, holes).expect("densified ring keeps its vertices");
            warp_polygon(field, &dense)
        }
        _ => warp_polygon(field, p),
    }
}

fn densify_ring(ring: &[PointUm], max_edge: f64) -> Vec<PointUm> {
    let n = ring.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        out.push(a);
        let len = (b.x - a.x).hypot(b.y - a.y);
        let pieces = (len / max_edge).ceil() as usize;
        for k in 1..pieces {
            let t = k as f64 / pieces as f64;
            out.push(PointUm::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t));
        }
    }
    out
}

pub fn warp_annotation_set(field: &DeformationField, a: &AnnotationSet, target_slide_id: &str) -> Result<AnnotationSet> {
    warp_annotation_set_with(field, a, target_slide_id, WarpOptions::default())
}

pub fn warp_annotation_set_with(
    field: &DeformationField,
    a: &AnnotationSet,
    target_slide_id: &str,
    opts: WarpOptions,
) -> Result<AnnotationSet> {
    let regions = a
        .regions
        .iter()
        .map(|r| Region { class: r.class, polygon: warp_polygon_with(field, &r.polygon, opts) })
        .collect();
    AnnotationSet::new(target_slide_id, regions)
}
