//! Component labeling, area filters and mask comparison. All component
//! operations use 8-connectivity, for foreground and background alike.

use crate::error::{Error, Result};
use crate::raster::{encode_png, BinaryMask};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub width: usize,
    pub height: usize,
    /// Row-major, 0 = background, components numbered 1..=K in scan order.
    pub labels: Vec<u32>,
    /// `component_areas[k - 1]` is the pixel count of component `k`.
    pub component_areas: Vec<usize>,
}

impl ComponentLabeling {
    pub fn count(&self) -> usize {
        self.component_areas.len()
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// Labels 8-connected components of pixels whose value equals `value`.
fn label_value(width: usize, height: usize, bits: &[bool], value: bool) -> ComponentLabeling {
    let mut labels = vec![0u32; width * height];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..bits.len() {
        if bits[start] != value || labels[start] != 0 {
            continue;
        }
        let id = areas.len() as u32 + 1;
        labels[start] = id;
        stack.push(start);
        let mut area = 0usize;
        while let Some(k) = stack.pop() {
            area += 1;
            let (x, y) = ((k % width) as i64, (k / width) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    let n = ny as usize * width + nx as usize;
                    if bits[n] == value && labels[n] == 0 {
                        labels[n] = id;
                        stack.push(n);
                    }
                }
            }
        }
        areas.push(area);
    }
    ComponentLabeling { width, height, labels, component_areas: areas }
}

pub fn connected_components(m: &BinaryMask) -> ComponentLabeling {
    label_value(m.width(), m.height(), m.bits(), true)
}

/// Clears foreground components smaller than `min_area_px`, then fills
/// background components that do not touch the canvas border and are smaller
/// than `min_area_px`.
pub fn remove_small_components(m: &BinaryMask, min_area_px: usize) -> BinaryMask {
    if min_area_px == 0 {
        return m.clone();
    }
    let (w, h) = (m.width(), m.height());
    let fg = connected_components(m);
    let mut bits: Vec<bool> = m
        .bits()
        .iter()
        .zip(&fg.labels)
        .map(|(&b, &l)| b && fg.component_areas[l as usize - 1] >= min_area_px)
        .collect();

    let bg = label_value(w, h, &bits, false);
    let mut touches_border = vec![false; bg.count()];
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                let l = bg.labels[y * w + x];
                if l != 0 {
                    touches_border[l as usize - 1] = true;
                }
            }
        }
    }
    for (k, b) in bits.iter_mut().enumerate() {
        let l = bg.labels[k];
        if l != 0 && !touches_border[l as usize - 1] && bg.component_areas[l as usize - 1] < min_area_px {
            *b = true;
        }
    }
    BinaryMask::from_bits(w, h, m.resolution_um(), bits).expect("same shape")
}

/// Width in pixels of the outer band for a canvas dimension:
/// `⌈edge_fraction · size⌉`. The product is nudged down by a relative 1e-12
/// so values like `0.1 · 30` do not round up past an exact integer.
pub fn edge_band_px(size: usize, edge_fraction: f64) -> usize {
    let raw = edge_fraction * size as f64;
    (raw - raw.abs() * 1e-12).ceil().max(0.0) as usize
}

/// Removes components with strictly more than `area_fraction` of their pixels
/// in the outer band of width `edge_fraction` of the canvas size.
pub fn remove_edge_components(m: &BinaryMask, edge_fraction: f64, area_fraction: f64) -> Result<BinaryMask> {
    if !(edge_fraction > 0.0 && edge_fraction < 0.5) {
        return Err(Error::Invalid(format!("edge_fraction must lie in (0, 0.5), got {edge_fraction}")));
    }
    if !(0.0..=1.0).contains(&area_fraction) {
        return Err(Error::Invalid(format!("area_fraction must lie in [0, 1], got {area_fraction}")));
    }
    let (w, h) = (m.width(), m.height());
    let bx = edge_band_px(w, edge_fraction);
    let by = edge_band_px(h, edge_fraction);
    let in_band = |x: usize, y: usize| x < bx || x + bx >= w || y < by || y + by >= h;

    let cc = connected_components(m);
    let mut band_counts = vec![0usize; cc.count()];
    for y in 0..h {
        for x in 0..w {
            let l = cc.label(x, y);
            if l != 0 && in_band(x, y) {
                band_counts[l as usize - 1] += 1;
            }
        }
    }
    let remove: Vec<bool> = band_counts
        .iter()
        .zip(&cc.component_areas)
        .map(|(&b, &a)| b as f64 > area_fraction * a as f64)
        .collect();
    let bits = cc
        .labels
        .iter()
        .map(|&l| l != 0 && !remove[l as usize - 1])
        .collect();
    BinaryMask::from_bits(w, h, m.resolution_um(), bits)
}

/// Keeps only the components whose label (1-based) is in `keep`.
pub fn keep_components(cc: &ComponentLabeling, keep: &[u32], resolution_um: f64) -> BinaryMask {
    let mut flags = vec![false; cc.count() + 1];
    for &k in keep {
        flags[k as usize] = true;
    }
    let bits = cc.labels.iter().map(|&l| l != 0 && flags[l as usize]).collect();
    BinaryMask::from_bits(cc.width, cc.height, resolution_um, bits).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlapCounts {
    pub a: usize,
    pub b: usize,
    pub both: usize,
}

pub fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> Result<OverlapCounts> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{}@{} vs {}x{}@{}",
            a.width(),
            a.height(),
            a.resolution_um(),
            b.width(),
            b.height(),
            b.resolution_um()
        )));
    }
    let mut c = OverlapCounts { a: 0, b: 0, both: 0 };
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        c.a += x as usize;
        c.b += y as usize;
        c.both += (x && y) as usize;
    }
    Ok(c)
}

impl OverlapCounts {
    /// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
    pub fn dice(&self) -> f64 {
        if self.a + self.b == 0 {
            1.0
        } else {
            2.0 * self.both as f64 / (self.a + self.b) as f64
        }
    }

    /// `|A∩B| / |A∪B|`, 1 when both are empty.
    pub fn jaccard(&self) -> f64 {
        let union = self.a + self.b - self.both;
        if union == 0 {
            1.0
        } else {
            self.both as f64 / union as f64
        }
    }
}

pub fn mask_dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(overlap_counts(a, b)?.dice())
}

pub fn mask_jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(overlap_counts(a, b)?.jaccard())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

pub const GREEN: [u8; 3] = [0, 200, 0];
pub const RED: [u8; 3] = [220, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 220];
pub const WHITE: [u8; 3] = [255, 255, 255];

impl RgbImage {
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let data: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        encode_png(self.width, self.height, png::ColorType::Rgb, &data)
    }

    /// RGBA bytes, e.g. for a canvas `ImageData`.
    pub fn to_rgba(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }
}

/// Agreement overlay: green where both masks are set, red where only `a`
/// (the IHC-specific / first source) is set, blue where only `b` is set.
pub fn overlay_rgb(a: &BinaryMask, b: &BinaryMask) -> Result<RgbImage> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let pixels = a
        .bits()
        .iter()
        .zip(b.bits())
        .map(|(&x, &y)| match (x, y) {
            (true, true) => GREEN,
            (true, false) => RED,
            (false, true) => BLUE,
            (false, false) => WHITE,
        })
        .collect();
    Ok(RgbImage { width: a.width(), height: a.height(), pixels })
}
