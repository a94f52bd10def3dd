//! Binary masks and polygon rasterization.
//!
//! A pixel `(i, j)` of a mask at resolution `r` is set iff its centre
//! `((i + 0.5) r, (j + 0.5) r)` lies inside the class polygons under the
//! even-odd rule. Scanlines use the same crossing arithmetic as
//! [`Polygon::contains`], so the two never disagree.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{edge_crossing_x, ring_edges, AnnotationSet, ClassLabel, Polygon};

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    resolution_um: f64,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, resolution_um: f64) -> Result<Self> {
        Self::from_bits(width, height, resolution_um, vec![false; width * height])
    }

    pub fn from_bits(width: usize, height: usize, resolution_um: f64, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Mask(format!("dimensions must be positive, got {width}x{height}")));
        }
        if !(resolution_um.is_finite() && resolution_um > 0.0) {
            return Err(Error::Mask(format!("resolution must be positive, got {resolution_um}")));
        }
        if bits.len() != width * height {
            return Err(Error::Mask(format!(
                "expected {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, resolution_um, bits })
    }

    /// Parses rows of `#` (set) and `.` (clear); handy in tests.
    pub fn from_ascii(rows: &[&str], resolution_um: f64) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Mask("ragged ascii rows".into()));
        }
        let bits = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
        Self::from_bits(width, height, resolution_um, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution_um(&self) -> f64 {
        self.resolution_um
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Physical extent `(w, h)` in micrometres.
    pub fn extent_um(&self) -> (f64, f64) {
        (self.width as f64 * self.resolution_um, self.height as f64 * self.resolution_um)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.resolution_um == other.resolution_um
    }

    pub fn transposed(&self) -> BinaryMask {
        let mut bits = vec![false; self.bits.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                bits[x * self.height + y] = self.get(x, y);
            }
        }
        BinaryMask { width: self.height, height: self.width, resolution_um: self.resolution_um, bits }
    }

    pub fn to_ascii(&self) -> String {
        self.bits
            .chunks(self.width)
            .map(|r| r.iter().map(|&b| if b { '#' } else { '.' }).collect::<String>())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Pixel window of a global raster at a given resolution. Pixel `(i, j)` of
/// the window is global pixel `(x0 + i, y0 + j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub x0: i64,
    pub y0: i64,
    pub width: usize,
    pub height: usize,
    pub resolution_um: f64,
}

#[inline]
fn center(k: i64, res: f64) -> f64 {
    (k as f64 + 0.5) * res
}

/// Calls `fill(row, i_start, i_end)` with half-open column spans of window
/// pixels covered by `polygon`.
fn polygon_spans(polygon: &Polygon, win: &Window, mut fill: impl FnMut(usize, usize, usize)) {
    let res = win.resolution_um;
    let (_, min_y, _, max_y) = polygon.bbox();
    let mut xs: Vec<f64> = Vec::new();
    let edges: Vec<_> = polygon.rings().flat_map(ring_edges).collect();
    for row in 0..win.height {
        let gy = win.y0 + row as i64;
        let cy = center(gy, res);
        if cy < min_y || cy > max_y {
            continue;
        }
        xs.clear();
        xs.extend(edges.iter().filter_map(|&(a, b)| edge_crossing_x(a, b, cy)));
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        // with k crossings sorted, a centre c is inside iff the number of
        // crossings strictly greater than c is odd
        let k = xs.len();
        let mut start = if k % 2 == 0 { 0 } else { usize::MAX };
        if start == usize::MAX {
            // an odd count cannot come from closed rings; fall back to counting
            for col in 0..win.width {
                let c = center(win.x0 + col as i64, res);
                let above = xs.iter().filter(|&&x| c < x).count();
                if above % 2 == 1 {
                    fill(row, col, col + 1);
                }
            }
            continue;
        }
        while start + 1 < k {
            let (lo, hi) = (xs[start], xs[start + 1]);
            let a = first_center_at_or_above(lo, win.x0, res) - win.x0;
            let b = first_center_at_or_above(hi, win.x0, res) - win.x0;
            let a = a.clamp(0, win.width as i64) as usize;
            let b = b.clamp(0, win.width as i64) as usize;
            if a < b {
                fill(row, a, b);
            }
            start += 2;
        }
    }
}

/// Smallest global pixel index `k` with `center(k) >= x`.
fn first_center_at_or_above(x: f64, x0: i64, res: f64) -> i64 {
    let mut k = (x / res - 0.5).ceil();
    if !k.is_finite() {
        k = x0 as f64;
    }
    let mut k = k as i64;
    while center(k - 1, res) >= x {
        k -= 1;
    }
    while center(k, res) < x {
        k += 1;
    }
    k
}

/// Rasterizes the union of `cls` polygons over a window.
pub fn rasterize_window(a: &AnnotationSet, cls: ClassLabel, win: Window) -> BinaryMask {
    let mut bits = vec![false; win.width * win.height];
    let (wx0, wy0) = (win.x0 as f64 * win.resolution_um, win.y0 as f64 * win.resolution_um);
    let (wx1, wy1) = (
        (win.x0 + win.width as i64) as f64 * win.resolution_um,
        (win.y0 + win.height as i64) as f64 * win.resolution_um,
    );
    for poly in a.polygons_of(cls) {
        let (bx0, by0, bx1, by1) = poly.bbox();
        if bx1 < wx0 || by1 < wy0 || bx0 > wx1 || by0 > wy1 {
            continue;
        }
        polygon_spans(poly, &win, |row, s, e| {
            bits[row * win.width + s..row * win.width + e].fill(true);
        });
    }
    BinaryMask { width: win.width, height: win.height, resolution_um: win.resolution_um, bits }
}

pub fn rasterize_class(
    a: &AnnotationSet,
    cls: ClassLabel,
    resolution_um: f64,
    width: usize,
    height: usize,
) -> Result<BinaryMask> {
    // validate dimensions before doing any work
    BinaryMask::new(width.max(1), height.max(1), resolution_um)?;
    if width == 0 || height == 0 {
        return Err(Error::Mask(format!("dimensions must be positive, got {width}x{height}")));
    }
    Ok(rasterize_window(a, cls, Window { x0: 0, y0: 0, width, height, resolution_um }))
}

/// Number of window pixels covered by the union of `cls` polygons.
pub fn covered_pixel_count(a: &AnnotationSet, cls: ClassLabel, win: Window) -> usize {
    rasterize_window(a, cls, win).count()
}

/// Writes an 8-bit grayscale PNG (0 / 255).
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let data: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_png(mask.width, mask.height, png::ColorType::Grayscale, &data)
}

pub(crate) fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Mask(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| Error::Mask(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes a PNG mask; any nonzero value in the first channel is foreground.
pub fn decode_mask_png(bytes: &[u8], resolution_um: f64) -> Result<BinaryMask> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Mask(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Mask("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Mask(format!("png: {e}")))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = (0..w * h)
        .map(|k| {
            let row = k / w;
            let col = k % w;
            buf[row * info.line_size + col * channels] != 0
        })
        .collect();
    BinaryMask::from_bits(w, h, resolution_um, bits)
}

/// Sidecar path carrying the mask resolution: `mask.png` → `mask.png.txt`.
pub fn sidecar_path(png_path: &Path) -> PathBuf {
    let mut s = png_path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

pub fn save_mask(mask: &BinaryMask, png_path: &Path) -> Result<()> {
    std::fs::write(png_path, encode_mask_png(mask)?)?;
    let mut f = std::fs::File::create(sidecar_path(png_path))?;
    writeln!(f, "resolution_um = {}", mask.resolution_um)?;
    Ok(())
}

pub fn parse_sidecar(text: &str) -> Result<f64> {
    for line in text.lines() {
        let line = line.trim();
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "resolution_um" {
                return v
                    .trim()
                    .parse()
                    .map_err(|e| Error::Mask(format!("bad resolution_um {v:?}: {e}")));
            }
        }
    }
    Err(Error::Mask("sidecar has no resolution_um".into()))
}

pub fn load_mask(png_path: &Path) -> Result<BinaryMask> {
    let side = sidecar_path(png_path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| Error::Mask(format!("{}: {e}", side.display())))?;
    let res = parse_sidecar(&text)?;
    let bytes = std::fs::read(png_path)
        .map_err(|e| Error::Mask(format!("{}: {e}", png_path.display())))?;
    decode_mask_png(&bytes, res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PointUm, Region};

    fn set_of(polys: Vec<Polygon>) -> AnnotationSet {
        AnnotationSet::new(
            "s",
            polys
                .into_iter()
                .map(|polygon| Region { class: ClassLabel::InvasiveCancer, polygon })
                .collect(),
        )
        .unwrap()
    }

    fn oracle(a: &AnnotationSet, res: f64, w: usize, h: usize) -> BinaryMask {
        let mut m = BinaryMask::new(w, h, res).unwrap();
        for y in 0..h {
            for x in 0..w {
                let c = PointUm::new((x as f64 + 0.5) * res, (y as f64 + 0.5) * res);
                let inside = a.polygons_of(ClassLabel::InvasiveCancer).any(|p| p.contains(c));
                m.set(x, y, inside);
            }
        }
        m
    }

    #[test]
    fn full_square() {
        let a = set_of(vec![Polygon::rect(0.0, 0.0, 10.0, 10.0).unwrap()]);
        let m = rasterize_class(&a, ClassLabel::InvasiveCancer, 1.0, 10, 10).unwrap();
        assert_eq!(m.count(), 100);
        assert_eq!(m, oracle(&a, 1.0, 10, 10));
    }

    #[test]
    fn empty_class() {
        let a = set_of(vec![Polygon::rect(0.0, 0.0, 10.0, 10.0).unwrap()]);
        let m = rasterize_class(&a, ClassLabel::Dcis, 1.0, 10, 10).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn ring_shape() {
        let p = Polygon::new(
            Polygon::rect(1.0, 1.0, 9.0, 9.0).unwrap().outer().to_vec(),
            vec![Polygon::rect(3.0, 3.0, 7.0, 7.0).unwrap().outer().to_vec()],
        )
        .unwrap();
        let a = set_of(vec![p]);
        let m = rasterize_class(&a, ClassLabel::InvasiveCancer, 1.0, 10, 10).unwrap();
        assert_eq!(m, oracle(&a, 1.0, 10, 10));
        assert_eq!(m.count(), 64 - 16);
        assert!(!m.get(5, 5));
    }

    #[test]
    fn centers_on_edges_follow_half_open_rule() {
        // edges pass exactly through pixel centres at 0.5 and 3.5
        let a = set_of(vec![Polygon::rect(0.5, 0.5, 3.5, 3.5).unwrap()]);
        let m = rasterize_class(&a, ClassLabel::InvasiveCancer, 1.0, 5, 5).unwrap();
        assert_eq!(m, oracle(&a, 1.0, 5, 5));
        assert_eq!(m.count(), 9);
        assert!(m.get(0, 0) && !m.get(3, 3));
    }

    #[test]
    fn window_matches_full_raster() {
        let a = set_of(vec![Polygon::simple(vec![
            PointUm::new(1.3, 0.2),
            PointUm::new(17.9, 4.4),
            PointUm::new(9.1, 18.7),
        ])
        .unwrap()]);
        let full = rasterize_class(&a, ClassLabel::InvasiveCancer, 0.7, 30, 30).unwrap();
        let win = rasterize_window(
            &a,
            ClassLabel::InvasiveCancer,
            Window { x0: 5, y0: 7, width: 11, height: 9, resolution_um: 0.7 },
        );
        for j in 0..9 {
            for i in 0..11 {
                assert_eq!(win.get(i, j), full.get(i + 5, j + 7));
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let m = BinaryMask::from_ascii(&["#..", ".##"], 3.64).unwrap();
        let bytes = encode_mask_png(&m).unwrap();
        let back = decode_mask_png(&bytes, 3.64).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_mask_png(&back).unwrap(), bytes);
        assert_eq!(parse_sidecar("resolution_um = 7.264\n").unwrap(), 7.264);
    }

    #[test]
    fn invalid_masks() {
        assert!(BinaryMask::new(0, 3, 1.0).is_err());
        assert!(BinaryMask::new(3, 3, 0.0).is_err());
        assert!(BinaryMask::from_bits(2, 2, 1.0, vec![true; 3]).is_err());
    }
}
