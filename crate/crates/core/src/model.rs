//! Domain types shared by every stage of the pipeline.
//!
//! All geometry lives in micrometres in a slide's physical frame. Rasters
//! carry their own µm/pixel resolution, so every unit conversion is explicit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A point in a slide's physical frame, in micrometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointUm {
    pub x: f64,
    pub y: f64,
}

impl PointUm {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Polygon with an outer ring and optional holes. Rings are implicitly
/// closed: the first vertex is not repeated at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    outer: Vec<PointUm>,
    holes: Vec<Vec<PointUm>>,
}

impl Polygon {
    pub fn new(outer: Vec<PointUm>, holes: Vec<Vec<PointUm>>) -> Result<Self> {
        check_ring(&outer, "outer ring")?;
        for (i, h) in holes.iter().enumerate() {
            check_ring(h, &format!("hole {i}"))?;
        }
        Ok(Self { outer, holes })
    }

    /// Polygon without holes.
    pub fn simple(outer: Vec<PointUm>) -> Result<Self> {
        Self::new(outer, Vec::new())
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::simple(vec![
            PointUm::new(x0, y0),
            PointUm::new(x1, y0),
            PointUm::new(x1, y1),
            PointUm::new(x0, y1),
        ])
    }

    pub fn outer(&self) -> &[PointUm] {
        &self.outer
    }

    pub fn holes(&self) -> &[Vec<PointUm>] {
        &self.holes
    }

    /// Outer ring followed by the holes.
    pub fn rings(&self) -> impl Iterator<Item = &[PointUm]> {
        std::iter::once(self.outer.as_slice()).chain(self.holes.iter().map(Vec::as_slice))
    }

    /// Applies `f` to every vertex, keeping the ring structure.
    pub fn map_vertices(&self, mut f: impl FnMut(PointUm) -> PointUm) -> Result<Self> {
        let outer = self.outer.iter().map(|&p| f(p)).collect();
        let holes = self
            .holes
            .iter()
            .map(|h| h.iter().map(|&p| f(p)).collect())
            .collect();
        Self::new(outer, holes)
    }

    pub fn vertex_count(&self) -> usize {
        self.rings().map(<[PointUm]>::len).sum()
    }

    /// `(min_x, min_y, max_x, max_y)` over all rings.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.rings().flatten() {
            b.0 = b.0.min(p.x);
            b.1 = b.1.min(p.y);
            b.2 = b.2.max(p.x);
            b.3 = b.3.max(p.y);
        }
        b
    }

    /// Shoelace area of the outer ring minus the hole areas, in µm².
    pub fn area(&self) -> f64 {
        let holes: f64 = self.holes.iter().map(|h| ring_area(h)).sum();
        (ring_area(&self.outer) - holes).max(0.0)
    }

    /// Even-odd containment test over all rings.
    pub fn contains(&self, pt: PointUm) -> bool {
        let mut inside = false;
        for ring in self.rings() {
            for (a, b) in ring_edges(ring) {
                if let Some(x) = edge_crossing_x(a, b, pt.y) {
                    if pt.x < x {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }
}

fn check_ring(ring: &[PointUm], what: &str) -> Result<()> {
    if ring.len() < 3 {
        return Err(invalid(format!("{what} has {} vertices, need at least 3", ring.len())));
    }
    if let Some(i) = ring.iter().position(|p| !p.is_finite()) {
        return Err(invalid(format!("{what} vertex {i} is not finite")));
    }
    Ok(())
}

/// Unsigned shoelace area of a single ring.
pub fn ring_area(ring: &[PointUm]) -> f64 {
    let twice: f64 = ring_edges(ring).map(|(a, b)| a.x * b.y - b.x * a.y).sum();
    twice.abs() / 2.0
}

pub(crate) fn ring_edges(ring: &[PointUm]) -> impl Iterator<Item = (PointUm, PointUm)> + '_ {
    let n = ring.len();
    (0..n).map(move |i| (ring[i], ring[(i + 1) % n]))
}

/// x coordinate where edge `a→b` crosses the horizontal line at `y`, using the
/// half-open rule: an edge counts iff exactly one endpoint lies strictly above
/// `y`. Horizontal edges never count. Rasterization and [`Polygon::contains`]
/// share this function so they agree bit for bit.
#[inline]
pub(crate) fn edge_crossing_x(a: PointUm, b: PointUm, y: f64) -> Option<f64> {
    if (a.y > y) != (b.y > y) {
        Some(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y))
    } else {
        None
    }
}

pub fn polygon_area(p: &Polygon) -> f64 {
    p.area()
}

pub fn point_in_polygon(pt: PointUm, p: &Polygon) -> bool {
    p.contains(pt)
}

/// Closed set of annotation classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    InvasiveCancer,
    Dcis,
    Lcis,
    NonMalignant,
    Artefact,
    LymphovascularInvasion,
    Tissue,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 7] = [
        ClassLabel::InvasiveCancer,
        ClassLabel::Dcis,
        ClassLabel::Lcis,
        ClassLabel::NonMalignant,
        ClassLabel::Artefact,
        ClassLabel::LymphovascularInvasion,
        ClassLabel::Tissue,
    ];

    /// Name written to annotation files.
    pub fn canonical_name(self) -> &'static str {
        match self {
            ClassLabel::InvasiveCancer => "Invasive cancer",
            ClassLabel::Dcis => "DCIS",
            ClassLabel::Lcis => "LCIS",
            ClassLabel::NonMalignant => "Non-malignant",
            ClassLabel::Artefact => "Artefact",
            ClassLabel::LymphovascularInvasion => "Lymphovascular invasion",
            ClassLabel::Tissue => "Tissue",
        }
    }
}

const ALIASES: &[(&str, ClassLabel)] = &[
    ("invasive cancer", ClassLabel::InvasiveCancer),
    ("invasivecancer", ClassLabel::InvasiveCancer),
    ("ic", ClassLabel::InvasiveCancer),
    ("invasive carcinoma", ClassLabel::InvasiveCancer),
    ("dcis", ClassLabel::Dcis),
    ("ductal carcinoma in situ", ClassLabel::Dcis),
    ("lcis", ClassLabel::Lcis),
    ("lobular carcinoma in situ", ClassLabel::Lcis),
    ("non malignant", ClassLabel::NonMalignant),
    ("nonmalignant", ClassLabel::NonMalignant),
    ("non malignant changes", ClassLabel::NonMalignant),
    ("benign", ClassLabel::NonMalignant),
    ("artefact", ClassLabel::Artefact),
    ("artefacts", ClassLabel::Artefact),
    ("artifact", ClassLabel::Artefact),
    ("artifacts", ClassLabel::Artefact),
    ("lymphovascular invasion", ClassLabel::LymphovascularInvasion),
    ("lvi", ClassLabel::LymphovascularInvasion),
    ("tissue", ClassLabel::Tissue),
];

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .to_lowercase()
            .chars()
            .map(|c| if c == '_' || c == '-' { ' ' } else { c })
            .collect::<String>()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        ALIASES
            .iter()
            .find(|(alias, _)| *alias == key)
            .map(|&(_, c)| c)
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub class: ClassLabel,
    pub polygon: Polygon,
}

/// Annotation polygons of one slide. Regions may overlap; coverage of a class
/// is the union of its polygons.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    slide_id: String,
    pub regions: Vec<Region>,
}

impl AnnotationSet {
    pub fn new(slide_id: impl Into<String>, regions: Vec<Region>) -> Result<Self> {
        let slide_id = slide_id.into();
        if slide_id.is_empty() {
            return Err(invalid("slide_id must not be empty"));
        }
        Ok(Self { slide_id, regions })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn polygons_of(&self, class: ClassLabel) -> impl Iterator<Item = &Polygon> {
        self.regions
            .iter()
            .filter(move |r| r.class == class)
            .map(|r| &r.polygon)
    }

    pub fn count_of(&self, class: ClassLabel) -> usize {
        self.polygons_of(class).count()
    }
}

/// One patient with its matched H&E and IHC slides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub he_slide_id: String,
    pub ihc_slide_id: String,
    pub ki67_score: Option<f64>,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        he_slide_id: impl Into<String>,
        ihc_slide_id: impl Into<String>,
        ki67_score: Option<f64>,
    ) -> Result<Self> {
        if let Some(s) = ki67_score {
            if !(0.0..=100.0).contains(&s) {
                return Err(invalid(format!("ki67_score {s} outside [0, 100]")));
            }
        }
        let case_id = case_id.into();
        if case_id.is_empty() {
            return Err(invalid("case_id must not be empty"));
        }
        Ok(Self {
            case_id,
            he_slide_id: he_slide_id.into(),
            ihc_slide_id: ihc_slide_id.into(),
            ki67_score,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Polygon {
        Polygon::rect(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    fn square_with_hole() -> Polygon {
        Polygon::new(
            unit_square().outer().to_vec(),
            vec![vec![
                PointUm::new(0.25, 0.25),
                PointUm::new(0.75, 0.25),
                PointUm::new(0.75, 0.75),
                PointUm::new(0.25, 0.75),
            ]],
        )
        .unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(polygon_area(&unit_square()), 1.0);
        assert_eq!(polygon_area(&square_with_hole()), 0.75);
        let line = Polygon::simple(vec![
            PointUm::new(0.0, 0.0),
            PointUm::new(1.0, 1.0),
            PointUm::new(2.0, 2.0),
        ])
        .unwrap();
        assert_eq!(polygon_area(&line), 0.0);
    }

    #[test]
    fn containment_examples() {
        assert!(point_in_polygon(PointUm::new(0.5, 0.5), &unit_square()));
        assert!(!point_in_polygon(PointUm::new(2.0, 2.0), &unit_square()));
        assert!(!point_in_polygon(PointUm::new(0.5, 0.5), &square_with_hole()));
        assert!(point_in_polygon(PointUm::new(0.1, 0.5), &square_with_hole()));
    }

    #[test]
    fn half_open_edges() {
        let sq = unit_square();
        // left and top edges are inside, right and bottom are outside
        assert!(sq.contains(PointUm::new(0.0, 0.5)));
        assert!(!sq.contains(PointUm::new(1.0, 0.5)));
        assert!(sq.contains(PointUm::new(0.5, 0.0)));
        assert!(!sq.contains(PointUm::new(0.5, 1.0)));
    }

    #[test]
    fn short_ring_rejected() {
        assert!(Polygon::simple(vec![PointUm::new(0.0, 0.0), PointUm::new(1.0, 0.0)]).is_err());
        assert!(Polygon::simple(vec![
            PointUm::new(0.0, 0.0),
            PointUm::new(f64::NAN, 0.0),
            PointUm::new(0.0, 1.0)
        ])
        .is_err());
    }

    #[test]
    fn class_aliases() {
        assert_eq!("Invasive Cancer".parse::<ClassLabel>().unwrap(), ClassLabel::InvasiveCancer);
        assert_eq!("IC".parse::<ClassLabel>().unwrap(), ClassLabel::InvasiveCancer);
        assert_eq!("invasive_cancer".parse::<ClassLabel>().unwrap(), ClassLabel::InvasiveCancer);
        assert_eq!("non-malignant".parse::<ClassLabel>().unwrap(), ClassLabel::NonMalignant);
        for c in ClassLabel::ALL {
            assert_eq!(c.canonical_name().parse::<ClassLabel>().unwrap(), c);
        }
        let err = "Stroma".parse::<ClassLabel>().unwrap_err();
        assert!(err.to_string().contains("Stroma"));
    }

    #[test]
    fn case_record_score_range() {
        assert!(CaseRecord::new("c", "h", "k", Some(100.0)).is_ok());
        assert!(CaseRecord::new("c", "h", "k", Some(100.5)).is_err());
        assert!(CaseRecord::new("c", "h", "k", None).is_ok());
    }

    #[test]
    fn empty_slide_id_rejected() {
        assert!(AnnotationSet::new("", vec![]).is_err());
    }
}
