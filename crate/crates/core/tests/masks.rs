use annoreg::metrics::paint_tiles;
use annoreg::model::{point_in_polygon, AnnotationSet, CaseRecord, ClassLabel, PointUm, Polygon, Region};
use annoreg::morph::{connected_components, mask_dice, mask_jaccard, remove_edge_components, remove_small_components};
use annoreg::raster::BinaryMask;
use annoreg::tissue::{build_manifest, exclude_control_tissue, TileParams};
use proptest::prelude::*;

fn mask(max_w: usize, max_h: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max_w, 1..=max_h, 0.05f64..0.7).prop_flat_map(|(w, h, density)| {
        prop::collection::vec(prop::bool::weighted(density), w * h)
            .prop_map(move |bits| BinaryMask::from_bits(w, h, 2.0, bits).unwrap())
    })
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..=24, 1usize..=24).prop_flat_map(|(w, h)| {
        let m = move || prop::collection::vec(any::<bool>(), w * h).prop_map(move |b| BinaryMask::from_bits(w, h, 1.0, b).unwrap());
        (m(), m())
    })
}

fn subset(a: &BinaryMask, b: &BinaryMask) -> bool {
    a.bits().iter().zip(b.bits()).all(|(&x, &y)| !x || y)
}

/// Star-shaped ring around `(cx, cy)`, so scaling toward the centre stays
/// inside the original.
fn star(cx: f64, cy: f64, radii: &[f64], scale: f64) -> Polygon {
    let n = radii.len();
    Polygon::simple(
        radii
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let t = std::f64::consts::TAU * k as f64 / n as f64;
                PointUm::new(cx + scale * r * t.cos(), cy + scale * r * t.sin())
            })
            .collect(),
    )
    .unwrap()
}

fn small_params() -> TileParams {
    TileParams { tile_size_px: 8, stride_px: 8, tile_resolution_um: 1.0, ..TileParams::default() }
}

proptest! {
    #[test]
    fn small_component_removal_is_idempotent(m in mask(30, 30), min_area in 0usize..8) {
        let once = remove_small_components(&m, min_area);
        prop_assert_eq!(remove_small_components(&once, min_area), once.clone());
        // pixels only appear inside small background holes off the border
        let (w, h) = (m.width(), m.height());
        let bg = connected_components(&BinaryMask::from_bits(w, h, 2.0, m.bits().iter().map(|b| !b).collect()).unwrap());
        let mut on_border = vec![false; bg.count() + 1];
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                    on_border[bg.label(x, y) as usize] = true;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                if once.get(x, y) && !m.get(x, y) {
                    let l = bg.label(x, y) as usize;
                    prop_assert!(!on_border[l]);
                    prop_assert!(bg.component_areas[l - 1] < min_area);
                }
            }
        }
    }

    #[test]
    fn edge_component_removal_only_removes(m in mask(30, 30), edge in 0.01f64..0.49, frac in 0.0f64..=1.0) {
        let once = remove_edge_components(&m, edge, frac).unwrap();
        prop_assert!(subset(&once, &m));
        prop_assert_eq!(remove_edge_components(&once, edge, frac).unwrap(), once.clone());
    }

    #[test]
    fn overlap_measures_are_consistent((a, b) in mask_pair()) {
        prop_assert_eq!(mask_dice(&a, &b).unwrap(), mask_dice(&b, &a).unwrap());
        let d = mask_dice(&a, &b).unwrap();
        let j = mask_jaccard(&a, &b).unwrap();
        prop_assert!(j <= d);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn component_count_survives_transpose(m in mask(25, 25)) {
        prop_assert_eq!(connected_components(&m).count(), connected_components(&m.transposed()).count());
    }

    #[test]
    fn control_exclusion_keeps_whole_components((he, ihc) in mask_pair()) {
        prop_assume!(he.count() > 0);
        let out = exclude_control_tissue(&he, &ihc).unwrap();
        prop_assert!(subset(&out, &ihc));
        let before = connected_components(&ihc);
        prop_assert!(connected_components(&out).count() <= before.count());
        // every original component is kept whole or removed whole
        let mut kept = vec![None; before.count()];
        for y in 0..ihc.height() {
            for x in 0..ihc.width() {
                let l = before.label(x, y);
                if l != 0 {
                    let k = &mut kept[l as usize - 1];
                    match *k {
                        None => *k = Some(out.get(x, y)),
                        Some(v) => prop_assert_eq!(v, out.get(x, y)),
                    }
                }
            }
        }
    }

    #[test]
    fn painting_more_tiles_never_clears_pixels(
        tiles in prop::collection::vec((0usize..6, 0usize..6), 0..12),
        extra in (0usize..6, 0usize..6),
        res in prop::sample::select(vec![1.0, 3.0, 2.5, 7.264]),
    ) {
        let p = small_params();
        let to_px = |v: &[(usize, usize)]| -> Vec<(usize, usize)> { v.iter().map(|&(i, j)| (i * 8, j * 8)).collect() };
        let (w, h) = ((48.0 / res) as usize + 1, (48.0 / res) as usize + 1);
        let base = paint_tiles(&to_px(&tiles), &p, w, h, res).unwrap();
        let mut more = tiles.clone();
        more.push(extra);
        let grown = paint_tiles(&to_px(&more), &p, w, h, res).unwrap();
        prop_assert!(subset(&base, &grown));
    }

    #[test]
    fn tile_labels_match_pixel_oracle_and_shrink_monotonically(
        radii in prop::collection::vec(6.0f64..20.0, 8..16),
        cx in 15.0f64..45.0,
        cy in 15.0f64..45.0,
        shrink in 0.3f64..1.0,
    ) {
        let params = small_params();
        let tissue = BinaryMask::from_bits(16, 16, 4.0, vec![true; 256]).unwrap();
        let case = CaseRecord::new("c", "c_HE", "c_KI67", None).unwrap();
        let ann = |scale: f64| {
            AnnotationSet::new("c_KI67", vec![Region { class: ClassLabel::InvasiveCancer, polygon: star(cx, cy, &radii, scale) }]).unwrap()
        };
        let full = ann(1.0);
        let shrunk = ann(shrink);
        let m = build_manifest(&case, Some(&full), Some(&shrunk), &tissue, &params).unwrap();
        let again = build_manifest(&case, Some(&full), Some(&shrunk), &tissue, &params).unwrap();
        prop_assert_eq!(m.to_csv_string(), again.to_csv_string());
        let poly = star(cx, cy, &radii, 1.0);
        let mut disagreements = 0;
        for r in &m.records {
            let mut covered = 0;
            for j in 0..8 {
                for i in 0..8 {
                    let c = PointUm::new((r.tile_x + i) as f64 + 0.5, (r.tile_y + j) as f64 + 0.5);
                    covered += point_in_polygon(c, &poly) as usize;
                }
            }
            prop_assert_eq!(r.label_ihc, Some((covered * 2 >= 64) as u8));
            prop_assert!(r.label_registered <= r.label_ihc, "shrinking turned a tile positive");
            disagreements += (r.label_ihc != r.label_registered) as usize;
        }
        let recomputed = m.records.iter().filter(|r| {
            let mut c = 0;
            for j in 0..8 {
                for i in 0..8 {
                    let p = PointUm::new((r.tile_x + i) as f64 + 0.5, (r.tile_y + j) as f64 + 0.5);
                    c += point_in_polygon(p, &star(cx, cy, &radii, shrink)) as usize;
                }
            }
            Some((c * 2 >= 64) as u8) != r.label_ihc
        }).count();
        prop_assert_eq!(disagreements, recomputed);
    }
}
