use annoreg::deform::{displace_point, warp_annotation_set, DeformationField};
use annoreg::geojson::{parse_annotations, to_geojson};
use annoreg::model::{point_in_polygon, polygon_area, AnnotationSet, ClassLabel, PointUm, Polygon, Region};
use annoreg::raster::rasterize_class;
use proptest::prelude::*;

fn lattice_ring(max_len: usize) -> impl Strategy<Value = Vec<(i64, i64)>> {
    prop::collection::vec((-20i64..=20, -20i64..=20), 3..=max_len)
}

fn float_ring() -> impl Strategy<Value = Vec<PointUm>> {
    prop::collection::vec((-500.0f64..500.0, -500.0f64..500.0), 3..=16)
        .prop_map(|v| v.into_iter().map(|(x, y)| PointUm::new(x, y)).collect())
}

fn to_points(ring: &[(i64, i64)], scale: f64) -> Vec<PointUm> {
    ring.iter().map(|&(x, y)| PointUm::new(x as f64 * scale, y as f64 * scale)).collect()
}

fn annotation_set() -> impl Strategy<Value = AnnotationSet> {
    prop::collection::vec((0..ClassLabel::ALL.len(), float_ring(), prop::option::of(float_ring())), 0..5).prop_map(|regions| {
        let regions = regions
            .into_iter()
            .map(|(c, outer, hole)| Region {
                class: ClassLabel::ALL[c],
                polygon: Polygon::new(outer, hole.into_iter().collect()).unwrap(),
            })
            .collect();
        AnnotationSet::new("slide_A", regions).unwrap()
    })
}

/// Even-odd ray cast toward +x in exact integer arithmetic.
fn ray_cast_exact(px: i64, py: i64, rings: &[Vec<(i64, i64)>]) -> bool {
    let mut inside = false;
    for ring in rings {
        for k in 0..ring.len() {
            let (ax, ay) = ring[k];
            let (bx, by) = ring[(k + 1) % ring.len()];
            if (ay > py) == (by > py) {
                continue;
            }
            // px < ax + (py - ay)(bx - ax)/(by - ay)
            let lhs = (px - ax) as i128 * (by - ay) as i128;
            let rhs = (py - ay) as i128 * (bx - ax) as i128;
            let left_of = if by > ay { lhs < rhs } else { lhs > rhs };
            if left_of {
                inside = !inside;
            }
        }
    }
    inside
}

proptest! {
    #[test]
    fn area_ignores_orientation_and_start(ring in float_ring(), shift in 0usize..16) {
        let p = Polygon::simple(ring.clone()).unwrap();
        let mut rev = ring.clone();
        rev.reverse();
        let mut rot = ring.clone();
        rot.rotate_left(shift % ring.len());
        let a = polygon_area(&p);
        let tol = 1e-9 * a.max(1.0);
        prop_assert!((polygon_area(&Polygon::simple(rev).unwrap()) - a).abs() <= tol);
        prop_assert!((polygon_area(&Polygon::simple(rot).unwrap()) - a).abs() <= tol);
    }

    #[test]
    fn point_in_polygon_matches_exact_ray_cast(outer in lattice_ring(10), hole in prop::option::of(lattice_ring(6))) {
        // quarter-unit lattice: vertices, edges and query points line up exactly
        let rings: Vec<Vec<(i64, i64)>> = std::iter::once(outer.iter().map(|&(x, y)| (4 * x, 4 * y)).collect())
            .chain(hole.iter().map(|h| h.iter().map(|&(x, y)| (4 * x, 4 * y)).collect()))
            .collect();
        let poly = Polygon::new(to_points(&rings[0], 0.25), rings[1..].iter().map(|r| to_points(r, 0.25)).collect()).unwrap();
        for qy in -50..50 {
            for qx in -50..50 {
                let (px, py) = (2 * qx, 2 * qy);
                let got = point_in_polygon(PointUm::new(px as f64 * 0.25, py as f64 * 0.25), &poly);
                prop_assert_eq!(got, ray_cast_exact(px, py, &rings), "point ({}, {})", px, py);
            }
        }
    }

    #[test]
    fn raster_matches_point_in_polygon(
        outer in lattice_ring(10),
        w in 1usize..=64,
        h in 1usize..=64,
        res in prop::sample::select(vec![0.5, 1.0, 0.454, 3.64]),
    ) {
        let pts: Vec<PointUm> = outer.iter().map(|&(x, y)| PointUm::new((x + 20) as f64 * res, (y + 20) as f64 * res)).collect();
        let poly = Polygon::simple(pts).unwrap();
        let set = AnnotationSet::new("s", vec![Region { class: ClassLabel::InvasiveCancer, polygon: poly.clone() }]).unwrap();
        let m = rasterize_class(&set, ClassLabel::InvasiveCancer, res, w, h).unwrap();
        for j in 0..h {
            for i in 0..w {
                let c = PointUm::new((i as f64 + 0.5) * res, (j as f64 + 0.5) * res);
                prop_assert_eq!(m.get(i, j), point_in_polygon(c, &poly));
            }
        }
    }

    #[test]
    fn geojson_round_trip(set in annotation_set()) {
        let text = to_geojson(&set);
        let back = parse_annotations(text.as_bytes(), None).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(to_geojson(&back), text);
    }

    #[test]
    fn zero_field_is_identity(x in -1e4f64..1e4, y in -1e4f64..1e4, gw in 2usize..8, gh in 2usize..8, spacing in 1.0f64..1000.0) {
        let f = DeformationField::zero(gw, gh, spacing).unwrap();
        let p = PointUm::new(x, y);
        prop_assert_eq!(displace_point(&f, p), p);
    }

    #[test]
    fn interpolation_matches_per_node_oracle(
        gw in 2usize..7,
        gh in 2usize..7,
        seed in any::<u64>(),
        fx in -0.5f64..7.0,
        fy in -0.5f64..7.0,
    ) {
        use rand::Rng;
        let mut rng = annoreg::rng::stream(seed, 0);
        let dx: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dy: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(-5.0..5.0)).collect();
        let f = DeformationField::new(gw, gh, 10.0, dx.clone(), dy.clone()).unwrap();
        // tent-weight sum over every node
        let cx = fx.clamp(0.0, (gw - 1) as f64);
        let cy = fy.clamp(0.0, (gh - 1) as f64);
        let (mut ox, mut oy) = (0.0, 0.0);
        for j in 0..gh {
            for i in 0..gw {
                let w = (1.0 - (cx - i as f64).abs()).max(0.0) * (1.0 - (cy - j as f64).abs()).max(0.0);
                ox += w * dx[j * gw + i] as f64;
                oy += w * dy[j * gw + i] as f64;
            }
        }
        let (gx, gy) = f.interpolate(fx, fy);
        prop_assert!((gx - ox).abs() <= 1e-9 && (gy - oy).abs() <= 1e-9, "({gx}, {gy}) vs ({ox}, {oy})");
    }

    #[test]
    fn warp_keeps_classes_and_vertex_counts(set in annotation_set(), dx in -3.0f32..3.0, dy in -3.0f32..3.0) {
        let f = DeformationField::constant(4, 4, 200.0, dx, dy).unwrap();
        let w = warp_annotation_set(&f, &set, "slide_B").unwrap();
        prop_assert_eq!(w.slide_id(), "slide_B");
        prop_assert_eq!(w.regions.len(), set.regions.len());
        for (a, b) in set.regions.iter().zip(&w.regions) {
            prop_assert_eq!(a.class, b.class);
            let ca: Vec<usize> = a.polygon.rings().map(|r| r.len()).collect();
            let cb: Vec<usize> = b.polygon.rings().map(|r| r.len()).collect();
            prop_assert_eq!(ca, cb);
        }
    }
}
