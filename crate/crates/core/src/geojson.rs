//! GeoJSON annotation files as exported by QuPath.
//!
//! Each feature carries `properties.classification.name`. Coordinates are
//! micrometres unless the collection declares `"unit": "pixel"` together with
//! `"mpp"`, in which case they are scaled on ingest. Output is always written
//! in micrometres with closed rings and sorted keys.

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{AnnotationSet, ClassLabel, PointUm, Polygon, Region};

/// Parses a FeatureCollection. The slide id comes from the top-level
/// `slide_id` member when present, otherwise from `fallback_slide_id`.
pub fn parse_annotations(bytes: &[u8], fallback_slide_id: Option<&str>) -> Result<AnnotationSet> {
    let root: Value = serde_json::from_slice(bytes).map_err(|e| Error::Json {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Annotation("top level is not a JSON object".into()))?;
    match obj.get("type").and_then(Value::as_str) {
        Some("FeatureCollection") => {}
        other => {
            return Err(Error::Annotation(format!(
                "expected a FeatureCollection, found type {other:?}"
            )))
        }
    }
    let scale = unit_scale(obj)?;
    let slide_id = match obj.get("slide_id") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(Error::Annotation("slide_id must be a string".into())),
        None => fallback_slide_id
            .map(str::to_string)
            .ok_or_else(|| Error::Annotation("no slide_id member and no fallback given".into()))?,
    };
    let features = obj
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Annotation("missing features array".into()))?;

    let mut regions = Vec::new();
    for (i, feature) in features.iter().enumerate() {
        let name = feature_name(feature, i);
        let class = feature_class(feature, &name)?;
        let geometry = feature
            .get("geometry")
            .and_then(Value::as_object)
            .ok_or_else(|| geometry_error(&name, "missing geometry"))?;
        let coords = geometry
            .get("coordinates")
            .ok_or_else(|| geometry_error(&name, "missing coordinates"))?;
        match geometry.get("type").and_then(Value::as_str) {
            Some("Polygon") => {
                regions.push(Region { class, polygon: parse_polygon(coords, scale, &name)? });
            }
            Some("MultiPolygon") => {
                let parts = coords
                    .as_array()
                    .ok_or_else(|| geometry_error(&name, "MultiPolygon coordinates are not an array"))?;
                for part in parts {
                    regions.push(Region { class, polygon: parse_polygon(part, scale, &name)? });
                }
            }
            other => {
                return Err(geometry_error(&name, &format!("unsupported geometry type {other:?}")))
            }
        }
    }
    AnnotationSet::new(slide_id, regions)
        .map_err(|e| Error::Annotation(e.to_string()))
}

fn unit_scale(obj: &Map<String, Value>) -> Result<f64> {
    match obj.get("unit").and_then(Value::as_str) {
        None | Some("um") | Some("µm") | Some("micrometre") | Some("micrometer") => Ok(1.0),
        Some("pixel") | Some("px") => {
            let mpp = obj
                .get("mpp")
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Annotation("unit \"pixel\" requires a numeric mpp".into()))?;
            if !(mpp.is_finite() && mpp > 0.0) {
                return Err(Error::Annotation(format!("mpp must be positive, got {mpp}")));
            }
            Ok(mpp)
        }
        Some(u) => Err(Error::Annotation(format!("unknown unit {u:?}"))),
    }
}

fn feature_name(feature: &Value, index: usize) -> String {
    let id = feature.get("id").and_then(|v| match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    });
    let name = feature
        .get("properties")
        .and_then(|p| p.get("name"))
        .and_then(Value::as_str);
    match (id, name) {
        (Some(id), _) => format!("feature {index} (id {id})"),
        (None, Some(n)) => format!("feature {index} ({n})"),
        (None, None) => format!("feature {index}"),
    }
}

fn feature_class(feature: &Value, name: &str) -> Result<ClassLabel> {
    let class_name = feature
        .get("properties")
        .and_then(|p| p.get("classification"))
        .and_then(|c| c.get("name"))
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Annotation(format!("{name} has no properties.classification.name")))?;
    class_name.parse()
}

fn geometry_error(feature: &str, message: &str) -> Error {
    Error::Geometry { feature: feature.to_string(), message: message.to_string() }
}

fn parse_polygon(coords: &Value, scale: f64, name: &str) -> Result<Polygon> {
    let rings = coords
        .as_array()
        .ok_or_else(|| geometry_error(name, "polygon coordinates are not an array"))?;
    if rings.is_empty() {
        return Err(geometry_error(name, "polygon has no rings"));
    }
    let mut parsed = Vec::with_capacity(rings.len());
    for (r, ring) in rings.iter().enumerate() {
        let pts = ring
            .as_array()
            .ok_or_else(|| geometry_error(name, &format!("ring {r} is not an array")))?;
        let mut out = Vec::with_capacity(pts.len());
        for p in pts {
            let xy = p.as_array().filter(|a| a.len() >= 2).ok_or_else(|| {
                geometry_error(name, &format!("ring {r} has a position with fewer than 2 numbers"))
            })?;
            let x = xy[0].as_f64();
            let y = xy[1].as_f64();
            match (x, y) {
                (Some(x), Some(y)) => out.push(PointUm::new(x * scale, y * scale)),
                _ => return Err(geometry_error(name, &format!("ring {r} has a non-numeric coordinate"))),
            }
        }
        if out.len() > 1 && out.first() == out.last() {
            out.pop();
        }
        if out.len() < 3 {
            return Err(geometry_error(
                name,
                &format!("ring {r} has {} distinct vertices, need at least 3", out.len()),
            ));
        }
        parsed.push(out);
    }
    let outer = parsed.remove(0);
    Polygon::new(outer, parsed).map_err(|e| geometry_error(name, &e.to_string()))
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = bytes
        .split(|&b| b == b'\n')
        .take(line - 1)
        .map(|l| l.len() + 1)
        .sum();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

fn ring_json(ring: &[PointUm]) -> Value {
    let mut pts: Vec<Value> = ring.iter().map(|p| json!([p.x, p.y])).collect();
    pts.push(json!([ring[0].x, ring[0].y]));
    Value::Array(pts)
}

/// Canonical serialization: one Polygon feature per region, micrometre units.
pub fn to_geojson(set: &AnnotationSet) -> String {
    let features: Vec<Value> = set
        .regions
        .iter()
        .map(|r| {
            let rings: Vec<Value> = r.polygon.rings().map(ring_json).collect();
            json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": rings },
                "properties": {
                    "objectType": "annotation",
                    "classification": { "name": r.class.canonical_name() },
                },
            })
        })
        .collect();
    let root = json!({
        "type": "FeatureCollection",
        "slide_id": set.slide_id(),
        "unit": "um",
        "features": features,
    });
    let mut s = serde_json::to_string_pretty(&root).expect("annotation JSON serializes");
    s.push('\n');
    s
}
