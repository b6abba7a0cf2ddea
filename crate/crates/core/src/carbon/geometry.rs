//! Planar polygon tests on latitude/longitude vertices.

use serde::{Deserialize, Serialize};

use super::CarbonError;

const EDGE_EPS: f64 = 1e-12;
const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }
}

/// A simple polygon given by its ring of vertices. The ring may or may not
/// repeat the first vertex at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct Polygon {
    vertices: Vec<LatLon>,
}

impl From<Vec<[f64; 2]>> for Polygon {
    fn from(raw: Vec<[f64; 2]>) -> Self {
        Polygon::new(
            raw.into_iter()
                .map(|[lat, lon]| LatLon { lat, lon })
                .collect(),
        )
    }
}

impl From<Polygon> for Vec<[f64; 2]> {
    fn from(p: Polygon) -> Self {
        p.vertices.iter().map(|v| [v.lat, v.lon]).collect()
    }
}

impl Polygon {
    pub fn new(mut vertices: Vec<LatLon>) -> Self {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        Polygon { vertices }
    }

    pub fn vertices(&self) -> &[LatLon] {
        &self.vertices
    }

    fn edges(&self) -> impl Iterator<Item = (LatLon, LatLon)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// At least three vertices, finite coordinates, no two non-adjacent edges
    /// crossing.
    pub fn validate(&self) -> Result<(), CarbonError> {
        if self.vertices.len() < 3 {
            return Err(CarbonError::DegeneratePolygon(self.vertices.len()));
        }
        if self
            .vertices
            .iter()
            .any(|v| !v.lat.is_finite() || !v.lon.is_finite())
        {
            return Err(CarbonError::InvalidData("non-finite vertex".into()));
        }
        let edges: Vec<_> = self.edges().collect();
        let n = edges.len();
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if !adjacent && segments_intersect(edges[i], edges[j]) {
                    return Err(CarbonError::InvalidData(format!(
                        "polygon edges {i} and {j} intersect"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Approximate area on a spherical earth, km².
    pub fn area_km2(&self) -> f64 {
        let sum: f64 = self
            .edges()
            .map(|(a, b)| {
                (b.lon - a.lon).to_radians()
                    * (2.0 + a.lat.to_radians().sin() + b.lat.to_radians().sin())
            })
            .sum();
        (sum * EARTH_RADIUS_KM * EARTH_RADIUS_KM / 2.0).abs()
    }

    pub fn bounding_box(&self) -> (LatLon, LatLon) {
        let mut lo = LatLon::new(f64::INFINITY, f64::INFINITY);
        let mut hi = LatLon::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo.lat = lo.lat.min(v.lat);
            lo.lon = lo.lon.min(v.lon);
            hi.lat = hi.lat.max(v.lat);
            hi.lon = hi.lon.max(v.lon);
        }
        (lo, hi)
    }
}

fn cross(o: LatLon, a: LatLon, b: LatLon) -> f64 {
    (a.lon - o.lon) * (b.lat - o.lat) - (a.lat - o.lat) * (b.lon - o.lon)
}

fn on_segment(p: LatLon, a: LatLon, b: LatLon) -> bool {
    let scale = (b.lat - a.lat).abs().max((b.lon - a.lon).abs()).max(1.0);
    cross(a, b, p).abs() <= EDGE_EPS * scale * scale
        && p.lat >= a.lat.min(b.lat) - EDGE_EPS
        && p.lat <= a.lat.max(b.lat) + EDGE_EPS
        && p.lon >= a.lon.min(b.lon) - EDGE_EPS
        && p.lon <= a.lon.max(b.lon) + EDGE_EPS
}

fn segments_intersect((a, b): (LatLon, LatLon), (c, d): (LatLon, LatLon)) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

/// Ray-casting parity test. Points on an edge or vertex count as inside.
pub fn point_in_polygon(point: LatLon, polygon: &Polygon) -> Result<bool, CarbonError> {
    let n = polygon.vertices.len();
    if n < 3 {
        return Err(CarbonError::DegeneratePolygon(n));
    }
    if polygon.edges().any(|(a, b)| on_segment(point, a, b)) {
        return Ok(true);
    }
    let mut inside = false;
    for (a, b) in polygon.edges() {
        // half-open rule on latitude avoids double counting vertices
        if (a.lat > point.lat) != (b.lat > point.lat) {
            let lon_at = a.lon + (point.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if point.lon < lon_at {
                inside = !inside;
            }
        }
    }
    Ok(inside)
}
