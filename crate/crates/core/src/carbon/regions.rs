//! Region database: grid geometries with average intensity, cloud-provider
//! regions mapped onto grid regions, and reference intensities of individual
//! generation methods.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::{point_in_polygon, LatLon, Polygon};
use super::CarbonError;

const BUNDLED_REGIONS: &str = include_str!("../../data/regions.json");

/// How to fetch realtime intensity for a region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealtimeEndpoint {
    pub url: String,
    /// `number`, `json:<pointer>` or `csv_last:<column>`.
    pub parse: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub display_name: String,
    /// ISO 3166 alpha-3 code, used for the social cost of carbon.
    pub country: String,
    pub geometry: Vec<Polygon>,
    pub area_km2: f64,
    pub avg_intensity_g_per_kwh: f64,
    pub source: String,
    pub year: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realtime: Option<RealtimeEndpoint>,
}

impl Region {
    pub fn contains(&self, point: LatLon) -> bool {
        self.geometry
            .iter()
            .any(|p| point_in_polygon(point, p).unwrap_or(false))
    }

    pub fn validate(&self) -> Result<(), CarbonError> {
        if self.geometry.is_empty() {
            return Err(CarbonError::InvalidData(format!(
                "{}: no geometry",
                self.id
            )));
        }
        for polygon in &self.geometry {
            polygon
                .validate()
                .map_err(|e| CarbonError::InvalidData(format!("{}: {e}", self.id)))?;
        }
        if !(self.area_km2 > 0.0) {
            return Err(CarbonError::InvalidData(format!(
                "{}: area must be positive",
                self.id
            )));
        }
        if !(self.avg_intensity_g_per_kwh >= 0.0) {
            return Err(CarbonError::InvalidData(format!(
                "{}: negative intensity",
                self.id
            )));
        }
        if self.source.trim().is_empty() {
            return Err(CarbonError::InvalidData(format!(
                "{}: missing source",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudRegion {
    pub id: String,
    pub provider: String,
    pub display_name: String,
    /// Grid region whose intensity applies.
    pub grid_region: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMethod {
    pub id: String,
    pub display_name: String,
    pub g_per_kwh: f64,
    pub source: String,
    pub year: i32,
}

/// Intensity with provenance, whichever table it came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensitySource {
    pub id: String,
    pub display_name: String,
    pub g_per_kwh: f64,
    pub source: String,
    pub year: i32,
    pub country: Option<String>,
    /// Grid region backing this id, if any.
    pub grid_region: Option<String>,
    pub cloud: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDb {
    pub version: String,
    pub regions: Vec<Region>,
    #[serde(default)]
    pub cloud_regions: Vec<CloudRegion>,
    #[serde(default)]
    pub generation_methods: Vec<GenerationMethod>,
}

impl RegionDb {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_REGIONS).expect("bundled region data is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, CarbonError> {
        let db: RegionDb =
            serde_json::from_str(text).map_err(|e| CarbonError::InvalidData(e.to_string()))?;
        db.validate()?;
        Ok(db)
    }

    pub fn from_file(path: &Path) -> Result<Self, CarbonError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CarbonError::InvalidData(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CarbonError> {
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.regions {
            r.validate()?;
            if !ids.insert(r.id.as_str()) {
                return Err(CarbonError::InvalidData(format!(
                    "duplicate region {}",
                    r.id
                )));
            }
        }
        for c in &self.cloud_regions {
            if self.region(&c.grid_region).is_none() {
                return Err(CarbonError::InvalidData(format!(
                    "cloud region {} references unknown grid region {}",
                    c.id, c.grid_region
                )));
            }
            if !ids.insert(c.id.as_str()) {
                return Err(CarbonError::InvalidData(format!(
                    "duplicate region {}",
                    c.id
                )));
            }
        }
        for g in &self.generation_methods {
            if !(g.g_per_kwh >= 0.0) || !ids.insert(g.id.as_str()) {
                return Err(CarbonError::InvalidData(format!(
                    "bad generation method {}",
                    g.id
                )));
            }
        }
        Ok(())
    }

    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn resolve(&self, point: LatLon) -> Result<&Region, CarbonError> {
        resolve_region(point, &self.regions)
    }

    /// Look an id up across grid regions, cloud regions and generation methods.
    pub fn lookup(&self, id: &str) -> Result<IntensitySource, CarbonError> {
        if let Some(r) = self.region(id) {
            return Ok(IntensitySource {
                id: r.id.clone(),
                display_name: r.display_name.clone(),
                g_per_kwh: r.avg_intensity_g_per_kwh,
                source: r.source.clone(),
                year: r.year,
                country: Some(r.country.clone()),
                grid_region: Some(r.id.clone()),
                cloud: false,
            });
        }
        if let Some(c) = self.cloud_regions.iter().find(|c| c.id == id) {
            let grid = self
                .region(&c.grid_region)
                .ok_or_else(|| CarbonError::UnknownRegion(c.grid_region.clone()))?;
            return Ok(IntensitySource {
                id: c.id.clone(),
                display_name: format!("{} ({})", c.display_name, c.provider),
                g_per_kwh: grid.avg_intensity_g_per_kwh,
                source: grid.source.clone(),
                year: grid.year,
                country: Some(grid.country.clone()),
                grid_region: Some(grid.id.clone()),
                cloud: true,
            });
        }
        if let Some(g) = self.generation_methods.iter().find(|g| g.id == id) {
            return Ok(IntensitySource {
                id: g.id.clone(),
                display_name: g.display_name.clone(),
                g_per_kwh: g.g_per_kwh,
                source: g.source.clone(),
                year: g.year,
                country: None,
                grid_region: None,
                cloud: false,
            });
        }
        Err(CarbonError::UnknownRegion(id.to_string()))
    }
}

/// Smallest-area region containing `point`; equal areas fall back to the
/// lexicographically smallest id.
pub fn resolve_region(point: LatLon, regions: &[Region]) -> Result<&Region, CarbonError> {
    regions
        .iter()
        .filter(|r| r.contains(point))
        .min_by(|a, b| {
            a.area_km2
                .total_cmp(&b.area_km2)
                .then_with(|| a.id.cmp(&b.id))
        })
        .ok_or(CarbonError::NoRegion {
            lat: point.lat,
            lon: point.lon,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAN_FRANCISCO: LatLon = LatLon {
        lat: 37.7749,
        lon: -122.4194,
    };

    #[test]
    fn bundled_data_loads() {
        let db = RegionDb::bundled();
        assert!(db.regions.len() >= 5);
        for r in &db.regions {
            // the stored area should be in the same ballpark as the outline
            let outline: f64 = r.geometry.iter().map(|p| p.area_km2()).sum();
            let ratio = outline / r.area_km2;
            assert!(
                (0.5..2.0).contains(&ratio),
                "{}: outline/area = {ratio}",
                r.id
            );
        }
    }

    #[test]
    fn san_francisco_resolves_to_california() {
        let db = RegionDb::bundled();
        assert!(db.region("US").unwrap().contains(SAN_FRANCISCO));
        assert_eq!(db.resolve(SAN_FRANCISCO).unwrap().id, "US-CA");
    }

    #[test]
    fn point_only_in_usa() {
        // Kansas
        let db = RegionDb::bundled();
        assert_eq!(db.resolve(LatLon::new(38.5, -98.0)).unwrap().id, "US");
    }

    #[test]
    fn mid_ocean_has_no_region() {
        let db = RegionDb::bundled();
        assert!(matches!(
            db.resolve(LatLon::new(30.0, -40.0)),
            Err(CarbonError::NoRegion { .. })
        ));
    }

    #[test]
    fn major_cities() {
        let db = RegionDb::bundled();
        let cases = [
            (45.50, -73.57, "CA-QC"),
            (59.44, 24.75, "EE"),
            (43.65, -79.38, "CA-ON"),
            (48.86, 2.35, "FR"),
            (52.52, 13.40, "DE"),
            (51.51, -0.13, "GB"),
            (53.35, -6.26, "IE"),
        ];
        for (lat, lon, id) in cases {
            assert_eq!(
                db.resolve(LatLon::new(lat, lon)).unwrap().id,
                id,
                "{lat},{lon}"
            );
        }
    }

    #[test]
    fn tie_broken_by_id() {
        let square = Polygon::from(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]);
        let mk = |id: &str| Region {
            id: id.into(),
            display_name: id.into(),
            country: "USA".into(),
            geometry: vec![square.clone()],
            area_km2: 10.0,
            avg_intensity_g_per_kwh: 1.0,
            source: "test".into(),
            year: 2017,
            realtime: None,
        };
        let regions = vec![mk("b"), mk("a")];
        assert_eq!(
            resolve_region(LatLon::new(0.5, 0.5), &regions).unwrap().id,
            "a"
        );
    }

    #[test]
    fn lookup_across_tables() {
        let db = RegionDb::bundled();
        assert_eq!(db.lookup("coal").unwrap().g_per_kwh, 820.0);
        let cloud = db.lookup("aws:us-west-1").unwrap();
        assert!(cloud.cloud);
        assert_eq!(cloud.g_per_kwh, db.lookup("US-CA").unwrap().g_per_kwh);
        assert!(matches!(
            db.lookup("XX"),
            Err(CarbonError::UnknownRegion(_))
        ));
    }

    #[test]
    fn quebec_is_much_cleaner_than_estonia() {
        let db = RegionDb::bundled();
        let qc = db.lookup("CA-QC").unwrap().g_per_kwh;
        let ee = db.lookup("EE").unwrap().g_per_kwh;
        assert!(qc * 30.0 <= ee * 1.1);
    }
}
