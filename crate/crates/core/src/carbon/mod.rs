//! Grid regions, carbon intensity and the social cost of carbon.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod geolocate;
pub mod geometry;
pub mod regions;
pub mod scc;

pub use geolocate::{geolocate, region_override, GeoProvider, Location, REGION_OVERRIDE_ENV};
pub use geometry::{point_in_polygon, LatLon, Polygon};
pub use regions::{resolve_region, IntensitySource, Region, RegionDb};
pub use scc::{social_cost, SccEntry, SccTable, SocialCost};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CarbonError {
    #[error("polygon has {0} vertices, need at least 3")]
    DegeneratePolygon(usize),
    #[error("no region contains ({lat}, {lon})")]
    NoRegion { lat: f64, lon: f64 },
    #[error("unknown region {0}")]
    UnknownRegion(String),
    #[error("unknown country {0}")]
    UnknownCountry(String),
    #[error("geolocation unavailable: {0}")]
    GeolocationUnavailable(String),
    #[error("invalid carbon data: {0}")]
    InvalidData(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityKind {
    Average,
    Realtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityRecord {
    pub region_id: String,
    pub g_per_kwh: f64,
    pub kind: IntensityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl IntensityRecord {
    pub fn validate(&self) -> Result<(), CarbonError> {
        if !(self.g_per_kwh >= 0.0) {
            return Err(CarbonError::InvalidData("negative intensity".into()));
        }
        if self.kind == IntensityKind::Realtime && self.timestamp.is_none() {
            return Err(CarbonError::InvalidData(
                "realtime intensity needs a timestamp".into(),
            ));
        }
        Ok(())
    }
}

/// kg CO₂eq for `kwh` at `g_per_kwh`.
pub fn compute_emissions(kwh: f64, g_per_kwh: f64) -> f64 {
    kwh * g_per_kwh / 1000.0
}

/// Emissions attached to a run. `kg_co2eq` is `None` when the region was
/// never resolved and only energy can be reported.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmissionsEstimate {
    pub kg_co2eq: Option<f64>,
    pub scc: Option<SocialCost>,
    pub country: Option<String>,
    pub region_id: Option<String>,
    pub basis: Option<IntensityKind>,
}

impl EmissionsEstimate {
    pub fn energy_only() -> Self {
        EmissionsEstimate::default()
    }

    pub fn average(kwh: f64, g_per_kwh: f64, region_id: &str, country: &str) -> Self {
        EmissionsEstimate {
            kg_co2eq: Some(compute_emissions(kwh, g_per_kwh)),
            scc: None,
            country: Some(country.to_string()),
            region_id: Some(region_id.to_string()),
            basis: Some(IntensityKind::Average),
        }
    }

    /// Attach the social cost for this estimate's country, when both known.
    pub fn with_scc(mut self, table: &SccTable) -> Self {
        if let (Some(kg), Some(country)) = (self.kg_co2eq, &self.country) {
            if let Ok(entry) = table.get(country) {
                self.scc = Some(social_cost(kg, entry));
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emissions_arithmetic() {
        assert_eq!(compute_emissions(1.0, 820.0), 0.82);
        assert_eq!(compute_emissions(1.0, 24.0), 0.024);
        assert_eq!(compute_emissions(0.0, 820.0), 0.0);
    }

    #[test]
    fn realtime_record_needs_timestamp() {
        let mut r = IntensityRecord {
            region_id: "US-CA".into(),
            g_per_kwh: 83.0,
            kind: IntensityKind::Realtime,
            timestamp: None,
        };
        assert!(r.validate().is_err());
        r.timestamp = Some(1.0);
        r.validate().unwrap();
    }
}
