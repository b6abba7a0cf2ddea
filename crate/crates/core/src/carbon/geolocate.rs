//! Locating a run: an explicit region override, or an IP-geolocation lookup.

use std::net::IpAddr;
use std::time::Duration;

use serde::Deserialize;

use super::geometry::LatLon;
use super::CarbonError;

/// Environment variable naming a region id that bypasses geolocation.
pub const REGION_OVERRIDE_ENV: &str = "IMPACT_REGION_OVERRIDE";

const DEFAULT_ENDPOINT: &str = "http://ip-api.com/json/";

#[derive(Debug, Clone, PartialEq)]
pub enum Location {
    Region(String),
    Point(LatLon),
}

pub trait GeoProvider {
    /// Coordinates for `ip`, or for the caller's public address when `None`.
    fn locate(&self, ip: Option<IpAddr>) -> Result<LatLon, CarbonError>;
}

/// Queries an ip-api style JSON endpoint that answers with `lat` and `lon`.
#[derive(Debug, Clone)]
pub struct HttpGeoProvider {
    pub endpoint: String,
    pub timeout: Duration,
}

impl Default for HttpGeoProvider {
    fn default() -> Self {
        HttpGeoProvider {
            endpoint: DEFAULT_ENDPOINT.to_string(),
            timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Deserialize)]
struct GeoResponse {
    lat: f64,
    lon: f64,
}

impl GeoProvider for HttpGeoProvider {
    fn locate(&self, ip: Option<IpAddr>) -> Result<LatLon, CarbonError> {
        let url = match ip {
            Some(ip) => format!("{}{ip}", self.endpoint),
            None => self.endpoint.clone(),
        };
        let body = ureq::get(&url)
            .timeout(self.timeout)
            .call()
            .map_err(|e| CarbonError::GeolocationUnavailable(e.to_string()))?
            .into_string()
            .map_err(|e| CarbonError::GeolocationUnavailable(e.to_string()))?;
        parse_geo_response(&body)
    }
}

pub fn parse_geo_response(body: &str) -> Result<LatLon, CarbonError> {
    let r: GeoResponse = serde_json::from_str(body)
        .map_err(|e| CarbonError::GeolocationUnavailable(format!("bad response: {e}")))?;
    if !(-90.0..=90.0).contains(&r.lat) || !(-180.0..=180.0).contains(&r.lon) {
        return Err(CarbonError::GeolocationUnavailable(format!(
            "coordinates out of range: {}, {}",
            r.lat, r.lon
        )));
    }
    Ok(LatLon::new(r.lat, r.lon))
}

/// Never touches the network.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineProvider;

impl GeoProvider for OfflineProvider {
    fn locate(&self, _ip: Option<IpAddr>) -> Result<LatLon, CarbonError> {
        Err(CarbonError::GeolocationUnavailable("offline".into()))
    }
}

/// The flag value if given, else the environment override.
pub fn region_override(flag: Option<&str>) -> Option<String> {
    flag.map(str::to_string)
        .or_else(|| std::env::var(REGION_OVERRIDE_ENV).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

pub fn geolocate(
    ip: Option<IpAddr>,
    provider: &dyn GeoProvider,
    override_region: Option<&str>,
) -> Result<Location, CarbonError> {
    if let Some(region) = override_region {
        return Ok(Location::Region(region.to_string()));
    }
    provider.locate(ip).map(Location::Point)
}
