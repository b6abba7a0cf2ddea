//! Country-level social cost of carbon.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CarbonError;
use crate::reporting::round_half_even;

const BUNDLED_SCC: &str = include_str!("../../data/scc.csv");

/// Dollars per metric ton of CO₂.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SccEntry {
    pub country: String,
    #[serde(rename = "median_usd_per_tco2")]
    pub median: f64,
    #[serde(rename = "low_usd_per_tco2")]
    pub low: f64,
    #[serde(rename = "high_usd_per_tco2")]
    pub high: f64,
    #[serde(default)]
    pub source: String,
}

impl SccEntry {
    pub fn validate(&self) -> Result<(), CarbonError> {
        if !(self.low <= self.median && self.median <= self.high) {
            return Err(CarbonError::InvalidData(format!(
                "{}: need low <= median <= high",
                self.country
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SccTable {
    entries: BTreeMap<String, SccEntry>,
}

impl SccTable {
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_SCC).expect("bundled SCC data is valid")
    }

    pub fn from_csv(text: &str) -> Result<Self, CarbonError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut entries = BTreeMap::new();
        for row in reader.deserialize() {
            let entry: SccEntry = row.map_err(|e| CarbonError::InvalidData(e.to_string()))?;
            entry.validate()?;
            entries.insert(entry.country.to_ascii_uppercase(), entry);
        }
        Ok(SccTable { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, CarbonError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CarbonError::InvalidData(format!("{}: {e}", path.display())))?;
        Self::from_csv(&text)
    }

    pub fn get(&self, country: &str) -> Result<&SccEntry, CarbonError> {
        self.entries
            .get(&country.to_ascii_uppercase())
            .ok_or_else(|| CarbonError::UnknownCountry(country.to_string()))
    }

    pub fn countries(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Dollar damage of an emission, median with low/high bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SocialCost {
    pub median: f64,
    pub low: f64,
    pub high: f64,
}

impl SocialCost {
    pub fn rounded(&self) -> Self {
        SocialCost {
            median: round_half_even(self.median, 2),
            low: round_half_even(self.low, 2),
            high: round_half_even(self.high, 2),
        }
    }
}

impl fmt::Display for SocialCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.rounded();
        write!(
            f,
            "{} ({}, {})",
            dollars(r.median),
            dollars(r.low),
            dollars(r.high)
        )
    }
}

fn dollars(v: f64) -> String {
    // avoid printing "-$0.00"
    let v = if v == 0.0 { 0.0 } else { v };
    if v < 0.0 {
        format!("-${:.2}", -v)
    } else {
        format!("${v:.2}")
    }
}

/// Social cost of `kg` CO₂eq, each bound rounded half-even to cents.
pub fn social_cost(kg: f64, entry: &SccEntry) -> SocialCost {
    let t = kg / 1000.0;
    SocialCost {
        median: t * entry.median,
        low: t * entry.low,
        high: t * entry.high,
    }
    .rounded()
}
