use serde::{Deserialize, Serialize};

use super::SensorError;

/// Running state of one wrapping microjoule energy counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCounterState {
    pub domain: String,
    pub last_raw_uj: u64,
    pub max_range_uj: u64,
    pub accumulated_j: f64,
}

impl EnergyCounterState {
    pub fn new(domain: impl Into<String>, initial_raw_uj: u64, max_range_uj: u64) -> Self {
        EnergyCounterState {
            domain: domain.into(),
            last_raw_uj: initial_raw_uj.min(max_range_uj),
            max_range_uj,
            accumulated_j: 0.0,
        }
    }

    /// Consume a new raw reading and return the energy delta in microjoules.
    /// A reading below the previous one is taken as exactly one wrap.
    pub fn advance(&mut self, new_raw_uj: u64) -> Result<u64, SensorError> {
        if new_raw_uj > self.max_range_uj {
            return Err(SensorError::RangeViolation {
                domain: self.domain.clone(),
                raw: new_raw_uj,
                max: self.max_range_uj,
            });
        }
        let delta = if new_raw_uj >= self.last_raw_uj {
            new_raw_uj - self.last_raw_uj
        } else {
            (self.max_range_uj - self.last_raw_uj) + new_raw_uj
        };
        self.last_raw_uj = new_raw_uj;
        self.accumulated_j += delta as f64 * 1e-6;
        Ok(delta)
    }
}

pub fn advance_energy_counter(
    state: &EnergyCounterState,
    new_raw_uj: u64,
) -> Result<EnergyCounterState, SensorError> {
    let mut next = state.clone();
    next.advance(new_raw_uj)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_increase() {
        let mut s = EnergyCounterState::new("package-0", 100, 1000);
        assert_eq!(s.advance(300).unwrap(), 200);
        assert!((s.accumulated_j - 200e-6).abs() < 1e-15);
    }

    #[test]
    fn single_wrap() {
        let s = EnergyCounterState::new("package-0", 950, 1000);
        let next = advance_energy_counter(&s, 50).unwrap();
        // (max - last) + new
        assert_eq!(next.accumulated_j, ((1000 - 950) + 50) as f64 * 1e-6);
        assert_eq!(next.last_raw_uj, 50);
    }

    #[test]
    fn identity() {
        let mut s = EnergyCounterState::new("dram", 0, 1000);
        assert_eq!(s.advance(0).unwrap(), 0);
        assert_eq!(s.accumulated_j, 0.0);
    }

    #[test]
    fn out_of_range() {
        let mut s = EnergyCounterState::new("dram", 0, 1000);
        assert!(matches!(
            s.advance(1001),
            Err(SensorError::RangeViolation { raw: 1001, .. })
        ));
        assert_eq!(s.last_raw_uj, 0);
    }

    proptest! {
        #[test]
        fn accumulated_never_decreases(
            max in 1u64..=u32::MAX as u64,
            raws in proptest::collection::vec(any::<u64>(), 1..64),
        ) {
            let mut s = EnergyCounterState::new("d", 0, max);
            let mut prev = s.accumulated_j;
            for r in raws {
                let r = r % (max + 1);
                s.advance(r).unwrap();
                prop_assert!(s.accumulated_j >= prev);
                prop_assert!(s.last_raw_uj <= s.max_range_uj);
                prev = s.accumulated_j;
            }
        }
    }
}
