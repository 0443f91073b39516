use crate::error::{Error, Result};
use crate::network::OdPairSet;

/// Vectorised O-D demand `g` (vehicles/hour) over an [`OdPairSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct OdMatrix {
    pairs: OdPairSet,
    values: Vec<f64>,
}

impl OdMatrix {
    pub fn new(pairs: OdPairSet, values: Vec<f64>) -> Result<Self> {
        if values.len() != pairs.len() {
            return Err(Error::InvalidInput(format!(
                "demand vector has {} entries, pair set has {}",
                values.len(),
                pairs.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!("invalid demand value {v}")));
        }
        Ok(OdMatrix { pairs, values })
    }

    pub fn zeros(pairs: OdPairSet) -> Self {
        OdMatrix {
            values: vec![0.0; pairs.len()],
            pairs,
        }
    }

    pub fn pairs(&self) -> OdPairSet {
        self.pairs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, origin: usize, dest: usize) -> f64 {
        self.pairs.index(origin, dest).map_or(0.0, |i| self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}
