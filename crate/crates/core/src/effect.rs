//! Effect estimates shared by the simulator, estimators and reports.

use serde::{Deserialize, Serialize};

use crate::graph::Intervention;
use crate::model::scalarize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    Icace,
    Cace,
}

/// A per-class prediction difference, or a mean of such differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub intervention: Intervention,
    pub kind: EstimateKind,
    pub vector: Vec<f64>,
    pub n_contributors: usize,
    /// Set when fewer approximations than requested were available.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shortfall: bool,
}

impl EffectEstimate {
    pub fn zeros(intervention: Intervention, kind: EstimateKind, classes: usize) -> Self {
        Self {
            intervention,
            kind,
            vector: vec![0.0; classes],
            n_contributors: 0,
            shortfall: false,
        }
    }

    /// Effect on the expected class index.
    pub fn scalar(&self) -> f64 {
        scalarize(&self.vector)
    }
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn add_scaled(acc: &mut [f64], v: &[f64], w: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += w * x;
    }
}
