//! Black-box predictors over feature vectors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid model `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error("non-finite output from model `{0}`")]
    NonFinite(String),
    #[error("output leaves the probability simplex for model `{0}`")]
    OutOfSimplex(String),
    #[error("cannot shift expected class index {expected} by {shift}")]
    InfeasibleShift { expected: f64, shift: f64 },
}

/// A predictor `f` mapping a feature vector to a class distribution.
pub trait ExplainedModel: Send + Sync {
    fn id(&self) -> &str;
    fn class_count(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>, ModelError>;
}

/// Projection of a class distribution to a scalar: the expected class
/// index `sum_c c * p_c`. Every ordering comparison goes through this.
pub fn scalarize(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(c, p)| c as f64 * p).sum()
}

fn check_dim(expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

/// `softmax((W x + b) / temperature)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxModel {
    pub id: String,
    /// `[classes, features]`
    pub shape: [usize; 2],
    /// Row-major, one row per class.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default = "unit_temperature")]
    pub temperature: f64,
}

fn unit_temperature() -> f64 {
    1.0
}

impl LinearSoftmaxModel {
    pub fn new(
        id: &str,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
        temperature: f64,
    ) -> Result<Self, ModelError> {
        let k = weights.len();
        let d = weights.first().map_or(0, Vec::len);
        let model = Self {
            id: id.to_string(),
            shape: [k, d],
            weights: weights.into_iter().flatten().collect(),
            bias,
            temperature,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn zeros(id: &str, classes: usize, dim: usize) -> Self {
        Self {
            id: id.to_string(),
            shape: [classes, dim],
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: &str| ModelError::Invalid {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        let [k, d] = self.shape;
        if k < 2 {
            return Err(invalid("needs at least two classes"));
        }
        if self.weights.len() != k * d || self.bias.len() != k {
            return Err(invalid("weight or bias length disagrees with shape"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be positive and finite"));
        }
        if self
            .weights
            .iter()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(invalid("non-finite parameter"));
        }
        Ok(())
    }

    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        let [k, d] = self.shape;
        check_dim(d, features.len())?;
        Ok((0..k)
            .map(|c| {
                let row = &self.weights[c * d..(c + 1) * d];
                let dot: f64 = row.iter().zip(features).map(|(w, x)| w * x).sum();
                (dot + self.bias[c]) / self.temperature
            })
            .collect())
    }
}

impl ExplainedModel for LinearSoftmaxModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_count(&self) -> usize {
        self.shape[0]
    }

    fn feature_dim(&self) -> usize {
        self.shape[1]
    }

    fn predict(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut scores = self.scores(features)?;
        softmax_in_place(&mut scores);
        if scores.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite(self.id.clone()));
        }
        Ok(scores)
    }
}

/// `base + W x`, with the columns of `W` summing to zero so outputs always
/// sum to one. Linear in the features, which makes zero-mean feature noise
/// zero-mean in prediction space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbabilityModel {
    pub id: String,
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub base: Vec<f64>,
}

impl LinearProbabilityModel {
    pub fn new(id: &str, weights: Vec<Vec<f64>>, base: Vec<f64>) -> Result<Self, ModelError> {
        let k = weights.len();
        let d = weights.first().map_or(0, Vec::len);
        let model = Self {
            id: id.to_string(),
            shape: [k, d],
            weights: weights.into_iter().flatten().collect(),
            base,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: &str| ModelError::Invalid {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        let [k, d] = self.shape;
        if k < 2 || self.weights.len() != k * d || self.base.len() != k {
            return Err(invalid("shape mismatch"));
        }
        if (self.base.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("base must sum to one"));
        }
        for j in 0..d {
            let col: f64 = (0..k).map(|c| self.weights[c * d + j]).sum();
            if col.abs() > 1e-12 {
                return Err(invalid("weight columns must sum to zero"));
            }
        }
        Ok(())
    }
}

impl ExplainedModel for LinearProbabilityModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_count(&self) -> usize {
        self.shape[0]
    }

    fn feature_dim(&self) -> usize {
        self.shape[1]
    }

    fn predict(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        let [k, d] = self.shape;
        check_dim(d, features.len())?;
        let out: Vec<f64> = (0..k)
            .map(|c| {
                let row = &self.weights[c * d..(c + 1) * d];
                self.base[c] + row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        if out.iter().any(|p| *p < -1e-12 || *p > 1.0 + 1e-12) {
            return Err(ModelError::OutOfSimplex(self.id.clone()));
        }
        Ok(out)
    }
}

/// How a spurious coordinate enters the prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SpuriousMode {
    /// Adds `strength * x[coord]` to the log-score of `class`.
    Logit { class: usize },
    /// Moves the expected class index by exactly `strength * x[coord]` by
    /// mixing the base distribution toward the top or bottom class.
    ExpectedIndexShift,
}

/// A base model plus a dependence on one (possibly extra) feature
/// coordinate. The base model reads the first `base.feature_dim()`
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpuriousModel {
    pub id: String,
    pub base: Box<ModelSpec>,
    pub input_dim: usize,
    pub coord: usize,
    pub strength: f64,
    #[serde(flatten)]
    pub mode: SpuriousMode,
}

impl SpuriousModel {
    pub fn new(
        id: &str,
        base: ModelSpec,
        input_dim: usize,
        coord: usize,
        strength: f64,
        mode: SpuriousMode,
    ) -> Result<Self, ModelError> {
        let invalid = |reason: &str| ModelError::Invalid {
            id: id.to_string(),
            reason: reason.to_string(),
        };
        if coord >= input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: input_dim,
                got: coord + 1,
            });
        }
        if input_dim < base.feature_dim() {
            return Err(invalid("input narrower than the base model"));
        }
        if let SpuriousMode::Logit { class } = mode {
            if class >= base.class_count() {
                return Err(invalid("class out of range"));
            }
        }
        if !strength.is_finite() {
            return Err(invalid("non-finite strength"));
        }
        Ok(Self {
            id: id.to_string(),
            base: Box::new(base),
            input_dim,
            coord,
            strength,
            mode,
        })
    }
}

/// Adds `strength * x[coord]` to the score of `class`, reading the same
/// features as `base`.
pub fn spurious_model(
    base: ModelSpec,
    coord: usize,
    strength: f64,
    class: usize,
) -> Result<SpuriousModel, ModelError> {
    let id = format!("{}+spurious{coord}", base.id());
    let dim = base.feature_dim();
    SpuriousModel::new(
        &id,
        base,
        dim,
        coord,
        strength,
        SpuriousMode::Logit { class },
    )
}

/// Mixes `probs` toward the top (positive shift) or bottom class so the
/// expected class index moves by exactly `shift`.
pub fn shift_expected_index(probs: &mut [f64], shift: f64) -> Result<(), ModelError> {
    if shift == 0.0 {
        return Ok(());
    }
    let k = probs.len();
    let expected = scalarize(probs);
    let (room, target) = if shift > 0.0 {
        ((k - 1) as f64 - expected, k - 1)
    } else {
        (expected, 0)
    };
    let lambda = shift.abs() / room;
    if !(lambda <= 1.0) {
        return Err(ModelError::InfeasibleShift { expected, shift });
    }
    for p in probs.iter_mut() {
        *p *= 1.0 - lambda;
    }
    probs[target] += lambda;
    Ok(())
}

impl ExplainedModel for SpuriousModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_count(&self) -> usize {
        self.base.class_count()
    }

    fn feature_dim(&self) -> usize {
        self.input_dim
    }

    fn predict(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        check_dim(self.input_dim, features.len())?;
        let mut probs = self.base.predict(&features[..self.base.feature_dim()])?;
        let push = self.strength * features[self.coord];
        if push == 0.0 {
            return Ok(probs);
        }
        match self.mode {
            SpuriousMode::Logit { class } => {
                let mut scores: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
                scores[class] += push;
                softmax_in_place(&mut scores);
                probs = scores;
            }
            SpuriousMode::ExpectedIndexShift => shift_expected_index(&mut probs, push)?,
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFinite(self.id.clone()));
        }
        Ok(probs)
    }
}

/// Serializable union of the shipped model kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    LinearSoftmax(LinearSoftmaxModel),
    LinearProbability(LinearProbabilityModel),
    Spurious(SpuriousModel),
}

impl ModelSpec {
    fn inner(&self) -> &dyn ExplainedModel {
        match self {
            ModelSpec::LinearSoftmax(m) => m,
            ModelSpec::LinearProbability(m) => m,
            ModelSpec::Spurious(m) => m,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelSpec::LinearSoftmax(m) => m.validate(),
            ModelSpec::LinearProbability(m) => m.validate(),
            ModelSpec::Spurious(m) => m.base.validate(),
        }
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: ModelSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl ExplainedModel for ModelSpec {
    fn id(&self) -> &str {
        self.inner().id()
    }

    fn class_count(&self) -> usize {
        self.inner().class_count()
    }

    fn feature_dim(&self) -> usize {
        self.inner().feature_dim()
    }

    fn predict(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.inner().predict(features)
    }
}
