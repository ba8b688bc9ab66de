//! Per-concept linear classifiers over features, and labelling of
//! unannotated examples.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Example};
use crate::model::softmax_in_place;
use crate::provider::prompt::fill;
use crate::provider::{remote_call, PromptDomain, ProviderError, RemoteConfig};
use crate::rng::seeded;
use crate::scm::Scm;

const LABEL_PROMPT: &str = include_str!("../assets/prompts/label.txt");

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("predictor for `{concept}` expects {expected} features, got {got}")]
    DimensionMismatch {
        concept: String,
        expected: usize,
        got: usize,
    },
    #[error("no labelled examples for `{0}`")]
    NoLabels(String),
    #[error("`{concept}` has no value `{value}`")]
    UnknownValue { concept: String, value: String },
    #[error("no predictor for `{0}`")]
    Missing(String),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptPredictor {
    pub concept: String,
    pub domain: Vec<String>,
    pub dim: usize,
    /// Row-major `domain.len() x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorHyper {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub l2: f64,
    /// Standard deviation of the initial weights.
    #[serde(default)]
    pub init_scale: f64,
}

impl Default for PredictorHyper {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 200,
            seed: 0,
            l2: 0.0,
            init_scale: 0.0,
        }
    }
}

/// Training trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    /// Loss before each epoch's update, then the final loss.
    pub losses: Vec<f64>,
    /// Domain values that never occur in the training labels.
    pub empty_classes: Vec<String>,
    pub train_accuracy: f64,
}

impl ConceptPredictor {
    pub fn zeros(concept: &str, domain: &[String], dim: usize) -> Self {
        Self {
            concept: concept.to_string(),
            domain: domain.to_vec(),
            dim,
            weights: vec![0.0; domain.len() * dim],
            bias: vec![0.0; domain.len()],
        }
    }

    pub fn classes(&self) -> usize {
        self.domain.len()
    }

    pub fn value_index(&self, value: &str) -> Result<usize, ConceptError> {
        self.domain
            .iter()
            .position(|v| v == value)
            .ok_or_else(|| ConceptError::UnknownValue {
                concept: self.concept.clone(),
                value: value.to_string(),
            })
    }

    pub fn distribution(&self, x: &[f64]) -> Result<Vec<f64>, ConceptError> {
        if x.len() != self.dim {
            return Err(ConceptError::DimensionMismatch {
                concept: self.concept.clone(),
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut z = self.bias.clone();
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            *zc += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Most likely value; ties go to the lexicographically smallest value.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>), ConceptError> {
        let dist = self.distribution(x)?;
        let mut best = 0;
        for c in 1..dist.len() {
            if dist[c] > dist[best] || (dist[c] == dist[best] && self.domain[c] < self.domain[best])
            {
                best = c;
            }
        }
        Ok((best, dist))
    }

    pub fn predict_value(&self, x: &[f64]) -> Result<&str, ConceptError> {
        let (i, _) = self.predict(x)?;
        Ok(&self.domain[i])
    }

    /// Propensity `P(concept = value | x)`.
    pub fn propensity(&self, x: &[f64], value: usize) -> Result<f64, ConceptError> {
        Ok(self.distribution(x)?[value])
    }

    fn flat_params(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    fn set_flat_params(&mut self, p: &[f64]) {
        let n = self.weights.len();
        self.weights.copy_from_slice(&p[..n]);
        self.bias.copy_from_slice(&p[n..]);
    }

    /// Mean cross-entropy plus `l2/2 * |W|^2` and its gradient with respect
    /// to `[weights, bias]`.
    pub fn loss_and_grad(&self, xs: &[&[f64]], ys: &[usize], l2: f64) -> (f64, Vec<f64>) {
        let k = self.classes();
        let d = self.dim;
        let n = xs.len().max(1) as f64;
        let mut grad = vec![0.0; k * d + k];
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let p = self.distribution(x).expect("dimension checked by caller");
            loss -= p[y].max(f64::MIN_POSITIVE).ln() / n;
            for c in 0..k {
                let r = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
                for j in 0..d {
                    grad[c * d + j] += r * x[j];
                }
                grad[k * d + c] += r;
            }
        }
        for (g, w) in grad.iter_mut().zip(&self.weights) {
            *g += l2 * w;
        }
        loss += 0.5 * l2 * self.weights.iter().map(|w| w * w).sum::<f64>();
        (loss, grad)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Full-batch gradient descent on the examples that carry a label for
/// `concept`.
pub fn train_predictor(
    examples: &[&Example],
    concept: &str,
    domain: &[String],
    hyper: &PredictorHyper,
) -> Result<(ConceptPredictor, TrainTrace), ConceptError> {
    let mut xs: Vec<&[f64]> = Vec::new();
    let mut ys = Vec::new();
    for e in examples {
        if let Some(v) = e.concept(concept) {
            let y =
                domain
                    .iter()
                    .position(|d| d == v)
                    .ok_or_else(|| ConceptError::UnknownValue {
                        concept: concept.to_string(),
                        value: v.to_string(),
                    })?;
            xs.push(&e.features);
            ys.push(y);
        }
    }
    if xs.is_empty() {
        return Err(ConceptError::NoLabels(concept.to_string()));
    }
    let dim = xs[0].len();
    for x in &xs {
        if x.len() != dim {
            return Err(ConceptError::DimensionMismatch {
                concept: concept.to_string(),
                expected: dim,
                got: x.len(),
            });
        }
    }
    let mut model = ConceptPredictor::zeros(concept, domain, dim);
    if hyper.init_scale > 0.0 {
        let normal = Normal::new(0.0, hyper.init_scale).expect("positive scale");
        let mut rng = seeded(hyper.seed);
        for w in &mut model.weights {
            *w = normal.sample(&mut rng);
        }
    }
    let mut trace = TrainTrace {
        empty_classes: domain
            .iter()
            .enumerate()
            .filter(|(c, _)| !ys.contains(c))
            .map(|(_, v)| v.clone())
            .collect(),
        ..TrainTrace::default()
    };
    if !trace.empty_classes.is_empty() {
        log::warn!(
            "`{concept}` has no training examples for {:?}; those values keep prior mass only",
            trace.empty_classes
        );
    }
    let mut params = model.flat_params();
    for epoch in 0..hyper.epochs {
        let (loss, grad) = model.loss_and_grad(&xs, &ys, hyper.l2);
        if !loss.is_finite() {
            return Err(ConceptError::Diverged(epoch));
        }
        trace.losses.push(loss);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= hyper.lr * g;
        }
        model.set_flat_params(&params);
    }
    trace.losses.push(model.loss_and_grad(&xs, &ys, hyper.l2).0);
    let correct = xs
        .iter()
        .zip(&ys)
        .filter(|(x, &y)| model.predict(x).map(|(p, _)| p == y).unwrap_or(false))
        .count();
    trace.train_accuracy = correct as f64 / xs.len() as f64;
    Ok((model, trace))
}

/// One predictor per concept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorSet {
    pub predictors: BTreeMap<String, ConceptPredictor>,
}

impl PredictorSet {
    pub fn get(&self, concept: &str) -> Result<&ConceptPredictor, ConceptError> {
        self.predictors
            .get(concept)
            .ok_or_else(|| ConceptError::Missing(concept.to_string()))
    }

    /// Trains a predictor for every observed concept of `scm`'s graph.
    pub fn train(
        examples: &[&Example],
        concepts: &[(String, Vec<String>)],
        hyper: &PredictorHyper,
    ) -> Result<(Self, BTreeMap<String, TrainTrace>), ConceptError> {
        let mut set = Self::default();
        let mut traces = BTreeMap::new();
        for (name, domain) in concepts {
            let (p, t) = train_predictor(examples, name, domain, hyper)?;
            set.predictors.insert(name.clone(), p);
            traces.insert(name.clone(), t);
        }
        Ok((set, traces))
    }

    /// Predicted value index of every concept for `x`.
    pub fn predict_all(&self, x: &[f64]) -> Result<BTreeMap<String, usize>, ConceptError> {
        self.predictors
            .iter()
            .map(|(n, p)| Ok((n.clone(), p.predict(x)?.0)))
            .collect()
    }
}

/// Where zero-shot labels come from.
pub enum Labeler<'a> {
    /// Reads true concept values from the simulator: a perfect labeller.
    Oracle(&'a Scm),
    Remote {
        config: &'a RemoteConfig,
        domain: &'a PromptDomain,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LabelReport {
    pub filled: usize,
    /// `(example id, concept, reason)` for every label that could not be
    /// produced.
    pub dropped: Vec<(String, String, String)>,
}

/// Matches the first word of `completion` against `domain`, ignoring case
/// and surrounding punctuation.
pub fn parse_label<'d>(completion: &str, domain: &'d [String]) -> Option<&'d str> {
    let word = completion
        .split_whitespace()
        .next()?
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    domain
        .iter()
        .find(|v| v.to_lowercase() == word)
        .map(String::as_str)
}

pub fn label_prompt(
    ex: &Example,
    concept: &str,
    values: &[String],
    domain: &PromptDomain,
) -> Result<String, ProviderError> {
    let display = domain
        .concepts
        .iter()
        .find(|c| c.name == concept)
        .map(|c| c.display.clone())
        .ok_or_else(|| ProviderError::MissingField(format!("display name of `{concept}`")))?;
    let text = ex
        .text
        .clone()
        .ok_or_else(|| ProviderError::MissingField("TEXT".into()))?;
    let f = BTreeMap::from([
        ("INTRO", domain.intro.clone()),
        ("ITEM", domain.item.clone()),
        ("TEXT", text),
        ("CONCEPT_UPPER", display.to_uppercase()),
        ("VALUES", values.join(", ")),
    ]);
    fill(LABEL_PROMPT.trim_end_matches('\n'), &f)
}

/// Fills every missing observed-concept label in `dataset`. Items whose
/// label cannot be produced are left unlabelled and reported.
pub fn zero_shot_labels(
    dataset: &mut Dataset,
    concepts: &[(String, Vec<String>)],
    labeler: &Labeler<'_>,
    seed: u64,
) -> LabelReport {
    let mut report = LabelReport::default();
    for ex in &mut dataset.examples {
        for (name, values) in concepts {
            if ex.concepts.contains_key(name) {
                continue;
            }
            let outcome: Result<String, String> = match labeler {
                Labeler::Oracle(scm) => match (ex.exo_seed, scm.graph().concept_index(name)) {
                    (Some(s), Some(ci)) => {
                        let unit = scm.unit_from_seed(&ex.id, s);
                        Ok(scm.graph().concepts()[ci].domain[unit.concepts[ci]].clone())
                    }
                    (None, _) => Err("no exogenous seed".into()),
                    (_, None) => Err("concept not in the simulator".into()),
                },
                Labeler::Remote { config, domain } => label_prompt(ex, name, values, domain)
                    .and_then(|p| remote_call(config, &p, 1, seed))
                    .map_err(|e| e.to_string())
                    .and_then(|c| {
                        let first = c.first().map(String::as_str).unwrap_or("");
                        parse_label(first, values)
                            .map(str::to_string)
                            .ok_or_else(|| format!("unparsable label `{}`", first.trim()))
                    }),
            };
            match outcome {
                Ok(v) => {
                    ex.concepts.insert(name.clone(), v);
                    report.filled += 1;
                }
                Err(reason) => report.dropped.push((ex.id.clone(), name.clone(), reason)),
            }
        }
    }
    report
}
