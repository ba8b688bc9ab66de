//! Sources of approximate counterfactuals.

pub mod prompt;
pub mod remote;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;
use crate::graph::{CausalGraph, EffectKind, GraphError, Intervention, NodeRole};
use crate::model::{ExplainedModel, ModelError};
use crate::rng::seeded;
use crate::scm::{Scm, ScmError};

pub use prompt::{render_prompt, PromptDomain, Template};
pub use remote::{remote_call, RemoteConfig, RemoteProvider};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("missing template field `{0}`")]
    MissingField(String),
    #[error("credential variable `{0}` is not set")]
    AuthMissing(String),
    #[error("remote endpoint unavailable after {attempts} attempts: {last}")]
    RemoteUnavailable { attempts: u32, last: String },
    #[error("unparsable completion: {0}")]
    ParseFailure(String),
    #[error("no counterfactual survived ({0})")]
    NoSurvivors(FailureCounts),
    #[error("example `{0}` has no exogenous seed; oracle providers need simulated data")]
    MissingExoSeed(String),
    #[error("no counterfactual available for `{0}`")]
    Unavailable(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-reason counts of discarded generations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCounts {
    pub empty: usize,
    pub refusal: usize,
    pub missing_embedding: usize,
}

impl FailureCounts {
    pub fn total(&self) -> usize {
        self.empty + self.refusal + self.missing_embedding
    }

    pub fn absorb(&mut self, other: FailureCounts) {
        self.empty += other.empty;
        self.refusal += other.refusal;
        self.missing_embedding += other.missing_embedding;
    }
}

impl std::fmt::Display for FailureCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "empty={}, refusal={}, missing_embedding={}",
            self.empty, self.refusal, self.missing_embedding
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    NoisyOracle,
    PredictionOracle,
    Remote,
    Human,
}

/// A surrogate for the gold counterfactual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxCounterfactual {
    pub id: String,
    pub features: Vec<f64>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    /// Model output to use instead of `f(features)`, for providers that
    /// perturb in prediction space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Vec<f64>>,
}

impl ApproxCounterfactual {
    pub fn predict(&self, model: &dyn ExplainedModel) -> Result<Vec<f64>, ModelError> {
        match &self.prediction {
            Some(p) => Ok(p.clone()),
            None => model.predict(&self.features),
        }
    }
}

/// A worked example for few-shot prompting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub text: String,
    pub counterfactual: String,
    pub intervention: Intervention,
}

impl Demonstration {
    pub(crate) fn as_request(&self, like: &CfRequest) -> CfRequest {
        let mut req = like.clone();
        req.intervention = self.intervention.clone();
        req
    }
}

/// Everything a provider needs to produce counterfactuals for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct CfRequest {
    pub base: Example,
    pub intervention: Intervention,
    /// Concepts to keep fixed.
    pub hold_fixed: BTreeSet<String>,
    /// Non-adjusted concepts the edit may affect (mediators, colliders).
    pub mention: BTreeSet<String>,
    pub effect: EffectKind,
    pub count: usize,
    /// Positions of the source and target values in the concept's domain.
    pub value_positions: Option<(usize, usize)>,
    pub demonstrations: Vec<Demonstration>,
    /// Extra template fields (`DOMAIN`, `DESCRIPTION`, ...).
    pub fields: BTreeMap<String, String>,
}

impl CfRequest {
    /// Derives the hold-fixed and mention sets from `graph` for the effect
    /// of `iv` on the model output.
    pub fn new(
        graph: &CausalGraph,
        base: &Example,
        iv: &Intervention,
        effect: EffectKind,
        count: usize,
    ) -> Result<Self, ProviderError> {
        let (_, s, t) = iv.resolve(graph)?;
        let outcome = graph.model_node();
        let hold_fixed = graph.hold_fixed_set(&iv.treatment, outcome, effect)?;
        let mut mention = graph.concepts_with_role(&iv.treatment, outcome, NodeRole::Mediator)?;
        mention.extend(graph.concepts_with_role(&iv.treatment, outcome, NodeRole::Collider)?);
        let mention = mention.difference(&hold_fixed).cloned().collect();
        let req = Self {
            base: base.clone(),
            intervention: iv.clone(),
            hold_fixed,
            mention,
            effect,
            count,
            value_positions: Some((s, t)),
            demonstrations: Vec::new(),
            fields: BTreeMap::new(),
        };
        req.validate(graph)?;
        Ok(req)
    }

    pub fn validate(&self, graph: &CausalGraph) -> Result<(), ProviderError> {
        if self.count == 0 {
            return Err(ProviderError::InvalidRequest(
                "count must be at least 1".into(),
            ));
        }
        if self.hold_fixed.contains(&self.intervention.treatment) {
            return Err(ProviderError::InvalidRequest(
                "the treatment cannot be held fixed".into(),
            ));
        }
        if self.effect == EffectKind::Direct {
            let mediators = graph.concepts_with_role(
                &self.intervention.treatment,
                graph.model_node(),
                NodeRole::Mediator,
            )?;
            if !mediators.is_subset(&self.hold_fixed) {
                return Err(ProviderError::InvalidRequest(
                    "direct effects hold every mediator fixed".into(),
                ));
            }
        }
        Ok(())
    }

    fn cf_id(&self, i: usize) -> String {
        format!("{}~{}#{i}", self.base.id, self.intervention)
    }
}

/// Outcome of one generation call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Generation {
    pub cfs: Vec<ApproxCounterfactual>,
    pub failures: FailureCounts,
}

pub trait CfProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Up to `req.count` counterfactuals; errors with [`ProviderError::NoSurvivors`]
    /// when every generation was discarded.
    fn generate(&self, req: &CfRequest, seed: u64) -> Result<Generation, ProviderError>;
}

fn gold_features(scm: &Scm, req: &CfRequest) -> Result<Vec<f64>, ProviderError> {
    let seed = req
        .base
        .exo_seed
        .ok_or_else(|| ProviderError::MissingExoSeed(req.base.id.clone()))?;
    let unit = scm.unit_from_seed(&req.base.id, seed);
    Ok(scm.gold_counterfactual(&unit, &req.intervention)?.features)
}

/// Returns the gold counterfactual itself.
pub struct Oracle<'a> {
    scm: &'a Scm,
}

impl<'a> Oracle<'a> {
    pub fn new(scm: &'a Scm) -> Self {
        Self { scm }
    }
}

impl CfProvider for Oracle<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn generate(&self, req: &CfRequest, _seed: u64) -> Result<Generation, ProviderError> {
        let features = gold_features(self.scm, req)?;
        Ok(Generation {
            cfs: (0..req.count)
                .map(|i| ApproxCounterfactual {
                    id: req.cf_id(i),
                    features: features.clone(),
                    provenance: Provenance::Oracle,
                    raw_text: None,
                    prediction: None,
                })
                .collect(),
            failures: FailureCounts::default(),
        })
    }
}

/// Gold counterfactual plus independent zero-mean Gaussian noise on every
/// feature coordinate not written by a held-fixed concept (hidden
/// coordinates are never touched).
pub struct NoisyOracle<'a> {
    scm: &'a Scm,
    scale: Vec<f64>,
}

impl<'a> NoisyOracle<'a> {
    /// Noise with standard deviation `sigma` on every coordinate.
    pub fn uniform(scm: &'a Scm, sigma: f64) -> Self {
        Self {
            scm,
            scale: vec![sigma; scm.feature_dim()],
        }
    }

    /// Noise with standard deviation `sigma * std_j` on coordinate `j`,
    /// where `std_j` is the empirical standard deviation over `reference`.
    pub fn relative(scm: &'a Scm, sigma: f64, reference: &[Example]) -> Self {
        let d = scm.feature_dim();
        let n = reference.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for e in reference {
            for (m, x) in mean.iter_mut().zip(&e.features) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for e in reference {
            for ((v, x), m) in var.iter_mut().zip(&e.features).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        Self {
            scm,
            scale: var.into_iter().map(|v| sigma * v.sqrt()).collect(),
        }
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }
}

impl CfProvider for NoisyOracle<'_> {
    fn name(&self) -> &str {
        "noisy_oracle"
    }

    fn generate(&self, req: &CfRequest, seed: u64) -> Result<Generation, ProviderError> {
        let gold = gold_features(self.scm, req)?;
        let graph = self.scm.graph();
        let held: Vec<usize> = req
            .hold_fixed
            .iter()
            .filter_map(|c| graph.concept_index(c))
            .collect();
        let mut frozen = self.scm.coords_touched_by(&held);
        for &h in self.scm.hidden_coords() {
            frozen[h] = true;
        }
        let mut rng = seeded(seed);
        let cfs = (0..req.count)
            .map(|i| {
                let mut x = gold.clone();
                for (j, v) in x.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if !frozen[j] {
                        *v += self.scale[j] * z;
                    }
                }
                ApproxCounterfactual {
                    id: req.cf_id(i),
                    features: x,
                    provenance: Provenance::NoisyOracle,
                    raw_text: None,
                    prediction: None,
                }
            })
            .collect();
        Ok(Generation {
            cfs,
            failures: FailureCounts::default(),
        })
    }
}

/// Gold counterfactual whose model output is perturbed directly: the
/// perturbation is symmetric in sign and sums to zero, so the perturbed
/// prediction has exactly the gold prediction as its mean and stays on the
/// simplex.
pub struct PredictionOracle<'a> {
    scm: &'a Scm,
    model: &'a dyn ExplainedModel,
    sigma: f64,
}

impl<'a> PredictionOracle<'a> {
    pub fn new(scm: &'a Scm, model: &'a dyn ExplainedModel, sigma: f64) -> Self {
        Self { scm, model, sigma }
    }
}

/// `p + lambda * eta` with `eta = sigma (z - mean z)` and the largest
/// `lambda <= 1` keeping every entry nonnegative. `lambda` depends on
/// `|eta|` only, so the result is unbiased for symmetric `z`.
pub fn perturb_prediction(p: &[f64], z: &[f64], sigma: f64) -> Vec<f64> {
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let eta: Vec<f64> = z.iter().map(|v| sigma * (v - mean)).collect();
    let mut lambda: f64 = 1.0;
    for (pc, ec) in p.iter().zip(&eta) {
        if ec.abs() > 0.0 {
            lambda = lambda.min(pc / ec.abs());
        }
    }
    p.iter()
        .zip(&eta)
        .map(|(pc, ec)| pc + lambda * ec)
        .collect()
}

impl CfProvider for PredictionOracle<'_> {
    fn name(&self) -> &str {
        "prediction_oracle"
    }

    fn generate(&self, req: &CfRequest, seed: u64) -> Result<Generation, ProviderError> {
        let gold = gold_features(self.scm, req)?;
        let p = self.model.predict(&gold)?;
        let mut rng = seeded(seed);
        let cfs = (0..req.count)
            .map(|i| {
                let z: Vec<f64> = (0..p.len())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                ApproxCounterfactual {
                    id: req.cf_id(i),
                    features: gold.clone(),
                    provenance: Provenance::PredictionOracle,
                    raw_text: None,
                    prediction: Some(perturb_prediction(&p, &z, self.sigma)),
                }
            })
            .collect();
        Ok(Generation {
            cfs,
            failures: FailureCounts::default(),
        })
    }
}

/// Precomputed counterfactuals keyed by (example id, intervention), e.g.
/// human-written edits.
#[derive(Default)]
pub struct StaticProvider {
    table: HashMap<(String, Intervention), Vec<Vec<f64>>>,
}

impl StaticProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, iv: &Intervention, features: Vec<f64>) {
        self.table
            .entry((id.to_string(), iv.clone()))
            .or_default()
            .push(features);
    }
}

impl CfProvider for StaticProvider {
    fn name(&self) -> &str {
        "human"
    }

    fn generate(&self, req: &CfRequest, _seed: u64) -> Result<Generation, ProviderError> {
        let items = self
            .table
            .get(&(req.base.id.clone(), req.intervention.clone()))
            .ok_or_else(|| ProviderError::Unavailable(req.cf_id(0)))?;
        Ok(Generation {
            cfs: items
                .iter()
                .take(req.count)
                .enumerate()
                .map(|(i, x)| ApproxCounterfactual {
                    id: req.cf_id(i),
                    features: x.clone(),
                    provenance: Provenance::Human,
                    raw_text: None,
                    prediction: None,
                })
                .collect(),
            failures: FailureCounts::default(),
        })
    }
}
