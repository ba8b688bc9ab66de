//! Individual and average concept-effect estimators, and the
//! order-faithfulness audit.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::confound::{build_confounded_dgp, ConfoundReport};
use crate::data::Example;
use crate::effect::{add_scaled, sub, EffectEstimate, EstimateKind};
use crate::graph::{CausalGraph, EffectKind, GraphError, Intervention, NodeRole};
use crate::model::{ExplainedModel, ModelError, ModelSpec};
use crate::provider::{CfProvider, CfRequest, Oracle, PredictionOracle, ProviderError};
use crate::rng::stage_seed;
use crate::scm::{Scm, ScmError};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("no approximations to average")]
    NoApproximations,
    #[error("no unit contributed to the estimate of {0}")]
    NoContributors(Intervention),
    #[error("no labelled unit with `{treatment}` = `{value}`")]
    EmptyArm { treatment: String, value: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `f(x_tilde) - f(x)`.
pub fn icace_hat(
    model: &dyn ExplainedModel,
    iv: &Intervention,
    x: &[f64],
    x_tilde: &[f64],
) -> Result<EffectEstimate, EstimateError> {
    let after = model.predict(x_tilde)?;
    let before = model.predict(x)?;
    Ok(EffectEstimate {
        intervention: iv.clone(),
        kind: EstimateKind::Icace,
        vector: sub(&after, &before),
        n_contributors: 1,
        shortfall: false,
    })
}

/// Mean of the first `k` per-approximation differences against `base`, all
/// given as model outputs.
pub fn icace_from_predictions(
    iv: &Intervention,
    base: &[f64],
    approximations: &[Vec<f64>],
    k: usize,
) -> Result<EffectEstimate, EstimateError> {
    if approximations.is_empty() || k == 0 {
        return Err(EstimateError::NoApproximations);
    }
    let used = k.min(approximations.len());
    let mut mean = vec![0.0; base.len()];
    for p in &approximations[..used] {
        add_scaled(&mut mean, p, 1.0);
    }
    let vector = mean
        .iter()
        .zip(base)
        .map(|(m, b)| m / used as f64 - b)
        .collect();
    Ok(EffectEstimate {
        intervention: iv.clone(),
        kind: EstimateKind::Icace,
        vector,
        n_contributors: used,
        shortfall: used < k,
    })
}

/// Top-K ICaCE: the unweighted mean of the per-item ICaCEs of the first
/// `k` approximations (fewer is flagged as a shortfall).
pub fn icace_topk(
    model: &dyn ExplainedModel,
    iv: &Intervention,
    x: &[f64],
    approximations: &[Vec<f64>],
    k: usize,
) -> Result<EffectEstimate, EstimateError> {
    let preds = approximations
        .iter()
        .take(k)
        .map(|a| model.predict(a))
        .collect::<Result<Vec<_>, _>>()?;
    icace_from_predictions(iv, &model.predict(x)?, &preds, k)
}

/// Supplies the approximate model output of an example had its treatment
/// been set to `value`.
pub trait Approximator: Sync {
    fn predict_under(
        &self,
        ex: &Example,
        treatment: &str,
        value: &str,
        seed: u64,
    ) -> Result<Option<Vec<f64>>, EstimateError>;
}

/// Averages the outputs of up to `k` counterfactuals from a provider.
pub struct ProviderApproximator<'a> {
    provider: &'a dyn CfProvider,
    model: &'a dyn ExplainedModel,
    graph: &'a CausalGraph,
    effect: EffectKind,
    k: usize,
    sets: BTreeMap<String, (BTreeSet<String>, BTreeSet<String>)>,
}

impl<'a> ProviderApproximator<'a> {
    /// Hold-fixed and mention sets are derived from `graph` for every
    /// observed concept.
    pub fn new(
        provider: &'a dyn CfProvider,
        model: &'a dyn ExplainedModel,
        graph: &'a CausalGraph,
        effect: EffectKind,
        k: usize,
    ) -> Result<Self, EstimateError> {
        let mut sets = BTreeMap::new();
        let outcome = graph.model_node();
        for c in graph.concepts().iter().filter(|c| c.observed) {
            let hold = graph.hold_fixed_set(&c.name, outcome, effect)?;
            let mut mention = graph.concepts_with_role(&c.name, outcome, NodeRole::Mediator)?;
            mention.extend(graph.concepts_with_role(&c.name, outcome, NodeRole::Collider)?);
            let mention = mention.difference(&hold).cloned().collect();
            sets.insert(c.name.clone(), (hold, mention));
        }
        Ok(Self {
            provider,
            model,
            graph,
            effect,
            k,
            sets,
        })
    }

    /// For providers that ignore hold-fixed sets (the exact oracles); works
    /// on graphs where no adjustment set exists.
    pub fn unadjusted(
        provider: &'a dyn CfProvider,
        model: &'a dyn ExplainedModel,
        graph: &'a CausalGraph,
        k: usize,
    ) -> Self {
        Self {
            provider,
            model,
            graph,
            effect: EffectKind::Total,
            k,
            sets: BTreeMap::new(),
        }
    }
}

impl Approximator for ProviderApproximator<'_> {
    fn predict_under(
        &self,
        ex: &Example,
        treatment: &str,
        value: &str,
        seed: u64,
    ) -> Result<Option<Vec<f64>>, EstimateError> {
        let current = ex.concept(treatment).ok_or_else(|| {
            EstimateError::Precondition(format!("`{}` lacks a `{treatment}` label", ex.id))
        })?;
        let iv = Intervention::new(treatment, current, value);
        let (_, s, t) = iv.resolve(self.graph)?;
        let (hold_fixed, mention) = self.sets.get(treatment).cloned().unwrap_or_default();
        let req = CfRequest {
            base: ex.clone(),
            intervention: iv.clone(),
            hold_fixed,
            mention,
            effect: self.effect,
            count: self.k,
            value_positions: Some((s, t)),
            demonstrations: Vec::new(),
            fields: BTreeMap::new(),
        };
        let gen = match self.provider.generate(&req, seed) {
            Ok(g) => g,
            Err(ProviderError::NoSurvivors(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if gen.cfs.is_empty() {
            return Ok(None);
        }
        let preds = gen
            .cfs
            .iter()
            .map(|c| c.predict(self.model))
            .collect::<Result<Vec<_>, _>>()?;
        let mut mean = vec![0.0; self.model.class_count()];
        for p in &preds {
            add_scaled(&mut mean, p, 1.0 / preds.len() as f64);
        }
        Ok(Some(mean))
    }
}

/// Average effect over `examples`: units at the source value pair their
/// output with an approximation at the target, units at the target pair an
/// approximation at the source with their output, and all other units pair
/// two independent approximations. Divides by the number of contributing
/// pairs.
pub fn cace_hat(
    model: &dyn ExplainedModel,
    examples: &[&Example],
    iv: &Intervention,
    approximator: &dyn Approximator,
    seed: u64,
) -> Result<EffectEstimate, EstimateError> {
    let k = model.class_count();
    if iv.is_identity() {
        return Ok(EffectEstimate {
            n_contributors: examples
                .iter()
                .filter(|e| e.concept(&iv.treatment).is_some())
                .count(),
            ..EffectEstimate::zeros(iv.clone(), EstimateKind::Cace, k)
        });
    }
    let contributions: Vec<Option<Vec<f64>>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| -> Result<Option<Vec<f64>>, EstimateError> {
            let Some(current) = ex.concept(&iv.treatment) else {
                return Ok(None);
            };
            let s = stage_seed(seed, &i.to_string());
            let up = |v: &str, tag: &str| {
                approximator.predict_under(ex, &iv.treatment, v, stage_seed(s, tag))
            };
            let (after, before) = if current == iv.source {
                (
                    up(&iv.target, "target")?,
                    Some(model.predict(&ex.features)?),
                )
            } else if current == iv.target {
                (
                    Some(model.predict(&ex.features)?),
                    up(&iv.source, "source")?,
                )
            } else {
                (up(&iv.target, "target")?, up(&iv.source, "source")?)
            };
            Ok(match (after, before) {
                (Some(a), Some(b)) => Some(sub(&a, &b)),
                _ => None,
            })
        })
        .collect::<Result<_, _>>()?;
    let mut vector = vec![0.0; k];
    let mut n = 0usize;
    for c in contributions.iter().flatten() {
        add_scaled(&mut vector, c, 1.0);
        n += 1;
    }
    if n == 0 {
        return Err(EstimateError::NoContributors(iv.clone()));
    }
    vector.iter_mut().for_each(|v| *v /= n as f64);
    Ok(EffectEstimate {
        intervention: iv.clone(),
        kind: EstimateKind::Cace,
        vector,
        n_contributors: n,
        shortfall: false,
    })
}

/// Difference of the mean model output between the two treatment arms.
pub fn noncausal_baseline(
    model: &dyn ExplainedModel,
    examples: &[&Example],
    iv: &Intervention,
) -> Result<EffectEstimate, EstimateError> {
    let k = model.class_count();
    let mut sums = [vec![0.0; k], vec![0.0; k]];
    let mut counts = [0usize; 2];
    for ex in examples {
        let arm = match ex.concept(&iv.treatment) {
            Some(v) if v == iv.target => 0,
            Some(v) if v == iv.source => 1,
            _ => continue,
        };
        add_scaled(&mut sums[arm], &model.predict(&ex.features)?, 1.0);
        counts[arm] += 1;
    }
    for (arm, value) in [(0, &iv.target), (1, &iv.source)] {
        if counts[arm] == 0 {
            return Err(EstimateError::EmptyArm {
                treatment: iv.treatment.clone(),
                value: value.clone(),
            });
        }
    }
    let vector = (0..k)
        .map(|j| sums[0][j] / counts[0] as f64 - sums[1][j] / counts[1] as f64)
        .collect();
    Ok(EffectEstimate {
        intervention: iv.clone(),
        kind: EstimateKind::Cace,
        vector,
        n_contributors: counts[0] + counts[1],
        shortfall: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "estimator")]
pub enum AuditEstimator {
    /// Counterfactual estimator fed exact counterfactuals.
    Counterfactual,
    /// Counterfactual estimator fed prediction-space noisy counterfactuals.
    PredictionOracle { sigma: f64 },
    /// Arm-mean difference.
    NonCausal,
}

impl AuditEstimator {
    pub fn tag(&self) -> String {
        match self {
            AuditEstimator::Counterfactual => "counterfactual".into(),
            AuditEstimator::PredictionOracle { sigma } => {
                format!("prediction_oracle(sigma={sigma})")
            }
            AuditEstimator::NonCausal => "noncausal".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Preserved,
    Violated,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct FaithfulnessReport {
    pub estimator: String,
    pub interventions: [Intervention; 2],
    /// Mean scalarized estimate over the draws.
    pub estimates: [f64; 2],
    pub std_errors: [f64; 2],
    /// Standard error of the per-draw difference of the two estimates.
    pub gap_std_error: f64,
    pub true_effects: [f64; 2],
    pub verdict: Verdict,
    /// `None` when inconclusive.
    pub ordering_preserved: Option<bool>,
    pub draws: usize,
    pub n: usize,
}

impl FaithfulnessReport {
    /// Estimated gap in units of its standard error.
    pub fn separation(&self) -> f64 {
        (self.estimates[0] - self.estimates[1]).abs() / self.gap_std_error
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Replicates `estimator` over `draws` datasets of `n` units and compares
/// the ordering of its mean estimates with the exact effects.
#[allow(clippy::too_many_arguments)]
pub fn audit_order_faithfulness(
    estimator: AuditEstimator,
    model: &dyn ExplainedModel,
    scm: &Scm,
    iv1: &Intervention,
    iv2: &Intervention,
    n: usize,
    draws: usize,
    seed: u64,
    cap: u128,
) -> Result<FaithfulnessReport, EstimateError> {
    if iv1 == iv2 {
        return Err(EstimateError::Precondition(
            "the two interventions must differ".into(),
        ));
    }
    if draws < 2 {
        return Err(EstimateError::Precondition(
            "at least two draws are needed".into(),
        ));
    }
    let t1 = scm.exact_cace(model, iv1, cap)?.scalar();
    let t2 = scm.exact_cace(model, iv2, cap)?.scalar();
    if t1 == t2 {
        return Err(EstimateError::Precondition(
            "the true effects are tied".into(),
        ));
    }
    let graph = scm.graph();
    let exact = Oracle::new(scm);
    let noisy;
    let provider: &dyn CfProvider = match estimator {
        AuditEstimator::PredictionOracle { sigma } => {
            noisy = PredictionOracle::new(scm, model, sigma);
            &noisy
        }
        _ => &exact,
    };
    let approximator = ProviderApproximator::unadjusted(provider, model, graph, 1);
    let mut s1 = Vec::with_capacity(draws);
    let mut s2 = Vec::with_capacity(draws);
    for d in 0..draws {
        let draw_seed = stage_seed(seed, &format!("draw{d}"));
        let units = scm.sample_units(n, draw_seed)?;
        let examples: Vec<Example> = units
            .iter()
            .map(|u| Example::from_unit(u, graph, crate::data::Split::Test))
            .collect();
        let refs: Vec<&Example> = examples.iter().collect();
        let (a, b) = match estimator {
            AuditEstimator::NonCausal => (
                noncausal_baseline(model, &refs, iv1)?,
                noncausal_baseline(model, &refs, iv2)?,
            ),
            _ => (
                cace_hat(
                    model,
                    &refs,
                    iv1,
                    &approximator,
                    stage_seed(draw_seed, "iv1"),
                )?,
                cace_hat(
                    model,
                    &refs,
                    iv2,
                    &approximator,
                    stage_seed(draw_seed, "iv2"),
                )?,
            ),
        };
        s1.push(a.scalar());
        s2.push(b.scalar());
    }
    let (m1, se1) = mean_se(&s1);
    let (m2, se2) = mean_se(&s2);
    let gaps: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a - b).collect();
    let (gap, gap_se) = mean_se(&gaps);
    let (verdict, preserved) = if gap.abs() < 3.0 * gap_se {
        (Verdict::Inconclusive, None)
    } else if (gap > 0.0) == (t1 > t2) {
        (Verdict::Preserved, Some(true))
    } else {
        (Verdict::Violated, Some(false))
    };
    Ok(FaithfulnessReport {
        estimator: estimator.tag(),
        interventions: [iv1.clone(), iv2.clone()],
        estimates: [m1, m2],
        std_errors: [se1, se2],
        gap_std_error: gap_se,
        true_effects: [t1, t2],
        verdict,
        ordering_preserved: preserved,
        draws,
        n,
    })
}

/// Audits on a DGP and on its confounded variant.
#[derive(Clone, Debug, Serialize)]
pub struct ConfoundedAudit {
    pub construction: ConfoundReport,
    pub original: Vec<FaithfulnessReport>,
    pub confounded: Vec<FaithfulnessReport>,
}

/// Builds the confounded variant of (`scm`, `model`) for the pair and runs
/// the arm-mean and exact-counterfactual audits on both.
#[allow(clippy::too_many_arguments)]
pub fn audit_with_confounded_replay(
    scm: &Scm,
    model: &ModelSpec,
    iv1: &Intervention,
    iv2: &Intervention,
    n: usize,
    draws: usize,
    seed: u64,
    cap: u128,
) -> Result<ConfoundedAudit, EstimateError> {
    let built = build_confounded_dgp(scm, model, iv1, iv2, cap)?;
    let estimators = [AuditEstimator::NonCausal, AuditEstimator::Counterfactual];
    let run = |s: &Scm,
               m: &ModelSpec,
               tag: &str|
     -> Result<Vec<FaithfulnessReport>, EstimateError> {
        estimators
            .iter()
            .map(|e| {
                audit_order_faithfulness(*e, m, s, iv1, iv2, n, draws, stage_seed(seed, tag), cap)
            })
            .collect()
    };
    Ok(ConfoundedAudit {
        original: run(scm, model, "original")?,
        confounded: run(&built.scm, &built.model, "confounded")?,
        construction: built.report,
    })
}
