//! Anchor-centred contrastive sets: counterfactuals, matches, misspecified
//! counterfactuals and mismatches.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{ConceptError, PredictorSet};
use crate::data::Example;
use crate::graph::{CausalGraph, EffectKind, GraphError, Intervention};
use crate::provider::{ApproxCounterfactual, CfProvider, CfRequest, ProviderError};
use crate::rng::{seeded, stage_seed};

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("anchor `{0}` has neither counterfactuals nor matches")]
    EmptyQuad(String),
    #[error("anchor `{anchor}` does not have `{treatment}` = `{value}`")]
    AnchorMismatch {
        anchor: String,
        treatment: String,
        value: String,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadSets {
    pub anchor: String,
    pub intervention: Intervention,
    pub cf_ids: Vec<String>,
    pub match_ids: Vec<String>,
    pub miscf_ids: Vec<String>,
    pub mismatch_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadConfig {
    /// Cap on generated counterfactuals per anchor.
    pub max_cfs: usize,
    /// Misspecified generations per anchor.
    pub miscf_count: usize,
    /// Drop or reroute generations whose predicted concepts disagree.
    pub filter: bool,
    pub effect: EffectKind,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            max_cfs: 10,
            miscf_count: 4,
            filter: true,
            effect: EffectKind::Total,
        }
    }
}

/// Counts from one build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub kept: usize,
    /// Rejected because an adjusted concept changed; moved to the
    /// misspecified set.
    pub rerouted: usize,
    /// Rejected because the treatment did not reach its target.
    pub dropped: usize,
    /// Misspecified generations that failed upstream.
    pub generation_failures: usize,
}

impl FilterCounts {
    pub fn absorb(&mut self, o: FilterCounts) {
        self.kept += o.kept;
        self.rerouted += o.rerouted;
        self.dropped += o.dropped;
        self.generation_failures += o.generation_failures;
    }
}

/// A quad together with the generated items it references.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadBuild {
    pub quad: QuadSets,
    pub generated: Vec<ApproxCounterfactual>,
    pub counts: FilterCounts,
}

/// Outcome of [`filter_misspecified`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Filtered {
    pub kept: Vec<ApproxCounterfactual>,
    pub rerouted: Vec<ApproxCounterfactual>,
    pub dropped: Vec<ApproxCounterfactual>,
}

/// Keeps a counterfactual iff the predicted treatment equals the target and
/// every adjusted concept is predicted as it is for the anchor. Rejections
/// that changed an adjusted concept are rerouted; the rest are dropped.
pub fn filter_misspecified(
    cfs: Vec<ApproxCounterfactual>,
    anchor: &Example,
    iv: &Intervention,
    adjusted: &BTreeSet<String>,
    predictors: &PredictorSet,
) -> Result<Filtered, ConceptError> {
    let tp = predictors.get(&iv.treatment)?;
    let target = tp.value_index(&iv.target)?;
    let mut reference = BTreeMap::new();
    for c in adjusted {
        reference.insert(c.clone(), predictors.get(c)?.predict(&anchor.features)?.0);
    }
    let mut out = Filtered::default();
    for cf in cfs {
        let mut adjusted_changed = false;
        for (c, v) in &reference {
            if predictors.get(c)?.predict(&cf.features)?.0 != *v {
                adjusted_changed = true;
                break;
            }
        }
        let reached = tp.predict(&cf.features)?.0 == target;
        if adjusted_changed {
            out.rerouted.push(cf);
        } else if reached {
            out.kept.push(cf);
        } else {
            out.dropped.push(cf);
        }
    }
    Ok(out)
}

/// Interventions on concepts other than the treatment, used to produce
/// misspecified counterfactuals: one uniformly chosen concept per draw and a
/// uniformly chosen value differing from the anchor's.
pub fn misspecified_interventions(
    graph: &CausalGraph,
    anchor: &Example,
    treatment: &str,
    count: usize,
    seed: u64,
) -> Vec<Intervention> {
    let others: Vec<_> = graph
        .concepts()
        .iter()
        .filter(|c| c.observed && c.name != treatment && anchor.concept(&c.name).is_some())
        .collect();
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    if others.is_empty() {
        return out;
    }
    for _ in 0..count {
        let c = others.choose(&mut rng).expect("nonempty");
        let current = anchor.concept(&c.name).expect("filtered above");
        let targets: Vec<&String> = c.domain.iter().filter(|v| v.as_str() != current).collect();
        let t = targets
            .choose(&mut rng)
            .expect("domains have two or more values");
        out.push(Intervention::new(&c.name, current, t));
    }
    out
}

/// Splits the treatment-`t'` part of `pool` into matches (same adjusted
/// values as the anchor) and mismatches (some adjusted value differs).
/// Items missing a needed label are skipped.
pub fn partition_pool(
    pool: &[&Example],
    anchor: &Example,
    iv: &Intervention,
    adjusted: &BTreeSet<String>,
) -> (Vec<String>, Vec<String>) {
    let mut matches = Vec::new();
    let mut mismatches = Vec::new();
    for item in pool {
        if item.id == anchor.id || item.concept(&iv.treatment) != Some(iv.target.as_str()) {
            continue;
        }
        let mut same = true;
        let mut known = true;
        for c in adjusted {
            match (item.concept(c), anchor.concept(c)) {
                (Some(a), Some(b)) => same &= a == b,
                _ => known = false,
            }
        }
        if !known {
            continue;
        }
        if same {
            matches.push(item.id.clone());
        } else {
            mismatches.push(item.id.clone());
        }
    }
    (matches, mismatches)
}

/// Builds the four sets for `anchor` under `iv`.
#[allow(clippy::too_many_arguments)]
pub fn build_quads(
    graph: &CausalGraph,
    pool: &[&Example],
    anchor: &Example,
    iv: &Intervention,
    provider: &dyn CfProvider,
    predictors: Option<&PredictorSet>,
    config: &QuadConfig,
    seed: u64,
) -> Result<QuadBuild, QuadError> {
    if anchor.concept(&iv.treatment) != Some(iv.source.as_str()) {
        return Err(QuadError::AnchorMismatch {
            anchor: anchor.id.clone(),
            treatment: iv.treatment.clone(),
            value: iv.source.clone(),
        });
    }
    let adjusted = graph.hold_fixed_set(&iv.treatment, graph.model_node(), config.effect)?;
    let mut counts = FilterCounts::default();

    let mut cfs = Vec::new();
    let mut miscfs = Vec::new();
    if config.max_cfs > 0 {
        let req = CfRequest::new(graph, anchor, iv, config.effect, config.max_cfs)?;
        match provider.generate(&req, stage_seed(seed, "cf")) {
            Ok(g) => cfs = g.cfs,
            Err(ProviderError::NoSurvivors(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    for (i, mis) in misspecified_interventions(
        graph,
        anchor,
        &iv.treatment,
        config.miscf_count,
        stage_seed(seed, "mis"),
    )
    .iter()
    .enumerate()
    {
        let req = CfRequest::new(graph, anchor, mis, config.effect, 1)?;
        match provider.generate(&req, stage_seed(seed, &format!("mis{i}"))) {
            Ok(g) => {
                for mut cf in g.cfs {
                    cf.id = format!("{}~mis{i}", anchor.id);
                    miscfs.push(cf);
                }
            }
            Err(ProviderError::NoSurvivors(_)) => counts.generation_failures += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if let (true, Some(p)) = (config.filter, predictors) {
        let f = filter_misspecified(cfs, anchor, iv, &adjusted, p)?;
        counts.kept = f.kept.len();
        counts.rerouted = f.rerouted.len();
        counts.dropped = f.dropped.len();
        cfs = f.kept;
        miscfs.extend(f.rerouted);
    } else {
        counts.kept = cfs.len();
    }

    let (match_ids, mismatch_ids) = partition_pool(pool, anchor, iv, &adjusted);
    if cfs.is_empty() && match_ids.is_empty() {
        return Err(QuadError::EmptyQuad(anchor.id.clone()));
    }
    let quad = QuadSets {
        anchor: anchor.id.clone(),
        intervention: iv.clone(),
        cf_ids: cfs.iter().map(|c| c.id.clone()).collect(),
        match_ids,
        miscf_ids: miscfs.iter().map(|c| c.id.clone()).collect(),
        mismatch_ids,
    };
    let generated = cfs.into_iter().chain(miscfs).collect();
    Ok(QuadBuild {
        quad,
        generated,
        counts,
    })
}

pub fn write_quads(path: &Path, quads: &[QuadSets]) -> Result<(), QuadError> {
    let mut text = String::new();
    for q in quads {
        text.push_str(&serde_json::to_string(q)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_quads(path: &Path) -> Result<Vec<QuadSets>, QuadError> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn write_generated(path: &Path, items: &[ApproxCounterfactual]) -> Result<(), QuadError> {
    let mut text = String::new();
    for c in items {
        text.push_str(&serde_json::to_string(c)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_generated(path: &Path) -> Result<Vec<ApproxCounterfactual>, QuadError> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
