//! Finite discrete structural causal models over a [`CausalGraph`]:
//! sampling, gold counterfactuals and exact effects by enumeration.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::effect::{add_scaled, sub, EffectEstimate, EstimateKind};
use crate::graph::{CausalGraph, GraphError, GraphFile, Intervention, LabelOrientation, NodeKind};
use crate::model::{ExplainedModel, ModelError};
use crate::rng::seeded;

/// Default cap on the size of the enumerated exogenous product space.
pub const DEFAULT_SUPPORT_CAP: u128 = 10_000_000;

const ENUM_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid SCM: {0}")]
    InvalidSpec(String),
    #[error("{states} joint exogenous states exceed the cap of {cap}")]
    SupportExplosion { states: u128, cap: u128 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("confounded construction failed: {0}")]
    ConstructionFailed(String),
}

fn invalid(msg: impl Into<String>) -> ScmError {
    ScmError::InvalidSpec(msg.into())
}

/// A finite discrete exogenous variable. `values` gives the numeric grid
/// point of each state when the variable quantizes a continuous one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExogenousSpec {
    pub name: String,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl ExogenousSpec {
    pub fn new(name: &str, probs: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            probs,
            values: None,
        }
    }

    pub fn uniform(name: &str, states: usize) -> Self {
        Self::new(name, vec![1.0 / states as f64; states])
    }

    /// A uniform distribution over an evenly spaced grid.
    pub fn uniform_grid(name: &str, lo: f64, hi: f64, points: usize) -> Self {
        let values = (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1).max(1) as f64)
            .collect();
        Self {
            values: Some(values),
            ..Self::uniform(name, points)
        }
    }
}

/// Deterministic table mechanism for a concept. The table is row-major over
/// the parents in the listed order (last parent varies fastest) and holds
/// domain indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptMechanism {
    pub concept: String,
    pub parents: Vec<String>,
    pub table: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureBlock {
    /// Adds `rows[value of source]` at `offset`.
    Table {
        source: String,
        offset: usize,
        rows: Vec<Vec<f64>>,
    },
    /// Adds `grid value of source * coef` at `offset`.
    Linear {
        source: String,
        offset: usize,
        coef: Vec<f64>,
    },
}

impl FeatureBlock {
    fn source(&self) -> &str {
        match self {
            FeatureBlock::Table { source, .. } | FeatureBlock::Linear { source, .. } => source,
        }
    }
}

/// Additive feature mechanism: `base` plus one contribution per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMechanism {
    pub dim: usize,
    pub base: Vec<f64>,
    pub blocks: Vec<FeatureBlock>,
    /// Coordinates no explanation method may read.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

/// Label as the argmax of additive class scores; ties go to the lower class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMechanism {
    pub classes: usize,
    pub terms: Vec<LabelTerm>,
    /// Row-major `classes x feature dim`; only when the label reads the text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTerm {
    pub source: String,
    /// One score row (length `classes`) per source value.
    pub rows: Vec<Vec<f64>>,
}

/// File form of a structural causal model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub graph: GraphFile,
    pub exogenous: Vec<ExogenousSpec>,
    pub concepts: Vec<ConceptMechanism>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelMechanism>,
    pub features: FeatureMechanism,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Concept(usize),
    Exogenous(usize),
    Label,
}

#[derive(Clone, Debug)]
struct CompiledConcept {
    parents: Vec<Source>,
    strides: Vec<usize>,
    table: Vec<usize>,
}

#[derive(Clone, Debug)]
enum CompiledBlock {
    Table {
        source: Source,
        offset: usize,
        rows: Vec<Vec<f64>>,
    },
    Linear {
        exo: usize,
        offset: usize,
        coef: Vec<f64>,
    },
}

/// One sampled unit: its exogenous assignment and everything it determines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmUnit {
    pub id: String,
    pub exo_seed: u64,
    pub exogenous: Vec<usize>,
    pub concepts: Vec<usize>,
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

/// The unit's outcome had the treatment been set by `intervention`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldCounterfactual {
    pub base_id: String,
    pub intervention: Intervention,
    pub features: Vec<f64>,
    pub concepts: Vec<usize>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub concepts: Vec<usize>,
    pub features: Vec<f64>,
    pub label: Option<usize>,
}

/// A validated SCM ready for simulation.
#[derive(Clone, Debug)]
pub struct Scm {
    spec: ScmSpec,
    graph: CausalGraph,
    cdfs: Vec<Vec<f64>>,
    concept_order: Vec<usize>,
    mechanisms: Vec<CompiledConcept>,
    blocks: Vec<CompiledBlock>,
    label_terms: Vec<(Source, Vec<Vec<f64>>)>,
}

impl Scm {
    pub fn new(spec: ScmSpec) -> Result<Self, ScmError> {
        let graph = CausalGraph::from_file(spec.graph.clone())?;

        if spec.exogenous.len() != graph.exogenous().len()
            || spec
                .exogenous
                .iter()
                .zip(graph.exogenous())
                .any(|(e, n)| &e.name != n)
        {
            return Err(invalid(
                "exogenous specs must list the graph's exogenous variables in order",
            ));
        }
        let mut cdfs = Vec::new();
        for e in &spec.exogenous {
            if e.probs.is_empty() || e.probs.iter().any(|p| !(*p >= 0.0)) {
                return Err(invalid(format!(
                    "`{}` has an empty or negative support",
                    e.name
                )));
            }
            let total: f64 = e.probs.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(invalid(format!(
                    "`{}` has probability mass {total}",
                    e.name
                )));
            }
            if let Some(v) = &e.values {
                if v.len() != e.probs.len() {
                    return Err(invalid(format!("`{}` grid length mismatch", e.name)));
                }
            }
            let mut acc = 0.0;
            cdfs.push(
                e.probs
                    .iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect(),
            );
        }

        let resolve = |name: &str| -> Result<Source, ScmError> {
            let id = graph
                .node(name)
                .ok_or_else(|| invalid(format!("unknown source `{name}`")))?;
            match graph.kind(id) {
                NodeKind::Concept(c) => Ok(Source::Concept(c)),
                NodeKind::Exogenous => Ok(Source::Exogenous(
                    graph
                        .exogenous()
                        .iter()
                        .position(|e| e == name)
                        .expect("listed"),
                )),
                NodeKind::Label => Ok(Source::Label),
                _ => Err(invalid(format!("`{name}` cannot feed a mechanism"))),
            }
        };
        let cardinality = |s: Source| -> usize {
            match s {
                Source::Concept(c) => graph.concepts()[c].domain.len(),
                Source::Exogenous(e) => spec.exogenous[e].probs.len(),
                Source::Label => spec.label.as_ref().map_or(0, |l| l.classes),
            }
        };
        let parent_names = |node: &str| -> Vec<String> {
            let mut v: Vec<String> = graph
                .parents(graph.node(node).expect("node exists"))
                .iter()
                .map(|&p| graph.name(p).to_string())
                .collect();
            v.sort();
            v
        };

        let n_concepts = graph.concepts().len();
        let mut slots: Vec<Option<CompiledConcept>> = vec![None; n_concepts];
        for m in &spec.concepts {
            let c = graph
                .concept_index(&m.concept)
                .ok_or_else(|| invalid(format!("mechanism for unknown concept `{}`", m.concept)))?;
            if slots[c].is_some() {
                return Err(invalid(format!("duplicate mechanism for `{}`", m.concept)));
            }
            let mut listed = m.parents.clone();
            listed.sort();
            if listed != parent_names(&m.concept) {
                return Err(invalid(format!(
                    "mechanism parents of `{}` differ from the graph",
                    m.concept
                )));
            }
            let parents = m
                .parents
                .iter()
                .map(|p| resolve(p))
                .collect::<Result<Vec<_>, _>>()?;
            if parents.contains(&Source::Label) {
                return Err(invalid("concepts cannot depend on the label"));
            }
            let cards: Vec<usize> = parents.iter().map(|&p| cardinality(p)).collect();
            let mut strides = vec![1; cards.len()];
            for i in (0..cards.len().saturating_sub(1)).rev() {
                strides[i] = strides[i + 1] * cards[i + 1];
            }
            let rows: usize = cards.iter().product();
            if m.table.len() != rows {
                return Err(invalid(format!(
                    "table of `{}` has {} entries, expected {rows}",
                    m.concept,
                    m.table.len()
                )));
            }
            let domain = graph.concepts()[c].domain.len();
            if m.table.iter().any(|&v| v >= domain) {
                return Err(invalid(format!(
                    "table of `{}` holds an out-of-domain value",
                    m.concept
                )));
            }
            slots[c] = Some(CompiledConcept {
                parents,
                strides,
                table: m.table.clone(),
            });
        }
        let mechanisms = slots
            .into_iter()
            .enumerate()
            .map(|(c, m)| {
                m.ok_or_else(|| invalid(format!("no mechanism for `{}`", graph.concepts()[c].name)))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let concept_order = graph
            .topological_order()?
            .into_iter()
            .filter_map(|id| match graph.kind(id) {
                NodeKind::Concept(c) => Some(c),
                _ => None,
            })
            .collect();

        let fm = &spec.features;
        if fm.dim == 0 || fm.base.len() != fm.dim {
            return Err(invalid("feature base must have length dim > 0"));
        }
        if fm.hidden.iter().any(|&h| h >= fm.dim) {
            return Err(invalid("hidden coordinate out of range"));
        }
        let mut blocks = Vec::new();
        for b in &fm.blocks {
            let source = resolve(b.source())?;
            match b {
                FeatureBlock::Table { offset, rows, .. } => {
                    if rows.len() != cardinality(source) {
                        return Err(invalid(format!(
                            "block for `{}` needs one row per value",
                            b.source()
                        )));
                    }
                    if rows.iter().any(|r| offset + r.len() > fm.dim) {
                        return Err(invalid(format!(
                            "block for `{}` overruns the feature vector",
                            b.source()
                        )));
                    }
                    blocks.push(CompiledBlock::Table {
                        source,
                        offset: *offset,
                        rows: rows.clone(),
                    });
                }
                FeatureBlock::Linear { offset, coef, .. } => {
                    let Source::Exogenous(e) = source else {
                        return Err(invalid("linear blocks read quantized exogenous variables"));
                    };
                    if spec.exogenous[e].values.is_none() {
                        return Err(invalid(format!("`{}` has no grid values", b.source())));
                    }
                    if offset + coef.len() > fm.dim {
                        return Err(invalid(format!(
                            "block for `{}` overruns the feature vector",
                            b.source()
                        )));
                    }
                    blocks.push(CompiledBlock::Linear {
                        exo: e,
                        offset: *offset,
                        coef: coef.clone(),
                    });
                }
            }
        }
        let mut block_sources: Vec<String> =
            fm.blocks.iter().map(|b| b.source().to_string()).collect();
        block_sources.sort();
        block_sources.dedup();
        if block_sources != parent_names(graph.text_node()) {
            return Err(invalid(
                "feature blocks must read exactly the parents of the text node",
            ));
        }

        let mut label_terms = Vec::new();
        match (&spec.label, graph.label_node()) {
            (Some(l), Some(label_node)) => {
                if l.classes < 2 {
                    return Err(invalid("label needs at least two classes"));
                }
                let mut sources: Vec<String> = l.terms.iter().map(|t| t.source.clone()).collect();
                let reads_text = graph.orientation() == Some(LabelOrientation::TextToLabel);
                if reads_text {
                    sources.push(graph.text_node().to_string());
                }
                sources.sort();
                sources.dedup();
                if sources != parent_names(label_node) {
                    return Err(invalid("label terms must read exactly the label's parents"));
                }
                match (&l.feature_weights, reads_text) {
                    (Some(w), true) if w.len() == l.classes * fm.dim => {}
                    (None, false) => {}
                    _ => {
                        return Err(invalid(
                            "feature weights must match the label orientation and shape",
                        ))
                    }
                }
                for t in &l.terms {
                    let s = resolve(&t.source)?;
                    if t.rows.len() != cardinality(s) || t.rows.iter().any(|r| r.len() != l.classes)
                    {
                        return Err(invalid(format!(
                            "label term for `{}` has the wrong shape",
                            t.source
                        )));
                    }
                    label_terms.push((s, t.rows.clone()));
                }
            }
            (None, None) => {}
            (Some(_), None) => return Err(invalid("label mechanism without a label node")),
            (None, Some(_)) => return Err(invalid("label node without a label mechanism")),
        }

        Ok(Self {
            spec,
            graph,
            cdfs,
            concept_order,
            mechanisms,
            blocks,
            label_terms,
        })
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let spec: ScmSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Self::new(spec)?)
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn spec(&self) -> &ScmSpec {
        &self.spec
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.graph
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.features.dim
    }

    pub fn hidden_coords(&self) -> &[usize] {
        &self.spec.features.hidden
    }

    pub fn label_classes(&self) -> Option<usize> {
        self.spec.label.as_ref().map(|l| l.classes)
    }

    /// Feature coordinates written by blocks whose source is one of `concepts`.
    pub fn coords_touched_by(&self, concepts: &[usize]) -> Vec<bool> {
        let mut touched = vec![false; self.feature_dim()];
        for b in &self.blocks {
            if let CompiledBlock::Table {
                source: Source::Concept(c),
                offset,
                rows,
            } = b
            {
                if concepts.contains(c) {
                    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
                    for t in touched.iter_mut().skip(*offset).take(width) {
                        *t = true;
                    }
                }
            }
        }
        touched
    }

    /// Number of joint exogenous states.
    pub fn support_size(&self) -> u128 {
        self.cdfs.iter().map(|c| c.len() as u128).product()
    }

    /// Draws the exogenous assignment determined by `exo_seed`.
    pub fn draw_exogenous(&self, exo_seed: u64) -> Vec<usize> {
        let mut rng = seeded(exo_seed);
        self.cdfs
            .iter()
            .map(|cdf| {
                let u: f64 = rng.random();
                cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
            })
            .collect()
    }

    /// Runs every mechanism on `exo`, with `overrides[c] = Some(v)` forcing
    /// concept `c` to value `v`.
    pub fn realize(&self, exo: &[usize], overrides: &[Option<usize>]) -> Realization {
        let n = self.graph.concepts().len();
        let mut concepts = vec![0usize; n];
        let mut label = None;
        let value = |s: Source, concepts: &[usize], label: Option<usize>| match s {
            Source::Concept(c) => concepts[c],
            Source::Exogenous(e) => exo[e],
            Source::Label => label.expect("label computed before use"),
        };
        for &c in &self.concept_order {
            concepts[c] = match overrides.get(c).copied().flatten() {
                Some(v) => v,
                None => {
                    let m = &self.mechanisms[c];
                    let row: usize = m
                        .parents
                        .iter()
                        .zip(&m.strides)
                        .map(|(&p, s)| value(p, &concepts, None) * s)
                        .sum();
                    m.table[row]
                }
            };
        }
        let reads_text = self.graph.orientation() == Some(LabelOrientation::TextToLabel);
        if self.spec.label.is_some() && !reads_text {
            label = Some(self.label_from(&concepts, exo, None));
        }
        let mut features = self.spec.features.base.clone();
        for b in &self.blocks {
            match b {
                CompiledBlock::Table {
                    source,
                    offset,
                    rows,
                } => {
                    let row = &rows[value(*source, &concepts, label)];
                    for (f, r) in features[*offset..].iter_mut().zip(row) {
                        *f += r;
                    }
                }
                CompiledBlock::Linear {
                    exo: e,
                    offset,
                    coef,
                } => {
                    let g = self.spec.exogenous[*e].values.as_ref().expect("validated")[exo[*e]];
                    for (f, w) in features[*offset..].iter_mut().zip(coef) {
                        *f += g * w;
                    }
                }
            }
        }
        if self.spec.label.is_some() && reads_text {
            label = Some(self.label_from(&concepts, exo, Some(&features)));
        }
        Realization {
            concepts,
            features,
            label,
        }
    }

    fn label_from(&self, concepts: &[usize], exo: &[usize], features: Option<&[f64]>) -> usize {
        let l = self.spec.label.as_ref().expect("label mechanism present");
        let mut scores = vec![0.0; l.classes];
        for (s, rows) in &self.label_terms {
            let v = match *s {
                Source::Concept(c) => concepts[c],
                Source::Exogenous(e) => exo[e],
                Source::Label => unreachable!("labels do not read themselves"),
            };
            for (acc, r) in scores.iter_mut().zip(&rows[v]) {
                *acc += r;
            }
        }
        if let (Some(w), Some(x)) = (&l.feature_weights, features) {
            let d = x.len();
            for (c, acc) in scores.iter_mut().enumerate() {
                *acc += w[c * d..(c + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        let mut best = 0;
        for c in 1..scores.len() {
            if scores[c] > scores[best] {
                best = c;
            }
        }
        best
    }

    pub fn unit_from_seed(&self, id: &str, exo_seed: u64) -> ScmUnit {
        let exogenous = self.draw_exogenous(exo_seed);
        let r = self.realize(&exogenous, &[]);
        ScmUnit {
            id: id.to_string(),
            exo_seed,
            exogenous,
            concepts: r.concepts,
            features: r.features,
            label: r.label,
        }
    }

    /// `n` i.i.d. units; deterministic in `seed`.
    pub fn sample_units(&self, n: usize, seed: u64) -> Result<Vec<ScmUnit>, ScmError> {
        if n == 0 {
            return Err(ScmError::Precondition("n must be at least 1".into()));
        }
        let mut master = seeded(seed);
        let seeds: Vec<u64> = (0..n).map(|_| master.random()).collect();
        Ok(seeds
            .into_iter()
            .enumerate()
            .map(|(i, s)| self.unit_from_seed(&format!("u{i:06}"), s))
            .collect())
    }

    /// True when the unit's stored values are exactly what its exogenous
    /// assignment produces.
    pub fn is_consistent(&self, unit: &ScmUnit) -> bool {
        let r = self.realize(&unit.exogenous, &[]);
        r.concepts == unit.concepts && r.features == unit.features && r.label == unit.label
    }

    /// Abduction-action-prediction: reuse the unit's exogenous assignment,
    /// force the treatment, recompute everything downstream.
    pub fn gold_counterfactual(
        &self,
        unit: &ScmUnit,
        iv: &Intervention,
    ) -> Result<GoldCounterfactual, ScmError> {
        let (c, _, target) = iv.resolve(&self.graph)?;
        let r = self.intervene(&unit.exogenous, &[(c, target)]);
        Ok(GoldCounterfactual {
            base_id: unit.id.clone(),
            intervention: iv.clone(),
            features: r.features,
            concepts: r.concepts,
            label: r.label,
        })
    }

    /// Realization under a joint intervention on several concepts.
    pub fn intervene(&self, exo: &[usize], settings: &[(usize, usize)]) -> Realization {
        let mut overrides = vec![None; self.graph.concepts().len()];
        for &(c, v) in settings {
            overrides[c] = Some(v);
        }
        self.realize(exo, &overrides)
    }

    fn decode_state(&self, mut index: usize, out: &mut [usize]) -> f64 {
        let mut prob = 1.0;
        for e in (0..self.cdfs.len()).rev() {
            let m = self.cdfs[e].len();
            out[e] = index % m;
            index /= m;
            prob *= self.spec.exogenous[e].probs[out[e]];
        }
        prob
    }

    fn checked_states(&self, cap: u128) -> Result<usize, ScmError> {
        let states = self.support_size();
        if states > cap {
            return Err(ScmError::SupportExplosion { states, cap });
        }
        Ok(states as usize)
    }

    /// Visits every joint exogenous state with its probability, in a fixed
    /// odometer order (last variable fastest).
    pub fn for_each_state(
        &self,
        cap: u128,
        mut visit: impl FnMut(f64, &[usize]),
    ) -> Result<(), ScmError> {
        let states = self.checked_states(cap)?;
        let mut exo = vec![0; self.cdfs.len()];
        for i in 0..states {
            let p = self.decode_state(i, &mut exo);
            visit(p, &exo);
        }
        Ok(())
    }

    /// `sum_u P(u) g(u)` over the exogenous support. Chunks are reduced in
    /// a fixed order so the result does not depend on the thread count.
    pub fn expectation<F>(&self, cap: u128, width: usize, g: F) -> Result<Vec<f64>, ScmError>
    where
        F: Fn(&[usize]) -> Result<Vec<f64>, ScmError> + Sync,
    {
        let states = self.checked_states(cap)?;
        let chunks = states.div_ceil(ENUM_CHUNK);
        let partials: Vec<Result<Vec<f64>, ScmError>> = (0..chunks)
            .into_par_iter()
            .map(|chunk| {
                let mut acc = vec![0.0; width];
                let mut exo = vec![0; self.cdfs.len()];
                for i in chunk * ENUM_CHUNK..((chunk + 1) * ENUM_CHUNK).min(states) {
                    let p = self.decode_state(i, &mut exo);
                    if p == 0.0 {
                        continue;
                    }
                    add_scaled(&mut acc, &g(&exo)?, p);
                }
                Ok(acc)
            })
            .collect();
        let mut total = vec![0.0; width];
        for part in partials {
            for (t, v) in total.iter_mut().zip(part?) {
                *t += v;
            }
        }
        Ok(total)
    }

    /// `E[f | do(target)] - E[f | do(source)]` by exhaustive enumeration.
    pub fn exact_cace(
        &self,
        model: &dyn ExplainedModel,
        iv: &Intervention,
        cap: u128,
    ) -> Result<EffectEstimate, ScmError> {
        let (c, source, target) = iv.resolve(&self.graph)?;
        if model.feature_dim() != self.feature_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: model.feature_dim(),
                got: self.feature_dim(),
            }
            .into());
        }
        let k = model.class_count();
        let vector = self.expectation(cap, k, |exo| {
            let after = model.predict(&self.intervene(exo, &[(c, target)]).features)?;
            let before = model.predict(&self.intervene(exo, &[(c, source)]).features)?;
            Ok(sub(&after, &before))
        })?;
        Ok(EffectEstimate {
            intervention: iv.clone(),
            kind: EstimateKind::Cace,
            vector,
            n_contributors: self.support_size() as usize,
            shortfall: false,
        })
    }

    /// `E[f | T = target] - E[f | T = source]` under the observational
    /// distribution, by enumeration.
    pub fn exact_observational_contrast(
        &self,
        model: &dyn ExplainedModel,
        iv: &Intervention,
        cap: u128,
    ) -> Result<EffectEstimate, ScmError> {
        let (c, source, target) = iv.resolve(&self.graph)?;
        let k = model.class_count();
        let sums = self.expectation(cap, 2 * k + 2, |exo| {
            let r = self.realize(exo, &[]);
            let mut out = vec![0.0; 2 * k + 2];
            let t = r.concepts[c];
            if t == target || t == source {
                let p = model.predict(&r.features)?;
                let base = if t == target { 0 } else { k + 1 };
                out[base..base + k].copy_from_slice(&p);
                out[base + k] = 1.0;
            }
            Ok(out)
        })?;
        let (mass_t, mass_s) = (sums[k], sums[2 * k + 1]);
        if mass_t == 0.0 || mass_s == 0.0 {
            return Err(ScmError::Precondition(format!(
                "an arm of {iv} has zero probability"
            )));
        }
        let vector = (0..k)
            .map(|j| sums[j] / mass_t - sums[k + 1 + j] / mass_s)
            .collect();
        Ok(EffectEstimate {
            intervention: iv.clone(),
            kind: EstimateKind::Cace,
            vector,
            n_contributors: self.support_size() as usize,
            shortfall: false,
        })
    }

    /// Exact marginal distribution of each concept.
    pub fn concept_marginals(&self, cap: u128) -> Result<Vec<Vec<f64>>, ScmError> {
        let domains: Vec<usize> = self
            .graph
            .concepts()
            .iter()
            .map(|c| c.domain.len())
            .collect();
        let width: usize = domains.iter().sum();
        let flat = self.expectation(cap, width, |exo| {
            let r = self.realize(exo, &[]);
            let mut out = vec![0.0; width];
            let mut offset = 0;
            for (c, d) in domains.iter().enumerate() {
                out[offset + r.concepts[c]] = 1.0;
                offset += d;
            }
            Ok(out)
        })?;
        let mut out = Vec::new();
        let mut offset = 0;
        for d in domains {
            out.push(flat[offset..offset + d].to_vec());
            offset += d;
        }
        Ok(out)
    }
}

/// Exact joint distribution of (visible features, model output, concept
/// value) for each concept index in `concepts`, keyed by bit patterns.
pub fn observational_cells(
    scm: &Scm,
    model: &dyn ExplainedModel,
    visible_dim: usize,
    concepts: &[usize],
    cap: u128,
) -> Result<Vec<BTreeMap<Vec<u64>, f64>>, ScmError> {
    let mut tables = vec![BTreeMap::new(); concepts.len()];
    let mut failure = None;
    scm.for_each_state(cap, |p, exo| {
        if p == 0.0 || failure.is_some() {
            return;
        }
        let r = scm.realize(exo, &[]);
        let out = match model.predict(&r.features) {
            Ok(o) => o,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let mut key: Vec<u64> = r.features[..visible_dim]
            .iter()
            .map(|v| v.to_bits())
            .collect();
        key.extend(out.iter().map(|v| v.to_bits()));
        for (table, &c) in tables.iter_mut().zip(concepts) {
            let mut k = key.clone();
            k.push(r.concepts[c] as u64);
            *table.entry(k).or_insert(0.0) += p;
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(tables)
}

/// Largest absolute difference between two cell tables over the union of
/// their keys.
pub fn max_cell_gap(a: &BTreeMap<Vec<u64>, f64>, b: &BTreeMap<Vec<u64>, f64>) -> f64 {
    let mut gap: f64 = 0.0;
    for (k, v) in a {
        gap = gap.max((v - b.get(k).copied().unwrap_or(0.0)).abs());
    }
    for (k, v) in b {
        if !a.contains_key(k) {
            gap = gap.max(v.abs());
        }
    }
    gap
}
