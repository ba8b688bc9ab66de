//! Causal graphs over concepts, exogenous variables and the reserved text,
//! label and model nodes, with back-door adjustment and path auditing.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on enumerated paths for [`CausalGraph::blocked_paths`].
pub const DEFAULT_PATH_CAP: usize = 100_000;

/// Above this many candidate concepts the subset search is refused.
const MAX_ADJUSTMENT_CANDIDATES: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("concept `{0}` needs at least two domain values")]
    SmallDomain(String),
    #[error("concept `{concept}` repeats domain value `{value}`")]
    DuplicateValue { concept: String, value: String },
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid edge {from} -> {to}: {reason}")]
    InvalidEdge {
        from: String,
        to: String,
        reason: &'static str,
    },
    #[error("graph contains a cycle through `{0}`")]
    Cyclic(String),
    #[error("text node `{0}` has no concept parent")]
    TextWithoutConcept(String),
    #[error("concept `{0}` has no exogenous parent and is not declared exogenous-free")]
    MissingExogenous(String),
    #[error("a label node requires `label_orientation`")]
    MissingOrientation,
    #[error("`{value}` is not in the domain of `{concept}`")]
    UnknownValue { concept: String, value: String },
    #[error("`{0}` is not a concept of this graph")]
    NotAConcept(String),
    #[error(
        "no set of observed concepts blocks every back-door path from `{treatment}` to `{outcome}`"
    )]
    NonIdentifiable { treatment: String, outcome: String },
    #[error("more than {cap} paths between `{from}` and `{to}`")]
    PathExplosion {
        from: String,
        to: String,
        cap: usize,
    },
    #[error("{0} adjustment candidates exceed the exhaustive-search limit")]
    TooManyCandidates(usize),
}

/// A high-level concept with an ordered finite domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub domain: Vec<String>,
    #[serde(default = "default_true")]
    pub observed: bool,
    /// Declares that the concept intentionally has no exogenous parent.
    #[serde(default, skip_serializing_if = "is_false")]
    pub exogenous_free: bool,
}

fn default_true() -> bool {
    true
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl Concept {
    pub fn new(name: &str, domain: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            domain: domain.iter().map(|v| v.to_string()).collect(),
            observed: true,
            exogenous_free: false,
        }
    }

    pub fn unobserved(mut self) -> Self {
        self.observed = false;
        self
    }

    pub fn exogenous_free(mut self) -> Self {
        self.exogenous_free = true;
        self
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.domain.iter().position(|v| v == value)
    }
}

/// Orientation of the edge between the text node and the label node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrientation {
    /// `Y -> X`: the label is written first and shapes the text.
    LabelToText,
    /// `X -> Y`: the label is read off the text.
    TextToLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedNodes {
    #[serde(default = "default_text")]
    pub text: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
}

fn default_text() -> String {
    "X".into()
}

fn default_model() -> String {
    "f(X)".into()
}

impl Default for ReservedNodes {
    fn default() -> Self {
        Self {
            text: default_text(),
            label: Some("Y".into()),
            model: default_model(),
        }
    }
}

/// On-disk (JSON) form of a causal graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub concepts: Vec<Concept>,
    #[serde(default)]
    pub exogenous: Vec<String>,
    #[serde(default)]
    pub reserved: ReservedNodes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_orientation: Option<LabelOrientation>,
    pub edges: Vec<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Concept(usize),
    Exogenous,
    Text,
    Label,
    Model,
}

/// Role of a node relative to a treatment/outcome pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Confounder,
    Mediator,
    Collider,
    Neither,
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeRole::Confounder => "confounder",
            NodeRole::Mediator => "mediator",
            NodeRole::Collider => "collider",
            NodeRole::Neither => "neither",
        };
        f.write_str(s)
    }
}

/// Which effect an intervention is meant to estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Direct,
    #[default]
    Total,
}

/// Direction of one edge along a path, read left to right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arrow {
    Forward,
    Backward,
}

/// One treatment-outcome path together with its d-separation status.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TracedPath {
    pub nodes: Vec<String>,
    pub arrows: Vec<Arrow>,
    pub blocked: bool,
}

impl TracedPath {
    /// True when the first edge points into the treatment.
    pub fn is_back_door(&self) -> bool {
        self.arrows.first() == Some(&Arrow::Backward)
    }

    pub fn is_directed(&self) -> bool {
        self.arrows.iter().all(|a| *a == Arrow::Forward)
    }
}

impl fmt::Display for TracedPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, node) in self.nodes.iter().enumerate() {
            if i > 0 {
                let arrow = match self.arrows[i - 1] {
                    Arrow::Forward => " → ",
                    Arrow::Backward => " ← ",
                };
                f.write_str(arrow)?;
            }
            f.write_str(node)?;
        }
        Ok(())
    }
}

/// An intervention `treatment: source -> target`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Intervention {
    pub treatment: String,
    pub source: String,
    pub target: String,
}

impl Intervention {
    pub fn new(treatment: &str, source: &str, target: &str) -> Self {
        Self {
            treatment: treatment.to_string(),
            source: source.to_string(),
            target: target.to_string(),
        }
    }

    pub fn reversed(&self) -> Self {
        Self::new(&self.treatment, &self.target, &self.source)
    }

    pub fn is_identity(&self) -> bool {
        self.source == self.target
    }

    /// Resolves to (concept index, source index, target index).
    pub fn resolve(&self, graph: &CausalGraph) -> Result<(usize, usize, usize), GraphError> {
        let c = graph.require_concept(&self.treatment)?;
        let concept = &graph.concepts[c];
        let value = |v: &str| {
            concept
                .value_index(v)
                .ok_or_else(|| GraphError::UnknownValue {
                    concept: concept.name.clone(),
                    value: v.to_string(),
                })
        };
        Ok((c, value(&self.source)?, value(&self.target)?))
    }

    /// Every ordered pair of distinct values for each observed concept.
    pub fn all_for(graph: &CausalGraph) -> Vec<Intervention> {
        let mut out = Vec::new();
        for c in graph.concepts().iter().filter(|c| c.observed) {
            for s in &c.domain {
                for t in &c.domain {
                    if s != t {
                        out.push(Intervention::new(&c.name, s, t));
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}->{}", self.treatment, self.source, self.target)
    }
}

impl std::str::FromStr for Intervention {
    type Err = String;

    /// Parses the `T:source->target` form written by `Display`.
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected `CONCEPT:SOURCE->TARGET`, got `{s}`");
        let (treatment, rest) = s.split_once(':').ok_or_else(bad)?;
        let (source, target) = rest.split_once("->").ok_or_else(bad)?;
        if [treatment, source, target]
            .iter()
            .any(|p| p.trim().is_empty())
        {
            return Err(bad());
        }
        Ok(Intervention::new(
            treatment.trim(),
            source.trim(),
            target.trim(),
        ))
    }
}

/// A validated, immutable causal DAG.
#[derive(Clone, Debug)]
pub struct CausalGraph {
    concepts: Vec<Concept>,
    exogenous: Vec<String>,
    reserved: ReservedNodes,
    orientation: Option<LabelOrientation>,
    names: Vec<String>,
    kinds: Vec<NodeKind>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    listed_edges: Vec<(String, String)>,
}

impl CausalGraph {
    pub fn from_file(file: GraphFile) -> Result<Self, GraphError> {
        let GraphFile {
            concepts,
            exogenous,
            reserved,
            label_orientation,
            edges,
        } = file;

        let mut names = Vec::new();
        let mut kinds = Vec::new();
        let mut index = HashMap::new();
        let mut add = |name: &str, kind: NodeKind| -> Result<(), GraphError> {
            if index.contains_key(name) {
                return Err(GraphError::DuplicateNode(name.to_string()));
            }
            index.insert(name.to_string(), names.len());
            names.push(name.to_string());
            kinds.push(kind);
            Ok(())
        };
        for (i, c) in concepts.iter().enumerate() {
            if c.domain.len() < 2 {
                return Err(GraphError::SmallDomain(c.name.clone()));
            }
            let mut seen = BTreeSet::new();
            for v in &c.domain {
                if !seen.insert(v) {
                    return Err(GraphError::DuplicateValue {
                        concept: c.name.clone(),
                        value: v.clone(),
                    });
                }
            }
            add(&c.name, NodeKind::Concept(i))?;
        }
        for e in &exogenous {
            add(e, NodeKind::Exogenous)?;
        }
        add(&reserved.text, NodeKind::Text)?;
        if let Some(label) = &reserved.label {
            add(label, NodeKind::Label)?;
        }
        add(&reserved.model, NodeKind::Model)?;

        let n = names.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let text = index[&reserved.text];
        let model = index[&reserved.model];
        let label = reserved.label.as_ref().map(|l| index[l]);

        let mut connect = |from: usize, to: usize| -> Result<(), GraphError> {
            let invalid = |reason| GraphError::InvalidEdge {
                from: names[from].clone(),
                to: names[to].clone(),
                reason,
            };
            if from == to {
                return Err(invalid("self loop"));
            }
            if children[from].contains(&to) {
                return Err(invalid("duplicate edge"));
            }
            if kinds[to] == NodeKind::Exogenous {
                return Err(invalid("exogenous nodes have no parents"));
            }
            if kinds[to] == NodeKind::Model && from != text {
                return Err(invalid("the model node reads only the text node"));
            }
            if kinds[from] == NodeKind::Model {
                return Err(invalid("the model node has no children"));
            }
            children[from].push(to);
            parents[to].push(from);
            Ok(())
        };

        let mut listed_edges = Vec::with_capacity(edges.len());
        for (a, b) in &edges {
            let from = *index
                .get(a)
                .ok_or_else(|| GraphError::UnknownNode(a.clone()))?;
            let to = *index
                .get(b)
                .ok_or_else(|| GraphError::UnknownNode(b.clone()))?;
            if let Some(l) = label {
                if (from == l && to == text) || (from == text && to == l) {
                    return Err(GraphError::InvalidEdge {
                        from: a.clone(),
                        to: b.clone(),
                        reason: "declare the text-label edge through label_orientation",
                    });
                }
            }
            if from == text && to == model {
                // implicit; tolerated when listed explicitly
                continue;
            }
            connect(from, to)?;
            listed_edges.push((a.clone(), b.clone()));
        }
        connect(text, model)?;
        match (label, label_orientation) {
            (Some(l), Some(LabelOrientation::LabelToText)) => connect(l, text)?,
            (Some(l), Some(LabelOrientation::TextToLabel)) => connect(text, l)?,
            (Some(_), None) => return Err(GraphError::MissingOrientation),
            (None, _) => {}
        }

        let graph = Self {
            concepts,
            exogenous,
            reserved,
            orientation: if label.is_some() {
                label_orientation
            } else {
                None
            },
            names,
            kinds,
            index,
            parents,
            children,
            listed_edges,
        };
        graph.topological_order()?;

        if !graph.parents[text]
            .iter()
            .any(|&p| matches!(graph.kinds[p], NodeKind::Concept(_)))
        {
            return Err(GraphError::TextWithoutConcept(graph.reserved.text.clone()));
        }
        for c in &graph.concepts {
            let id = graph.index[&c.name];
            let has_exo = graph.parents[id]
                .iter()
                .any(|&p| graph.kinds[p] == NodeKind::Exogenous);
            if !has_exo && !c.exogenous_free {
                return Err(GraphError::MissingExogenous(c.name.clone()));
            }
        }
        Ok(graph)
    }

    pub fn from_json(text: &str) -> Result<Self, crate::Error> {
        let file: GraphFile = serde_json::from_str(text)?;
        Ok(Self::from_file(file)?)
    }

    pub fn to_file(&self) -> GraphFile {
        GraphFile {
            concepts: self.concepts.clone(),
            exogenous: self.exogenous.clone(),
            reserved: self.reserved.clone(),
            label_orientation: self.orientation,
            edges: self.listed_edges.clone(),
        }
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn exogenous(&self) -> &[String] {
        &self.exogenous
    }

    pub fn reserved(&self) -> &ReservedNodes {
        &self.reserved
    }

    pub fn orientation(&self) -> Option<LabelOrientation> {
        self.orientation
    }

    pub fn text_node(&self) -> &str {
        &self.reserved.text
    }

    pub fn model_node(&self) -> &str {
        &self.reserved.model
    }

    pub fn label_node(&self) -> Option<&str> {
        self.reserved.label.as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn node(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn kind(&self, id: usize) -> NodeKind {
        self.kinds[id]
    }

    pub fn parents(&self, id: usize) -> &[usize] {
        &self.parents[id]
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn concept(&self, name: &str) -> Option<&Concept> {
        self.concept_index(name).map(|i| &self.concepts[i])
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        match self.index.get(name).map(|&id| self.kinds[id]) {
            Some(NodeKind::Concept(i)) => Some(i),
            _ => None,
        }
    }

    pub fn concept_node(&self, concept: usize) -> usize {
        self.index[&self.concepts[concept].name]
    }

    fn require_concept(&self, name: &str) -> Result<usize, GraphError> {
        self.concept_index(name)
            .ok_or_else(|| GraphError::NotAConcept(name.to_string()))
    }

    fn require_node(&self, name: &str) -> Result<usize, GraphError> {
        self.node(name)
            .ok_or_else(|| GraphError::UnknownNode(name.to_string()))
    }

    /// Kahn ordering; ties resolve by node index so the order is stable.
    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        let n = self.names.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&next) = ready.iter().next() {
            ready.remove(&next);
            order.push(next);
            for &c in &self.children[next] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(GraphError::Cyclic(self.names[stuck].clone()));
        }
        Ok(order)
    }

    /// Strict descendants of `id`.
    pub fn descendants(&self, id: usize) -> BTreeSet<usize> {
        self.closure(id, |g, v| &g.children[v])
    }

    /// Strict ancestors of `id`.
    pub fn ancestors(&self, id: usize) -> BTreeSet<usize> {
        self.closure(id, |g, v| &g.parents[v])
    }

    fn closure<'a>(
        &'a self,
        start: usize,
        next: impl Fn(&'a Self, usize) -> &'a [usize],
    ) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &w in next(self, v) {
                if seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    /// Names of concepts that are descendants of `concept`.
    pub fn concept_descendants(&self, concept: &str) -> Result<BTreeSet<String>, GraphError> {
        let c = self.require_concept(concept)?;
        Ok(self
            .descendants(self.concept_node(c))
            .into_iter()
            .filter(|&v| matches!(self.kinds[v], NodeKind::Concept(_)))
            .map(|v| self.names[v].clone())
            .collect())
    }

    /// d-separation of `x` and `y` given `z`, optionally ignoring the
    /// outgoing edges of `cut_outgoing` (the back-door graph).
    fn d_separated(
        &self,
        x: usize,
        y: usize,
        z: &BTreeSet<usize>,
        cut_outgoing: Option<usize>,
    ) -> bool {
        let n = self.names.len();
        let has_edge = |from: usize, _to: usize| Some(from) != cut_outgoing;

        // nodes with a descendant (or themselves) in z, under the cut graph
        let mut anc_of_z = vec![false; n];
        let mut queue: VecDeque<usize> = z.iter().copied().collect();
        for &v in z {
            anc_of_z[v] = true;
        }
        while let Some(v) = queue.pop_front() {
            for &p in &self.parents[v] {
                if has_edge(p, v) && !anc_of_z[p] {
                    anc_of_z[p] = true;
                    queue.push_back(p);
                }
            }
        }

        // Bayes-ball: (node, arrived_from_child)
        let mut visited = vec![[false; 2]; n];
        let mut queue = VecDeque::from([(x, true)]);
        while let Some((v, from_child)) = queue.pop_front() {
            let slot = usize::from(from_child);
            if visited[v][slot] {
                continue;
            }
            visited[v][slot] = true;
            if v == y {
                return false;
            }
            let in_z = z.contains(&v);
            if from_child {
                if !in_z {
                    for &p in &self.parents[v] {
                        if has_edge(p, v) {
                            queue.push_back((p, true));
                        }
                    }
                    for &c in &self.children[v] {
                        if has_edge(v, c) {
                            queue.push_back((c, false));
                        }
                    }
                }
            } else {
                if !in_z {
                    for &c in &self.children[v] {
                        if has_edge(v, c) {
                            queue.push_back((c, false));
                        }
                    }
                }
                if anc_of_z[v] {
                    for &p in &self.parents[v] {
                        if has_edge(p, v) {
                            queue.push_back((p, true));
                        }
                    }
                }
            }
        }
        true
    }

    /// True when `set` satisfies the back-door criterion for
    /// `treatment -> outcome`.
    pub fn satisfies_back_door(
        &self,
        treatment: &str,
        outcome: &str,
        set: &BTreeSet<String>,
    ) -> Result<bool, GraphError> {
        let t = self.concept_node(self.require_concept(treatment)?);
        let o = self.require_node(outcome)?;
        let ids = set
            .iter()
            .map(|s| self.require_node(s))
            .collect::<Result<BTreeSet<_>, _>>()?;
        Ok(self.back_door_ok(t, o, &ids, &self.descendants(t)))
    }

    fn back_door_ok(
        &self,
        t: usize,
        o: usize,
        z: &BTreeSet<usize>,
        desc: &BTreeSet<usize>,
    ) -> bool {
        if z.iter().any(|v| desc.contains(v) || *v == t || *v == o) {
            return false;
        }
        self.d_separated(t, o, z, Some(t))
    }

    /// The lexicographically smallest minimal-cardinality set of observed
    /// concepts satisfying the back-door criterion.
    pub fn adjustment_set(
        &self,
        treatment: &str,
        outcome: &str,
    ) -> Result<BTreeSet<String>, GraphError> {
        let t = self.concept_node(self.require_concept(treatment)?);
        let o = self.require_node(outcome)?;
        let desc = self.descendants(t);
        let mut candidates: Vec<(String, usize)> = self
            .concepts
            .iter()
            .filter(|c| c.observed)
            .map(|c| (c.name.clone(), self.index[&c.name]))
            .filter(|(_, id)| *id != t && *id != o && !desc.contains(id))
            .collect();
        candidates.sort();
        if candidates.len() > MAX_ADJUSTMENT_CANDIDATES {
            return Err(GraphError::TooManyCandidates(candidates.len()));
        }
        let m = candidates.len();
        for size in 0..=m {
            let mut combo: Vec<usize> = (0..size).collect();
            loop {
                let z: BTreeSet<usize> = combo.iter().map(|&i| candidates[i].1).collect();
                if self.back_door_ok(t, o, &z, &desc) {
                    return Ok(combo.iter().map(|&i| candidates[i].0.clone()).collect());
                }
                if !next_combination(&mut combo, m) {
                    break;
                }
            }
        }
        Err(GraphError::NonIdentifiable {
            treatment: treatment.to_string(),
            outcome: outcome.to_string(),
        })
    }

    /// Concepts to hold fixed for the requested effect: the adjustment set,
    /// plus observed mediators when only the direct effect is wanted.
    pub fn hold_fixed_set(
        &self,
        treatment: &str,
        outcome: &str,
        effect: EffectKind,
    ) -> Result<BTreeSet<String>, GraphError> {
        let mut set = self.adjustment_set(treatment, outcome)?;
        if effect == EffectKind::Direct {
            set.extend(self.concepts_with_role(treatment, outcome, NodeRole::Mediator)?);
        }
        Ok(set)
    }

    /// Observed concepts carrying `role` for the given pair.
    pub fn concepts_with_role(
        &self,
        treatment: &str,
        outcome: &str,
        role: NodeRole,
    ) -> Result<BTreeSet<String>, GraphError> {
        let roles = self.classify_nodes(treatment, outcome)?;
        Ok(self
            .concepts
            .iter()
            .filter(|c| c.observed && c.name != treatment)
            .filter(|c| roles.get(&c.name).is_some_and(|r| r.contains(&role)))
            .map(|c| c.name.clone())
            .collect())
    }

    /// All simple paths in the skeleton between `from` and `to`.
    fn simple_paths(
        &self,
        from: usize,
        to: usize,
        cap: usize,
    ) -> Result<Vec<(Vec<usize>, Vec<Arrow>)>, GraphError> {
        let mut out = Vec::new();
        let mut on_path = vec![false; self.names.len()];
        let mut nodes = vec![from];
        let mut arrows = Vec::new();
        on_path[from] = true;
        self.extend_paths(to, cap, &mut on_path, &mut nodes, &mut arrows, &mut out)?;
        Ok(out)
    }

    fn extend_paths(
        &self,
        to: usize,
        cap: usize,
        on_path: &mut [bool],
        nodes: &mut Vec<usize>,
        arrows: &mut Vec<Arrow>,
        out: &mut Vec<(Vec<usize>, Vec<Arrow>)>,
    ) -> Result<(), GraphError> {
        let v = *nodes.last().expect("path is never empty");
        if v == to {
            if out.len() >= cap {
                return Err(GraphError::PathExplosion {
                    from: self.names[nodes[0]].clone(),
                    to: self.names[to].clone(),
                    cap,
                });
            }
            out.push((nodes.clone(), arrows.clone()));
            return Ok(());
        }
        let steps = self.children[v]
            .iter()
            .map(|&c| (c, Arrow::Forward))
            .chain(self.parents[v].iter().map(|&p| (p, Arrow::Backward)));
        for (w, arrow) in steps {
            if on_path[w] {
                continue;
            }
            on_path[w] = true;
            nodes.push(w);
            arrows.push(arrow);
            self.extend_paths(to, cap, on_path, nodes, arrows, out)?;
            arrows.pop();
            nodes.pop();
            on_path[w] = false;
        }
        Ok(())
    }

    /// Every treatment-outcome path with its status under `conditioned`.
    pub fn blocked_paths(
        &self,
        treatment: &str,
        outcome: &str,
        conditioned: &BTreeSet<String>,
        cap: usize,
    ) -> Result<Vec<TracedPath>, GraphError> {
        let t = self.require_node(treatment)?;
        let o = self.require_node(outcome)?;
        let z = conditioned
            .iter()
            .map(|s| self.require_node(s))
            .collect::<Result<BTreeSet<_>, _>>()?;
        let mut activated = z.clone();
        for &v in &z {
            activated.extend(self.ancestors(v));
        }
        let paths = self.simple_paths(t, o, cap)?;
        Ok(paths
            .into_iter()
            .map(|(nodes, arrows)| {
                let blocked = (1..nodes.len() - 1).any(|i| {
                    let v = nodes[i];
                    let collider = arrows[i - 1] == Arrow::Forward && arrows[i] == Arrow::Backward;
                    if collider {
                        !activated.contains(&v)
                    } else {
                        z.contains(&v)
                    }
                });
                TracedPath {
                    nodes: nodes.iter().map(|&v| self.names[v].clone()).collect(),
                    arrows,
                    blocked,
                }
            })
            .collect())
    }

    /// Labels every node by its role(s) on the treatment-outcome paths.
    pub fn classify_nodes(
        &self,
        treatment: &str,
        outcome: &str,
    ) -> Result<BTreeMap<String, BTreeSet<NodeRole>>, GraphError> {
        let t = self.require_node(treatment)?;
        let o = self.require_node(outcome)?;
        let desc = self.descendants(t);
        let mut roles: Vec<BTreeSet<NodeRole>> = vec![BTreeSet::new(); self.names.len()];
        for (nodes, arrows) in self.simple_paths(t, o, DEFAULT_PATH_CAP)? {
            let directed = arrows.iter().all(|a| *a == Arrow::Forward);
            let back_door = arrows[0] == Arrow::Backward;
            for i in 1..nodes.len() - 1 {
                let v = nodes[i];
                let collider = arrows[i - 1] == Arrow::Forward && arrows[i] == Arrow::Backward;
                if collider {
                    roles[v].insert(NodeRole::Collider);
                } else if directed {
                    roles[v].insert(NodeRole::Mediator);
                } else if back_door && !desc.contains(&v) {
                    roles[v].insert(NodeRole::Confounder);
                }
            }
        }
        Ok(roles
            .into_iter()
            .enumerate()
            .map(|(v, mut r)| {
                if r.is_empty() {
                    r.insert(NodeRole::Neither);
                }
                (self.names[v].clone(), r)
            })
            .collect())
    }
}

/// Advances `combo` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Restaurant-review graph: four aspect concepts sharing the exogenous
/// state `U`, a style variable `V` on the text, and the rating `Y`.
pub fn review_graph(orientation: LabelOrientation) -> CausalGraph {
    let domain = ["negative", "unknown", "positive"];
    let mut edges = Vec::new();
    for c in ["F", "S", "A", "N"] {
        edges.push(("U".to_string(), c.to_string()));
        edges.push((c.to_string(), "X".to_string()));
        edges.push((c.to_string(), "Y".to_string()));
    }
    edges.push(("V".into(), "X".into()));
    CausalGraph::from_file(GraphFile {
        concepts: ["F", "S", "A", "N"]
            .iter()
            .map(|c| Concept::new(c, &domain))
            .collect(),
        exogenous: vec!["U".into(), "V".into()],
        reserved: ReservedNodes::default(),
        label_orientation: Some(orientation),
        edges,
    })
    .expect("review graph is valid")
}

/// Health-consultation graph: two latent diseases, three symptoms, and a
/// cough that can also cause a sore throat.
pub fn health_graph() -> CausalGraph {
    let severity = ["absent", "mild", "severe"];
    let e = |a: &str, b: &str| (a.to_string(), b.to_string());
    CausalGraph::from_file(GraphFile {
        concepts: vec![
            Concept::new("Disease1", &["no", "yes"])
                .unobserved()
                .exogenous_free(),
            Concept::new("Disease2", &["no", "yes"])
                .unobserved()
                .exogenous_free(),
            Concept::new("LackOfTaste", &severity),
            Concept::new("Cough", &severity),
            Concept::new("SoreThroat", &severity),
        ],
        exogenous: vec![
            "eps_L".into(),
            "eps_C".into(),
            "eps_S".into(),
            "eps_T".into(),
        ],
        reserved: ReservedNodes {
            text: "Text".into(),
            label: None,
            model: "f(Text)".into(),
        },
        label_orientation: None,
        edges: vec![
            e("eps_L", "LackOfTaste"),
            e("eps_C", "Cough"),
            e("eps_S", "SoreThroat"),
            e("eps_T", "Text"),
            e("Disease1", "LackOfTaste"),
            e("Disease1", "Cough"),
            e("Disease2", "SoreThroat"),
            e("Cough", "SoreThroat"),
            e("LackOfTaste", "Text"),
            e("Cough", "Text"),
            e("SoreThroat", "Text"),
        ],
    })
    .expect("health graph is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn chain_graph() -> CausalGraph {
        CausalGraph::from_file(GraphFile {
            concepts: vec![
                Concept::new("T", &["0", "1"]),
                Concept::new("Z", &["0", "1"]),
            ],
            exogenous: vec!["U".into()],
            reserved: ReservedNodes {
                label: None,
                ..ReservedNodes::default()
            },
            label_orientation: None,
            edges: vec![
                ("U".into(), "T".into()),
                ("U".into(), "Z".into()),
                ("T".into(), "Z".into()),
                ("Z".into(), "X".into()),
            ],
        })
        .unwrap()
    }

    #[test]
    fn review_adjustment_set_matches_back_door_example() {
        for orientation in [LabelOrientation::LabelToText, LabelOrientation::TextToLabel] {
            let g = review_graph(orientation);
            for t in ["F", "S", "A", "N"] {
                let mut expected = set(&["F", "S", "A", "N"]);
                expected.remove(t);
                assert_eq!(g.adjustment_set(t, "f(X)").unwrap(), expected, "{t}");
            }
        }
    }

    #[test]
    fn single_concept_graph_needs_no_adjustment() {
        let g = CausalGraph::from_file(GraphFile {
            concepts: vec![Concept::new("T", &["0", "1"])],
            exogenous: vec!["U".into()],
            reserved: ReservedNodes {
                label: None,
                ..ReservedNodes::default()
            },
            label_orientation: None,
            edges: vec![("U".into(), "T".into()), ("T".into(), "X".into())],
        })
        .unwrap();
        assert!(g.adjustment_set("T", "f(X)").unwrap().is_empty());
    }

    #[test]
    fn health_graph_adjusts_for_taste_not_sore_throat() {
        let g = health_graph();
        assert_eq!(
            g.adjustment_set("Cough", "f(Text)").unwrap(),
            set(&["LackOfTaste"])
        );
        let roles = g.classify_nodes("Cough", "f(Text)").unwrap();
        assert!(roles["SoreThroat"].contains(&NodeRole::Mediator));
        assert!(roles["LackOfTaste"].contains(&NodeRole::Confounder));
        assert_eq!(
            g.hold_fixed_set("Cough", "f(Text)", EffectKind::Direct)
                .unwrap(),
            set(&["LackOfTaste", "SoreThroat"])
        );
    }

    #[test]
    fn hidden_confounder_is_non_identifiable() {
        let g = CausalGraph::from_file(GraphFile {
            concepts: vec![
                Concept::new("T", &["0", "1"]),
                Concept::new("H", &["0", "1"]).unobserved(),
            ],
            exogenous: vec!["U".into()],
            reserved: ReservedNodes {
                label: None,
                ..ReservedNodes::default()
            },
            label_orientation: None,
            edges: vec![
                ("U".into(), "H".into()),
                ("H".into(), "T".into()),
                ("U".into(), "T".into()),
                ("H".into(), "X".into()),
                ("T".into(), "X".into()),
            ],
        })
        .unwrap();
        assert!(matches!(
            g.adjustment_set("T", "f(X)"),
            Err(GraphError::NonIdentifiable { .. })
        ));
    }

    #[test]
    fn chain_node_is_mediator() {
        let g = chain_graph();
        let roles = g.classify_nodes("T", "f(X)").unwrap();
        assert!(roles["Z"].contains(&NodeRole::Mediator));
        assert_eq!(roles["T"], BTreeSet::from([NodeRole::Neither]));
    }

    #[test]
    fn label_is_collider_when_read_off_text() {
        let g = review_graph(LabelOrientation::TextToLabel);
        let roles = g.classify_nodes("S", "f(X)").unwrap();
        assert_eq!(roles["Y"], BTreeSet::from([NodeRole::Collider]));
        let g = review_graph(LabelOrientation::LabelToText);
        let roles = g.classify_nodes("S", "f(X)").unwrap();
        assert!(roles["Y"].contains(&NodeRole::Collider));
        assert!(roles["Y"].contains(&NodeRole::Mediator));
        assert_eq!(roles["V"], BTreeSet::from([NodeRole::Neither]));
    }

    #[test]
    fn fork_and_collider_blocking() {
        let fork = CausalGraph::from_file(GraphFile {
            concepts: vec![
                Concept::new("S", &["0", "1"]),
                Concept::new("F", &["0", "1"]),
            ],
            exogenous: vec!["U".into()],
            reserved: ReservedNodes {
                label: Some("Y".into()),
                ..ReservedNodes::default()
            },
            label_orientation: Some(LabelOrientation::TextToLabel),
            edges: vec![
                ("U".into(), "S".into()),
                ("U".into(), "F".into()),
                ("F".into(), "X".into()),
                ("S".into(), "Y".into()),
                ("F".into(), "Y".into()),
            ],
        })
        .unwrap();
        let open = fork
            .blocked_paths("S", "F", &BTreeSet::new(), DEFAULT_PATH_CAP)
            .unwrap();
        let through_u = open.iter().find(|p| p.nodes == ["S", "U", "F"]).unwrap();
        assert!(!through_u.blocked);
        let through_y = open.iter().find(|p| p.nodes == ["S", "Y", "F"]).unwrap();
        assert!(through_y.blocked);
        let given_y = fork
            .blocked_paths("S", "F", &set(&["Y"]), DEFAULT_PATH_CAP)
            .unwrap();
        assert!(
            !given_y
                .iter()
                .find(|p| p.nodes == ["S", "Y", "F"])
                .unwrap()
                .blocked
        );
    }

    #[test]
    fn path_cap_is_enforced() {
        let g = review_graph(LabelOrientation::LabelToText);
        let err = g
            .blocked_paths("S", "f(X)", &BTreeSet::new(), 3)
            .unwrap_err();
        assert!(matches!(err, GraphError::PathExplosion { cap: 3, .. }));
    }

    #[test]
    fn validation_rejects_bad_graphs() {
        let base = || GraphFile {
            concepts: vec![Concept::new("T", &["0", "1"])],
            exogenous: vec!["U".into()],
            reserved: ReservedNodes {
                label: None,
                ..ReservedNodes::default()
            },
            label_orientation: None,
            edges: vec![("U".into(), "T".into()), ("T".into(), "X".into())],
        };
        let mut f = base();
        f.edges.push(("X".into(), "T".into()));
        assert!(matches!(
            CausalGraph::from_file(f),
            Err(GraphError::Cyclic(_))
        ));

        let mut f = base();
        f.edges.push(("T".into(), "f(X)".into()));
        assert!(matches!(
            CausalGraph::from_file(f),
            Err(GraphError::InvalidEdge { .. })
        ));

        let mut f = base();
        f.concepts[0].domain.truncate(1);
        assert!(matches!(
            CausalGraph::from_file(f),
            Err(GraphError::SmallDomain(_))
        ));

        let mut f = base();
        f.edges.retain(|e| e.1 != "X");
        assert!(matches!(
            CausalGraph::from_file(f),
            Err(GraphError::TextWithoutConcept(_))
        ));

        let mut f = base();
        f.edges.retain(|e| e.0 != "U");
        assert!(matches!(
            CausalGraph::from_file(f),
            Err(GraphError::MissingExogenous(_))
        ));

        let mut f = base();
        f.concepts.push(Concept::new("U", &["a", "b"]));
        assert!(matches!(
            CausalGraph::from_file(f),
            Err(GraphError::DuplicateNode(_))
        ));
    }

    #[test]
    fn review_graph_has_twenty_four_interventions() {
        let g = review_graph(LabelOrientation::TextToLabel);
        let ivs = Intervention::all_for(&g);
        assert_eq!(ivs.len(), 24);
        assert!(ivs.iter().all(|iv| iv.resolve(&g).is_ok()));
        assert!(Intervention::new("F", "positive", "great")
            .resolve(&g)
            .is_err());
    }

    #[test]
    fn json_round_trip_preserves_structure() {
        let g = review_graph(LabelOrientation::TextToLabel);
        let text = serde_json::to_string(&g.to_file()).unwrap();
        let back = CausalGraph::from_json(&text).unwrap();
        assert_eq!(back.to_file(), g.to_file());
        assert_eq!(back.orientation(), Some(LabelOrientation::TextToLabel));
    }
}
