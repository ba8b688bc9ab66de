//! Shipped data-generating processes and models.
//!
//! `desk_*` is a restaurant-review style DGP: four aspect concepts sharing a
//! latent state `U`, three style variables, two nuisance variables that
//! shape the features but not the model, and a five-class rating model.
//! `toy_*` is a small confounder-free DGP with two concepts used for the
//! exact-effect and ordering-reversal fixtures.

use crate::graph::{
    CausalGraph, Concept, GraphFile, Intervention, LabelOrientation, ReservedNodes,
};
use crate::model::{LinearSoftmaxModel, ModelSpec};
use crate::scm::{
    ConceptMechanism, ExogenousSpec, FeatureBlock, FeatureMechanism, LabelMechanism, LabelTerm,
    ScmSpec,
};

pub const DESK_ASPECTS: [&str; 4] = ["F", "S", "A", "N"];
pub const SENTIMENT: [&str; 3] = ["negative", "unknown", "positive"];
const ASPECT_WEIGHTS: [f64; 4] = [1.0, 0.8, 0.6, 0.45];
const STYLE_WEIGHT: f64 = 0.35;
const RATING_CLASSES: usize = 5;
const STYLE_COUNT: usize = 3;
const NUISANCE_WIDTH: usize = 4;

/// Feature layout of the desk DGP.
pub const DESK_ASPECT_WIDTH: usize = 3;
pub const DESK_STYLE_OFFSET: usize = DESK_ASPECTS.len() * DESK_ASPECT_WIDTH;
pub const DESK_NUISANCE_OFFSET: usize = DESK_STYLE_OFFSET + STYLE_COUNT;
pub const DESK_DIM: usize = DESK_NUISANCE_OFFSET + 2 * NUISANCE_WIDTH;

fn edge(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

fn desk_graph_file() -> GraphFile {
    let mut exogenous = vec!["U".to_string()];
    let mut edges = Vec::new();
    for c in DESK_ASPECTS {
        let noise = format!("e{c}");
        edges.push(edge("U", c));
        edges.push(edge(&noise, c));
        edges.push(edge(c, "X"));
        edges.push(edge(c, "Y"));
        exogenous.push(noise);
    }
    for v in 1..=STYLE_COUNT {
        exogenous.push(format!("V{v}"));
        edges.push(edge(&format!("V{v}"), "X"));
    }
    for w in 1..=2 {
        exogenous.push(format!("W{w}"));
        edges.push(edge(&format!("W{w}"), "X"));
    }
    GraphFile {
        concepts: DESK_ASPECTS
            .iter()
            .map(|c| Concept::new(c, &SENTIMENT))
            .collect(),
        exogenous,
        reserved: ReservedNodes::default(),
        label_orientation: Some(LabelOrientation::TextToLabel),
        edges,
    }
}

pub fn desk_graph() -> CausalGraph {
    CausalGraph::from_file(desk_graph_file()).expect("desk graph is valid")
}

fn sentiment_value(v: usize) -> f64 {
    v as f64 - 1.0
}

pub fn desk_spec() -> ScmSpec {
    let mut exogenous = vec![ExogenousSpec::uniform("U", 3)];
    let mut concepts = Vec::new();
    let mut blocks = Vec::new();
    for (i, c) in DESK_ASPECTS.iter().enumerate() {
        exogenous.push(ExogenousSpec::new(
            &format!("e{c}"),
            vec![0.55, 0.225, 0.225],
        ));
        // value = (U + e) mod 3
        let table = (0..3)
            .flat_map(|u| (0..3).map(move |e| (u + e) % 3))
            .collect();
        concepts.push(ConceptMechanism {
            concept: c.to_string(),
            parents: vec!["U".into(), format!("e{c}")],
            table,
        });
        blocks.push(FeatureBlock::Table {
            source: c.to_string(),
            offset: i * DESK_ASPECT_WIDTH,
            rows: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        });
    }
    for v in 0..STYLE_COUNT {
        let name = format!("V{}", v + 1);
        exogenous.push(ExogenousSpec::uniform_grid(&name, -1.0, 1.0, 5));
        let mut coef = vec![0.0; STYLE_COUNT];
        coef[v] = 1.0;
        blocks.push(FeatureBlock::Linear {
            source: name,
            offset: DESK_STYLE_OFFSET,
            coef,
        });
    }
    let nuisance = [[1.5, -1.0, 0.5, 1.2], [-0.8, 1.4, 1.1, -0.6]];
    for (w, coef) in nuisance.iter().enumerate() {
        let name = format!("W{}", w + 1);
        exogenous.push(ExogenousSpec::uniform_grid(&name, -1.0, 1.0, 5));
        blocks.push(FeatureBlock::Linear {
            source: name,
            offset: DESK_NUISANCE_OFFSET + w * NUISANCE_WIDTH,
            coef: coef.to_vec(),
        });
    }
    let terms = DESK_ASPECTS
        .iter()
        .zip(ASPECT_WEIGHTS)
        .map(|(c, beta)| LabelTerm {
            source: c.to_string(),
            rows: (0..3)
                .map(|v| {
                    (0..RATING_CLASSES)
                        .map(|k| (k as f64 - 2.0) * beta * sentiment_value(v))
                        .collect()
                })
                .collect(),
        })
        .collect();
    ScmSpec {
        graph: desk_graph_file(),
        exogenous,
        concepts,
        label: Some(LabelMechanism {
            classes: RATING_CLASSES,
            terms,
            feature_weights: Some(vec![0.0; RATING_CLASSES * DESK_DIM]),
        }),
        features: FeatureMechanism {
            dim: DESK_DIM,
            base: vec![0.0; DESK_DIM],
            blocks,
            hidden: vec![],
        },
    }
}

/// Ordinal rating model: class `k` scores `(k - 2) * s(x)` where `s` is a
/// weighted sum of aspect polarities and style.
pub fn desk_model() -> ModelSpec {
    let mut direction = [0.0; DESK_DIM];
    for (i, beta) in ASPECT_WEIGHTS.iter().enumerate() {
        direction[i * DESK_ASPECT_WIDTH] = -beta;
        direction[i * DESK_ASPECT_WIDTH + 2] = *beta;
    }
    for v in 0..STYLE_COUNT {
        direction[DESK_STYLE_OFFSET + v] = STYLE_WEIGHT;
    }
    let weights = (0..RATING_CLASSES)
        .map(|k| direction.iter().map(|d| (k as f64 - 2.0) * d).collect())
        .collect();
    let bias = vec![0.0, 0.4, 0.6, 0.4, 0.0];
    ModelSpec::LinearSoftmax(
        LinearSoftmaxModel::new("desk-rating", weights, bias, 1.0).expect("valid model"),
    )
}

pub fn desk_interventions() -> Vec<Intervention> {
    Intervention::all_for(&desk_graph())
}

fn toy_graph_file() -> GraphFile {
    GraphFile {
        concepts: vec![
            Concept::new("Taste", &["bad", "ok", "good"]),
            Concept::new("Price", &["low", "high"]),
        ],
        exogenous: vec!["eT".into(), "eP".into(), "V".into()],
        reserved: ReservedNodes {
            label: None,
            ..ReservedNodes::default()
        },
        label_orientation: None,
        edges: vec![
            edge("eT", "Taste"),
            edge("eP", "Price"),
            edge("Taste", "X"),
            edge("Price", "X"),
            edge("V", "X"),
        ],
    }
}

/// Two independent concepts plus a three-point style variable.
pub fn toy_spec() -> ScmSpec {
    ScmSpec {
        graph: toy_graph_file(),
        exogenous: vec![
            ExogenousSpec::new("eT", vec![0.3, 0.45, 0.25]),
            ExogenousSpec::new("eP", vec![0.6, 0.4]),
            ExogenousSpec::uniform_grid("V", -1.0, 1.0, 3),
        ],
        concepts: vec![
            ConceptMechanism {
                concept: "Taste".into(),
                parents: vec!["eT".into()],
                table: vec![0, 1, 2],
            },
            ConceptMechanism {
                concept: "Price".into(),
                parents: vec!["eP".into()],
                table: vec![0, 1],
            },
        ],
        label: None,
        features: FeatureMechanism {
            dim: 5,
            base: vec![0.0; 5],
            blocks: vec![
                FeatureBlock::Table {
                    source: "Taste".into(),
                    offset: 0,
                    rows: vec![vec![-1.0, 0.5], vec![0.0, 1.0], vec![1.0, 0.5]],
                },
                FeatureBlock::Table {
                    source: "Price".into(),
                    offset: 2,
                    rows: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                },
                FeatureBlock::Linear {
                    source: "V".into(),
                    offset: 4,
                    coef: vec![1.0],
                },
            ],
            hidden: vec![],
        },
    }
}

/// Five-class ordinal model over the toy features.
pub fn toy_model() -> ModelSpec {
    let direction = [0.5, 0.1, 0.6, -0.2, 0.3];
    let weights = (0..5)
        .map(|k| direction.iter().map(|d| (k as f64 - 2.0) * d).collect())
        .collect();
    ModelSpec::LinearSoftmax(
        LinearSoftmaxModel::new("toy-rating", weights, vec![0.0, 0.3, 0.5, 0.3, 0.0], 1.0)
            .expect("valid model"),
    )
}

/// The shipped strictly ordered pair on the toy model: the first has the
/// larger effect on the expected rating.
pub fn toy_ordered_pair() -> (Intervention, Intervention) {
    (
        Intervention::new("Taste", "bad", "good"),
        Intervention::new("Price", "low", "high"),
    )
}
