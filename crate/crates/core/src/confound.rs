//! Confounded variant of a DGP that leaves every observational joint intact
//! while reversing the effect ordering of two interventions.
//!
//! A hidden concept `C0` with values {0, 1, 2} is added as a parent of the
//! first treatment `C1`: `C0 = 0` forces `C1 = c1`, `C0 = 1` forces
//! `C1 = c1'`, and `C0 = 2` leaves the original mechanism in charge. `C0` is
//! computed from the same exogenous inputs as `C1` (it records which of the
//! three cases the original value falls in), so `C1` keeps its exact
//! distribution. A hidden feature coordinate carries
//! `psi = 1[C1 = c1] - 1[C0 = 0]`, which is zero on every observed unit and
//! nonzero only under intervention, and the new model shifts its expected
//! class index by `sign * 2d * psi`.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::graph::{Concept, Intervention, NodeKind};
use crate::model::{ExplainedModel, ModelSpec, SpuriousMode, SpuriousModel};
use crate::scm::{
    max_cell_gap, observational_cells, ConceptMechanism, FeatureBlock, Scm, ScmError, ScmSpec,
};

/// Result of [`build_confounded_dgp`].
#[derive(Clone, Debug)]
pub struct ConfoundedDgp {
    pub scm: Scm,
    pub model: ModelSpec,
    pub report: ConfoundReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConfoundReport {
    pub hidden_concept: String,
    /// Scalarized effect gap of the original pair.
    pub gap: f64,
    /// Sign multiplying `2d * psi` in the new model.
    pub sign: f64,
    pub original: [f64; 2],
    pub confounded: [f64; 2],
    /// Largest cell difference over all observational joints checked.
    pub max_joint_gap: f64,
}

fn hidden_name(scm: &Scm) -> String {
    let mut name = "C0".to_string();
    while scm.graph().node(&name).is_some() {
        name.push('_');
    }
    name
}

/// Builds the confounded DGP and its model for `iv1`, `iv2`, requiring the
/// first to have the strictly larger scalarized effect.
pub fn build_confounded_dgp(
    scm: &Scm,
    model: &ModelSpec,
    iv1: &Intervention,
    iv2: &Intervention,
    cap: u128,
) -> Result<ConfoundedDgp, ScmError> {
    let graph = scm.graph();
    let (c1, v1, v1p) = iv1.resolve(graph)?;
    let (c2, _, _) = iv2.resolve(graph)?;
    if c1 == c2 {
        return Err(ScmError::Precondition(
            "the two interventions must target different concepts".into(),
        ));
    }
    if v1 == v1p {
        return Err(ScmError::Precondition(
            "the first intervention must change its concept".into(),
        ));
    }
    let c1_node = graph.concept_node(c1);
    if graph
        .parents(c1_node)
        .iter()
        .any(|&p| matches!(graph.kind(p), NodeKind::Concept(_)))
    {
        return Err(ScmError::Precondition(format!(
            "`{}` must have no concept parents",
            iv1.treatment
        )));
    }
    if graph.ancestors(graph.concept_node(c2)).contains(&c1_node) {
        return Err(ScmError::Precondition(format!(
            "`{}` must not cause `{}`",
            iv1.treatment, iv2.treatment
        )));
    }
    let s1 = scm.exact_cace(model, iv1, cap)?.scalar();
    let s2 = scm.exact_cace(model, iv2, cap)?.scalar();
    let gap = s1 - s2;
    if !(gap > 0.0) {
        return Err(ScmError::Precondition(format!(
            "effect of {iv1} ({s1}) must exceed that of {iv2} ({s2})"
        )));
    }

    let hidden = hidden_name(scm);
    let spec = confounded_spec(scm, c1, v1, v1p, &hidden)?;
    let next = Scm::new(spec)?;
    let dim = scm.feature_dim();
    let original_concepts: Vec<usize> = (0..graph.concepts().len()).collect();
    let reference = observational_cells(scm, model, dim, &original_concepts, cap)?;

    let mut failures = Vec::new();
    for sign in [1.0, -1.0] {
        let candidate = ModelSpec::Spurious(SpuriousModel::new(
            &format!("{}+confounded", model.id()),
            model.clone(),
            dim + 1,
            dim,
            sign * 2.0 * gap,
            SpuriousMode::ExpectedIndexShift,
        )?);
        let effects = scm_effects(&next, &candidate, iv1, iv2, cap);
        let (t1, t2) = match effects {
            Ok(pair) => pair,
            Err(e) => {
                failures.push(format!("sign {sign}: {e}"));
                continue;
            }
        };
        if !(t1 < t2) {
            failures.push(format!("sign {sign}: effects {t1} vs {t2} not reversed"));
            continue;
        }
        let cells = observational_cells(&next, &candidate, dim, &original_concepts, cap)?;
        let max_joint_gap = reference
            .iter()
            .zip(&cells)
            .map(|(a, b)| max_cell_gap(a, b))
            .fold(0.0, f64::max);
        return Ok(ConfoundedDgp {
            scm: next,
            model: candidate,
            report: ConfoundReport {
                hidden_concept: hidden,
                gap,
                sign,
                original: [s1, s2],
                confounded: [t1, t2],
                max_joint_gap,
            },
        });
    }
    Err(ScmError::ConstructionFailed(failures.join("; ")))
}

fn scm_effects(
    scm: &Scm,
    model: &ModelSpec,
    iv1: &Intervention,
    iv2: &Intervention,
    cap: u128,
) -> Result<(f64, f64), ScmError> {
    Ok((
        scm.exact_cace(model, iv1, cap)?.scalar(),
        scm.exact_cace(model, iv2, cap)?.scalar(),
    ))
}

fn confounded_spec(
    scm: &Scm,
    c1: usize,
    v1: usize,
    v1p: usize,
    hidden: &str,
) -> Result<ScmSpec, ScmError> {
    let graph = scm.graph();
    let c1_name = graph.concepts()[c1].name.clone();
    let mut spec = scm.spec().clone();

    let old = spec
        .concepts
        .iter()
        .position(|m| m.concept == c1_name)
        .expect("every concept has a mechanism");
    let old_mech = spec.concepts[old].clone();
    let cards: Vec<usize> = old_mech
        .parents
        .iter()
        .map(|p| {
            spec.exogenous
                .iter()
                .find(|e| &e.name == p)
                .map(|e| e.probs.len())
                .expect("parents are exogenous")
        })
        .collect();
    let rows: usize = cards.iter().product();
    let category = |v: usize| {
        if v == v1 {
            0
        } else if v == v1p {
            1
        } else {
            2
        }
    };

    let hidden_mech = ConceptMechanism {
        concept: hidden.to_string(),
        parents: old_mech.parents.clone(),
        table: old_mech.table.iter().map(|&v| category(v)).collect(),
    };
    let mut table = Vec::with_capacity(rows * 3);
    for &orig in &old_mech.table {
        table.extend([v1, v1p, orig]);
    }
    spec.concepts[old] = ConceptMechanism {
        concept: c1_name.clone(),
        parents: old_mech
            .parents
            .iter()
            .cloned()
            .chain([hidden.to_string()])
            .collect(),
        table,
    };
    spec.concepts.push(hidden_mech);

    let text = graph.text_node().to_string();
    spec.graph
        .concepts
        .push(Concept::new(hidden, &["0", "1", "2"]).unobserved());
    let exo_parents: BTreeSet<String> = old_mech.parents.iter().cloned().collect();
    for p in &exo_parents {
        spec.graph.edges.push((p.clone(), hidden.to_string()));
    }
    spec.graph.edges.push((hidden.to_string(), c1_name.clone()));
    spec.graph.edges.push((hidden.to_string(), text.clone()));
    if !spec
        .graph
        .edges
        .iter()
        .any(|(a, b)| a == &c1_name && b == &text)
    {
        spec.graph.edges.push((c1_name.clone(), text));
    }

    let dim = spec.features.dim;
    spec.features.dim = dim + 1;
    spec.features.base.push(0.0);
    let c1_domain = graph.concepts()[c1].domain.len();
    spec.features.blocks.push(FeatureBlock::Table {
        source: c1_name,
        offset: dim,
        rows: (0..c1_domain)
            .map(|v| vec![if v == v1 { 1.0 } else { 0.0 }])
            .collect(),
    });
    spec.features.blocks.push(FeatureBlock::Table {
        source: hidden.to_string(),
        offset: dim,
        rows: vec![vec![-1.0], vec![0.0], vec![0.0]],
    });
    spec.features.hidden.push(dim);
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{toy_model, toy_ordered_pair, toy_spec};
    use crate::scm::DEFAULT_SUPPORT_CAP;

    #[test]
    fn toy_construction_reverses_and_preserves_joints() {
        let scm = Scm::new(toy_spec()).unwrap();
        let (iv1, iv2) = toy_ordered_pair();
        let out =
            build_confounded_dgp(&scm, &toy_model(), &iv1, &iv2, DEFAULT_SUPPORT_CAP).unwrap();
        let r = &out.report;
        assert!(r.original[0] > r.original[1]);
        assert!(r.confounded[0] < r.confounded[1]);
        assert!(r.max_joint_gap <= 1e-10, "{}", r.max_joint_gap);
        assert_eq!(r.sign, 1.0);
        // the second effect is untouched
        assert!((r.confounded[1] - r.original[1]).abs() < 1e-12);
        assert!((r.confounded[0] - (r.original[0] - 2.0 * r.gap)).abs() < 1e-12);
    }

    #[test]
    fn two_valued_treatment_leaves_third_branch_empty() {
        let scm = Scm::new(toy_spec()).unwrap();
        let (_, price) = toy_ordered_pair();
        // Price has two values, so C0 = 2 never occurs
        let taste = Intervention::new("Taste", "ok", "good");
        let out =
            build_confounded_dgp(&scm, &toy_model(), &price, &taste, DEFAULT_SUPPORT_CAP).unwrap();
        let marg = out.scm.concept_marginals(DEFAULT_SUPPORT_CAP).unwrap();
        let hidden = out
            .scm
            .graph()
            .concept_index(&out.report.hidden_concept)
            .unwrap();
        assert_eq!(marg[hidden][2], 0.0);
        assert!(out.report.max_joint_gap <= 1e-10);
    }

    #[test]
    fn unordered_pair_is_rejected() {
        let scm = Scm::new(toy_spec()).unwrap();
        let (iv1, iv2) = toy_ordered_pair();
        assert!(matches!(
            build_confounded_dgp(&scm, &toy_model(), &iv2, &iv1, DEFAULT_SUPPORT_CAP),
            Err(ScmError::Precondition(_))
        ));
    }
}
