use std::collections::BTreeMap;

use causalcf::concept::{ConceptPredictor, PredictorSet};
use causalcf::matching::{
    match_approx, match_propensity, match_random, read_index, top_k, top_k_par, top_k_scan,
    write_index, Candidate, CandidateSet, MatchError,
};
use proptest::prelude::*;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Full sort by score, then id.
fn brute_force(query: &[f64], items: &[(String, Vec<f64>)], k: usize) -> Vec<String> {
    let mut all: Vec<(f64, &str)> = items
        .iter()
        .map(|(id, e)| (cosine(query, e), id.as_str()))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    all.into_iter()
        .take(k)
        .map(|(_, id)| id.to_string())
        .collect()
}

fn candidate(id: &str, features: Vec<f64>, concepts: &[(&str, &str)]) -> Candidate {
    Candidate {
        id: id.into(),
        features,
        embedding: None,
        concepts: concepts
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
    }
}

fn set_of(items: Vec<Candidate>, target: &str) -> CandidateSet {
    CandidateSet {
        treatment: "T".into(),
        target: target.into(),
        items,
    }
}

fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, dim)
        .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn scan_agrees_with_brute_force(
        query in nonzero_vec(4),
        raw in prop::collection::vec(nonzero_vec(4), 1..40),
        k in 1usize..50,
    ) {
        let items: Vec<(String, Vec<f64>)> = raw.into_iter().enumerate().map(|(i, e)| (format!("i{i:03}"), e)).collect();
        let view: Vec<(&str, &[f64])> = items.iter().map(|(id, e)| (id.as_str(), e.as_slice())).collect();
        let got = top_k_scan("q", &query, &view, k).unwrap();
        let ids: Vec<String> = got.ids().map(str::to_string).collect();
        prop_assert_eq!(&ids, &brute_force(&query, &items, k));
        prop_assert_eq!(got.shortfall, items.len() < k);
        prop_assert!(got.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert_eq!(top_k_par("q", &query, &view, k).unwrap(), got);
    }

    #[test]
    fn ranking_ignores_query_scale_and_item_order(
        query in nonzero_vec(3),
        raw in prop::collection::vec(nonzero_vec(3), 2..30),
        scale in 0.01f64..100.0,
        rotate in 0usize..30,
    ) {
        let items: Vec<(String, Vec<f64>)> = raw.into_iter().enumerate().map(|(i, e)| (format!("i{i:03}"), e)).collect();
        let k = items.len().min(5);
        let view: Vec<(&str, &[f64])> = items.iter().map(|(id, e)| (id.as_str(), e.as_slice())).collect();
        let base = top_k_scan("q", &query, &view, k).unwrap();
        let mut rotated = view.clone();
        rotated.rotate_left(rotate % view.len());
        prop_assert_eq!(&top_k_scan("q", &query, &rotated, k).unwrap(), &base);
        let scaled: Vec<f64> = query.iter().map(|v| v * scale).collect();
        let again = top_k_scan("q", &scaled, &view, k).unwrap();
        for ((_, sa), (_, sb)) in base.ranked.iter().zip(&again.ranked) {
            prop_assert!((sa - sb).abs() < 1e-12);
        }
        // scores may move in the last bit, so only near-ties may reorder
        let near_tie = base.ranked.windows(2).any(|w| w[0].1 - w[1].1 < 1e-12);
        if !near_tie {
            prop_assert_eq!(base.ranked.iter().map(|r| &r.0).collect::<Vec<_>>(), again.ranked.iter().map(|r| &r.0).collect::<Vec<_>>());
        }
    }
}

#[test]
fn degenerate_queries_are_errors() {
    let items = [("a", &[1.0, 0.0][..]), ("z", &[0.0, 0.0][..])];
    assert!(matches!(
        top_k_scan("q", &[1.0, 0.0], &items, 0),
        Err(MatchError::ZeroK)
    ));
    assert!(matches!(
        top_k_scan("q", &[1.0, 0.0], &[], 1),
        Err(MatchError::EmptyCandidates)
    ));
    assert!(matches!(
        top_k_scan("q", &[0.0, 0.0], &items[..1], 1),
        Err(MatchError::ZeroNormEmbedding(_))
    ));
    assert!(
        matches!(top_k_scan("q", &[1.0, 0.0], &items, 1), Err(MatchError::ZeroNormEmbedding(z)) if z == "z")
    );
    let set = set_of(vec![candidate("a", vec![1.0], &[])], "x");
    assert!(matches!(
        top_k("q", &[1.0], &set, 1),
        Err(MatchError::MissingEmbedding(_))
    ));
}

#[test]
fn random_first_pick_is_uniform() {
    let n = 5;
    let set = set_of(
        (0..n)
            .map(|i| candidate(&format!("c{i}"), vec![1.0], &[]))
            .collect(),
        "x",
    );
    let draws = 5000;
    let mut counts = BTreeMap::new();
    for seed in 0..draws {
        let r = match_random("q", &set, seed).unwrap();
        assert_eq!(r.ranked.len(), n);
        *counts.entry(r.ranked[0].0.clone()).or_insert(0usize) += 1;
    }
    let expected = draws as f64 / n as f64;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9% quantile of chi-square with 4 degrees of freedom
    assert!(chi2 < 18.467, "chi2 {chi2}, counts {counts:?}");
    assert_eq!(counts.len(), n);
}

#[test]
fn random_order_does_not_depend_on_pool_order() {
    let items: Vec<Candidate> = (0..8)
        .map(|i| candidate(&format!("c{i}"), vec![1.0], &[]))
        .collect();
    let mut reversed = items.clone();
    reversed.reverse();
    assert_eq!(
        match_random("q", &set_of(items, "x"), 3).unwrap(),
        match_random("q", &set_of(reversed, "x"), 3).unwrap()
    );
}

fn yes_no_predictor() -> ConceptPredictor {
    let domain = vec!["no".to_string(), "yes".to_string()];
    let mut p = ConceptPredictor::zeros("T", &domain, 1);
    // P(yes | x) = sigmoid(x)
    p.weights = vec![0.0, 1.0];
    p
}

#[test]
fn propensity_ranks_by_score_distance() {
    let set = set_of(
        vec![
            candidate("far", vec![2.0], &[]),
            candidate("near", vec![-0.05], &[]),
            candidate("mid", vec![0.1], &[]),
            candidate("away", vec![-0.3], &[]),
        ],
        "yes",
    );
    let r = match_propensity("q", &[0.0], &set, &yes_no_predictor()).unwrap();
    let ids: Vec<&str> = r.ids().collect();
    assert_eq!(ids, ["near", "mid", "away", "far"]);
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    assert!((r.ranked[3].1 + (sigmoid(2.0) - 0.5)).abs() < 1e-12);
}

#[test]
fn approx_keeps_only_predicted_agreement() {
    let domain = vec!["no".to_string(), "yes".to_string()];
    let mut c = ConceptPredictor::zeros("C", &domain, 2);
    // reads the second coordinate
    c.weights = vec![0.0, -5.0, 0.0, 5.0];
    let predictors = PredictorSet {
        predictors: BTreeMap::from([("C".to_string(), c)]),
    };
    let set = set_of(
        vec![
            candidate("a", vec![0.0, 1.0], &[]),
            candidate("b", vec![0.0, -1.0], &[]),
            candidate("c", vec![3.0, 2.0], &[]),
        ],
        "yes",
    );
    let adjusted = ["C".to_string()];
    let r = match_approx("q", &[9.0, 1.0], &set, &predictors, &adjusted, 0).unwrap();
    let mut ids: Vec<&str> = r.ids().collect();
    ids.sort();
    assert_eq!(ids, ["a", "c"]);
    let lonely = set_of(vec![candidate("b", vec![0.0, -1.0], &[])], "yes");
    assert!(matches!(
        match_approx("q", &[0.0, 1.0], &lonely, &predictors, &adjusted, 0),
        Err(MatchError::NoValidMatch(_))
    ));
}

#[test]
fn index_round_trips_and_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("idx.bin");
    let items = vec![
        ("alpha".to_string(), vec![0.5, -1.25, 3.0]),
        ("β".to_string(), vec![f64::MIN_POSITIVE, 0.0, -0.0]),
    ];
    write_index(&path, &items).unwrap();
    let back = read_index(&path).unwrap();
    assert_eq!(back.len(), 2);
    for ((a, x), (b, y)) in items.iter().zip(&back) {
        assert_eq!(a, b);
        assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_index(&path), Err(MatchError::BadIndex(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, bad).unwrap();
    assert!(matches!(read_index(&path), Err(MatchError::BadIndex(_))));
    let ragged = vec![
        ("a".to_string(), vec![1.0]),
        ("b".to_string(), vec![1.0, 2.0]),
    ];
    assert!(matches!(
        write_index(&path, &ragged),
        Err(MatchError::BadIndex(_))
    ));
}
