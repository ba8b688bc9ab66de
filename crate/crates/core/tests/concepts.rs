use causalcf::concept::{
    train_predictor, zero_shot_labels, ConceptError, ConceptPredictor, Labeler, PredictorHyper,
    PredictorSet,
};
use causalcf::data::{Dataset, Example};
use causalcf::fixtures::desk_spec;
use causalcf::rng::seeded;
use causalcf::scm::Scm;
use proptest::prelude::*;
use rand::Rng;

fn domain() -> Vec<String> {
    ["negative", "unknown", "positive"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn concepts_of(scm: &Scm) -> Vec<(String, Vec<String>)> {
    scm.graph()
        .concepts()
        .iter()
        .filter(|c| c.observed)
        .map(|c| (c.name.clone(), c.domain.clone()))
        .collect()
}

#[test]
fn predictors_recover_desk_aspects() {
    let scm = Scm::new(desk_spec()).unwrap();
    let data = Dataset::simulate(&scm, 600, 4).unwrap();
    let refs: Vec<&Example> = data.examples.iter().collect();
    let hyper = PredictorHyper {
        lr: 0.5,
        epochs: 300,
        l2: 1e-3,
        ..PredictorHyper::default()
    };
    let (set, traces) = PredictorSet::train(&refs, &concepts_of(&scm), &hyper).unwrap();
    for (name, trace) in &traces {
        assert!(
            trace.train_accuracy > 0.95,
            "{name}: {}",
            trace.train_accuracy
        );
        assert!(trace.losses.last() < trace.losses.first());
        assert!(trace.empty_classes.is_empty());
    }
    let fresh = Dataset::simulate(&scm, 200, 99).unwrap();
    let mut correct = 0;
    for ex in &fresh.examples {
        let predicted = set.predict_all(&ex.features).unwrap();
        correct += predicted
            .iter()
            .filter(|(c, &v)| ex.concept(c) == Some(domain()[v].as_str()))
            .count();
    }
    assert!(correct as f64 / (4.0 * 200.0) > 0.95);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let scm = Scm::new(desk_spec()).unwrap();
    let data = Dataset::simulate(&scm, 100, 1).unwrap();
    let refs: Vec<&Example> = data.examples.iter().collect();
    let hyper = PredictorHyper {
        lr: 0.3,
        epochs: 20,
        seed: 5,
        init_scale: 0.1,
        ..PredictorHyper::default()
    };
    let a = train_predictor(&refs, "S", &domain(), &hyper).unwrap();
    let b = train_predictor(&refs, "S", &domain(), &hyper).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unlabelled_concepts_are_rejected() {
    let scm = Scm::new(desk_spec()).unwrap();
    let mut data = Dataset::simulate(&scm, 10, 1).unwrap();
    for ex in &mut data.examples {
        ex.concepts.remove("F");
    }
    let refs: Vec<&Example> = data.examples.iter().collect();
    assert!(matches!(
        train_predictor(&refs, "F", &domain(), &PredictorHyper::default()),
        Err(ConceptError::NoLabels(_))
    ));
}

#[test]
fn oracle_labeller_fills_missing_values_with_the_truth() {
    let scm = Scm::new(desk_spec()).unwrap();
    let truth = Dataset::simulate(&scm, 30, 8).unwrap();
    let mut data = truth.clone();
    for ex in &mut data.examples {
        ex.concepts.clear();
    }
    data.examples[0].exo_seed = None;
    let report = zero_shot_labels(&mut data, &concepts_of(&scm), &Labeler::Oracle(&scm), 0);
    assert_eq!(report.filled, 29 * 4);
    assert_eq!(report.dropped.len(), 4);
    for (a, b) in data.examples.iter().zip(&truth.examples).skip(1) {
        assert_eq!(a.concepts, b.concepts);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cross_entropy_gradient_matches_central_differences(seed in 0u64..10_000, l2 in 0.0f64..0.1) {
        let mut rng = seeded(seed);
        let dim = 5;
        let mut p = ConceptPredictor::zeros("C", &domain(), dim);
        for w in p.weights.iter_mut().chain(p.bias.iter_mut()) {
            *w = rng.random_range(-1.0..1.0);
        }
        let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (_, grad) = p.loss_and_grad(&refs, &ys, l2);
        let h = 1e-6;
        let n_w = p.weights.len();
        for i in 0..grad.len() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            if i < n_w {
                plus.weights[i] += h;
                minus.weights[i] -= h;
            } else {
                plus.bias[i - n_w] += h;
                minus.bias[i - n_w] -= h;
            }
            let numeric = (plus.loss_and_grad(&refs, &ys, l2).0 - minus.loss_and_grad(&refs, &ys, l2).0) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            prop_assert!(rel < 1e-5, "coordinate {i}: {} vs {numeric}", grad[i]);
        }
    }

    #[test]
    fn distributions_are_normalized(seed in 0u64..10_000) {
        let mut rng = seeded(seed);
        let mut p = ConceptPredictor::zeros("C", &domain(), 3);
        for w in &mut p.weights {
            *w = rng.random_range(-30.0..30.0);
        }
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
        let dist = p.distribution(&x).unwrap();
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (best, _) = p.predict(&x).unwrap();
        prop_assert!(dist.iter().all(|v| *v <= dist[best]));
        prop_assert_eq!(p.propensity(&x, best).unwrap(), dist[best]);
    }
}
