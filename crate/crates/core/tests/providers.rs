use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use causalcf::data::{Example, Split};
use causalcf::fixtures::{desk_interventions, desk_model, desk_spec};
use causalcf::graph::{health_graph, review_graph, EffectKind, Intervention, LabelOrientation};
use causalcf::model::ExplainedModel;
use causalcf::provider::remote::{remote_batch, EmbeddingTable, GenerationCache};
use causalcf::provider::{
    remote_call, render_prompt, CfProvider, CfRequest, Demonstration, NoisyOracle, Oracle,
    PredictionOracle, PromptDomain, ProviderError, RemoteConfig, RemoteProvider, Template,
};
use causalcf::scm::Scm;
use proptest::prelude::*;

fn text_example(id: &str, text: &str) -> Example {
    Example {
        id: id.into(),
        features: vec![0.0; 4],
        concepts: BTreeMap::new(),
        label: None,
        split: Split::Test,
        exo_seed: None,
        text: Some(text.into()),
    }
}

#[test]
fn review_prompt_names_the_edited_aspect() {
    let g = review_graph(LabelOrientation::LabelToText);
    let base = text_example("r1", "Great pasta, slow waiters.");
    let req = CfRequest::new(
        &g,
        &base,
        &Intervention::new("F", "positive", "negative"),
        EffectKind::Total,
        1,
    )
    .unwrap();
    let prompt = render_prompt(&req, Template::ZeroShot, &PromptDomain::review()).unwrap();
    assert!(prompt.contains("make sure you change ONLY the rating of FOOD"));
    assert!(prompt.contains("The reviewer gave a POSITIVE score to the FOOD aspect."));
    assert!(prompt.contains("there is a NEGATIVE score to the FOOD aspect."));
    assert!(prompt.contains("We consider four aspects FOOD, AMBIANCE, SERVICE, NOISE"));
    assert!(prompt.contains("Great pasta, slow waiters."));
    assert!(prompt.ends_with("---- Edited Review ----"));
    // pure function of its inputs
    assert_eq!(
        prompt,
        render_prompt(&req, Template::ZeroShot, &PromptDomain::review()).unwrap()
    );
}

#[test]
fn unknown_value_uses_lower_case_phrase() {
    let g = review_graph(LabelOrientation::LabelToText);
    let base = text_example("r1", "Loud room.");
    let req = CfRequest::new(
        &g,
        &base,
        &Intervention::new("N", "negative", "unknown"),
        EffectKind::Total,
        1,
    )
    .unwrap();
    let prompt = render_prompt(&req, Template::ZeroShot, &PromptDomain::review()).unwrap();
    assert!(prompt.contains("there is NO INFORMATION about the noise aspect."));
}

#[test]
fn health_prompt_holds_confounder_and_mediator_for_direct_effect() {
    let g = health_graph();
    let base = text_example("h1", "Patient reports a dry cough.");
    let req = CfRequest::new(
        &g,
        &base,
        &Intervention::new("Cough", "severe", "absent"),
        EffectKind::Direct,
        1,
    )
    .unwrap();
    let prompt = render_prompt(&req, Template::ZeroShot, &PromptDomain::health()).unwrap();
    assert!(prompt.contains("making the patient's cough weaker."));
    assert!(prompt.contains("Keep the symptom of lack of taste and sore throat fixed."));
    assert!(!prompt.contains("could impact"));

    let total = CfRequest::new(
        &g,
        &base,
        &Intervention::new("Cough", "absent", "mild"),
        EffectKind::Total,
        1,
    )
    .unwrap();
    let prompt = render_prompt(&total, Template::ZeroShot, &PromptDomain::health()).unwrap();
    assert!(prompt.contains("cough stronger."));
    assert!(prompt.contains("Keep the symptom of lack of taste fixed."));
    assert!(prompt.contains("Notice that a cough could impact the sore throat."));
}

#[test]
fn benchmark_templates_need_their_fields() {
    let g = review_graph(LabelOrientation::LabelToText);
    let base = text_example("t1", "so tired of this debate");
    let mut req = CfRequest::new(
        &g,
        &base,
        &Intervention::new("S", "negative", "positive"),
        EffectKind::Total,
        1,
    )
    .unwrap();
    assert!(matches!(
        render_prompt(&req, Template::BenchmarkCf, &PromptDomain::review()),
        Err(ProviderError::MissingField(_))
    ));
    req.fields.insert("DOMAIN".into(), "climate change".into());
    req.fields.insert("DESCRIPTION".into(), "a teacher".into());
    req.fields
        .insert("EDIT_DESCRIPTION".into(), "the writer were younger".into());
    let cf = render_prompt(&req, Template::BenchmarkCf, &PromptDomain::review()).unwrap();
    assert!(cf.contains("Respond only with the revised text."));
    assert!(cf.ends_with("so tired of this debate"));
    let edit = render_prompt(&req, Template::BenchmarkEdit, &PromptDomain::review()).unwrap();
    assert!(edit.contains(r#"{"new_tweet": X, "label": Y}"#));
}

#[test]
fn few_shot_prompt_numbers_demonstrations() {
    let g = review_graph(LabelOrientation::LabelToText);
    let base = text_example("r1", "Nice decor.");
    let mut req = CfRequest::new(
        &g,
        &base,
        &Intervention::new("A", "positive", "negative"),
        EffectKind::Total,
        1,
    )
    .unwrap();
    assert!(render_prompt(&req, Template::FewShot, &PromptDomain::review()).is_err());
    req.demonstrations = vec![
        Demonstration {
            text: "Tasty.".into(),
            counterfactual: "Bland.".into(),
            intervention: Intervention::new("F", "positive", "negative"),
        },
        Demonstration {
            text: "Rude staff.".into(),
            counterfactual: "Kind staff.".into(),
            intervention: Intervention::new("S", "negative", "positive"),
        },
    ];
    let prompt = render_prompt(&req, Template::FewShot, &PromptDomain::review()).unwrap();
    let first = prompt.find("---- Example 1 ----").unwrap();
    let second = prompt.find("---- Example 2 ----").unwrap();
    let input = prompt.find("---- Input Review ----").unwrap();
    assert!(first < second && second < input);
    assert!(prompt.contains("ONLY the rating of SERVICE"));
    assert!(prompt.ends_with("ONLY the rating of AMBIANCE."));
}

#[test]
fn requests_reject_held_treatment_and_zero_count() {
    let g = review_graph(LabelOrientation::LabelToText);
    let base = text_example("r1", "x");
    assert!(CfRequest::new(
        &g,
        &base,
        &Intervention::new("F", "positive", "negative"),
        EffectKind::Total,
        0
    )
    .is_err());
    let mut req = CfRequest::new(
        &g,
        &base,
        &Intervention::new("F", "positive", "negative"),
        EffectKind::Total,
        1,
    )
    .unwrap();
    req.hold_fixed.insert("F".into());
    assert!(req.validate(&g).is_err());
}

fn desk_examples(scm: &Scm, n: usize, seed: u64) -> Vec<Example> {
    scm.sample_units(n, seed)
        .unwrap()
        .iter()
        .map(|u| Example::from_unit(u, scm.graph(), Split::Test))
        .collect()
}

#[test]
fn oracle_returns_the_gold_counterfactual() {
    let scm = Scm::new(desk_spec()).unwrap();
    let iv = Intervention::new("F", "negative", "positive");
    for ex in desk_examples(&scm, 20, 3) {
        let req = CfRequest::new(scm.graph(), &ex, &iv, EffectKind::Total, 2).unwrap();
        let gen = Oracle::new(&scm).generate(&req, 0).unwrap();
        let unit = scm.unit_from_seed(&ex.id, ex.exo_seed.unwrap());
        let gold = scm.gold_counterfactual(&unit, &iv).unwrap();
        assert_eq!(gen.cfs.len(), 2);
        assert!(gen.cfs.iter().all(|c| c.features == gold.features));
    }
    let mut orphan = desk_examples(&scm, 1, 3).remove(0);
    orphan.exo_seed = None;
    let req = CfRequest::new(scm.graph(), &orphan, &iv, EffectKind::Total, 1).unwrap();
    assert!(matches!(
        Oracle::new(&scm).generate(&req, 0),
        Err(ProviderError::MissingExoSeed(_))
    ));
}

#[test]
fn prediction_oracle_is_centred_on_the_gold_prediction() {
    let scm = Scm::new(desk_spec()).unwrap();
    let model = desk_model();
    let iv = Intervention::new("S", "positive", "negative");
    let ex = desk_examples(&scm, 1, 9).remove(0);
    let req = CfRequest::new(scm.graph(), &ex, &iv, EffectKind::Total, 4000).unwrap();
    let gen = PredictionOracle::new(&scm, &model, 0.05)
        .generate(&req, 1)
        .unwrap();
    let unit = scm.unit_from_seed(&ex.id, ex.exo_seed.unwrap());
    let gold = model
        .predict(&scm.gold_counterfactual(&unit, &iv).unwrap().features)
        .unwrap();
    let mut mean = vec![0.0; gold.len()];
    for cf in &gen.cfs {
        let p = cf.predict(&model).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v >= 0.0));
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v / gen.cfs.len() as f64;
        }
    }
    for (m, g) in mean.iter().zip(&gold) {
        // 4000 draws of a perturbation with sd below 0.05
        assert!((m - g).abs() < 4.0 * 0.05 / (4000f64).sqrt(), "{m} vs {g}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn noisy_oracle_never_moves_held_or_hidden_coordinates(seed in 0u64..10_000, which in 0usize..24, sigma in 0.01f64..2.0) {
        let scm = Scm::new(desk_spec()).unwrap();
        let iv = &desk_interventions()[which];
        let ex = desk_examples(&scm, 1, seed).remove(0);
        let req = CfRequest::new(scm.graph(), &ex, iv, EffectKind::Total, 3).unwrap();
        let gen = NoisyOracle::uniform(&scm, sigma).generate(&req, seed).unwrap();
        let unit = scm.unit_from_seed(&ex.id, ex.exo_seed.unwrap());
        let gold = scm.gold_counterfactual(&unit, iv).unwrap().features;
        let held: Vec<usize> = req.hold_fixed.iter().map(|c| scm.graph().concept_index(c).unwrap()).collect();
        let mut frozen = scm.coords_touched_by(&held);
        for &h in scm.hidden_coords() {
            frozen[h] = true;
        }
        prop_assert!(frozen.iter().any(|f| *f));
        for cf in &gen.cfs {
            for j in 0..gold.len() {
                if frozen[j] {
                    prop_assert_eq!(cf.features[j], gold[j]);
                }
            }
            prop_assert!(cf.features.iter().zip(&gold).any(|(a, b)| a != b));
        }
        // same seed, same draws
        prop_assert_eq!(gen, NoisyOracle::uniform(&scm, sigma).generate(&req, seed).unwrap());
    }
}

/// Minimal HTTP/1.1 server answering each request with the next scripted
/// (status, body) pair; the last entry repeats. Records request bodies.
struct MockServer {
    url: String,
    bodies: Arc<Mutex<Vec<(String, serde_json::Value)>>>,
}

fn mock_server(script: Vec<(u16, String)>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&bodies);
    std::thread::spawn(move || {
        let mut served = 0usize;
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
                if lower.starts_with("authorization:") {
                    auth = line["authorization:".len()..].trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; length];
            reader.read_exact(&mut body).unwrap();
            let value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
            let (status, reply) = script[served.min(script.len() - 1)].clone();
            let reply = reply.replace(
                "{PROMPT}",
                value["messages"][0]["content"].as_str().unwrap_or(""),
            );
            seen.lock().unwrap().push((auth, value));
            served += 1;
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                reply.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    MockServer { url, bodies }
}

fn choices(texts: &[&str]) -> String {
    let items: Vec<serde_json::Value> = texts
        .iter()
        .map(|t| serde_json::json!({"message": {"role": "assistant", "content": t}}))
        .collect();
    serde_json::json!({ "choices": items }).to_string()
}

fn config(url: &str, key_env: &str) -> RemoteConfig {
    let mut cfg = RemoteConfig::new(url, "mock-model", key_env);
    cfg.backoff_ms = 1;
    cfg.timeout_secs = 5;
    cfg
}

#[test]
fn remote_call_sends_prompt_and_reads_choices() {
    std::env::set_var("CAUSALCF_TEST_KEY_ECHO", "secret-1");
    let server = mock_server(vec![(200, choices(&["{PROMPT}", "second"]))]);
    let out = remote_call(
        &config(&server.url, "CAUSALCF_TEST_KEY_ECHO"),
        "hello there",
        2,
        17,
    )
    .unwrap();
    assert_eq!(out, vec!["hello there".to_string(), "second".to_string()]);
    let bodies = server.bodies.lock().unwrap();
    let (auth, body) = &bodies[0];
    assert_eq!(auth, "Bearer secret-1");
    assert_eq!(body["model"], "mock-model");
    assert_eq!(body["n"], 2);
    assert_eq!(body["seed"], 17);
    assert!(body.get("temperature").is_none());
}

#[test]
fn server_errors_are_retried_then_reported() {
    std::env::set_var("CAUSALCF_TEST_KEY_500", "k");
    let server = mock_server(vec![(500, "{}".into())]);
    let err = remote_call(&config(&server.url, "CAUSALCF_TEST_KEY_500"), "p", 1, 0).unwrap_err();
    assert!(
        matches!(err, ProviderError::RemoteUnavailable { attempts: 3, .. }),
        "{err}"
    );
    assert_eq!(server.bodies.lock().unwrap().len(), 3);
}

#[test]
fn transient_failure_recovers_on_retry() {
    std::env::set_var("CAUSALCF_TEST_KEY_FLAKY", "k");
    let server = mock_server(vec![(503, "{}".into()), (200, choices(&["ok"]))]);
    let out = remote_call(&config(&server.url, "CAUSALCF_TEST_KEY_FLAKY"), "p", 1, 0).unwrap();
    assert_eq!(out, vec!["ok".to_string()]);
    assert_eq!(server.bodies.lock().unwrap().len(), 2);
}

#[test]
fn missing_credential_fails_before_any_request() {
    let server = mock_server(vec![(200, choices(&["x"]))]);
    let err = remote_call(
        &config(&server.url, "CAUSALCF_TEST_KEY_NEVER_SET"),
        "p",
        1,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, ProviderError::AuthMissing(v) if v == "CAUSALCF_TEST_KEY_NEVER_SET"));
    assert!(server.bodies.lock().unwrap().is_empty());
}

#[test]
fn malformed_response_is_a_parse_failure() {
    std::env::set_var("CAUSALCF_TEST_KEY_BAD", "k");
    let server = mock_server(vec![(200, r#"{"nope": 1}"#.into())]);
    let err = remote_call(&config(&server.url, "CAUSALCF_TEST_KEY_BAD"), "p", 1, 0).unwrap_err();
    assert!(matches!(err, ProviderError::ParseFailure(_)));
}

#[test]
fn batch_results_keep_prompt_order() {
    std::env::set_var("CAUSALCF_TEST_KEY_BATCH", "k");
    let server = mock_server(vec![(200, choices(&["{PROMPT}"]))]);
    let prompts: Vec<String> = (0..9).map(|i| format!("prompt {i}")).collect();
    let out = remote_batch(
        &config(&server.url, "CAUSALCF_TEST_KEY_BATCH"),
        &prompts,
        1,
        0,
    );
    for (i, r) in out.into_iter().enumerate() {
        assert_eq!(r.unwrap(), vec![format!("prompt {i}")]);
    }
}

#[test]
fn remote_provider_screens_refusals_and_caches() {
    std::env::set_var("CAUSALCF_TEST_KEY_PROVIDER", "k");
    let server = mock_server(vec![(
        200,
        choices(&[
            "The food was awful.",
            "I'm sorry, I can't help.",
            "",
            "Unseen text.",
        ]),
    )]);
    let mut embeddings = EmbeddingTable::default();
    embeddings.insert_text("The food was awful.", vec![1.0, 2.0]);
    let provider = RemoteProvider {
        config: config(&server.url, "CAUSALCF_TEST_KEY_PROVIDER"),
        template: Template::ZeroShot,
        domain: PromptDomain::review(),
        embeddings,
        cache: GenerationCache::in_memory(),
    };
    let g = review_graph(LabelOrientation::LabelToText);
    let base = text_example("r9", "The food was great.");
    let req = CfRequest::new(
        &g,
        &base,
        &Intervention::new("F", "positive", "negative"),
        EffectKind::Total,
        4,
    )
    .unwrap();
    let gen = provider.generate(&req, 5).unwrap();
    assert_eq!(gen.cfs.len(), 1);
    assert_eq!(gen.cfs[0].features, vec![1.0, 2.0]);
    assert_eq!(
        (
            gen.failures.refusal,
            gen.failures.empty,
            gen.failures.missing_embedding
        ),
        (1, 1, 1)
    );
    assert_eq!(provider.generate(&req, 5).unwrap(), gen);
    assert_eq!(server.bodies.lock().unwrap().len(), 1);

    let all_bad = provider.collect(&req, &["As an AI model I cannot".to_string()]);
    assert!(all_bad.cfs.is_empty());
}

#[test]
fn generation_cache_persists_to_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.json");
    let cache = GenerationCache::open(&path).unwrap();
    let key = GenerationCache::key("m", "p", 1, 2);
    cache.put(key.clone(), vec!["a".into()]);
    cache.flush().unwrap();
    assert_eq!(
        GenerationCache::open(&path).unwrap().get(&key),
        Some(vec!["a".to_string()])
    );
}
