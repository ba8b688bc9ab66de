//! Chat-completion client and the remote counterfactual provider.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::prompt::{render_prompt, PromptDomain, Template};
use super::{ApproxCounterfactual, CfProvider, CfRequest, Generation, Provenance, ProviderError};

/// Endpoint settings. The credential is read from `api_key_env` at call
/// time and never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: Option<f64>,
    pub max_tokens: u32,
    pub api_key_env: String,
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Connection slots for batched calls.
    #[serde(default = "default_slots")]
    pub slots: usize,
}

fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout() -> u64 {
    60
}
fn default_slots() -> usize {
    4
}

impl RemoteConfig {
    pub fn new(base_url: &str, model: &str, api_key_env: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            model: model.to_string(),
            temperature: None,
            max_tokens: 512,
            api_key_env: api_key_env.to_string(),
            attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout(),
            slots: default_slots(),
        }
    }
}

/// Requests `n` completions of `prompt`. Retries transport errors and
/// non-2xx statuses with exponential backoff.
pub fn remote_call(
    cfg: &RemoteConfig,
    prompt: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<String>, ProviderError> {
    let key = std::env::var(&cfg.api_key_env)
        .map_err(|_| ProviderError::AuthMissing(cfg.api_key_env.clone()))?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
        .build()
        .into();
    let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
    let mut body = json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "n": n,
        "seed": seed,
        "max_tokens": cfg.max_tokens,
    });
    if let Some(t) = cfg.temperature {
        body["temperature"] = json!(t);
    }
    let attempts = cfg.attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(cfg.backoff_ms << (attempt - 1)));
        }
        match agent
            .post(&url)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
        {
            Ok(mut resp) if resp.status().is_success() => {
                let value: serde_json::Value = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| ProviderError::ParseFailure(e.to_string()))?;
                return parse_choices(&value);
            }
            Ok(resp) => last = format!("status {}", resp.status()),
            Err(e) => last = e.to_string(),
        }
        log::warn!(
            "completion attempt {} of {attempts} failed: {last}",
            attempt + 1
        );
    }
    Err(ProviderError::RemoteUnavailable { attempts, last })
}

fn parse_choices(value: &serde_json::Value) -> Result<Vec<String>, ProviderError> {
    let choices = value["choices"]
        .as_array()
        .ok_or_else(|| ProviderError::ParseFailure("response has no `choices`".into()))?;
    Ok(choices
        .iter()
        .map(|c| {
            c["message"]["content"]
                .as_str()
                .unwrap_or_default()
                .to_string()
        })
        .collect())
}

/// Calls [`remote_call`] for every prompt using at most `cfg.slots`
/// concurrent connections. Results come back in prompt order.
pub fn remote_batch(
    cfg: &RemoteConfig,
    prompts: &[String],
    n: usize,
    seed: u64,
) -> Vec<Result<Vec<String>, ProviderError>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<String>, ProviderError>>>> =
        Mutex::new((0..prompts.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.slots.max(1).min(prompts.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= prompts.len() {
                    break;
                }
                let r = remote_call(cfg, &prompts[i], n, seed.wrapping_add(i as u64));
                results.lock().expect("no poisoned slot")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned slot")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    Empty,
    Refusal,
}

const REFUSAL_MARKERS: [&str; 6] = [
    "as an ai",
    "i'm sorry",
    "i am sorry",
    "i cannot",
    "i can't",
    "i apologize",
];

/// Accepts a completion as an edit, or says why it is unusable.
pub fn screen_completion(text: &str) -> Result<&str, Rejection> {
    let t = text.trim();
    if t.is_empty() {
        return Err(Rejection::Empty);
    }
    let lower = t.to_lowercase();
    if REFUSAL_MARKERS
        .iter()
        .any(|m| lower.starts_with(m) || lower.contains(m))
    {
        return Err(Rejection::Refusal);
    }
    Ok(t)
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Feature vectors for generated texts, keyed by the sha256 of the text.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    map: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    #[serde(default)]
    hash: Option<String>,
    #[serde(default)]
    text: Option<String>,
    features: Vec<f64>,
}

impl EmbeddingTable {
    pub fn insert_text(&mut self, text: &str, features: Vec<f64>) {
        self.map.insert(text_hash(text.trim()), features);
    }

    pub fn get_text(&self, text: &str) -> Option<&Vec<f64>> {
        self.map.get(&text_hash(text.trim()))
    }

    /// JSONL rows with `features` and either `hash` or `text`.
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let mut table = Self::default();
        for (i, line) in BufReader::new(std::fs::File::open(path)?)
            .lines()
            .enumerate()
        {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: EmbeddingRow = serde_json::from_str(&line).map_err(|e| {
                ProviderError::ParseFailure(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            let key = match (row.hash, row.text) {
                (Some(h), _) => h,
                (None, Some(t)) => text_hash(t.trim()),
                (None, None) => {
                    return Err(ProviderError::ParseFailure(format!(
                        "{}:{}: row needs `hash` or `text`",
                        path.display(),
                        i + 1
                    )))
                }
            };
            table.map.insert(key, row.features);
        }
        Ok(table)
    }
}

/// Completions keyed by a hash of (model, prompt, n, seed), optionally
/// persisted as JSON so reruns never hit the endpoint.
#[derive(Debug, Default)]
pub struct GenerationCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, Vec<String>>>,
}

impl GenerationCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, ProviderError> {
        let entries = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| ProviderError::ParseFailure(format!("{}: {e}", path.display())))?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
        })
    }

    pub fn key(model: &str, prompt: &str, n: usize, seed: u64) -> String {
        let mut h = Sha256::new();
        for part in [model, prompt, &n.to_string(), &seed.to_string()] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<Vec<String>> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn put(&self, key: String, completions: Vec<String>) {
        self.entries
            .lock()
            .expect("cache lock")
            .insert(key, completions);
    }

    pub fn flush(&self) -> Result<(), ProviderError> {
        if let Some(path) = &self.path {
            let entries = self.entries.lock().expect("cache lock");
            let text = serde_json::to_string_pretty(&*entries)
                .map_err(|e| ProviderError::ParseFailure(e.to_string()))?;
            std::fs::write(path, text)?;
        }
        Ok(())
    }
}

/// Generates edits through a chat-completion endpoint and maps them to
/// features through an [`EmbeddingTable`].
pub struct RemoteProvider {
    pub config: RemoteConfig,
    pub template: Template,
    pub domain: PromptDomain,
    pub embeddings: EmbeddingTable,
    pub cache: GenerationCache,
}

impl RemoteProvider {
    /// Screens raw completions into counterfactuals, counting every drop.
    pub fn collect(&self, req: &CfRequest, completions: &[String]) -> Generation {
        let mut gen = Generation::default();
        for raw in completions {
            match screen_completion(raw) {
                Err(Rejection::Empty) => gen.failures.empty += 1,
                Err(Rejection::Refusal) => gen.failures.refusal += 1,
                Ok(text) => match self.embeddings.get_text(text) {
                    None => gen.failures.missing_embedding += 1,
                    Some(features) => {
                        let i = gen.cfs.len();
                        gen.cfs.push(ApproxCounterfactual {
                            id: req.cf_id(i),
                            features: features.clone(),
                            provenance: Provenance::Remote,
                            raw_text: Some(text.to_string()),
                            prediction: None,
                        });
                    }
                },
            }
        }
        gen
    }
}

impl CfProvider for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate(&self, req: &CfRequest, seed: u64) -> Result<Generation, ProviderError> {
        let prompt = render_prompt(req, self.template, &self.domain)?;
        let key = GenerationCache::key(&self.config.model, &prompt, req.count, seed);
        let completions = match self.cache.get(&key) {
            Some(c) => c,
            None => {
                let c = remote_call(&self.config, &prompt, req.count, seed)?;
                self.cache.put(key, c.clone());
                c
            }
        };
        let gen = self.collect(req, &completions);
        if gen.cfs.is_empty() {
            return Err(ProviderError::NoSurvivors(gen.failures));
        }
        Ok(gen)
    }
}
