//! Candidate ranking: cosine Top-K over embeddings and the baseline
//! matchers (random, propensity, adjustment-value agreement).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{ConceptError, ConceptPredictor, PredictorSet};
use crate::data::Example;
use crate::encoder::{EncoderError, EncoderParams};
use crate::rng::seeded;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("no candidates")]
    EmptyCandidates,
    #[error("zero-norm embedding for `{0}`")]
    ZeroNormEmbedding(String),
    #[error("no candidate agrees with `{0}` on every adjusted concept")]
    NoValidMatch(String),
    #[error("candidate `{0}` has no embedding")]
    MissingEmbedding(String),
    #[error("bad index file: {0}")]
    BadIndex(String),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Causal,
    Random,
    Propensity,
    Approx,
    Pt,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Causal => "causal",
            Strategy::Random => "random",
            Strategy::Propensity => "propensity",
            Strategy::Approx => "approx",
            Strategy::Pt => "pt",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "causal" => Strategy::Causal,
            "random" => Strategy::Random,
            "propensity" => Strategy::Propensity,
            "approx" => Strategy::Approx,
            "pt" => Strategy::Pt,
            other => return Err(format!("unknown strategy `{other}`")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub concepts: BTreeMap<String, String>,
}

/// Pool of items whose treatment equals `target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub treatment: String,
    pub target: String,
    pub items: Vec<Candidate>,
}

impl CandidateSet {
    /// Items of `pool` labelled `treatment = target`.
    pub fn from_pool<'a>(
        pool: impl IntoIterator<Item = &'a Example>,
        treatment: &str,
        target: &str,
    ) -> Self {
        let items = pool
            .into_iter()
            .filter(|e| e.concept(treatment) == Some(target))
            .map(|e| Candidate {
                id: e.id.clone(),
                features: e.features.clone(),
                embedding: None,
                concepts: e.concepts.clone(),
            })
            .collect();
        Self {
            treatment: treatment.to_string(),
            target: target.to_string(),
            items,
        }
    }

    pub fn embed_with(&mut self, params: &EncoderParams) -> Result<(), EncoderError> {
        let embs: Vec<Vec<f64>> = self
            .items
            .par_iter()
            .map(|c| params.embed(&c.features))
            .collect::<Result<_, _>>()?;
        for (c, e) in self.items.iter_mut().zip(embs) {
            c.embedding = Some(e);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn embeddings(&self) -> Result<Vec<(&str, &[f64])>, MatchError> {
        self.items
            .iter()
            .map(|c| {
                c.embedding
                    .as_deref()
                    .map(|e| (c.id.as_str(), e))
                    .ok_or_else(|| MatchError::MissingEmbedding(c.id.clone()))
            })
            .collect()
    }
}

/// Ranked candidates for one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub query: String,
    pub strategy: Strategy,
    /// `(id, score)` with non-increasing scores.
    pub ranked: Vec<(String, f64)>,
    /// Fewer candidates than requested.
    pub shortfall: bool,
}

impl MatchResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(id, _)| id.as_str())
    }
}

fn by_score_then_id(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn score_all(
    query: &[f64],
    items: &[(&str, &[f64])],
    parallel: bool,
) -> Result<Vec<(String, f64)>, MatchError> {
    let qn = norm(query);
    if qn == 0.0 {
        return Err(MatchError::ZeroNormEmbedding("query".into()));
    }
    let score = |(id, e): &(&str, &[f64])| -> Result<(String, f64), MatchError> {
        let n = norm(e);
        if n == 0.0 {
            return Err(MatchError::ZeroNormEmbedding(id.to_string()));
        }
        let dot: f64 = query.iter().zip(*e).map(|(a, b)| a * b).sum();
        Ok((id.to_string(), dot / (qn * n)))
    };
    if parallel {
        items.par_iter().map(score).collect()
    } else {
        items.iter().map(score).collect()
    }
}

fn take_k(
    query: &str,
    strategy: Strategy,
    mut scored: Vec<(String, f64)>,
    k: usize,
) -> MatchResult {
    let shortfall = scored.len() < k;
    if !shortfall && k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_score_then_id);
        scored.truncate(k);
    }
    scored.sort_by(by_score_then_id);
    MatchResult {
        query: query.to_string(),
        strategy,
        ranked: scored,
        shortfall,
    }
}

/// Exact cosine Top-K by linear scan; ties go to the smaller id.
pub fn top_k_scan(
    query_id: &str,
    query: &[f64],
    items: &[(&str, &[f64])],
    k: usize,
) -> Result<MatchResult, MatchError> {
    top_k_impl(query_id, query, items, k, false)
}

/// As [`top_k_scan`] with scoring spread over the rayon pool.
pub fn top_k_par(
    query_id: &str,
    query: &[f64],
    items: &[(&str, &[f64])],
    k: usize,
) -> Result<MatchResult, MatchError> {
    top_k_impl(query_id, query, items, k, true)
}

fn top_k_impl(
    query_id: &str,
    query: &[f64],
    items: &[(&str, &[f64])],
    k: usize,
    parallel: bool,
) -> Result<MatchResult, MatchError> {
    if k == 0 {
        return Err(MatchError::ZeroK);
    }
    if items.is_empty() {
        return Err(MatchError::EmptyCandidates);
    }
    let scored = score_all(query, items, parallel)?;
    Ok(take_k(query_id, Strategy::Causal, scored, k))
}

/// Top-K over an embedded candidate set.
pub fn top_k(
    query_id: &str,
    query_emb: &[f64],
    candidates: &CandidateSet,
    k: usize,
) -> Result<MatchResult, MatchError> {
    let items = candidates.embeddings()?;
    top_k_scan(query_id, query_emb, &items, k)
}

fn random_order<'a>(ids: impl Iterator<Item = &'a str>, seed: u64) -> Vec<(String, f64)> {
    let mut ids: Vec<&str> = ids.collect();
    ids.sort_unstable();
    ids.shuffle(&mut seeded(seed));
    ids.into_iter().map(|id| (id.to_string(), 0.0)).collect()
}

/// Uniformly random order over the candidates: the first entry is a
/// uniform draw, and any prefix is a uniform sample without replacement.
pub fn match_random(
    query_id: &str,
    candidates: &CandidateSet,
    seed: u64,
) -> Result<MatchResult, MatchError> {
    if candidates.is_empty() {
        return Err(MatchError::EmptyCandidates);
    }
    Ok(MatchResult {
        query: query_id.to_string(),
        strategy: Strategy::Random,
        ranked: random_order(candidates.items.iter().map(|c| c.id.as_str()), seed),
        shortfall: false,
    })
}

/// Ranks candidates by `|P(T = target | c) - P(T = target | query)|`,
/// closest first; scores are the negated differences.
pub fn match_propensity(
    query_id: &str,
    query: &[f64],
    candidates: &CandidateSet,
    predictor: &ConceptPredictor,
) -> Result<MatchResult, MatchError> {
    if candidates.is_empty() {
        return Err(MatchError::EmptyCandidates);
    }
    let t = predictor.value_index(&candidates.target)?;
    let q = predictor.propensity(query, t)?;
    let mut scored: Vec<(String, f64)> = candidates
        .items
        .iter()
        .map(|c| {
            Ok((
                c.id.clone(),
                -(predictor.propensity(&c.features, t)? - q).abs(),
            ))
        })
        .collect::<Result<_, MatchError>>()?;
    scored.sort_by(by_score_then_id);
    Ok(MatchResult {
        query: query_id.to_string(),
        strategy: Strategy::Propensity,
        ranked: scored,
        shortfall: false,
    })
}

/// Which candidates agree with the query on every adjusted concept, by
/// predicted value.
pub fn approx_eligibility(
    query: &[f64],
    candidates: &CandidateSet,
    predictors: &PredictorSet,
    adjusted: &[String],
) -> Result<Vec<bool>, MatchError> {
    let mut want = Vec::with_capacity(adjusted.len());
    for c in adjusted {
        want.push(predictors.get(c)?.predict(query)?.0);
    }
    candidates
        .items
        .iter()
        .map(|item| {
            for (c, w) in adjusted.iter().zip(&want) {
                if predictors.get(c)?.predict(&item.features)?.0 != *w {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect()
}

/// Random order over the eligible candidates of [`approx_eligibility`].
pub fn match_approx(
    query_id: &str,
    query: &[f64],
    candidates: &CandidateSet,
    predictors: &PredictorSet,
    adjusted: &[String],
    seed: u64,
) -> Result<MatchResult, MatchError> {
    let mask = approx_eligibility(query, candidates, predictors, adjusted)?;
    let eligible = candidates
        .items
        .iter()
        .zip(&mask)
        .filter(|(_, ok)| **ok)
        .map(|(c, _)| c.id.as_str());
    let ranked = random_order(eligible, seed);
    if ranked.is_empty() {
        return Err(MatchError::NoValidMatch(query_id.to_string()));
    }
    Ok(MatchResult {
        query: query_id.to_string(),
        strategy: Strategy::Approx,
        ranked,
        shortfall: false,
    })
}

/// Latency harness for encoder matching: candidates are embedded once in
/// `prepare`; each query embeds its raw features and scans.
pub struct EncoderBench {
    pub params: EncoderParams,
    pool: Vec<(String, Vec<f64>)>,
    queries: Vec<Vec<f64>>,
}

impl EncoderBench {
    pub fn new(params: EncoderParams) -> Self {
        Self {
            params,
            pool: Vec::new(),
            queries: Vec::new(),
        }
    }
}

impl crate::eval::BenchMethod for EncoderBench {
    fn name(&self) -> &str {
        "causal"
    }

    fn prepare(&mut self, candidates: usize, seed: u64) {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seeded(seed);
        let dim = self.params.input_dim();
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| StandardNormal.sample(rng)).collect()
        };
        let raw: Vec<Vec<f64>> = (0..candidates).map(|_| draw(&mut rng)).collect();
        self.pool = raw
            .iter()
            .enumerate()
            .map(|(i, x)| {
                (
                    format!("c{i:06}"),
                    self.params.embed(x).expect("finite input"),
                )
            })
            .collect();
        self.queries = (0..64).map(|_| draw(&mut rng)).collect();
    }

    fn query(&self, q: usize, k: usize) -> usize {
        let x = &self.queries[q % self.queries.len()];
        let emb = self.params.embed(x).expect("finite input");
        let items: Vec<(&str, &[f64])> = self
            .pool
            .iter()
            .map(|(id, e)| (id.as_str(), e.as_slice()))
            .collect();
        top_k_scan("q", &emb, &items, k).map_or(0, |r| r.ranked.len())
    }
}

const INDEX_MAGIC: &[u8; 8] = b"CFXIDX01";

/// Writes ids and embeddings: magic, `n` and `dim` as little-endian u64,
/// then each id as a u32 byte length and UTF-8 bytes, then `n * dim`
/// little-endian f64 values.
pub fn write_index(path: &Path, items: &[(String, Vec<f64>)]) -> Result<(), MatchError> {
    let dim = items.first().map_or(0, |(_, e)| e.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(INDEX_MAGIC)?;
    out.write_all(&(items.len() as u64).to_le_bytes())?;
    out.write_all(&(dim as u64).to_le_bytes())?;
    for (id, e) in items {
        if e.len() != dim {
            return Err(MatchError::BadIndex(format!("ragged embedding for `{id}`")));
        }
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
    }
    for (_, e) in items {
        for v in e {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<(String, Vec<f64>)>, MatchError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], MatchError> {
        let s = bytes
            .get(at..at + n)
            .ok_or_else(|| MatchError::BadIndex("truncated".into()))?;
        at += n;
        Ok(s)
    };
    if take(8)? != INDEX_MAGIC {
        return Err(MatchError::BadIndex("wrong magic".into()));
    }
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let dim = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let id = std::str::from_utf8(take(len)?)
            .map_err(|e| MatchError::BadIndex(e.to_string()))?
            .to_string();
        ids.push(id);
    }
    let mut out = Vec::with_capacity(n);
    for id in ids {
        let mut e = Vec::with_capacity(dim);
        for _ in 0..dim {
            e.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        out.push((id, e));
    }
    Ok(out)
}
