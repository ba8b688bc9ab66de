//! Feed-forward encoder onto the unit sphere and its contrastive training.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;
use crate::provider::ApproxCounterfactual;
use crate::quads::QuadSets;
use crate::rng::{seeded, stage_seed};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder expects {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite embedding")]
    NonFinite,
    #[error("contrastive loss needs at least one positive and one negative")]
    EmptySet,
    #[error("every objective component was masked or empty")]
    AllComponentsSkipped,
    #[error("loss diverged in epoch {0}")]
    Diverged(usize),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                self.b[r]
                    + self.w[r * self.cols..(r + 1) * self.cols]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Input standardization, then `tanh` hidden layers, a linear output layer
/// and projection onto the unit sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub layers: Vec<Layer>,
}

struct Trace {
    /// Inputs to each layer.
    inputs: Vec<Vec<f64>>,
    out: Vec<f64>,
    norm: f64,
}

impl EncoderParams {
    /// Gaussian init with variance `1 / fan_in`, zero biases.
    pub fn init(dims: &[usize], shift: Vec<f64>, scale: Vec<f64>, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let layers = dims
            .windows(2)
            .map(|p| {
                let (cols, rows) = (p[0], p[1]);
                let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("positive");
                Layer {
                    rows,
                    cols,
                    w: (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
                    b: vec![0.0; rows],
                }
            })
            .collect();
        Self {
            shift,
            scale,
            layers,
        }
    }

    /// Standardization statistics from `rows`; constant columns get scale 1.
    pub fn standardizer(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        (mean, scale)
    }

    pub fn input_dim(&self) -> usize {
        self.shift.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim(), |l| l.rows)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.rows));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(&l.w);
            out.extend(&l.b);
        }
        out
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.w.len();
            l.w.copy_from_slice(&p[at..at + n]);
            at += n;
            let m = l.b.len();
            l.b.copy_from_slice(&p[at..at + m]);
            at += m;
        }
    }

    fn forward(&self, x: &[f64]) -> Result<Trace, EncoderError> {
        if x.len() != self.input_dim() {
            return Err(EncoderError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut h: Vec<f64> = x
            .iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&h);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(EncoderError::NonFinite);
        }
        Ok(Trace {
            inputs,
            out: h,
            norm,
        })
    }

    /// Unit-norm embedding of `x`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>, EncoderError> {
        let t = self.forward(x)?;
        Ok(t.out.iter().map(|v| v / t.norm).collect())
    }

    /// Accumulates into `grad` the parameter gradient given the gradient
    /// `de` with respect to the normalized embedding.
    fn backward(&self, t: &Trace, de: &[f64], grad: &mut [f64]) {
        let e: Vec<f64> = t.out.iter().map(|v| v / t.norm).collect();
        let dot: f64 = e.iter().zip(de).map(|(a, b)| a * b).sum();
        let mut delta: Vec<f64> = de
            .iter()
            .zip(&e)
            .map(|(d, ei)| (d - ei * dot) / t.norm)
            .collect();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.w.len() + l.b.len();
        }
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let input = &t.inputs[i];
            let off = offsets[i];
            for r in 0..l.rows {
                let dr = delta[r];
                if dr == 0.0 {
                    continue;
                }
                let row = &mut grad[off + r * l.cols..off + (r + 1) * l.cols];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += dr * v;
                }
                grad[off + l.w.len() + r] += dr;
            }
            if i > 0 {
                let mut prev = vec![0.0; l.cols];
                for r in 0..l.rows {
                    let dr = delta[r];
                    for (p, w) in prev.iter_mut().zip(&l.w[r * l.cols..(r + 1) * l.cols]) {
                        *p += dr * w;
                    }
                }
                // inputs[i] = tanh(previous pre-activation)
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log(sum_pos exp(s/tau) / sum_all exp(s/tau))` from similarities, with
/// its derivatives with respect to each similarity.
pub fn contrastive_terms(
    pos: &[f64],
    neg: &[f64],
    tau: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), EncoderError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(EncoderError::EmptySet);
    }
    let zp: Vec<f64> = pos.iter().map(|s| s / tau).collect();
    let zn: Vec<f64> = neg.iter().map(|s| s / tau).collect();
    let all: Vec<f64> = zp.iter().chain(&zn).copied().collect();
    let lse_all = log_sum_exp(&all);
    let lse_pos = log_sum_exp(&zp);
    let loss = lse_all - lse_pos;
    let dpos = zp
        .iter()
        .map(|z| ((z - lse_all).exp() - (z - lse_pos).exp()) / tau)
        .collect();
    let dneg = zn.iter().map(|z| (z - lse_all).exp() / tau).collect();
    Ok((loss, dpos, dneg))
}

/// Contrastive loss of one anchor against positive and negative embeddings
/// under cosine similarity.
pub fn contrastive_loss(
    anchor: &[f64],
    pos: &[&[f64]],
    neg: &[&[f64]],
    tau: f64,
) -> Result<f64, EncoderError> {
    let sp: Vec<f64> = pos.iter().map(|p| cosine(anchor, p)).collect();
    let sn: Vec<f64> = neg.iter().map(|n| cosine(anchor, n)).collect();
    Ok(contrastive_terms(&sp, &sn, tau)?.0)
}

/// The four item roles around an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Cf,
    Match,
    Miscf,
    Mismatch,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Cf, Role::Match, Role::Miscf, Role::Mismatch];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Cf => "cf",
            Role::Match => "match",
            Role::Miscf => "miscf",
            Role::Mismatch => "mismatch",
        }
    }
}

/// The six (preferred, dispreferred) pairs of the objective, in mask order.
pub const COMPONENTS: [(Role, Role); 6] = [
    (Role::Cf, Role::Mismatch),
    (Role::Cf, Role::Miscf),
    (Role::Cf, Role::Match),
    (Role::Match, Role::Mismatch),
    (Role::Match, Role::Miscf),
    (Role::Miscf, Role::Mismatch),
];

/// One sampled item per role (absent when the set is empty).
#[derive(Clone, Debug, PartialEq)]
pub struct QuadSample {
    pub anchor: Vec<f64>,
    pub items: [Option<Vec<f64>>; 4],
}

/// Sum of the enabled contrastive components for one sample, and the
/// gradient with respect to the flattened parameters.
pub fn full_objective(
    params: &EncoderParams,
    sample: &QuadSample,
    tau: f64,
    mask: &[bool; 6],
) -> Result<(f64, Vec<f64>), EncoderError> {
    let active: Vec<(Role, Role)> = COMPONENTS
        .iter()
        .zip(mask)
        .filter(|((p, n), on)| {
            **on && sample.items[p.slot()].is_some() && sample.items[n.slot()].is_some()
        })
        .map(|(c, _)| *c)
        .collect();
    if active.is_empty() {
        return Err(EncoderError::AllComponentsSkipped);
    }
    let anchor = params.forward(&sample.anchor)?;
    let ea: Vec<f64> = anchor.out.iter().map(|v| v / anchor.norm).collect();
    let mut traces: [Option<(Trace, Vec<f64>)>; 4] = [None, None, None, None];
    for role in Role::ALL {
        if let Some(x) = &sample.items[role.slot()] {
            let t = params.forward(x)?;
            let e: Vec<f64> = t.out.iter().map(|v| v / t.norm).collect();
            traces[role.slot()] = Some((t, e));
        }
    }
    let sim = |r: Role| -> f64 {
        let e = &traces[r.slot()]
            .as_ref()
            .expect("active roles are present")
            .1;
        ea.iter().zip(e).map(|(a, b)| a * b).sum()
    };
    let mut total = 0.0;
    let mut dsim = [0.0; 4];
    for (p, n) in active {
        let (loss, dp, dn) = contrastive_terms(&[sim(p)], &[sim(n)], tau)?;
        total += loss;
        dsim[p.slot()] += dp[0];
        dsim[n.slot()] += dn[0];
    }
    let mut grad = vec![0.0; params.param_count()];
    let mut de_anchor = vec![0.0; ea.len()];
    for role in Role::ALL {
        if let Some((t, e)) = &traces[role.slot()] {
            let g = dsim[role.slot()];
            if g == 0.0 {
                continue;
            }
            for (d, v) in de_anchor.iter_mut().zip(e) {
                *d += g * v;
            }
            let de: Vec<f64> = ea.iter().map(|a| g * a).collect();
            params.backward(t, &de, &mut grad);
        }
    }
    params.backward(&anchor, &de_anchor, &mut grad);
    Ok((total, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Pipeline runs replace this with the encoder stage seed.
    #[serde(default)]
    pub seed: u64,
    /// Enables each of [`COMPONENTS`].
    pub component_mask: [bool; 6],
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub batch_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.tau > 0.0) {
            return Err(EncoderError::InvalidConfig("tau must be positive".into()));
        }
        if !self.component_mask.iter().any(|b| *b) {
            return Err(EncoderError::InvalidConfig(
                "enable at least one component".into(),
            ));
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return Err(EncoderError::InvalidConfig(
                "batch size and embedding width must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn dims(&self, input: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(&self.hidden);
        d.push(self.embed_dim);
        d
    }
}

/// Feature vectors of dataset examples and generated items by id.
#[derive(Clone, Debug, Default)]
pub struct FeatureStore {
    map: HashMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_examples<'a>(&mut self, items: impl IntoIterator<Item = &'a Example>) {
        for e in items {
            self.map.insert(e.id.clone(), e.features.clone());
        }
    }

    pub fn add_generated<'a>(&mut self, items: impl IntoIterator<Item = &'a ApproxCounterfactual>) {
        for c in items {
            self.map.insert(c.id.clone(), c.features.clone());
        }
    }

    pub fn get(&self, id: &str) -> Result<&[f64], EncoderError> {
        self.map
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| EncoderError::UnknownItem(id.to_string()))
    }
}

fn sets(q: &QuadSets) -> [&[String]; 4] {
    [&q.cf_ids, &q.match_ids, &q.miscf_ids, &q.mismatch_ids]
}

/// Draws one item from each nonempty set of `q`.
pub fn sample_quad(
    q: &QuadSets,
    store: &FeatureStore,
    rng: &mut impl rand::Rng,
) -> Result<QuadSample, EncoderError> {
    let anchor = store.get(&q.anchor)?.to_vec();
    let mut items: [Option<Vec<f64>>; 4] = [None, None, None, None];
    for (slot, ids) in sets(q).iter().enumerate() {
        if let Some(id) = ids.choose(rng) {
            items[slot] = Some(store.get(id)?.to_vec());
        }
    }
    Ok(QuadSample { anchor, items })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's updates (absent for the
    /// initial parameters).
    pub train_loss: Option<f64>,
    pub dev_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dims: Vec<usize>,
    pub params: EncoderParams,
    pub config: TrainConfig,
    pub epoch: usize,
    pub dev_loss: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), EncoderError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EncoderError::Io(e.into()))?;
    w.write_record(["epoch", "train_loss", "dev_loss"])
        .map_err(|e| EncoderError::Io(e.into()))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.map(|v| format!("{v:.12}")).unwrap_or_default(),
            format!("{:.12}", r.dev_loss),
        ])
        .map_err(|e| EncoderError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean objective over `quads` with one fixed, seeded sample per quad.
pub fn mean_objective(
    params: &EncoderParams,
    quads: &[QuadSets],
    store: &FeatureStore,
    config: &TrainConfig,
    seed: u64,
) -> Result<f64, EncoderError> {
    let mut rng = seeded(seed);
    let mut total = 0.0;
    let mut n = 0usize;
    for q in quads {
        let s = sample_quad(q, store, &mut rng)?;
        match full_objective(params, &s, config.tau, &config.component_mask) {
            Ok((l, _)) => {
                total += l;
                n += 1;
            }
            Err(EncoderError::AllComponentsSkipped) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Mini-batch gradient descent; returns the parameters with the lowest dev
/// objective seen (the initial parameters included) and the history.
pub fn train(
    initial: EncoderParams,
    train_quads: &[QuadSets],
    dev_quads: &[QuadSets],
    store: &FeatureStore,
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochRecord>), EncoderError> {
    config.validate()?;
    let dev_seed = stage_seed(config.seed, "dev-sample");
    let mut params = initial;
    let mut flat = params.flat();
    let mut best = Checkpoint {
        dims: params.dims(),
        dev_loss: mean_objective(&params, dev_quads, store, config, dev_seed)?,
        params: params.clone(),
        config: config.clone(),
        epoch: 0,
    };
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        dev_loss: best.dev_loss,
    }];
    let mut rng = seeded(stage_seed(config.seed, "train-order"));
    let mut order: Vec<usize> = (0..train_quads.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grad = vec![0.0; flat.len()];
            let mut used = 0usize;
            for &i in batch {
                let s = sample_quad(&train_quads[i], store, &mut rng)?;
                match full_objective(&params, &s, config.tau, &config.component_mask) {
                    Ok((l, g)) => {
                        if !l.is_finite() {
                            return Err(EncoderError::Diverged(epoch));
                        }
                        epoch_loss += l;
                        for (a, b) in grad.iter_mut().zip(&g) {
                            *a += b;
                        }
                        used += 1;
                    }
                    Err(EncoderError::AllComponentsSkipped) => {}
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                continue;
            }
            counted += used;
            let step = config.lr / used as f64;
            for (p, g) in flat.iter_mut().zip(&grad) {
                *p -= step * g;
            }
            params.set_flat(&flat);
        }
        let dev_loss = mean_objective(&params, dev_quads, store, config, dev_seed)?;
        if !dev_loss.is_finite() {
            return Err(EncoderError::Diverged(epoch));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: Some(if counted == 0 {
                0.0
            } else {
                epoch_loss / counted as f64
            }),
            dev_loss,
        });
        if dev_loss < best.dev_loss {
            best = Checkpoint {
                dims: params.dims(),
                params: params.clone(),
                config: config.clone(),
                epoch,
                dev_loss,
            };
        }
    }
    Ok((best, history))
}

/// Mean cosine similarity between anchors and each set, averaged first
/// within a set and then over the anchors where the set is nonempty.
pub fn mean_set_similarities(
    params: &EncoderParams,
    quads: &[QuadSets],
    store: &FeatureStore,
) -> Result<[f64; 4], EncoderError> {
    mean_set_similarities_with(quads, store, |_| Ok(params))
}

/// As [`mean_set_similarities`], with the encoder chosen per quad.
pub fn mean_set_similarities_with<'p>(
    quads: &[QuadSets],
    store: &FeatureStore,
    params_for: impl Fn(&QuadSets) -> Result<&'p EncoderParams, EncoderError>,
) -> Result<[f64; 4], EncoderError> {
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    for q in quads {
        let params = params_for(q)?;
        let a = params.embed(store.get(&q.anchor)?)?;
        for (slot, ids) in sets(q).iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let mut s = 0.0;
            for id in ids.iter() {
                let e = params.embed(store.get(id)?)?;
                s += a.iter().zip(&e).map(|(x, y)| x * y).sum::<f64>();
            }
            sums[slot] += s / ids.len() as f64;
            counts[slot] += 1;
        }
    }
    let mut out = [f64::NAN; 4];
    for i in 0..4 {
        if counts[i] > 0 {
            out[i] = sums[i] / counts[i] as f64;
        }
    }
    Ok(out)
}
