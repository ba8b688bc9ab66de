//! Golden-versus-estimated ICaCE error, Top-K and rank sweeps, and the
//! matching latency bench.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Intervention;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("anchor `{0}` has no gold counterfactual")]
    MissingGold(String),
    #[error("no anchors to evaluate")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    Cos,
    Nd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::L2, Metric::Cos, Metric::Nd];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::L2 => "l2",
            Metric::Cos => "cos",
            Metric::Nd => "nd",
        }
    }

    pub fn distance(self, yh: &[f64], ym: &[f64]) -> Result<f64, EvalError> {
        match self {
            Metric::L2 => dist_l2(yh, ym),
            Metric::Cos => dist_cos(yh, ym),
            Metric::Nd => dist_nd(yh, ym),
        }
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist_l2(yh: &[f64], ym: &[f64]) -> Result<f64, EvalError> {
    same_len(yh, ym)?;
    Ok(yh
        .iter()
        .zip(ym)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// `1 - cos(yh, ym)`, in `[0, 2]`.
pub fn dist_cos(yh: &[f64], ym: &[f64]) -> Result<f64, EvalError> {
    same_len(yh, ym)?;
    let (nh, nm) = (norm(yh), norm(ym));
    if nh == 0.0 || nm == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    if yh == ym {
        return Ok(0.0);
    }
    let c = yh.iter().zip(ym).map(|(a, b)| a * b).sum::<f64>() / (nh * nm);
    Ok((1.0 - c).clamp(0.0, 2.0))
}

/// `| |yh| - |ym| |`.
pub fn dist_nd(yh: &[f64], ym: &[f64]) -> Result<f64, EvalError> {
    same_len(yh, ym)?;
    Ok((norm(yh) - norm(ym)).abs())
}

/// One test anchor under one intervention: the model output on the anchor,
/// on its gold counterfactual, and on the method's ranked approximations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRun {
    pub id: String,
    pub base: Vec<f64>,
    pub gold: Vec<f64>,
    pub ranked: Vec<Vec<f64>>,
}

impl AnchorRun {
    pub fn golden_icace(&self) -> Vec<f64> {
        self.gold
            .iter()
            .zip(&self.base)
            .map(|(g, b)| g - b)
            .collect()
    }

    /// Mean of the first `k` approximations minus the base output, or
    /// `None` with no approximations.
    pub fn topk_icace(&self, k: usize) -> Option<Vec<f64>> {
        let used = k.min(self.ranked.len());
        if used == 0 {
            return None;
        }
        let mut mean = vec![0.0; self.base.len()];
        for r in &self.ranked[..used] {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        Some(
            mean.iter()
                .zip(&self.base)
                .map(|(m, b)| m / used as f64 - b)
                .collect(),
        )
    }

    /// ICaCE from the `k`-th approximation alone (1-based).
    pub fn rank_icace(&self, k: usize) -> Option<Vec<f64>> {
        let r = self.ranked.get(k.checked_sub(1)?)?;
        Some(r.iter().zip(&self.base).map(|(m, b)| m - b).collect())
    }
}

/// All anchors of one intervention for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRun {
    pub intervention: Intervention,
    pub anchors: Vec<AnchorRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: String,
    pub interventions: Vec<InterventionRun>,
}

/// Mean distance of one intervention's anchors, with the count of pairs
/// where the metric was undefined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricMean {
    pub value: f64,
    pub n: usize,
    pub excluded: usize,
}

fn mean_distance(
    anchors: &[AnchorRun],
    metric: Metric,
    estimate: impl Fn(&AnchorRun) -> Option<Vec<f64>>,
) -> Result<MetricMean, EvalError> {
    let mut total = 0.0;
    let mut n = 0;
    let mut excluded = 0;
    for a in anchors {
        let Some(ym) = estimate(a) else {
            excluded += 1;
            continue;
        };
        match metric.distance(&a.golden_icace(), &ym) {
            Ok(d) => {
                total += d;
                n += 1;
            }
            Err(EvalError::ZeroVector) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(MetricMean {
        value: if n == 0 { f64::NAN } else { total / n as f64 },
        n,
        excluded,
    })
}

/// Err of one intervention under Top-K averaging.
pub fn err(run: &InterventionRun, metric: Metric, k: usize) -> Result<MetricMean, EvalError> {
    mean_distance(&run.anchors, metric, |a| a.topk_icace(k))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrRow {
    pub intervention: Intervention,
    pub n: usize,
    pub l2: f64,
    pub cos: f64,
    pub nd: f64,
    pub cos_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrReport {
    pub method: String,
    pub k: usize,
    pub rows: Vec<ErrRow>,
    /// Unweighted means over interventions of `[l2, cos, nd]`.
    pub grand: [f64; 3],
}

fn nan_mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v
        .filter(|x| x.is_finite())
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn err_report(run: &MethodRun, k: usize) -> Result<ErrReport, EvalError> {
    let mut rows = Vec::new();
    for iv in &run.interventions {
        if iv.anchors.is_empty() {
            continue;
        }
        let l2 = err(iv, Metric::L2, k)?;
        let cos = err(iv, Metric::Cos, k)?;
        let nd = err(iv, Metric::Nd, k)?;
        rows.push(ErrRow {
            intervention: iv.intervention.clone(),
            n: l2.n,
            l2: l2.value,
            cos: cos.value,
            nd: nd.value,
            cos_excluded: cos.excluded,
        });
    }
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let grand = [
        nan_mean(rows.iter().map(|r| r.l2)),
        nan_mean(rows.iter().map(|r| r.cos)),
        nan_mean(rows.iter().map(|r| r.nd)),
    ];
    Ok(ErrReport {
        method: run.method.clone(),
        k,
        rows,
        grand,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RankK,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCurve {
    pub method: String,
    pub axis: SweepAxis,
    pub metric: Metric,
    /// `(k, grand-mean Err)` with strictly increasing `k`.
    pub points: Vec<(usize, f64)>,
    /// Set when some anchors had fewer ranked approximations than `k`.
    pub truncated: bool,
}

impl SweepCurve {
    pub fn argmin(&self) -> Option<usize> {
        self.points
            .iter()
            .filter(|(_, e)| e.is_finite())
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| *k)
    }

    pub fn value_at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|(j, _)| *j == k).map(|(_, e)| *e)
    }
}

fn max_ranked(run: &MethodRun) -> usize {
    run.interventions
        .iter()
        .flat_map(|iv| iv.anchors.iter().map(|a| a.ranked.len()))
        .min()
        .unwrap_or(0)
}

/// Err when always taking exactly the `k`-th approximation, for
/// `k = 1..=k_max`; anchors with fewer than `k` are excluded at that `k`.
pub fn sweep_rank(run: &MethodRun, metric: Metric, k_max: usize) -> Result<SweepCurve, EvalError> {
    let mut points = Vec::new();
    for k in 1..=k_max {
        let mut per_iv = Vec::new();
        for iv in &run.interventions {
            let m = mean_distance(&iv.anchors, metric, |a| a.rank_icace(k))?;
            per_iv.push(m.value);
        }
        points.push((k, nan_mean(per_iv.into_iter())));
    }
    Ok(SweepCurve {
        method: run.method.clone(),
        axis: SweepAxis::RankK,
        metric,
        points,
        truncated: max_ranked(run) < k_max,
    })
}

/// Err under Top-K averaging for each `k` in `ks` (sorted, deduplicated).
pub fn sweep_topk(run: &MethodRun, metric: Metric, ks: &[usize]) -> Result<SweepCurve, EvalError> {
    let mut ks: Vec<usize> = ks.iter().copied().filter(|k| *k > 0).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut points = Vec::new();
    for &k in &ks {
        let per_iv = run
            .interventions
            .iter()
            .map(|iv| err(iv, metric, k).map(|m| m.value))
            .collect::<Result<Vec<_>, _>>()?;
        points.push((k, nan_mean(per_iv.into_iter())));
    }
    Ok(SweepCurve {
        method: run.method.clone(),
        axis: SweepAxis::TopK,
        metric,
        truncated: ks.last().is_some_and(|k| max_ranked(run) < *k),
        points,
    })
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.10}")
    } else {
        String::new()
    }
}

/// Method x {L2, Cos, ND} table, one row per (method, K).
pub fn write_err_table(path: &Path, reports: &[ErrReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "k", "l2", "cos", "nd"])?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.k.to_string(),
            fmt_value(r.grand[0]),
            fmt_value(r.grand[1]),
            fmt_value(r.grand[2]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-intervention rows of every report.
pub fn write_err_detail(path: &Path, reports: &[ErrReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "k",
        "intervention",
        "n",
        "l2",
        "cos",
        "nd",
        "cos_excluded",
    ])?;
    for r in reports {
        for row in &r.rows {
            w.write_record([
                r.method.clone(),
                r.k.to_string(),
                row.intervention.to_string(),
                row.n.to_string(),
                fmt_value(row.l2),
                fmt_value(row.cos),
                fmt_value(row.nd),
                row.cos_excluded.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweeps(path: &Path, curves: &[SweepCurve]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "axis", "metric", "k", "err"])?;
    for c in curves {
        let axis = match c.axis {
            SweepAxis::RankK => "rank_k",
            SweepAxis::TopK => "top_k",
        };
        for (k, e) in &c.points {
            w.write_record([
                c.method.as_str(),
                axis,
                c.metric.as_str(),
                &k.to_string(),
                &fmt_value(*e),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One timed configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub candidates: usize,
    pub k: usize,
    /// Median over runs of the mean seconds per query.
    pub median_secs_per_query: f64,
    pub runs: usize,
}

/// A matcher under test: given a query index and `k`, does the work of
/// ranking and returns how many items it produced.
pub trait BenchMethod: Sync {
    fn name(&self) -> &str;
    fn prepare(&mut self, candidates: usize, seed: u64);
    fn query(&self, q: usize, k: usize) -> usize;
}

/// Single-threaded wall-clock timing: one warm-up pass, then the median of
/// `runs` passes over `n_queries` queries.
pub fn bench_latency(
    methods: &mut [Box<dyn BenchMethod>],
    n_queries: usize,
    candidate_sizes: &[usize],
    k_list: &[usize],
    runs: usize,
    seed: u64,
) -> Vec<BenchRow> {
    let runs = runs.max(1);
    let mut rows = Vec::new();
    for m in methods.iter_mut() {
        for &size in candidate_sizes {
            m.prepare(size, seed);
            for &k in k_list {
                let mut sink = 0usize;
                for q in 0..n_queries {
                    sink += m.query(q, k);
                }
                let mut times = Vec::with_capacity(runs);
                for _ in 0..runs {
                    let start = Instant::now();
                    for q in 0..n_queries {
                        sink += m.query(q, k);
                    }
                    times.push(start.elapsed().as_secs_f64() / n_queries.max(1) as f64);
                }
                std::hint::black_box(sink);
                times.sort_by(f64::total_cmp);
                rows.push(BenchRow {
                    method: m.name().to_string(),
                    candidates: size,
                    k,
                    median_secs_per_query: times[times.len() / 2],
                    runs,
                });
            }
        }
    }
    rows
}
