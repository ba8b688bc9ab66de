//! Configured end-to-end runs: simulate, label, build quads, train the
//! encoder, match or generate, evaluate, audit.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::concept::{zero_shot_labels, Labeler, PredictorHyper, PredictorSet};
use crate::data::{split_dataset, Dataset, Example, Split};
use crate::encoder::{
    mean_set_similarities_with, train, Checkpoint, EncoderParams, EpochRecord, FeatureStore,
    TrainConfig,
};
use crate::estimate::{audit_with_confounded_replay, ConfoundedAudit};
use crate::eval::{
    err_report, sweep_rank, sweep_topk, write_err_detail, write_err_table, write_sweeps, AnchorRun,
    ErrReport, InterventionRun, MethodRun, Metric, SweepCurve,
};
use crate::fixtures;
use crate::graph::{CausalGraph, EffectKind, Intervention};
use crate::matching::{
    match_approx, match_propensity, match_random, top_k_scan, CandidateSet, MatchError, Strategy,
};
use crate::model::{ExplainedModel, ModelSpec};
use crate::provider::{CfProvider, CfRequest, NoisyOracle, Oracle};
use crate::quads::{
    build_quads, write_generated, write_quads, FilterCounts, QuadConfig, QuadError, QuadSets,
};
use crate::rng::{seeded, stage_seed};
use crate::scm::{Scm, ScmSpec, DEFAULT_SUPPORT_CAP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    Data,
    Predictors,
    Quads,
    Encoder,
    Eval,
    Audit,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Setup => "setup",
            Stage::Data => "data",
            Stage::Predictors => "predictors",
            Stage::Quads => "quads",
            Stage::Encoder => "encoder",
            Stage::Eval => "eval",
            Stage::Audit => "audit",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "setup" => Stage::Setup,
            "data" => Stage::Data,
            "predictors" => Stage::Predictors,
            "quads" => Stage::Quads,
            "encoder" => Stage::Encoder,
            "eval" => Stage::Eval,
            "audit" => Stage::Audit,
            other => return Err(format!("unknown stage `{other}`")),
        })
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {message}")]
pub struct ExperimentError {
    pub stage: Stage,
    pub message: String,
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError {
        stage,
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub labels: LabelConfig,
    pub predictors: PredictorHyper,
    pub train_provider: NoiseConfig,
    pub quads: QuadStageConfig,
    pub encoder: TrainConfig,
    pub encoder_scope: EncoderScope,
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    pub eval: EvalConfig,
    pub audit: AuditConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `builtin:desk`, `builtin:toy`, or a path relative to the config.
    pub scm: String,
    pub model: String,
    pub n_units: usize,
    pub splits: BTreeMap<Split, f64>,
    #[serde(default)]
    pub stratify_by: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Labels as simulated.
    Human,
    /// Labels removed and refilled by a perfect zero-shot labeller.
    ZeroShotOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    pub source: LabelSource,
}

/// Noise of the generative oracle, relative to each coordinate's standard
/// deviation over the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadStageConfig {
    pub max_cfs: usize,
    pub miscf_count: usize,
    pub filter: bool,
    pub effect: EffectKind,
    /// Interventions drawn per training anchor.
    pub ivs_per_anchor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Drop every objective component involving misspecified
    /// counterfactuals.
    NoMiscf,
    /// Keep generations without filtering.
    NoFilter,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoMiscf => "no_miscf",
            Ablation::NoFilter => "no_filter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub strategies: Vec<Strategy>,
    pub k_list: Vec<usize>,
    pub metrics: Vec<Metric>,
    /// Relative noise of the generative baseline.
    pub generative_sigma: f64,
    pub gold_in_pool: bool,
    pub sweep_rank_max: usize,
    pub sweep_topk: Vec<usize>,
    /// Interventions with fewer candidates are skipped.
    pub min_candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub enabled: bool,
    /// `builtin:toy` or a path; the audit uses the shipped ordered pair.
    pub scm: String,
    pub model: String,
    pub interventions: [Intervention; 2],
    pub n: usize,
    pub draws: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(at(Stage::Setup))?;
        cfg.check().map_err(at(Stage::Setup))?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), String> {
        self.encoder.validate().map_err(|e| e.to_string())?;
        if self.eval.k_list.is_empty() || self.eval.k_list.contains(&0) {
            return Err("k_list needs positive entries".into());
        }
        if self.eval.generative_sigma < 0.0 || self.train_provider.sigma < 0.0 {
            return Err("noise scales must be nonnegative".into());
        }
        Ok(())
    }
}

/// Resolves `builtin:*` names and config-relative paths.
pub fn load_scm(reference: &str, base: &Path) -> Result<Scm, String> {
    match reference {
        "builtin:desk" => Scm::new(fixtures::desk_spec()).map_err(|e| e.to_string()),
        "builtin:toy" => Scm::new(fixtures::toy_spec()).map_err(|e| e.to_string()),
        path => {
            let p = base.join(path);
            let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            let spec: ScmSpec =
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?;
            Scm::new(spec).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

pub fn load_model(reference: &str, base: &Path) -> Result<ModelSpec, String> {
    match reference {
        "builtin:desk" => Ok(fixtures::desk_model()),
        "builtin:toy" => Ok(fixtures::toy_model()),
        path => {
            let p = base.join(path);
            ModelSpec::load(&p).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

/// Stage seeds derived from the master seed.
pub fn stage_seeds(master: u64) -> BTreeMap<&'static str, u64> {
    [
        Stage::Data,
        Stage::Predictors,
        Stage::Quads,
        Stage::Encoder,
        Stage::Eval,
        Stage::Audit,
    ]
    .iter()
    .map(|s| (s.as_str(), stage_seed(master, s.as_str())))
    .collect()
}

/// Mean anchor similarity to each set on the dev quads, per encoder variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub variant: String,
    /// In set order: cf, match, miscf, mismatch.
    pub means: [f64; 4],
}

/// Everything a run produced, in memory.
#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub err_reports: Vec<ErrReport>,
    pub sweeps: Vec<SweepCurve>,
    pub similarities: Vec<SimilarityRow>,
    pub method_runs: Vec<MethodRun>,
    pub audit: Option<ConfoundedAudit>,
    pub filter_counts: FilterCounts,
    pub skipped_interventions: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    config_sha256: String,
    seed: u64,
    stage_seeds: BTreeMap<&'static str, u64>,
    files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Checks every file listed in a manifest against its recorded hash and
/// returns the names that differ or are missing.
pub fn verify_manifest(out_dir: &Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(out_dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let files = value["files"]
        .as_object()
        .ok_or("manifest has no `files`")?;
    let mut bad = Vec::new();
    for (name, hash) in files {
        match sha256_file(&out_dir.join(name)) {
            Ok(h) if Some(h.as_str()) == hash.as_str() => {}
            _ => bad.push(name.clone()),
        }
    }
    Ok(bad)
}

struct Context {
    graph: CausalGraph,
    scm: Scm,
    model: ModelSpec,
    concepts: Vec<(String, Vec<String>)>,
}

fn observed_concepts(graph: &CausalGraph) -> Vec<(String, Vec<String>)> {
    graph
        .concepts()
        .iter()
        .filter(|c| c.observed)
        .map(|c| (c.name.clone(), c.domain.clone()))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

/// Runs the pipeline described by `config`; `base` resolves relative paths.
/// With `only`, earlier stages are reloaded from `out_dir` and later ones
/// skipped; the audit stage needs nothing else.
pub fn run_experiment(
    config: &ExperimentConfig,
    config_text: &str,
    base: &Path,
    out_dir: &Path,
    only: Option<Stage>,
) -> Result<ExperimentOutcome, ExperimentError> {
    std::fs::create_dir_all(out_dir).map_err(at(Stage::Setup))?;
    let seeds = stage_seeds(config.seed);
    let mut outcome = ExperimentOutcome {
        out_dir: out_dir.to_path_buf(),
        ..ExperimentOutcome::default()
    };
    let wants = |s: Stage| only.is_none_or(|o| o == s);
    let mut written: Vec<&str> = Vec::new();

    if wants(Stage::Audit) && config.audit.enabled {
        let scm = load_scm(&config.audit.scm, base).map_err(at(Stage::Audit))?;
        let model = load_model(&config.audit.model, base).map_err(at(Stage::Audit))?;
        let [iv1, iv2] = &config.audit.interventions;
        let audit = audit_with_confounded_replay(
            &scm,
            &model,
            iv1,
            iv2,
            config.audit.n,
            config.audit.draws,
            seeds["audit"],
            DEFAULT_SUPPORT_CAP,
        )
        .map_err(at(Stage::Audit))?;
        write_json(&out_dir.join("audit.json"), &audit).map_err(at(Stage::Audit))?;
        written.push("audit.json");
        outcome.audit = Some(audit);
    }
    if only == Some(Stage::Audit) {
        write_manifest(config, config_text, out_dir, &written)?;
        return Ok(outcome);
    }

    let scm = load_scm(&config.data.scm, base).map_err(at(Stage::Setup))?;
    let model = load_model(&config.data.model, base).map_err(at(Stage::Setup))?;
    if model.feature_dim() != scm.feature_dim() {
        return Err(ExperimentError {
            stage: Stage::Setup,
            message: format!(
                "model reads {} features but the simulator writes {}",
                model.feature_dim(),
                scm.feature_dim()
            ),
        });
    }
    let ctx = Context {
        graph: scm.graph().clone(),
        concepts: observed_concepts(scm.graph()),
        scm,
        model,
    };

    // data
    let data_path = out_dir.join("data.jsonl");
    let dataset = if wants(Stage::Data) {
        let mut ds = Dataset::simulate(&ctx.scm, config.data.n_units, seeds["data"])
            .map_err(at(Stage::Data))?;
        let fractions: Vec<(Split, f64)> =
            config.data.splits.iter().map(|(s, f)| (*s, *f)).collect();
        split_dataset(
            &mut ds,
            &fractions,
            config.data.stratify_by.as_deref(),
            stage_seed(seeds["data"], "split"),
        )
        .map_err(at(Stage::Data))?;
        if config.labels.source == LabelSource::ZeroShotOracle {
            for e in &mut ds.examples {
                e.concepts.clear();
            }
            let report = zero_shot_labels(
                &mut ds,
                &ctx.concepts,
                &Labeler::Oracle(&ctx.scm),
                seeds["data"],
            );
            if !report.dropped.is_empty() {
                log::warn!("{} labels could not be produced", report.dropped.len());
            }
        }
        ds.write_jsonl(&data_path).map_err(at(Stage::Data))?;
        written.push("data.jsonl");
        ds
    } else {
        Dataset::read_jsonl(&data_path).map_err(at(Stage::Data))?
    };
    if only == Some(Stage::Data) {
        write_manifest(config, config_text, out_dir, &written)?;
        return Ok(outcome);
    }
    let train_split: Vec<&Example> = dataset.split(Split::Train).collect();
    let dev_split: Vec<&Example> = dataset.split(Split::Dev).collect();

    // predictors
    let pred_path = out_dir.join("predictors.json");
    let predictors: PredictorSet = if wants(Stage::Predictors) {
        let hyper = PredictorHyper {
            seed: seeds["predictors"],
            ..config.predictors
        };
        let (set, traces) = PredictorSet::train(&train_split, &ctx.concepts, &hyper)
            .map_err(at(Stage::Predictors))?;
        for (c, t) in &traces {
            log::info!("predictor {c}: train accuracy {:.4}", t.train_accuracy);
        }
        write_json(&pred_path, &set).map_err(at(Stage::Predictors))?;
        written.push("predictors.json");
        set
    } else {
        let text = std::fs::read_to_string(&pred_path).map_err(at(Stage::Predictors))?;
        serde_json::from_str(&text).map_err(at(Stage::Predictors))?
    };
    if only == Some(Stage::Predictors) {
        write_manifest(config, config_text, out_dir, &written)?;
        return Ok(outcome);
    }

    // quads
    let noisy_train = NoisyOracle::relative(
        &ctx.scm,
        config.train_provider.sigma,
        &dataset.examples_in(Split::Train),
    );
    let quad_config = QuadConfig {
        max_cfs: config.quads.max_cfs,
        miscf_count: config.quads.miscf_count,
        filter: config.quads.filter,
        effect: config.quads.effect,
    };
    let mut store = FeatureStore::new();
    store.add_examples(&dataset.examples);
    let build = |filter: bool, tag: &str| -> Result<QuadStage, QuadError> {
        let cfg = QuadConfig {
            filter,
            ..quad_config.clone()
        };
        let s = stage_seed(seeds["quads"], tag);
        let train = quads_for(
            &ctx,
            &train_split,
            &train_split,
            &noisy_train,
            &predictors,
            &cfg,
            config.quads.ivs_per_anchor,
            stage_seed(s, "train"),
        )?;
        let dev = quads_for(
            &ctx,
            &dev_split,
            &train_split,
            &noisy_train,
            &predictors,
            &cfg,
            config.quads.ivs_per_anchor,
            stage_seed(s, "dev"),
        )?;
        Ok(QuadStage { train, dev })
    };
    if !wants(Stage::Quads) && !wants(Stage::Encoder) && !wants(Stage::Eval) {
        write_manifest(config, config_text, out_dir, &written)?;
        return Ok(outcome);
    }
    let main_quads = build(config.quads.filter, "main").map_err(at(Stage::Quads))?;
    store.add_generated(&main_quads.train.generated);
    store.add_generated(&main_quads.dev.generated);
    outcome.filter_counts = main_quads.train.counts;
    if wants(Stage::Quads) {
        let q = |name: &str| out_dir.join(name);
        write_quads(&q("quads_train.jsonl"), &main_quads.train.quads).map_err(at(Stage::Quads))?;
        write_quads(&q("quads_dev.jsonl"), &main_quads.dev.quads).map_err(at(Stage::Quads))?;
        let mut generated = main_quads.train.generated.clone();
        generated.extend(main_quads.dev.generated.iter().cloned());
        write_generated(&q("generated.jsonl"), &generated).map_err(at(Stage::Quads))?;
        written.extend(["quads_train.jsonl", "quads_dev.jsonl", "generated.jsonl"]);
    }
    if only == Some(Stage::Quads) {
        write_manifest(config, config_text, out_dir, &written)?;
        return Ok(outcome);
    }

    // encoder
    let dim = ctx.scm.feature_dim();
    let train_rows: Vec<&[f64]> = train_split.iter().map(|e| e.features.as_slice()).collect();
    let (shift, scale) = EncoderParams::standardizer(&train_rows);
    let enc_seed = seeds["encoder"];
    let initial = EncoderParams::init(
        &config.encoder.dims(dim),
        shift,
        scale,
        stage_seed(enc_seed, "init"),
    );
    let enc_path = out_dir.join("encoder.json");
    let main_config = TrainConfig {
        seed: enc_seed,
        ..config.encoder.clone()
    };
    let scope = config.encoder_scope;
    let bank = if wants(Stage::Encoder) {
        let (bank, history) = train_bank(
            &initial,
            &main_quads.train.quads,
            &main_quads.dev.quads,
            &store,
            &main_config,
            scope,
        )
        .map_err(at(Stage::Encoder))?;
        bank.save(&enc_path).map_err(at(Stage::Encoder))?;
        write_bank_history(&out_dir.join("history.csv"), &history).map_err(at(Stage::Encoder))?;
        written.extend(["encoder.json", "history.csv"]);
        let sims = bank
            .similarities(&main_quads.dev.quads, &store)
            .map_err(at(Stage::Encoder))?;
        outcome.similarities.push(SimilarityRow {
            variant: "full".into(),
            means: sims,
        });
        for ab in &config.ablations {
            let (variant_quads, mask) = match ab {
                Ablation::NoMiscf => {
                    let mut m = main_config.component_mask;
                    for (i, (p, n)) in crate::encoder::COMPONENTS.iter().enumerate() {
                        if *p == crate::encoder::Role::Miscf || *n == crate::encoder::Role::Miscf {
                            m[i] = false;
                        }
                    }
                    (None, m)
                }
                Ablation::NoFilter => (
                    Some(build(false, "no_filter").map_err(at(Stage::Quads))?),
                    main_config.component_mask,
                ),
            };
            let mut vstore = store.clone();
            let quads = match &variant_quads {
                Some(v) => {
                    vstore.add_generated(&v.train.generated);
                    vstore.add_generated(&v.dev.generated);
                    v
                }
                None => &main_quads,
            };
            let cfg = TrainConfig {
                component_mask: mask,
                ..main_config.clone()
            };
            let (ab_bank, _) = train_bank(
                &initial,
                &quads.train.quads,
                &quads.dev.quads,
                &vstore,
                &cfg,
                scope,
            )
            .map_err(at(Stage::Encoder))?;
            // similarities are always measured on the main dev quads
            let sims = ab_bank
                .similarities(&main_quads.dev.quads, &vstore)
                .map_err(at(Stage::Encoder))?;
            outcome.similarities.push(SimilarityRow {
                variant: ab.as_str().into(),
                means: sims,
            });
        }
        write_similarities(&out_dir.join("similarities.csv"), &outcome.similarities)
            .map_err(at(Stage::Encoder))?;
        written.push("similarities.csv");
        bank
    } else {
        EncoderBank::load(&enc_path).map_err(at(Stage::Encoder))?
    };
    if only == Some(Stage::Encoder) {
        write_manifest(config, config_text, out_dir, &written)?;
        return Ok(outcome);
    }

    // eval
    let eval_seed = seeds["eval"];
    let runs = evaluate(
        &ctx,
        &dataset,
        &predictors,
        &initial,
        &bank,
        config,
        eval_seed,
        &mut outcome.skipped_interventions,
    )
    .map_err(at(Stage::Eval))?;
    let mut reports = Vec::new();
    for run in &runs {
        for &k in &config.eval.k_list {
            reports.push(err_report(run, k).map_err(at(Stage::Eval))?);
        }
    }
    let mut sweeps = Vec::new();
    for run in &runs {
        for &metric in &config.eval.metrics {
            if run.method != "generative" && run.method != "gold" {
                sweeps.push(
                    sweep_rank(run, metric, config.eval.sweep_rank_max).map_err(at(Stage::Eval))?,
                );
            }
            if run.method != "gold" {
                sweeps.push(
                    sweep_topk(run, metric, &config.eval.sweep_topk).map_err(at(Stage::Eval))?,
                );
            }
        }
    }
    write_err_table(&out_dir.join("err_table.csv"), &reports).map_err(at(Stage::Eval))?;
    write_err_detail(&out_dir.join("err_detail.csv"), &reports).map_err(at(Stage::Eval))?;
    write_sweeps(&out_dir.join("sweeps.csv"), &sweeps).map_err(at(Stage::Eval))?;
    written.extend(["err_table.csv", "err_detail.csv", "sweeps.csv"]);
    write_json(
        &out_dir.join("eval_header.json"),
        &serde_json::json!({
            "min_candidates": config.eval.min_candidates,
            "skipped_interventions": outcome.skipped_interventions,
        }),
    )
    .map_err(at(Stage::Eval))?;
    written.push("eval_header.json");
    outcome.err_reports = reports;
    outcome.sweeps = sweeps;
    outcome.method_runs = runs;
    write_manifest(config, config_text, out_dir, &written)?;
    Ok(outcome)
}

fn write_manifest(
    config: &ExperimentConfig,
    config_text: &str,
    out_dir: &Path,
    written: &[&str],
) -> Result<(), ExperimentError> {
    let mut files = BTreeMap::new();
    for name in written {
        files.insert(
            name.to_string(),
            sha256_file(&out_dir.join(name)).map_err(at(Stage::Setup))?,
        );
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: hex::encode(Sha256::digest(config_text.as_bytes())),
        seed: config.seed,
        stage_seeds: stage_seeds(config.seed),
        files,
    };
    write_json(&out_dir.join("manifest.json"), &manifest).map_err(at(Stage::Setup))
}

fn write_similarities(path: &Path, rows: &[SimilarityRow]) -> Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| e.to_string())?;
    let err = |e: csv::Error| e.to_string();
    w.write_record(["variant", "cf", "match", "miscf", "mismatch"])
        .map_err(err)?;
    for r in rows {
        let mut rec = vec![r.variant.clone()];
        rec.extend(r.means.iter().map(|v| format!("{v:.10}")));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| e.to_string())
}

/// Whether one encoder serves every treatment or each treatment concept
/// gets its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderScope {
    Shared,
    PerTreatment,
}

const SHARED_KEY: &str = "*";

/// Trained encoders keyed by treatment concept, or a single shared one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBank {
    pub scope: EncoderScope,
    pub checkpoints: BTreeMap<String, Checkpoint>,
}

impl EncoderBank {
    pub fn for_treatment(&self, treatment: &str) -> Result<&Checkpoint, String> {
        let key = match self.scope {
            EncoderScope::Shared => SHARED_KEY,
            EncoderScope::PerTreatment => treatment,
        };
        self.checkpoints
            .get(key)
            .ok_or_else(|| format!("no encoder trained for treatment `{treatment}`"))
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let text = serde_json::to_string(self).map_err(|e| e.to_string())?;
        std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }

    /// Dev-set mean similarities, each quad scored by its treatment's
    /// encoder.
    pub fn similarities(
        &self,
        quads: &[QuadSets],
        store: &FeatureStore,
    ) -> Result<[f64; 4], String> {
        mean_set_similarities_with(quads, store, |q| {
            self.for_treatment(&q.intervention.treatment)
                .map(|c| &c.params)
                .map_err(crate::encoder::EncoderError::InvalidConfig)
        })
        .map_err(|e| e.to_string())
    }
}

/// Trains one encoder per key of `scope` from the same initial parameters;
/// independent runs go in parallel.
pub fn train_bank(
    initial: &EncoderParams,
    train_quads: &[QuadSets],
    dev_quads: &[QuadSets],
    store: &FeatureStore,
    config: &TrainConfig,
    scope: EncoderScope,
) -> Result<(EncoderBank, Vec<(String, Vec<EpochRecord>)>), String> {
    let key = |q: &QuadSets| match scope {
        EncoderScope::Shared => SHARED_KEY.to_string(),
        EncoderScope::PerTreatment => q.intervention.treatment.clone(),
    };
    let mut groups: BTreeMap<String, (Vec<QuadSets>, Vec<QuadSets>)> = BTreeMap::new();
    for q in train_quads {
        groups.entry(key(q)).or_default().0.push(q.clone());
    }
    for q in dev_quads {
        groups.entry(key(q)).or_default().1.push(q.clone());
    }
    let results: Vec<(String, Checkpoint, Vec<EpochRecord>)> = groups
        .into_par_iter()
        .map(|(k, (tq, dq))| {
            let cfg = TrainConfig {
                seed: stage_seed(config.seed, &k),
                ..config.clone()
            };
            train(initial.clone(), &tq, &dq, store, &cfg)
                .map(|(c, h)| (k.clone(), c, h))
                .map_err(|e| format!("encoder `{k}`: {e}"))
        })
        .collect::<Result<_, _>>()?;
    let mut checkpoints = BTreeMap::new();
    let mut history = Vec::new();
    for (k, c, h) in results {
        checkpoints.insert(k.clone(), c);
        history.push((k, h));
    }
    Ok((EncoderBank { scope, checkpoints }, history))
}

pub fn write_bank_history(
    path: &Path,
    history: &[(String, Vec<EpochRecord>)],
) -> Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| e.to_string())?;
    let err = |e: csv::Error| e.to_string();
    w.write_record(["encoder", "epoch", "train_loss", "dev_loss"])
        .map_err(err)?;
    for (k, records) in history {
        for r in records {
            w.write_record([
                k.clone(),
                r.epoch.to_string(),
                r.train_loss.map(|v| format!("{v:.12}")).unwrap_or_default(),
                format!("{:.12}", r.dev_loss),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| e.to_string())
}

/// Quads and the generated items they reference for one split.
pub struct QuadBatch {
    pub quads: Vec<QuadSets>,
    pub generated: Vec<crate::provider::ApproxCounterfactual>,
    pub counts: FilterCounts,
}

struct QuadStage {
    train: QuadBatch,
    dev: QuadBatch,
}

/// Builds quads for every anchor under `ivs_per_anchor` interventions drawn
/// from those whose source is the anchor's value. Anchors with an empty quad
/// are skipped.
#[allow(clippy::too_many_arguments)]
pub fn quads_for(
    graph_ctx: &impl QuadContext,
    anchors: &[&Example],
    pool: &[&Example],
    provider: &dyn CfProvider,
    predictors: &PredictorSet,
    config: &QuadConfig,
    ivs_per_anchor: usize,
    seed: u64,
) -> Result<QuadBatch, QuadError> {
    let graph = graph_ctx.graph();
    let all = Intervention::all_for(graph);
    let results: Vec<Result<Vec<crate::quads::QuadBuild>, QuadError>> = anchors
        .par_iter()
        .map(|anchor| {
            let mut rng = seeded(stage_seed(seed, &anchor.id));
            let mut options: Vec<&Intervention> = all
                .iter()
                .filter(|iv| anchor.concept(&iv.treatment) == Some(iv.source.as_str()))
                .collect();
            use rand::seq::SliceRandom;
            options.shuffle(&mut rng);
            let mut out = Vec::new();
            for (j, iv) in options.into_iter().take(ivs_per_anchor).enumerate() {
                let s = stage_seed(seed, &format!("{}/{j}", anchor.id));
                match build_quads(
                    graph,
                    pool,
                    anchor,
                    iv,
                    provider,
                    Some(predictors),
                    config,
                    s,
                ) {
                    Ok(b) => out.push(b),
                    Err(QuadError::EmptyQuad(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(out)
        })
        .collect();
    let mut batch = QuadBatch {
        quads: Vec::new(),
        generated: Vec::new(),
        counts: FilterCounts::default(),
    };
    for r in results {
        for b in r? {
            batch.counts.absorb(b.counts);
            batch.quads.push(b.quad);
            batch.generated.extend(b.generated);
        }
    }
    Ok(batch)
}

/// Access to the causal graph for quad construction.
pub trait QuadContext: Sync {
    fn graph(&self) -> &CausalGraph;
}

impl QuadContext for Context {
    fn graph(&self) -> &CausalGraph {
        &self.graph
    }
}

impl QuadContext for CausalGraph {
    fn graph(&self) -> &CausalGraph {
        self
    }
}

impl Dataset {
    /// Owned copies of one split.
    pub fn examples_in(&self, split: Split) -> Vec<Example> {
        self.split(split).cloned().collect()
    }
}

struct EvalTask<'a> {
    iv: Intervention,
    anchors: Vec<&'a Example>,
    candidates: CandidateSet,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ctx: &Context,
    dataset: &Dataset,
    predictors: &PredictorSet,
    untrained: &EncoderParams,
    bank: &EncoderBank,
    config: &ExperimentConfig,
    seed: u64,
    skipped: &mut Vec<String>,
) -> Result<Vec<MethodRun>, String> {
    let model: &dyn ExplainedModel = &ctx.model;
    let test: Vec<&Example> = dataset.split(Split::Test).collect();
    let pool: Vec<&Example> = dataset.split(Split::Match).collect();
    let depth = config
        .eval
        .sweep_rank_max
        .max(config.eval.sweep_topk.iter().copied().max().unwrap_or(1))
        .max(config.eval.k_list.iter().copied().max().unwrap_or(1));

    let mut tasks = Vec::new();
    for iv in Intervention::all_for(&ctx.graph) {
        let candidates = CandidateSet::from_pool(pool.iter().copied(), &iv.treatment, &iv.target);
        let anchors: Vec<&Example> = test
            .iter()
            .copied()
            .filter(|e| e.concept(&iv.treatment) == Some(iv.source.as_str()))
            .collect();
        if candidates.len() < config.eval.min_candidates || anchors.is_empty() {
            skipped.push(iv.to_string());
            continue;
        }
        tasks.push(EvalTask {
            iv,
            anchors,
            candidates,
        });
    }

    let oracle = Oracle::new(&ctx.scm);
    let noisy = NoisyOracle::relative(
        &ctx.scm,
        config.eval.generative_sigma,
        &dataset.examples_in(Split::Train),
    );
    let pool_preds: HashMap<&str, Vec<f64>> = pool
        .par_iter()
        .map(|e| model.predict(&e.features).map(|p| (e.id.as_str(), p)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    let mut methods: Vec<String> = vec!["gold".into()];
    if config.eval.gold_in_pool {
        methods.push("gold_in_pool".into());
    }
    methods.push("generative".into());
    methods.extend(
        config
            .eval
            .strategies
            .iter()
            .map(|s| s.as_str().to_string()),
    );
    let mut runs: Vec<MethodRun> = methods
        .iter()
        .map(|m| MethodRun {
            method: m.clone(),
            interventions: Vec::new(),
        })
        .collect();

    for task in &mut tasks {
        let iv = &task.iv;
        let adjusted: Vec<String> = ctx
            .graph
            .hold_fixed_set(&iv.treatment, ctx.graph.model_node(), config.quads.effect)
            .map_err(|e| e.to_string())?
            .into_iter()
            .collect();
        let trained = &bank.for_treatment(&iv.treatment)?.params;
        let mut trained_set = task.candidates.clone();
        trained_set.embed_with(trained).map_err(|e| e.to_string())?;
        let mut untrained_set = task.candidates.clone();
        untrained_set
            .embed_with(untrained)
            .map_err(|e| e.to_string())?;
        let treat_pred = predictors.get(&iv.treatment).map_err(|e| e.to_string())?;
        let iv_seed = stage_seed(seed, &iv.to_string());

        let per_anchor: Vec<Vec<AnchorRun>> = task
            .anchors
            .par_iter()
            .map(|anchor| -> Result<Vec<AnchorRun>, String> {
                let a_seed = stage_seed(iv_seed, &anchor.id);
                let base = model.predict(&anchor.features).map_err(|e| e.to_string())?;
                let gold_req = CfRequest {
                    base: (*anchor).clone(),
                    intervention: iv.clone(),
                    hold_fixed: adjusted.iter().cloned().collect(),
                    mention: Default::default(),
                    effect: config.quads.effect,
                    count: 1,
                    value_positions: None,
                    demonstrations: Vec::new(),
                    fields: BTreeMap::new(),
                };
                let gold_x = oracle.generate(&gold_req, 0).map_err(|e| e.to_string())?.cfs.remove(0).features;
                let gold = model.predict(&gold_x).map_err(|e| e.to_string())?;
                let preds_of = |ids: Vec<String>, extra: Option<(&str, &Vec<f64>)>| -> Vec<Vec<f64>> {
                    ids.iter()
                        .map(|id| match extra {
                            Some((eid, p)) if eid == id => p.clone(),
                            _ => pool_preds[id.as_str()].clone(),
                        })
                        .collect()
                };
                let ranked_ids = |r: Result<crate::matching::MatchResult, MatchError>| -> Result<Vec<String>, String> {
                    match r {
                        Ok(m) => Ok(m.ranked.into_iter().take(depth).map(|(id, _)| id).collect()),
                        Err(MatchError::NoValidMatch(_)) => Ok(Vec::new()),
                        Err(e) => Err(e.to_string()),
                    }
                };
                let mut out = Vec::with_capacity(methods.len());
                let mut push = |ranked: Vec<Vec<f64>>| {
                    out.push(AnchorRun {
                        id: anchor.id.clone(),
                        base: base.clone(),
                        gold: gold.clone(),
                        ranked,
                    })
                };
                push(vec![gold.clone()]);
                let q_trained = trained.embed(&anchor.features).map_err(|e| e.to_string())?;
                if config.eval.gold_in_pool {
                    let gold_id = format!("{}~gold", anchor.id);
                    let gold_emb = trained.embed(&gold_x).map_err(|e| e.to_string())?;
                    let mut items: Vec<(&str, &[f64])> = trained_set
                        .items
                        .iter()
                        .map(|c| (c.id.as_str(), c.embedding.as_deref().expect("embedded")))
                        .collect();
                    items.push((gold_id.as_str(), gold_emb.as_slice()));
                    let ids = ranked_ids(top_k_scan(&anchor.id, &q_trained, &items, depth))?;
                    push(preds_of(ids, Some((gold_id.as_str(), &gold))));
                }
                let mut gen_req = gold_req.clone();
                gen_req.count = depth;
                let generated = noisy
                    .generate(&gen_req, stage_seed(a_seed, "generative"))
                    .map_err(|e| e.to_string())?;
                push(
                    generated
                        .cfs
                        .iter()
                        .map(|c| model.predict(&c.features))
                        .collect::<Result<_, _>>()
                        .map_err(|e| e.to_string())?,
                );
                for strategy in &config.eval.strategies {
                    let ids = match strategy {
                        Strategy::Causal => ranked_ids(crate::matching::top_k(&anchor.id, &q_trained, &trained_set, depth))?,
                        Strategy::Pt => {
                            let q = untrained.embed(&anchor.features).map_err(|e| e.to_string())?;
                            ranked_ids(crate::matching::top_k(&anchor.id, &q, &untrained_set, depth))?
                        }
                        Strategy::Random => ranked_ids(match_random(&anchor.id, &task.candidates, stage_seed(a_seed, "random")))?,
                        Strategy::Propensity => ranked_ids(match_propensity(&anchor.id, &anchor.features, &task.candidates, treat_pred))?,
                        Strategy::Approx => ranked_ids(match_approx(
                            &anchor.id,
                            &anchor.features,
                            &task.candidates,
                            predictors,
                            &adjusted,
                            stage_seed(a_seed, "approx"),
                        ))?,
                    };
                    push(preds_of(ids, None));
                }
                Ok(out)
            })
            .collect::<Result<_, _>>()?;
        for (m, run) in runs.iter_mut().enumerate() {
            run.interventions.push(InterventionRun {
                intervention: iv.clone(),
                anchors: per_anchor.iter().map(|a| a[m].clone()).collect(),
            });
        }
    }
    Ok(runs)
}
