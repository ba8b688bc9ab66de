use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use causalcf::concept::{zero_shot_labels, Labeler, PredictorHyper, PredictorSet};
use causalcf::data::{validate_dataset, Dataset, Example, Split};
use causalcf::encoder::{EncoderParams, FeatureStore, TrainConfig, COMPONENTS};
use causalcf::estimate::{
    audit_order_faithfulness, audit_with_confounded_replay, cace_hat, icace_topk, AuditEstimator,
    ProviderApproximator,
};
use causalcf::eval::{bench_latency, BenchMethod};
use causalcf::experiment::{
    load_model, load_scm, run_experiment, train_bank, verify_manifest, write_bank_history,
    EncoderBank, EncoderScope, ExperimentConfig, Stage,
};
use causalcf::graph::{CausalGraph, EffectKind, Intervention};
use causalcf::matching::{
    match_approx, match_propensity, match_random, top_k, write_index, CandidateSet, EncoderBench,
    Strategy,
};
use causalcf::model::{scalarize, ExplainedModel};
use causalcf::provider::prompt::{PromptDomain, Template};
use causalcf::provider::remote::{EmbeddingTable, GenerationCache, RemoteConfig, RemoteProvider};
use causalcf::provider::{CfProvider, NoisyOracle, Oracle, PredictionOracle};
use causalcf::quads::{
    build_quads, read_generated, read_quads, write_generated, write_quads, QuadConfig,
};
use causalcf::rng::stage_seed;
use causalcf::scm::{Scm, DEFAULT_SUPPORT_CAP};

#[derive(Parser)]
#[command(
    name = "causalcf",
    version,
    about = "Concept-level causal effect estimation for black-box predictors"
)]
struct Cli {
    /// Master seed; stages derive their own seeds from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Causal graph checks and adjustment sets.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Simulation, exact effects and confounded replays.
    #[command(subcommand)]
    Scm(ScmCmd),
    /// Run an explained model over a dataset.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Concept predictors and labelling.
    #[command(subcommand)]
    Concept(ConceptCmd),
    /// Build contrastive quads for a split.
    Quads(QuadsArgs),
    /// Train the causal encoder.
    #[command(subcommand)]
    Encoder(EncoderCmd),
    /// Counterfactual matching.
    #[command(subcommand)]
    Match(MatchCmd),
    /// Individual and average effect estimates.
    #[command(subcommand)]
    Estimate(EstimateCmd),
    /// Error tables, sweeps and latency.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Order-faithfulness audits.
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Run a configured pipeline.
    Run(RunArgs),
    /// Check a dataset file, or a run directory against its manifest.
    Validate(ValidateArgs),
}

#[derive(Subcommand)]
enum GraphCmd {
    Check {
        file: PathBuf,
    },
    Adjust {
        file: PathBuf,
        #[arg(long)]
        treatment: String,
        /// Defaults to the explained-model node.
        #[arg(long)]
        outcome: Option<String>,
        #[arg(long, value_enum, default_value = "total")]
        effect: Effect,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Effect {
    Total,
    Direct,
}

impl From<Effect> for EffectKind {
    fn from(e: Effect) -> Self {
        match e {
            Effect::Total => EffectKind::Total,
            Effect::Direct => EffectKind::Direct,
        }
    }
}

#[derive(Subcommand)]
enum ScmCmd {
    /// Sample units and write them as a dataset.
    Sample {
        #[arg(long)]
        scm: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "units.jsonl")]
        out: String,
    },
    /// Exact effect by enumeration.
    Cace {
        #[arg(long)]
        scm: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        iv: Intervention,
    },
    /// Build the confounded variant for an ordered pair and write it out.
    Confound {
        #[arg(long)]
        scm: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        iv1: Intervention,
        #[arg(long)]
        iv2: Intervention,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    Predict {
        #[arg(long)]
        model: String,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConceptCmd {
    /// Train one predictor per observed concept on a split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        lr: f64,
        #[arg(long)]
        epochs: usize,
        #[arg(long, default_value_t = 0.0)]
        l2: f64,
    },
    /// Fill missing concept labels.
    Label {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum)]
        labeler: LabelerKind,
        /// Simulator for the oracle labeller.
        #[arg(long)]
        scm: Option<String>,
        #[command(flatten)]
        remote: RemoteArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelerKind {
    Oracle,
    Remote,
}

#[derive(Args)]
struct RemoteArgs {
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    remote_model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "CAUSALCF_API_KEY")]
    api_key_env: String,
    /// `review`, `health`, or a domain JSON file.
    #[arg(long, default_value = "review")]
    domain: String,
}

impl RemoteArgs {
    fn config(&self) -> Result<RemoteConfig> {
        let (Some(url), Some(model)) = (&self.base_url, &self.remote_model) else {
            bail!("remote use needs --base-url and --remote-model");
        };
        Ok(RemoteConfig::new(url, model, &self.api_key_env))
    }

    fn domain(&self) -> Result<PromptDomain> {
        Ok(match self.domain.as_str() {
            "review" => PromptDomain::review(),
            "health" => PromptDomain::health(),
            path => PromptDomain::load(Path::new(path))?,
        })
    }
}

#[derive(Args)]
struct QuadsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scm: String,
    #[arg(long)]
    predictors: Option<PathBuf>,
    /// Anchors come from this split; the pool is always the train split.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, value_enum, default_value = "noisy")]
    provider: ProviderKind,
    /// Relative noise of the noisy oracle.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 10)]
    max_cfs: usize,
    #[arg(long, default_value_t = 4)]
    miscf_count: usize,
    #[arg(long, default_value_t = 1)]
    ivs_per_anchor: usize,
    #[arg(long)]
    no_filter: bool,
    /// Text-to-features table for remote generations.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Oracle,
    Noisy,
    Remote,
}

#[derive(Subcommand)]
enum EncoderCmd {
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        quads: PathBuf,
        #[arg(long)]
        dev_quads: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "64")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        embed_dim: usize,
        /// Components to disable, by index in the objective.
        #[arg(long, value_delimiter = ',')]
        drop_component: Vec<usize>,
        #[arg(long, value_enum, default_value = "per-treatment")]
        scope: Scope,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Shared,
    PerTreatment,
}

#[derive(Subcommand)]
enum MatchCmd {
    Topk {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        iv: Intervention,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "causal")]
        strategy: Strategy,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        predictors: Option<PathBuf>,
        /// Graph for the adjusted concepts of `approx`.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Also write the embedded candidate index.
        #[arg(long)]
        write_index: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EstimateCmd {
    /// ICaCE of one example from generated approximations.
    Icace {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        iv: Intervention,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// CaCE over a split with a simulated provider.
    Cace {
        #[arg(long)]
        scm: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        iv: Intervention,
        #[arg(long, value_enum, default_value = "oracle")]
        provider: EstimateProvider,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimateProvider {
    Oracle,
    Noisy,
    Prediction,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Rerun the evaluation stage of a configured run and print its table.
    Err { config: PathBuf },
    /// Rerun the evaluation stage and print the sweep curves.
    Sweep { config: PathBuf },
    /// Matching latency against candidate count and K.
    Bench {
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "100,1000")]
        candidates: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,100")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
}

#[derive(Subcommand)]
enum AuditCmd {
    Faithfulness {
        #[arg(long)]
        scm: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        iv1: Intervention,
        #[arg(long)]
        iv2: Intervention,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        draws: usize,
        /// Also replay on the confounded variant.
        #[arg(long)]
        confounded: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    only: Option<Stage>,
}

#[derive(Args)]
struct ValidateArgs {
    path: PathBuf,
    /// Splits that must be present.
    #[arg(long, value_delimiter = ',')]
    require: Vec<String>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn split_of(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.as_str() == name)
        .with_context(|| format!("unknown split `{name}`"))
}

fn here() -> PathBuf {
    PathBuf::from(".")
}

fn scm_arg(reference: &str) -> Result<Scm> {
    load_scm(reference, &here()).map_err(anyhow::Error::msg)
}

fn model_arg(reference: &str) -> Result<causalcf::model::ModelSpec> {
    load_model(reference, &here()).map_err(anyhow::Error::msg)
}

fn graph_arg(path: &Path) -> Result<CausalGraph> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    Ok(CausalGraph::from_json(&text)?)
}

fn concepts_of(graph: &CausalGraph) -> Vec<(String, Vec<String>)> {
    graph
        .concepts()
        .iter()
        .filter(|c| c.observed)
        .map(|c| (c.name.clone(), c.domain.clone()))
        .collect()
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon_threads(t)?;
    }
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out_dir;
    match cli.command {
        Command::Graph(cmd) => graph_cmd(cmd),
        Command::Scm(cmd) => scm_cmd(cmd, seed, &out),
        Command::Model(ModelCmd::Predict { model, input }) => {
            let model = model_arg(&model)?;
            let data = Dataset::read_jsonl(&input)?;
            let mut stdout = std::io::stdout().lock();
            for e in &data.examples {
                let p = model.predict(&e.features)?;
                let line = json!({"id": e.id, "probs": p, "expected": scalarize(&p)});
                writeln!(stdout, "{line}")?;
            }
            Ok(())
        }
        Command::Concept(cmd) => concept_cmd(cmd, seed, &out),
        Command::Quads(args) => quads_cmd(args, seed, &out),
        Command::Encoder(cmd) => encoder_cmd(cmd, seed, &out),
        Command::Match(cmd) => match_cmd(cmd, seed),
        Command::Estimate(cmd) => estimate_cmd(cmd, seed),
        Command::Eval(cmd) => eval_cmd(cmd, cli.seed, seed, &out),
        Command::Audit(AuditCmd::Faithfulness {
            scm,
            model,
            iv1,
            iv2,
            n,
            draws,
            confounded,
        }) => {
            let scm = scm_arg(&scm)?;
            let model = model_arg(&model)?;
            if confounded {
                let audit = audit_with_confounded_replay(
                    &scm,
                    &model,
                    &iv1,
                    &iv2,
                    n,
                    draws,
                    seed,
                    DEFAULT_SUPPORT_CAP,
                )?;
                print_json(&audit)
            } else {
                let reports = [AuditEstimator::NonCausal, AuditEstimator::Counterfactual]
                    .into_iter()
                    .map(|est| {
                        audit_order_faithfulness(
                            est,
                            &model,
                            &scm,
                            &iv1,
                            &iv2,
                            n,
                            draws,
                            seed,
                            DEFAULT_SUPPORT_CAP,
                        )
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                print_json(&reports)
            }
        }
        Command::Run(args) => run_cmd(&args.config, args.only, cli.seed, &out).map(|_| ()),
        Command::Validate(args) => validate_cmd(&args),
    }
}

fn rayon_threads(n: usize) -> Result<()> {
    // the pool is only reachable through the core crate's rayon dependency
    causalcf::set_threads(n).map_err(anyhow::Error::msg)
}

fn graph_cmd(cmd: GraphCmd) -> Result<()> {
    match cmd {
        GraphCmd::Check { file } => {
            let g = graph_arg(&file)?;
            let order = g.topological_order()?;
            print_json(&json!({
                "ok": true,
                "nodes": g.node_count(),
                "concepts": g.concepts().iter().map(|c| &c.name).collect::<Vec<_>>(),
                "topological_order": order.iter().map(|&i| g.name(i)).collect::<Vec<_>>(),
            }))
        }
        GraphCmd::Adjust {
            file,
            treatment,
            outcome,
            effect,
        } => {
            let g = graph_arg(&file)?;
            let outcome = outcome.unwrap_or_else(|| g.model_node().to_string());
            let set = g.hold_fixed_set(&treatment, &outcome, effect.into())?;
            print_json(&json!({"treatment": treatment, "outcome": outcome, "adjustment_set": set}))
        }
    }
}

fn scm_cmd(cmd: ScmCmd, seed: u64, out: &Path) -> Result<()> {
    match cmd {
        ScmCmd::Sample { scm, n, out: name } => {
            let scm = scm_arg(&scm)?;
            let ds = Dataset::simulate(&scm, n, seed)?;
            std::fs::create_dir_all(out)?;
            let path = out.join(name);
            ds.write_jsonl(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        ScmCmd::Cace { scm, model, iv } => {
            let scm = scm_arg(&scm)?;
            let model = model_arg(&model)?;
            let est = scm.exact_cace(&model, &iv, DEFAULT_SUPPORT_CAP)?;
            let scalar = scalarize(&est.vector);
            print_json(&json!({"estimate": est, "scalar": scalar}))
        }
        ScmCmd::Confound {
            scm,
            model,
            iv1,
            iv2,
        } => {
            let scm = scm_arg(&scm)?;
            let model = model_arg(&model)?;
            let dgp = causalcf::confound::build_confounded_dgp(
                &scm,
                &model,
                &iv1,
                &iv2,
                DEFAULT_SUPPORT_CAP,
            )?;
            std::fs::create_dir_all(out)?;
            dgp.scm.save(&out.join("confounded_scm.json"))?;
            dgp.model.save(&out.join("confounded_model.json"))?;
            print_json(&dgp.report)
        }
    }
}

fn concept_cmd(cmd: ConceptCmd, seed: u64, out: &Path) -> Result<()> {
    match cmd {
        ConceptCmd::Train {
            data,
            graph,
            split,
            lr,
            epochs,
            l2,
        } => {
            let ds = Dataset::read_jsonl(&data)?;
            let g = graph_arg(&graph)?;
            let split = split_of(&split)?;
            let rows: Vec<&Example> = ds.split(split).collect();
            let hyper = PredictorHyper {
                lr,
                epochs,
                seed,
                l2,
                init_scale: 0.01,
            };
            let (set, traces) = PredictorSet::train(&rows, &concepts_of(&g), &hyper)?;
            std::fs::create_dir_all(out)?;
            let path = out.join("predictors.json");
            std::fs::write(&path, serde_json::to_string_pretty(&set)?)?;
            let summary: Vec<_> = traces
                .iter()
                .map(|(c, t)| json!({"concept": c, "train_accuracy": t.train_accuracy, "empty_classes": t.empty_classes}))
                .collect();
            print_json(&json!({"path": path, "predictors": summary}))
        }
        ConceptCmd::Label {
            data,
            graph,
            labeler,
            scm,
            remote,
        } => {
            let mut ds = Dataset::read_jsonl(&data)?;
            let g = graph_arg(&graph)?;
            let scm_holder;
            let config;
            let domain;
            let labeler = match labeler {
                LabelerKind::Oracle => {
                    scm_holder =
                        scm_arg(scm.as_deref().context("the oracle labeller needs --scm")?)?;
                    Labeler::Oracle(&scm_holder)
                }
                LabelerKind::Remote => {
                    config = remote.config()?;
                    domain = remote.domain()?;
                    Labeler::Remote {
                        config: &config,
                        domain: &domain,
                    }
                }
            };
            let report = zero_shot_labels(&mut ds, &concepts_of(&g), &labeler, seed);
            std::fs::create_dir_all(out)?;
            let path = out.join("labelled.jsonl");
            ds.write_jsonl(&path)?;
            print_json(&json!({"path": path, "filled": report.filled, "dropped": report.dropped}))
        }
    }
}

fn quads_cmd(args: QuadsArgs, seed: u64, out: &Path) -> Result<()> {
    let ds = Dataset::read_jsonl(&args.data)?;
    let scm = scm_arg(&args.scm)?;
    let graph = scm.graph();
    let pool: Vec<&Example> = ds.split(Split::Train).collect();
    let anchors: Vec<&Example> = ds.split(split_of(&args.split)?).collect();
    let predictors: Option<PredictorSet> = match &args.predictors {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let train_rows: Vec<Example> = pool.iter().map(|e| (*e).clone()).collect();
    let provider: Box<dyn CfProvider + '_> = match args.provider {
        ProviderKind::Oracle => Box::new(Oracle::new(&scm)),
        ProviderKind::Noisy => Box::new(NoisyOracle::relative(&scm, args.sigma, &train_rows)),
        ProviderKind::Remote => {
            let embeddings = match &args.embeddings {
                Some(p) => EmbeddingTable::load(p)?,
                None => bail!("remote generation needs --embeddings to featurize completions"),
            };
            std::fs::create_dir_all(out)?;
            Box::new(RemoteProvider {
                config: args.remote.config()?,
                template: Template::ZeroShot,
                domain: args.remote.domain()?,
                embeddings,
                cache: GenerationCache::open(&out.join("generation_cache.jsonl"))?,
            })
        }
    };
    let config = QuadConfig {
        max_cfs: args.max_cfs,
        miscf_count: args.miscf_count,
        filter: !args.no_filter && predictors.is_some(),
        effect: EffectKind::Total,
    };
    let all = Intervention::all_for(graph);
    let mut quads = Vec::new();
    let mut generated = Vec::new();
    for anchor in &anchors {
        let options: Vec<&Intervention> = all
            .iter()
            .filter(|iv| anchor.concept(&iv.treatment) == Some(iv.source.as_str()))
            .collect();
        for (j, iv) in options.iter().take(args.ivs_per_anchor).enumerate() {
            let s = stage_seed(seed, &format!("{}/{j}", anchor.id));
            match build_quads(
                graph,
                &pool,
                anchor,
                iv,
                provider.as_ref(),
                predictors.as_ref(),
                &config,
                s,
            ) {
                Ok(b) => {
                    quads.push(b.quad);
                    generated.extend(b.generated);
                }
                Err(causalcf::quads::QuadError::EmptyQuad(id)) => {
                    log::info!("skipping empty quad for {id}")
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    if let ProviderKind::Remote = args.provider {
        log::info!("remote generation finished");
    }
    std::fs::create_dir_all(out)?;
    let qpath = out.join(format!("quads_{}.jsonl", args.split));
    let gpath = out.join(format!("generated_{}.jsonl", args.split));
    write_quads(&qpath, &quads)?;
    write_generated(&gpath, &generated)?;
    print_json(&json!({"quads": qpath, "generated": gpath, "count": quads.len()}))
}

fn encoder_cmd(cmd: EncoderCmd, seed: u64, out: &Path) -> Result<()> {
    let EncoderCmd::Train {
        data,
        quads,
        dev_quads,
        generated,
        tau,
        epochs,
        lr,
        batch_size,
        hidden,
        embed_dim,
        drop_component,
        scope,
    } = cmd;
    let ds = Dataset::read_jsonl(&data)?;
    let train_q = read_quads(&quads)?;
    let dev_q = read_quads(&dev_quads)?;
    let gen = read_generated(&generated)?;
    let mut store = FeatureStore::new();
    store.add_examples(&ds.examples);
    store.add_generated(&gen);
    let mut mask = [true; 6];
    for i in drop_component {
        if i >= COMPONENTS.len() {
            bail!("component index {i} out of range");
        }
        mask[i] = false;
    }
    let config = TrainConfig {
        tau,
        epochs,
        lr,
        seed,
        component_mask: mask,
        hidden,
        embed_dim,
        batch_size,
    };
    config.validate()?;
    let rows: Vec<&[f64]> = ds
        .split(Split::Train)
        .map(|e| e.features.as_slice())
        .collect();
    if rows.is_empty() {
        bail!("the dataset has no train split");
    }
    let (shift, scale) = EncoderParams::standardizer(&rows);
    let init = EncoderParams::init(
        &config.dims(rows[0].len()),
        shift,
        scale,
        stage_seed(seed, "init"),
    );
    let scope = match scope {
        Scope::Shared => EncoderScope::Shared,
        Scope::PerTreatment => EncoderScope::PerTreatment,
    };
    let (bank, history) =
        train_bank(&init, &train_q, &dev_q, &store, &config, scope).map_err(anyhow::Error::msg)?;
    std::fs::create_dir_all(out)?;
    bank.save(&out.join("encoder.json"))
        .map_err(anyhow::Error::msg)?;
    write_bank_history(&out.join("history.csv"), &history).map_err(anyhow::Error::msg)?;
    let summary: Vec<_> = bank
        .checkpoints
        .iter()
        .map(|(k, c)| json!({"encoder": k, "best_epoch": c.epoch, "dev_loss": c.dev_loss}))
        .collect();
    print_json(&summary)
}

fn match_cmd(cmd: MatchCmd, seed: u64) -> Result<()> {
    let MatchCmd::Topk {
        data,
        query,
        iv,
        k,
        strategy,
        encoder,
        predictors,
        graph,
        write_index: index_path,
    } = cmd;
    let ds = Dataset::read_jsonl(&data)?;
    let q = ds
        .get(&query)
        .with_context(|| format!("no example `{query}`"))?;
    let mut cands = CandidateSet::from_pool(ds.split(Split::Match), &iv.treatment, &iv.target);
    let load_predictors = || -> Result<PredictorSet> {
        let p = predictors
            .as_ref()
            .context("this strategy needs --predictors")?;
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    };
    let result = match strategy {
        Strategy::Causal | Strategy::Pt => {
            let bank =
                EncoderBank::load(encoder.as_ref().context("this strategy needs --encoder")?)
                    .map_err(anyhow::Error::msg)?;
            let ckpt = bank
                .for_treatment(&iv.treatment)
                .map_err(anyhow::Error::msg)?
                .clone();
            let params = if strategy == Strategy::Pt {
                let rows: Vec<&[f64]> = ds
                    .split(Split::Train)
                    .map(|e| e.features.as_slice())
                    .collect();
                let (shift, scale) = EncoderParams::standardizer(&rows);
                EncoderParams::init(&ckpt.params.dims(), shift, scale, stage_seed(seed, "init"))
            } else {
                ckpt.params
            };
            cands.embed_with(&params)?;
            if let Some(path) = &index_path {
                let items: Vec<(String, Vec<f64>)> = cands
                    .items
                    .iter()
                    .map(|c| (c.id.clone(), c.embedding.clone().unwrap_or_default()))
                    .collect();
                write_index(path, &items)?;
            }
            top_k(&q.id, &params.embed(&q.features)?, &cands, k)?
        }
        Strategy::Random => match_random(&q.id, &cands, seed)?,
        Strategy::Propensity => {
            let p = load_predictors()?;
            match_propensity(&q.id, &q.features, &cands, p.get(&iv.treatment)?)?
        }
        Strategy::Approx => {
            let p = load_predictors()?;
            let g = graph_arg(graph.as_ref().context("approx needs --graph")?)?;
            let adjusted: Vec<String> = g
                .adjustment_set(&iv.treatment, g.model_node())?
                .into_iter()
                .collect();
            match_approx(&q.id, &q.features, &cands, &p, &adjusted, seed)?
        }
    };
    let ranked: Vec<_> = result
        .ranked
        .iter()
        .take(k)
        .map(|(id, s)| json!({"id": id, "score": s}))
        .collect();
    print_json(
        &json!({"query": result.query, "strategy": strategy.as_str(), "ranked": ranked, "shortfall": result.shortfall}),
    )
}

fn estimate_cmd(cmd: EstimateCmd, seed: u64) -> Result<()> {
    match cmd {
        EstimateCmd::Icace {
            model,
            data,
            generated,
            id,
            iv,
            k,
        } => {
            let model = model_arg(&model)?;
            let ds = Dataset::read_jsonl(&data)?;
            let x = ds.get(&id).with_context(|| format!("no example `{id}`"))?;
            let approximations: Vec<Vec<f64>> = read_generated(&generated)?
                .into_iter()
                .filter(|g| g.id.starts_with(&format!("{id}~{iv}#")))
                .map(|g| g.features)
                .collect();
            let est = icace_topk(&model, &iv, &x.features, &approximations, k)?;
            let scalar = scalarize(&est.vector);
            print_json(&json!({"estimate": est, "scalar": scalar}))
        }
        EstimateCmd::Cace {
            scm,
            model,
            data,
            split,
            iv,
            provider,
            sigma,
            k,
        } => {
            let scm = scm_arg(&scm)?;
            let model = model_arg(&model)?;
            let ds = Dataset::read_jsonl(&data)?;
            let rows: Vec<&Example> = ds.split(split_of(&split)?).collect();
            let reference: Vec<Example> = ds.split(Split::Train).cloned().collect();
            let boxed: Box<dyn CfProvider + '_> = match provider {
                EstimateProvider::Oracle => Box::new(Oracle::new(&scm)),
                EstimateProvider::Noisy => Box::new(NoisyOracle::relative(&scm, sigma, &reference)),
                EstimateProvider::Prediction => {
                    Box::new(PredictionOracle::new(&scm, &model, sigma))
                }
            };
            let approx = ProviderApproximator::new(
                boxed.as_ref(),
                &model,
                scm.graph(),
                EffectKind::Total,
                k,
            )?;
            let est = cace_hat(&model, &rows, &iv, &approx, seed)?;
            let exact = scm.exact_cace(&model, &iv, DEFAULT_SUPPORT_CAP)?;
            print_json(&json!({
                "estimate": est,
                "scalar": scalarize(&est.vector),
                "exact": exact.vector,
                "exact_scalar": scalarize(&exact.vector),
            }))
        }
    }
}

fn eval_cmd(cmd: EvalCmd, seed_flag: Option<u64>, seed: u64, out: &Path) -> Result<()> {
    match cmd {
        EvalCmd::Err { config } => {
            run_cmd(&config, Some(Stage::Eval), seed_flag, out)?;
            print!("{}", std::fs::read_to_string(out.join("err_table.csv"))?);
            Ok(())
        }
        EvalCmd::Sweep { config } => {
            run_cmd(&config, Some(Stage::Eval), seed_flag, out)?;
            print!("{}", std::fs::read_to_string(out.join("sweeps.csv"))?);
            Ok(())
        }
        EvalCmd::Bench {
            encoder,
            candidates,
            k,
            queries,
            runs,
        } => {
            let params = match encoder {
                Some(p) => {
                    let bank = EncoderBank::load(&p).map_err(anyhow::Error::msg)?;
                    bank.checkpoints
                        .values()
                        .next()
                        .context("empty encoder file")?
                        .params
                        .clone()
                }
                None => {
                    let dim = causalcf::fixtures::DESK_DIM;
                    EncoderParams::init(
                        &[dim, 64, 32],
                        vec![0.0; dim],
                        vec![1.0; dim],
                        stage_seed(seed, "init"),
                    )
                }
            };
            let mut methods: Vec<Box<dyn BenchMethod>> = vec![Box::new(EncoderBench::new(params))];
            let rows = bench_latency(&mut methods, queries, &candidates, &k, runs, seed);
            print_json(&rows)
        }
    }
}

fn run_cmd(
    config_path: &Path,
    only: Option<Stage>,
    seed: Option<u64>,
    out: &Path,
) -> Result<causalcf::experiment::ExperimentOutcome> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let outcome = run_experiment(&config, &text, base, out, only)?;
    eprintln!("artifacts in {}", out.display());
    Ok(outcome)
}

fn validate_cmd(args: &ValidateArgs) -> Result<()> {
    if args.path.is_dir() {
        let bad = verify_manifest(&args.path).map_err(anyhow::Error::msg)?;
        if bad.is_empty() {
            println!("manifest ok");
            return Ok(());
        }
        bail!("files differ from the manifest: {}", bad.join(", "));
    }
    let required = args
        .require
        .iter()
        .map(|s| split_of(s))
        .collect::<Result<Vec<_>>>()?;
    let report = validate_dataset(&args.path, &required)?;
    print_json(&report)?;
    if !report.ok() {
        bail!("{} problem(s) found", report.problems.len());
    }
    Ok(())
}
