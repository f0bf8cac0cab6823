use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ecoprod_cli::config::{load_config, CausalConfig, ClusterConfig};
use ecoprod_cli::error::{Failure, StageResult};
use ecoprod_cli::stages::{self, TrainInputs};
use ecoprod_core::causal::{Aggregation, BaseLearner, Method};
use ecoprod_core::dataset::{
    generate_synthetic, infer_province_schema, write_complaints, write_ground_truth, write_provinces, SyntheticSpec,
};
use ecoprod_core::dea::Rts;
use ecoprod_core::gbm::TrainConfig;

#[derive(Parser)]
#[command(name = "ecoprod", version, about = "Eco-efficiency, complaint clustering and co-production effect pipeline")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fixture with planted ground truth.
    Synth(SynthArgs),
    /// Score provinces with input-oriented DEA and split at the median.
    Dea(DeaArgs),
    /// Spectral clustering of complaint embeddings with a permutation test.
    Cluster(ClusterArgs),
    /// Build features, cross-validate and fit the boosted classifier.
    Train(TrainArgs),
    /// TreeSHAP attributions, summary plot and province archetypes.
    Explain(ExplainArgs),
    /// Average treatment effect of high eco-efficiency on co-production.
    Causal(CausalArgs),
    /// Run every stage from a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 27)]
    provinces: usize,
    #[arg(long, default_value_t = 4221)]
    complaints: usize,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 768)]
    dim: usize,
    #[arg(long, default_value_t = 0.24, allow_negative_numbers = true)]
    ate: f64,
    #[arg(long, default_value_t = 1.0)]
    confounding: f64,
    #[arg(long, default_value_t = 3)]
    inputs: usize,
    #[arg(long, default_value_t = 12)]
    fiscal: usize,
    /// Distance between cluster centres in within-cluster standard deviations.
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RtsArg {
    Crs,
    Vrs,
}

impl From<RtsArg> for Rts {
    fn from(r: RtsArg) -> Self {
        match r {
            RtsArg::Crs => Rts::Crs,
            RtsArg::Vrs => Rts::Vrs,
        }
    }
}

#[derive(Args)]
struct DeaArgs {
    #[arg(long)]
    provinces: PathBuf,
    #[arg(long, value_enum, default_value = "vrs")]
    rts: RtsArg,
    #[arg(long, default_value = "gdp_output")]
    output_column: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    complaints: PathBuf,
    /// Expected embedding dimension (taken from the first record otherwise).
    #[arg(long)]
    dim: Option<usize>,
    /// DEA scores, for High/Low centroid shifts per cluster.
    #[arg(long)]
    dea_scores: Option<PathBuf>,
    #[arg(long, conflicts_with = "auto_k")]
    k: Option<usize>,
    /// Choose k by the elbow rule (default when --k is absent).
    #[arg(long)]
    auto_k: bool,
    #[arg(long, default_value_t = 12)]
    kmax: usize,
    #[arg(long, default_value_t = 99)]
    permutations: usize,
    /// Use (1 + count) / (1 + N) for the permutation p-value.
    #[arg(long)]
    smoothed_p: bool,
    #[arg(long)]
    no_row_normalize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    provinces: PathBuf,
    #[arg(long)]
    complaints: PathBuf,
    #[arg(long)]
    dea_scores: PathBuf,
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long)]
    dim: Option<usize>,
    /// Which DEA score becomes the eco_efficiency feature.
    #[arg(long, value_enum, default_value = "vrs")]
    rts: RtsArg,
    #[arg(long, default_value = "gdp_output")]
    output_column: String,
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    #[arg(long, default_value_t = 4)]
    max_depth: usize,
    #[arg(long, default_value_t = 0.3)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    min_child_cover: f64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaseArg {
    Boosted,
    Glm,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Unit,
    Group,
}

#[derive(Args)]
struct CausalArgs {
    #[arg(long)]
    features: PathBuf,
    /// cevae, s, t, x, r, diff_means or all; comma-separated.
    #[arg(long, default_value = "all", value_delimiter = ',')]
    method: Vec<String>,
    #[arg(long, default_value_t = 200)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Covariate columns; defaults to the standard seven.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long, default_value = "eco_high")]
    treatment: String,
    #[arg(long, default_value = "target")]
    outcome: String,
    /// Average effects per province before averaging across provinces.
    #[arg(long, value_enum, default_value = "unit")]
    aggregation: AggArg,
    /// Base learner for the meta-learners.
    #[arg(long, value_enum, default_value = "boosted")]
    base: BaseArg,
    /// Propensity model.
    #[arg(long, value_enum, default_value = "glm")]
    propensity: BaseArg,
    /// Fit a heterogeneous R-learner effect instead of a constant.
    #[arg(long)]
    heterogeneous_r: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. --set cluster.k=8 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides output_dir in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("ECOPROD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::input(anyhow!("ECOPROD_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Failure::input)
}

fn parse_methods(raw: &[String]) -> Result<Vec<Method>, Failure> {
    if raw.iter().any(|m| m.eq_ignore_ascii_case("all")) {
        return Ok(vec![Method::Cevae, Method::S, Method::T, Method::X, Method::R]);
    }
    raw.iter()
        .map(|m| m.parse::<Method>().map_err(|e| Failure::input(anyhow!(e))))
        .collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                n_provinces: a.provinces,
                n_complaints: a.complaints,
                n_clusters: a.clusters,
                embedding_dim: a.dim,
                true_ate: a.ate,
                confounding_strength: a.confounding,
                seed: a.seed,
                n_env_inputs: a.inputs,
                n_fiscal: a.fiscal,
                cluster_separation: a.separation,
            };
            spec.validate().input_in("synth")?;
            let data = generate_synthetic(&spec).failed_in("synth")?;
            stages::ensure_dir(&a.out)?;
            write_provinces(&a.out.join("provinces.csv"), &data.provinces, &data.schema).failed_in("synth")?;
            write_complaints(&a.out.join("complaints.jsonl"), &data.complaints).failed_in("synth")?;
            write_ground_truth(&a.out.join("ground_truth.json"), &data.truth).failed_in("synth")?;
            println!(
                "wrote {} provinces and {} complaints to {}",
                data.provinces.len(),
                data.complaints.len(),
                a.out.display()
            );
        }
        Command::Dea(a) => {
            let schema = infer_province_schema(&a.provinces, &a.output_column).input_in("dea")?;
            stages::ensure_dir(&a.out)?;
            let s = stages::run_dea(&a.provinces, &schema, a.rts.into(), &a.out)?;
            println!(
                "{} units, {} high / {} low, median theta {:.4}",
                s.units, s.high, s.low, s.median_theta
            );
        }
        Command::Cluster(a) => {
            let cfg = ClusterConfig {
                k: if a.auto_k { None } else { a.k },
                k_max: a.kmax,
                permutations: a.permutations,
                smoothed_p: a.smoothed_p,
                row_normalize: !a.no_row_normalize,
                ..ClusterConfig::default()
            };
            stages::ensure_dir(&a.out)?;
            let s = stages::run_cluster(&a.complaints, a.dim, a.dea_scores.as_deref(), &cfg, a.seed, &a.out)?;
            println!(
                "k = {}, silhouette {:.4}, p = {}",
                s.k,
                s.silhouette,
                s.p_value.map_or("n/a".into(), |p| p.to_string())
            );
        }
        Command::Train(a) => {
            let schema = infer_province_schema(&a.provinces, &a.output_column).input_in("train")?;
            let cfg = TrainConfig {
                rounds: a.rounds,
                max_depth: a.max_depth,
                eta: a.eta,
                lambda: a.lambda,
                min_child_cover: a.min_child_cover,
                folds: a.folds,
                seed: a.seed,
                ..TrainConfig::default()
            };
            stages::ensure_dir(&a.out)?;
            let s = stages::run_train(
                &TrainInputs {
                    provinces: &a.provinces,
                    schema: &schema,
                    complaints: &a.complaints,
                    embedding_dim: a.dim,
                    dea_scores: &a.dea_scores,
                    clusters: &a.clusters,
                    plan: None,
                    rts: a.rts.into(),
                },
                &cfg,
                &a.out,
            )?;
            println!(
                "{} rows x {} features, cv accuracy {:.4} (majority share {:.4})",
                s.rows, s.features, s.mean_accuracy, s.majority_share
            );
        }
        Command::Explain(a) => {
            stages::ensure_dir(&a.out)?;
            let s = stages::run_explain(&a.model, &a.features, &a.out)?;
            let top: Vec<&str> = s.top_features.iter().map(|f| f.name.as_str()).collect();
            println!("top features: {}", top.join(", "));
        }
        Command::Causal(a) => {
            let learner = |b: BaseArg| match b {
                BaseArg::Boosted => BaseLearner::default(),
                BaseArg::Glm => BaseLearner::Glm { l2: 1.0 },
            };
            let defaults = CausalConfig::default();
            let cfg = CausalConfig {
                methods: parse_methods(&a.method)?,
                bootstrap: a.bootstrap,
                preset: a.preset,
                epochs: a.epochs,
                mc_samples: a.mc_samples,
                covariates: a.covariates.unwrap_or(defaults.covariates),
                treatment: a.treatment,
                outcome: a.outcome,
                aggregation: match a.aggregation {
                    AggArg::Unit => Aggregation::Unit,
                    AggArg::Group => Aggregation::Group,
                },
                base: learner(a.base),
                propensity: learner(a.propensity),
                heterogeneous_r: a.heterogeneous_r,
                ..defaults
            };
            stages::ensure_dir(&a.out)?;
            let s = stages::run_causal(&a.features, &cfg, a.seed, &a.out)?;
            for e in &s.estimates {
                println!(
                    "{:<10} ate {:.4}  95% CI [{:.4}, {:.4}]",
                    e.method.as_str(),
                    e.ate,
                    e.ci_low,
                    e.ci_high
                );
            }
        }
        Command::Pipeline(a) => {
            let mut cfg = load_config(&a.config, &a.sets)?;
            if let Some(out) = a.out {
                cfg.output_dir = out;
            }
            let s = stages::run_pipeline(&cfg, &cfg.output_dir)?;
            let out = cfg.output_dir.join(stages::SUMMARY);
            println!(
                "pipeline complete: k = {}, cv accuracy {:.4}, {} effect estimates; summary at {}",
                s.cluster.k,
                s.train.mean_accuracy,
                s.causal.estimates.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
