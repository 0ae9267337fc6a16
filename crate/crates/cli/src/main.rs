use clap::{Args, Parser, Subcommand, ValueEnum};
use protorec_core::ann::{ForestParams, SearchBudget};
use protorec_core::eval::synth::{self, ClusterParams};
use protorec_core::eval::{
    self, Dataset, EvalError, ExperimentConfig, IndexMode, TimingConfig, DEFAULT_FOLDS,
};
use protorec_core::metadata::{HierarchyLevel, MetadataSchema, DEFAULT_METADATA_K, DEFAULT_RHO};
use protorec_core::ontology;
use protorec_core::vector::FusionWeight;
use protorec_server::ServiceConfig;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "protorec", version, about = "Incremental prototype-based object recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Offline experiments over a dataset.
    Eval {
        #[command(subcommand)]
        experiment: Experiment,
    },
    /// Run the HTTP service.
    Serve {
        /// TOML configuration; env `PROTOREC__SECTION__KEY` overrides it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the export layout.
    Generate(GenerateArgs),
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Export directory or embedding file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    /// Neighbors voting for the top-1 class.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    l2: bool,
    #[arg(long)]
    pca_threshold: Option<f64>,
    /// `brute`, `ann`, `ann:<nodes>` or `ann:inf`.
    #[arg(long, default_value = "brute")]
    index: IndexMode,
    #[arg(long, default_value_t = protorec_core::ann::DEFAULT_TREES)]
    trees: usize,
    #[arg(long)]
    leaf: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file; `.csv` writes CSV, anything else JSON. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            folds: self.folds,
            k: self.k,
            l2: self.l2,
            pca_threshold: self.pca_threshold,
            index: self.index,
            forest: self.forest(),
            seed: self.seed,
            ..ExperimentConfig::default()
        }
    }

    fn forest(&self) -> ForestParams {
        ForestParams {
            n_trees: self.trees,
            leaf_capacity: self.leaf,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Experiment {
    /// Stratified k-fold top-1 / top-10 accuracy.
    Kfold {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rerank: bool,
        #[arg(long, default_value_t = DEFAULT_RHO)]
        rho: f64,
        /// Fuse the second channel with this weight on the first.
        #[arg(long)]
        fusion: Option<f64>,
    },
    /// Leave-one-out accuracy over growing time-ordered prefixes.
    OverTime {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        step: usize,
    },
    /// Accuracy restricted to classes with at least N samples.
    MinSamples {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 5, 10, 15, 20, 25, 30])]
        mins: Vec<usize>,
    },
    /// Query time of brute and forest search, with and without PCA.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        #[arg(long, default_value = "1000")]
        budget: SearchBudget,
        #[arg(long, default_value_t = 0.95)]
        variance: f64,
    },
    /// Accuracy and dimensionality at several PCA variance thresholds.
    PcaReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.9, 0.95, 0.99])]
        thresholds: Vec<f64>,
    },
    /// Accuracy of the fused two-channel distance across weights.
    Fusion {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Metadata-only kNN at a taxonomy level.
    Metadata {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Level::Root)]
        level: Level,
        #[arg(long, default_value_t = DEFAULT_METADATA_K)]
        neighbors: usize,
        /// JSON schema file; the built-in schema when absent.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Level {
    Root,
    Second,
    Leaf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Clusters,
    NormConfounded,
    Channels,
    Temporal,
    Pairs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value_t = Kind::Clusters)]
    kind: Kind,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Service(#[from] protorec_server::ServiceError),
    #[error(transparent)]
    Config(#[from] protorec_server::config::ConfigError),
    #[error(transparent)]
    Metadata(#[from] protorec_core::metadata::MetadataError),
    #[error(transparent)]
    Vector(#[from] protorec_core::vector::VectorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn write_report<T: Serialize>(out: Option<&Path>, report: &T, csv: impl FnOnce() -> String) -> Result<(), CliError> {
    let text = match out {
        Some(p) if p.extension().is_some_and(|e| e == "csv") => csv(),
        _ => serde_json::to_string_pretty(report)? + "\n",
    };
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run_experiment(exp: Experiment) -> Result<(), CliError> {
    match exp {
        Experiment::Kfold { common, rerank, rho, fusion } => {
            let ds = Dataset::load(&common.dataset)?;
            let cfg = ExperimentConfig {
                rerank,
                rho,
                fusion: fusion.map(FusionWeight::new).transpose()?,
                ..common.experiment()
            };
            let r = eval::kfold_accuracy(&ds, &cfg)?;
            write_report(common.out.as_deref(), &r, || r.to_csv())
        }
        Experiment::OverTime { common, step } => {
            let ds = Dataset::load(&common.dataset)?;
            let r = eval::accuracy_over_time(&ds, step, common.l2)?;
            write_report(common.out.as_deref(), &r, || r.to_csv())
        }
        Experiment::MinSamples { common, mins } => {
            let ds = Dataset::load(&common.dataset)?;
            let r = eval::min_samples_sweep(&ds, &common.experiment(), mins)?;
            write_report(common.out.as_deref(), &r, || eval::min_samples_csv(&r))
        }
        Experiment::Timing {
            common,
            queries,
            budget,
            variance,
        } => {
            let ds = Dataset::load(&common.dataset)?;
            let cfg = TimingConfig {
                queries,
                k: common.k.max(1),
                l2: common.l2,
                pca_threshold: variance,
                forest: common.forest(),
                budget,
                seed: common.seed,
                ..TimingConfig::default()
            };
            let r = eval::timing_benchmark(&ds, &cfg)?;
            write_report(common.out.as_deref(), &r, || r.to_csv())
        }
        Experiment::PcaReport { common, thresholds } => {
            let ds = Dataset::load(&common.dataset)?;
            let r = eval::pca_report(&ds, &common.experiment(), &thresholds)?;
            write_report(common.out.as_deref(), &r, || {
                let mut s = format!("threshold,components,input_dim,top1,top10\nnone,,,{:.6},{:.6}\n", r.baseline_top1, r.baseline_top10);
                for row in &r.rows {
                    s.push_str(&format!(
                        "{},{},{},{:.6},{:.6}\n",
                        row.threshold, row.components, row.input_dim, row.top1, row.top10
                    ));
                }
                s
            })
        }
        Experiment::Fusion { common, weights } => {
            let ds = Dataset::load(&common.dataset)?;
            let weights = weights.unwrap_or_else(eval::default_fusion_weights);
            let r = eval::fusion_sweep(&ds, &common.experiment(), &weights)?;
            write_report(common.out.as_deref(), &r, || {
                let mut s = String::from("w,top1,top10\n");
                for p in &r {
                    s.push_str(&format!("{},{:.6},{:.6}\n", p.w, p.top1, p.top10));
                }
                s
            })
        }
        Experiment::Metadata {
            common,
            level,
            neighbors,
            schema,
        } => {
            let ds = Dataset::load(&common.dataset)?;
            let schema = match schema {
                Some(p) => MetadataSchema::load(p)?,
                None => MetadataSchema::default(),
            };
            let tax = ds.taxonomy.clone().unwrap_or_else(ontology::bundled);
            let records: Vec<_> = ds.samples.iter().map(|s| (s.metadata.clone(), s.class.clone())).collect();
            let level = match level {
                Level::Root => HierarchyLevel::Root,
                Level::Second => HierarchyLevel::Second,
                Level::Leaf => HierarchyLevel::Leaf,
            };
            let r = eval::metadata_knn_eval(&records, &schema, &tax, level, neighbors, common.folds, common.seed)?;
            write_report(common.out.as_deref(), &r, || {
                format!(
                    "level,k,accuracy,majority_baseline,queries\n{:?},{},{:.6},{:.6},{}\n",
                    r.level, r.k, r.accuracy, r.majority_baseline, r.queries
                )
            })
        }
    }
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let per_class_total = a.classes * a.per_class;
    let ds = match a.kind {
        Kind::Clusters => synth::gaussian_clusters(&ClusterParams {
            noise: a.noise,
            ..ClusterParams::balanced(a.classes, a.per_class, a.dim, a.seed)
        }),
        Kind::NormConfounded => synth::norm_confounded(a.classes, a.per_class, a.dim, a.noise, a.seed),
        Kind::Channels => {
            let half = a.classes / 2;
            synth::complementary_channels(half, a.classes - half, a.per_class, a.dim, a.noise, a.seed)
        }
        Kind::Temporal => synth::temporal_stream(a.classes, per_class_total, a.dim, a.noise, a.noise * 2.0, a.seed),
        Kind::Pairs => synth::confusable_pairs(a.classes.div_ceil(2), a.per_class, a.dim, 0.1, a.noise, 0.8, a.seed),
    };
    ds.save(&a.out)?;
    eprintln!("wrote {} samples of {} classes to {}", ds.len(), ds.classes().len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Eval { experiment } => run_experiment(experiment),
        Command::Generate(a) => generate(a),
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(config.as_deref())?;
            let rt = tokio::runtime::Runtime::new()?;
            Ok(rt.block_on(protorec_server::serve(cfg))?)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
