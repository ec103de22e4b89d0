use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use vgcl_core::augment::{run_augmentation, AugmentContext, AugmentationConfig};
use vgcl_core::data::{
    leave_one_out_split, load_embeddings, load_interactions, read_augmented_edges,
    save_embeddings, write_augmented_edges, write_skip_report, Catalog, SplitDataset,
};
use vgcl_core::ensemble::{bound_rows_tsv, verify_bound, BoundSweep};
use vgcl_core::eval::{evaluate, DEFAULT_CUTOFFS};
use vgcl_core::graph::{merge_augmented, InteractionGraph};
use vgcl_core::par::with_parallelism;
use vgcl_core::rerank::{IdealOrder, RemoteBackend, RemoteConfig, RerankBackend, Simulator};
use vgcl_core::train::{train_bpr, train_votegcl_with, EpochMetrics, Pooling, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "vgcl", version, about = "Vote-augmented graph contrastive recommendation")]
struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Leave-one-out split of an interaction log.
    Split {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a vanilla or contrastive model on a split.
    Train {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Vanilla)]
        mode: Mode,
        /// Augmented-edge TSV (required for votegcl).
        #[arg(long)]
        augmented: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize interactions for low-degree users by voted reranking.
    Augment {
        #[arg(long)]
        split: Option<PathBuf>,
        /// Retrieval embeddings from `train --mode vanilla`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        quantile: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        votes: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        zero_shot: bool,
    },
    /// Score embeddings on the held-out items of a split.
    Eval {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = Target::Test)]
        on: Target,
    },
    /// Monte-Carlo check of the vote-aggregation bound.
    VerifyBound {
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        votes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,1.0")]
        theta: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 200_000)]
        gap_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Vanilla,
    Votegcl,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Validation,
    Test,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    interactions: Option<PathBuf>,
    metadata: Option<PathBuf>,
    split: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    augmented: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    train: TrainConfig,
    augment: AugmentationConfig,
    backend: Option<BackendSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum BackendSpec {
    Remote(RemoteConfig),
    Simulator(SimulatorSpec),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulatorSpec {
    theta: f64,
    #[serde(default)]
    ideal: IdealSpec,
}

#[derive(Debug, Default, Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum IdealSpec {
    #[default]
    Retrieval,
    /// Each user's validation item first.
    Validation,
    /// Each user's test item first.
    Test,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        anyhow::anyhow!("{}: invalid config at `{}`: {}", path.display(), e.path(), e.inner())
    })
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .with_context(|| format!("missing --{name} (or \"{}\" in the config)", name.replace('-', "_")))
}

fn existing(path: PathBuf) -> Result<PathBuf> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    Ok(path)
}

fn out_dir(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    let dir = required(flag, &config.out_dir, "out-dir")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    });
    if let Err(e) = with_parallelism(threads, || run(cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Split { input, out_dir: dir } => split(input, dir, config),
        Command::Train {
            split,
            mode,
            augmented,
            out_dir: dir,
            epochs,
            dim,
            layers,
            batch_size,
            learning_rate,
            lambda,
            tau,
            seed,
        } => {
            let mut tc = config.train.clone();
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = $f { tc.$f = v; })* };
            }
            set!(epochs, dim, layers, batch_size, learning_rate, lambda, tau, seed);
            train(split, mode, augmented, dir, tc, config)
        }
        Command::Augment {
            split,
            embeddings,
            metadata,
            out_dir: dir,
            quantile,
            k,
            votes,
            p,
            seed,
            zero_shot,
        } => {
            let mut ac = config.augment.clone();
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = $f { ac.$f = v; })* };
            }
            set!(quantile, k, votes, p, seed);
            if zero_shot {
                ac.few_shot = false;
            }
            augment(split, embeddings, metadata, dir, ac, config)
        }
        Command::Eval {
            split,
            embeddings,
            out_dir: dir,
            cutoffs,
            on,
        } => eval(split, embeddings, dir, cutoffs, on, config),
        Command::VerifyBound {
            k,
            votes,
            theta,
            trials,
            gap_samples,
            seed,
            out_dir: dir,
        } => {
            let rows = verify_bound(&BoundSweep {
                k,
                votes,
                thetas: theta,
                trials,
                gap_samples,
                seed,
            })?;
            let tsv = bound_rows_tsv(&rows);
            match dir {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    let path = dir.join("bound.tsv");
                    fs::write(&path, &tsv).with_context(|| format!("writing {}", path.display()))?;
                    log::info!("wrote {}", path.display());
                }
                None => print!("{tsv}"),
            }
            Ok(())
        }
    }
}

fn split(input: Option<PathBuf>, dir: Option<PathBuf>, config: RunConfig) -> Result<()> {
    let input = existing(required(input, &config.interactions, "input")?)?;
    let dir = out_dir(dir, &config)?;
    let log = load_interactions(&input)?;
    let split = leave_one_out_split(&log);
    split.save(&dir)?;
    log::info!(
        "{} train records, {} validation and {} test users -> {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        dir.display()
    );
    Ok(())
}

fn load_split(flag: Option<PathBuf>, config: &RunConfig) -> Result<(SplitDataset, InteractionGraph)> {
    let dir = existing(required(flag, &config.split, "split")?)?;
    let split = SplitDataset::load(&dir).with_context(|| format!("loading split {}", dir.display()))?;
    let graph = InteractionGraph::from_log(&split.train);
    Ok((split, graph))
}

fn train(
    split_dir: Option<PathBuf>,
    mode: Mode,
    augmented: Option<PathBuf>,
    dir: Option<PathBuf>,
    tc: TrainConfig,
    config: RunConfig,
) -> Result<()> {
    tc.validate()?;
    let augmented = augmented.or_else(|| config.augmented.clone());
    if mode == Mode::Votegcl && augmented.is_none() {
        bail!("--mode votegcl requires --augmented (or \"augmented\" in the config)");
    }
    let (split, graph) = load_split(split_dir, &config)?;
    let dir = out_dir(dir, &config)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut write_err = None;
    let mut on_epoch = |m: &EpochMetrics| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
            write_err.get_or_insert(e);
        }
    };
    let model = match mode {
        Mode::Vanilla => train_bpr(&graph, &tc, Pooling::Mean, &mut on_epoch)?,
        Mode::Votegcl => {
            let path = existing(augmented.expect("checked above"))?;
            let edges = read_augmented_edges(&path, split.ids())?;
            log::info!("merging {} augmented edges", edges.len());
            let aug = merge_augmented(&graph, &edges)?;
            train_votegcl_with(&graph, &aug, &tc, &mut on_epoch)?
        }
    };
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    save_embeddings(&model.embeddings, dir.join("embeddings.bin"))?;
    save_embeddings(&model.base, dir.join("base.bin"))?;
    write_json(&dir.join("train_config.json"), &tc)?;
    log::info!("wrote model to {}", dir.display());
    Ok(())
}

fn backend(spec: Option<BackendSpec>, split: &SplitDataset) -> Result<RerankBackend> {
    let spec = spec.context("augment needs a \"backend\" in the config")?;
    Ok(match spec {
        BackendSpec::Remote(cfg) => RerankBackend::Remote(RemoteBackend::new(cfg)?),
        BackendSpec::Simulator(sim) => {
            let ideal = match sim.ideal {
                IdealSpec::Retrieval => IdealOrder::Retrieval,
                IdealSpec::Validation => IdealOrder::Preferred(split.validation.clone().into_iter().collect()),
                IdealSpec::Test => IdealOrder::Preferred(split.test.clone().into_iter().collect::<HashMap<_, _>>()),
            };
            RerankBackend::Simulator(Simulator { theta: sim.theta, ideal })
        }
    })
}

fn augment(
    split_dir: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    metadata: Option<PathBuf>,
    dir: Option<PathBuf>,
    ac: AugmentationConfig,
    config: RunConfig,
) -> Result<()> {
    ac.validate()?;
    let (split, graph) = load_split(split_dir, &config)?;
    let emb_path = existing(required(embeddings, &config.embeddings, "embeddings")?)?;
    let meta_path = existing(required(metadata, &config.metadata, "metadata")?)?;
    let dir = out_dir(dir, &config)?;
    let retrieval = load_embeddings(&emb_path)?;
    let catalog = Catalog::load(&meta_path)?;
    let backend = backend(config.backend, &split)?;
    let ctx = AugmentContext::new(&graph, &retrieval, &split.train, &catalog)?;
    let out = run_augmentation(&ctx, &ac, &backend)?;
    write_augmented_edges(&out.edges, split.ids(), dir.join("augmented_edges.tsv"))?;
    write_skip_report(&out.skipped, split.ids(), dir.join("skipped.tsv"))?;
    log::info!(
        "{} edges for {} target users ({} skipped) -> {}",
        out.edges.len(),
        out.targets,
        out.skipped.len(),
        dir.display()
    );
    Ok(())
}

fn eval(
    split_dir: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    dir: Option<PathBuf>,
    cutoffs: Option<Vec<usize>>,
    on: Target,
    config: RunConfig,
) -> Result<()> {
    let (split, graph) = load_split(split_dir, &config)?;
    let emb_path = existing(required(embeddings, &config.embeddings, "embeddings")?)?;
    let dir = out_dir(dir, &config)?;
    let e = load_embeddings(&emb_path)?;
    let truth = match on {
        Target::Validation => &split.validation,
        Target::Test => &split.test,
    };
    let cutoffs = cutoffs.unwrap_or_else(|| DEFAULT_CUTOFFS.to_vec());
    let report = evaluate(&e, truth, &graph, &cutoffs)?;
    for (k, m) in &report.cutoffs {
        log::info!(
            "@{k}: recall {:.4} ndcg {:.4} aplt {:.4}",
            m.recall,
            m.ndcg,
            m.aplt
        );
    }
    write_json(&dir.join("eval.json"), &report)?;
    Ok(())
}
