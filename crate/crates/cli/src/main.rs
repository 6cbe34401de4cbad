use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gwcl_core::data::{load_cube, load_labels, load_labels_remapped, make_split, PixelIndexer};
use gwcl_core::features::{assemble_features, fit_reduce, reducers, FeatureMatrix};
use gwcl_core::graph::{build_similarity, neighbor_backends, MetricSpec, SparseGraph};
use gwcl_core::metrics::{confusion, MetricReport};
use gwcl_core::pipeline::{
    dataset_paths, predict_all, render_map, run_experiment, test_pixels_from_csv, ClassMap, ExperimentSpec,
};
use gwcl_core::rawio::write_raster_u16;
use gwcl_core::trainer::{load_checkpoint, save_checkpoint, Trainer};
use gwcl_core::TrainConfig;

#[derive(Parser)]
#[command(name = "gwcl", version, about = "Graph-weighted contrastive learning for hyperspectral image classification")]
struct Cli {
    /// Worker threads for feature assembly and neighbour search (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a cube and its label raster and print a summary.
    Ingest {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Close gaps in the class codes and write the remapped labels here.
        #[arg(long)]
        remap_out: Option<PathBuf>,
    },
    /// Fit the spectral reducer and write the feature matrix.
    Reduce {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Output base path; also writes `<out>_model`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build the K-NN similarity graph from a feature matrix.
    BuildGraph {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Split, pre-train and train one model; writes checkpoint, split and log.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on the test pixels of a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Write metrics here as key=value lines.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        batch: usize,
    },
    /// Render predictions of a checkpoint, or a label raster, as a PNG.
    RenderMap {
        #[arg(long, required_unless_present = "labels")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        features: Option<PathBuf>,
        /// Render this label raster instead of predictions.
        #[arg(long, conflicts_with = "checkpoint")]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4096)]
        batch: usize,
    },
    /// Full multi-seed experiment.
    RunExperiment {
        /// Cube raster; defaults to `$GWCL_DATA_DIR/<dataset>.raw`.
        #[arg(long)]
        cube: Option<PathBuf>,
        /// Label raster; defaults to `$GWCL_DATA_DIR/<dataset>_gt.raw`.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset (indian_pines, salinas, pavia).
    #[arg(long)]
    dataset: Option<String>,
    /// Override any config key, e.g. `--set main_epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    skip_stage1: bool,
    #[arg(long)]
    skip_stage2: bool,
    #[arg(long)]
    no_gwcl: bool,
    #[arg(long)]
    no_ce: bool,
    #[arg(long)]
    no_spatial: bool,
    #[arg(long)]
    similarity: Option<String>,
    #[arg(long)]
    knn_backend: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.dataset {
            Some(name) => TrainConfig::preset(name)?,
            None => TrainConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.merge_text(&text)?;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.apply(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.skip_stage1 |= self.skip_stage1;
        cfg.skip_stage2 |= self.skip_stage2;
        cfg.disable_gwcl |= self.no_gwcl;
        cfg.disable_ce |= self.no_ce;
        cfg.no_spatial_input |= self.no_spatial;
        if let Some(s) = &self.similarity {
            cfg.similarity = s.clone();
        }
        if let Some(b) = &self.knn_backend {
            cfg.knn_backend = b.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Ingest { cube, labels, remap_out } => ingest(&cube, &labels, remap_out.as_deref()),
        Command::Reduce { cube, labels, out, cfg } => reduce(&cube, &labels, &out, &cfg.resolve()?),
        Command::BuildGraph { features, out, cfg } => build_graph(&features, &out, &cfg.resolve()?),
        Command::Train {
            features,
            graph,
            labels,
            out,
            cfg,
        } => train(&features, &graph, &labels, &out, &cfg.resolve()?),
        Command::Evaluate {
            checkpoint,
            features,
            split,
            out,
            batch,
        } => evaluate(&checkpoint, &features, &split, out.as_deref(), batch),
        Command::RenderMap {
            checkpoint,
            features,
            labels,
            out,
            batch,
        } => render(checkpoint.as_deref(), features.as_deref(), labels.as_deref(), &out, batch),
        Command::RunExperiment {
            cube,
            labels,
            reps,
            out,
            cfg,
        } => experiment(cube, labels, reps, out, &cfg),
    }
}

fn ingest(cube: &Path, labels: &Path, remap_out: Option<&Path>) -> Result<()> {
    let cube = load_cube(cube)?;
    let labels = match remap_out {
        Some(out) => {
            let (labels, mapping) = load_labels_remapped(labels)?;
            for (from, to) in &mapping {
                println!("remap {from} -> {to}");
            }
            write_raster_u16(out, labels.height(), labels.width(), labels.codes())?;
            labels
        }
        None => load_labels(labels)?,
    };
    labels.check_matches(&cube)?;
    println!("size: {}x{}", cube.height(), cube.width());
    println!("bands: {}", cube.bands());
    if let Some(mask) = cube.nodata_mask() {
        println!("nodata pixels: {}", mask.iter().filter(|&&m| m).count());
    }
    println!("classes: {}", labels.num_classes());
    for (k, n) in labels.class_populations().iter().enumerate() {
        println!("class {}: {n}", k + 1);
    }
    Ok(())
}

fn reduce(cube: &Path, labels: &Path, out: &Path, cfg: &TrainConfig) -> Result<()> {
    let cube = load_cube(cube)?;
    let mut labels = load_labels(labels)?;
    labels.check_matches(&cube)?;
    if let Some(mask) = cube.nodata_mask() {
        labels = labels.mask_out(mask)?;
    }
    let indexer = PixelIndexer::from_labels(&labels);
    let reducer = reducers().get(&cfg.reducer)?;
    let projection = fit_reduce(reducer.as_ref(), &cube, &indexer, cfg.beta)?;
    let model_base = PathBuf::from(format!("{}_model", out.display()));
    projection.save(&model_base)?;
    let features = assemble_features(&cube, projection.as_ref(), &indexer, cfg.normalize_spectral)?;
    features.save(out)?;
    println!("{} pixels x {} features -> {}", features.rows(), features.dim(), out.display());
    Ok(())
}

fn build_graph(features: &Path, out: &Path, cfg: &TrainConfig) -> Result<()> {
    let features = FeatureMatrix::load(features)?;
    let metric = MetricSpec::new(features.beta(), cfg.sigma_m, cfg.sigma_n)?;
    let backend = neighbor_backends().get(&cfg.knn_backend)?;
    let graph = build_similarity(&features, &metric, cfg.k, cfg.symmetrize, backend.as_ref())?;
    graph.save(out)?;
    print!("{}", graph.summary());
    Ok(())
}

fn train(features: &Path, graph: &Path, labels: &Path, out: &Path, cfg: &TrainConfig) -> Result<()> {
    let features = FeatureMatrix::load(features)?;
    let graph = SparseGraph::load(graph)?;
    let labels = load_labels(labels)?;
    let indexer = features.indexer()?;
    if indexer != PixelIndexer::from_labels(&labels) {
        bail!("feature matrix does not index the non-background pixels of the label raster");
    }
    let split = make_split(&labels, &indexer, cfg.quota, cfg.fallback_quota, cfg.seed)?;
    let trainer = Trainer::new(cfg.clone())?;
    let state = trainer.fit(&features, &graph, &split, labels.num_classes())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_checkpoint(&state, &out.join("checkpoint"))?;
    split.write_csv(&out.join("split.csv"))?;
    fs::write(out.join("train_log.csv"), state.log_csv())?;
    fs::write(out.join("config.kv"), cfg.to_kv())?;
    if let Some(last) = state.history.last() {
        println!("final loss {:.6} after {} steps", last.total, last.step);
    }
    Ok(())
}

/// Predictions of a checkpoint; spatial input is inferred from its width.
fn predictions(checkpoint: &Path, features: &FeatureMatrix, batch: usize) -> Result<Vec<u16>> {
    let state = load_checkpoint(checkpoint)?;
    let spatial = state.params.input_dim() == features.input_dim(true);
    Ok(predict_all(&state.params, features, spatial, batch)?)
}

fn evaluate(checkpoint: &Path, features: &Path, split: &Path, out: Option<&Path>, batch: usize) -> Result<()> {
    let features = FeatureMatrix::load(features)?;
    let preds = predictions(checkpoint, &features, batch)?;
    let text = fs::read_to_string(split).with_context(|| format!("reading {}", split.display()))?;
    let test = test_pixels_from_csv(&text)?;
    let classes = test.iter().map(|&(_, c)| c as usize).max().unwrap_or(0);
    let mut p = Vec::with_capacity(test.len());
    for &(node, _) in &test {
        p.push(*preds.get(node as usize).context("split refers to a node outside the feature matrix")?);
    }
    let t: Vec<u16> = test.iter().map(|&(_, c)| c).collect();
    let classes = classes.max(p.iter().copied().max().unwrap_or(0) as usize);
    let report = MetricReport::from_confusion(&confusion(&p, &t, classes)?)?;
    print!("{}", report.to_text());
    if let Some(out) = out {
        fs::write(out, report.to_kv()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn render(
    checkpoint: Option<&Path>,
    features: Option<&Path>,
    labels: Option<&Path>,
    out: &Path,
    batch: usize,
) -> Result<()> {
    let map = match (checkpoint, features, labels) {
        (_, _, Some(labels)) => {
            let labels = load_labels(labels)?;
            ClassMap {
                height: labels.height(),
                width: labels.width(),
                codes: labels.codes().to_vec(),
            }
        }
        (Some(ckpt), Some(features), None) => {
            let features = FeatureMatrix::load(features)?;
            let preds = predictions(ckpt, &features, batch)?;
            ClassMap::from_predictions(&features, &preds)?
        }
        _ => bail!("render-map needs --labels, or --checkpoint with --features"),
    };
    render_map(&map, out)?;
    println!("{}x{} map -> {}", map.width, map.height, out.display());
    Ok(())
}

fn experiment(cube: Option<PathBuf>, labels: Option<PathBuf>, reps: usize, out: PathBuf, cfg: &ConfigArgs) -> Result<()> {
    let config = cfg.resolve()?;
    let (cube_path, labels_path) = match (cube, labels) {
        (Some(c), Some(l)) => (c, l),
        (None, None) => {
            let Some(name) = cfg.dataset.as_deref() else {
                bail!("give --cube and --labels, or --dataset with GWCL_DATA_DIR set");
            };
            dataset_paths(name).with_context(|| format!("dataset `{name}` not found under $GWCL_DATA_DIR"))?
        }
        _ => bail!("--cube and --labels must be given together"),
    };
    let spec = ExperimentSpec {
        cube_path,
        labels_path,
        base_seed: config.seed,
        config,
        repetitions: reps,
        out_dir: out,
    };
    let outcome = run_experiment(&spec)?;
    for (seed, msg) in &outcome.failures {
        eprintln!("seed {seed} failed: {msg}");
    }
    match outcome.aggregate {
        Some(agg) => print!("{}", agg.to_text()),
        None => bail!("every repetition failed"),
    }
    Ok(())
}
