//! End-to-end experiment driver: ingest, features, graph, repeated
//! split/train/predict/score, and output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::data::{load_cube, load_labels, make_split, HsiCube, LabelRaster, Split};
use crate::error::{GwclError, Result};
use crate::features::{assemble_features, fit_reduce, reducers, FeatureMatrix};
use crate::graph::neighbor_backends;
use crate::graph::{build_similarity, MetricSpec, SparseGraph};
use crate::metrics::{aggregate, confusion, MetricReport};
use crate::net::{argmax_rows, forward, MlpParams};
use crate::trainer::{save_checkpoint, TrainState, Trainer};

/// Environment variable naming the directory that holds benchmark rasters.
pub const DATA_DIR_VAR: &str = "GWCL_DATA_DIR";

/// `(cube, labels)` paths for a named dataset under `$GWCL_DATA_DIR`, if both exist.
/// Files are expected as `<name>.raw` and `<name>_gt.raw`, each with a `.hdr.txt` sidecar.
pub fn dataset_paths(name: &str) -> Option<(PathBuf, PathBuf)> {
    let dir = PathBuf::from(std::env::var_os(DATA_DIR_VAR)?);
    let cube = dir.join(format!("{name}.raw"));
    let labels = dir.join(format!("{name}_gt.raw"));
    let present = |p: &Path| p.exists() && crate::rawio::sidecar_paths(p).1.exists();
    (present(&cube) && present(&labels)).then_some((cube, labels))
}

/// Inputs shared by every repetition.
pub struct Prepared {
    pub labels: LabelRaster,
    pub features: FeatureMatrix,
    pub graph: SparseGraph,
    pub feature_seconds: f64,
    pub graph_seconds: f64,
}

fn hash_f64s(hasher: &mut Sha256, values: &[f64]) {
    for v in values {
        hasher.update(v.to_le_bytes());
    }
}

fn short_hex(hasher: Sha256) -> String {
    hex::encode(&hasher.finalize()[..8])
}

/// Cache key for features: cube contents, labels and reduction settings.
pub fn feature_key(cube: &HsiCube, labels: &LabelRaster, config: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(format!("{}x{}x{};", cube.height(), cube.width(), cube.bands()));
    hash_f64s(&mut h, cube.values());
    for c in labels.codes() {
        h.update(c.to_le_bytes());
    }
    h.update(format!("{};{};{}", config.reducer, config.beta, config.normalize_spectral));
    short_hex(h)
}

/// Cache key for the graph: feature contents and graph settings. The
/// neighbour backend is excluded since all backends are exact.
pub fn graph_key(features: &FeatureMatrix, config: &TrainConfig) -> String {
    let mut h = Sha256::new();
    hash_f64s(&mut h, features.data());
    h.update(format!(
        "{:e};{:e};{};{}",
        config.sigma_m, config.sigma_n, config.k, config.symmetrize
    ));
    short_hex(h)
}

/// Reduces the cube and builds the similarity graph, reusing cached
/// artefacts under `cache_dir` when their keys match.
pub fn prepare(cube: &HsiCube, labels: LabelRaster, config: &TrainConfig, cache_dir: Option<&Path>) -> Result<Prepared> {
    config.validate()?;
    labels.check_matches(cube)?;
    let labels = match cube.nodata_mask() {
        Some(mask) => labels.mask_out(mask)?,
        None => labels,
    };
    let indexer = crate::data::PixelIndexer::from_labels(&labels);
    if indexer.is_empty() {
        return Err(GwclError::InvalidParameter("label raster has no non-background pixels".into()));
    }

    let t = Instant::now();
    let feature_base = cache_dir.map(|d| d.join(format!("features_{}", feature_key(cube, &labels, config))));
    let features = match feature_base.as_deref().filter(|b| crate::rawio::with_suffix(b, ".hdr.txt").exists()) {
        Some(base) => {
            log::info!("reusing cached features {}", base.display());
            FeatureMatrix::load(base)?
        }
        None => {
            let reducer = reducers().get(&config.reducer)?;
            let projection = fit_reduce(reducer.as_ref(), cube, &indexer, config.beta)?;
            let features = assemble_features(cube, projection.as_ref(), &indexer, config.normalize_spectral)?;
            if let Some(base) = &feature_base {
                features.save(base)?;
            }
            features
        }
    };
    let feature_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let graph_base = cache_dir.map(|d| d.join(format!("graph_{}", graph_key(&features, config))));
    let graph = match graph_base.as_deref().filter(|b| crate::rawio::with_suffix(b, ".hdr.txt").exists()) {
        Some(base) => {
            log::info!("reusing cached graph {}", base.display());
            SparseGraph::load(base)?
        }
        None => {
            let metric = MetricSpec::new(features.beta(), config.sigma_m, config.sigma_n)?;
            let backend = neighbor_backends().get(&config.knn_backend)?;
            let graph = build_similarity(&features, &metric, config.k, config.symmetrize, backend.as_ref())?;
            if let Some(base) = &graph_base {
                graph.save(base)?;
            }
            graph
        }
    };
    let graph_seconds = t.elapsed().as_secs_f64();
    log::info!(
        "{} nodes, {} edges; features {feature_seconds:.2}s, graph {graph_seconds:.2}s",
        features.rows(),
        graph.nnz()
    );
    Ok(Prepared {
        labels,
        features,
        graph,
        feature_seconds,
        graph_seconds,
    })
}

/// Predicted 1-based class code for every feature row.
pub fn predict_all(params: &MlpParams, features: &FeatureMatrix, spatial: bool, batch_size: usize) -> Result<Vec<u16>> {
    let width = features.input_dim(spatial);
    if width != params.input_dim() {
        return Err(GwclError::Dimension(format!(
            "network expects {} inputs, features give {width}",
            params.input_dim()
        )));
    }
    let nodes: Vec<u32> = (0..features.rows() as u32).collect();
    let mut out = Vec::with_capacity(nodes.len());
    let mut buf = Vec::new();
    for chunk in nodes.chunks(batch_size.max(1)) {
        buf.resize(chunk.len() * width, 0.0);
        features.gather_into(chunk, spatial, &mut buf);
        let x = Array2::from_shape_vec((chunk.len(), width), std::mem::take(&mut buf)).expect("shape matches");
        let trace = forward(params, x.view())?;
        out.extend(argmax_rows(&trace.probs).into_iter().map(|k| k as u16 + 1));
        buf = x.into_raw_vec_and_offset().0;
    }
    Ok(out)
}

/// Metrics over the test pixels of `split`.
pub fn score(predictions: &[u16], split: &Split, classes: usize) -> Result<MetricReport> {
    let preds: Vec<u16> = split.test.iter().map(|(p, _)| predictions[p.flat as usize]).collect();
    let truths: Vec<u16> = split.test.iter().map(|&(_, c)| c).collect();
    MetricReport::from_confusion(&confusion(&preds, &truths, classes)?)
}

/// Result of one repetition.
pub struct RunOutcome {
    pub seed: u64,
    pub split: Split,
    pub state: TrainState,
    pub predictions: Vec<u16>,
    pub report: MetricReport,
    pub train_seconds: f64,
}

/// Split, train and score once with `config.seed`.
pub fn run_once(prepared: &Prepared, config: &TrainConfig) -> Result<RunOutcome> {
    run_once_with(prepared, config, None)
}

fn run_once_with(prepared: &Prepared, config: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<RunOutcome> {
    let indexer = prepared.features.indexer()?;
    let classes = prepared.labels.num_classes();
    let split = make_split(&prepared.labels, &indexer, config.quota, config.fallback_quota, config.seed)?;
    let trainer = Trainer::new(config.clone())?;
    let t = Instant::now();
    let state = trainer.init_state(prepared.features.input_dim(trainer.spatial_input()), classes);
    let state = trainer.pretrain(&prepared.features, &split, state)?;
    let every = config.checkpoint_every;
    let state = trainer.train_main_with(&prepared.features, &prepared.graph, &split, state, &mut |s| {
        match checkpoint_dir {
            Some(dir) if every > 0 && s.main_epochs_done % every == 0 => {
                save_checkpoint(s, &dir.join(format!("checkpoint_seed{}", config.seed)))
            }
            _ => Ok(()),
        }
    })?;
    let train_seconds = t.elapsed().as_secs_f64();
    let predictions = predict_all(&state.params, &prepared.features, trainer.spatial_input(), config.predict_batch)?;
    let report = score(&predictions, &split, classes)?;
    Ok(RunOutcome {
        seed: config.seed,
        split,
        state,
        predictions,
        report,
        train_seconds,
    })
}

/// Dense label map of predictions; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u16>,
}

impl ClassMap {
    pub fn from_predictions(features: &FeatureMatrix, predictions: &[u16]) -> Result<Self> {
        if predictions.len() != features.rows() {
            return Err(GwclError::SizeMismatch {
                expected: features.rows() as u64,
                actual: predictions.len() as u64,
            });
        }
        let (height, width) = features.raster_size();
        let mut codes = vec![0u16; height * width];
        for (&(r, c), &p) in features.coords().iter().zip(predictions) {
            codes[r as usize * width + c as usize] = p;
        }
        Ok(Self { height, width, codes })
    }
}

/// Background first, then one colour per class.
pub const PALETTE: [[u8; 3]; 21] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
];

/// Writes `map` as an RGB PNG.
pub fn render_map(map: &ClassMap, path: &Path) -> Result<()> {
    let max = map.codes.iter().copied().max().unwrap_or(0) as usize;
    if max >= PALETTE.len() {
        return Err(GwclError::InvalidParameter(format!(
            "palette has {} class colours, map uses class {max}",
            PALETTE.len() - 1
        )));
    }
    let mut img = image::RgbImage::new(map.width as u32, map.height as u32);
    for (i, &code) in map.codes.iter().enumerate() {
        let (r, c) = (i / map.width, i % map.width);
        img.put_pixel(c as u32, r as u32, image::Rgb(PALETTE[code as usize]));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| GwclError::io(parent, e))?;
    }
    img.save(path).map_err(|e| GwclError::Image(format!("{}: {e}", path.display())))
}

/// Test pixels `(node, class)` from a split CSV written by [`Split::to_csv`].
pub fn test_pixels_from_csv(text: &str) -> Result<Vec<(u32, u16)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || GwclError::InvalidParameter(format!("split csv line {}: `{line}`", n + 1));
        if fields.len() != 5 {
            return Err(bad());
        }
        if fields[4] == "test" {
            out.push((fields[0].parse().map_err(|_| bad())?, fields[3].parse().map_err(|_| bad())?));
        }
    }
    Ok(out)
}

/// A full multi-seed experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub cube_path: PathBuf,
    pub labels_path: PathBuf,
    pub config: TrainConfig,
    pub repetitions: usize,
    pub out_dir: PathBuf,
    /// Repetition `r` uses seed `base_seed + r`.
    pub base_seed: u64,
}

pub struct ExperimentOutcome {
    pub reports: Vec<(u64, MetricReport)>,
    pub failures: Vec<(u64, String)>,
    pub aggregate: Option<MetricReport>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GwclError::io(path, e))
}

/// Runs every repetition, writing per-run metrics, maps, logs and splits
/// plus `metrics_aggregate.kv`. A failed repetition is logged and skipped.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    fs::create_dir_all(&spec.out_dir).map_err(|e| GwclError::io(&spec.out_dir, e))?;
    let cube = load_cube(&spec.cube_path)?;
    let labels = load_labels(&spec.labels_path)?;
    let prepared = prepare(&cube, labels, &spec.config, Some(&spec.out_dir.join("cache")))?;
    drop(cube);
    write_text(&spec.out_dir.join("config.kv"), &spec.config.to_kv())?;
    write_text(&spec.out_dir.join("graph_summary.txt"), &prepared.graph.summary().to_string())?;

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for r in 0..spec.repetitions {
        let seed = spec.base_seed + r as u64;
        let mut config = spec.config.clone();
        config.seed = seed;
        log::info!("repetition {}/{} (seed {seed})", r + 1, spec.repetitions);
        match run_once_with(&prepared, &config, Some(&spec.out_dir)) {
            Ok(outcome) => {
                write_text(&spec.out_dir.join(format!("metrics_run{r}.kv")), &outcome.report.to_kv())?;
                write_text(&spec.out_dir.join(format!("train_log_run{r}.csv")), &outcome.state.log_csv())?;
                outcome.split.write_csv(&spec.out_dir.join(format!("split_run{r}.csv")))?;
                let map = ClassMap::from_predictions(&prepared.features, &outcome.predictions)?;
                render_map(&map, &spec.out_dir.join(format!("map_run{r}.png")))?;
                log::info!("seed {seed}: OA {:.4}", outcome.report.oa.mean);
                reports.push((seed, outcome.report));
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    let aggregate = if reports.is_empty() {
        None
    } else {
        let all: Vec<MetricReport> = reports.iter().map(|(_, r)| r.clone()).collect();
        let agg = aggregate(&all)?;
        let mut text = agg.to_kv();
        for (seed, msg) in &failures {
            let _ = writeln!(text, "failed_seed_{seed}={msg}");
        }
        write_text(&spec.out_dir.join("metrics_aggregate.kv"), &text)?;
        Some(agg)
    };
    Ok(ExperimentOutcome {
        reports,
        failures,
        aggregate,
    })
}
