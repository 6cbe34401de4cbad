//! Two-stage training: supervised pre-training on the labeled pixels, then
//! mini-batch training on the combined objective where every batch is all
//! labeled pixels plus a slice of the unlabeled pool, with pair weights read
//! from the precomputed graph.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2};

use crate::config::TrainConfig;
use crate::data::Split;
use crate::error::{GwclError, Result};
use crate::features::FeatureMatrix;
use crate::graph::{batch_submatrix, SparseGraph};
use crate::net::{activations, backward, forward, Activation, MlpParams};
use crate::objective::{ce_loss, gwcl_loss, pair_weightings, total_loss, LossTerm, PairSet, PairWeighting};
use crate::optim::{optimizers, Optimizer, OptimizerKind};
use crate::rawio::{ArrayBundle, ArrayData};
use crate::rng::GwclRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Initialized,
    Pretrained,
    Main,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Initialized => 0,
            Stage::Pretrained => 1,
            Stage::Main => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Stage::Initialized),
            1 => Ok(Stage::Pretrained),
            2 => Ok(Stage::Main),
            other => Err(GwclError::InvalidParameter(format!("unknown stage code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub l_gwcl: f64,
    pub l_ce: f64,
    pub total: f64,
    pub pair_count: usize,
}

pub struct TrainState {
    pub params: MlpParams,
    pub optimizer: Box<dyn Optimizer>,
    pub stage: Stage,
    /// Completed main-stage epochs.
    pub main_epochs_done: usize,
    pub rng: GwclRng,
    pub history: Vec<StepLog>,
    /// Mean total loss of each main-stage epoch.
    pub epoch_losses: Vec<f64>,
    pub empty_pair_batches: u64,
    pub steps: u64,
}

impl TrainState {
    /// `step,l_gwcl,l_ce,total,pair_count` lines.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,l_gwcl,l_ce,total,pair_count\n");
        for s in &self.history {
            let _ = writeln!(out, "{},{:.12e},{:.12e},{:.12e},{}", s.step, s.l_gwcl, s.l_ce, s.total, s.pair_count);
        }
        out
    }
}

/// Strategies resolved from a [`TrainConfig`].
pub struct Trainer {
    pub config: TrainConfig,
    activation: Arc<dyn Activation>,
    optimizer: Arc<dyn OptimizerKind>,
    weighting: Arc<dyn PairWeighting>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            activation: activations().get(&config.activation)?,
            optimizer: optimizers().get(&config.optimizer)?,
            weighting: pair_weightings().get(&config.similarity)?,
            config,
        })
    }

    pub fn spatial_input(&self) -> bool {
        !self.config.no_spatial_input
    }

    /// Fresh parameters and optimizer at the stage-1 learning rate.
    pub fn init_state(&self, input_dim: usize, classes: usize) -> TrainState {
        TrainState {
            params: MlpParams::init(input_dim, self.config.hidden, classes, self.activation.clone(), self.config.seed),
            optimizer: self.optimizer.build(self.config.eta1),
            stage: Stage::Initialized,
            main_epochs_done: 0,
            rng: GwclRng::with_stream(self.config.seed, 2),
            history: Vec::new(),
            epoch_losses: Vec::new(),
            empty_pair_batches: 0,
            steps: 0,
        }
    }

    fn gather(&self, features: &FeatureMatrix, nodes: &[u32]) -> Array2<f64> {
        let width = features.input_dim(self.spatial_input());
        let mut buf = vec![0.0; nodes.len() * width];
        features.gather_into(nodes, self.spatial_input(), &mut buf);
        Array2::from_shape_vec((nodes.len(), width), buf).expect("shape matches buffer")
    }

    /// Cross-entropy-only epochs over the shuffled labeled pixels.
    pub fn pretrain(&self, features: &FeatureMatrix, split: &Split, mut state: TrainState) -> Result<TrainState> {
        if self.config.skip_stage1 {
            return Ok(state);
        }
        let classes = state.params.classes();
        let mut order: Vec<(u32, usize)> = split.labeled.iter().map(|&(p, c)| (p.flat, c as usize - 1)).collect();
        if order.is_empty() {
            return Err(GwclError::InvalidParameter("no labeled pixels to pre-train on".into()));
        }
        for epoch in 0..self.config.pretrain_epochs {
            state.rng.shuffle(&mut order);
            for chunk in order.chunks(self.config.pretrain_batch) {
                let nodes: Vec<u32> = chunk.iter().map(|e| e.0).collect();
                let targets: Vec<usize> = chunk.iter().map(|e| e.1).collect();
                let x = self.gather(features, &nodes);
                let trace = forward(&state.params, x.view())?;
                let ce = ce_loss(trace.probs.view(), &targets)?;
                if !ce.value.is_finite() {
                    return Err(GwclError::Diverged(format!("pre-training epoch {epoch}: loss {}", ce.value)));
                }
                let grads = backward(&state.params, &trace, ce.grad.view())?;
                state
                    .optimizer
                    .step(&mut state.params, &grads)
                    .map_err(|e| GwclError::Diverged(format!("pre-training epoch {epoch}: {e}")))?;
                state.steps += 1;
                state.history.push(StepLog {
                    step: state.steps,
                    l_gwcl: 0.0,
                    l_ce: ce.value,
                    total: ce.value,
                    pair_count: 0,
                });
            }
            debug_assert!(classes == state.params.classes());
        }
        state.stage = Stage::Pretrained;
        Ok(state)
    }

    /// Main-stage training; see [`Trainer::train_main_with`].
    pub fn train_main(
        &self,
        features: &FeatureMatrix,
        graph: &SparseGraph,
        split: &Split,
        state: TrainState,
    ) -> Result<TrainState> {
        self.train_main_with(features, graph, split, state, &mut |_| Ok(()))
    }

    /// Runs the remaining main-stage epochs, calling `on_epoch` after each.
    /// On entry from pre-training the optimizer is reset to `eta2`.
    pub fn train_main_with(
        &self,
        features: &FeatureMatrix,
        graph: &SparseGraph,
        split: &Split,
        mut state: TrainState,
        on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
    ) -> Result<TrainState> {
        if self.config.skip_stage2 {
            return Ok(state);
        }
        if graph.nodes() != features.rows() {
            return Err(GwclError::Dimension(format!(
                "graph has {} nodes, feature matrix {} rows",
                graph.nodes(),
                features.rows()
            )));
        }
        if state.stage != Stage::Main {
            state.optimizer.reset(self.config.eta2);
            state.stage = Stage::Main;
            state.main_epochs_done = 0;
        }
        let labeled: Vec<u32> = split.labeled.iter().map(|(p, _)| p.flat).collect();
        let targets: Vec<usize> = split.labeled.iter().map(|&(_, c)| c as usize - 1).collect();
        let labeled_rows: Vec<usize> = (0..labeled.len()).collect();
        let unlabeled: Vec<u32> = split.unlabeled.iter().map(|p| p.flat).collect();
        let classes = state.params.classes();
        let objective_off = self.config.disable_gwcl && self.config.disable_ce;

        while state.main_epochs_done < self.config.main_epochs {
            let epoch = state.main_epochs_done;
            let batches = compose_epoch(&labeled, &unlabeled, &mut state.rng, self.config.main_batch);
            let mut epoch_total = 0.0;
            for nodes in &batches {
                let x = self.gather(features, nodes);
                let trace = forward(&state.params, x.view())?;
                let rows = nodes.len();
                let (gwcl, pair_count) = if self.config.disable_gwcl {
                    (LossTerm::zero(rows, classes), 0)
                } else {
                    let block = batch_submatrix(graph, nodes)?;
                    let pairs = PairSet::from_block(&block, self.weighting.as_ref());
                    if pairs.is_empty() {
                        state.empty_pair_batches += 1;
                        log::warn!("main epoch {epoch}: batch without connected pairs");
                    }
                    (gwcl_loss(trace.probs.view(), &pairs)?, pairs.len())
                };
                let (ce, lambda) = if self.config.disable_ce {
                    (LossTerm::zero(labeled.len(), classes), 0.0)
                } else {
                    let z_labeled = trace.probs.slice(s![..labeled.len(), ..]);
                    (ce_loss(z_labeled, &targets)?, self.config.lambda)
                };
                let (report, dl_dz) = total_loss(&gwcl, &ce, &labeled_rows, pair_count, lambda)?;
                if !report.total.is_finite() {
                    return Err(GwclError::Diverged(format!(
                        "main epoch {epoch}: l_gwcl={} l_ce={}",
                        report.l_gwcl, report.l_ce
                    )));
                }
                if !objective_off {
                    let grads = backward(&state.params, &trace, dl_dz.view())?;
                    state
                        .optimizer
                        .step(&mut state.params, &grads)
                        .map_err(|e| GwclError::Diverged(format!("main epoch {epoch}: {e}")))?;
                }
                state.steps += 1;
                epoch_total += report.total;
                state.history.push(StepLog {
                    step: state.steps,
                    l_gwcl: report.l_gwcl,
                    l_ce: report.l_ce,
                    total: report.total,
                    pair_count,
                });
            }
            state.epoch_losses.push(epoch_total / batches.len().max(1) as f64);
            state.main_epochs_done += 1;
            on_epoch(&state)?;
        }
        Ok(state)
    }

    /// Both stages from freshly initialised parameters.
    pub fn fit(&self, features: &FeatureMatrix, graph: &SparseGraph, split: &Split, classes: usize) -> Result<TrainState> {
        let state = self.init_state(features.input_dim(self.spatial_input()), classes);
        let state = self.pretrain(features, split, state)?;
        self.train_main(features, graph, split, state)
    }
}

/// Pre-training stage only, from fresh parameters.
pub fn pretrain(features: &FeatureMatrix, split: &Split, config: &TrainConfig, classes: usize) -> Result<TrainState> {
    let trainer = Trainer::new(config.clone())?;
    let state = trainer.init_state(features.input_dim(trainer.spatial_input()), classes);
    trainer.pretrain(features, split, state)
}

/// One epoch of main-stage batches: the unlabeled pool is permuted once and
/// cut into consecutive slices of `batch_size` (the last may be shorter);
/// every batch is all labeled indices followed by one slice.
pub fn compose_epoch(labeled: &[u32], unlabeled: &[u32], rng: &mut GwclRng, batch_size: usize) -> Vec<Vec<u32>> {
    let mut pool = unlabeled.to_vec();
    rng.shuffle(&mut pool);
    if pool.is_empty() {
        return vec![labeled.to_vec()];
    }
    pool.chunks(batch_size.max(1))
        .map(|chunk| labeled.iter().chain(chunk).copied().collect())
        .collect()
}

/// Saves parameters, optimizer moments and the RNG position.
pub fn save_checkpoint(state: &TrainState, base: &Path) -> Result<()> {
    let mut b = ArrayBundle::new("checkpoint");
    let (seed, stream, word_pos) = state.rng.snapshot();
    b.meta
        .set("input", state.params.input_dim())
        .set("hidden", state.params.hidden_dim())
        .set("classes", state.params.classes())
        .set("activation", state.params.activation.name())
        .set("optimizer", state.optimizer.name())
        .set("learning_rate", format!("{:e}", state.optimizer.learning_rate()))
        .set("stage", state.stage.code())
        .set("main_epochs_done", state.main_epochs_done)
        .set("steps", state.steps)
        .set("empty_pair_batches", state.empty_pair_batches)
        .set("rng_seed", hex::encode(seed))
        .set("rng_stream", stream)
        .set("rng_word_pos", word_pos);
    let [w1, b1, w2, b2] = state.params.tensors();
    b.push("w1", ArrayData::F64(w1.to_vec()))
        .push("b1", ArrayData::F64(b1.to_vec()))
        .push("w2", ArrayData::F64(w2.to_vec()))
        .push("b2", ArrayData::F64(b2.to_vec()));
    for (name, values) in state.optimizer.export_state() {
        b.push(&format!("opt_{name}"), ArrayData::F64(values));
    }
    b.save(base)
}

/// Restores a checkpoint written by [`save_checkpoint`]. Loss history is not persisted.
pub fn load_checkpoint(base: &Path) -> Result<TrainState> {
    let b = ArrayBundle::load(base, "checkpoint")?;
    let input: usize = b.meta.parse_key("input")?;
    let hidden: usize = b.meta.parse_key("hidden")?;
    let classes: usize = b.meta.parse_key("classes")?;
    let activation = activations().get(b.meta.require("activation")?)?;
    let mut params = MlpParams::zeros(input, hidden, classes, activation);
    for (dst, name) in params.tensors_mut().into_iter().zip(["w1", "b1", "w2", "b2"]) {
        let src = b.f64s(name)?;
        if src.len() != dst.len() {
            return Err(GwclError::Dimension(format!("checkpoint tensor {name} has {} values", src.len())));
        }
        dst.copy_from_slice(src);
    }
    let lr: f64 = b.meta.parse_key("learning_rate")?;
    let mut optimizer = optimizers().get(b.meta.require("optimizer")?)?.build(lr);
    let listed = b.meta.get("arrays").unwrap_or("").to_string();
    let mut opt_state = Vec::new();
    for name in listed.split(',').filter_map(|n| n.strip_prefix("opt_")) {
        opt_state.push((name.to_string(), b.f64s(&format!("opt_{name}"))?.to_vec()));
    }
    optimizer.import_state(&opt_state)?;
    let seed_hex = b.meta.require("rng_seed")?;
    let seed: [u8; 32] = hex::decode(seed_hex)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| GwclError::InvalidParameter(format!("bad rng seed `{seed_hex}`")))?;
    Ok(TrainState {
        params,
        optimizer,
        stage: Stage::from_code(b.meta.parse_key("stage")?)?,
        main_epochs_done: b.meta.parse_key("main_epochs_done")?,
        rng: GwclRng::restore(seed, b.meta.parse_key("rng_stream")?, b.meta.parse_key("rng_word_pos")?),
        history: Vec::new(),
        epoch_losses: Vec::new(),
        empty_pair_batches: b.meta.parse_key("empty_pair_batches")?,
        steps: b.meta.parse_key("steps")?,
    })
}
