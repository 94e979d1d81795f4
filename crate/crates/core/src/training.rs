//! Demand-task pretraining followed by joint OD + Demand training.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::ddw::{geo_matrix, GeoMatrix, GridSpec, SnapshotGraph, DEFAULT_EPSILON};
use crate::error::{GallatError, Result};
use crate::evaluation::{split_with, SlotEvaluator, SplitSpec, TEST_DAYS, VALIDATION_FRACTION};
use crate::features::{Calendar, FeatureBuilder, FeatureConfig, FeatureStats};
use crate::model::{ForwardContext, Layer, ModelDims, ModelParams, ParamKey};
use crate::optim::{AdamConfig, AdamState};
use crate::spatial::{GeoTensors, DEFAULT_LEAKY_SLOPE};
use crate::tensor::Matrix;
use crate::transfer::{predict_od, Prediction};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Target slots per optimizer step.
    pub batch_size: usize,
    /// Joint-phase epochs.
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// `d_e`.
    pub embed_dim: usize,
    /// `P`, slots per temporal channel.
    pub history: usize,
    pub eta_d: f64,
    pub eta_o: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Geographic radius `L`; defaults to the grid's cell-diagonal rule.
    pub radius_km: Option<f64>,
    pub epsilon: f64,
    pub leaky_slope: f64,
    /// Divide each channel's sum over its `P` slots by `P`.
    pub temporal_mean: bool,
    pub node_embed_dim: usize,
    pub slot_embed_dim: usize,
    pub dow_embed_dim: usize,
    pub test_days: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            epochs: 200,
            pretrain_epochs: 50,
            embed_dim: 16,
            history: 7,
            eta_d: 0.8,
            eta_o: 0.2,
            adam: AdamConfig::default(),
            seed: 0,
            radius_km: None,
            epsilon: DEFAULT_EPSILON,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            temporal_mean: false,
            node_embed_dim: 8,
            slot_embed_dim: 8,
            dow_embed_dim: 8,
            test_days: TEST_DAYS,
            val_fraction: VALIDATION_FRACTION,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GallatError::contract(String::from(m)));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.eta_d >= 0.0 && self.eta_o >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.embed_dim == 0 || self.history == 0 {
            return bad("embed_dim and history must be positive");
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("invalid Adam hyperparameters");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if let Some(r) = self.radius_km {
            if !(r > 0.0) {
                return bad("radius must be positive");
            }
        }
        Ok(())
    }

    pub fn feature_config(&self, slots_per_day: usize) -> FeatureConfig {
        FeatureConfig {
            node_embed_dim: self.node_embed_dim,
            slot_embed_dim: self.slot_embed_dim,
            dow_embed_dim: self.dow_embed_dim,
            slots_per_day,
        }
    }
}

/// A snapshot sequence plus the geometry and calendar it lives on.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub snapshots: Vec<SnapshotGraph>,
    pub grid: GridSpec,
    pub calendar: Calendar,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let n = self.grid.n();
        for (i, g) in self.snapshots.iter().enumerate() {
            if g.slot != i {
                return Err(GallatError::contract(alloc::format!("snapshot {i} is labelled slot {}", g.slot)));
            }
            if g.n() != n {
                return Err(GallatError::dimension("snapshot", (g.n(), g.n()), (n, n)));
            }
        }
        if self.calendar.slots_per_day == 0 || self.calendar.first_dow >= 7 {
            return Err(GallatError::contract("invalid calendar"));
        }
        Ok(())
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume prediction or training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: TrainConfig,
    pub grid: GridSpec,
    pub calendar: Calendar,
    pub stats: FeatureStats,
    pub d_max: f64,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Epochs completed across both phases.
    pub epoch: u64,
    pub rng: RngState,
}

impl ModelState {
    pub fn dims(&self) -> ModelDims {
        self.params.dims
    }

    pub fn features(&self) -> FeatureBuilder {
        FeatureBuilder {
            cfg: self.params.dims.features,
            stats: self.stats,
            n_rows: self.grid.n_rows,
            n_cols: self.grid.n_cols,
            calendar: self.calendar,
        }
    }

    pub fn radius_km(&self) -> f64 {
        self.config.radius_km.unwrap_or_else(|| self.grid.default_radius_km())
    }

    /// Precomputes the static geometry used by every forward pass.
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(&self.grid, self.radius_km())
    }

    pub fn context<'a>(&self, snapshots: &'a [SnapshotGraph], geo: &'a Geometry) -> ForwardContext<'a> {
        ForwardContext {
            snapshots,
            geo: &geo.distances,
            geo_tensors: &geo.tensors,
            features: self.features(),
            history: self.config.history,
            radius_km: geo.radius_km,
            epsilon: self.config.epsilon,
            leaky_slope: self.config.leaky_slope,
            temporal_mean: self.config.temporal_mean,
        }
    }

    /// Predicts slot `target` from `snapshots[..target]`.
    pub fn predict(&self, snapshots: &[SnapshotGraph], geo: &Geometry, target: usize) -> Result<Prediction> {
        let ctx = self.context(snapshots, geo);
        let mut graph = Graph::new();
        let vars = self.params.register(&mut graph);
        let out = ctx.forward(&mut graph, &vars, target, true)?;
        let d_hat_norm = graph.value(out.demand).data().to_vec();
        let d_hat: Vec<f64> = d_hat_norm.iter().map(|v| v * self.d_max).collect();
        let q = graph.value(out.transfer.expect("transfer requested")).clone();
        let g_hat = predict_od(&d_hat, &q)?;
        Ok(Prediction { d_hat, q, g_hat, d_hat_norm })
    }
}

/// Distances and geographic neighborhoods of a grid.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub distances: GeoMatrix,
    pub tensors: GeoTensors,
    pub radius_km: f64,
}

impl Geometry {
    pub fn new(grid: &GridSpec, radius_km: f64) -> Result<Self> {
        let distances = geo_matrix(grid);
        let tensors = GeoTensors::build(&distances, radius_km)?;
        Ok(Self { distances, tensors, radius_km })
    }
}

/// Runs independent per-target jobs; results must come back in job order.
pub trait Executor {
    fn map<T, F>(&self, jobs: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync;
}

/// Runs jobs one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, jobs: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        (0..jobs).map(f).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based, counted across both phases.
    pub epoch: u64,
    pub phase: Phase,
    pub train_loss: f64,
    /// `None` when the validation span has no usable targets.
    pub val_loss: Option<f64>,
    pub seconds: Option<f64>,
}

/// Hooks for progress reporting and timing; the core has no clock.
pub trait TrainObserver {
    /// Monotonic seconds, if a clock is available.
    fn clock(&mut self) -> Option<f64> {
        None
    }

    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation state of the joint phase, or the final state when
    /// that phase recorded no validation loss.
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<u64>,
    /// Validation loss under the joint weights before the first joint epoch.
    pub joint_start_val_loss: Option<f64>,
}

/// `η_d·L_d + η_o·L_o` on plain values.
pub fn loss(pred: &Prediction, truth_d: &[f64], truth_g: &Matrix, eta_d: f64, eta_o: f64, d_max: f64) -> Result<f64> {
    let n = pred.d_hat_norm.len();
    if truth_d.len() != n {
        return Err(GallatError::dimension("loss demand", (truth_d.len(), 1), (n, 1)));
    }
    if truth_g.shape() != pred.g_hat.shape() {
        return Err(GallatError::dimension("loss od", truth_g.shape(), pred.g_hat.shape()));
    }
    let d_pred = Matrix::column(pred.d_hat_norm.clone());
    let d_true = Matrix::column(truth_d.iter().map(|v| v / d_max).collect());
    let l_d = crate::autodiff::smooth_l1(&d_pred, &d_true)?;
    let l_o = crate::autodiff::smooth_l1(&pred.g_hat.scale(1.0 / d_max), &truth_g.scale(1.0 / d_max))?;
    Ok(eta_d * l_d + eta_o * l_o)
}

/// Loss of one target slot and, optionally, the gradient of every parameter.
pub fn target_loss(
    ctx: &ForwardContext<'_>,
    params: &ModelParams,
    target: usize,
    weights: (f64, f64),
    d_max: f64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Matrix>>)> {
    let (eta_d, eta_o) = weights;
    let truth = ctx
        .snapshots
        .get(target)
        .ok_or_else(|| GallatError::contract(alloc::format!("no ground truth for slot {target}")))?;
    let mut graph = Graph::new();
    let vars = params.register(&mut graph);
    let out = ctx.forward(&mut graph, &vars, target, eta_o > 0.0)?;
    let d_true = graph.constant(Matrix::column(truth.out_degrees().iter().map(|v| v / d_max).collect()));
    let l_d = graph.smooth_l1(out.demand, d_true)?;
    let mut root = graph.scalar_mul(l_d, eta_d);
    if let Some(od) = out.od {
        let n = truth.n();
        let g_true = Matrix::new(n, n, truth.counts().iter().map(|&c| c as f64 / d_max).collect())?;
        let g_true = graph.constant(g_true);
        let l_o = graph.smooth_l1(od, g_true)?;
        let l_o = graph.scalar_mul(l_o, eta_o);
        root = graph.add(root, l_o)?;
    }
    let value = graph.value(root).get(0, 0);
    if !with_grad {
        return Ok((value, None));
    }
    let grads = graph.backward(root)?;
    let mut acc = params.zeros_like();
    grads.accumulate_into(&mut acc, 1.0);
    Ok((value, Some(acc)))
}

/// Owns the model state while it is being fitted to a dataset.
#[derive(Debug)]
pub struct Trainer<'a> {
    data: &'a Dataset,
    pub state: ModelState,
    pub split: SplitSpec,
    pub train_targets: Vec<usize>,
    pub val_targets: Vec<usize>,
    geometry: Geometry,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    /// Fits feature statistics and `D_max` on the training span and
    /// initializes parameters from `cfg.seed`.
    pub fn new(data: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let l = data.calendar.slots_per_day;
        let split = split_with(data.snapshots.len(), l, cfg.test_days, cfg.val_fraction)?;
        let train_targets = SplitSpec::targets(&split.train, l, cfg.history);
        let val_targets = SplitSpec::targets(&split.validation, l, cfg.history);
        if train_targets.is_empty() {
            return Err(GallatError::InsufficientHistory(alloc::format!(
                "training span {:?} has no slot with {} slots of history",
                split.train,
                l * cfg.history + 1
            )));
        }
        let train_span = &data.snapshots[split.train.clone()];
        let stats = FeatureStats::fit(data.grid.n_rows, data.grid.n_cols, train_span);
        let d_max = train_span.iter().flat_map(|g| g.out_degrees()).fold(0.0, f64::max);
        let d_max = if d_max > 0.0 { d_max } else { 1.0 };
        let features = cfg.feature_config(l);
        features.validate()?;
        let dims = ModelDims { n: data.grid.n(), embed_dim: cfg.embed_dim, features };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ModelParams::init(dims, &mut rng);
        // Start the demand head at the mean training demand instead of D_max / 2.
        let (sum, cells) = train_span.iter().flat_map(|g| g.out_degrees()).fold((0.0, 0usize), |(s, c), d| (s + d, c + 1));
        let mean = (sum / (cells.max(1) as f64 * d_max)).clamp(1e-3, 1.0 - 1e-3);
        params.get_mut(ParamKey::DemandB).data_mut().fill(libm::log(mean / (1.0 - mean)));
        let adam = AdamState::new(params.tensors());
        let state = ModelState {
            config: cfg,
            grid: data.grid,
            calendar: data.calendar,
            stats,
            d_max,
            params,
            adam,
            epoch: 0,
            rng: RngState::capture(&rng),
        };
        let geometry = state.geometry()?;
        Ok(Self { data, state, split, train_targets, val_targets, geometry, rng })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn weights(&self, phase: Phase) -> (f64, f64) {
        match phase {
            Phase::Pretrain => (1.0, 0.0),
            Phase::Joint => (self.state.config.eta_d, self.state.config.eta_o),
        }
    }

    /// One shuffled pass over `targets`; returns the mean per-target loss.
    pub fn epoch<E: Executor>(&mut self, exec: &E, targets: &[usize], phase: Phase) -> Result<f64> {
        let mut order = targets.to_vec();
        order.shuffle(&mut self.rng);
        let weights = self.weights(phase);
        let batch_size = self.state.config.batch_size;
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let ctx = self.state.context(&self.data.snapshots, &self.geometry);
            let params = &self.state.params;
            let d_max = self.state.d_max;
            let results = exec.map(batch.len(), |k| target_loss(&ctx, params, batch[k], weights, d_max, true));
            let mut grad = params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (l, g) = r?;
                total += l;
                for (a, b) in grad.iter_mut().zip(g.expect("gradient requested")) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += scale * y;
                    }
                }
            }
            let cfg = self.state.config.adam;
            self.state.adam.step(&cfg, self.state.params.tensors_mut(), &grad)?;
        }
        self.state.epoch += 1;
        self.state.rng = RngState::capture(&self.rng);
        Ok(total / order.len().max(1) as f64)
    }

    /// Mean loss over `targets` without updating anything.
    pub fn mean_loss<E: Executor>(&self, exec: &E, targets: &[usize], weights: (f64, f64)) -> Result<Option<f64>> {
        if targets.is_empty() {
            return Ok(None);
        }
        let ctx = self.state.context(&self.data.snapshots, &self.geometry);
        let params = &self.state.params;
        let d_max = self.state.d_max;
        let results = exec.map(targets.len(), |k| target_loss(&ctx, params, targets[k], weights, d_max, false));
        let mut total = 0.0;
        for r in results {
            total += r?.0;
        }
        Ok(Some(total / targets.len() as f64))
    }

    /// Both phases with best-validation retention in the joint phase.
    pub fn run<E: Executor, O: TrainObserver>(mut self, exec: &E, observer: &mut O) -> Result<TrainOutcome> {
        let mut history = Vec::new();
        let mut best: Option<(f64, ModelState)> = None;
        let mut joint_start_val_loss = None;
        let plan = [(Phase::Pretrain, self.state.config.pretrain_epochs), (Phase::Joint, self.state.config.epochs)];
        let train_targets = core::mem::take(&mut self.train_targets);
        for (phase, epochs) in plan {
            if phase == Phase::Joint && epochs > 0 {
                joint_start_val_loss = self.mean_loss(exec, &self.val_targets, self.weights(Phase::Joint))?;
            }
            for _ in 0..epochs {
                let start = observer.clock();
                let train_loss = self.epoch(exec, &train_targets, phase)?;
                let val_loss = self.mean_loss(exec, &self.val_targets, self.weights(phase))?;
                let seconds = match (start, observer.clock()) {
                    (Some(a), Some(b)) => Some(b - a),
                    _ => None,
                };
                let record = EpochRecord { epoch: self.state.epoch, phase, train_loss, val_loss, seconds };
                observer.on_epoch(&record);
                history.push(record);
                if let (Phase::Joint, Some(v)) = (phase, val_loss) {
                    if best.as_ref().map_or(true, |(b, _)| v < *b) {
                        best = Some((v, self.state.clone()));
                    }
                }
            }
        }
        self.train_targets = train_targets;
        let best_epoch = best.as_ref().map(|(_, s)| s.epoch);
        let state = best.map_or(self.state, |(_, s)| s);
        Ok(TrainOutcome { state, history, best_epoch, joint_start_val_loss })
    }
}

/// Trains on `data` from scratch.
pub fn train<E: Executor, O: TrainObserver>(data: &Dataset, cfg: TrainConfig, exec: &E, observer: &mut O) -> Result<TrainOutcome> {
    Trainer::new(data, cfg)?.run(exec, observer)
}

/// OD and Demand reports of `state` over `targets`.
pub fn evaluate_model<E: Executor>(
    state: &ModelState,
    snapshots: &[SnapshotGraph],
    targets: &[usize],
    exec: &E,
) -> Result<(crate::evaluation::MetricReport, crate::evaluation::MetricReport)> {
    let geo = state.geometry()?;
    let preds = exec.map(targets.len(), |k| state.predict(snapshots, &geo, targets[k]));
    let mut eval = SlotEvaluator::default();
    for (p, &t) in preds.into_iter().zip(targets) {
        let p = p?;
        eval.push(&p.d_hat, &p.g_hat, &snapshots[t])?;
    }
    Ok(eval.finish())
}

/// Element counts per layer and per tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub tensors: Vec<(String, usize)>,
    pub embedding: usize,
    pub spatial: usize,
    pub temporal: usize,
    pub transfer: usize,
}

impl ParamBreakdown {
    /// Spatial + temporal + transfer; embedding tables excluded.
    pub fn attention(&self) -> usize {
        self.spatial + self.temporal + self.transfer
    }

    pub fn total(&self) -> usize {
        self.attention() + self.embedding
    }
}

pub fn count_params(params: &ModelParams) -> ParamBreakdown {
    let mut b = ParamBreakdown { tensors: Vec::new(), embedding: 0, spatial: 0, temporal: 0, transfer: 0 };
    for key in ParamKey::all() {
        let len = params.get(key).len();
        b.tensors.push((key.name(), len));
        *match key.layer() {
            Layer::Embedding => &mut b.embedding,
            Layer::Spatial => &mut b.spatial,
            Layer::Temporal => &mut b.temporal,
            Layer::Transfer => &mut b.transfer,
        } += len;
    }
    b
}

/// Closed-form attention-layer size: `176d_e² + 20d_e·d_v + 2d·d_e + 14d_e + n`.
pub fn attention_param_formula(d_e: usize, d: usize, d_v: usize, n: usize) -> usize {
    176 * d_e * d_e + 20 * d_e * d_v + 2 * d * d_e + 14 * d_e + n
}
