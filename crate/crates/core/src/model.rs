//! Parameter storage and the end-to-end forward pass for one target slot.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::ddw::{GeoMatrix, SnapshotGraph};
use crate::error::{GallatError, Result};
use crate::features::{EmbeddingTables, FeatureBuilder, FeatureConfig, TableVars};
use crate::spatial::{spatial_embed_graph, GeoTensors, NeighborhoodTensors, SpatialParams, SpatialVars};
use crate::tensor::Matrix;
use crate::temporal::{attend_graph, channel_sequences, ChannelParams, ChannelSpec, ChannelVars, TemporalParams, CHANNELS};
use crate::transfer::{demand_graph, transfer_graph, TransferParams, TransferVars};

/// Sizes that fix every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub n: usize,
    /// `d_e`; spatial embeddings are `4d_e` wide.
    pub embed_dim: usize,
    pub features: FeatureConfig,
}

impl ModelDims {
    pub fn width(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Layer {
    Embedding,
    Spatial,
    Temporal,
    Transfer,
}

/// Every learnable tensor, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKey {
    NodeTable,
    SlotTable,
    DowTable,
    SpatialWs,
    SpatialWa,
    SpatialA,
    ChannelQ(usize),
    ChannelK(usize),
    ChannelV(usize),
    FusionQ,
    FusionK,
    FusionV,
    DemandW,
    DemandB,
    TransferWa,
    TransferA,
}

pub const PARAM_COUNT: usize = 25;

impl ParamKey {
    pub fn all() -> [ParamKey; PARAM_COUNT] {
        use ParamKey::*;
        [
            NodeTable,
            SlotTable,
            DowTable,
            SpatialWs,
            SpatialWa,
            SpatialA,
            ChannelQ(0),
            ChannelK(0),
            ChannelV(0),
            ChannelQ(1),
            ChannelK(1),
            ChannelV(1),
            ChannelQ(2),
            ChannelK(2),
            ChannelV(2),
            ChannelQ(3),
            ChannelK(3),
            ChannelV(3),
            FusionQ,
            FusionK,
            FusionV,
            DemandW,
            DemandB,
            TransferWa,
            TransferA,
        ]
    }

    pub fn index(self) -> usize {
        use ParamKey::*;
        match self {
            NodeTable => 0,
            SlotTable => 1,
            DowTable => 2,
            SpatialWs => 3,
            SpatialWa => 4,
            SpatialA => 5,
            ChannelQ(c) => 6 + 3 * c,
            ChannelK(c) => 7 + 3 * c,
            ChannelV(c) => 8 + 3 * c,
            FusionQ => 18,
            FusionK => 19,
            FusionV => 20,
            DemandW => 21,
            DemandB => 22,
            TransferWa => 23,
            TransferA => 24,
        }
    }

    pub fn name(self) -> alloc::string::String {
        use alloc::format;
        use ParamKey::*;
        match self {
            NodeTable => "embedding.node".into(),
            SlotTable => "embedding.slot".into(),
            DowTable => "embedding.dow".into(),
            SpatialWs => "spatial.w_s".into(),
            SpatialWa => "spatial.w_a".into(),
            SpatialA => "spatial.a".into(),
            ChannelQ(c) => format!("temporal.s{}.w_q", c + 1),
            ChannelK(c) => format!("temporal.s{}.w_k", c + 1),
            ChannelV(c) => format!("temporal.s{}.w_v", c + 1),
            FusionQ => "temporal.fusion.w_q".into(),
            FusionK => "temporal.fusion.w_k".into(),
            FusionV => "temporal.fusion.w_v".into(),
            DemandW => "transfer.w".into(),
            DemandB => "transfer.b".into(),
            TransferWa => "transfer.w_a".into(),
            TransferA => "transfer.a".into(),
        }
    }

    pub fn layer(self) -> Layer {
        use ParamKey::*;
        match self {
            NodeTable | SlotTable | DowTable => Layer::Embedding,
            SpatialWs | SpatialWa | SpatialA => Layer::Spatial,
            ChannelQ(_) | ChannelK(_) | ChannelV(_) | FusionQ | FusionK | FusionV => Layer::Temporal,
            DemandW | DemandB | TransferWa | TransferA => Layer::Transfer,
        }
    }

    pub fn shape(self, dims: &ModelDims) -> (usize, usize) {
        use ParamKey::*;
        let f = &dims.features;
        let (de, w) = (dims.embed_dim, dims.width());
        match self {
            NodeTable => (dims.n, f.node_embed_dim),
            SlotTable => (f.slots_per_day, f.slot_embed_dim),
            DowTable => (7, f.dow_embed_dim),
            SpatialWs | SpatialWa => (de, f.d()),
            SpatialA => (2 * de, 1),
            ChannelQ(_) | FusionQ => (f.d_v(), w),
            ChannelK(_) | ChannelV(_) | FusionK | FusionV | TransferWa => (w, w),
            DemandW => (w, 1),
            DemandB => (dims.n, 1),
            TransferA => (2 * w, 1),
        }
    }

    /// Half-width of the uniform initializer; `None` means zero-initialized.
    fn init_bound(self, dims: &ModelDims) -> Option<f64> {
        use ParamKey::*;
        let f = &dims.features;
        let fan_in = match self {
            NodeTable | SlotTable | DowTable => return Some(0.1),
            DemandB => return None,
            SpatialWs | SpatialWa => f.d(),
            SpatialA => 2 * dims.embed_dim,
            ChannelQ(_) | FusionQ => f.d_v(),
            ChannelK(_) | ChannelV(_) | FusionK | FusionV | TransferWa | DemandW => dims.width(),
            TransferA => 2 * dims.width(),
        };
        Some(libm::sqrt(1.0 / fan_in as f64))
    }
}

/// All learnable tensors of the model, indexed by [`ParamKey::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    tensors: Vec<Matrix>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let tensors = ParamKey::all()
            .iter()
            .map(|&k| {
                let (r, c) = k.shape(&dims);
                match k.init_bound(&dims) {
                    Some(b) => Matrix::from_fn(r, c, |_, _| rng.gen_range(-b..=b)),
                    None => Matrix::zeros(r, c),
                }
            })
            .collect();
        Self { dims, tensors }
    }

    pub fn from_tensors(dims: ModelDims, tensors: Vec<Matrix>) -> Result<Self> {
        if tensors.len() != PARAM_COUNT {
            return Err(GallatError::contract(alloc::format!(
                "expected {PARAM_COUNT} parameter tensors, got {}",
                tensors.len()
            )));
        }
        for (k, t) in ParamKey::all().iter().zip(&tensors) {
            if t.shape() != k.shape(&dims) {
                return Err(GallatError::dimension("parameter", t.shape(), k.shape(&dims)));
            }
        }
        Ok(Self { dims, tensors })
    }

    pub fn get(&self, key: ParamKey) -> &Matrix {
        &self.tensors[key.index()]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Matrix {
        &mut self.tensors[key.index()]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    /// Zero tensors with the same shapes, e.g. for gradient accumulation.
    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }

    pub fn tables(&self) -> EmbeddingTables {
        EmbeddingTables {
            node: self.get(ParamKey::NodeTable).clone(),
            slot: self.get(ParamKey::SlotTable).clone(),
            dow: self.get(ParamKey::DowTable).clone(),
        }
    }

    pub fn spatial(&self) -> SpatialParams {
        SpatialParams {
            w_s: self.get(ParamKey::SpatialWs).clone(),
            w_a: self.get(ParamKey::SpatialWa).clone(),
            a: self.get(ParamKey::SpatialA).clone(),
        }
    }

    pub fn temporal(&self) -> TemporalParams {
        let ch = |c| ChannelParams {
            w_q: self.get(ParamKey::ChannelQ(c)).clone(),
            w_k: self.get(ParamKey::ChannelK(c)).clone(),
            w_v: self.get(ParamKey::ChannelV(c)).clone(),
        };
        TemporalParams {
            channels: [ch(0), ch(1), ch(2), ch(3)],
            fusion: ChannelParams {
                w_q: self.get(ParamKey::FusionQ).clone(),
                w_k: self.get(ParamKey::FusionK).clone(),
                w_v: self.get(ParamKey::FusionV).clone(),
            },
        }
    }

    pub fn transfer(&self) -> TransferParams {
        TransferParams {
            w: self.get(ParamKey::DemandW).clone(),
            b: self.get(ParamKey::DemandB).clone(),
            w_a: self.get(ParamKey::TransferWa).clone(),
            a: self.get(ParamKey::TransferA).clone(),
        }
    }

    /// Adds every tensor to `graph` as a parameter leaf.
    pub fn register(&self, graph: &mut Graph) -> ModelVars {
        let mut p = |k: ParamKey| graph.param(k.index(), self.get(k).clone());
        let tables = TableVars { node: p(ParamKey::NodeTable), slot: p(ParamKey::SlotTable), dow: p(ParamKey::DowTable) };
        let spatial = SpatialVars { w_s: p(ParamKey::SpatialWs), w_a: p(ParamKey::SpatialWa), a: p(ParamKey::SpatialA) };
        let mut channels = [ChannelVars { w_q: tables.node, w_k: tables.node, w_v: tables.node }; CHANNELS];
        for (c, ch) in channels.iter_mut().enumerate() {
            *ch = ChannelVars { w_q: p(ParamKey::ChannelQ(c)), w_k: p(ParamKey::ChannelK(c)), w_v: p(ParamKey::ChannelV(c)) };
        }
        let fusion = ChannelVars { w_q: p(ParamKey::FusionQ), w_k: p(ParamKey::FusionK), w_v: p(ParamKey::FusionV) };
        let transfer = TransferVars {
            w: p(ParamKey::DemandW),
            b: p(ParamKey::DemandB),
            w_a: p(ParamKey::TransferWa),
            a: p(ParamKey::TransferA),
        };
        ModelVars { tables, spatial, channels, fusion, transfer }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub tables: TableVars,
    pub spatial: SpatialVars,
    pub channels: [ChannelVars; CHANNELS],
    pub fusion: ChannelVars,
    pub transfer: TransferVars,
}

/// Read-only inputs shared by every forward pass over one dataset.
#[derive(Clone, Debug)]
pub struct ForwardContext<'a> {
    pub snapshots: &'a [SnapshotGraph],
    pub geo: &'a GeoMatrix,
    pub geo_tensors: &'a GeoTensors,
    pub features: FeatureBuilder,
    pub history: usize,
    pub radius_km: f64,
    pub epsilon: f64,
    pub leaky_slope: f64,
    pub temporal_mean: bool,
}

/// Output nodes for one target slot.
#[derive(Clone, Copy, Debug)]
pub struct TargetVars {
    /// `d̂ / D_max`, `n×1`.
    pub demand: Var,
    /// Transfer probabilities, `n×n`; absent in demand-only passes.
    pub transfer: Option<Var>,
    /// `Ĝ / D_max`, `n×n`.
    pub od: Option<Var>,
    /// `M'_T`.
    pub representation: Var,
}

impl ForwardContext<'_> {
    /// Records the forward pass predicting slot `target` from slots `< target`.
    pub fn forward(&self, graph: &mut Graph, vars: &ModelVars, target: usize, with_transfer: bool) -> Result<TargetVars> {
        if target == 0 || target > self.snapshots.len() {
            return Err(GallatError::contract(alloc::format!(
                "target slot {target} outside 1..={}",
                self.snapshots.len()
            )));
        }
        let spec = ChannelSpec { history: self.history, slots_per_day: self.features.cfg.slots_per_day, current: target - 1 };
        let seqs = channel_sequences(spec)?;

        let mut embedded: BTreeMap<usize, Var> = BTreeMap::new();
        let mut channel_outputs = [vars.tables.node; CHANNELS];
        let v_next = self.features.target_features(graph, vars.tables, target)?;
        for (c, seq) in seqs.iter().enumerate() {
            let mut inputs = Vec::with_capacity(seq.len());
            for &s in seq {
                let m = match embedded.get(&s) {
                    Some(&m) => m,
                    None => {
                        let m = self.embed_slot(graph, vars, s)?;
                        embedded.insert(s, m);
                        m
                    }
                };
                inputs.push(m);
            }
            channel_outputs[c] = attend_graph(graph, v_next, &inputs, vars.channels[c], self.temporal_mean)?.output;
        }
        let fused = attend_graph(graph, v_next, &channel_outputs, vars.fusion, false)?.output;
        let demand = demand_graph(graph, fused, vars.transfer)?;
        let (transfer, od) = if with_transfer {
            let q = transfer_graph(graph, fused, vars.transfer, self.leaky_slope)?;
            let od = graph.scale_rows(q, demand)?;
            (Some(q), Some(od))
        } else {
            (None, None)
        };
        Ok(TargetVars { demand, transfer, od, representation: fused })
    }

    fn embed_slot(&self, graph: &mut Graph, vars: &ModelVars, slot: usize) -> Result<Var> {
        let g = &self.snapshots[slot];
        let v = self.features.history_features(graph, vars.tables, g)?;
        let nb = NeighborhoodTensors::build(g, self.geo, self.geo_tensors, self.radius_km, self.epsilon)?;
        Ok(spatial_embed_graph(graph, v, &nb, vars.spatial, self.leaky_slope)?.embedding)
    }
}
