//! Spatial attention: per-slot node embeddings aggregated over forward,
//! backward, and geographical neighborhoods.
//!
//! For node `i` the embedding is `W_s v_i ⊕ Σψ W_s v_j ⊕ Σφ W_s v_j ⊕ Σθ W_s v_j`.
//! Attention scores use the shared `AttentionNet(v_i, w_j v_j)` where `w_j` is
//! the neighbor's pre-weight. Because `W_a (w v) = w (W_a v)`, the score
//! matrix of a whole slot reduces to `LeakyReLU(u_i + w_ij · r_j)` with
//! `u = (V W_aᵀ) a_self` and `r = (V W_aᵀ) a_nbr`, which is what the graph
//! records.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::ddw::{neighborhoods, pre_weights, GeoMatrix, SnapshotGraph};
use crate::error::{GallatError, Result};
use crate::tensor::Matrix;

/// Default negative slope of every LeakyReLU in the model.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialParams {
    /// Shared projection, `d_e×d`.
    pub w_s: Matrix,
    /// Attention projection, `d_e×d`.
    pub w_a: Matrix,
    /// Attention vector, `2d_e×1`.
    pub a: Matrix,
}

impl SpatialParams {
    pub fn embed_dim(&self) -> usize {
        self.w_s.rows()
    }

    pub fn check(&self, d: usize) -> Result<()> {
        let de = self.embed_dim();
        for (op, got, want) in [
            ("W_s", self.w_s.shape(), (de, d)),
            ("W_a", self.w_a.shape(), (de, d)),
            ("a", self.a.shape(), (2 * de, 1)),
        ] {
            if got != want {
                return Err(GallatError::dimension(op, got, want));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialVars {
    pub w_s: Var,
    pub w_a: Var,
    pub a: Var,
}

/// Attention weights of one node in one slot, keyed by neighbor.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttentionWeights {
    pub psi: BTreeMap<usize, f64>,
    pub phi: BTreeMap<usize, f64>,
    pub theta: BTreeMap<usize, f64>,
}

/// Dense pre-weight matrices and membership masks of one slot; entry
/// `(i, j)` is nonzero only when `j` is in the corresponding set of `i`.
#[derive(Clone, Debug)]
pub struct NeighborhoodTensors {
    pub forward: Arc<Matrix>,
    pub forward_mask: Arc<Vec<bool>>,
    pub backward: Arc<Matrix>,
    pub backward_mask: Arc<Vec<bool>>,
    pub geo: Arc<Matrix>,
    pub geo_mask: Arc<Vec<bool>>,
}

/// Geographical part of [`NeighborhoodTensors`]; identical for every slot.
#[derive(Clone, Debug)]
pub struct GeoTensors {
    pub weights: Arc<Matrix>,
    pub mask: Arc<Vec<bool>>,
}

impl GeoTensors {
    pub fn build(r: &GeoMatrix, radius_km: f64) -> Result<Self> {
        let n = r.n();
        let empty = SnapshotGraph::empty(0, n);
        let mut weights = Matrix::zeros(n, n);
        let mut mask = vec![false; n * n];
        for i in 0..n {
            let sets = neighborhoods(&empty, r, i, radius_km)?;
            let pw = pre_weights(&empty, r, &sets, i, 1.0);
            for (&j, &c) in &pw.c {
                weights.set(i, j, c);
                mask[i * n + j] = true;
            }
        }
        Ok(Self { weights: Arc::new(weights), mask: Arc::new(mask) })
    }
}

impl NeighborhoodTensors {
    pub fn build(g: &SnapshotGraph, r: &GeoMatrix, geo: &GeoTensors, radius_km: f64, epsilon: f64) -> Result<Self> {
        let n = g.n();
        let mut fw = Matrix::zeros(n, n);
        let mut fm = vec![false; n * n];
        let mut bw = Matrix::zeros(n, n);
        let mut bm = vec![false; n * n];
        for i in 0..n {
            let sets = neighborhoods(g, r, i, radius_km)?;
            let pw = pre_weights(g, r, &sets, i, epsilon);
            for (&j, &a) in &pw.a {
                fw.set(i, j, a);
                fm[i * n + j] = true;
            }
            for (&j, &b) in &pw.b {
                bw.set(i, j, b);
                bm[i * n + j] = true;
            }
        }
        Ok(Self {
            forward: Arc::new(fw),
            forward_mask: Arc::new(fm),
            backward: Arc::new(bw),
            backward_mask: Arc::new(bm),
            geo: geo.weights.clone(),
            geo_mask: geo.mask.clone(),
        })
    }
}

/// Graph handles produced by [`spatial_embed_graph`].
#[derive(Clone, Copy, Debug)]
pub struct SpatialOutput {
    /// `M_t`, `n×4d_e`.
    pub embedding: Var,
    /// `n×n` attention matrices; rows of empty neighborhoods are zero.
    pub psi: Var,
    pub phi: Var,
    pub theta: Var,
}

pub fn spatial_embed_graph(
    graph: &mut Graph,
    v: Var,
    nb: &NeighborhoodTensors,
    p: SpatialVars,
    slope: f64,
) -> Result<SpatialOutput> {
    let de = graph.value(p.w_s).rows();
    let h = graph.matmul_nt(v, p.w_s)?;
    let z = graph.matmul_nt(v, p.w_a)?;
    let a_self = graph.slice_rows(p.a, 0, de)?;
    let a_nbr = graph.slice_rows(p.a, de, de)?;
    let u = graph.matmul(z, a_self)?;
    let r = graph.matmul(z, a_nbr)?;

    let attend = |graph: &mut Graph, w: &Arc<Matrix>, mask: &Arc<Vec<bool>>| -> Result<(Var, Var)> {
        let s = graph.pair_scores(u, r, Some(w.clone()))?;
        let s = graph.leaky_relu(s, slope);
        let att = graph.masked_row_softmax(s, mask.clone())?;
        let agg = graph.matmul(att, h)?;
        Ok((att, agg))
    };
    let (psi, fwd) = attend(graph, &nb.forward, &nb.forward_mask)?;
    let (phi, bwd) = attend(graph, &nb.backward, &nb.backward_mask)?;
    let (theta, geo) = attend(graph, &nb.geo, &nb.geo_mask)?;
    let embedding = graph.concat_cols(&[h, fwd, bwd, geo])?;
    Ok(SpatialOutput { embedding, psi, phi, theta })
}

/// `LeakyReLU(aᵀ(W_a v_i ⊕ W_a v_j))`.
pub fn attention_net(vi: &[f64], vj: &[f64], p: &SpatialParams, slope: f64) -> Result<f64> {
    let d = p.w_a.cols();
    if vi.len() != d || vj.len() != d {
        return Err(GallatError::dimension("attention_net", (vi.len(), vj.len()), (d, d)));
    }
    p.check(d)?;
    let de = p.embed_dim();
    let mut s = 0.0;
    for k in 0..de {
        let row = p.w_a.row(k);
        let zi: f64 = row.iter().zip(vi).map(|(w, x)| w * x).sum();
        let zj: f64 = row.iter().zip(vj).map(|(w, x)| w * x).sum();
        s += p.a.get(k, 0) * zi + p.a.get(de + k, 0) * zj;
    }
    Ok(if s > 0.0 { s } else { slope * s })
}

struct SpatialRun {
    graph: Graph,
    out: SpatialOutput,
    masks: [Arc<Vec<bool>>; 3],
}

fn run_spatial(
    v: &Matrix,
    g: &SnapshotGraph,
    r: &GeoMatrix,
    p: &SpatialParams,
    radius_km: f64,
    epsilon: f64,
    slope: f64,
) -> Result<SpatialRun> {
    let n = g.n();
    if v.rows() != n || r.n() != n {
        return Err(GallatError::dimension("spatial_embed", v.shape(), (n, r.n())));
    }
    p.check(v.cols())?;
    let geo = GeoTensors::build(r, radius_km)?;
    let nb = NeighborhoodTensors::build(g, r, &geo, radius_km, epsilon)?;
    let mut graph = Graph::new();
    let vars = SpatialVars {
        w_s: graph.constant(p.w_s.clone()),
        w_a: graph.constant(p.w_a.clone()),
        a: graph.constant(p.a.clone()),
    };
    let vv = graph.constant(v.clone());
    let out = spatial_embed_graph(&mut graph, vv, &nb, vars, slope)?;
    let masks = [nb.forward_mask, nb.backward_mask, nb.geo_mask];
    Ok(SpatialRun { graph, out, masks })
}

/// `M_t` for one slot, `n×4d_e`.
pub fn spatial_embed(
    v: &Matrix,
    g: &SnapshotGraph,
    r: &GeoMatrix,
    p: &SpatialParams,
    radius_km: f64,
    epsilon: f64,
    slope: f64,
) -> Result<Matrix> {
    let run = run_spatial(v, g, r, p, radius_km, epsilon, slope)?;
    Ok(run.graph.value(run.out.embedding).clone())
}

/// Per-node attention distributions over the three neighborhoods.
pub fn attention_weights(
    v: &Matrix,
    g: &SnapshotGraph,
    r: &GeoMatrix,
    p: &SpatialParams,
    radius_km: f64,
    epsilon: f64,
    slope: f64,
) -> Result<Vec<AttentionWeights>> {
    let run = run_spatial(v, g, r, p, radius_km, epsilon, slope)?;
    let n = g.n();
    let collect = |m: &Matrix, mask: &[bool], i: usize| -> BTreeMap<usize, f64> {
        (0..n).filter(|&j| mask[i * n + j]).map(|j| (j, m.get(i, j))).collect()
    };
    let [fm, bm, gm] = &run.masks;
    let (psi, phi, theta) = (run.graph.value(run.out.psi), run.graph.value(run.out.phi), run.graph.value(run.out.theta));
    Ok((0..n)
        .map(|i| AttentionWeights { psi: collect(psi, fm, i), phi: collect(phi, bm, i), theta: collect(theta, gm, i) })
        .collect())
}
