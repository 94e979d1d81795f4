//! Temporal attention over four channels of historical slot embeddings
//! (same time-of-day, one slot earlier, one slot later, and the most recent
//! slots), fused by a fifth attention unit.
//!
//! Each channel computes `Σ_t softmax(Q (M_t W_K)ᵀ / √(4d_e)) · M_t W_V` with
//! `Q = V_{T+1} W_Q`. The graph evaluates it as
//! `(Σ_t softmax((Q W_Kᵀ) M_tᵀ / √(4d_e)) M_t) W_V`, which is the same
//! product reassociated so the `4d_e×4d_e` projections run once per channel
//! instead of once per slot.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{GallatError, Result};
use crate::tensor::Matrix;

pub const CHANNELS: usize = 4;

/// Where the four channels read from, relative to the current slot `T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSpec {
    /// Slots per channel (`P`).
    pub history: usize,
    pub slots_per_day: usize,
    /// Current slot `T`; the prediction is for `T + 1`.
    pub current: usize,
}

/// Slot indices of the four channels, each listed for `p = 1..=P`
/// (recent channel in ascending order).
pub fn channel_sequences(spec: ChannelSpec) -> Result<[Vec<usize>; CHANNELS]> {
    let ChannelSpec { history: p, slots_per_day: l, current: t } = spec;
    if p == 0 {
        return Err(GallatError::contract("channel history length must be at least 1"));
    }
    if l < 2 {
        return Err(GallatError::contract("need at least 2 slots per day for the subsequent-slot channel"));
    }
    let reach = l * p;
    if t < reach || t + 1 < p {
        return Err(GallatError::InsufficientHistory(alloc::format!(
            "slot {t} needs {reach} earlier slots for P={p}, l={l}"
        )));
    }
    let same: Vec<usize> = (1..=p).map(|k| t + 1 - l * k).collect();
    let prior: Vec<usize> = same.iter().map(|s| s - 1).collect();
    let next: Vec<usize> = same.iter().map(|s| s + 1).collect();
    let recent: Vec<usize> = (t + 1 - p..=t).collect();
    Ok([same, prior, next, recent])
}

/// Query/key/value projections of one attention unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelParams {
    /// `d_v×4d_e`
    pub w_q: Matrix,
    /// `4d_e×4d_e`
    pub w_k: Matrix,
    /// `4d_e×4d_e`
    pub w_v: Matrix,
}

impl ChannelParams {
    pub fn check(&self, d_v: usize, width: usize) -> Result<()> {
        for (op, got, want) in [
            ("W_Q", self.w_q.shape(), (d_v, width)),
            ("W_K", self.w_k.shape(), (width, width)),
            ("W_V", self.w_v.shape(), (width, width)),
        ] {
            if got != want {
                return Err(GallatError::dimension(op, got, want));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalParams {
    pub channels: [ChannelParams; CHANNELS],
    pub fusion: ChannelParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Graph handles produced by [`attend_graph`].
#[derive(Clone, Debug)]
pub struct AttendOutput {
    pub output: Var,
    /// One row-stochastic `n×n` matrix per input.
    pub attention: Vec<Var>,
}

/// Sum of scaled dot-product attention reads over `inputs`, projected by
/// `W_V`; divided by the input count when `mean` is set.
pub fn attend_graph(graph: &mut Graph, query_features: Var, inputs: &[Var], p: ChannelVars, mean: bool) -> Result<AttendOutput> {
    if inputs.is_empty() {
        return Err(GallatError::contract("attention over an empty sequence"));
    }
    let width = graph.value(p.w_k).rows();
    let q = graph.matmul(query_features, p.w_q)?;
    let qk = graph.matmul_nt(q, p.w_k)?;
    let qk = graph.scalar_mul(qk, 1.0 / libm::sqrt(width as f64));
    let mut attention = Vec::with_capacity(inputs.len());
    let mut acc: Option<Var> = None;
    for &m in inputs {
        let logits = graph.matmul_nt(qk, m)?;
        let att = graph.row_softmax(logits);
        let read = graph.matmul(att, m)?;
        acc = Some(match acc {
            Some(a) => graph.add(a, read)?,
            None => read,
        });
        attention.push(att);
    }
    let mut output = graph.matmul(acc.expect("nonempty inputs"), p.w_v)?;
    if mean {
        output = graph.scalar_mul(output, 1.0 / inputs.len() as f64);
    }
    Ok(AttendOutput { output, attention })
}

fn constant_vars(graph: &mut Graph, p: &ChannelParams) -> ChannelVars {
    ChannelVars {
        w_q: graph.constant(p.w_q.clone()),
        w_k: graph.constant(p.w_k.clone()),
        w_v: graph.constant(p.w_v.clone()),
    }
}

fn run(v_next: &Matrix, inputs: &[&Matrix], p: &ChannelParams, mean: bool) -> Result<(Graph, AttendOutput)> {
    let n = v_next.rows();
    let width = p.w_k.rows();
    p.check(v_next.cols(), width)?;
    for m in inputs {
        if m.shape() != (n, width) {
            return Err(GallatError::dimension("temporal input", m.shape(), (n, width)));
        }
    }
    let mut graph = Graph::new();
    let vars = constant_vars(&mut graph, p);
    let q = graph.constant(v_next.clone());
    let ms: Vec<Var> = inputs.iter().map(|m| graph.constant((*m).clone())).collect();
    let out = attend_graph(&mut graph, q, &ms, vars, mean)?;
    Ok((graph, out))
}

/// `M_S` of one channel, `n×4d_e`.
pub fn channel_attend(v_next: &Matrix, seq: &[Matrix], p: &ChannelParams, mean: bool) -> Result<Matrix> {
    let refs: Vec<&Matrix> = seq.iter().collect();
    let (graph, out) = run(v_next, &refs, p, mean)?;
    Ok(graph.value(out.output).clone())
}

/// The per-slot `n×n` attention matrices of one channel.
pub fn channel_attention_matrices(v_next: &Matrix, seq: &[Matrix], p: &ChannelParams) -> Result<Vec<Matrix>> {
    let refs: Vec<&Matrix> = seq.iter().collect();
    let (graph, out) = run(v_next, &refs, p, false)?;
    Ok(out.attention.iter().map(|&a| graph.value(a).clone()).collect())
}

/// `M'_T` from the four channel outputs.
pub fn fuse_channels(v_next: &Matrix, channels: [&Matrix; CHANNELS], fusion: &ChannelParams) -> Result<Matrix> {
    let (graph, out) = run(v_next, &channels, fusion, false)?;
    Ok(graph.value(out.output).clone())
}
