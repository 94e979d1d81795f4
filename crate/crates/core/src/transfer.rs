//! Transferring attention: next-slot outbound demand per region, the
//! origin→destination transfer distribution, and their product, the
//! predicted OD matrix.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{GallatError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct TransferParams {
    /// Demand projection, `4d_e×1`.
    pub w: Matrix,
    /// Per-region bias, `n×1`.
    pub b: Matrix,
    /// Attention projection `W'_a`, `4d_e×4d_e`.
    pub w_a: Matrix,
    /// Attention vector `a'`, `8d_e×1` (two concatenated `4d_e` projections).
    pub a: Matrix,
}

impl TransferParams {
    pub fn check(&self, n: usize, width: usize) -> Result<()> {
        for (op, got, want) in [
            ("w", self.w.shape(), (width, 1)),
            ("b", self.b.shape(), (n, 1)),
            ("W'_a", self.w_a.shape(), (width, width)),
            ("a'", self.a.shape(), (2 * width, 1)),
        ] {
            if got != want {
                return Err(GallatError::dimension(op, got, want));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TransferVars {
    pub w: Var,
    pub b: Var,
    pub w_a: Var,
    pub a: Var,
}

/// Model output for one target slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Outbound demand on the count scale.
    pub d_hat: Vec<f64>,
    /// Transfer probabilities, rows sum to one.
    pub q: Matrix,
    /// OD demand on the count scale; row `i` sums to `d_hat[i]`.
    pub g_hat: Matrix,
    /// Sigmoid output in `(0, 1)`.
    pub d_hat_norm: Vec<f64>,
}

/// `sigmoid(M w + b)`, `n×1`.
pub fn demand_graph(graph: &mut Graph, m: Var, p: TransferVars) -> Result<Var> {
    let lin = graph.matmul(m, p.w)?;
    let lin = graph.add(lin, p.b)?;
    Ok(graph.sigmoid(lin))
}

/// Row-wise softmax of `LeakyReLU(a'ᵀ(W'_a m_i ⊕ W'_a m_j))` over all `j`, `n×n`.
pub fn transfer_graph(graph: &mut Graph, m: Var, p: TransferVars, slope: f64) -> Result<Var> {
    let width = graph.value(p.w_a).rows();
    let z = graph.matmul_nt(m, p.w_a)?;
    let a_src = graph.slice_rows(p.a, 0, width)?;
    let a_dst = graph.slice_rows(p.a, width, width)?;
    let u = graph.matmul(z, a_src)?;
    let r = graph.matmul(z, a_dst)?;
    let s = graph.pair_scores(u, r, None)?;
    let s = graph.leaky_relu(s, slope);
    Ok(graph.row_softmax(s))
}

fn constant_vars(graph: &mut Graph, p: &TransferParams) -> TransferVars {
    TransferVars {
        w: graph.constant(p.w.clone()),
        b: graph.constant(p.b.clone()),
        w_a: graph.constant(p.w_a.clone()),
        a: graph.constant(p.a.clone()),
    }
}

/// Returns `(d_hat_norm, d_hat)` with `d_hat = d_max · d_hat_norm`.
pub fn predict_demand(m: &Matrix, p: &TransferParams, d_max: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(d_max > 0.0) {
        return Err(GallatError::contract("demand normalizer must be positive"));
    }
    p.check(m.rows(), m.cols())?;
    let mut graph = Graph::new();
    let vars = constant_vars(&mut graph, p);
    let mv = graph.constant(m.clone());
    let d = demand_graph(&mut graph, mv, vars)?;
    let norm = graph.value(d).data().to_vec();
    let scaled = norm.iter().map(|v| v * d_max).collect();
    Ok((norm, scaled))
}

pub fn transfer_probs(m: &Matrix, p: &TransferParams, slope: f64) -> Result<Matrix> {
    p.check(m.rows(), m.cols())?;
    let mut graph = Graph::new();
    let vars = constant_vars(&mut graph, p);
    let mv = graph.constant(m.clone());
    let q = transfer_graph(&mut graph, mv, vars, slope)?;
    Ok(graph.value(q).clone())
}

/// `ĝ_ij = d̂_i · q_ij`.
pub fn predict_od(d_hat: &[f64], q: &Matrix) -> Result<Matrix> {
    if q.rows() != d_hat.len() {
        return Err(GallatError::dimension("predict_od", (d_hat.len(), 1), q.shape()));
    }
    let mut g = q.clone();
    for (i, d) in d_hat.iter().enumerate() {
        for v in g.row_mut(i) {
            *v *= d;
        }
    }
    Ok(g)
}

/// Assembles a full [`Prediction`] from `M'_T`.
pub fn predict(m: &Matrix, p: &TransferParams, d_max: f64, slope: f64) -> Result<Prediction> {
    let (d_hat_norm, d_hat) = predict_demand(m, p, d_max)?;
    let q = transfer_probs(m, p, slope)?;
    let g_hat = predict_od(&d_hat, &q)?;
    Ok(Prediction { d_hat, q, g_hat, d_hat_norm })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, w: usize) -> TransferParams {
        TransferParams {
            w: Matrix::from_fn(w, 1, |r, _| 0.1 * r as f64 - 0.2),
            b: Matrix::from_fn(n, 1, |r, _| 0.05 * r as f64),
            w_a: Matrix::from_fn(w, w, |r, c| 0.2 * (r as f64) - 0.1 * (c as f64)),
            a: Matrix::from_fn(2 * w, 1, |r, _| 0.3 - 0.07 * r as f64),
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let mut p = params(3, 4);
        p.w = Matrix::zeros(4, 1);
        p.b = Matrix::zeros(3, 1);
        let m = Matrix::from_fn(3, 4, |r, c| (r + c) as f64);
        let (norm, d) = predict_demand(&m, &p, 40.0).unwrap();
        assert!(norm.iter().all(|&v| v == 0.5));
        assert!(d.iter().all(|&v| v == 20.0));
    }

    #[test]
    fn demand_strictly_inside_range() {
        let p = params(4, 4);
        let m = Matrix::from_fn(4, 4, |r, c| (r as f64 - 1.5) * (c as f64 + 1.0));
        let (_, d) = predict_demand(&m, &p, 7.0).unwrap();
        assert!(d.iter().all(|&v| v > 0.0 && v < 7.0));
        assert!(predict_demand(&m, &p, 0.0).is_err());
    }

    #[test]
    fn identical_rows_uniform_transfer() {
        let p = params(5, 4);
        let m = Matrix::from_fn(5, 4, |_, c| c as f64 * 0.7 - 1.0);
        let q = transfer_probs(&m, &p, 0.2).unwrap();
        for v in q.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_region_transfers_to_itself() {
        let p = params(1, 4);
        let m = Matrix::from_fn(1, 4, |_, c| c as f64);
        assert_eq!(transfer_probs(&m, &p, 0.2).unwrap().data(), &[1.0]);
    }

    #[test]
    fn od_by_hand() {
        let q = Matrix::from_rows(&[[0.2, 0.8], [0.5, 0.5]]).unwrap();
        let g = predict_od(&[10.0, 0.0], &q).unwrap();
        assert_eq!(g.row(0), &[2.0, 8.0]);
        assert_eq!(g.row(1), &[0.0, 0.0]);
        assert!(predict_od(&[1.0], &q).is_err());
    }
}
