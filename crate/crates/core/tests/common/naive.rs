//! Direct loop implementations of the layer formulas, written without
//! reassociation or shared helpers from the library.

use gallat_core::ddw::{GeoMatrix, SnapshotGraph};
use gallat_core::spatial::SpatialParams;
use gallat_core::temporal::ChannelParams;
use gallat_core::transfer::TransferParams;
use gallat_core::Matrix;

pub const EPS: f64 = 1e-8;
pub const SLOPE: f64 = 0.2;

fn lrelu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        SLOPE * x
    }
}

fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| (0..w.cols()).map(|c| w.get(r, c) * x[c]).sum()).collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn naive_spatial(v: &Matrix, g: &SnapshotGraph, r: &GeoMatrix, p: &SpatialParams, radius: f64) -> Matrix {
    let n = g.n();
    let de = p.w_s.rows();
    let mut out = Matrix::zeros(n, 4 * de);
    for i in 0..n {
        let vi = v.row(i);
        let out_total: f64 = (0..n).map(|j| g.get(i, j) as f64).sum();
        let in_total: f64 = (0..n).map(|j| g.get(j, i) as f64).sum();
        let forward: Vec<(usize, f64)> =
            (0..n).filter(|&j| g.get(i, j) > 0).map(|j| (j, g.get(i, j) as f64 / (out_total + EPS))).collect();
        let backward: Vec<(usize, f64)> =
            (0..n).filter(|&j| g.get(j, i) > 0).map(|j| (j, g.get(j, i) as f64 / (in_total + EPS))).collect();
        let geo_set: Vec<usize> = (0..n).filter(|&j| j != i && r.get(i, j) <= radius).collect();
        let inv_total: f64 = geo_set.iter().map(|&j| 1.0 / r.get(i, j)).sum();
        let geo: Vec<(usize, f64)> = geo_set.iter().map(|&j| (j, (1.0 / r.get(i, j)) / inv_total)).collect();

        let own = matvec(&p.w_s, vi);
        out.row_mut(i)[..de].copy_from_slice(&own);
        for (seg, set) in [forward, backward, geo].iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let zi = matvec(&p.w_a, vi);
            let scores: Vec<f64> = set
                .iter()
                .map(|&(j, w)| {
                    let weighted: Vec<f64> = v.row(j).iter().map(|x| w * x).collect();
                    let zj = matvec(&p.w_a, &weighted);
                    let mut s = 0.0;
                    for k in 0..de {
                        s += p.a.get(k, 0) * zi[k] + p.a.get(de + k, 0) * zj[k];
                    }
                    lrelu(s)
                })
                .collect();
            let att = softmax(&scores);
            for (&(j, _), a) in set.iter().zip(att) {
                let hj = matvec(&p.w_s, v.row(j));
                for k in 0..de {
                    let cur = out.get(i, (seg + 1) * de + k);
                    out.set(i, (seg + 1) * de + k, cur + a * hj[k]);
                }
            }
        }
    }
    out
}

pub fn naive_channel(v_next: &Matrix, seq: &[Matrix], p: &ChannelParams) -> Matrix {
    let n = v_next.rows();
    let w = p.w_k.rows();
    let q = v_next.matmul(&p.w_q).unwrap();
    let mut out = Matrix::zeros(n, w);
    for m in seq {
        let k = m.matmul(&p.w_k).unwrap();
        let val = m.matmul(&p.w_v).unwrap();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..w).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (w as f64).sqrt())
                .collect();
            let att = softmax(&logits);
            for j in 0..n {
                for c in 0..w {
                    out.set(i, c, out.get(i, c) + att[j] * val.get(j, c));
                }
            }
        }
    }
    out
}

pub fn naive_transfer(m: &Matrix, p: &TransferParams) -> Matrix {
    let n = m.rows();
    let w = p.w_a.rows();
    let z: Vec<Vec<f64>> = (0..n).map(|i| matvec(&p.w_a, m.row(i))).collect();
    let mut q = Matrix::zeros(n, n);
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| lrelu((0..w).map(|k| p.a.get(k, 0) * z[i][k] + p.a.get(w + k, 0) * z[j][k]).sum()))
            .collect();
        q.row_mut(i).copy_from_slice(&softmax(&scores));
    }
    q
}
