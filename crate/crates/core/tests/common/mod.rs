#![allow(dead_code)]

pub mod naive;

use gallat_core::ddw::{GeoMatrix, SnapshotGraph};
use gallat_core::Matrix;
use rand::Rng;

pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Sparse random counts; roughly `density` of the cells are nonzero.
pub fn random_graph<R: Rng>(rng: &mut R, slot: usize, n: usize, density: f64) -> SnapshotGraph {
    let counts = (0..n * n)
        .map(|_| if rng.gen_bool(density) { rng.gen_range(1..6) } else { 0 })
        .collect();
    SnapshotGraph::from_counts(slot, n, counts).unwrap()
}

/// Symmetric distances in (0.5, 3) km with a zero diagonal.
pub fn random_geo<R: Rng>(rng: &mut R, n: usize) -> GeoMatrix {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.gen_range(0.5..3.0);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    GeoMatrix::from_dense(n, d).unwrap()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between `grads` and central differences of `f`
/// over every element of every input.
pub fn max_fd_error(f: &dyn Fn(&[Matrix]) -> f64, inputs: &[Matrix], grads: &[Matrix], h: f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut x = inputs.to_vec();
    for k in 0..x.len() {
        for e in 0..x[k].len() {
            let orig = x[k].data()[e];
            x[k].data_mut()[e] = orig + h;
            let up = f(&x);
            x[k].data_mut()[e] = orig - h;
            let down = f(&x);
            x[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(grads[k].data()[e], numeric, floor));
        }
    }
    worst
}
