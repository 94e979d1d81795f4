mod common;

use std::sync::Arc;

use common::{max_fd_error, random_geo, random_graph, uniform};
use gallat_core::autodiff::{Graph, Var};
use gallat_core::spatial::{spatial_embed_graph, GeoTensors, NeighborhoodTensors, SpatialVars};
use gallat_core::temporal::{attend_graph, ChannelVars};
use gallat_core::transfer::{demand_graph, transfer_graph, TransferVars};
use gallat_core::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
/// Gradients below this magnitude are compared in absolute terms; central
/// differences carry roughly `1e-10` of rounding noise at `h = 1e-6`.
const FLOOR: f64 = 1e-6;

/// Value and per-input gradients of a scalar expression built by `build`.
fn eval(build: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Matrix]) -> (f64, Vec<Matrix>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(k, m)| g.param(k, m.clone())).collect();
    let root = build(&mut g, &vars);
    let value = g.value(root).get(0, 0);
    let grads = g.backward(root).unwrap();
    let per = inputs.iter().enumerate().map(|(k, m)| grads.param(k, m.shape())).collect();
    (value, per)
}

fn check(build: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Matrix], tol: f64) {
    let (_, grads) = eval(build, inputs);
    let f = |x: &[Matrix]| eval(build, x).0;
    let err = max_fd_error(&f, inputs, &grads, H, FLOOR);
    assert!(err < tol, "max relative error {err:e} >= {tol:e}");
}

#[test]
fn matmul_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [uniform(&mut rng, 5, 4), uniform(&mut rng, 4, 3)];
    check(
        &|g, v| {
            let p = g.matmul(v[0], v[1]).unwrap();
            g.sum(p)
        },
        &inputs,
        1e-7,
    );
}

#[test]
fn smooth_l1_of_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, 4, 2);
    let y = uniform(&mut rng, 3, 2).scale(3.0);
    let w = uniform(&mut rng, 3, 4);
    check(
        &|g, v| {
            let xc = g.constant(x.clone());
            let yc = g.constant(y.clone());
            let p = g.matmul(v[0], xc).unwrap();
            g.smooth_l1(p, yc).unwrap()
        },
        &[w],
        1e-6,
    );
}

#[test]
fn shared_parameter_sums_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = uniform(&mut rng, 3, 3);
    let x = uniform(&mut rng, 3, 2);
    // The same node used twice, and the same slot registered twice.
    check(
        &|g, v| {
            let xc = g.constant(x.clone());
            let a = g.matmul(v[0], xc).unwrap();
            let b = g.matmul(v[0], a).unwrap();
            let wv = g.value(v[0]).clone();
            let again = g.param(0, wv);
            let c = g.matmul(again, b).unwrap();
            let s = g.sigmoid(c);
            g.sum(s)
        },
        &[w],
        1e-6,
    );
}

#[test]
fn every_op_in_one_expression() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [uniform(&mut rng, 4, 3), uniform(&mut rng, 4, 2), uniform(&mut rng, 5, 3), uniform(&mut rng, 4, 1)];
    let weights = Arc::new(uniform(&mut rng, 4, 4));
    let mask = Arc::new((0..16).map(|k| k % 3 != 0).collect::<Vec<bool>>());
    let target = uniform(&mut rng, 4, 4);
    check(
        &|g, v| {
            let cat = g.concat_cols(&[v[0], v[1]]).unwrap();
            let head = g.slice_rows(cat, 1, 2).unwrap();
            let tab = g.gather_rows(v[2], &[4, 0, 0, 2]).unwrap();
            let tt = g.transpose(tab);
            let mix = g.matmul(v[0], tt).unwrap();
            let nt = g.matmul_nt(v[0], tab).unwrap();
            let mix = g.add(mix, nt).unwrap();
            let scaled = g.scale_rows(mix, v[3]).unwrap();
            let had = g.hadamard(scaled, mix).unwrap();
            let u = g.slice_rows(v[3], 0, 4).unwrap();
            let ps = g.pair_scores(u, v[3], Some(weights.clone())).unwrap();
            let lr = g.leaky_relu(ps, 0.2);
            let ms = g.masked_row_softmax(lr, mask.clone()).unwrap();
            let sm = g.row_softmax(had);
            let sum = g.add(ms, sm).unwrap();
            let sum = g.scalar_mul(sum, 1.7);
            let t = g.constant(target.clone());
            let l = g.smooth_l1(sum, t).unwrap();
            let hs = g.sum(head);
            g.add(l, hs).unwrap()
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn spatial_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 5;
    let snap = random_graph(&mut rng, 0, n, 0.4);
    let geo = random_geo(&mut rng, n);
    let gt = GeoTensors::build(&geo, 1.8).unwrap();
    let nb = NeighborhoodTensors::build(&snap, &geo, &gt, 1.8, 1e-8).unwrap();
    let probe = uniform(&mut rng, n, 12);
    let inputs = [uniform(&mut rng, n, 6), uniform(&mut rng, 3, 6), uniform(&mut rng, 3, 6), uniform(&mut rng, 6, 1)];
    check(
        &|g, v| {
            let p = SpatialVars { w_s: v[1], w_a: v[2], a: v[3] };
            let out = spatial_embed_graph(g, v[0], &nb, p, 0.2).unwrap();
            let c = g.constant(probe.clone());
            let h = g.hadamard(out.embedding, c).unwrap();
            g.sum(h)
        },
        &inputs,
        1e-4,
    );
}

#[test]
fn temporal_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, d_v, w) = (4, 5, 8);
    let probe = uniform(&mut rng, n, w);
    let inputs = [
        uniform(&mut rng, n, d_v),
        uniform(&mut rng, n, w),
        uniform(&mut rng, n, w),
        uniform(&mut rng, d_v, w),
        uniform(&mut rng, w, w),
        uniform(&mut rng, w, w),
    ];
    for mean in [false, true] {
        check(
            &|g, v| {
                let p = ChannelVars { w_q: v[3], w_k: v[4], w_v: v[5] };
                let out = attend_graph(g, v[0], &[v[1], v[2], v[1]], p, mean).unwrap();
                let c = g.constant(probe.clone());
                let h = g.hadamard(out.output, c).unwrap();
                g.sum(h)
            },
            &inputs,
            1e-4,
        );
    }
}

#[test]
fn transfer_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, w) = (5, 8);
    let demand = uniform(&mut rng, n, 1);
    let od = uniform(&mut rng, n, n).scale(0.3);
    let inputs = [
        uniform(&mut rng, n, w),
        uniform(&mut rng, w, 1),
        uniform(&mut rng, n, 1),
        uniform(&mut rng, w, w),
        uniform(&mut rng, 2 * w, 1),
    ];
    check(
        &|g, v| {
            let p = TransferVars { w: v[1], b: v[2], w_a: v[3], a: v[4] };
            let d = demand_graph(g, v[0], p).unwrap();
            let q = transfer_graph(g, v[0], p, 0.2).unwrap();
            let ghat = g.scale_rows(q, d).unwrap();
            let dt = g.constant(demand.clone());
            let gt = g.constant(od.clone());
            let ld = g.smooth_l1(d, dt).unwrap();
            let lo = g.smooth_l1(ghat, gt).unwrap();
            let ld = g.scalar_mul(ld, 0.8);
            let lo = g.scalar_mul(lo, 0.2);
            g.add(ld, lo).unwrap()
        },
        &inputs,
        1e-4,
    );
}
