//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::naive::{naive_channel, naive_spatial, naive_transfer, EPS, SLOPE};
use common::{random_geo, random_graph, uniform};
use gallat::exec::Threaded;
use gallat_core::autodiff::Graph;
use gallat_core::ddw::{GridSpec, SnapshotGraph};
use gallat_core::evaluation::{ha_baseline, metrics, HaMode, MetricAccumulator, SlotEvaluator, SplitSpec, Task};
use gallat_core::features::{Calendar, FeatureBuilder, FeatureConfig, FeatureStats};
use gallat_core::model::{ForwardContext, ModelDims, ModelParams};
use gallat_core::spatial::{attention_weights, spatial_embed, SpatialParams};
use gallat_core::synth::{generate, SynthConfig};
use gallat_core::temporal::{channel_attend, channel_attention_matrices, channel_sequences, ChannelParams, ChannelSpec};
use gallat_core::training::{
    attention_param_formula, count_params, evaluate_model, target_loss, Dataset, Geometry, Phase, TrainConfig,
    TrainOutcome, Trainer,
};
use gallat_core::transfer::{predict_od, transfer_probs, TransferParams};
use gallat_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Random snapshots on a small grid plus everything a forward pass needs.
struct Instance {
    snapshots: Vec<SnapshotGraph>,
    geometry: Geometry,
    features: FeatureBuilder,
    params: ModelParams,
    history: usize,
    d_max: f64,
}

impl Instance {
    fn new(rng: &mut ChaCha8Rng, rows: usize, cols: usize, l: usize, p: usize, de: usize, embeds: [usize; 3]) -> Self {
        let grid = GridSpec::new(39.90, 116.30, 39.92, 116.33, rows, cols).unwrap();
        let n = grid.n();
        let slots = l * p + 3;
        let snapshots: Vec<SnapshotGraph> = (0..slots).map(|t| random_graph(rng, t, n, 0.45)).collect();
        let cfg = FeatureConfig { node_embed_dim: embeds[0], slot_embed_dim: embeds[1], dow_embed_dim: embeds[2], slots_per_day: l };
        let features = FeatureBuilder {
            cfg,
            stats: FeatureStats::fit(rows, cols, &snapshots),
            n_rows: rows,
            n_cols: cols,
            calendar: Calendar { slots_per_day: l, first_dow: rng.gen_range(0..7) },
        };
        let mut params = ModelParams::init(ModelDims { n, embed_dim: de, features: cfg }, rng);
        // At the plain fan-in scale every attention softmax is nearly uniform and
        // the logit weights get gradients near 1e-10; 2.5x puts the logits at O(1).
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v *= 2.5;
            }
        }
        for v in params.get_mut(gallat_core::model::ParamKey::DemandB).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let d_max = snapshots.iter().flat_map(|g| g.out_degrees()).fold(1.0, f64::max);
        Self { geometry: Geometry::new(&grid, grid.default_radius_km()).unwrap(), snapshots, features, params, history: p, d_max }
    }

    fn context(&self) -> ForwardContext<'_> {
        ForwardContext {
            snapshots: &self.snapshots,
            geo: &self.geometry.distances,
            geo_tensors: &self.geometry.tensors,
            features: self.features,
            history: self.history,
            radius_km: self.geometry.radius_km,
            epsilon: EPS,
            leaky_slope: SLOPE,
            temporal_mean: false,
        }
    }
}

fn gradient_integrity() -> Outcome {
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-4;
    // Gradients smaller than this are compared in absolute terms.
    const FLOOR: f64 = 1e-6;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    // n = 6, d = 4 + 6 = 10, d_v = 2 + 6 = 8, d_e = 4, P = 2, l = 4.
    let mut inst = Instance::new(&mut rng, 2, 3, 4, 2, 4, [2, 2, 2]);
    let (fc, dims) = (inst.features.cfg, inst.params.dims);
    assert_eq!((dims.n, fc.d(), fc.d_v(), dims.embed_dim), (6, 10, 8, 4));
    let target = inst.snapshots.len() - 1;
    let weights = (0.8, 0.2);
    let (_, grads) = target_loss(&inst.context(), &inst.params, target, weights, inst.d_max, true).map_err(|e| e.to_string())?;
    let grads = grads.unwrap();
    let (mut worst, mut count, mut below_floor) = (0.0f64, 0usize, 0usize);
    for k in 0..grads.len() {
        for e in 0..grads[k].len() {
            let orig = inst.params.tensors()[k].data()[e];
            let mut eval = |x: f64| {
                inst.params.tensors_mut()[k].data_mut()[e] = x;
                let ctx = inst.context();
                target_loss(&ctx, &inst.params, target, weights, inst.d_max, false).unwrap().0
            };
            let (up, down) = (eval(orig + H), eval(orig - H));
            inst.params.tensors_mut()[k].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * H);
            let g = grads[k].data()[e];
            if g.abs().max(fd.abs()) < FLOOR {
                below_floor += 1;
            }
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(FLOOR));
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < TOL && secs < 60.0,
        format!("max rel err {worst:.2e} over {count} elements ({below_floor} below {FLOOR:e}), {secs:.1} s"),
    )
}

fn conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (rows, cols) = (rng.gen_range(1..=3), rng.gen_range(2..=3));
        let l = rng.gen_range(2..=4);
        let embeds = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
        let (p, de) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let inst = Instance::new(&mut rng, rows, cols, l, p, de, embeds);
        let d_max = rng.gen_range(1.0..500.0);
        let mut graph = Graph::new();
        let vars = inst.params.register(&mut graph);
        let out = inst.context().forward(&mut graph, &vars, inst.snapshots.len() - 1, true).map_err(|e| e.to_string())?;
        let d_hat: Vec<f64> = graph.value(out.demand).data().iter().map(|v| v * d_max).collect();
        let g_hat = predict_od(&d_hat, graph.value(out.transfer.unwrap())).map_err(|e| e.to_string())?;
        let od_var = graph.value(out.od.unwrap()).scale(d_max);
        for (i, &d) in d_hat.iter().enumerate() {
            worst = worst.max((g_hat.row(i).iter().sum::<f64>() - d).abs());
            worst = worst.max((od_var.row(i).iter().sum::<f64>() - d).abs());
        }
    }
    check(worst <= 1e-9, format!("max |sum_j g_ij - d_i| = {worst:.2e} over 100 instances"))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut worst, mut empty_sets, mut nonzero_empty) = (0.0f64, 0usize, 0usize);
    for _ in 0..100 {
        let n = rng.gen_range(1..=7);
        let (d, de) = (rng.gen_range(2..6), rng.gen_range(1..4));
        let g = random_graph(&mut rng, 0, n, 0.3);
        let r = random_geo(&mut rng, n);
        let radius = rng.gen_range(0.4..2.5);
        let v = uniform(&mut rng, n, d).scale(2.0);
        let p = SpatialParams { w_s: uniform(&mut rng, de, d), w_a: uniform(&mut rng, de, d), a: uniform(&mut rng, 2 * de, 1) };
        let weights = attention_weights(&v, &g, &r, &p, radius, EPS, SLOPE).map_err(|e| e.to_string())?;
        let m = spatial_embed(&v, &g, &r, &p, radius, EPS, SLOPE).map_err(|e| e.to_string())?;
        for (i, w) in weights.iter().enumerate() {
            for (seg, set) in [&w.psi, &w.phi, &w.theta].into_iter().enumerate() {
                if set.is_empty() {
                    empty_sets += 1;
                    if m.row(i)[(seg + 1) * de..(seg + 2) * de].iter().any(|&x| x != 0.0) {
                        nonzero_empty += 1;
                    }
                } else {
                    worst = worst.max((set.values().sum::<f64>() - 1.0).abs());
                }
            }
        }

        let (d_v, width) = (rng.gen_range(1..6), 4 * rng.gen_range(1..4));
        let vn = uniform(&mut rng, n, d_v).scale(3.0);
        let seq: Vec<Matrix> = (0..rng.gen_range(1..4)).map(|_| uniform(&mut rng, n, width).scale(3.0)).collect();
        let cp = ChannelParams { w_q: uniform(&mut rng, d_v, width), w_k: uniform(&mut rng, width, width), w_v: uniform(&mut rng, width, width) };
        for a in channel_attention_matrices(&vn, &seq, &cp).map_err(|e| e.to_string())? {
            for s in a.row_sums() {
                worst = worst.max((s - 1.0).abs());
            }
        }

        let mm = uniform(&mut rng, n, width).scale(4.0);
        let tp = TransferParams {
            w: uniform(&mut rng, width, 1),
            b: uniform(&mut rng, n, 1),
            w_a: uniform(&mut rng, width, width),
            a: uniform(&mut rng, 2 * width, 1),
        };
        let q = transfer_probs(&mm, &tp, SLOPE).map_err(|e| e.to_string())?;
        for s in q.row_sums() {
            worst = worst.max((s - 1.0).abs());
        }
    }
    check(
        worst <= 1e-12 && empty_sets > 0 && nonzero_empty == 0,
        format!("max |sum - 1| = {worst:.2e}; {empty_sets} empty neighborhoods, {nonzero_empty} with nonzero segments"),
    )
}

fn oracle_equivalence() -> Outcome {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        let n = rng.gen_range(1..=6);
        let (d, de) = (rng.gen_range(2..6), rng.gen_range(1..4));
        let g = random_graph(&mut rng, 0, n, 0.35);
        let r = random_geo(&mut rng, n);
        let radius = rng.gen_range(0.4..2.5);
        let v = uniform(&mut rng, n, d);
        let p = SpatialParams { w_s: uniform(&mut rng, de, d), w_a: uniform(&mut rng, de, d), a: uniform(&mut rng, 2 * de, 1) };
        let fast = spatial_embed(&v, &g, &r, &p, radius, EPS, SLOPE).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(fast.max_abs_diff(&naive_spatial(&v, &g, &r, &p, radius)));

        let (d_v, w, len) = (rng.gen_range(1..5), 4 * rng.gen_range(1..3), rng.gen_range(1..4));
        let vn = uniform(&mut rng, n, d_v);
        let seq: Vec<Matrix> = (0..len).map(|_| uniform(&mut rng, n, w)).collect();
        let cp = ChannelParams { w_q: uniform(&mut rng, d_v, w), w_k: uniform(&mut rng, w, w), w_v: uniform(&mut rng, w, w) };
        let fast = channel_attend(&vn, &seq, &cp, false).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(fast.max_abs_diff(&naive_channel(&vn, &seq, &cp)));

        let m = uniform(&mut rng, n, w).scale(2.0);
        let tp = TransferParams { w: uniform(&mut rng, w, 1), b: uniform(&mut rng, n, 1), w_a: uniform(&mut rng, w, w), a: uniform(&mut rng, 2 * w, 1) };
        let fast = transfer_probs(&m, &tp, SLOPE).map_err(|e| e.to_string())?;
        worst[2] = worst[2].max(fast.max_abs_diff(&naive_transfer(&m, &tp)));
    }
    check(
        worst.iter().all(|&w| w < TOL),
        format!("max diff spatial {:.1e}, channel {:.1e}, transfer {:.1e}", worst[0], worst[1], worst[2]),
    )
}

fn parameter_audit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut notes = Vec::new();
    for _ in 0..5 {
        let features = FeatureConfig {
            node_embed_dim: rng.gen_range(1..10),
            slot_embed_dim: rng.gen_range(1..10),
            dow_embed_dim: rng.gen_range(1..10),
            slots_per_day: rng.gen_range(2..48),
        };
        let dims = ModelDims { n: rng.gen_range(1..60), embed_dim: rng.gen_range(1..20), features };
        let params = ModelParams::init(dims, &mut rng);
        let b = count_params(&params);
        let stored: usize = params.tensors().iter().map(|t| t.data().len()).sum();
        let formula = attention_param_formula(dims.embed_dim, features.d(), features.d_v(), dims.n);
        if b.total() != stored || b.attention() != formula {
            return Err(format!("{dims:?}: counted {} stored {stored}, attention {} formula {formula}", b.total(), b.attention()));
        }
        notes.push(b.total().to_string());
    }
    let cfg = TrainConfig::default();
    let features = cfg.feature_config(24);
    let dims = ModelDims { n: 25, embed_dim: cfg.embed_dim, features };
    let b = count_params(&ModelParams::init(dims, &mut rng));
    let quad = 176 * cfg.embed_dim * cfg.embed_dim;
    let share = quad as f64 / b.total() as f64;
    check(
        share > 0.8,
        format!("5 configs ok (totals {}); 176d_e^2 = {quad} is {:.1}% of {} at defaults", notes.join(", "), 100.0 * share, b.total()),
    )
}

struct Fixture {
    data: Dataset,
    cfg: TrainConfig,
}

impl Fixture {
    fn new() -> Self {
        let syn = SynthConfig::fixture(0);
        let out = generate(&syn).unwrap();
        Self { data: Dataset { snapshots: out.snapshots, grid: syn.grid, calendar: syn.calendar() }, cfg: TrainConfig::default() }
    }
}

fn mape0(r: &gallat_core::evaluation::MetricReport) -> f64 {
    r.at(0).and_then(|t| t.mape).unwrap_or(f64::NAN)
}

fn end_to_end(fx: &Fixture, exec: &Threaded) -> (Outcome, Option<TrainOutcome>) {
    let start = Instant::now();
    let outcome = match Trainer::new(&fx.data, fx.cfg.clone()).and_then(|t| t.run(exec, &mut ())) {
        Ok(o) => o,
        Err(e) => return (Err(e.to_string()), None),
    };
    let l = fx.data.calendar.slots_per_day;
    let trainer = Trainer::new(&fx.data, fx.cfg.clone()).unwrap();
    let split = trainer.split.clone();
    let targets = SplitSpec::targets(&split.test, l, fx.cfg.history);
    let (od, demand) = evaluate_model(&outcome.state, &fx.data.snapshots, &targets, exec).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut ha = SlotEvaluator::default();
    let span = split.train.start..split.validation.end;
    for &t in &targets {
        let g = ha_baseline(&fx.data.snapshots, &fx.data.calendar, span.clone(), t, HaMode::Od).unwrap();
        let d = ha_baseline(&fx.data.snapshots, &fx.data.calendar, span.clone(), t, HaMode::Demand).unwrap();
        ha.push(d.data(), &g, &fx.data.snapshots[t]).unwrap();
    }
    let (ha_od, ha_demand) = ha.finish();
    let gain_od = 1.0 - mape0(&od) / mape0(&ha_od);
    let gain_demand = 1.0 - mape0(&demand) / mape0(&ha_demand);
    let detail = format!(
        "OD MAPE-0 {:.4} vs HA {:.4} ({:+.1}%), Demand MAPE-0 {:.4} vs HA {:.4} ({:+.1}%), {:.0} s",
        mape0(&od),
        mape0(&ha_od),
        100.0 * gain_od,
        mape0(&demand),
        mape0(&ha_demand),
        100.0 * gain_demand,
        secs
    );
    (check(gain_od >= 0.1 && gain_demand >= 0.1 && secs < 1800.0, detail), Some(outcome))
}

fn pretraining_benefit(fx: &Fixture, trained: Option<&TrainOutcome>, exec: &Threaded) -> Outcome {
    let with = trained.and_then(|o| o.joint_start_val_loss).ok_or("no pretrained run")?;
    let cfg = TrainConfig { pretrain_epochs: 0, ..fx.cfg.clone() };
    let t = Trainer::new(&fx.data, cfg).map_err(|e| e.to_string())?;
    let without = t.mean_loss(exec, &t.val_targets, t.weights(Phase::Joint)).map_err(|e| e.to_string())?.ok_or("no validation targets")?;
    check(
        with <= without,
        format!("joint-phase start validation loss {with:.6} after {} pretraining epochs vs {without:.6} without", fx.cfg.pretrain_epochs),
    )
}

fn scaling(fx: &Fixture, exec: &Threaded) -> Outcome {
    let mut t = Trainer::new(&fx.data, fx.cfg.clone()).map_err(|e| e.to_string())?;
    let all = t.train_targets.clone();
    let half = &all[..all.len() / 2];
    let full = &all[..2 * half.len()];
    let mut time = |targets: &[usize]| {
        (0..3)
            .map(|_| {
                let s = Instant::now();
                t.epoch(exec, targets, Phase::Joint).unwrap();
                s.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (a, b) = (time(half), time(full));
    check(b / a <= 2.5, format!("{} targets {a:.2} s, {} targets {b:.2} s, ratio {:.2}", half.len(), full.len(), b / a))
}

fn metric_units() -> Outcome {
    let unit = metrics(&[3.0], &[1.0], 0.0).map_err(|e| e.to_string())?;
    let k3 = metrics(&[0.0, 0.0, 0.0], &[1.0, 3.0, 4.0], 3.0).map_err(|e| e.to_string())?;
    let mut acc = MetricAccumulator::new(Task::Demand);
    acc.push(&[0.0, 0.0, 0.0], &[1.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
    let count = acc.finish().at(3).map(|t| t.count);
    check(
        unit == Some((1.0, 2.0)) && k3 == Some((0.8, 4.0)) && count == Some(1),
        format!("(3,1) -> {unit:?}; k=3 over y=[1,3,4] -> {k3:?} from {count:?} instance"),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_gallat");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
        }
    };
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = dir.join("synth");
    run(&["synth", "--seed", "0", "--out", &s(&data)])?;
    let csv = data.join("snapshots.csv");
    let train = |out: &Path| {
        let o = s(out);
        let c = s(&csv);
        run(&["train", "--data", &c, "--seed", "3", "--set", "pretrain_epochs=1", "--set", "epochs=2", "--no-timing", "--out", &o])
    };
    let (a, b) = (dir.join("a"), dir.join("b"));
    train(&a)?;
    train(&b)?;
    let mut same = true;
    let mut sizes = Vec::new();
    for f in ["checkpoint.bin", "train_log.csv"] {
        let (x, y) = (std::fs::read(a.join(f)).map_err(|e| e.to_string())?, std::fs::read(b.join(f)).map_err(|e| e.to_string())?);
        same &= x == y;
        sizes.push(format!("{f} {} bytes", x.len()));
    }
    check(same, format!("{} identical: {same}", sizes.join(", ")))
}

fn channel_indexing() -> Outcome {
    let (t, l, p) = (168usize, 24usize, 7usize);
    let got = channel_sequences(ChannelSpec { history: p, slots_per_day: l, current: t }).map_err(|e| e.to_string())?;
    let s1: Vec<usize> = (1..=p).map(|k| t - l * k + 1).collect();
    let s2: Vec<usize> = (1..=p).map(|k| t - l * k).collect();
    let s3: Vec<usize> = (1..=p).map(|k| t - l * k + 2).collect();
    let s4: Vec<usize> = (t - p + 1..=t).collect();
    let periodic = got[0].iter().all(|&x| x % l == (t + 1) % l);
    check(
        got == [s1, s2, s3, s4] && periodic,
        format!("S1 {:?}, S2 {:?}, S3 {:?}, S4 {:?}", got[0], got[1], got[2], got[3]),
    )
}

fn main() {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let exec = Threaded::new(threads);
    let dir = tempfile::tempdir().expect("temp dir");
    let fx = Fixture::new();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id, name, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {tag} {name}: {detail}");
        results.push((id, name, outcome));
    };
    record(1, "gradient integrity", gradient_integrity());
    record(2, "conservation identity", conservation());
    record(3, "normalization suite", normalization());
    record(4, "oracle equivalence", oracle_equivalence());
    record(5, "parameter audit", parameter_audit());
    let (e2e, trained) = end_to_end(&fx, &exec);
    record(6, "synthetic end-to-end", e2e);
    record(7, "pretraining benefit", pretraining_benefit(&fx, trained.as_ref(), &exec));
    record(8, "scaling", scaling(&fx, &exec));
    record(9, "metric unit cases", metric_units());
    record(10, "determinism", determinism(dir.path()));
    record(11, "channel indexing", channel_indexing());
    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
