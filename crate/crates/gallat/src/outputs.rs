//! CSV and text writers for predictions, rates, metrics and training logs.

use std::io::Write;

use gallat_core::evaluation::MetricReport;
use gallat_core::synth::SynthConfig;
use gallat_core::training::EpochRecord;
use gallat_core::transfer::Prediction;

use crate::error::{Error, ErrorKind, Result};

fn io_err(e: std::io::Error) -> Error {
    Error::new(ErrorKind::Io, e.to_string())
}

/// `slot,origin,dest,value` for OD entries strictly above `floor`.
pub fn write_od<W: Write>(mut w: W, slot: usize, p: &Prediction, floor: f64) -> Result<()> {
    writeln!(w, "slot,origin,dest,value").map_err(io_err)?;
    let n = p.g_hat.rows();
    for i in 0..n {
        for j in 0..n {
            let v = p.g_hat.get(i, j);
            if v > floor {
                writeln!(w, "{slot},{i},{j},{v}").map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// `slot,node,value` for every node's demand.
pub fn write_demand<W: Write>(mut w: W, slot: usize, p: &Prediction) -> Result<()> {
    writeln!(w, "slot,node,value").map_err(io_err)?;
    for (i, v) in p.d_hat.iter().enumerate() {
        writeln!(w, "{slot},{i},{v}").map_err(io_err)?;
    }
    Ok(())
}

/// The `top` largest OD flows, ties broken by `(origin, dest)`.
pub fn top_flows(p: &Prediction, top: usize) -> Vec<(usize, usize, f64)> {
    let n = p.g_hat.rows();
    let mut flows: Vec<(usize, usize, f64)> = (0..n * n).map(|k| (k / n, k % n, p.g_hat.get(k / n, k % n))).collect();
    flows.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    flows.truncate(top);
    flows
}

/// `rank,slot,origin,dest,value` with cell centres for plotting.
pub fn write_top_flows<W: Write>(
    mut w: W,
    slot: usize,
    p: &Prediction,
    top: usize,
    centre: impl Fn(usize) -> (f64, f64),
) -> Result<()> {
    writeln!(w, "rank,slot,origin,dest,value,origin_lat,origin_lon,dest_lat,dest_lon").map_err(io_err)?;
    for (rank, (i, j, v)) in top_flows(p, top).into_iter().enumerate() {
        let ((olat, olon), (dlat, dlon)) = (centre(i), centre(j));
        writeln!(w, "{},{slot},{i},{j},{v},{olat},{olon},{dlat},{dlon}", rank + 1).map_err(io_err)?;
    }
    Ok(())
}

/// Planted rates `slot_of_day,dow,origin,dest,rate` for every combination.
pub fn write_rates<W: Write>(mut w: W, cfg: &SynthConfig) -> Result<()> {
    writeln!(w, "slot_of_day,dow,origin,dest,rate").map_err(io_err)?;
    let n = cfg.grid.n();
    for tod in 0..cfg.slots_per_day {
        for dow in 0..7 {
            for i in 0..n {
                for j in 0..n {
                    writeln!(w, "{tod},{dow},{i},{j},{}", cfg.expected_rate(i, j, tod, dow)).map_err(io_err)?;
                }
            }
        }
    }
    Ok(())
}

/// `key = value` lines in report order.
pub fn metrics_text(reports: &[&MetricReport]) -> String {
    let mut s = String::new();
    for r in reports {
        for (k, v) in r.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
    }
    s
}

/// `task,threshold,count,mape,mae`; missing values are empty fields.
pub fn metrics_csv(reports: &[&MetricReport]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("task,threshold,count,mape,mae\n");
    for r in reports {
        for t in &r.thresholds {
            s.push_str(&format!("{},{},{},{},{}\n", r.task.key(), t.k, t.count, opt(t.mape), opt(t.mae)));
        }
    }
    s
}

/// `epoch,phase,train_loss,val_loss,seconds`.
pub fn train_log(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,phase,train_loss,val_loss,seconds\n");
    for r in history {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.phase.name(), r.train_loss, opt(r.val_loss), opt(r.seconds)));
    }
    s
}
