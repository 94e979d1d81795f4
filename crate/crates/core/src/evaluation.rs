//! Thresholded MAPE/MAE, the history-average baseline, and the
//! chronological train/validation/test split.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::ddw::SnapshotGraph;
use crate::error::{GallatError, Result};
use crate::features::Calendar;
use crate::tensor::Matrix;

pub const THRESHOLDS: [u32; 3] = [0, 3, 5];
pub const TEST_DAYS: usize = 14;
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Demand,
    Od,
}

impl Task {
    pub fn key(self) -> &'static str {
        match self {
            Task::Demand => "demand",
            Task::Od => "od",
        }
    }
}

/// `(MAPE, MAE)` over instances with `truth > k`; `None` when none qualify.
pub fn metrics(pred: &[f64], truth: &[f64], k: f64) -> Result<Option<(f64, f64)>> {
    if pred.len() != truth.len() {
        return Err(GallatError::contract(alloc::format!(
            "metrics: {} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut acc = Sums::default();
    for (&p, &y) in pred.iter().zip(truth) {
        if y > k {
            acc.add(p, y);
        }
    }
    Ok(acc.finish())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Sums {
    count: usize,
    ape: f64,
    ae: f64,
}

impl Sums {
    fn add(&mut self, p: f64, y: f64) {
        let e = (p - y).abs();
        self.count += 1;
        self.ape += e / (y + 1.0);
        self.ae += e;
    }

    fn finish(&self) -> Option<(f64, f64)> {
        (self.count > 0).then(|| (self.ape / self.count as f64, self.ae / self.count as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdMetrics {
    pub k: u32,
    pub count: usize,
    pub mape: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    pub thresholds: Vec<ThresholdMetrics>,
}

impl MetricReport {
    pub fn at(&self, k: u32) -> Option<&ThresholdMetrics> {
        self.thresholds.iter().find(|t| t.k == k)
    }

    /// `(key, value)` pairs such as `od.mape.3`; empty metrics render as `NA`.
    pub fn entries(&self) -> Vec<(String, String)> {
        let task = self.task.key();
        let fmt = |v: Option<f64>| v.map_or_else(|| String::from("NA"), |x| alloc::format!("{x}"));
        let mut out = Vec::new();
        for t in &self.thresholds {
            out.push((alloc::format!("{task}.mape.{}", t.k), fmt(t.mape)));
            out.push((alloc::format!("{task}.mae.{}", t.k), fmt(t.mae)));
            out.push((alloc::format!("{task}.count.{}", t.k), alloc::format!("{}", t.count)));
        }
        out
    }
}

/// Streams instances into all thresholds at once.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    task: Task,
    sums: [Sums; THRESHOLDS.len()],
}

impl MetricAccumulator {
    pub fn new(task: Task) -> Self {
        Self { task, sums: [Sums::default(); THRESHOLDS.len()] }
    }

    pub fn push(&mut self, pred: &[f64], truth: &[f64]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(GallatError::contract("metric accumulator: length mismatch"));
        }
        for (&p, &y) in pred.iter().zip(truth) {
            for (s, &k) in self.sums.iter_mut().zip(&THRESHOLDS) {
                if y > k as f64 {
                    s.add(p, y);
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let thresholds = THRESHOLDS
            .iter()
            .zip(&self.sums)
            .map(|(&k, s)| {
                let m = s.finish();
                ThresholdMetrics { k, count: s.count, mape: m.map(|x| x.0), mae: m.map(|x| x.1) }
            })
            .collect();
        MetricReport { task: self.task, thresholds }
    }
}

/// OD and Demand accumulators fed from whole-slot predictions.
#[derive(Clone, Debug)]
pub struct SlotEvaluator {
    pub od: MetricAccumulator,
    pub demand: MetricAccumulator,
}

impl Default for SlotEvaluator {
    fn default() -> Self {
        Self { od: MetricAccumulator::new(Task::Od), demand: MetricAccumulator::new(Task::Demand) }
    }
}

impl SlotEvaluator {
    pub fn push(&mut self, demand: &[f64], od: &Matrix, truth: &SnapshotGraph) -> Result<()> {
        let y: Vec<f64> = truth.counts().iter().map(|&c| c as f64).collect();
        self.od.push(od.data(), &y)?;
        self.demand.push(demand, &truth.out_degrees())
    }

    pub fn finish(&self) -> (MetricReport, MetricReport) {
        (self.od.finish(), self.demand.finish())
    }
}

/// Chronological slot ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    /// Target slots of `range` whose channel histories fit in the data.
    pub fn targets(range: &Range<usize>, slots_per_day: usize, history: usize) -> Vec<usize> {
        let first = slots_per_day * history + 1;
        range.clone().filter(|&t| t >= first).collect()
    }
}

/// Test is the last `test_days` days; validation is the floor of
/// `val_fraction` of the remainder, taken from its end.
pub fn split_with(n_slots: usize, slots_per_day: usize, test_days: usize, val_fraction: f64) -> Result<SplitSpec> {
    let test_len = test_days * slots_per_day;
    if slots_per_day == 0 {
        return Err(GallatError::contract("slots_per_day must be positive"));
    }
    if n_slots <= test_len {
        return Err(GallatError::InsufficientHistory(alloc::format!(
            "{n_slots} slots do not cover more than {test_days} days of {slots_per_day} slots"
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(GallatError::contract("validation fraction must lie in [0, 1)"));
    }
    let rest = n_slots - test_len;
    let val_len = libm::floor(rest as f64 * val_fraction) as usize;
    let train_end = rest - val_len;
    Ok(SplitSpec { train: 0..train_end, validation: train_end..rest, test: rest..n_slots })
}

pub fn split(n_slots: usize, slots_per_day: usize) -> Result<SplitSpec> {
    split_with(n_slots, slots_per_day, TEST_DAYS, VALIDATION_FRACTION)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HaMode {
    Demand,
    Od,
}

/// Mean of the snapshots in `span` sharing `target`'s time-of-day and
/// day-of-week; `n×1` out-degrees for Demand, `n×n` for OD.
pub fn ha_baseline(history: &[SnapshotGraph], calendar: &Calendar, span: Range<usize>, target: usize, mode: HaMode) -> Result<Matrix> {
    let tod = calendar.time_of_day(target);
    let dow = calendar.day_of_week(target);
    let end = span.end.min(history.len());
    let matching: Vec<&SnapshotGraph> = (span.start..end)
        .filter(|&s| calendar.time_of_day(s) == tod && calendar.day_of_week(s) == dow)
        .map(|s| &history[s])
        .collect();
    let Some(first) = matching.first() else {
        return Err(GallatError::InsufficientHistory(alloc::format!(
            "no slot in {}..{end} matches slot {target} (time-of-day {tod}, day-of-week {dow})",
            span.start
        )));
    };
    let n = first.n();
    let mut acc = match mode {
        HaMode::Demand => Matrix::zeros(n, 1),
        HaMode::Od => Matrix::zeros(n, n),
    };
    for g in &matching {
        match mode {
            HaMode::Demand => {
                for (a, d) in acc.data_mut().iter_mut().zip(g.out_degrees()) {
                    *a += d;
                }
            }
            HaMode::Od => {
                for (a, &c) in acc.data_mut().iter_mut().zip(g.counts()) {
                    *a += c as f64;
                }
            }
        }
    }
    Ok(acc.scale(1.0 / matching.len() as f64))
}
