//! Subcommands. Each one writes only inside its `--out` directory and
//! finishes by writing a run manifest there.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gallat_core::ddw::{GridSpec, TimeSpan};
use gallat_core::evaluation::{ha_baseline, split_with, HaMode, SlotEvaluator, SplitSpec};
use gallat_core::synth::{default_roles, generate, RateTable, SynthConfig};
use gallat_core::training::{count_params, evaluate_model, train, Dataset, EpochRecord, ModelState, TrainConfig, TrainObserver};

use crate::error::{Error, Result};
use crate::exec::Threaded;
use crate::manifest::{self, RunManifest};
use crate::trips::{self, IngestOptions};
use crate::{checkpoint, config, dataset, outputs};

pub const SNAPSHOTS: &str = "snapshots.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "gallat", version, about = "Origin-destination demand forecasting with spatiotemporal attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bin a trip CSV into hourly (or other) snapshot graphs.
    Ingest(IngestArgs),
    /// Generate a synthetic city with planted commuting patterns.
    Synth(SynthArgs),
    /// Fit a model and write a checkpoint plus loss log.
    Train(TrainArgs),
    /// Predict one slot's demand and OD matrix.
    Predict(PredictArgs),
    /// Score a checkpoint on the test span.
    Evaluate(EvaluateArgs),
    /// Break a checkpoint's parameter count down by layer.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub trips: PathBuf,
    /// `min_lat,min_lon,max_lat,max_lon`.
    #[arg(long, allow_hyphen_values = true)]
    pub bbox: String,
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    #[arg(long, default_value_t = 60)]
    pub slot_minutes: i64,
    /// Local time offset such as `+08:00`.
    #[arg(long, default_value = "+00:00", allow_hyphen_values = true)]
    pub utc_offset: String,
    /// First local day, `YYYY-MM-DD`.
    #[arg(long, requires = "end")]
    pub start: Option<String>,
    /// Day after the last local day, `YYYY-MM-DD`.
    #[arg(long, requires = "start")]
    pub end: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 42)]
    pub days: usize,
    #[arg(long, default_value_t = 5)]
    pub rows: usize,
    #[arg(long, default_value_t = 5)]
    pub cols: usize,
    #[arg(long, default_value_t = 24)]
    pub slots_per_day: usize,
    /// Weekday of the first day, Monday = 0.
    #[arg(long, default_value_t = 0)]
    pub first_dow: usize,
    /// Multiplier on every planted rate.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Standard deviation of the log activity level.
    #[arg(long, default_value_t = 0.5)]
    pub volatility: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` file; the shipped defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Leave the `seconds` column of the loss log empty.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Target slot; may equal the number of slots in the data.
    #[arg(long)]
    pub slot: usize,
    /// OD entries at or below this value are omitted.
    #[arg(long, default_value_t = 0.0)]
    pub floor: f64,
    #[arg(long, default_value_t = 20)]
    pub top: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Ha,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let (out, mut m) = match cli.command {
        Command::Ingest(a) => (a.out.clone(), ingest(a)?),
        Command::Synth(a) => (a.out.clone(), synth(a)?),
        Command::Train(a) => (a.out.clone(), train_cmd(a)?),
        Command::Predict(a) => (a.out.clone(), predict(a)?),
        Command::Evaluate(a) => (a.out.clone(), evaluate(a)?),
        Command::Params(a) => (a.out.clone(), params(a)?),
    };
    m.seconds = start.elapsed().as_secs_f64();
    m.write(&out)?;
    Ok(())
}

fn manifest(command: &str, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> RunManifest {
    RunManifest {
        command: command.into(),
        config: None,
        seed: None,
        inputs,
        outputs,
        version: manifest::version(),
        seconds: 0.0,
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn parse_bbox(s: &str) -> Result<[f64; 4]> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad_bbox(s))?;
    v.try_into().map_err(|_| bad_bbox(s))
}

fn bad_bbox(s: &str) -> Error {
    Error::usage(format!("bad --bbox {s:?}; expected min_lat,min_lon,max_lat,max_lon"))
}

fn ingest(a: IngestArgs) -> Result<RunManifest> {
    let [a0, a1, a2, a3] = parse_bbox(&a.bbox)?;
    let grid = GridSpec::new(a0, a1, a2, a3, a.rows, a.cols).map_err(|e| Error::usage(e.to_string()))?;
    let span = match (&a.start, &a.end) {
        (Some(s), Some(e)) => Some(TimeSpan { start: trips::parse_date(s)?, end: trips::parse_date(e)? }),
        _ => None,
    };
    let opts = IngestOptions {
        grid,
        slot_len: a.slot_minutes.checked_mul(60).ok_or_else(|| Error::usage("slot length overflows"))?,
        utc_offset: trips::parse_utc_offset(&a.utc_offset)?,
        span,
    };
    let (data, report) = trips::ingest_file(&a.trips, &opts)?;
    out_dir(&a.out)?;
    let csv = a.out.join(SNAPSHOTS);
    dataset::save(&csv, &data)?;
    let mut text: String = report.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let rows: Vec<String> = report.malformed_rows.iter().map(usize::to_string).collect();
    text.push_str(&format!("malformed_rows = {}\n", rows.join(",")));
    let rep = a.out.join("ingest_report.txt");
    write(&rep, &text)?;
    eprintln!(
        "ingested {} trips into {} slots ({} malformed, {} outside grid, {} outside span)",
        report.counted,
        data.snapshots.len(),
        report.malformed(),
        report.dropped_outside_bbox,
        report.dropped_outside_span
    );
    Ok(manifest("ingest", vec![a.trips], vec![csv.clone(), dataset::meta_path(&csv), rep]))
}

fn synth(a: SynthArgs) -> Result<RunManifest> {
    let base = SynthConfig::fixture(a.seed);
    let g = base.grid;
    let cfg = SynthConfig {
        grid: GridSpec { n_rows: a.rows, n_cols: a.cols, ..g },
        days: a.days,
        slots_per_day: a.slots_per_day,
        first_dow: a.first_dow,
        roles: default_roles(a.rows, a.cols),
        base_rates: RateTable::commuting(a.slots_per_day, a.scale),
        level_volatility: a.volatility,
        ..base
    };
    cfg.validate().map_err(|e| Error::usage(e.to_string()))?;
    let out = generate(&cfg)?;
    out_dir(&a.out)?;
    let csv = a.out.join(SNAPSHOTS);
    dataset::save(&csv, &Dataset { snapshots: out.snapshots, grid: cfg.grid, calendar: cfg.calendar() })?;
    let rates = a.out.join("rates.csv");
    let mut w = create(&rates)?;
    outputs::write_rates(&mut w, &cfg)?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(&rates, e))?;
    let mut m = manifest("synth", vec![], vec![csv.clone(), dataset::meta_path(&csv), rates]);
    m.seed = Some(a.seed);
    Ok(m)
}

/// Defaults or `--config`, then `--set` overrides, then `--seed`.
pub fn resolve_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let entries = match path {
        Some(p) => config::load(p)?,
        None => config::parse(config::DEFAULT_CONF)?,
    };
    config::apply(&mut cfg, &entries)?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        config::set(&mut cfg, k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Error::usage(e.to_string()))?;
    Ok(cfg)
}

struct Progress {
    clock: Option<Instant>,
}

impl TrainObserver for Progress {
    fn clock(&mut self) -> Option<f64> {
        self.clock.map(|c| c.elapsed().as_secs_f64())
    }

    fn on_epoch(&mut self, r: &EpochRecord) {
        let val = r.val_loss.map_or_else(|| "NA".into(), |v| format!("{v:.6}"));
        eprintln!("epoch {} {} train_loss={:.6} val_loss={val}", r.epoch, r.phase.name(), r.train_loss);
    }
}

fn train_cmd(a: TrainArgs) -> Result<RunManifest> {
    let cfg = resolve_config(a.config.as_deref(), &a.overrides, a.seed)?;
    let data = dataset::load(&a.data)?;
    let seed = cfg.seed;
    let mut progress = Progress { clock: (!a.no_timing).then(Instant::now) };
    let outcome = train(&data, cfg, &Threaded::new(a.threads), &mut progress)?;
    out_dir(&a.out)?;
    let ck = a.out.join(CHECKPOINT);
    checkpoint::save(&ck, &outcome.state)?;
    let log = a.out.join(TRAIN_LOG);
    write(&log, &outputs::train_log(&outcome.history))?;
    if let Some(b) = outcome.best_epoch {
        eprintln!("kept epoch {b} (lowest validation loss)");
    }
    let mut m = manifest("train", vec![a.data.clone(), dataset::meta_path(&a.data)], vec![ck, log]);
    m.config = a.config;
    m.seed = Some(seed);
    Ok(m)
}

fn load_pair(ck: &Path, data: &Path) -> Result<(ModelState, Dataset)> {
    let state = checkpoint::load(ck)?;
    let data = dataset::load(data)?;
    if data.grid != state.grid || data.calendar != state.calendar {
        return Err(Error::format("data grid or calendar differs from the checkpoint's"));
    }
    Ok((state, data))
}

fn predict(a: PredictArgs) -> Result<RunManifest> {
    let (state, data) = load_pair(&a.checkpoint, &a.data)?;
    let geo = state.geometry()?;
    let p = state.predict(&data.snapshots, &geo, a.slot)?;
    out_dir(&a.out)?;
    let (od, demand, top) = (a.out.join("od.csv"), a.out.join("demand.csv"), a.out.join("top_flows.csv"));
    let grid = state.grid;
    for (path, kind) in [(&od, 0), (&demand, 1), (&top, 2)] {
        let mut w = create(path)?;
        match kind {
            0 => outputs::write_od(&mut w, a.slot, &p, a.floor)?,
            1 => outputs::write_demand(&mut w, a.slot, &p)?,
            _ => outputs::write_top_flows(&mut w, a.slot, &p, a.top, |c| grid.cell_center(c))?,
        }
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))?;
    }
    Ok(manifest("predict", vec![a.checkpoint, a.data], vec![od, demand, top]))
}

fn evaluate(a: EvaluateArgs) -> Result<RunManifest> {
    let (state, data) = load_pair(&a.checkpoint, &a.data)?;
    let cfg = &state.config;
    let l = data.calendar.slots_per_day;
    let split = split_with(data.snapshots.len(), l, cfg.test_days, cfg.val_fraction)?;
    let targets = SplitSpec::targets(&split.test, l, cfg.history);
    if targets.is_empty() {
        return Err(gallat_core::GallatError::InsufficientHistory(format!(
            "test span {:?} has no slot with {} slots of history",
            split.test,
            l * cfg.history + 1
        ))
        .into());
    }
    let (od, demand) = evaluate_model(&state, &data.snapshots, &targets, &Threaded::new(a.threads))?;
    out_dir(&a.out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, od: &_, demand: &_| -> Result<()> {
        let (txt, csv) = (a.out.join(format!("{name}.txt")), a.out.join(format!("{name}.csv")));
        write(&txt, &outputs::metrics_text(&[od, demand]))?;
        write(&csv, &outputs::metrics_csv(&[od, demand]))?;
        written.extend([txt, csv]);
        Ok(())
    };
    emit("metrics", &od, &demand)?;
    if a.baseline == Some(Baseline::Ha) {
        let history = split.train.start..split.validation.end;
        let mut ev = SlotEvaluator::default();
        for &t in &targets {
            let g = ha_baseline(&data.snapshots, &data.calendar, history.clone(), t, HaMode::Od)?;
            let d = ha_baseline(&data.snapshots, &data.calendar, history.clone(), t, HaMode::Demand)?;
            ev.push(d.data(), &g, &data.snapshots[t])?;
        }
        let (hod, hdemand) = ev.finish();
        emit("ha_metrics", &hod, &hdemand)?;
    }
    Ok(manifest("evaluate", vec![a.checkpoint, a.data], written))
}

fn params(a: ParamsArgs) -> Result<RunManifest> {
    let state = checkpoint::load(&a.checkpoint)?;
    let b = count_params(&state.params);
    let mut text = String::new();
    for (name, len) in &b.tensors {
        text.push_str(&format!("tensor.{name} = {len}\n"));
    }
    for (k, v) in [
        ("embedding", b.embedding),
        ("spatial", b.spatial),
        ("temporal", b.temporal),
        ("transfer", b.transfer),
        ("attention", b.attention()),
        ("total", b.total()),
    ] {
        text.push_str(&format!("layer.{k} = {v}\n"));
    }
    out_dir(&a.out)?;
    let path = a.out.join("params.txt");
    write(&path, &text)?;
    print!("{text}");
    Ok(manifest("params", vec![a.checkpoint], vec![path]))
}
