//! Trip-record CSV ingestion.

use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use gallat_core::ddw::{build_snapshots, GridSpec, TimeSpan, TripRecord};
use gallat_core::features::Calendar;
use gallat_core::training::Dataset;

use crate::error::{Error, Result};

pub const TRIP_HEADER: [&str; 5] = ["start_time", "origin_lat", "origin_lon", "dest_lat", "dest_lon"];

const DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestOptions {
    pub grid: GridSpec,
    /// Slot length in seconds; must divide a day.
    pub slot_len: i64,
    /// Fixed offset of local time from UTC, seconds. No DST handling.
    pub utc_offset: i64,
    /// Local-time span to bin; defaults to the whole days the trips touch.
    pub span: Option<TimeSpan>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub parsed: usize,
    /// 1-based data row numbers (the header is row 0) of skipped rows.
    pub malformed_rows: Vec<usize>,
    pub dropped_outside_bbox: usize,
    pub dropped_outside_span: usize,
    pub counted: u64,
}

impl IngestReport {
    pub fn malformed(&self) -> usize {
        self.malformed_rows.len()
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("rows", self.rows.to_string()),
            ("parsed", self.parsed.to_string()),
            ("malformed", self.malformed().to_string()),
            ("dropped_outside_bbox", self.dropped_outside_bbox.to_string()),
            ("dropped_outside_span", self.dropped_outside_span.to_string()),
            ("counted", self.counted.to_string()),
        ]
    }
}

/// Parses `±HH:MM`, `±HH` or `Z`, returning seconds.
pub fn parse_utc_offset(s: &str) -> Result<i64> {
    let s = s.trim();
    if s == "Z" || s == "UTC" {
        return Ok(0);
    }
    let bad = || Error::usage(format!("bad UTC offset {s:?}; expected +HH:MM"));
    let (sign, rest) = match s.as_bytes().first() {
        Some(b'+') => (1, &s[1..]),
        Some(b'-') => (-1, &s[1..]),
        _ => return Err(bad()),
    };
    let (h, m) = rest.split_once(':').unwrap_or((rest, "0"));
    let digits = |x: &str| !x.is_empty() && x.bytes().all(|b| b.is_ascii_digit());
    if !digits(h) || !digits(m) {
        return Err(bad());
    }
    let (h, m): (i64, i64) = (h.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?);
    if h > 23 || m > 59 {
        return Err(bad());
    }
    Ok(sign * (h * 3600 + m * 60))
}

/// Local-time seconds of a timestamp.
///
/// RFC 3339 and integer epoch seconds are absolute and get shifted by the
/// offset; naive `YYYY-MM-DD HH:MM:SS` values are already local.
pub fn parse_timestamp(s: &str, utc_offset: i64) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return v.checked_add(utc_offset);
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return t.timestamp().checked_add(utc_offset);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    None
}

/// Local midnight of a `YYYY-MM-DD` date, in local-time seconds.
pub fn parse_date(s: &str) -> Result<i64> {
    let d = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| Error::usage(format!("bad date {s:?}")))?;
    Ok(d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc().timestamp())
}

fn coord(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads trips, skipping and counting malformed rows.
pub fn read_trips<R: Read>(r: R, utc_offset: i64, report: &mut IngestReport) -> Result<Vec<TripRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r);
    let header = rdr.headers().map_err(|e| Error::format(format!("trip header: {e}")))?;
    if header.iter().map(str::trim).ne(TRIP_HEADER) {
        return Err(Error::format(format!("trip header must be {}", TRIP_HEADER.join(","))));
    }
    let mut trips = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        report.rows += 1;
        let trip = rec.ok().filter(|r| r.len() == 5).and_then(|r| {
            Some(TripRecord {
                start_time: parse_timestamp(&r[0], utc_offset)?,
                origin_lat: coord(&r[1])?,
                origin_lon: coord(&r[2])?,
                dest_lat: coord(&r[3])?,
                dest_lon: coord(&r[4])?,
            })
        });
        match trip {
            Some(t) => trips.push(t),
            None => report.malformed_rows.push(k + 1),
        }
    }
    report.parsed = trips.len();
    Ok(trips)
}

/// Bins trips into a dataset. Slot 0 starts at the span start, whose
/// weekday becomes the calendar's first weekday.
pub fn ingest<R: Read>(r: R, opts: &IngestOptions) -> Result<(Dataset, IngestReport)> {
    if opts.slot_len <= 0 || DAY % opts.slot_len != 0 {
        return Err(Error::usage(format!("slot length {}s must divide one day", opts.slot_len)));
    }
    let mut report = IngestReport::default();
    let trips = read_trips(r, opts.utc_offset, &mut report)?;
    let span = match opts.span {
        Some(s) => s,
        None => {
            let lo = trips.iter().map(|t| t.start_time).min();
            let hi = trips.iter().map(|t| t.start_time).max();
            let (Some(lo), Some(hi)) = (lo, hi) else {
                return Err(Error::usage("no parseable trips; pass an explicit span"));
            };
            TimeSpan { start: lo.div_euclid(DAY) * DAY, end: (hi.div_euclid(DAY) + 1) * DAY }
        }
    };
    if span.start.rem_euclid(DAY) != 0 {
        return Err(Error::usage("span must start at local midnight"));
    }
    let built = build_snapshots(&trips, &opts.grid, opts.slot_len, span)?;
    report.dropped_outside_bbox = built.dropped_outside_bbox;
    report.dropped_outside_span = built.dropped_outside_span;
    report.counted = built.snapshots.iter().map(|g| g.total()).sum();
    // 1970-01-01 was a Thursday; Monday = 0.
    let first_dow = (span.start.div_euclid(DAY) + 3).rem_euclid(7) as usize;
    let calendar = Calendar { slots_per_day: (DAY / opts.slot_len) as usize, first_dow };
    Ok((Dataset { snapshots: built.snapshots, grid: opts.grid, calendar }, report))
}

pub fn ingest_file(path: &Path, opts: &IngestOptions) -> Result<(Dataset, IngestReport)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest(std::io::BufReader::new(f), opts)
}
