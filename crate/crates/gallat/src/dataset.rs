//! Snapshot CSV (`slot,origin,dest,count`, nonzero entries only) with a
//! `key = value` sidecar holding the grid and calendar.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use gallat_core::ddw::{GridSpec, SnapshotGraph};
use gallat_core::features::Calendar;
use gallat_core::training::Dataset;

use crate::config;
use crate::error::{Error, Result};

pub const SNAPSHOT_HEADER: [&str; 4] = ["slot", "origin", "dest", "count"];

/// Where the sidecar of `csv` lives: same stem, `.meta` extension.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta")
}

pub fn write_snapshots<W: Write>(w: W, snapshots: &[SnapshotGraph]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SNAPSHOT_HEADER).map_err(csv_err)?;
    for (t, g) in snapshots.iter().enumerate() {
        let n = g.n();
        for (k, &c) in g.counts().iter().enumerate() {
            if c > 0 {
                out.write_record([t.to_string(), (k / n).to_string(), (k % n).to_string(), c.to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    out.flush().map_err(|e| Error::new(crate::error::ErrorKind::Io, e.to_string()))
}

/// Reads `slots` snapshots over `n` nodes; absent entries are zero.
pub fn read_snapshots<R: Read>(r: R, n: usize, slots: usize) -> Result<Vec<SnapshotGraph>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers().map_err(csv_err)?;
    if header.iter().map(str::trim).ne(SNAPSHOT_HEADER) {
        return Err(Error::format(format!("snapshot header must be {}", SNAPSHOT_HEADER.join(","))));
    }
    let mut out: Vec<SnapshotGraph> = (0..slots).map(|t| SnapshotGraph::empty(t, n)).collect();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::format(format!("snapshot row {line}: {e}")))?;
        if rec.len() != 4 {
            return Err(Error::format(format!("snapshot row {line}: expected 4 fields")));
        }
        let field = |k: usize| -> Result<u64> {
            rec[k].trim().parse().map_err(|_| Error::format(format!("snapshot row {line}: bad {}", SNAPSHOT_HEADER[k])))
        };
        let (t, o, d, c) = (field(0)? as usize, field(1)? as usize, field(2)? as usize, field(3)?);
        if t >= slots || o >= n || d >= n {
            return Err(Error::format(format!("snapshot row {line}: index out of range")));
        }
        let c = u32::try_from(c).map_err(|_| Error::format(format!("snapshot row {line}: count too large")))?;
        if out[t].get(o, d) != 0 {
            return Err(Error::format(format!("snapshot row {line}: duplicate entry")));
        }
        out[t].set(o, d, c);
    }
    Ok(out)
}

pub fn meta_text(data: &Dataset) -> String {
    let g = &data.grid;
    format!(
        "slots = {}\nslots_per_day = {}\nfirst_dow = {}\nmin_lat = {}\nmin_lon = {}\nmax_lat = {}\nmax_lon = {}\nrows = {}\ncols = {}\n",
        data.snapshots.len(),
        data.calendar.slots_per_day,
        data.calendar.first_dow,
        g.min_lat,
        g.min_lon,
        g.max_lat,
        g.max_lon,
        g.n_rows,
        g.n_cols
    )
}

/// Grid, calendar and slot count from sidecar text.
pub fn parse_meta(text: &str) -> Result<(GridSpec, Calendar, usize)> {
    let m = config::parse(text)?;
    let get = |k: &str| m.get(k).ok_or_else(|| Error::format(format!("metadata missing {k}")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::format(format!("metadata {k}: cannot parse {v:?}")))
    }
    let grid = GridSpec {
        min_lat: num("min_lat", get("min_lat")?)?,
        min_lon: num("min_lon", get("min_lon")?)?,
        max_lat: num("max_lat", get("max_lat")?)?,
        max_lon: num("max_lon", get("max_lon")?)?,
        n_rows: num("rows", get("rows")?)?,
        n_cols: num("cols", get("cols")?)?,
    };
    grid.validate().map_err(|e| Error::format(e.to_string()))?;
    let calendar = Calendar {
        slots_per_day: num("slots_per_day", get("slots_per_day")?)?,
        first_dow: num("first_dow", get("first_dow")?)?,
    };
    if calendar.slots_per_day == 0 || calendar.first_dow >= 7 {
        return Err(Error::format("metadata has an invalid calendar"));
    }
    Ok((grid, calendar, num("slots", get("slots")?)?))
}

pub fn save(csv_path: &Path, data: &Dataset) -> Result<()> {
    let f = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    write_snapshots(std::io::BufWriter::new(f), &data.snapshots)?;
    let meta = meta_path(csv_path);
    std::fs::write(&meta, meta_text(data)).map_err(|e| Error::io(&meta, e))
}

pub fn load(csv_path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let meta = meta_path(csv_path);
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let (grid, calendar, slots) = parse_meta(&text)?;
    let snapshots = read_snapshots(std::io::BufReader::new(f), grid.n(), slots)?;
    Ok(Dataset { snapshots, grid, calendar })
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        Error::new(crate::error::ErrorKind::Io, e.to_string())
    } else {
        Error::format(e.to_string())
    }
}
