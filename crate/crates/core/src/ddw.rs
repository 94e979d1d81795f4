//! Dynamic, directed, weighted (DDW) snapshot graphs over a regular grid of
//! regions, their geographical relationships, neighborhood extraction, and
//! the statistics-driven pre-weights used by the spatial layer.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{GallatError, Result};

/// Mean Earth radius, km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Default additive term guarding the pre-weight denominators.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Multiplier on the cell diagonal used as the default geographical radius.
pub const DEFAULT_RADIUS_FACTOR: f64 = 1.05;

/// Rectangular bounding box split into `n_rows × n_cols` equal cells.
///
/// Cells are numbered row-major starting from the south-west corner:
/// `index = row * n_cols + col`, rows growing northward and columns eastward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl GridSpec {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64, n_rows: usize, n_cols: usize) -> Result<Self> {
        let g = Self { min_lat, min_lon, max_lat, max_lon, n_rows, n_cols };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.min_lat, self.min_lon, self.max_lat, self.max_lon];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GallatError::contract("grid bounds must be finite"));
        }
        if self.max_lat <= self.min_lat || self.max_lon <= self.min_lon {
            return Err(GallatError::contract("degenerate grid bounding box"));
        }
        if self.min_lat < -90.0 || self.max_lat > 90.0 {
            return Err(GallatError::contract("grid latitude outside [-90, 90]"));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(GallatError::contract("grid needs at least one row and one column"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n_rows * self.n_cols
    }

    fn lat_step(&self) -> f64 {
        (self.max_lat - self.min_lat) / self.n_rows as f64
    }

    fn lon_step(&self) -> f64 {
        (self.max_lon - self.min_lon) / self.n_cols as f64
    }

    /// `(row, col)` of a cell index.
    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.n_cols, cell % self.n_cols)
    }

    /// Cell containing a point; bounds are inclusive on every side.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<usize> {
        if !(lat >= self.min_lat && lat <= self.max_lat && lon >= self.min_lon && lon <= self.max_lon) {
            return None;
        }
        let row = (((lat - self.min_lat) / self.lat_step()) as usize).min(self.n_rows - 1);
        let col = (((lon - self.min_lon) / self.lon_step()) as usize).min(self.n_cols - 1);
        Some(row * self.n_cols + col)
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (r, c) = self.row_col(cell);
        (
            self.min_lat + (r as f64 + 0.5) * self.lat_step(),
            self.min_lon + (c as f64 + 0.5) * self.lon_step(),
        )
    }

    /// Largest corner-to-corner cell diagonal over all grid rows, km.
    pub fn cell_diagonal_km(&self) -> f64 {
        (0..self.n_rows)
            .map(|r| {
                let lat = self.min_lat + r as f64 * self.lat_step();
                haversine_km(lat, self.min_lon, lat + self.lat_step(), self.min_lon + self.lon_step())
                    .max(haversine_km(lat + self.lat_step(), self.min_lon, lat, self.min_lon + self.lon_step()))
            })
            .fold(0.0, f64::max)
    }

    /// Default geographical radius: a hair over one cell diagonal, i.e. 8-adjacency.
    pub fn default_radius_km(&self) -> f64 {
        DEFAULT_RADIUS_FACTOR * self.cell_diagonal_km()
    }
}

pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = p2 - p1;
    let dlambda = (lon2 - lon1).to_radians();
    let s1 = libm::sin(dphi / 2.0);
    let s2 = libm::sin(dlambda / 2.0);
    let h = s1 * s1 + libm::cos(p1) * libm::cos(p2) * s2 * s2;
    2.0 * EARTH_RADIUS_KM * libm::asin(libm::sqrt(h.min(1.0)))
}

/// Pairwise center-to-center distances between grid cells, km.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoMatrix {
    n: usize,
    dist: Vec<f64>,
}

impl GeoMatrix {
    pub fn from_dense(n: usize, dist: Vec<f64>) -> Result<Self> {
        if dist.len() != n * n {
            return Err(GallatError::dimension("geo matrix", (n, n), (dist.len(), 1)));
        }
        if dist.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(GallatError::contract("distances must be finite and nonnegative"));
        }
        Ok(Self { n, dist })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    /// Applies the same relabelling to rows and columns: `new[i][j] = old[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] = self.get(perm[i], perm[j]);
            }
        }
        Self { n, dist }
    }
}

pub fn geo_matrix(grid: &GridSpec) -> GeoMatrix {
    let n = grid.n();
    let centers: Vec<(f64, f64)> = (0..n).map(|c| grid.cell_center(c)).collect();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = haversine_km(centers[i].0, centers[i].1, centers[j].0, centers[j].1);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    GeoMatrix { n, dist }
}

/// Trip counts between regions during one time slot; `counts[i][j] = 0`
/// means there is no edge from `i` to `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotGraph {
    pub slot: usize,
    n: usize,
    counts: Vec<u32>,
}

impl SnapshotGraph {
    pub fn empty(slot: usize, n: usize) -> Self {
        Self { slot, n, counts: vec![0; n * n] }
    }

    pub fn from_counts(slot: usize, n: usize, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != n * n {
            return Err(GallatError::dimension("snapshot", (n, n), (counts.len(), 1)));
        }
        Ok(Self { slot, n, counts })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u32) {
        self.counts[i * self.n + j] = v;
    }

    pub fn increment(&mut self, i: usize, j: usize) {
        self.counts[i * self.n + j] += 1;
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn out_degree(&self, i: usize) -> u64 {
        self.counts[i * self.n..(i + 1) * self.n].iter().map(|&c| u64::from(c)).sum()
    }

    pub fn in_degree(&self, j: usize) -> u64 {
        (0..self.n).map(|i| u64::from(self.get(i, j))).sum()
    }

    pub fn out_degrees(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.out_degree(i) as f64).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Applies the same relabelling to rows and columns: `new[i][j] = old[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut counts = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                counts[i * n + j] = self.get(perm[i], perm[j]);
            }
        }
        Self { slot: self.slot, n, counts }
    }
}

/// Forward, backward, and geographical neighbors of one node, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct NeighborSets {
    pub forward: Vec<usize>,
    pub backward: Vec<usize>,
    pub geo: Vec<usize>,
}

/// Extracts the three neighborhoods of node `i`.
///
/// A self-loop (`g[i][i] > 0`) puts `i` in its own forward and backward
/// sets. The geographical set never contains `i`: the spatial layer already
/// carries the node's own projection as a separate segment.
pub fn neighborhoods(g: &SnapshotGraph, r: &GeoMatrix, i: usize, radius_km: f64) -> Result<NeighborSets> {
    let n = g.n();
    if i >= n {
        return Err(GallatError::contract(alloc::format!("node {i} out of range for {n} nodes")));
    }
    if r.n() != n {
        return Err(GallatError::dimension("neighborhoods", (n, n), (r.n(), r.n())));
    }
    if !(radius_km > 0.0) {
        return Err(GallatError::contract("geographical radius must be positive"));
    }
    Ok(NeighborSets {
        forward: (0..n).filter(|&j| g.get(i, j) > 0).collect(),
        backward: (0..n).filter(|&j| g.get(j, i) > 0).collect(),
        geo: (0..n).filter(|&j| j != i && r.get(i, j) <= radius_km).collect(),
    })
}

/// Pre-weights `a`, `b`, `c` keyed by neighbor index.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PreWeights {
    pub a: BTreeMap<usize, f64>,
    pub b: BTreeMap<usize, f64>,
    pub c: BTreeMap<usize, f64>,
    pub epsilon: f64,
}

/// Demand-share weights for forward/backward neighbors and inverse-distance
/// weights for geographical neighbors.
pub fn pre_weights(g: &SnapshotGraph, r: &GeoMatrix, sets: &NeighborSets, i: usize, epsilon: f64) -> PreWeights {
    let out_total: f64 = sets.forward.iter().map(|&j| f64::from(g.get(i, j))).sum();
    let in_total: f64 = sets.backward.iter().map(|&j| f64::from(g.get(j, i))).sum();
    let inv_total: f64 = sets.geo.iter().map(|&j| 1.0 / r.get(i, j)).sum();
    PreWeights {
        a: sets.forward.iter().map(|&j| (j, f64::from(g.get(i, j)) / (out_total + epsilon))).collect(),
        b: sets.backward.iter().map(|&j| (j, f64::from(g.get(j, i)) / (in_total + epsilon))).collect(),
        c: sets.geo.iter().map(|&j| (j, (1.0 / r.get(i, j)) / inv_total)).collect(),
        epsilon,
    }
}

/// One trip; only the start time matters for slot assignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripRecord {
    /// Seconds since the Unix epoch, already shifted to local time.
    pub start_time: i64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub dest_lat: f64,
    pub dest_lon: f64,
}

/// Half-open time range `[start, end)` in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeSpan {
    pub start: i64,
    pub end: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotBuild {
    pub snapshots: Vec<SnapshotGraph>,
    pub dropped_outside_bbox: usize,
    pub dropped_outside_span: usize,
}

impl SnapshotBuild {
    pub fn dropped(&self) -> usize {
        self.dropped_outside_bbox + self.dropped_outside_span
    }
}

/// Bins trips into one snapshot per slot of `slot_len` seconds by start time.
pub fn build_snapshots(trips: &[TripRecord], grid: &GridSpec, slot_len: i64, span: TimeSpan) -> Result<SnapshotBuild> {
    grid.validate()?;
    if span.end <= span.start {
        return Err(GallatError::contract("empty time span"));
    }
    if slot_len <= 0 || (span.end - span.start) % slot_len != 0 {
        return Err(GallatError::contract(alloc::format!(
            "slot length {slot_len}s does not evenly divide the {}s span",
            span.end - span.start
        )));
    }
    let slots = ((span.end - span.start) / slot_len) as usize;
    let n = grid.n();
    let mut snapshots: Vec<SnapshotGraph> = (0..slots).map(|t| SnapshotGraph::empty(t, n)).collect();
    let mut out = SnapshotBuild { snapshots: Vec::new(), dropped_outside_bbox: 0, dropped_outside_span: 0 };
    for trip in trips {
        if trip.start_time < span.start || trip.start_time >= span.end {
            out.dropped_outside_span += 1;
            continue;
        }
        let (Some(o), Some(d)) = (grid.cell_of(trip.origin_lat, trip.origin_lon), grid.cell_of(trip.dest_lat, trip.dest_lon))
        else {
            out.dropped_outside_bbox += 1;
            continue;
        };
        let t = ((trip.start_time - span.start) / slot_len) as usize;
        snapshots[t].increment(o, d);
    }
    out.snapshots = snapshots;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_grid() -> GridSpec {
        GridSpec::new(39.9, 116.3, 40.0, 116.4, 2, 2).unwrap()
    }

    #[test]
    fn geo_matrix_symmetric_zero_diagonal() {
        let grid = GridSpec::new(39.0, 116.0, 40.0, 117.5, 3, 4).unwrap();
        let r = geo_matrix(&grid);
        for i in 0..grid.n() {
            assert_eq!(r.get(i, i), 0.0);
            for j in 0..grid.n() {
                assert_eq!(r.get(i, j), r.get(j, i));
            }
        }
    }

    #[test]
    fn one_degree_of_latitude() {
        // Two rows one degree tall: centers differ by exactly 1° latitude.
        let grid = GridSpec::new(10.0, 20.0, 12.0, 20.5, 2, 1).unwrap();
        let r = geo_matrix(&grid);
        // 2π·6371.0088/360
        assert!((r.get(0, 1) - 111.195).abs() < 0.5, "{}", r.get(0, 1));
    }

    #[test]
    fn forward_set_by_inspection() {
        let g = SnapshotGraph::from_counts(0, 4, [[0, 2, 0, 1], [0; 4], [0; 4], [0; 4]].concat()).unwrap();
        let r = GeoMatrix::from_dense(4, vec![1.0; 16]).unwrap();
        let s = neighborhoods(&g, &r, 0, 0.5).unwrap();
        assert_eq!(s.forward, vec![1, 3]);
        assert!(s.backward.is_empty());
    }

    #[test]
    fn empty_snapshot_has_no_flow_neighbors() {
        let grid = toy_grid();
        let g = SnapshotGraph::empty(0, 4);
        let s = neighborhoods(&g, &geo_matrix(&grid), 2, grid.default_radius_km()).unwrap();
        assert!(s.forward.is_empty() && s.backward.is_empty());
    }

    #[test]
    fn corner_of_two_by_two_sees_all_others() {
        let grid = toy_grid();
        let r = geo_matrix(&grid);
        // Center-to-center diagonal of the toy grid.
        let (a, b) = (grid.cell_center(0), grid.cell_center(3));
        let diag = haversine_km(a.0, a.1, b.0, b.1);
        let s = neighborhoods(&SnapshotGraph::empty(0, 4), &r, 0, diag).unwrap();
        assert_eq!(s.geo, vec![1, 2, 3]);
        let s = neighborhoods(&SnapshotGraph::empty(0, 4), &r, 0, 0.99 * diag).unwrap();
        assert_eq!(s.geo, vec![1, 2]);
    }

    #[test]
    fn self_loop_in_both_flow_sets_not_geo() {
        let mut g = SnapshotGraph::empty(0, 4);
        g.set(1, 1, 5);
        let r = geo_matrix(&toy_grid());
        let s = neighborhoods(&g, &r, 1, 1000.0).unwrap();
        assert_eq!(s.forward, vec![1]);
        assert_eq!(s.backward, vec![1]);
        assert_eq!(s.geo, vec![0, 2, 3]);
    }

    #[test]
    fn out_of_range_node_is_contract_error() {
        let g = SnapshotGraph::empty(0, 4);
        let r = geo_matrix(&toy_grid());
        assert!(matches!(neighborhoods(&g, &r, 4, 1.0), Err(GallatError::Contract(_))));
    }

    #[test]
    fn demand_share_weights() {
        let mut g = SnapshotGraph::empty(0, 4);
        g.set(0, 1, 2);
        g.set(0, 3, 3);
        let r = GeoMatrix::from_dense(4, vec![1.0; 16]).unwrap();
        let sets = neighborhoods(&g, &r, 0, 0.5).unwrap();
        let w = pre_weights(&g, &r, &sets, 0, 1e-8);
        assert!((w.a[&1] - 0.4).abs() < 1e-8);
        assert!((w.a[&3] - 0.6).abs() < 1e-8);
        assert!(w.b.is_empty());
    }

    #[test]
    fn inverse_distance_weights() {
        let r = GeoMatrix::from_dense(3, vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0]).unwrap();
        let g = SnapshotGraph::empty(0, 3);
        let sets = neighborhoods(&g, &r, 0, 2.5).unwrap();
        let w = pre_weights(&g, &r, &sets, 0, 1e-8);
        assert!((w.c[&1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.c[&2] - 1.0 / 3.0).abs() < 1e-15);
        assert!(w.a.is_empty());
    }

    fn trip(t: i64, o: (f64, f64), d: (f64, f64)) -> TripRecord {
        TripRecord { start_time: t, origin_lat: o.0, origin_lon: o.1, dest_lat: d.0, dest_lon: d.1 }
    }

    #[test]
    fn trip_lands_in_start_slot() {
        // 3x3 grid over [0,3]x[0,3]; cell 3 = (row 1, col 0), cell 7 = (row 2, col 1).
        let grid = GridSpec::new(0.0, 0.0, 3.0, 3.0, 3, 3).unwrap();
        let day = TimeSpan { start: 0, end: 86_400 };
        let t = 8 * 3600 + 12 * 60;
        let built = build_snapshots(&[trip(t, (1.5, 0.5), (2.5, 1.5))], &grid, 3600, day).unwrap();
        assert_eq!(built.snapshots.len(), 24);
        for (s, snap) in built.snapshots.iter().enumerate() {
            let expected = u64::from(s == 8);
            assert_eq!(snap.total(), expected);
        }
        assert_eq!(built.snapshots[8].get(3, 7), 1);
        assert_eq!(built.dropped(), 0);
    }

    #[test]
    fn outside_bbox_dropped_and_repeats_counted() {
        let grid = GridSpec::new(0.0, 0.0, 3.0, 3.0, 3, 3).unwrap();
        let span = TimeSpan { start: 0, end: 7200 };
        let trips = [
            trip(10, (0.5, 0.5), (5.0, 0.5)),
            trip(20, (0.5, 0.5), (2.5, 2.5)),
            trip(30, (0.5, 0.5), (2.5, 2.5)),
            trip(40, (0.5, 0.5), (2.5, 2.5)),
        ];
        let built = build_snapshots(&trips, &grid, 3600, span).unwrap();
        assert_eq!(built.dropped_outside_bbox, 1);
        assert_eq!(built.snapshots[0].get(0, 8), 3);
    }

    #[test]
    fn empty_span_rejected() {
        let grid = toy_grid();
        let err = build_snapshots(&[], &grid, 3600, TimeSpan { start: 5, end: 5 }).unwrap_err();
        assert!(matches!(err, GallatError::Contract(_)));
        assert!(build_snapshots(&[], &grid, 3600, TimeSpan { start: 0, end: 5000 }).is_err());
    }
}
