//! Per-slot node features: grid position and degree scalars concatenated
//! with learned node, time-of-day, and day-of-week embeddings.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::ddw::SnapshotGraph;
use crate::error::{GallatError, Result};
use crate::tensor::Matrix;

/// Scalar fields at historical slots: row, col, out-degree, in-degree.
pub const HISTORY_SCALARS: usize = 4;
/// Scalar fields at the target slot: row, col (degrees are not yet observed).
pub const TARGET_SCALARS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureConfig {
    pub node_embed_dim: usize,
    pub slot_embed_dim: usize,
    pub dow_embed_dim: usize,
    /// Slots per day.
    pub slots_per_day: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { node_embed_dim: 8, slot_embed_dim: 8, dow_embed_dim: 8, slots_per_day: 24 }
    }
}

impl FeatureConfig {
    /// Width of historical feature rows.
    pub fn d(&self) -> usize {
        HISTORY_SCALARS + self.embed_width()
    }

    /// Width of target-slot feature rows.
    pub fn d_v(&self) -> usize {
        TARGET_SCALARS + self.embed_width()
    }

    fn embed_width(&self) -> usize {
        self.node_embed_dim + self.slot_embed_dim + self.dow_embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots_per_day == 0 {
            return Err(GallatError::contract("slots_per_day must be positive"));
        }
        Ok(())
    }
}

/// Maps slot indices to time-of-day and weekday.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Calendar {
    pub slots_per_day: usize,
    /// Weekday of slot 0, Monday = 0.
    pub first_dow: usize,
}

impl Calendar {
    pub fn time_of_day(&self, t: usize) -> usize {
        t % self.slots_per_day
    }

    pub fn day_of_week(&self, t: usize) -> usize {
        (self.first_dow + t / self.slots_per_day) % 7
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub node: Matrix,
    pub slot: Matrix,
    pub dow: Matrix,
}

impl EmbeddingTables {
    pub fn check(&self, n: usize, cfg: &FeatureConfig) -> Result<()> {
        let expect = [
            ("node table", self.node.shape(), (n, cfg.node_embed_dim)),
            ("slot table", self.slot.shape(), (cfg.slots_per_day, cfg.slot_embed_dim)),
            ("dow table", self.dow.shape(), (7, cfg.dow_embed_dim)),
        ];
        for (op, got, want) in expect {
            if got != want {
                return Err(GallatError::dimension(op, got, want));
            }
        }
        Ok(())
    }
}

/// Graph handles for the three embedding tables.
#[derive(Clone, Copy, Debug)]
pub struct TableVars {
    pub node: Var,
    pub slot: Var,
    pub dow: Var,
}

/// Standardization constants fitted on the training slots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureStats {
    pub row_mean: f64,
    pub row_std: f64,
    pub col_mean: f64,
    pub col_std: f64,
    pub out_mean: f64,
    pub out_std: f64,
    pub in_mean: f64,
    pub in_std: f64,
}

impl FeatureStats {
    pub fn identity() -> Self {
        Self {
            row_mean: 0.0,
            row_std: 1.0,
            col_mean: 0.0,
            col_std: 1.0,
            out_mean: 0.0,
            out_std: 1.0,
            in_mean: 0.0,
            in_std: 1.0,
        }
    }

    pub fn fit(n_rows: usize, n_cols: usize, train: &[SnapshotGraph]) -> Self {
        let n = n_rows * n_cols;
        let rows: Vec<f64> = (0..n).map(|i| (i / n_cols) as f64).collect();
        let cols: Vec<f64> = (0..n).map(|i| (i % n_cols) as f64).collect();
        let mut outs = Vec::with_capacity(train.len() * n);
        let mut ins = Vec::with_capacity(train.len() * n);
        for g in train {
            for i in 0..n {
                outs.push(g.out_degree(i) as f64);
                ins.push(g.in_degree(i) as f64);
            }
        }
        let (row_mean, row_std) = mean_std(&rows);
        let (col_mean, col_std) = mean_std(&cols);
        let (out_mean, out_std) = mean_std(&outs);
        let (in_mean, in_std) = mean_std(&ins);
        Self { row_mean, row_std, col_mean, col_std, out_mean, out_std, in_mean, in_std }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 1.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    let std = libm::sqrt(var);
    (mean, if std > 0.0 { std } else { 1.0 })
}

/// Everything needed to turn a snapshot into a feature matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureBuilder {
    pub cfg: FeatureConfig,
    pub stats: FeatureStats,
    pub n_rows: usize,
    pub n_cols: usize,
    pub calendar: Calendar,
}

impl FeatureBuilder {
    pub fn n(&self) -> usize {
        self.n_rows * self.n_cols
    }

    fn position(&self, i: usize) -> [f64; 2] {
        let s = &self.stats;
        [
            ((i / self.n_cols) as f64 - s.row_mean) / s.row_std,
            ((i % self.n_cols) as f64 - s.col_mean) / s.col_std,
        ]
    }

    /// Standardized `[row, col, out-degree, in-degree]` block, `n×4`.
    pub fn history_scalars(&self, g: &SnapshotGraph) -> Result<Matrix> {
        let n = self.n();
        if g.n() != n {
            return Err(GallatError::dimension("history_scalars", (g.n(), g.n()), (n, n)));
        }
        let s = &self.stats;
        let mut out = Matrix::zeros(n, HISTORY_SCALARS);
        for i in 0..n {
            let [r, c] = self.position(i);
            let o = (g.out_degree(i) as f64 - s.out_mean) / s.out_std;
            let d = (g.in_degree(i) as f64 - s.in_mean) / s.in_std;
            out.row_mut(i).copy_from_slice(&[r, c, o, d]);
        }
        Ok(out)
    }

    /// Standardized `[row, col]` block, `n×2`.
    pub fn target_scalars(&self) -> Matrix {
        let n = self.n();
        let mut out = Matrix::zeros(n, TARGET_SCALARS);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&self.position(i));
        }
        out
    }

    fn embeddings(&self, graph: &mut Graph, tables: TableVars, t: usize) -> Result<[Var; 3]> {
        let n = self.n();
        let ids: Vec<usize> = (0..n).collect();
        let node = graph.gather_rows(tables.node, &ids)?;
        let slot = graph.gather_rows(tables.slot, &alloc::vec![self.calendar.time_of_day(t); n])?;
        let dow = graph.gather_rows(tables.dow, &alloc::vec![self.calendar.day_of_week(t); n])?;
        Ok([node, slot, dow])
    }

    /// `V_t` (`n×d`) as a graph node.
    pub fn history_features(&self, graph: &mut Graph, tables: TableVars, g: &SnapshotGraph) -> Result<Var> {
        let scalars = graph.constant(self.history_scalars(g)?);
        let [node, slot, dow] = self.embeddings(graph, tables, g.slot)?;
        graph.concat_cols(&[scalars, node, slot, dow])
    }

    /// `V_{T+1}` (`n×d_v`) as a graph node.
    pub fn target_features(&self, graph: &mut Graph, tables: TableVars, t: usize) -> Result<Var> {
        let scalars = graph.constant(self.target_scalars());
        let [node, slot, dow] = self.embeddings(graph, tables, t)?;
        graph.concat_cols(&[scalars, node, slot, dow])
    }

    fn constant_tables(&self, graph: &mut Graph, tables: &EmbeddingTables) -> Result<TableVars> {
        tables.check(self.n(), &self.cfg)?;
        Ok(TableVars {
            node: graph.constant(tables.node.clone()),
            slot: graph.constant(tables.slot.clone()),
            dow: graph.constant(tables.dow.clone()),
        })
    }

    /// Feature matrix for snapshot `g` taken at slot `t`.
    pub fn build_features(&self, g: &SnapshotGraph, t: usize, tables: &EmbeddingTables) -> Result<Matrix> {
        if g.slot != t {
            return Err(GallatError::contract(alloc::format!("snapshot is slot {}, asked for slot {t}", g.slot)));
        }
        let mut graph = Graph::new();
        let vars = self.constant_tables(&mut graph, tables)?;
        let v = self.history_features(&mut graph, vars, g)?;
        Ok(graph.value(v).clone())
    }

    /// Feature matrix for the slot being predicted; no degree fields.
    pub fn build_target_features(&self, t: usize, tables: &EmbeddingTables) -> Result<Matrix> {
        let mut graph = Graph::new();
        let vars = self.constant_tables(&mut graph, tables)?;
        let v = self.target_features(&mut graph, vars, t)?;
        Ok(graph.value(v).clone())
    }
}
