//! Versioned little-endian binary checkpoints.
//!
//! Floats are stored as raw IEEE-754 bits, so a save/load cycle is bit-exact.

use std::path::Path;

use gallat_core::ddw::GridSpec;
use gallat_core::features::{Calendar, FeatureConfig, FeatureStats};
use gallat_core::model::{ModelDims, ModelParams};
use gallat_core::optim::{AdamConfig, AdamState};
use gallat_core::training::{ModelState, RngState, TrainConfig};
use gallat_core::Matrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GALLATCK";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        m.data().iter().for_each(|&v| self.f64(v));
    }
    fn matrices(&mut self, ms: &[Matrix]) {
        self.usize(ms.len());
        ms.iter().for_each(|m| self.matrix(m));
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Dec<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(format!("checkpoint: bad flag byte {b}"))),
        }
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("checkpoint: size overflow"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let (r, c) = (self.usize()?, self.usize()?);
        let len = r.checked_mul(c).filter(|&l| l <= (self.buf.len() - self.pos) / 8);
        let len = len.ok_or_else(|| Error::format("checkpoint: matrix larger than file"))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::new(r, c, data).map_err(|e| Error::format(e.to_string()))
    }
    fn matrices(&mut self) -> Result<Vec<Matrix>> {
        let k = self.usize()?;
        if k > self.buf.len() - self.pos {
            return Err(Error::format("checkpoint: tensor count larger than file"));
        }
        (0..k).map(|_| self.matrix()).collect()
    }
}

pub fn encode(s: &ModelState) -> Vec<u8> {
    let mut e = Enc::default();
    e.0.extend_from_slice(MAGIC);
    e.u32(VERSION);

    let c = &s.config;
    for v in [c.batch_size, c.epochs, c.pretrain_epochs, c.embed_dim, c.history] {
        e.usize(v);
    }
    for v in [c.eta_d, c.eta_o, c.adam.lr, c.adam.beta1, c.adam.beta2, c.adam.eps] {
        e.f64(v);
    }
    e.u64(c.seed);
    e.u8(c.radius_km.is_some() as u8);
    e.f64(c.radius_km.unwrap_or(0.0));
    e.f64(c.epsilon);
    e.f64(c.leaky_slope);
    e.u8(c.temporal_mean as u8);
    for v in [c.node_embed_dim, c.slot_embed_dim, c.dow_embed_dim, c.test_days] {
        e.usize(v);
    }
    e.f64(c.val_fraction);

    let g = &s.grid;
    for v in [g.min_lat, g.min_lon, g.max_lat, g.max_lon] {
        e.f64(v);
    }
    e.usize(g.n_rows);
    e.usize(g.n_cols);
    e.usize(s.calendar.slots_per_day);
    e.usize(s.calendar.first_dow);

    let st = &s.stats;
    for v in [st.row_mean, st.row_std, st.col_mean, st.col_std, st.out_mean, st.out_std, st.in_mean, st.in_std] {
        e.f64(v);
    }
    e.f64(s.d_max);

    let d = s.params.dims;
    e.usize(d.n);
    e.usize(d.embed_dim);
    let f = d.features;
    for v in [f.node_embed_dim, f.slot_embed_dim, f.dow_embed_dim, f.slots_per_day] {
        e.usize(v);
    }
    e.matrices(s.params.tensors());
    e.matrices(&s.adam.m);
    e.matrices(&s.adam.v);
    e.u64(s.adam.step);
    e.u64(s.epoch);
    e.0.extend_from_slice(&s.rng.seed);
    e.u64(s.rng.stream);
    e.0.extend_from_slice(&s.rng.word_pos.to_le_bytes());
    e.0
}

pub fn decode(buf: &[u8]) -> Result<ModelState> {
    let mut d = Dec { buf, pos: 0 };
    if d.take(8)? != MAGIC {
        return Err(Error::format("not a checkpoint file"));
    }
    let version = d.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let (batch_size, epochs, pretrain_epochs, embed_dim, history) = (d.usize()?, d.usize()?, d.usize()?, d.usize()?, d.usize()?);
    let (eta_d, eta_o) = (d.f64()?, d.f64()?);
    let adam = AdamConfig { lr: d.f64()?, beta1: d.f64()?, beta2: d.f64()?, eps: d.f64()? };
    let seed = d.u64()?;
    let has_radius = d.bool()?;
    let radius = d.f64()?;
    let config = TrainConfig {
        batch_size,
        epochs,
        pretrain_epochs,
        embed_dim,
        history,
        eta_d,
        eta_o,
        adam,
        seed,
        radius_km: has_radius.then_some(radius),
        epsilon: d.f64()?,
        leaky_slope: d.f64()?,
        temporal_mean: d.bool()?,
        node_embed_dim: d.usize()?,
        slot_embed_dim: d.usize()?,
        dow_embed_dim: d.usize()?,
        test_days: d.usize()?,
        val_fraction: d.f64()?,
    };
    let grid = GridSpec {
        min_lat: d.f64()?,
        min_lon: d.f64()?,
        max_lat: d.f64()?,
        max_lon: d.f64()?,
        n_rows: d.usize()?,
        n_cols: d.usize()?,
    };
    let calendar = Calendar { slots_per_day: d.usize()?, first_dow: d.usize()? };
    let stats = FeatureStats {
        row_mean: d.f64()?,
        row_std: d.f64()?,
        col_mean: d.f64()?,
        col_std: d.f64()?,
        out_mean: d.f64()?,
        out_std: d.f64()?,
        in_mean: d.f64()?,
        in_std: d.f64()?,
    };
    let d_max = d.f64()?;
    let (n, embed) = (d.usize()?, d.usize()?);
    let features = FeatureConfig {
        node_embed_dim: d.usize()?,
        slot_embed_dim: d.usize()?,
        dow_embed_dim: d.usize()?,
        slots_per_day: d.usize()?,
    };
    let dims = ModelDims { n, embed_dim: embed, features };
    let bad = |e: gallat_core::GallatError| Error::format(format!("checkpoint: {e}"));
    let params = ModelParams::from_tensors(dims, d.matrices()?).map_err(bad)?;
    let m = d.matrices()?;
    let v = d.matrices()?;
    let step = d.u64()?;
    let shapes: Vec<_> = params.tensors().iter().map(Matrix::shape).collect();
    for moments in [&m, &v] {
        if moments.iter().map(Matrix::shape).ne(shapes.iter().copied()) {
            return Err(Error::format("checkpoint: optimizer state does not match parameters"));
        }
    }
    let epoch = d.u64()?;
    let seed: [u8; 32] = d.take(32)?.try_into().expect("32 bytes");
    let stream = d.u64()?;
    let word_pos = u128::from_le_bytes(d.take(16)?.try_into().expect("16 bytes"));
    if d.pos != buf.len() {
        return Err(Error::format("checkpoint has trailing bytes"));
    }
    grid.validate().map_err(bad)?;
    config.validate().map_err(bad)?;
    if grid.n() != n || calendar.slots_per_day != features.slots_per_day || calendar.first_dow >= 7 {
        return Err(Error::format("checkpoint: inconsistent grid, calendar and model sizes"));
    }
    Ok(ModelState {
        config,
        grid,
        calendar,
        stats,
        d_max,
        params,
        adam: AdamState { m, v, step },
        epoch,
        rng: RngState { seed, stream, word_pos },
    })
}

pub fn save(path: &Path, s: &ModelState) -> Result<()> {
    std::fs::write(path, encode(s)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
