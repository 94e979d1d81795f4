//! Seeded synthetic mobility generator with planted commuting patterns.
//!
//! Counts are Poisson draws around
//! `base(role_i, role_j, time-of-day) · weekend · level(t)`, where `level`
//! is a mean-one log-normal AR(1) activity factor shared by the whole city.
//! It gives the recent past predictive power beyond the weekly profile.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::ddw::{GridSpec, SnapshotGraph};
use crate::error::{GallatError, Result};
use crate::features::Calendar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Residential,
    Business,
    Transit,
    Nightlife,
}

pub const ROLES: [Role; 4] = [Role::Residential, Role::Business, Role::Transit, Role::Nightlife];

impl Role {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Residential => "residential",
            Role::Business => "business",
            Role::Transit => "transit",
            Role::Nightlife => "nightlife",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        ROLES.iter().copied().find(|r| r.name() == s)
    }
}

/// Mean weekday trips per slot for each (origin role, destination role,
/// time-of-day).
#[derive(Clone, Debug, PartialEq)]
pub struct RateTable {
    pub slots_per_day: usize,
    data: Vec<f64>,
}

impl RateTable {
    pub fn zeros(slots_per_day: usize) -> Self {
        Self { slots_per_day, data: alloc::vec![0.0; 16 * slots_per_day] }
    }

    fn idx(&self, o: Role, d: Role, tod: usize) -> usize {
        (o.index() * 4 + d.index()) * self.slots_per_day + tod
    }

    pub fn get(&self, o: Role, d: Role, tod: usize) -> f64 {
        self.data[self.idx(o, d, tod)]
    }

    pub fn set(&mut self, o: Role, d: Role, tod: usize, v: f64) {
        let i = self.idx(o, d, tod);
        self.data[i] = v;
    }

    /// `scale · production[o](h) · attraction[d](h)` at each slot's start hour.
    pub fn commuting(slots_per_day: usize, scale: f64) -> Self {
        let mut t = Self::zeros(slots_per_day);
        for tod in 0..slots_per_day {
            let h = tod as f64 * 24.0 / slots_per_day as f64;
            for o in ROLES {
                for d in ROLES {
                    t.set(o, d, tod, scale * production(o, h) * attraction(d, h));
                }
            }
        }
        t
    }
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    let d = (h - centre).abs();
    let d = d.min(24.0 - d);
    libm::exp(-0.5 * (d / width) * (d / width))
}

const BASELINE: f64 = 0.15;

/// Trips leaving a region of this role, relative scale by hour.
fn production(role: Role, h: f64) -> f64 {
    BASELINE
        + match role {
            Role::Residential => 1.6 * bump(h, 8.0, 1.5) + 0.4 * bump(h, 19.0, 2.0),
            Role::Business => 0.4 * bump(h, 9.0, 2.0) + 1.6 * bump(h, 18.0, 1.5),
            Role::Transit => 0.8 * bump(h, 8.0, 2.0) + 0.8 * bump(h, 18.0, 2.0),
            Role::Nightlife => 1.2 * bump(h, 23.0, 2.0),
        }
}

/// Trips ending in a region of this role, relative scale by hour.
fn attraction(role: Role, h: f64) -> f64 {
    BASELINE
        + match role {
            Role::Residential => 0.4 * bump(h, 8.0, 2.0) + 1.6 * bump(h, 19.0, 1.5),
            Role::Business => 1.6 * bump(h, 8.5, 1.5) + 0.4 * bump(h, 18.0, 2.0),
            Role::Transit => 0.8 * bump(h, 8.0, 2.0) + 0.8 * bump(h, 18.0, 2.0),
            Role::Nightlife => 1.0 * bump(h, 21.0, 2.0),
        }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub grid: GridSpec,
    pub days: usize,
    pub slots_per_day: usize,
    /// Weekday of the first day, Monday = 0.
    pub first_dow: usize,
    /// One role per cell, row-major from the south-west corner.
    pub roles: Vec<Role>,
    pub base_rates: RateTable,
    /// Multiplier applied on Saturdays and Sundays.
    pub weekend_scale: f64,
    /// Standard deviation of the log activity level; 0 disables it.
    pub level_volatility: f64,
    /// Slot-to-slot autocorrelation of the log activity level.
    pub level_persistence: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// 5×5 city, six weeks of hourly slots: a business core around a transit
    /// hub, nightlife in two corners, housing elsewhere.
    pub fn fixture(seed: u64) -> Self {
        let grid = GridSpec::new(39.90, 116.30, 39.95, 116.365, 5, 5).expect("valid fixture grid");
        Self {
            grid,
            days: 42,
            slots_per_day: 24,
            first_dow: 0,
            roles: default_roles(5, 5),
            base_rates: RateTable::commuting(24, 1.0),
            weekend_scale: 0.6,
            level_volatility: 0.5,
            level_persistence: 0.98,
            seed,
        }
    }

    pub fn slots(&self) -> usize {
        self.days * self.slots_per_day
    }

    pub fn calendar(&self) -> Calendar {
        Calendar { slots_per_day: self.slots_per_day, first_dow: self.first_dow }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.roles.len() != self.grid.n() {
            return Err(GallatError::contract(alloc::format!(
                "{} roles for {} cells",
                self.roles.len(),
                self.grid.n()
            )));
        }
        if self.slots_per_day == 0 || self.base_rates.slots_per_day != self.slots_per_day {
            return Err(GallatError::contract("rate profile length must equal slots per day"));
        }
        if self.first_dow >= 7 {
            return Err(GallatError::contract("first_dow must be in 0..7"));
        }
        if self.base_rates.data.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(GallatError::contract("rates must be finite and non-negative"));
        }
        if !(self.weekend_scale >= 0.0) || !(self.level_volatility >= 0.0) {
            return Err(GallatError::contract("scales must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.level_persistence) {
            return Err(GallatError::contract("level persistence must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Expected count for `origin → dest` at the given time-of-day and weekday,
    /// averaged over the activity level.
    pub fn expected_rate(&self, origin: usize, dest: usize, tod: usize, dow: usize) -> f64 {
        let w = if dow >= 5 { self.weekend_scale } else { 1.0 };
        w * self.base_rates.get(self.roles[origin], self.roles[dest], tod)
    }
}

/// Housing everywhere except a business core, a transit centre and two
/// nightlife corners.
pub fn default_roles(n_rows: usize, n_cols: usize) -> Vec<Role> {
    let mut roles = alloc::vec![Role::Residential; n_rows * n_cols];
    for r in 0..n_rows {
        for c in 0..n_cols {
            let i = r * n_cols + c;
            if r >= 1 && r + 1 < n_rows && c >= 1 && c + 1 < n_cols {
                roles[i] = Role::Business;
            }
            if r == n_rows / 2 && c == n_cols / 2 {
                roles[i] = Role::Transit;
            }
        }
    }
    if n_rows > 1 || n_cols > 1 {
        roles[n_cols - 1] = Role::Nightlife;
        roles[(n_rows - 1) * n_cols] = Role::Nightlife;
    }
    roles
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub snapshots: Vec<SnapshotGraph>,
    /// Activity level of each slot.
    pub levels: Vec<f64>,
}

/// Activity levels come from stream 0 of the master seed; slot `t` draws
/// its counts from stream `t + 1`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let n = cfg.grid.n();
    let slots = cfg.slots();
    let cal = cfg.calendar();
    let levels = activity_levels(cfg, slots);
    let mut snapshots = Vec::with_capacity(slots);
    for (t, &level) in levels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(t as u64 + 1);
        let (tod, dow) = (cal.time_of_day(t), cal.day_of_week(t));
        let mut counts = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                counts.push(poisson(&mut rng, cfg.expected_rate(i, j, tod, dow) * level));
            }
        }
        snapshots.push(SnapshotGraph::from_counts(t, n, counts)?);
    }
    Ok(SynthOutput { snapshots, levels })
}

fn activity_levels(cfg: &SynthConfig, slots: usize) -> Vec<f64> {
    let sigma = cfg.level_volatility;
    if sigma == 0.0 {
        return alloc::vec![1.0; slots];
    }
    let rho = cfg.level_persistence;
    let innovation = libm::sqrt(1.0 - rho * rho);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let mut x: f64 = rng.sample(StandardNormal);
    let mut out = Vec::with_capacity(slots);
    for t in 0..slots {
        if t > 0 {
            let e: f64 = rng.sample(StandardNormal);
            x = rho * x + innovation * e;
        }
        out.push(libm::exp(sigma * x - 0.5 * sigma * sigma));
    }
    out
}

fn poisson<R: Rng>(rng: &mut R, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let d = Poisson::new(lambda).expect("positive finite rate");
    let v: f64 = d.sample(rng);
    v as u32
}
