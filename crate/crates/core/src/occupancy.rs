//! Room twin: independent two-state occupants driven by a transition matrix
//! that depends on the day of the week and the 15-minute slot of the day.

use chrono::{DateTime, Datelike, Timelike, Utc};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const DAYS: usize = 7;
pub const SLOTS: usize = 96;
pub const SLOT_MINUTES: i64 = 15;
pub const WEEK_SLOTS: usize = DAYS * SLOTS;

/// Row-stochastic 2x2 matrix over {out, in}; `m[from][to]`.
pub type Transition2 = [[f64; 2]; 2];

pub const OUT: usize = 0;
pub const IN: usize = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OccupancyError {
    #[error("need at least {needed} samples (two weeks), got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid occupancy model: {0}")]
    InvalidModel(String),
    #[error("malformed presence row at line {0}: {1}")]
    MalformedRow(usize, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OccupancyModel {
    pub n_max: usize,
    /// `p[day][slot]`, day 0 = Monday.
    pub p: Vec<Vec<Transition2>>,
}

impl OccupancyModel {
    pub fn constant(n_max: usize, m: Transition2) -> Self {
        OccupancyModel {
            n_max,
            p: vec![vec![m; SLOTS]; DAYS],
        }
    }

    /// Builds a model from a presence propensity `pi(day, slot)` in [0, 1] and
    /// a mixing rate `k`: arrivals happen with probability `k pi`, departures
    /// with `k (1 - pi)`, so an occupant's marginal follows `pi` with a lag of
    /// roughly `1/k` slots.
    pub fn from_propensity(n_max: usize, k: f64, pi: impl Fn(usize, usize) -> f64) -> Self {
        let mut p = vec![vec![[[0.0; 2]; 2]; SLOTS]; DAYS];
        for (d, row) in p.iter_mut().enumerate() {
            for (s, m) in row.iter_mut().enumerate() {
                let q = pi(d, s).clamp(0.0, 1.0);
                let arrive = k * q;
                let leave = k * (1.0 - q);
                *m = [[1.0 - arrive, arrive], [leave, 1.0 - leave]];
            }
        }
        OccupancyModel { n_max, p }
    }

    pub fn at(&self, day: usize, slot: usize) -> &Transition2 {
        &self.p[day % DAYS][slot % SLOTS]
    }

    pub fn validate(&self) -> Result<(), OccupancyError> {
        if self.n_max == 0 {
            return Err(OccupancyError::InvalidModel("n_max must be >= 1".into()));
        }
        if self.p.len() != DAYS || self.p.iter().any(|d| d.len() != SLOTS) {
            return Err(OccupancyError::InvalidModel("p must be 7 x 96".into()));
        }
        for (d, row) in self.p.iter().enumerate() {
            for (s, m) in row.iter().enumerate() {
                for r in m {
                    let ok = r.iter().all(|v| (0.0..=1.0).contains(v))
                        && (r[0] + r[1] - 1.0).abs() <= 1e-9;
                    if !ok {
                        return Err(OccupancyError::InvalidModel(format!(
                            "row at day {d} slot {s} is not stochastic: {r:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyState {
    /// `true` = inside the room.
    pub occupants: Vec<bool>,
}

impl OccupancyState {
    pub fn empty(n_max: usize) -> Self {
        OccupancyState {
            occupants: vec![false; n_max],
        }
    }

    pub fn count(&self) -> usize {
        self.occupants.iter().filter(|o| **o).count()
    }
}

/// Advances every occupant independently through `p(day, slot)`.
pub fn sample_step<R: RngCore + ?Sized>(
    model: &OccupancyModel,
    state: &OccupancyState,
    day: usize,
    slot: usize,
    rng: &mut R,
) -> OccupancyState {
    let m = model.at(day, slot);
    OccupancyState {
        occupants: state
            .occupants
            .iter()
            .map(|&inside| {
                let row = m[usize::from(inside)];
                rng.random::<f64>() < row[IN]
            })
            .collect(),
    }
}

/// Draws an initial state with each occupant inside with probability `q`.
pub fn sample_initial<R: RngCore + ?Sized>(n_max: usize, q: f64, rng: &mut R) -> OccupancyState {
    OccupancyState {
        occupants: (0..n_max).map(|_| rng.random::<f64>() < q).collect(),
    }
}

/// Per-occupant probability of being inside, propagated from "everybody
/// out" at Monday 00:00 for `horizon_weeks`; entry `[d][s]` is the
/// probability at the start of slot `s` of day `d` during the final week.
pub fn occupant_marginals(model: &OccupancyModel, horizon_weeks: usize) -> Vec<Vec<f64>> {
    let weeks = horizon_weeks.max(1);
    let mut q = 0.0;
    let mut grid = vec![vec![0.0; SLOTS]; DAYS];
    for w in 0..weeks {
        for (d, row) in grid.iter_mut().enumerate() {
            for (s, cell) in row.iter_mut().enumerate() {
                if w + 1 == weeks {
                    *cell = q;
                }
                let m = model.at(d, s);
                q = q * m[IN][IN] + (1.0 - q) * m[OUT][IN];
            }
        }
    }
    grid
}

/// Probability that the room is non-empty, `1 - (1 - q)^n_max` by
/// independence of occupants, over the final simulated week.
pub fn marginal_occupied_prob(model: &OccupancyModel, horizon_weeks: usize) -> Vec<Vec<f64>> {
    occupant_marginals(model, horizon_weeks)
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|q| 1.0 - (1.0 - q).powi(model.n_max as i32))
                .collect()
        })
        .collect()
}

/// Occupant counts on the 15-minute grid, starting at (`start_day`, `start_slot`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PresenceSeries {
    pub start_day: usize,
    pub start_slot: usize,
    pub counts: Vec<usize>,
}

impl PresenceSeries {
    pub fn day_slot(&self, k: usize) -> (usize, usize) {
        let abs = self.start_day * SLOTS + self.start_slot + k;
        ((abs / SLOTS) % DAYS, abs % SLOTS)
    }
}

pub fn day_slot_of(ts: DateTime<Utc>) -> (usize, usize) {
    let day = ts.weekday().num_days_from_monday() as usize;
    let slot = (ts.hour() * 4 + ts.minute() / 15) as usize;
    (day, slot)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OccupancyFitOptions {
    /// Pool transition counts over `+/- pool_slots` neighbouring slots of the
    /// same week position. 0 estimates every (day, slot) cell on its own.
    pub pool_slots: usize,
}

/// Estimates per-occupant transition probabilities from occupant counts.
///
/// Individual occupants are not observed, so every count change is explained
/// by the fewest individual moves (a rise of j means j arrivals and no
/// departures). Each cell then gets a pseudo-count of one per transition.
pub fn fit_occupancy(
    presence: &PresenceSeries,
    n_max: usize,
    opts: &OccupancyFitOptions,
) -> Result<OccupancyModel, OccupancyError> {
    let needed = 2 * WEEK_SLOTS;
    if presence.counts.len() < needed {
        return Err(OccupancyError::InsufficientData {
            needed,
            got: presence.counts.len(),
        });
    }
    if n_max == 0 {
        return Err(OccupancyError::InvalidModel("n_max must be >= 1".into()));
    }
    // counts[cell][from][to]
    let mut counts = vec![[[0.0f64; 2]; 2]; WEEK_SLOTS];
    for k in 0..presence.counts.len() - 1 {
        let (d, s) = presence.day_slot(k);
        let o = presence.counts[k].min(n_max);
        let o2 = presence.counts[k + 1].min(n_max);
        let c = &mut counts[d * SLOTS + s];
        if o2 >= o {
            c[IN][IN] += o as f64;
            c[OUT][IN] += (o2 - o) as f64;
            c[OUT][OUT] += (n_max - o2) as f64;
        } else {
            c[IN][IN] += o2 as f64;
            c[IN][OUT] += (o - o2) as f64;
            c[OUT][OUT] += (n_max - o) as f64;
        }
    }
    let w = opts.pool_slots as isize;
    let mut p = vec![vec![[[0.0; 2]; 2]; SLOTS]; DAYS];
    for cell in 0..WEEK_SLOTS {
        let mut acc = [[1.0f64; 2]; 2];
        for off in -w..=w {
            let j = (cell as isize + off).rem_euclid(WEEK_SLOTS as isize) as usize;
            for from in 0..2 {
                for to in 0..2 {
                    acc[from][to] += counts[j][from][to];
                }
            }
        }
        let m = &mut p[cell / SLOTS][cell % SLOTS];
        for from in 0..2 {
            let total = acc[from][0] + acc[from][1];
            m[from] = [acc[from][0] / total, acc[from][1] / total];
        }
    }
    Ok(OccupancyModel { n_max, p })
}

fn slot_of(hour: u32, minute: u32) -> usize {
    (hour * 4 + minute / 15) as usize
}

fn in_window(slot: usize, from: usize, to: usize) -> bool {
    if from <= to {
        slot >= from && slot < to
    } else {
        slot >= from || slot < to
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomProfile {
    LivingRoom,
    Bedroom,
    Bathroom,
}

impl RoomProfile {
    pub const ALL: [RoomProfile; 3] = [RoomProfile::LivingRoom, RoomProfile::Bedroom, RoomProfile::Bathroom];

    pub fn as_str(self) -> &'static str {
        match self {
            RoomProfile::LivingRoom => "living_room",
            RoomProfile::Bedroom => "bedroom",
            RoomProfile::Bathroom => "bathroom",
        }
    }

    pub fn occupancy(self) -> OccupancyModel {
        match self {
            RoomProfile::LivingRoom => living_room_profile(),
            RoomProfile::Bedroom => bedroom_profile(),
            RoomProfile::Bathroom => bathroom_profile(),
        }
    }
}

impl std::fmt::Display for RoomProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoomProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoomProfile::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown room profile `{s}` (living_room, bedroom, bathroom)"))
    }
}

fn is_weekend(day: usize) -> bool {
    day >= 5
}

/// Two sleepers; in bed 22:30-06:30 on work nights, 23:30-08:30 at weekends.
fn bedroom_profile() -> OccupancyModel {
    OccupancyModel::from_propensity(2, 0.35, |d, s| {
        // the night starting on day d ends on day d+1
        let bed = if matches!(d, 4 | 5) { slot_of(23, 30) } else { slot_of(22, 30) };
        let wake = if is_weekend(d) { slot_of(8, 30) } else { slot_of(6, 30) };
        let asleep = s >= bed || s < wake;
        if asleep { 0.97 } else { 0.02 }
    })
}

/// One user at a time, low but steady use during waking hours.
fn bathroom_profile() -> OccupancyModel {
    OccupancyModel::from_propensity(1, 0.6, |_, s| {
        if in_window(s, slot_of(6, 30), slot_of(8, 30)) || in_window(s, slot_of(21, 0), slot_of(23, 0)) {
            0.35
        } else if in_window(s, slot_of(6, 0), slot_of(23, 0)) {
            0.22
        } else {
            0.05
        }
    })
}

/// Family of four: breakfast, lunch and evening peaks, light daytime use.
fn living_room_profile() -> OccupancyModel {
    OccupancyModel::from_propensity(4, 0.25, |d, s| {
        if in_window(s, slot_of(18, 0), slot_of(23, 0)) {
            0.65
        } else if in_window(s, slot_of(12, 0), slot_of(14, 0)) {
            0.5
        } else if in_window(s, slot_of(7, 0), slot_of(9, 0)) {
            0.45
        } else if in_window(s, slot_of(9, 0), slot_of(18, 0)) {
            if is_weekend(d) { 0.35 } else { 0.08 }
        } else {
            0.01
        }
    })
}

/// The three built-in room occupancy models, keyed by profile.
pub fn builtin_synthetic_profiles() -> [(RoomProfile, OccupancyModel); 3] {
    RoomProfile::ALL.map(|r| (r, r.occupancy()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceRow {
    pub ts: DateTime<Utc>,
    pub room: String,
    pub occupants: usize,
}

pub fn write_presence_csv<W: Write>(w: W, rows: &[PresenceRow]) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["ts", "room", "occupants"])?;
    for r in rows {
        wtr.write_record([
            crate::bridge::format_ts(r.ts),
            r.room.clone(),
            r.occupants.to_string(),
        ])?;
    }
    wtr.flush()
}

pub fn read_presence_csv<R: Read>(r: R) -> Result<Vec<PresenceRow>, OccupancyError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| OccupancyError::MalformedRow(line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(OccupancyError::MalformedRow(line, "expected 3 columns".into()));
        }
        let ts = crate::bridge::parse_ts(&rec[0])
            .ok_or_else(|| OccupancyError::MalformedRow(line, "bad timestamp".into()))?;
        let occupants = rec[2]
            .parse()
            .map_err(|_| OccupancyError::MalformedRow(line, "bad occupant count".into()))?;
        out.push(PresenceRow {
            ts,
            room: rec[1].to_string(),
            occupants,
        });
    }
    Ok(out)
}

/// Presence rows of one room as a grid series (rows assumed contiguous on the
/// 15-minute grid and sorted).
pub fn presence_series(rows: &[PresenceRow], room: &str) -> Option<PresenceSeries> {
    let mine: Vec<&PresenceRow> = rows.iter().filter(|r| r.room == room).collect();
    let first = mine.first()?;
    let (start_day, start_slot) = day_slot_of(first.ts);
    Some(PresenceSeries {
        start_day,
        start_slot,
        counts: mine.iter().map(|r| r.occupants).collect(),
    })
}
