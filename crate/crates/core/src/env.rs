//! Heating-control MDP built from the two twins, plus the ground-truth plant
//! that stands in for the real house.
//!
//! The environment owns three independent random streams (episode start,
//! occupancy, thermal noise). Occupancy and start offsets therefore never
//! depend on the actions taken, which lets every rollout be compared against
//! the perfect-foresight bound on the very same occupancy trace.

use crate::occupancy::{
    marginal_occupied_prob, occupant_marginals, sample_initial, sample_step, OccupancyModel, OccupancyState,
    RoomProfile, DAYS, SLOTS, SLOT_MINUTES,
};
use crate::thermal::{step as thermal_step, ExogenousInput, ModelKind, ThermalError, ThermalModelParams, ThermalState};
use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("episode finished; call reset")]
    EpisodeFinished,
    #[error("action index {0} out of range")]
    InvalidAction(usize),
    #[error("ambient trace has {got} samples, episodes need {needed}")]
    AmbientTooShort { needed: usize, got: usize },
    #[error("invalid MDP configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Thermal(#[from] ThermalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct MdpConfig {
    /// Episode length in steps.
    pub episode_len: usize,
    pub step_minutes: f64,
    pub comfort_temp: f64,
    pub threshold_temp: f64,
    pub energy_cost: f64,
    pub swing_penalty: f64,
    pub discount: f64,
    /// Number of discrete heating levels; level k maps to power k/(levels-1).
    pub levels: usize,
    /// Evaluate the swing term with the sign of the closed-form expression
    /// instead of the "penalize moving away from equilibrium" rule.
    pub literal_swing_sign: bool,
}

impl Default for MdpConfig {
    fn default() -> Self {
        MdpConfig {
            episode_len: 1000,
            step_minutes: 15.0,
            comfort_temp: 18.0,
            threshold_temp: 3.0,
            energy_cost: 0.25,
            swing_penalty: 0.2,
            discount: 0.95,
            levels: 3,
            literal_swing_sign: false,
        }
    }
}

impl MdpConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.episode_len == 0 {
            return bad("episodeLen must be positive");
        }
        if !(self.step_minutes > 0.0) {
            return bad("stepMinutes must be positive");
        }
        if !(self.threshold_temp > 0.0 && self.energy_cost > 0.0 && self.swing_penalty > 0.0) {
            return bad("thresholdTemp, energyCost and swingPenalty must be positive");
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must lie in (0, 1)");
        }
        if self.levels < 2 {
            return bad("levels must be at least 2");
        }
        Ok(())
    }

    pub fn level(&self, action_index: usize) -> f64 {
        action_index as f64 / (self.levels - 1) as f64
    }

    /// Reward bounds `[-energy_cost - swing_penalty, 1]`.
    pub fn reward_bounds(&self) -> (f64, f64) {
        (-self.energy_cost - self.swing_penalty, 1.0)
    }
}

fn step_fn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Comfort reward minus energy cost minus the swing penalty, evaluated on the
/// temperature that results from taking action `a` with `o` occupants.
pub fn reward(t_i: f64, o: usize, a: f64, cfg: &MdpConfig) -> f64 {
    let comfort = step_fn(t_i - cfg.comfort_temp) * if o > 0 { 1.0 } else { 0.0 };
    let energy = cfg.energy_cost * a;
    let dev = t_i - cfg.comfort_temp;
    let swing = if cfg.literal_swing_sign {
        step_fn(dev.abs() - cfg.threshold_temp) * (1.0 - 2.0 * step_fn(a)) * dev.signum()
    } else {
        let too_cold_idle = dev < -cfg.threshold_temp && a <= 0.0;
        let too_hot_heating = dev > cfg.threshold_temp && a > 0.0;
        if too_cold_idle || too_hot_heating {
            1.0
        } else {
            0.0
        }
    };
    comfort - energy - cfg.swing_penalty * swing
}

/// Start of the synthetic heating season (a Monday).
pub fn season_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2022, 11, 7, 0, 0, 0).unwrap()
}

pub const SEASON_DAYS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AmbientConfig {
    pub start_temp: f64,
    pub end_temp: f64,
    pub daily_amplitude: f64,
    /// Hour of the daily minimum.
    pub min_hour: f64,
    /// Stationary standard deviation of the AR(1) component.
    pub noise_sigma: f64,
    pub noise_rho: f64,
}

impl Default for AmbientConfig {
    fn default() -> Self {
        AmbientConfig {
            start_temp: 12.0,
            end_temp: 5.0,
            daily_amplitude: 3.0,
            min_hour: 5.0,
            noise_sigma: 0.5,
            noise_rho: 0.9,
        }
    }
}

/// Outdoor temperature on the 15-minute grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbientTrace {
    pub start: DateTime<Utc>,
    pub values: Vec<f64>,
}

impl AmbientTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ts(&self, k: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(SLOT_MINUTES * k as i64)
    }

    /// (day of week, slot) of sample k.
    pub fn day_slot(&self, k: usize) -> (usize, usize) {
        crate::occupancy::day_slot_of(self.ts(k))
    }

    pub fn day_mean(&self, day: usize) -> f64 {
        let s = &self.values[day * SLOTS..((day + 1) * SLOTS).min(self.len())];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Linear seasonal drift plus a daily sinusoid plus AR(1) noise, from
/// `season_start()` for `days` days.
pub fn generate_ambient_with(days: usize, seed: u64, cfg: &AmbientConfig) -> AmbientTrace {
    let n = days.max(1) * SLOTS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let innovation = cfg.noise_sigma * (1.0 - cfg.noise_rho * cfg.noise_rho).sqrt();
    let mut ar = if cfg.noise_sigma > 0.0 {
        cfg.noise_sigma * normal.sample(&mut rng)
    } else {
        0.0
    };
    let values = (0..n)
        .map(|k| {
            let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
            let drift = cfg.start_temp + (cfg.end_temp - cfg.start_temp) * frac;
            let hour = (k % SLOTS) as f64 * SLOT_MINUTES as f64 / 60.0;
            let daily = -cfg.daily_amplitude * (2.0 * PI * (hour - cfg.min_hour) / 24.0).cos();
            let v = drift + daily + ar;
            if cfg.noise_sigma > 0.0 {
                ar = cfg.noise_rho * ar + innovation * normal.sample(&mut rng);
            }
            v
        })
        .collect();
    AmbientTrace {
        start: season_start(),
        values,
    }
}

pub fn generate_ambient(days: usize, seed: u64) -> AmbientTrace {
    generate_ambient_with(days, seed, &AmbientConfig::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EnvState {
    pub thermal: ThermalState,
    pub occupancy: OccupancyState,
    pub day: usize,
    pub slot: usize,
    #[serde(rename = "T_a")]
    pub t_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Transition {
    pub state: EnvState,
    pub action_index: usize,
    pub reward: f64,
    pub next_state: EnvState,
    pub done: bool,
}

/// Where temperatures come from: a fitted twin, or the ground-truth plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ThermalDynamics {
    pub kind: ModelKind,
    pub params: ThermalModelParams,
    /// Draw process noise with `params.sigma`.
    pub noisy: bool,
}

/// How episodes are initialised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpisodeInit {
    /// Initial room temperature is uniform in this range; hidden nodes start equal to it.
    pub temp_range: (f64, f64),
    /// Inclusive range of start offsets into the ambient trace; `None` allows
    /// any offset that fits a full episode.
    pub start_window: Option<(usize, usize)>,
}

impl Default for EpisodeInit {
    fn default() -> Self {
        EpisodeInit {
            temp_range: (16.0, 20.0),
            start_window: None,
        }
    }
}

impl EpisodeInit {
    pub fn from_trace_start() -> Self {
        EpisodeInit {
            start_window: Some((0, 0)),
            ..Default::default()
        }
    }
}

const STREAM_START: u64 = 0;
const STREAM_OCCUPANCY: u64 = 1;
const STREAM_NOISE: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Episodic heating MDP. Reset picks a start offset in the ambient trace, the
/// initial temperature and the initial occupants; each step advances the
/// thermal model by one slot, samples occupancy and scores the result.
#[derive(Debug, Clone)]
pub struct HeatingEnv {
    pub dynamics: ThermalDynamics,
    pub occupancy: OccupancyModel,
    pub ambient: AmbientTrace,
    pub cfg: MdpConfig,
    pub init: EpisodeInit,
    seed: u64,
    occupant_prior: Vec<Vec<f64>>,
    start_rng: ChaCha8Rng,
    occ_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    state: Option<EnvState>,
    offset: usize,
    steps: usize,
}

impl HeatingEnv {
    pub fn new(
        dynamics: ThermalDynamics,
        occupancy: OccupancyModel,
        ambient: AmbientTrace,
        cfg: MdpConfig,
        seed: u64,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        dynamics.params.validate(dynamics.kind)?;
        occupancy
            .validate()
            .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        if ambient.len() < cfg.episode_len + 1 {
            return Err(EnvError::AmbientTooShort {
                needed: cfg.episode_len + 1,
                got: ambient.len(),
            });
        }
        let occupant_prior = occupant_marginals(&occupancy, 4);
        Ok(HeatingEnv {
            dynamics,
            occupancy,
            ambient,
            cfg,
            init: EpisodeInit::default(),
            seed,
            occupant_prior,
            start_rng: stream(seed, STREAM_START),
            occ_rng: stream(seed, STREAM_OCCUPANCY),
            noise_rng: stream(seed, STREAM_NOISE),
            state: None,
            offset: 0,
            steps: 0,
        })
    }

    pub fn with_init(mut self, init: EpisodeInit) -> Self {
        self.init = init;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_actions(&self) -> usize {
        self.cfg.levels
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Absolute index of the current sample in the ambient trace.
    pub fn trace_index(&self) -> usize {
        self.offset + self.steps
    }

    pub fn is_done(&self) -> bool {
        self.steps >= self.cfg.episode_len
    }

    pub fn reset(&mut self) -> EnvState {
        let max_offset = self.ambient.len() - self.cfg.episode_len - 1;
        let (lo, hi) = match self.init.start_window {
            Some((lo, hi)) => (lo.min(max_offset), hi.min(max_offset)),
            None => (0, max_offset),
        };
        self.offset = if hi > lo {
            self.start_rng.random_range(lo..=hi)
        } else {
            lo
        };
        let (lo, hi) = self.init.temp_range;
        let t0 = if hi > lo {
            self.start_rng.random_range(lo..hi)
        } else {
            lo
        };
        let (day, slot) = self.ambient.day_slot(self.offset);
        let q = self.occupant_prior[day][slot];
        let occupancy = sample_initial(self.occupancy.n_max, q, &mut self.occ_rng);
        self.steps = 0;
        let s = EnvState {
            thermal: ThermalState::at(t0),
            occupancy,
            day,
            slot,
            t_a: self.ambient.values[self.offset],
        };
        self.state = Some(s.clone());
        s
    }

    pub fn step(&mut self, action_index: usize) -> Result<Transition, EnvError> {
        if action_index >= self.cfg.levels {
            return Err(EnvError::InvalidAction(action_index));
        }
        if self.is_done() {
            return Err(EnvError::EpisodeFinished);
        }
        let state = match &self.state {
            Some(s) => s.clone(),
            None => self.reset(),
        };
        let a = self.cfg.level(action_index);
        let input = ExogenousInput { t_a: state.t_a, a };
        let noise: Option<&mut dyn rand::RngCore> = if self.dynamics.noisy {
            Some(&mut self.noise_rng)
        } else {
            None
        };
        let thermal = thermal_step(
            self.dynamics.kind,
            &self.dynamics.params,
            state.thermal,
            input,
            self.cfg.step_minutes,
            noise,
        )?;
        let occupancy = sample_step(&self.occupancy, &state.occupancy, state.day, state.slot, &mut self.occ_rng);
        self.steps += 1;
        let k = self.offset + self.steps;
        let (day, slot) = self.ambient.day_slot(k);
        let next = EnvState {
            thermal,
            occupancy,
            day,
            slot,
            t_a: self.ambient.values[k],
        };
        let r = reward(next.thermal.t_i, next.occupancy.count(), a, &self.cfg);
        let done = self.is_done();
        self.state = Some(next.clone());
        Ok(Transition {
            state,
            action_index,
            reward: r,
            next_state: next,
            done,
        })
    }
}

/// Environment whose temperatures come from a fitted thermal twin and whose
/// occupants come from the room twin. A positive `params.sigma` adds process
/// noise of that scale to the room temperature.
pub fn make_virtual_env(
    kind: ModelKind,
    params: ThermalModelParams,
    occupancy: OccupancyModel,
    ambient: AmbientTrace,
    cfg: MdpConfig,
    seed: u64,
) -> Result<HeatingEnv, EnvError> {
    HeatingEnv::new(
        ThermalDynamics {
            kind,
            params,
            noisy: params.sigma > 0.0,
        },
        occupancy,
        ambient,
        cfg,
        seed,
    )
}

/// Hidden ground-truth parameters of each room (normalized units, `C_i = 1`,
/// time in hours). Documented in `docs/plant.md`.
pub fn plant_params(room: RoomProfile) -> ThermalModelParams {
    match room {
        // interior room, well insulated, strong radiator
        RoomProfile::Bathroom => ThermalModelParams {
            c_i: 1.0,
            c_e: 0.7,
            c_h: 0.15,
            r_ia: 20.0,
            r_ie: 0.6,
            r_ea: 9.0,
            r_ih: 1.8,
            phi_h: 9.0,
            sigma: 0.6,
        },
        // two exterior walls, heavy envelope
        RoomProfile::Bedroom => ThermalModelParams {
            c_i: 1.0,
            c_e: 1.0,
            c_h: 0.3,
            r_ia: 8.0,
            r_ie: 0.6,
            r_ea: 4.0,
            r_ih: 1.0,
            phi_h: 8.0,
            sigma: 0.7,
        },
        RoomProfile::LivingRoom => ThermalModelParams {
            c_i: 1.0,
            c_e: 1.5,
            c_h: 0.4,
            r_ia: 10.0,
            r_ie: 0.6,
            r_ea: 3.5,
            r_ih: 0.8,
            phi_h: 8.0,
            sigma: 0.55,
        },
    }
}

pub const PLANT_KIND: ModelKind = ModelKind::TiTeThRia;

/// Ambient seed derived from an environment seed.
pub fn ambient_seed(seed: u64) -> u64 {
    seed ^ 0xA5A5_5A5A_0F0F_F0F0
}

/// Ground-truth environment for `room`: fixed hidden parameters, process
/// noise, built-in occupancy and a season-long synthetic ambient trace.
pub fn make_plant_env(room: RoomProfile, cfg: MdpConfig, seed: u64) -> Result<HeatingEnv, EnvError> {
    plant_env_on(room, season_ambient(&cfg, seed), cfg, seed)
}

/// Season-long ambient trace of the plant built with `seed`.
pub fn season_ambient(cfg: &MdpConfig, seed: u64) -> AmbientTrace {
    let days = SEASON_DAYS.max(cfg.episode_len.div_ceil(SLOTS) + 1);
    generate_ambient(days, ambient_seed(seed))
}

/// Plant for `room` driven by a given ambient trace; `seed` feeds the start,
/// occupancy and noise streams.
pub fn plant_env_on(room: RoomProfile, ambient: AmbientTrace, cfg: MdpConfig, seed: u64) -> Result<HeatingEnv, EnvError> {
    HeatingEnv::new(
        ThermalDynamics {
            kind: PLANT_KIND,
            params: plant_params(room),
            noisy: true,
        },
        room.occupancy(),
        ambient,
        cfg,
        seed,
    )
}

/// Bang-bang thermostat following a daily setpoint schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Thermostat {
    /// (start slot, end slot, setpoint); windows may wrap past midnight.
    pub schedule: Vec<(usize, usize, f64)>,
    /// Width of the switching band centred on the setpoint.
    pub hysteresis: f64,
    #[serde(skip)]
    heating: bool,
}

impl Thermostat {
    pub fn constant(setpoint: f64) -> Self {
        Thermostat {
            schedule: vec![(0, SLOTS, setpoint)],
            hysteresis: 0.5,
            heating: false,
        }
    }

    /// Manual schedules of the house: bedroom heated at night to 16 degC,
    /// living room during the day, bathroom morning and evening.
    pub fn manual(room: RoomProfile) -> Self {
        let schedule = match room {
            RoomProfile::Bedroom => vec![(88, 28, 16.0)],
            RoomProfile::LivingRoom => vec![(28, 92, 20.0)],
            RoomProfile::Bathroom => vec![(24, 36, 21.0), (72, 92, 21.0)],
        };
        Thermostat {
            schedule,
            hysteresis: 0.5,
            heating: false,
        }
    }

    pub fn setpoint(&self, slot: usize) -> Option<f64> {
        self.schedule.iter().find_map(|&(from, to, sp)| {
            let inside = if from <= to {
                slot >= from && slot < to
            } else {
                slot >= from || slot < to
            };
            inside.then_some(sp)
        })
    }

    /// Heater on/off for the measured room temperature.
    pub fn decide(&mut self, t_i: f64, slot: usize) -> bool {
        match self.setpoint(slot) {
            None => self.heating = false,
            Some(sp) => {
                if t_i < sp - self.hysteresis / 2.0 {
                    self.heating = true;
                } else if t_i > sp + self.hysteresis / 2.0 {
                    self.heating = false;
                }
            }
        }
        self.heating
    }

    pub fn reset(&mut self) {
        self.heating = false;
    }

    pub fn action_index(&mut self, state: &EnvState, levels: usize) -> usize {
        if self.decide(state.thermal.t_i, state.slot) {
            levels - 1
        } else {
            0
        }
    }
}

/// Summary of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub mean_reward: f64,
    pub energy_used: f64,
    pub comfort_violation_steps: usize,
    /// Mean reward of a controller with perfect occupancy foresight and free
    /// energy on the same occupancy trace.
    pub ideal_reward: f64,
}

#[derive(Debug, Default)]
pub struct EpisodeAccumulator {
    steps: usize,
    reward: f64,
    energy: f64,
    violations: usize,
    occupied: usize,
}

impl EpisodeAccumulator {
    pub fn push(&mut self, tr: &Transition, cfg: &MdpConfig) {
        self.push_parts(
            tr.reward,
            cfg.level(tr.action_index),
            tr.next_state.occupancy.count(),
            tr.next_state.thermal.t_i,
            cfg.comfort_temp,
        );
    }

    pub fn push_parts(&mut self, reward: f64, level: f64, occupants: usize, t_i: f64, comfort_temp: f64) {
        self.steps += 1;
        self.reward += reward;
        self.energy += level;
        if occupants > 0 {
            self.occupied += 1;
            if t_i <= comfort_temp {
                self.violations += 1;
            }
        }
    }

    pub fn finish(self, episode: usize) -> EpisodeMetrics {
        let n = self.steps.max(1) as f64;
        EpisodeMetrics {
            episode,
            mean_reward: self.reward / n,
            energy_used: self.energy,
            comfort_violation_steps: self.violations,
            ideal_reward: self.occupied as f64 / n,
        }
    }
}

/// Runs the thermostat for one full episode.
pub fn run_thermostat_episode(
    env: &mut HeatingEnv,
    thermostat: &mut Thermostat,
    episode: usize,
) -> Result<(EpisodeMetrics, Vec<Transition>), EnvError> {
    let mut state = env.reset();
    thermostat.reset();
    let mut acc = EpisodeAccumulator::default();
    let mut trace = Vec::with_capacity(env.cfg.episode_len);
    while !env.is_done() {
        let action = thermostat.action_index(&state, env.cfg.levels);
        let tr = env.step(action)?;
        acc.push(&tr, &env.cfg);
        state = tr.next_state.clone();
        trace.push(tr);
    }
    Ok((acc.finish(episode), trace))
}

/// Sensor record of the plant on the regular grid: sample k holds the state
/// at time k and the action applied from k to k+1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlantRun {
    pub start: DateTime<Utc>,
    pub t_i: Vec<f64>,
    pub t_a: Vec<f64>,
    pub action: Vec<f64>,
    pub occupants: Vec<usize>,
}

impl PlantRun {
    pub fn len(&self) -> usize {
        self.t_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_i.is_empty()
    }

    pub fn ts(&self, k: usize) -> DateTime<Utc> {
        self.start + Duration::minutes(SLOT_MINUTES * k as i64)
    }

    pub fn observed(&self) -> crate::thermal::ObservedSeries {
        crate::thermal::ObservedSeries {
            t_i: self.t_i.clone(),
            t_a: self.t_a.clone(),
            action: self.action.clone(),
        }
    }
}

/// Runs the room's manual thermostat on the plant from the start of the season
/// for `days` days.
pub fn run_manual_policy(room: RoomProfile, days: usize, seed: u64) -> Result<PlantRun, EnvError> {
    let n = days * SLOTS;
    let cfg = MdpConfig {
        episode_len: n,
        levels: 2,
        ..Default::default()
    };
    let mut env = make_plant_env(room, cfg, seed)?.with_init(EpisodeInit::from_trace_start());
    let mut thermostat = Thermostat::manual(room);
    let mut state = env.reset();
    let mut run = PlantRun {
        start: env.ambient.start,
        t_i: Vec::with_capacity(n),
        t_a: Vec::with_capacity(n),
        action: Vec::with_capacity(n),
        occupants: Vec::with_capacity(n),
    };
    while !env.is_done() {
        let action = thermostat.action_index(&state, 2);
        run.t_i.push(state.thermal.t_i);
        run.t_a.push(state.t_a);
        run.action.push(action as f64);
        run.occupants.push(state.occupancy.count());
        state = env.step(action)?.next_state;
    }
    Ok(run)
}

/// Grid of room-occupied probabilities for a profile (convenience for reports).
pub fn occupancy_heatmap(room: RoomProfile) -> Vec<Vec<f64>> {
    marginal_occupied_prob(&room.occupancy(), 4)
}

/// Calendar position `steps` slots after (day, slot).
pub fn advance_calendar(day: usize, slot: usize, steps: usize) -> (usize, usize) {
    let abs = day * SLOTS + slot + steps;
    ((abs / SLOTS) % DAYS, abs % SLOTS)
}
