//! The pipeline stages. Each stage reads only the artifacts written by the
//! stages before it, so any later artifact can be deleted and rebuilt.

use crate::config::PipelineConfig;
use crate::{OrchestratorError, Stage};
use chrono::{DateTime, Duration, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thingtwin_core::bridge::{write_csv, CommandLog, CommandRecord, SeriesPoint, SeriesStore};
use thingtwin_core::dqn::{
    evaluate_with, train, Checkpoint, Environment, FeatureStats, TwinFeatureEnv,
};
use thingtwin_core::env::{
    make_virtual_env, plant_env_on, run_manual_policy, run_thermostat_episode, season_ambient,
    AmbientTrace, EpisodeInit, EpisodeMetrics, Thermostat,
};
use thingtwin_core::occupancy::{
    fit_occupancy, presence_series, read_presence_csv, write_presence_csv, OccupancyFitOptions,
    OccupancyModel, PresenceRow, RoomProfile, SLOTS, WEEK_SLOTS,
};
use thingtwin_core::thermal::{
    select_model, FitOptions, ModelKind, ObservedSeries, Selection, ThermalModelParams,
};

pub const SENSORS_CSV: &str = "sensors.csv";
pub const PRESENCE_CSV: &str = "presence.csv";
pub const TWIN_JSON: &str = "twin.json";
pub const MSE_TABLE_JSON: &str = "mse_table.json";
pub const OCCUPANCY_JSON: &str = "occupancy.json";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const TRAIN_EPOCHS_JSONL: &str = "train_epochs.jsonl";
pub const TRAIN_EPISODES_JSONL: &str = "train_episodes.jsonl";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const COMMANDS_JSONL: &str = "commands.jsonl";
pub const MANIFEST_JSON: &str = "manifest.json";

pub const OUTDOOR_ENTITY: &str = "sensor.outdoor_temperature";

pub fn room_entity(room: RoomProfile) -> String {
    format!("climate.{}", room.as_str())
}

pub fn heater_entity(room: RoomProfile) -> String {
    format!("heating.{}", room.as_str())
}

/// Persisted thermal twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TwinArtifact {
    pub room: RoomProfile,
    pub kind: ModelKind,
    pub params: ThermalModelParams,
    pub dt_minutes: f64,
    pub train_days: usize,
    pub train_samples: usize,
    /// Start of the data the twin was fitted on.
    pub data_start: DateTime<Utc>,
    /// End of the training window (simulated time, not wall clock).
    pub fitted_at: DateTime<Utc>,
    pub train_mse: f64,
    pub heldout_mse: f64,
    pub features: FeatureStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancySource {
    Fitted,
    Builtin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OccupancyArtifact {
    pub room: RoomProfile,
    pub source: OccupancySource,
    pub pool_slots: usize,
    pub samples: usize,
    pub model: OccupancyModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochLine {
    pub epoch: usize,
    pub mean_reward: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpisodeLine {
    pub epoch: usize,
    #[serde(flatten)]
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PolicySummary {
    pub mean_reward: f64,
    /// Mean heater energy per episode (sum of power fractions).
    pub mean_energy: f64,
    pub mean_comfort_violation_steps: f64,
    pub episodes: Vec<EpisodeMetrics>,
}

impl PolicySummary {
    fn from_episodes(episodes: Vec<EpisodeMetrics>) -> Self {
        let n = episodes.len().max(1) as f64;
        PolicySummary {
            mean_reward: episodes.iter().map(|m| m.mean_reward).sum::<f64>() / n,
            mean_energy: episodes.iter().map(|m| m.energy_used).sum::<f64>() / n,
            mean_comfort_violation_steps: episodes
                .iter()
                .map(|m| m.comfort_violation_steps as f64)
                .sum::<f64>()
                / n,
            episodes,
        }
    }
}

/// Closed-loop evaluation on the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub room: RoomProfile,
    pub twin_kind: ModelKind,
    pub episode_len: usize,
    /// Inclusive range of episode start offsets (15-minute slots into the season).
    pub start_window: (usize, usize),
    pub agent: PolicySummary,
    pub baseline: PolicySummary,
    /// Mean reward of perfect foresight with free energy on the same occupancy.
    pub ideal: f64,
    pub agent_to_ideal: f64,
    pub commands_published: u64,
}

fn fail<E: Display>(stage: Stage) -> impl Fn(E) -> OrchestratorError {
    move |e| OrchestratorError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn ensure_dir(dir: &Path, stage: Stage) -> Result<(), OrchestratorError> {
    std::fs::create_dir_all(dir).map_err(|e| OrchestratorError::Stage {
        stage,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T, stage: Stage) -> Result<(), OrchestratorError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(fail(stage))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| OrchestratorError::Stage {
        stage,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T], stage: Stage) -> Result<(), OrchestratorError> {
    let mut w = BufWriter::new(File::create(path).map_err(fail(stage))?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(fail(stage))?;
        w.write_all(b"\n").map_err(fail(stage))?;
    }
    w.flush().map_err(fail(stage))
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<T, OrchestratorError> {
    let raw = std::fs::read(path).map_err(|e| OrchestratorError::Stage {
        stage,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    serde_json::from_slice(&raw).map_err(|e| OrchestratorError::Stage {
        stage,
        message: format!("{}: {e}", path.display()),
    })
}

/// Files written by the data stage.
pub fn generate(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, OrchestratorError> {
    let stage = Stage::Generate;
    let dir = &cfg.paths.data_dir;
    ensure_dir(dir, stage)?;
    let run = run_manual_policy(cfg.room, cfg.generated_days(), cfg.seeds.data).map_err(fail(stage))?;

    let series = |entity: String, domain: &str, values: &[f64]| {
        values
            .iter()
            .enumerate()
            .map(|(k, v)| SeriesPoint {
                ts: run.ts(k),
                entity_id: entity.clone(),
                domain_tag: domain.to_string(),
                value: *v,
            })
            .collect::<Vec<_>>()
    };
    // entity order matches the bridge's own CSV export
    let mut points = series(room_entity(cfg.room), "climate", &run.t_i);
    points.extend(series(heater_entity(cfg.room), "heating", &run.action));
    points.extend(series(OUTDOOR_ENTITY.to_string(), "temperature", &run.t_a));

    let sensors = dir.join(SENSORS_CSV);
    let mut w = BufWriter::new(File::create(&sensors).map_err(fail(stage))?);
    write_csv(&mut w, &points).map_err(fail(stage))?;
    w.flush().map_err(fail(stage))?;

    let rows: Vec<PresenceRow> = run
        .occupants
        .iter()
        .enumerate()
        .map(|(k, n)| PresenceRow {
            ts: run.ts(k),
            room: cfg.room.as_str().to_string(),
            occupants: *n,
        })
        .collect();
    let presence = dir.join(PRESENCE_CSV);
    let mut w = BufWriter::new(File::create(&presence).map_err(fail(stage))?);
    write_presence_csv(&mut w, &rows).map_err(fail(stage))?;
    w.flush().map_err(fail(stage))?;
    Ok(vec![sensors, presence])
}

/// Sensor series of the room on the regular grid, read back through the bridge.
pub struct SensorData {
    pub start: DateTime<Utc>,
    pub observed: ObservedSeries,
}

pub fn load_sensors(cfg: &PipelineConfig, stage: Stage) -> Result<SensorData, OrchestratorError> {
    let mut store = SeriesStore::new();
    let path = cfg.paths.data_dir.join(SENSORS_CSV);
    store.ingest_csv(&path).map_err(|e| OrchestratorError::Stage {
        stage,
        message: format!("{}: {e}", path.display()),
    })?;
    let n = cfg.generated_days() * SLOTS;
    let room = room_entity(cfg.room);
    let (start, _) = store.span(&room).ok_or_else(|| OrchestratorError::Stage {
        stage,
        message: format!("no samples for {room}"),
    })?;
    let step = Duration::minutes(cfg.dt_minutes as i64);
    let end = start + step * (n as i32 - 1);
    let read = |entity: &str| -> Result<Vec<f64>, OrchestratorError> {
        let pts = store
            .read_series(entity, start, end, Some(cfg.dt_minutes as u32))
            .map_err(fail(stage))?;
        if pts.len() != n {
            return Err(OrchestratorError::Stage {
                stage,
                message: format!("{entity}: expected {n} samples, found {}", pts.len()),
            });
        }
        Ok(pts.into_iter().map(|p| p.value).collect())
    };
    Ok(SensorData {
        start,
        observed: ObservedSeries {
            t_i: read(&room)?,
            t_a: read(OUTDOOR_ENTITY)?,
            action: read(&heater_entity(cfg.room))?,
        },
    })
}

pub fn fit(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, OrchestratorError> {
    let stage = Stage::Fit;
    let data = load_sensors(cfg, stage)?;
    let split = cfg.train_days * SLOTS;
    let opts = FitOptions {
        starts: cfg.fit.starts,
        seed: cfg.seeds.fit,
        max_iters: cfg.fit.max_iters,
    };
    let selection = select_model(&data.observed, cfg.dt_minutes, split, &opts).map_err(fail(stage))?;
    let best = selection.best();
    tracing::info!(kind = best.kind.as_str(), heldout_mse = best.heldout_mse, "thermal twin selected");

    let path = cfg.paths.data_dir.join(PRESENCE_CSV);
    let raw = File::open(&path).map_err(|e| OrchestratorError::Stage {
        stage,
        message: format!("{}: {e}", path.display()),
    })?;
    let rows = read_presence_csv(raw).map_err(fail(stage))?;
    let presence = presence_series(&rows, cfg.room.as_str()).ok_or_else(|| OrchestratorError::Stage {
        stage,
        message: format!("no presence rows for {}", cfg.room),
    })?;
    let observed_max = presence.counts.iter().copied().max().unwrap_or(0);
    let n_max = cfg.room.occupancy().n_max.max(observed_max);
    let occupancy = if presence.counts.len() >= 2 * WEEK_SLOTS {
        let opts = OccupancyFitOptions {
            pool_slots: cfg.fit.occupancy_pool_slots,
        };
        OccupancyArtifact {
            room: cfg.room,
            source: OccupancySource::Fitted,
            pool_slots: opts.pool_slots,
            samples: presence.counts.len(),
            model: fit_occupancy(&presence, n_max, &opts).map_err(fail(stage))?,
        }
    } else {
        tracing::warn!(samples = presence.counts.len(), "presence record under two weeks, using the built-in profile");
        OccupancyArtifact {
            room: cfg.room,
            source: OccupancySource::Builtin,
            pool_slots: 0,
            samples: presence.counts.len(),
            model: cfg.room.occupancy(),
        }
    };

    let features = FeatureStats::from_window(
        best.kind,
        &data.observed.t_i[..split],
        &data.observed.t_a[..split],
        occupancy.model.n_max,
    );
    let step = Duration::minutes(cfg.dt_minutes as i64);
    let twin = TwinArtifact {
        room: cfg.room,
        kind: best.kind,
        params: best.params,
        dt_minutes: cfg.dt_minutes,
        train_days: cfg.train_days,
        train_samples: split,
        data_start: data.start,
        fitted_at: data.start + step * split as i32,
        train_mse: best.train_mse,
        heldout_mse: best.heldout_mse,
        features,
    };

    let dir = &cfg.paths.twin_dir;
    ensure_dir(dir, stage)?;
    let out = [dir.join(TWIN_JSON), dir.join(MSE_TABLE_JSON), dir.join(OCCUPANCY_JSON)];
    write_json(&out[0], &twin, stage)?;
    write_json(&out[1], &selection, stage)?;
    write_json(&out[2], &occupancy, stage)?;
    Ok(out.to_vec())
}

pub fn load_twin(cfg: &PipelineConfig, stage: Stage) -> Result<TwinArtifact, OrchestratorError> {
    read_json(&cfg.paths.twin_dir.join(TWIN_JSON), stage)
}

pub fn load_selection(cfg: &PipelineConfig) -> Result<Selection, OrchestratorError> {
    read_json(&cfg.paths.twin_dir.join(MSE_TABLE_JSON), Stage::Fit)
}

/// The training-window ambient, repeated whole until it covers one episode.
fn training_ambient(cfg: &PipelineConfig, data: &SensorData) -> AmbientTrace {
    let window = &data.observed.t_a[..cfg.train_days * SLOTS];
    let needed = cfg.mdp.episode_len + 1;
    let values = window.iter().copied().cycle().take(needed.max(window.len())).collect();
    AmbientTrace {
        start: data.start,
        values,
    }
}

pub fn train_stage(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, OrchestratorError> {
    let stage = Stage::Train;
    let twin = load_twin(cfg, stage)?;
    let occupancy: OccupancyArtifact = read_json(&cfg.paths.twin_dir.join(OCCUPANCY_JSON), stage)?;
    let data = load_sensors(cfg, stage)?;
    let ambient = training_ambient(cfg, &data);

    let venv = make_virtual_env(
        twin.kind,
        twin.params,
        occupancy.model,
        ambient,
        cfg.mdp.clone(),
        cfg.seeds.train,
    )
    .map_err(fail(stage))?;
    let mut env = TwinFeatureEnv::new(venv, twin.features.clone());
    let mut dqn = cfg.dqn.clone();
    dqn.n_tt = twin.kind.hidden_states();
    dqn.n_actions = cfg.mdp.levels;
    dqn.discount = cfg.mdp.discount;
    let out = train(&mut env, &dqn, cfg.mdp.comfort_temp, cfg.seeds.train).map_err(fail(stage))?;
    for (epoch, r) in out.epoch_rewards.iter().enumerate() {
        tracing::info!(epoch, mean_reward = r, "epoch finished");
    }

    let epochs: Vec<EpochLine> = out
        .epoch_rewards
        .iter()
        .enumerate()
        .map(|(epoch, r)| EpochLine {
            epoch,
            mean_reward: *r,
            episodes: dqn.episodes_per_epoch,
        })
        .collect();
    let episodes: Vec<EpisodeLine> = out
        .episodes
        .iter()
        .map(|m| EpisodeLine {
            epoch: m.episode / dqn.episodes_per_epoch,
            metrics: m.clone(),
        })
        .collect();
    let ckpt = Checkpoint::from_network(&out.net, cfg.seeds.train, dqn.epochs, Some(twin.features));

    ensure_dir(&cfg.paths.checkpoint_dir, stage)?;
    ensure_dir(&cfg.paths.metrics_dir, stage)?;
    let out = [
        cfg.paths.checkpoint_dir.join(CHECKPOINT_JSON),
        cfg.paths.metrics_dir.join(TRAIN_EPOCHS_JSONL),
        cfg.paths.metrics_dir.join(TRAIN_EPISODES_JSONL),
    ];
    write_json(&out[0], &ckpt, stage)?;
    write_jsonl(&out[1], &epochs, stage)?;
    write_jsonl(&out[2], &episodes, stage)?;
    Ok(out.to_vec())
}

/// Start offsets of evaluation episodes: inside the week after the training data.
pub fn eval_window(cfg: &PipelineConfig) -> (usize, usize) {
    let lo = cfg.eval_start_day() * SLOTS;
    (lo, lo + (7 * SLOTS).saturating_sub(cfg.mdp.episode_len))
}

pub fn eval_stage(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, OrchestratorError> {
    let stage = Stage::Eval;
    let twin = load_twin(cfg, stage)?;
    let ckpt: Checkpoint = read_json(&cfg.paths.checkpoint_dir.join(CHECKPOINT_JSON), stage)?;
    let net = ckpt.to_network().map_err(fail(stage))?;
    let features = ckpt.features.clone().unwrap_or_else(|| twin.features.clone());
    if features.kind != twin.kind {
        return Err(OrchestratorError::Stage {
            stage,
            message: format!(
                "checkpoint was trained on a {} twin, twin.json holds {}",
                features.kind.as_str(),
                twin.kind.as_str()
            ),
        });
    }

    let ambient = season_ambient(&cfg.mdp, cfg.seeds.data);
    let window = eval_window(cfg);
    let init = EpisodeInit {
        start_window: Some(window),
        ..Default::default()
    };
    let plant = plant_env_on(cfg.room, ambient.clone(), cfg.mdp.clone(), cfg.seeds.eval)
        .map_err(fail(stage))?
        .with_init(init.clone());
    let mut env = TwinFeatureEnv::with_observer(plant, features, twin.kind, twin.params);
    if env.obs_len() != net.input_len() {
        return Err(OrchestratorError::Stage {
            stage,
            message: "checkpoint input width does not match the twin features".into(),
        });
    }
    let mut actions: Vec<(usize, f64)> = Vec::new();
    let agent = evaluate_with(&net, &mut env, cfg.eval_episodes, cfg.mdp.comfort_temp, |_, r| {
        if let Some(info) = &r.info {
            actions.push((info.trace_index - 1, info.level));
        }
    })
    .map_err(fail(stage))?;

    // actuation path: every greedy action goes out through the bridge
    ensure_dir(&cfg.paths.metrics_dir, stage)?;
    let commands = cfg.paths.metrics_dir.join(COMMANDS_JSONL);
    if commands.exists() {
        std::fs::remove_file(&commands).map_err(fail(stage))?;
    }
    let mut log = CommandLog::open(&commands).map_err(fail(stage))?;
    let entity = heater_entity(cfg.room);
    for (k, level) in actions {
        log.publish(&CommandRecord::power(ambient.ts(k), &entity, level))
            .map_err(fail(stage))?;
    }

    let mut plant = plant_env_on(cfg.room, ambient, cfg.mdp.clone(), cfg.seeds.eval)
        .map_err(fail(stage))?
        .with_init(init);
    let mut thermostat = Thermostat::manual(cfg.room);
    let baseline = (0..cfg.eval_episodes)
        .map(|ep| run_thermostat_episode(&mut plant, &mut thermostat, ep).map(|(m, _)| m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail(stage))?;

    let agent = PolicySummary::from_episodes(agent.episodes);
    let ideal = agent.episodes.iter().map(|m| m.ideal_reward).sum::<f64>() / agent.episodes.len() as f64;
    let report = EvalReport {
        room: cfg.room,
        twin_kind: twin.kind,
        episode_len: cfg.mdp.episode_len,
        start_window: window,
        agent_to_ideal: if ideal > 0.0 { agent.mean_reward / ideal } else { 0.0 },
        agent,
        baseline: PolicySummary::from_episodes(baseline),
        ideal,
        commands_published: log.len(),
    };
    tracing::info!(
        agent = report.agent.mean_reward,
        baseline = report.baseline.mean_reward,
        ideal = report.ideal,
        "plant evaluation"
    );
    let path = cfg.paths.metrics_dir.join(EVAL_REPORT_JSON);
    write_json(&path, &report, stage)?;
    Ok(vec![path, commands])
}

pub fn load_report(cfg: &PipelineConfig) -> Result<EvalReport, OrchestratorError> {
    read_json(&cfg.paths.metrics_dir.join(EVAL_REPORT_JSON), Stage::Eval)
}
