//! Pipeline configuration: defaults, JSON file overlay and `key=value` overrides.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};
use thingtwin_core::dqn::DqnConfig;
use thingtwin_core::env::{MdpConfig, SEASON_DAYS};
use thingtwin_core::occupancy::{RoomProfile, SLOTS, SLOT_MINUTES};

/// Days of data generated after the training window and held out from fitting.
pub const HELDOUT_DAYS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub fit: u64,
    pub train: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub twin_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_dir: PathBuf,
}

impl Paths {
    pub fn under(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        Paths {
            data_dir: root.join("data"),
            twin_dir: root.join("twin"),
            checkpoint_dir: root.join("checkpoint"),
            metrics_dir: root.join("metrics"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FitSettings {
    /// Multi-start count of the thermal fit.
    pub starts: usize,
    pub max_iters: usize,
    /// Slot pooling radius of the occupancy fit.
    pub occupancy_pool_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServeSettings {
    pub listen: String,
    pub sweep_interval_secs: u64,
    pub store_dir: PathBuf,
    pub public_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PipelineConfig {
    pub room: RoomProfile,
    pub train_days: usize,
    pub dt_minutes: f64,
    /// First day of the plant evaluation window; defaults to the day after training.
    pub eval_start_day: Option<usize>,
    pub eval_episodes: usize,
    pub fit: FitSettings,
    pub mdp: MdpConfig,
    pub dqn: DqnConfig,
    pub seeds: Seeds,
    pub paths: Paths,
    pub serve: ServeSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            room: RoomProfile::Bathroom,
            train_days: 7,
            dt_minutes: SLOT_MINUTES as f64,
            eval_start_day: None,
            eval_episodes: 10,
            fit: FitSettings {
                starts: 16,
                max_iters: 200,
                occupancy_pool_slots: 2,
            },
            mdp: MdpConfig::default(),
            dqn: DqnConfig::default(),
            seeds: Seeds {
                data: 1,
                fit: 1,
                train: 1,
                eval: 1001,
            },
            paths: Paths::under("run"),
            serve: ServeSettings {
                listen: "127.0.0.1:8080".into(),
                sweep_interval_secs: 10,
                store_dir: PathBuf::from("run/store"),
                public_url: None,
            },
        }
    }
}

impl PipelineConfig {
    /// Tiny end-to-end configuration for tests and demos.
    pub fn smoke(root: impl AsRef<Path>) -> Self {
        let mut cfg = PipelineConfig {
            paths: Paths::under(root.as_ref()),
            eval_episodes: 2,
            ..Default::default()
        };
        cfg.serve.store_dir = root.as_ref().join("store");
        cfg.fit.starts = 4;
        cfg.mdp.episode_len = 96;
        cfg.dqn.epochs = 2;
        cfg.dqn.episodes_per_epoch = 2;
        cfg
    }

    /// Reduced training budget used for the desk-scale experiments.
    pub fn desk(root: impl AsRef<Path>) -> Self {
        let mut cfg = PipelineConfig {
            paths: Paths::under(root.as_ref()),
            ..Default::default()
        };
        cfg.serve.store_dir = root.as_ref().join("store");
        cfg.mdp.episode_len = 384;
        cfg.dqn.epochs = 10;
        cfg.dqn.episodes_per_epoch = 10;
        cfg
    }

    pub fn generated_days(&self) -> usize {
        self.train_days + HELDOUT_DAYS
    }

    pub fn eval_start_day(&self) -> usize {
        self.eval_start_day.unwrap_or(self.train_days)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.train_days == 0 {
            return Err("trainDays must be >= 1".into());
        }
        // the plant season has SEASON_DAYS of ambient data and the last sample
        // only feeds the final transition
        if self.generated_days() >= SEASON_DAYS {
            return Err(format!(
                "trainDays + {HELDOUT_DAYS} must be below the {SEASON_DAYS}-day season"
            ));
        }
        if self.dt_minutes != SLOT_MINUTES as f64 || self.mdp.step_minutes != self.dt_minutes {
            return Err(format!(
                "dtMinutes and mdp.stepMinutes must both be {SLOT_MINUTES} (the occupancy grid)"
            ));
        }
        self.mdp.validate().map_err(|e| e.to_string())?;
        let eval_end = self.eval_start_day() * SLOTS + self.mdp.episode_len + 1;
        if eval_end > SEASON_DAYS * SLOTS {
            return Err(format!(
                "evaluation window (start day {}, {} steps) runs past the season",
                self.eval_start_day(),
                self.mdp.episode_len
            ));
        }
        if self.eval_episodes == 0 {
            return Err("evalEpisodes must be >= 1".into());
        }
        if self.fit.starts == 0 {
            return Err("fit.starts must be >= 1".into());
        }
        let mut dqn = self.dqn.clone();
        dqn.n_actions = self.mdp.levels;
        dqn.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// Overlays `patch` onto `base`. Keys missing from `base` are rejected so
/// typos fail loudly; `null` leaves accept any value.
fn overlay(base: &mut Value, patch: &Value, path: &str) -> Result<(), String> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| format!("unknown config key `{here}`"))?;
                overlay(slot, v, &here)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn parse_override(raw: &str) -> Result<Value, String> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| format!("override `{raw}` is not key=value"))?;
    if key.is_empty() {
        return Err(format!("override `{raw}` has an empty key"));
    }
    let value: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    Ok(patch)
}

/// Defaults, then the JSON file, then each `key=value` override in order.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig, String> {
    let mut tree = serde_json::to_value(PipelineConfig::default()).map_err(|e| e.to_string())?;
    if let Some(path) = file {
        let raw = std::fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let patch: Value =
            serde_json::from_slice(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
        overlay(&mut tree, &patch, "")?;
    }
    for raw in overrides {
        overlay(&mut tree, &parse_override(raw)?, "")?;
    }
    let cfg: PipelineConfig = serde_json::from_value(tree).map_err(|e| e.to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PipelineConfig::default().validate().unwrap();
        PipelineConfig::smoke("x").validate().unwrap();
        PipelineConfig::desk("x").validate().unwrap();
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = load_config(
            None,
            &[
                "room=bedroom".into(),
                "dqn.epochs=3".into(),
                "dqn.epochs=4".into(),
                "evalStartDay=10".into(),
                "paths.dataDir=/tmp/d".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.room, RoomProfile::Bedroom);
        assert_eq!(cfg.dqn.epochs, 4);
        assert_eq!(cfg.eval_start_day, Some(10));
        assert_eq!(cfg.paths.data_dir, PathBuf::from("/tmp/d"));
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(load_config(None, &["dqn.epoch=3".into()]).is_err());
        assert!(load_config(None, &["room=kitchen".into()]).is_err());
        assert!(load_config(None, &["trainDays=0".into()]).is_err());
        assert!(load_config(None, &["trainDays=33".into()]).is_err());
        assert!(load_config(None, &["noequals".into()]).is_err());
        assert!(load_config(None, &["dtMinutes=5".into()]).is_err());
    }

    #[test]
    fn file_overlay_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"trainDays": 14, "mdp": {"episodeLen": 384}}"#).unwrap();
        let cfg = load_config(Some(&path), &["trainDays=21".into()]).unwrap();
        assert_eq!(cfg.train_days, 21);
        assert_eq!(cfg.mdp.episode_len, 384);
        assert_eq!(cfg.mdp.comfort_temp, 18.0);
    }

    #[test]
    fn config_round_trips() {
        let cfg = PipelineConfig::desk("runs/a");
        let back: PipelineConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
