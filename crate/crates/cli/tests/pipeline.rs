use serde_json::Value;
use std::path::Path;
use std::process::Command;
use thingtwin_cli::config::PipelineConfig;
use thingtwin_cli::stages::{self, EpochLine, TwinArtifact};
use thingtwin_cli::{manifest_path, run_pipeline, run_stage, sha256_file, RunManifest, Stage, StageStatus};
use thingtwin_core::bridge::{CommandLog, SeriesStore};
use thingtwin_core::td::ThingDescription;

fn smoke(root: &Path) -> (PipelineConfig, RunManifest) {
    let cfg = PipelineConfig::smoke(root);
    let manifest = run_pipeline(&cfg).expect("smoke pipeline");
    (cfg, manifest)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn manifest_matches_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = smoke(dir.path());
    assert!(manifest.succeeded());
    assert_eq!(
        manifest.stages.iter().map(|s| s.stage).collect::<Vec<_>>(),
        Stage::PIPELINE
    );
    let on_disk: RunManifest = serde_json::from_value(read_json(&manifest_path(&cfg))).unwrap();
    assert_eq!(on_disk.digests(), manifest.digests());
    for a in &manifest.artifacts {
        let (sha, bytes) = sha256_file(&a.path).unwrap();
        assert_eq!(sha, a.sha256, "{}", a.path.display());
        assert_eq!(bytes, a.bytes);
    }
    let names: Vec<String> = manifest.digests().into_iter().map(|(n, _)| n).collect();
    for f in [
        stages::SENSORS_CSV,
        stages::PRESENCE_CSV,
        stages::TWIN_JSON,
        stages::MSE_TABLE_JSON,
        stages::OCCUPANCY_JSON,
        stages::CHECKPOINT_JSON,
        stages::TRAIN_EPOCHS_JSONL,
        stages::TRAIN_EPISODES_JSONL,
        stages::EVAL_REPORT_JSON,
        stages::COMMANDS_JSONL,
    ] {
        assert!(names.iter().any(|n| n == f), "missing {f}");
    }
}

#[test]
fn rerunning_a_deleted_stage_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = smoke(dir.path());
    let later: Vec<_> = manifest
        .artifacts
        .iter()
        .filter(|a| matches!(a.stage, Stage::Train | Stage::Eval))
        .collect();
    for a in &later {
        std::fs::remove_file(&a.path).unwrap();
    }
    run_stage(Stage::Train, &cfg).unwrap();
    run_stage(Stage::Eval, &cfg).unwrap();
    for a in later {
        assert_eq!(sha256_file(&a.path).unwrap().0, a.sha256, "{}", a.path.display());
    }
}

#[test]
fn artifact_contents() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = smoke(dir.path());

    // three sensors, one sample per slot over train + held-out days
    let mut store = SeriesStore::new();
    let report = store.ingest_csv(cfg.paths.data_dir.join(stages::SENSORS_CSV)).unwrap();
    assert_eq!(report.entities.len(), 3);
    let per_sensor = cfg.generated_days() * 96;
    assert_eq!(store.total_points(), 3 * per_sensor);
    assert_eq!(store.len(&stages::room_entity(cfg.room)), per_sensor);

    let table = read_json(&cfg.paths.twin_dir.join(stages::MSE_TABLE_JSON));
    let rows = table["table"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let min = rows
        .iter()
        .map(|r| r["heldoutMse"].as_f64().unwrap())
        .fold(f64::INFINITY, f64::min);
    let twin: TwinArtifact = serde_json::from_value(read_json(&cfg.paths.twin_dir.join(stages::TWIN_JSON))).unwrap();
    assert!(twin.heldout_mse - min <= 1e-9);
    assert_eq!(twin.train_samples, cfg.train_days * 96);

    let epochs: Vec<EpochLine> = std::fs::read_to_string(cfg.paths.metrics_dir.join(stages::TRAIN_EPOCHS_JSONL))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(epochs.len(), cfg.dqn.epochs);
    assert!(epochs.iter().enumerate().all(|(i, e)| e.epoch == i));

    let report = stages::load_report(&cfg).unwrap();
    assert_eq!(report.agent.episodes.len(), cfg.eval_episodes);
    assert!(report.agent.mean_reward <= report.ideal + 1e-12);
    for m in report.agent.episodes.iter().chain(&report.baseline.episodes) {
        assert!(m.mean_reward <= m.ideal_reward + 1e-12);
    }

    let commands = CommandLog::replay(cfg.paths.metrics_dir.join(stages::COMMANDS_JSONL)).unwrap();
    assert_eq!(commands.len(), cfg.eval_episodes * cfg.mdp.episode_len);
    assert_eq!(report.commands_published as usize, commands.len());
    let entity = stages::heater_entity(cfg.room);
    assert!(commands.iter().all(|c| c.payload["entity_id"] == entity.as_str()));
}

#[test]
fn failed_stage_is_recorded_and_later_stages_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::smoke(dir.path());
    // a file where the twin directory should be
    std::fs::write(dir.path().join("blocker"), b"x").unwrap();
    cfg.paths.twin_dir = dir.path().join("blocker").join("twin");
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let m: RunManifest = serde_json::from_value(read_json(&manifest_path(&cfg))).unwrap();
    let status: Vec<StageStatus> = m.stages.iter().map(|s| s.status).collect();
    assert_eq!(
        status,
        [StageStatus::Ok, StageStatus::Failed, StageStatus::Skipped, StageStatus::Skipped]
    );
    assert!(m.stages[1].error.is_some());
}

#[test]
fn stage_without_inputs_fails_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::smoke(dir.path());
    let err = run_stage(Stage::Fit, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains(stages::SENSORS_CSV), "{err}");
}

fn thingtwin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_thingtwin")).args(args).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let set = |k: &str, v: String| format!("{k}={v}");
    let paths = [
        set("paths.dataDir", format!("{root}/data")),
        set("paths.twinDir", format!("{root}/twin")),
        set("paths.checkpointDir", format!("{root}/checkpoint")),
        set("paths.metricsDir", format!("{root}/metrics")),
    ];
    let mut args = vec![];
    for p in &paths {
        args.push("--set");
        args.push(p.as_str());
    }

    assert_eq!(thingtwin(&["show-config", "--set", "dqn.nope=1"]).status.code(), Some(2));
    assert_eq!(thingtwin(&["show-config", "--set", "trainDays=0"]).status.code(), Some(2));
    let mut fit = vec!["fit"];
    fit.extend(&args);
    let out = thingtwin(&fit);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let mut generate = vec!["generate"];
    generate.extend(&args);
    let out = thingtwin(&generate);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains(stages::SENSORS_CSV));

    let out = thingtwin(&["show-config", "--set", "room=bedroom"]);
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["room"], "bedroom");
}

#[tokio::test]
async fn serve_registers_generated_sensors_and_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::smoke(dir.path());
    cfg.serve.listen = "127.0.0.1:0".into();
    run_stage(Stage::Generate, &cfg).unwrap();

    let server = thingtwin_cli::start_service(&cfg).await.unwrap();
    let url = format!("{}/things?domainTag=climate", server.url());
    let tds: Vec<ThingDescription> = reqwest::get(&url).await.unwrap().json().await.unwrap();
    assert_eq!(tds.len(), 1);
    assert_eq!(tds[0].id, stages::room_entity(cfg.room));
    server.shutdown().await.unwrap();

    // the store directory alone is enough to rebuild the directory
    std::fs::remove_dir_all(&cfg.paths.data_dir).unwrap();
    let server = thingtwin_cli::start_service(&cfg).await.unwrap();
    let url = format!("{}/things", server.url());
    let tds: Vec<ThingDescription> = reqwest::get(&url).await.unwrap().json().await.unwrap();
    assert_eq!(tds.len(), 3);
    server.shutdown().await.unwrap();
}
