//! Orchestrator for the two-stage workflow: gather data and fit the twins,
//! then train the agent inside the twin and evaluate it on the plant.
//!
//! Every stage persists its outputs as files (see [`stages`]); the pipeline
//! runs them in order and records digests and timings in a [`RunManifest`].

pub mod config;
pub mod stages;

use config::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use thingtwin_core::registry::SystemClock;
use thingtwin_service::ServiceConfig;

pub use config::load_config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Fit,
    Train,
    Eval,
    Serve,
}

impl Stage {
    pub const PIPELINE: [Stage; 4] = [Stage::Generate, Stage::Fit, Stage::Train, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Fit => "fit",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Serve => "serve",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl OrchestratorError {
    /// Process exit code: 2 for configuration problems, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::Config(_) => 2,
            OrchestratorError::Stage { .. } => 3,
        }
    }
}

/// Runs one batch stage.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<Vec<PathBuf>, OrchestratorError> {
    match stage {
        Stage::Generate => stages::generate(cfg),
        Stage::Fit => stages::fit(cfg),
        Stage::Train => stages::train_stage(cfg),
        Stage::Eval => stages::eval_stage(cfg),
        Stage::Serve => Err(OrchestratorError::Config("serve is not a batch stage".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ArtifactDigest {
    pub stage: Stage,
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactDigest>,
}

impl RunManifest {
    pub fn succeeded(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Ok)
    }

    /// (file name, digest) pairs; stable across output roots.
    pub fn digests(&self) -> Vec<(String, String)> {
        self.artifacts
            .iter()
            .map(|a| {
                let name = a
                    .path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                (name, a.sha256.clone())
            })
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<(String, u64)> {
    let bytes = std::fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

pub fn manifest_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.metrics_dir.join(stages::MANIFEST_JSON)
}

fn write_manifest(cfg: &PipelineConfig, manifest: &RunManifest) -> Result<(), OrchestratorError> {
    let path = manifest_path(cfg);
    let io = |e: std::io::Error| OrchestratorError::Stage {
        stage: Stage::Eval,
        message: format!("cannot write {}: {e}", path.display()),
    };
    std::fs::create_dir_all(&cfg.paths.metrics_dir).map_err(io)?;
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(io)
}

/// generate, fit, train, eval in order. The manifest is written last, or as
/// soon as a stage fails (with the remaining stages marked skipped).
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest, OrchestratorError> {
    cfg.validate().map_err(OrchestratorError::Config)?;
    let mut manifest = RunManifest {
        config: cfg.clone(),
        stages: Vec::new(),
        artifacts: Vec::new(),
    };
    let mut failure = None;
    for stage in Stage::PIPELINE {
        if failure.is_some() {
            manifest.stages.push(StageRecord {
                stage,
                status: StageStatus::Skipped,
                seconds: 0.0,
                error: None,
            });
            continue;
        }
        tracing::info!(%stage, "stage started");
        let t0 = Instant::now();
        let result = run_stage(stage, cfg).and_then(|files| {
            files
                .into_iter()
                .map(|path| {
                    let (sha256, bytes) = sha256_file(&path).map_err(|e| OrchestratorError::Stage {
                        stage,
                        message: format!("cannot digest {}: {e}", path.display()),
                    })?;
                    Ok(ArtifactDigest {
                        stage,
                        path,
                        sha256,
                        bytes,
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        });
        let seconds = t0.elapsed().as_secs_f64();
        match result {
            Ok(digests) => {
                manifest.artifacts.extend(digests);
                manifest.stages.push(StageRecord {
                    stage,
                    status: StageStatus::Ok,
                    seconds,
                    error: None,
                });
            }
            Err(e) => {
                manifest.stages.push(StageRecord {
                    stage,
                    status: StageStatus::Failed,
                    seconds,
                    error: Some(e.to_string()),
                });
                failure = Some(e);
            }
        }
    }
    write_manifest(cfg, &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

pub fn service_config(cfg: &PipelineConfig) -> Result<ServiceConfig, OrchestratorError> {
    let listen = cfg
        .serve
        .listen
        .parse()
        .map_err(|e| OrchestratorError::Config(format!("serve.listen `{}`: {e}", cfg.serve.listen)))?;
    Ok(ServiceConfig {
        listen,
        sweep_interval_secs: cfg.serve.sweep_interval_secs,
        store_dir: Some(cfg.serve.store_dir.clone()),
        public_url: cfg.serve.public_url.clone(),
    })
}

/// Starts the directory and bridge service. Sensor data already generated in
/// the data directory is ingested, which registers its entities.
pub async fn start_service(cfg: &PipelineConfig) -> Result<thingtwin_service::Server, OrchestratorError> {
    let svc = service_config(cfg)?;
    let fail = |message: String| OrchestratorError::Stage {
        stage: Stage::Serve,
        message,
    };
    let server = thingtwin_service::start(&svc, Arc::new(SystemClock))
        .await
        .map_err(|e| fail(e.to_string()))?;
    let sensors = cfg.paths.data_dir.join(stages::SENSORS_CSV);
    if sensors.exists() {
        let raw = std::fs::read(&sensors).map_err(|e| fail(e.to_string()))?;
        let report = server.state().ingest(&raw).map_err(|e| fail(e.to_string()))?;
        tracing::info!(entities = report.entities.len(), points = report.points_loaded, "ingested sensor data");
    }
    Ok(server)
}

/// Serves until `signal` resolves, then shuts down gracefully.
pub async fn serve(cfg: &PipelineConfig, signal: impl Future<Output = ()>) -> Result<(), OrchestratorError> {
    let server = start_service(cfg).await?;
    tracing::info!(url = %server.url(), "serving");
    signal.await;
    server.shutdown().await.map_err(|e| OrchestratorError::Stage {
        stage: Stage::Serve,
        message: e.to_string(),
    })
}
