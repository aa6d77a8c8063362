use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use addit_core::extended::AttentionWeights;
use addit_core::model::ModelConfig;
use addit_core::pipeline::PipelineConfig;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Seeds {
    pub source: Option<u64>,
    pub target: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub steps: usize,
    pub seeds: Seeds,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solved_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<AttentionWeights>,
    pub warnings: Vec<String>,
    pub wall_clock_ms: f64,
}

/// Output directory that hashes everything written to it.
pub struct Run {
    dir: PathBuf,
    started: Instant,
    command: String,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub solved_gamma: Option<f64>,
    pub weights: Option<AttentionWeights>,
    pub warnings: Vec<String>,
}

impl Run {
    pub fn new(dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            started: Instant::now(),
            command: command.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            solved_gamma: None,
            weights: None,
            warnings: Vec::new(),
        })
    }

    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(Artifact {
            path: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn warn(&mut self, message: String) {
        eprintln!("warning: {message}");
        self.warnings.push(message);
    }

    pub fn finish(self, model: &ModelConfig, pipeline: &PipelineConfig) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().collect(),
            steps: pipeline.num_steps,
            seeds: Seeds {
                source: pipeline.source_seed,
                target: pipeline.target_seed,
            },
            model: model.clone(),
            pipeline: pipeline.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            solved_gamma: self.solved_gamma,
            weights: self.weights,
            warnings: self.warnings,
            wall_clock_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        let path = self.dir.join(MANIFEST_NAME);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
