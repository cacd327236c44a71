//! Whole-run configuration: one JSON document embedding every module's
//! settings, overlaid by command-line flags and echoed next to outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::classes::ClassTable;
use crate::error::{BottError, Result};
use crate::io::write_json;
use crate::network::NetworkConfig;
use crate::online::OnlineConfig;
use crate::synth::SynthConfig;
use crate::trackdb::DbGenConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_ECHO: &str = "config.json";

/// Network shape without the input width, which follows the data's taxonomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkShape {
    pub mlp_dims: Vec<usize>,
    pub n_enc: usize,
    pub n_heads: usize,
    pub ffn_dims: Vec<usize>,
}

impl Default for NetworkShape {
    fn default() -> Self {
        let d = NetworkConfig::desk(0);
        NetworkShape {
            mlp_dims: d.mlp_dims,
            n_enc: d.n_enc,
            n_heads: d.n_heads,
            ffn_dims: d.ffn_dims,
        }
    }
}

impl NetworkShape {
    pub fn build(&self, input_dim: usize) -> Result<NetworkConfig> {
        let cfg = NetworkConfig {
            input_dim,
            mlp_dims: self.mlp_dims.clone(),
            n_enc: self.n_enc,
            n_heads: self.n_heads,
            ffn_dims: self.ffn_dims.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    /// Per-class link thresholds; `None` reuses the online minimum link scores.
    pub link_threshold: Option<ClassTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of all randomness; copied into every module seed.
    pub seed: u64,
    pub synth_scenes: usize,
    pub synth: SynthConfig,
    pub db: DbGenConfig,
    pub network: NetworkShape,
    pub train: TrainConfig,
    pub online: OnlineConfig,
    pub offline: OfflineConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth_scenes: 10,
            synth: SynthConfig::default(),
            db: DbGenConfig::default(),
            network: NetworkShape::default(),
            train: TrainConfig::default(),
            online: OnlineConfig::default(),
            offline: OfflineConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BottError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| BottError::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the run seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self.bench.seed = seed;
    }

    /// Sets the window size used for training and tracking.
    pub fn set_k(&mut self, k: usize) {
        self.train.k = k;
        self.online.k = k;
        self.bench.k = k;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.online.validate()?;
        self.network.build(1)?;
        if self.synth.seed != self.seed || self.train.seed != self.seed || self.bench.seed != self.seed {
            return Err(BottError::Config("module seeds must equal the run seed".into()));
        }
        Ok(())
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        write_json(self, &dir.join(CONFIG_ECHO))
    }
}
