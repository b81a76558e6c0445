//! Flat `key = value` configuration with the published hyperparameters as
//! defaults.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::backbone::BackboneConfig;
use crate::correlation::CorrelationConfig;
use crate::error::{Error, Result};
use crate::head::GridSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub template_points: usize,
    pub search_points: usize,
    pub neighbors: [usize; 3],
    pub channels: [usize; 3],
    pub feature_dim: usize,
    pub heads: usize,
    pub layer_norm: bool,
    pub ego: bool,
    pub ego_k: usize,
    pub iterations: usize,
    pub grid_x_extent: f64,
    pub grid_y_extent: f64,
    pub grid_cell: f64,
    pub head_width: usize,
    pub search_margin: f64,
    pub heatmap_sigma: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub weight_heatmap: f64,
    pub weight_offset: f64,
    pub weight_z: f64,
    pub weight_yaw: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub jitter_translation: f64,
    pub jitter_yaw_deg: f64,
    pub precision: Precision,
    pub category: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            template_points: 512,
            search_points: 1024,
            neighbors: [32, 48, 48],
            channels: [32, 64, 128],
            feature_dim: 32,
            heads: 2,
            layer_norm: true,
            ego: true,
            ego_k: 48,
            iterations: 2,
            grid_x_extent: 5.6,
            grid_y_extent: 3.6,
            grid_cell: 0.3,
            head_width: 32,
            search_margin: 2.0,
            heatmap_sigma: 1.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            weight_heatmap: 1.0,
            weight_offset: 1.0,
            weight_z: 1.0,
            weight_yaw: 1.0,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 1,
            jitter_translation: 0.3,
            jitter_yaw_deg: 5.0,
            precision: Precision::F32,
            category: "Car".into(),
        }
    }
}

impl Config {
    /// Published network sizes.
    pub fn published() -> Self {
        Config::default()
    }

    /// Reduced sizes for desk-scale training and tests.
    pub fn toy() -> Self {
        Config {
            template_points: 64,
            search_points: 128,
            neighbors: [8, 8, 8],
            channels: [16, 16, 32],
            feature_dim: 16,
            ego_k: 16,
            head_width: 16,
            batch_size: 4,
            ..Config::default()
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            layer_norm: self.layer_norm,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            neighbors: self.neighbors,
            channels: self.channels,
            out_dim: self.feature_dim,
            attention: self.attention(),
        }
    }

    pub fn correlation(&self) -> CorrelationConfig {
        CorrelationConfig {
            iterations: self.iterations,
            k: self.ego_k,
            ego: self.ego,
            attention: self.attention(),
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            x_extent: self.grid_x_extent,
            y_extent: self.grid_y_extent,
            cell: self.grid_cell,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bb = self.backbone();
        bb.check_input(self.template_points)?;
        bb.check_input(self.search_points)?;
        self.grid().validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.ego && (self.ego_k == 0 || self.ego_k > self.search_points) {
            return Err(Error::Config(format!(
                "ego_k = {} must lie in 1..={}",
                self.ego_k, self.search_points
            )));
        }
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return Err(Error::Config("feature_dim must be divisible by heads".into()));
        }
        if !(self.search_margin >= 0.0) || !(self.heatmap_sigma > 0.0) {
            return Err(Error::Config("search_margin and heatmap_sigma must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Parses configuration text; every unknown key is reported at once.
    pub fn parse(text: &str, path: &Path) -> Result<Config> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            reason: e.message().to_string(),
        })?;
        let known: BTreeSet<String> = toml::Table::try_from(Config::default())
            .expect("default config serializes")
            .keys()
            .cloned()
            .collect();
        let unknown: Vec<String> = table.keys().filter(|k| !known.contains(*k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownConfigKeys(unknown));
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}
