//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camxai::MAX_CONTRASTIVE;
use crate::cloudio::Species;
use crate::error::{Error, Result};
use crate::micronet::{ModelConfig, TrainConfig};
use crate::partition::PartitionConfig;
use crate::synthforest::GenConfig;

/// Seeds of every random stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub synth: u64,
    pub jitter: u64,
    pub init: u64,
    pub train: u64,
    pub explain: u64,
}

impl Seeds {
    /// Independent stage seeds drawn from one master seed.
    pub fn derive(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        let mut next = |stream: u64| {
            rng.set_stream(stream);
            rng.set_word_pos(0);
            rng.next_u64()
        };
        Self {
            synth: next(1),
            jitter: next(2),
            init: next(3),
            train: next(4),
            explain: next(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub trees_per_species: usize,
    pub points_per_tree: [usize; 2],
    /// Species carrying the bent-stem artifact; `"none"` disables it.
    pub artifact_species: String,
    pub bend_height_fraction: f64,
    pub bend_angle_deg: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            trees_per_species: g.trees_per_species,
            points_per_tree: g.points_per_tree,
            artifact_species: "Ash".into(),
            bend_height_fraction: g.bend.height_fraction,
            bend_angle_deg: g.bend.angle_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: [usize; 5],
    pub bottlenecks: [usize; 4],
    pub head_channels: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            widths: m.widths,
            bottlenecks: m.bottlenecks,
            head_channels: m.head_channels,
            dropout: m.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weighted_loss: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            epochs: t.epochs,
            batch_size: t.batch_size,
            momentum: t.momentum,
            weighted_loss: t.weighted_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamSection {
    pub gamma: f64,
    pub contrastive: usize,
}

impl Default for CamSection {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            contrastive: MAX_CONTRASTIVE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    /// Upper bound on explained test trees per species.
    pub trees_per_species: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            trees_per_species: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub blur_kernel: usize,
    pub buffer_px: usize,
    pub edge_px: usize,
    pub min_component_px: usize,
    /// Directory with `<view file>.ann.json` crown annotations.
    pub annotations: Option<PathBuf>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        let p = PartitionConfig::default();
        Self {
            blur_kernel: p.blur_kernel,
            buffer_px: p.buffer_px,
            edge_px: p.edge_px,
            min_component_px: p.min_component_px,
            annotations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Projection canvas side; also the network input side.
    pub canvas: usize,
    pub seeds: Seeds,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub cam: CamSection,
    pub explain: ExplainSection,
    pub partition: PartitionSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            canvas: 160,
            seeds: Seeds::derive(0),
            synth: SynthSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            cam: CamSection::default(),
            explain: ExplainSection::default(),
            partition: PartitionSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config()?.validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.partition_config().for_canvas(self.canvas)?;
        if !(0.0..=1.0).contains(&self.cam.gamma) {
            return Err(Error::Config(format!(
                "cam.gamma {} outside [0, 1]",
                self.cam.gamma
            )));
        }
        if self.cam.contrastive > MAX_CONTRASTIVE {
            return Err(Error::Config(format!(
                "cam.contrastive {} exceeds {MAX_CONTRASTIVE}",
                self.cam.contrastive
            )));
        }
        if self.explain.trees_per_species == 0 {
            return Err(Error::Config(
                "explain.trees_per_species must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn artifact_species(&self) -> Result<Option<Species>> {
        match self.synth.artifact_species.trim() {
            "" | "none" | "None" => Ok(None),
            s => s.parse().map(Some),
        }
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        Ok(GenConfig {
            trees_per_species: self.synth.trees_per_species,
            seed: self.seeds.synth,
            points_per_tree: self.synth.points_per_tree,
            artifact_species: self.artifact_species()?,
            bend: crate::synthforest::BendSpec {
                height_fraction: self.synth.bend_height_fraction,
                angle_deg: self.synth.bend_angle_deg,
            },
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            widths: self.model.widths,
            bottlenecks: self.model.bottlenecks,
            head_channels: self.model.head_channels,
            classes: Species::COUNT,
            input_side: self.canvas,
            dropout: self.model.dropout,
            init_seed: self.seeds.init,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_max: self.train.lr_max,
            lr_min: self.train.lr_min,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            momentum: self.train.momentum,
            weighted_loss: self.train.weighted_loss,
            seed: self.seeds.train,
        }
    }

    pub fn partition_config(&self) -> PartitionConfig {
        PartitionConfig {
            blur_kernel: self.partition.blur_kernel,
            buffer_px: self.partition.buffer_px,
            edge_px: self.partition.edge_px,
            min_component_px: self.partition.min_component_px,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_the_default() {
        assert_eq!(
            PipelineConfig::from_toml("").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn round_trip_and_overrides() {
        let text = "canvas = 320\n[train]\nepochs = 7\n[synth]\nartifact_species = \"none\"\n";
        let cfg = PipelineConfig::from_toml(text).unwrap();
        assert_eq!((cfg.canvas, cfg.train.epochs), (320, 7));
        assert_eq!(cfg.artifact_species().unwrap(), None);
        assert_eq!(cfg.model_config().input_side, 320);
        let again = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(PipelineConfig::from_toml("canvas = 100").is_err());
        assert!(PipelineConfig::from_toml("[cam]\ngamma = 1.5").is_err());
        assert!(PipelineConfig::from_toml("[cam]\ncontrastive = 4").is_err());
        assert!(PipelineConfig::from_toml("[synth]\nartifact_species = \"Larch\"").is_err());
        assert!(PipelineConfig::from_toml("[train]\nepoch = 3").is_err());
    }

    #[test]
    fn seeds_are_distinct_and_reproducible() {
        let s = Seeds::derive(7);
        assert_eq!(s, Seeds::derive(7));
        assert_ne!(s, Seeds::derive(8));
        let all = [s.synth, s.jitter, s.init, s.train, s.explain];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
