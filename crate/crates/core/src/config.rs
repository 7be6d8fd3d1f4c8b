//! Unified run configuration: one TOML document whose sections mirror the
//! phantom generator, network architecture, both training stages, and the
//! uncertainty settings. Every run writes the fully resolved form (defaults
//! materialized) back into its run directory so results reproduce from the
//! artifact alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::NetworkConfig;
use crate::synthdata::PhantomConfig;
use crate::train::{DistillConfig, PretrainConfig};

/// Architecture section; `in_channels` is derived from the modality lists
/// per role rather than stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSection {
    pub k: usize,
    pub scales: usize,
    pub dropout_p: f64,
    pub lrelu_slope: f64,
    pub num_classes: usize,
    pub spatial_rank: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkConfig::default();
        NetworkSection {
            k: d.k,
            scales: d.scales,
            dropout_p: d.dropout_p,
            lrelu_slope: d.lrelu_slope,
            num_classes: d.num_classes,
            spatial_rank: d.spatial_rank,
        }
    }
}

impl NetworkSection {
    pub fn with_channels(&self, in_channels: usize) -> NetworkConfig {
        NetworkConfig {
            k: self.k,
            scales: self.scales,
            dropout_p: self.dropout_p,
            lrelu_slope: self.lrelu_slope,
            in_channels,
            num_classes: self.num_classes,
            spatial_rank: self.spatial_rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Pre-contrast modalities, in stacking order (the student's input).
    pub modalities_pre: Vec<String>,
    /// The modality absent at student inference time.
    pub contrast_modality: String,
    /// Optional center-crop target (pad-then-crop) applied at load.
    pub crop_to: Option<Vec<usize>>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            modalities_pre: vec!["t1".into(), "t2".into(), "flair".into()],
            contrast_modality: "t1ce".into(),
            crop_to: None,
        }
    }
}

impl DataSection {
    pub fn all_modalities(&self) -> Vec<String> {
        let mut v = self.modalities_pre.clone();
        v.push(self.contrast_modality.clone());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub cases: usize,
    /// Train/val/test fractions; must sum to 1.
    pub split: [f64; 3],
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            cases: 10,
            split: [0.6, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintySection {
    pub samples: usize,
    pub thresholds: Vec<u32>,
    pub region: String,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        UncertaintySection {
            samples: crate::uncertainty::DEFAULT_MC_SAMPLES,
            thresholds: crate::uncertainty::SCORE_THRESHOLDS.to_vec(),
            region: "ET".into(),
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthSection,
    pub phantom: PhantomConfig,
    pub network: NetworkSection,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub uncertainty: UncertaintySection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Write the fully resolved configuration.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.distill.validate()?;
        self.phantom.validate()?;
        if self.data.modalities_pre.is_empty() {
            return Err(Error::Config("modalities_pre must not be empty".into()));
        }
        if self.data.modalities_pre.contains(&self.data.contrast_modality) {
            return Err(Error::Config(
                "contrast modality listed among pre-contrast modalities".into(),
            ));
        }
        crate::volumes::RegionSpec::parse(&self.uncertainty.region)?;
        if self.uncertainty.samples < 2 {
            return Err(Error::Config("uncertainty.samples must be >= 2".into()));
        }
        Ok(())
    }

    pub fn student_network(&self) -> NetworkConfig {
        self.network.with_channels(self.data.modalities_pre.len())
    }

    pub fn teacher_network(&self) -> NetworkConfig {
        self.network
            .with_channels(self.data.modalities_pre.len() + 1)
    }
}
