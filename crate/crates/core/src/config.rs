//! Run configuration: TOML schema, presets, validation and the resolved
//! dump that reproduces a run.
//!
//! A config file may set any subset of keys; missing keys take the value of
//! the chosen preset (or the built-in defaults). Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ModelConfig, Variant};
use crate::data::transform::Aug;
use crate::data::Mode;
use crate::error::{Error, Result};
use crate::pdbs::{Fusion, ScheduleParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Polynomial learning-rate decay `lr * (1 - step / total)^power`.
    pub poly_decay: bool,
    pub poly_power: f64,
    /// Optimizer steps per epoch; derived from the dataset size when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.04,
            momentum: 0.9,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 400,
            batch: 24,
            poly_decay: false,
            poly_power: 0.9,
            steps_per_epoch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdbsConfig {
    /// Train Main and Fine branches; otherwise a single network.
    pub enabled: bool,
    pub e0: f64,
    pub e1: f64,
    pub rho: f64,
    pub k: f64,
    pub lambda: f64,
    pub fusion: Fusion,
    /// Skip the Fine branch's segmentation loss while `E <= e0`.
    pub freeze_fine_until_e0: bool,
}

impl Default for PdbsConfig {
    fn default() -> Self {
        Self::with_params(false, ScheduleParams::default())
    }
}

impl PdbsConfig {
    pub fn with_params(enabled: bool, p: ScheduleParams) -> Self {
        Self { enabled, e0: p.e0, e1: p.e1, rho: p.rho, k: p.k, lambda: p.lambda, fusion: Fusion::Max, freeze_fine_until_e0: false }
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams { e0: self.e0, e1: self.e1, rho: self.rho, k: self.k, lambda: self.lambda }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 16, size: 96, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root; when absent a synthetic set is generated under the
    /// output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub mode: Mode,
    /// Organ mode: images are resized to this square size.
    pub image_size: usize,
    /// Vessel mode: square training patch size.
    pub patch_size: usize,
    /// Vessel mode: patches drawn per epoch; one epoch of images otherwise.
    pub patches_per_epoch: usize,
    pub augment: Vec<Aug>,
    /// Vessel evaluation: stride between overlapping tiles.
    pub tile_stride: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            mode: Mode::Organ,
            image_size: 224,
            patch_size: 48,
            patches_per_epoch: 64,
            augment: vec![Aug::Hflip, Aug::Vflip, Aug::Rot90, Aug::Rot180, Aug::Rot270],
            tile_stride: 24,
            synth: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    /// Spatial size of one training input.
    pub fn input_size(&self) -> usize {
        match self.mode {
            Mode::Organ => self.image_size,
            Mode::Vessel => self.patch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Save a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    /// Validate every this many epochs (0: never).
    pub val_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out_dir: PathBuf::from("runs/default"), checkpoint_every: 10, val_every: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: PdbsConfig,
    pub data: DataConfig,
    pub run: RunSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Organ,
    Vessel,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "organ" => Ok(Preset::Organ),
            "vessel" => Ok(Preset::Vessel),
            _ => Err(Error::config(format!("unknown preset `{s}` (expected organ or vessel)"))),
        }
    }
}

impl RunConfig {
    /// Multi-organ: transformer MCPA, SGD(0.04, 0.9, 1e-4), 400 epochs,
    /// batch 24, 224x224 inputs, validation every 10 epochs.
    pub fn organ() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: PdbsConfig::default(),
            data: DataConfig { mode: Mode::Organ, image_size: 224, synth: SynthConfig { count: 16, size: 256, seed: 7 }, ..DataConfig::default() },
            run: RunSection { out_dir: PathBuf::from("runs/organ"), val_every: 10, ..RunSection::default() },
        }
    }

    /// Vessel: convolutional MCPA with the dual-branch trainer, Adam at
    /// 0.0008, 80 epochs, batch 64, 48x48 patches, validation every epoch.
    pub fn vessel() -> Self {
        let mut model = ModelConfig { variant: Variant::Cnn, num_classes: 2, ..ModelConfig::default() };
        model.bridge.mcpa_rates = [8, 4];
        model.bridge.global_rates = [4, 2];
        Self {
            model,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 0.0008,
                momentum: 0.0,
                weight_decay: 0.0,
                epochs: 80,
                batch: 64,
                ..OptimizerConfig::default()
            },
            schedule: PdbsConfig::with_params(true, ScheduleParams { e0: 0.0, e1: 40.0, rho: 4.0, k: 0.15, lambda: 0.4 }),
            data: DataConfig {
                mode: Mode::Vessel,
                patch_size: 48,
                patches_per_epoch: 64 * 16,
                synth: SynthConfig { count: 20, size: 96, seed: 7 },
                ..DataConfig::default()
            },
            run: RunSection { out_dir: PathBuf::from("runs/vessel"), val_every: 1, ..RunSection::default() },
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Organ => Self::organ(),
            Preset::Vessel => Self::vessel(),
        }
    }

    /// Parses `text` over `base`: keys present in the text replace the
    /// corresponding base values, tables merge recursively.
    pub fn from_toml_over(text: &str, base: &RunConfig) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(text, &RunConfig::default())
    }

    /// Reads `path` over `preset` (or the defaults when no preset is given).
    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        let base = preset.map(Self::preset).unwrap_or_default();
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_over(&text, &base)
            }
            None => {
                base.validate()?;
                Ok(base)
            }
        }
    }

    /// Every value the run depends on, with optional fields filled in.
    pub fn resolved(&self) -> Self {
        Self { model: self.model.resolved(), ..self.clone() }
    }

    pub fn dump(&self) -> String {
        toml::to_string(&self.resolved()).expect("config serializes")
    }

    /// SHA-256 of the resolved dump, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.dump().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.epochs == 0 || o.batch == 0 {
            return Err(Error::config("optimizer needs lr > 0, epochs > 0 and batch > 0"));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.weight_decay < 0.0 {
            return Err(Error::config("momentum and betas must lie in [0, 1), weight decay must be nonnegative"));
        }
        if o.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch must be positive"));
        }
        self.schedule.params().validate()?;
        let d = &self.data;
        if d.mode == Mode::Vessel && self.model.num_classes != 2 {
            return Err(Error::config(format!("vessel mode is binary but the model has {} classes", self.model.num_classes)));
        }
        let size = d.input_size();
        self.model.check_input(size, size)?;
        if d.mode == Mode::Vessel && (d.tile_stride == 0 || d.tile_stride > d.patch_size) {
            return Err(Error::config("tile_stride must lie in 1..=patch_size"));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
