//! Flat key-value training configuration: TOML file, CLI overrides, and
//! validation.

use crate::abnormal::ContrastiveConfig;
use crate::attn::MaskMode;
use crate::decoder::{DecodeMode, Pooling};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Decoding strategy named in config files; the beam width lives in its own
/// key so every key stays a plain scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeChoice {
    Greedy,
    Beam,
}

/// Every knob of a training run, one flat namespace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Weight of the region-selection loss.
    pub lambda_rs: f64,
    /// Weight of the attribute-prediction loss.
    pub delta_ap: f64,
    /// Weight of the disease-recognition loss.
    pub eta_dr: f64,
    /// Weight of the contrastive segregation loss.
    pub phi_con: f64,

    /// Region-selection probability threshold.
    pub alpha: f64,
    /// Attribute-prediction probability threshold.
    pub beta: f64,
    /// Contrastive cosine margin.
    pub omega: f64,

    /// Memory slots read per query.
    pub gamma: usize,
    /// Memory slot count.
    pub memory_slots: usize,
    /// Memory space width.
    pub memory_dim: usize,

    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Patch-embedding channels (the pooled global feature width).
    pub channels: usize,
    pub patch: usize,
    pub canvas: usize,
    pub n_categories: usize,
    /// Decoder position budget, BOS included.
    pub max_len: usize,

    pub lr: f64,
    pub lr_backbone: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Positive-class weight for the selection and attribute losses.
    pub pos_weight: f64,
    pub dropout: f64,
    pub seed: u64,

    pub use_sg: bool,
    pub use_sg_att: bool,
    pub use_ae: bool,
    pub use_mem: bool,
    pub use_nas: bool,
    pub use_dr: bool,

    pub pooling: Pooling,
    pub decode: DecodeChoice,
    pub beam_width: usize,
    /// Normalize both contrastive terms by the squared group size.
    pub nas_normalize_both: bool,
    /// Multiplicative adjacency masking instead of additive exclusion.
    pub mask_hadamard: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda_rs: 0.25,
            delta_ap: 0.1,
            eta_dr: 0.25,
            phi_con: 0.1,
            alpha: 0.5,
            beta: 0.5,
            omega: 0.4,
            gamma: 16,
            memory_slots: 512,
            memory_dim: 512,
            layers: 3,
            width: 512,
            heads: 8,
            ffn_hidden: 1024,
            channels: 64,
            patch: 8,
            canvas: 48,
            n_categories: crate::scene_graph::NUM_CATEGORIES,
            max_len: 64,
            lr: 1e-4,
            lr_backbone: 5e-5,
            batch_size: 8,
            steps: 1000,
            pos_weight: 1.0,
            dropout: 0.1,
            seed: 0,
            use_sg: true,
            use_sg_att: true,
            use_ae: true,
            use_mem: true,
            use_nas: true,
            use_dr: true,
            pooling: Pooling::Max,
            decode: DecodeChoice::Greedy,
            beam_width: 3,
            nas_normalize_both: true,
            mask_hadamard: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("lambda_rs", self.lambda_rs),
            ("delta_ap", self.delta_ap),
            ("eta_dr", self.eta_dr),
            ("phi_con", self.phi_con),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite nonnegative weight, got {v}"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("omega", self.omega)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.gamma == 0 || self.gamma > self.memory_slots {
            return fail(format!(
                "gamma {} must lie in 1..={}",
                self.gamma, self.memory_slots
            ));
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.width == 0 || self.width % self.heads != 0 {
            return fail(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.channels == 0 || self.memory_dim == 0 || self.ffn_hidden == 0 {
            return fail("channels, memory_dim, and ffn_hidden must be positive".into());
        }
        if self.patch == 0 || self.canvas % self.patch != 0 {
            return fail(format!(
                "canvas {} must be divisible by patch {}",
                self.canvas, self.patch
            ));
        }
        if self.n_categories == 0 {
            return fail("n_categories must be positive".into());
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr_backbone > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.pos_weight <= 0.0 {
            return fail("pos_weight must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.beam_width == 0 {
            return fail("beam_width must be positive".into());
        }
        Ok(())
    }

    pub fn decode_mode(&self) -> DecodeMode {
        match self.decode {
            DecodeChoice::Greedy => DecodeMode::Greedy,
            DecodeChoice::Beam => DecodeMode::Beam(self.beam_width),
        }
    }

    pub fn mask_mode(&self) -> MaskMode {
        if self.mask_hadamard {
            MaskMode::Hadamard
        } else {
            MaskMode::Exclusive
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            margin: self.omega,
            normalize_both: self.nas_normalize_both,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainingConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Optional file plus `key=value` overrides. Override values are parsed
    /// as TOML scalars, falling back to strings, so `steps=50`,
    /// `use_sg=false`, and `pooling=mean` all work unquoted.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => std::fs::read_to_string(p)?
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {item:?} is not of the form key=value"))
            })?;
            let key = key.trim();
            let value = value.trim();
            let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").unwrap(),
                Err(_) => toml::Value::String(value.to_string()),
            };
            table.insert(key.to_string(), parsed);
        }
        let cfg: TrainingConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
