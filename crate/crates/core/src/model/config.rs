//! Architecture hyper-parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total downsampling factor between the input and the bottleneck.
pub const DOWNSAMPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_size: usize,
    /// Stage widths before the width multiplier. The stem emits `widths[0]`.
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub expansion: usize,
    pub transformer_layers: usize,
    pub transformer_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_branch_channels: usize,
    pub aspp_out_channels: usize,
    pub decoder_widths: [usize; 4],
    pub scse_reduction: usize,
    /// Scales the stem and stage widths, rounded to a multiple of 8.
    pub width_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_size: 256,
            widths: [32, 64, 128, 256],
            blocks: [2, 2, 2, 2],
            expansion: 6,
            transformer_layers: 2,
            transformer_dim: 256,
            heads: 4,
            ffn_mult: 2,
            aspp_rates: vec![1, 4, 8, 12],
            aspp_branch_channels: 64,
            aspp_out_channels: 256,
            decoder_widths: [128, 64, 32, 16],
            scse_reduction: 8,
            width_multiplier: 1.0,
        }
    }
}

/// Rounds `v` to the nearest multiple of `divisor`, at least `divisor`, and
/// never more than 10% below `v`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut r = ((v + d / 2.0) / d).floor() * d;
    r = r.max(d);
    if r < 0.9 * v {
        r += d;
    }
    r as usize
}

impl ModelConfig {
    /// The smallest configuration used for end-to-end gradient checks and
    /// overfitting runs.
    pub fn micro() -> Self {
        Self {
            input_size: 64,
            widths: [8, 16, 24, 32],
            transformer_layers: 1,
            transformer_dim: 32,
            heads: 4,
            aspp_branch_channels: 16,
            aspp_out_channels: 64,
            decoder_widths: [32, 24, 16, 16],
            ..Self::default()
        }
    }

    pub fn small() -> Self {
        Self {
            input_size: 64,
            widths: [16, 32, 64, 128],
            transformer_layers: 1,
            transformer_dim: 64,
            heads: 4,
            aspp_branch_channels: 16,
            aspp_out_channels: 64,
            decoder_widths: [64, 32, 16, 16],
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "full" => Ok(Self::default()),
            "small" => Ok(Self::small()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::config(
                "model.preset",
                format!("unknown preset `{other}` (expected default, small or micro)"),
            )),
        }
    }

    /// Stage widths after the width multiplier.
    pub fn stage_widths(&self) -> [usize; 4] {
        if self.width_multiplier == 1.0 {
            return self.widths;
        }
        self.widths.map(|w| make_divisible(w as f64 * self.width_multiplier, 8))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("model.in_channels", self.in_channels)?;
        if self.input_size == 0 || self.input_size % DOWNSAMPLE != 0 {
            return Err(Error::config(
                "model.input_size",
                format!("{} is not a positive multiple of {DOWNSAMPLE}", self.input_size),
            ));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            positive(&format!("model.widths[{i}]"), w)?;
        }
        for (i, &b) in self.blocks.iter().enumerate() {
            positive(&format!("model.blocks[{i}]"), b)?;
        }
        positive("model.expansion", self.expansion)?;
        positive("model.transformer_layers", self.transformer_layers)?;
        positive("model.heads", self.heads)?;
        positive("model.ffn_mult", self.ffn_mult)?;
        let d = self.transformer_dim;
        if d == 0 || d % 4 != 0 {
            return Err(Error::config("model.transformer_dim", format!("{d} is not a positive multiple of 4")));
        }
        if d % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("transformer_dim {d} is not divisible by {} heads", self.heads),
            ));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::config("model.aspp_rates", "need at least one rate, all positive"));
        }
        positive("model.aspp_branch_channels", self.aspp_branch_channels)?;
        positive("model.aspp_out_channels", self.aspp_out_channels)?;
        positive("model.scse_reduction", self.scse_reduction)?;
        for (i, &w) in self.decoder_widths.iter().enumerate() {
            if w < self.scse_reduction || w % self.scse_reduction != 0 {
                return Err(Error::config(
                    format!("model.decoder_widths[{i}]"),
                    format!("{w} is not a positive multiple of scse_reduction {}", self.scse_reduction),
                ));
            }
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::config("model.width_multiplier", "must be finite and positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["default", "small", "micro"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn half_width_halves_every_stage() {
        let cfg = ModelConfig {
            width_multiplier: 0.5,
            ..Default::default()
        };
        assert_eq!(cfg.stage_widths(), [16, 32, 64, 128]);
        let micro = ModelConfig {
            width_multiplier: 0.5,
            ..ModelConfig::micro()
        };
        // rounded to multiples of 8 with a floor of 8
        assert_eq!(micro.stage_widths(), [8, 8, 16, 16]);
    }

    #[test]
    fn field_level_diagnostics() {
        let bad = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("model.heads"));
        let bad = ModelConfig {
            input_size: 100,
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("input_size") && msg.contains("32"));
        let bad = ModelConfig {
            decoder_widths: [128, 64, 32, 4],
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("decoder_widths[3]"));
    }

    #[test]
    fn serde_roundtrip_and_unknown_keys() {
        let cfg = ModelConfig::micro();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), cfg);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"widthz":[1,2,3,4]}"#).is_err());
        assert_eq!(serde_json::from_str::<ModelConfig>("{}").unwrap(), ModelConfig::default());
    }
}
