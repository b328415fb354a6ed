use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::subword::{BOS_ID, EOS_ID, PAD_ID};

/// Named architecture sizes. Widths are desk-scale; depths follow the usual
/// transformer-base/big layouts, with `bigger` doubling the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Base,
    Big,
    Bigger,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f32,
    #[serde(default)]
    pub depth_scaled_init: bool,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
    pub seed: u64,
    #[serde(default = "default_bos")]
    pub bos_id: u32,
    #[serde(default = "default_eos")]
    pub eos_id: u32,
    #[serde(default = "default_pad")]
    pub pad_id: u32,
}

fn default_true() -> bool {
    true
}
fn default_bos() -> u32 {
    BOS_ID
}
fn default_eos() -> u32 {
    EOS_ID
}
fn default_pad() -> u32 {
    PAD_ID
}

impl ModelConfig {
    pub fn preset(preset: Preset, vocab_size: usize, seed: u64) -> Self {
        let (d_model, n_heads, ffn_dim, enc_layers, dec_layers, depth_scaled) = match preset {
            Preset::Base | Preset::Custom => (64, 4, 256, 6, 6, false),
            Preset::Big => (128, 8, 512, 6, 6, false),
            Preset::Bigger => (128, 8, 512, 12, 6, true),
        };
        ModelConfig {
            preset,
            vocab_size,
            d_model,
            n_heads,
            ffn_dim,
            enc_layers,
            dec_layers,
            dropout: 0.1,
            depth_scaled_init: depth_scaled,
            tied_embeddings: true,
            seed,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
            pad_id: PAD_ID,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad("sizes must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.preset == Preset::Bigger && self.enc_layers != 2 * self.dec_layers {
            return bad("the bigger preset has twice as many encoder as decoder layers".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (name, id) in [("bos", self.bos_id), ("eos", self.eos_id), ("pad", self.pad_id)] {
            if id as usize >= self.vocab_size {
                return bad(format!("{name} id {id} outside vocabulary"));
            }
        }
        Ok(())
    }

    /// Init scale applied to the residual-branch output matrices of layer
    /// `layer` (1-based).
    pub fn residual_scale(&self, layer: usize) -> f64 {
        if self.depth_scaled_init {
            1.0 / (layer as f64).sqrt()
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let base = ModelConfig::preset(Preset::Base, 100, 0);
        assert_eq!((base.enc_layers, base.dec_layers), (6, 6));
        base.validate().unwrap();
        let big = ModelConfig::preset(Preset::Big, 100, 0);
        assert_eq!((big.enc_layers, big.dec_layers), (6, 6));
        assert!(big.d_model > base.d_model);
        let bigger = ModelConfig::preset(Preset::Bigger, 100, 0);
        assert_eq!((bigger.enc_layers, bigger.dec_layers), (12, 6));
        assert!(bigger.depth_scaled_init);
        bigger.validate().unwrap();
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::preset(Preset::Base, 100, 0);
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset(Preset::Bigger, 100, 0);
        c.enc_layers = 6;
        assert!(c.validate().is_err());
        let c = ModelConfig::preset(Preset::Base, 2, 0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn depth_scale_ratio() {
        let c = ModelConfig::preset(Preset::Bigger, 100, 0);
        assert!((c.residual_scale(12) - c.residual_scale(3) / 2.0).abs() < 1e-15);
        let base = ModelConfig::preset(Preset::Base, 100, 0);
        assert_eq!(base.residual_scale(12), 1.0);
    }
}
