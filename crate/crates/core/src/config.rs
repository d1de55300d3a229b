use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Colour channels per pixel; fixed for the RGB toy domain.
pub const CHANNELS: usize = 3;

/// Architecture hyper-parameters. Serialised into checkpoints as eight `u32`
/// fields in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub max_text_tokens: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch: 4,
            d_model: 64,
            heads: 4,
            layers: 4,
            vocab_size: 48,
            max_text_tokens: 10,
            time_embed_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return bad("image_size must be a positive multiple of patch");
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.layers == 0 {
            return bad("layers must be >= 1");
        }
        if self.vocab_size < crate::prompt::MIN_VOCAB {
            return bad("vocab_size too small for the token layout");
        }
        if self.max_text_tokens == 0 {
            return bad("max_text_tokens must be >= 1");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be positive and even");
        }
        Ok(())
    }

    /// Side length of the image-token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per image token (`patch² · channels`).
    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.max_text_tokens + self.image_tokens()
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn to_fields(&self) -> [u32; 8] {
        [
            self.image_size,
            self.patch,
            self.d_model,
            self.heads,
            self.layers,
            self.vocab_size,
            self.max_text_tokens,
            self.time_embed_dim,
        ]
        .map(|v| v as u32)
    }

    pub fn from_fields(f: [u32; 8]) -> Result<Self> {
        let [image_size, patch, d_model, heads, layers, vocab_size, max_text_tokens, time_embed_dim] =
            f.map(|v| v as usize);
        let cfg = ModelConfig {
            image_size,
            patch,
            d_model,
            heads,
            layers,
            vocab_size,
            max_text_tokens,
            time_embed_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.image_tokens(), 64);
        assert_eq!(c.token_dim(), 48);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(ModelConfig::from_fields(c.to_fields()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_divisibility() {
        let c = ModelConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            patch: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
