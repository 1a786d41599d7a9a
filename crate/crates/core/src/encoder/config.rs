use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Language,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Language => "language",
        }
    }
}

/// Shape of both encoder stacks and of the prompts they accept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Transformer layers per encoder.
    pub layers: usize,
    /// Number of leading layers that receive prompts.
    pub depth: usize,
    pub d_vision: usize,
    pub d_text: usize,
    /// Prompt tokens per prompted layer, shared by both modalities.
    pub prompt_len: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub d_joint: usize,
    pub vocab: usize,
    /// Patches per image and the width of each patch vector.
    pub patches: usize,
    pub patch_dim: usize,
    /// Tokens per caption.
    pub caption_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            depth: 3,
            d_vision: 32,
            d_text: 24,
            prompt_len: 8,
            heads: 4,
            ffn_mult: 2,
            d_joint: 16,
            vocab: 512,
            patches: 16,
            patch_dim: 8,
            caption_len: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.depth == 0 || self.depth > self.layers {
            return fail(format!("need 1 <= depth <= layers, got depth {} layers {}", self.depth, self.layers));
        }
        if self.heads == 0 || self.d_vision % self.heads != 0 || self.d_text % self.heads != 0 {
            return fail(format!(
                "widths {} and {} must be divisible by heads {}",
                self.d_vision, self.d_text, self.heads
            ));
        }
        let positive = [
            ("prompt_len", self.prompt_len),
            ("ffn_mult", self.ffn_mult),
            ("d_joint", self.d_joint),
            ("vocab", self.vocab),
            ("patches", self.patches),
            ("patch_dim", self.patch_dim),
            ("caption_len", self.caption_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn width(&self, modality: Modality) -> usize {
        match modality {
            Modality::Vision => self.d_vision,
            Modality::Language => self.d_text,
        }
    }

    /// Content tokens (patches or caption tokens) per input.
    pub fn content_len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Vision => self.patches,
            Modality::Language => self.caption_len,
        }
    }
}
