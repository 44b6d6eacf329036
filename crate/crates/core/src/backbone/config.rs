use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of the toy dual encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Embedding width.
    pub d: usize,
    /// Transformer blocks per encoder.
    pub layers: usize,
    pub heads: usize,
    /// Patches per image.
    pub patches: usize,
    /// Raw feature width of one patch.
    pub patch_dim: usize,
    pub vocab: usize,
    pub max_tokens: usize,
    /// Softmax temperature applied to cosine similarities.
    pub gamma: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { d: 32, layers: 4, heads: 2, patches: 4, patch_dim: 16, vocab: 64, max_tokens: 8, gamma: 0.05 }
    }
}

/// Hidden width of the block MLP relative to `d`.
pub const MLP_RATIO: usize = 4;

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.layers == 0 || self.heads == 0 {
            return bad("d, layers and heads must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        if self.patches == 0 || self.patch_dim == 0 {
            return bad("patches and patch_dim must be positive".into());
        }
        if self.vocab == 0 || self.max_tokens == 0 {
            return bad("vocab and max_tokens must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be a positive finite number, got {}", self.gamma));
        }
        Ok(())
    }

    /// Checks that `classes` class tokens plus the template fit the vocabulary.
    pub fn validate_for(&self, classes: usize, template: &PromptTemplate) -> Result<()> {
        self.validate()?;
        let needed = template.first_class_token() + classes;
        if self.vocab < needed {
            return Err(Error::Config(format!(
                "vocab={} is smaller than {} template tokens + {classes} class tokens",
                self.vocab,
                template.first_class_token()
            )));
        }
        if template.len() > self.max_tokens {
            return Err(Error::Config(format!("prompt length {} exceeds max_tokens={}", template.len(), self.max_tokens)));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count (the temperature is fixed).
    ///
    /// Per block: `12 d^2 + 13 d` (four attention projections with biases,
    /// a `d -> 4d -> d` MLP with biases, two layer norms). Vision adds the
    /// patch embedding, class token, positional table, final norm and
    /// output projection; text adds the token table, positional table,
    /// final norm and output projection.
    pub fn parameter_count(&self) -> usize {
        let d = self.d;
        let block = 12 * d * d + 13 * d;
        let vision = self.patch_dim * d + d + d + (self.patches + 1) * d + self.layers * block + 2 * d + d * d;
        let text = self.vocab * d + self.max_tokens * d + self.layers * block + 2 * d + d * d;
        vision + text
    }
}

/// Token sequence with exactly one class placeholder.
///
/// Template tokens occupy ids `0..n_template`; class `k` maps to token
/// `n_template + k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// `None` marks the placeholder.
    slots: Vec<Option<usize>>,
}

impl PromptTemplate {
    pub fn new(slots: Vec<Option<usize>>) -> Result<Self> {
        let holes = slots.iter().filter(|s| s.is_none()).count();
        if holes != 1 {
            return Err(Error::Config(format!("prompt template needs exactly one placeholder, found {holes}")));
        }
        Ok(Self { slots })
    }

    /// "a photo of a [class]": four template tokens then the class token.
    pub fn photo_of() -> Self {
        Self { slots: vec![Some(0), Some(1), Some(2), Some(3), None] }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// First token id available for class tokens.
    pub fn first_class_token(&self) -> usize {
        self.slots.iter().flatten().map(|t| t + 1).max().unwrap_or(0)
    }

    pub fn tokens_for(&self, class: usize) -> Vec<usize> {
        let class_token = self.first_class_token() + class;
        self.slots.iter().map(|s| s.unwrap_or(class_token)).collect()
    }
}
