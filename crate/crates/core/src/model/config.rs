use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;

/// Where the patch attention dropout layer sits inside each encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadlPosition {
    /// MSA → MLP → p-ADL
    AfterMlp,
    /// MSA → p-ADL → MLP
    BetweenMsaMlp,
}

impl fmt::Display for PadlPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PadlPosition::AfterMlp => "after_mlp",
            PadlPosition::BetweenMsaMlp => "between_msa_mlp",
        })
    }
}

impl FromStr for PadlPosition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "after_mlp" => Ok(PadlPosition::AfterMlp),
            "between_msa_mlp" => Ok(PadlPosition::BetweenMsaMlp),
            _ => Err(format!("unknown p-ADL position {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// λ: tokens whose mean embedding reaches λ·max are dropped.
    pub padl_drop_threshold: f64,
    /// α: probability of taking the drop branch.
    pub padl_embedding_drop_rate: f64,
    pub padl_position: PadlPosition,
    /// Keep the class token out of p-ADL scaling.
    pub padl_exempt_cls: bool,
    /// Divide attention scores by √d_h.
    pub scale_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// CPU-sized model used for the synthetic shapes experiments.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            channels: 3,
            patch_size: 8,
            depth: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 2.0,
            num_classes: 8,
            padl_drop_threshold: 0.9,
            padl_embedding_drop_rate: 0.75,
            padl_position: PadlPosition::AfterMlp,
            padl_exempt_cls: false,
            scale_attention: true,
            seed: 0,
        }
    }

    /// Tiny model for gradient checks: 2 blocks, width 16, 2 heads, s = 5.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            depth: 2,
            embed_dim: 16,
            heads: 2,
            num_classes: 3,
            ..ModelConfig::desk()
        }
    }

    pub fn deit_small() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            depth: 12,
            embed_dim: 384,
            heads: 6,
            mlp_ratio: 4.0,
            num_classes: 1000,
            ..ModelConfig::desk()
        }
    }

    pub fn deit_base() -> Self {
        ModelConfig {
            embed_dim: 768,
            heads: 12,
            ..ModelConfig::deit_small()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Sequence length `s`: patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.channels == 0 || self.patch_size == 0 {
            return bad("image_size, channels and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 || self.num_classes == 0 {
            return bad("depth, embed_dim, heads and num_classes must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if !(self.padl_drop_threshold > 0.0 && self.padl_drop_threshold <= 1.0) {
            return bad(format!(
                "padl_drop_threshold {} outside (0, 1]",
                self.padl_drop_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.padl_embedding_drop_rate) {
            return bad(format!(
                "padl_embedding_drop_rate {} outside [0, 1]",
                self.padl_embedding_drop_rate
            ));
        }
        Ok(())
    }

    /// Sets one field from its `key=value` form. Returns `false` for keys this
    /// config does not own.
    pub fn apply(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = kv::value(key, raw)?,
            "channels" => self.channels = kv::value(key, raw)?,
            "patch_size" => self.patch_size = kv::value(key, raw)?,
            "depth" => self.depth = kv::value(key, raw)?,
            "embed_dim" => self.embed_dim = kv::value(key, raw)?,
            "heads" => self.heads = kv::value(key, raw)?,
            "mlp_ratio" => self.mlp_ratio = kv::value(key, raw)?,
            "num_classes" => self.num_classes = kv::value(key, raw)?,
            "padl_drop_threshold" => self.padl_drop_threshold = kv::value(key, raw)?,
            "padl_embedding_drop_rate" => self.padl_embedding_drop_rate = kv::value(key, raw)?,
            "padl_position" => self.padl_position = kv::value(key, raw)?,
            "padl_exempt_cls" => self.padl_exempt_cls = kv::flag(key, raw)?,
            "scale_attention" => self.scale_attention = kv::flag(key, raw)?,
            "seed" => self.seed = kv::value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("depth", self.depth.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", format!("{:?}", self.mlp_ratio)),
            ("num_classes", self.num_classes.to_string()),
            ("padl_drop_threshold", format!("{:?}", self.padl_drop_threshold)),
            (
                "padl_embedding_drop_rate",
                format!("{:?}", self.padl_embedding_drop_rate),
            ),
            ("padl_position", self.padl_position.to_string()),
            ("padl_exempt_cls", self.padl_exempt_cls.to_string()),
            ("scale_attention", self.scale_attention.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_sequence_lengths() {
        let b = ModelConfig::deit_base();
        assert_eq!(b.seq_len(), 197);
        assert_eq!(b.head_dim(), 64);
        assert_eq!(b.patch_dim(), 768);
        assert_eq!(ModelConfig::deit_small().head_dim(), 64);
        assert_eq!(ModelConfig::toy().seq_len(), 5);
        assert_eq!(ModelConfig::desk().seq_len(), 65);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        let mut c = ModelConfig::desk();
        c.image_size = 65;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.padl_drop_threshold = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.padl_embedding_drop_rate = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = ModelConfig::deit_small();
        c.padl_position = PadlPosition::BetweenMsaMlp;
        c.seed = 42;
        let mut back = ModelConfig::toy();
        for (k, v) in c.to_pairs() {
            assert!(back.apply(k, &v).unwrap());
        }
        assert_eq!(back, c);
        assert!(!back.apply("epochs", "3").unwrap());
    }
}
