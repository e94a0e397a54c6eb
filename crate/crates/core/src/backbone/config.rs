use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How image tokens receive positional information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// Fixed sine/cosine table added to image tokens only.
    Sinusoidal,
    /// Learned `(k+1)×d` table as in the reference ViT-B/16. Counted but never
    /// instantiated.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub position: PositionEncoding,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ViTConfig {
    /// 16×16 single-channel images, 4×4 patches, d=48, four layers.
    pub fn desk() -> Self {
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            dim: 48,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            classes: 5,
            position: PositionEncoding::Sinusoidal,
        }
    }

    /// ViT-B/16 at 224×224 with a 1000-way head; used for parameter counting.
    pub fn vit_base() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            classes: 1000,
            position: PositionEncoding::Learned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("vit.{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of image tokens `k`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn layer_parameter_count(&self) -> usize {
        let d = self.dim;
        let h = self.mlp_hidden();
        let norms = 2 * 2 * d;
        let attention = 4 * (d * d + d);
        let mlp = d * h + h + h * d + d;
        norms + attention + mlp
    }

    pub fn head_parameter_count(&self) -> usize {
        self.dim * self.classes + self.classes
    }

    /// Every backbone weight including the classification head.
    pub fn backbone_parameter_count(&self) -> usize {
        let d = self.dim;
        let patch = self.patch_dim() * d + d;
        let class_token = d;
        let positions = match self.position {
            PositionEncoding::Sinusoidal => 0,
            PositionEncoding::Learned => (self.tokens() + 1) * d,
        };
        let final_norm = 2 * d;
        patch
            + class_token
            + positions
            + self.depth * self.layer_parameter_count()
            + final_norm
            + self.head_parameter_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_base_total_matches_reference() {
        // 86.57M as quoted for ViT-B/16.
        assert_eq!(ViTConfig::vit_base().backbone_parameter_count(), 86_567_656);
    }

    #[test]
    fn desk_token_arithmetic() {
        let mut cfg = ViTConfig::desk();
        cfg.image_size = 8;
        cfg.patch_size = 2;
        assert_eq!(cfg.tokens(), 16);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let mut cfg = ViTConfig::desk();
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ViTConfig::desk();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }
}
