use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the channel-attention logits are tempered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabTemperature {
    /// Divide by √N, N the number of spatial positions.
    #[default]
    SqrtTokens,
    /// Divide by N itself.
    Tokens,
}

impl TabTemperature {
    pub fn value(self, tokens: usize) -> f64 {
        match self {
            TabTemperature::SqrtTokens => (tokens as f64).sqrt(),
            TabTemperature::Tokens => tokens as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Transformer encoder layers (global self-attention).
    #[default]
    Vit,
    /// Residual 3×3 convolutions over the patch grid (local mixing only).
    Conv,
}

impl std::str::FromStr for BackboneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(BackboneVariant::Vit),
            "conv" => Ok(BackboneVariant::Conv),
            other => Err(Error::Config(format!("unknown backbone variant {other:?}"))),
        }
    }
}

/// Architectural hyperparameters. Defaults are the desk-scale toy model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    /// 1-based encoder layers whose outputs are concatenated.
    pub extract_layers: Vec<usize>,
    pub heads: usize,
    pub window_size: usize,
    pub d1: usize,
    pub d2: usize,
    pub mlp_hidden: usize,
    pub scale: f64,
    pub tab_per_stage: usize,
    pub stages: usize,
    pub tab_temperature: TabTemperature,
    pub relative_bias: bool,
    pub enable_tab: bool,
    pub enable_sstb: bool,
    pub enable_dual_branch: bool,
    pub backbone: BackboneVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 8,
            image_size: 32,
            embed_dim: 64,
            num_layers: 6,
            extract_layers: vec![3, 4, 5, 6],
            heads: 2,
            window_size: 2,
            d1: 64,
            d2: 32,
            mlp_hidden: 64,
            scale: 0.1,
            tab_per_stage: 2,
            stages: 2,
            tab_temperature: TabTemperature::SqrtTokens,
            relative_bias: false,
            enable_tab: true,
            enable_sstb: true,
            enable_dual_branch: true,
            backbone: BackboneVariant::Vit,
        }
    }
}

impl ModelConfig {
    /// ViT-B/8-sized hyperparameters (224 input, 12 layers, layers 7–10
    /// extracted, 768/384 stage widths, window 4, α = 0.8).
    pub fn vit_b8() -> Self {
        ModelConfig {
            patch_size: 8,
            image_size: 224,
            embed_dim: 768,
            num_layers: 12,
            extract_layers: vec![7, 8, 9, 10],
            heads: 4,
            window_size: 4,
            d1: 768,
            d2: 384,
            mlp_hidden: 768,
            scale: 0.8,
            ..ModelConfig::default()
        }
    }

    /// 16×16 input, a 2×2 patch grid, widths of 4–8. Small enough to
    /// finite-difference every parameter.
    pub fn micro() -> Self {
        ModelConfig {
            patch_size: 8,
            image_size: 16,
            embed_dim: 4,
            num_layers: 2,
            extract_layers: vec![1, 2],
            heads: 2,
            window_size: 2,
            d1: 4,
            d2: 2,
            mlp_hidden: 4,
            scale: 0.5,
            tab_per_stage: 2,
            stages: 2,
            ..ModelConfig::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Channel count after multi-layer concatenation.
    pub fn concat_channels(&self) -> usize {
        self.extract_layers.len() * self.embed_dim
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        if stage == 0 {
            self.d1
        } else {
            self.d2
        }
    }

    pub fn head_dim(&self) -> usize {
        self.stage_dim(self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("heads", self.heads),
            ("window_size", self.window_size),
            ("d1", self.d1),
            ("d2", self.d2),
            ("mlp_hidden", self.mlp_hidden),
            ("tab_per_stage", self.tab_per_stage),
            ("stages", self.stages),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.grid().is_multiple_of(self.window_size) {
            return Err(Error::Config(format!(
                "patch grid {} is not divisible by window_size {}",
                self.grid(),
                self.window_size
            )));
        }
        for (name, d) in [("embed_dim", self.embed_dim), ("d1", self.d1), ("d2", self.d2)] {
            if d % self.heads != 0 {
                return Err(Error::Config(format!(
                    "{name} {d} is not divisible by heads {}",
                    self.heads
                )));
            }
        }
        if self.extract_layers.is_empty() {
            return Err(Error::Config("extract_layers must not be empty".into()));
        }
        if self.extract_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "extract_layers must be strictly ascending, got {:?}",
                self.extract_layers
            )));
        }
        if let Some(&bad) = self
            .extract_layers
            .iter()
            .find(|&&l| l == 0 || l > self.num_layers)
        {
            return Err(Error::Config(format!(
                "extract layer {bad} outside 1..={}",
                self.num_layers
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::Config(format!("scale must lie in (0, 1], got {}", self.scale)));
        }
        Ok(())
    }
}
