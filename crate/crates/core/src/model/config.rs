use serde::{Deserialize, Serialize};

use crate::error::{Result, SerError};

/// Frozen self-attention encoder standing in for a pretrained speech encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderStubConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
}

impl Default for EncoderStubConfig {
    fn default() -> Self {
        EncoderStubConfig {
            input_dim: 16,
            num_layers: 2,
            model_dim: 32,
            num_heads: 4,
            ff_dim: 64,
        }
    }
}

/// Rank-`rank` adapters on the query/key/value projections of every encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, alpha: 8.0 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcapaConfig {
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub input_kernel: usize,
    pub res2_scale: usize,
    pub groups: usize,
    pub se_bottleneck: usize,
    pub attention_hidden: usize,
}

impl Default for EcapaConfig {
    fn default() -> Self {
        EcapaConfig {
            channels: 64,
            dilations: vec![2, 3, 4],
            kernel_size: 3,
            input_kernel: 5,
            res2_scale: 4,
            groups: 8,
            se_bottleneck: 16,
            attention_hidden: 32,
        }
    }
}

/// Window sizes (in frames) of the multiscale attention pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub scales: Vec<usize>,
    pub attention_hidden: usize,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            scales: vec![1, 4, 16],
            attention_hidden: 32,
        }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.first() != Some(&1) {
            return Err(SerError::Config("pooling scales must start at 1".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SerError::Config(format!(
                "pooling scales must be strictly increasing, got {:?}",
                self.scales
            )));
        }
        if self.attention_hidden == 0 {
            return Err(SerError::Config("pooling attention_hidden must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderStubConfig,
    /// `None` builds the adapter-free encoder. Serialized as `rank = 0`.
    #[serde(with = "lora_setting")]
    pub lora: Option<LoraConfig>,
    pub ecapa: EcapaConfig,
    pub pooling: PoolingConfig,
    pub embed_dim: usize,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderStubConfig::default(),
            lora: Some(LoraConfig::default()),
            ecapa: EcapaConfig::default(),
            pooling: PoolingConfig::default(),
            embed_dim: 64,
            norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reduced downstream network used by gradient checks and fast tests
    /// (default 32-dim encoder, 8 ECAPA channels).
    pub fn small(seed: u64) -> Self {
        ModelConfig {
            encoder: EncoderStubConfig::default(),
            lora: Some(LoraConfig::default()),
            ecapa: EcapaConfig {
                channels: 8,
                dilations: vec![2, 3, 4],
                kernel_size: 3,
                input_kernel: 5,
                res2_scale: 4,
                groups: 2,
                se_bottleneck: 4,
                attention_hidden: 8,
            },
            pooling: PoolingConfig {
                scales: vec![1, 4, 16],
                attention_hidden: 8,
            },
            embed_dim: 8,
            norm_eps: 1e-5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.input_dim == 0 || e.model_dim == 0 || e.ff_dim == 0 || e.num_heads == 0 {
            return Err(SerError::Config("encoder dimensions must be > 0".into()));
        }
        if !e.model_dim.is_multiple_of(e.num_heads) {
            return Err(SerError::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                e.model_dim, e.num_heads
            )));
        }
        if let Some(l) = &self.lora {
            if l.rank == 0 || l.alpha <= 0.0 {
                return Err(SerError::Config("lora rank and alpha must be > 0".into()));
            }
        }
        let c = &self.ecapa;
        if c.channels == 0 || c.groups == 0 || !c.channels.is_multiple_of(c.groups) {
            return Err(SerError::Config(format!(
                "ecapa channels {} not divisible by groups {}",
                c.channels, c.groups
            )));
        }
        if c.res2_scale == 0 || !c.channels.is_multiple_of(c.res2_scale) {
            return Err(SerError::Config(format!(
                "ecapa channels {} not divisible by res2 scale {}",
                c.channels, c.res2_scale
            )));
        }
        if c.kernel_size.is_multiple_of(2) || c.input_kernel.is_multiple_of(2) {
            return Err(SerError::Config("ecapa kernel sizes must be odd".into()));
        }
        if c.dilations.is_empty() || c.dilations.contains(&0) {
            return Err(SerError::Config(
                "ecapa needs at least one block with dilation >= 1".into(),
            ));
        }
        if c.se_bottleneck == 0 || c.attention_hidden == 0 || self.embed_dim == 0 {
            return Err(SerError::Config("hidden sizes must be > 0".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(SerError::Config("norm_eps must be > 0".into()));
        }
        self.pooling.validate()
    }
}

mod lora_setting {
    use super::LoraConfig;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<LoraConfig>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(l) => l.serialize(s),
            None => LoraConfig {
                rank: 0,
                ..LoraConfig::default()
            }
            .serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<LoraConfig>, D::Error> {
        let l = LoraConfig::deserialize(d)?;
        Ok((l.rank > 0).then_some(l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_keeps_disabled_lora() {
        let mut cfg = ModelConfig::small(3);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), cfg);
        cfg.lora = None;
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ModelConfig>("embed_dim = 4\nbogus = 1").is_err());
        assert!(toml::from_str::<ModelConfig>("[ecapa]\nchanel = 4").is_err());
        let partial: ModelConfig = toml::from_str("[ecapa]\nchannels = 16").unwrap();
        assert_eq!(partial.ecapa.channels, 16);
        assert_eq!(partial.ecapa.groups, 8);
    }
}
