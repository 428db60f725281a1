use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the conditional U-Net.
///
/// Stage `l` runs `n_res` residual blocks at `base_channels * multipliers[l]`
/// channels and resolution `H / 2^l`, then halves the resolution with a
/// strided convolution. The bottleneck sits at `H / 2^L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub multipliers: Vec<usize>,
    pub n_res: usize,
    /// Fourier noise-embedding width; also the width of the embedding MLP.
    pub emb_dim: usize,
    /// GroupNorm groups before clamping to the channel count.
    pub groups: usize,
    /// Bottleneck attention uses `max(1, C / head_dim)` heads.
    pub head_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 10,
            out_channels: 4,
            base_channels: 8,
            multipliers: vec![2, 4],
            n_res: 2,
            emb_dim: 64,
            groups: 32,
            head_dim: 32,
        }
    }
}

impl NetConfig {
    /// Full-size layout: 32 base channels, multipliers [2, 4, 8, 8], 256-dim embedding.
    pub fn full_scale() -> Self {
        NetConfig {
            base_channels: 32,
            multipliers: vec![2, 4, 8, 8],
            emb_dim: 256,
            ..NetConfig::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.multipliers.len()
    }

    pub fn stage_channels(&self, l: usize) -> usize {
        self.base_channels * self.multipliers[l]
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.stages() - 1)
    }

    pub fn groups_for(&self, channels: usize) -> usize {
        self.groups.min(channels)
    }

    pub fn attention_heads(&self) -> usize {
        (self.bottleneck_channels() / self.head_dim).max(1)
    }

    /// Spatial dimensions must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.stages()
    }

    /// Every channel count that passes through a GroupNorm.
    fn normalized_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.base_channels];
        for l in 0..self.stages() {
            let c = self.stage_channels(l);
            widths.extend([c, 2 * c]);
        }
        widths
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.base_channels,
            self.n_res,
            self.emb_dim,
            self.groups,
            self.head_dim,
        ];
        if positive.contains(&0) || self.multipliers.is_empty() || self.multipliers.contains(&0) {
            return Err(Error::Config(format!("net config has zero-sized entries: {self:?}")));
        }
        if self.emb_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "noise embedding dimension must be even, got {}",
                self.emb_dim
            )));
        }
        if self.in_channels <= self.out_channels {
            return Err(Error::Config(
                "input channels must include the noisy state plus conditioning".into(),
            ));
        }
        for c in self.normalized_widths() {
            let g = self.groups_for(c);
            if c % g != 0 {
                return Err(Error::Config(format!("{g} groups do not divide {c} channels")));
            }
        }
        let c = self.bottleneck_channels();
        if c % self.attention_heads() != 0 {
            return Err(Error::Config(format!(
                "{} attention heads do not divide {c} channels",
                self.attention_heads()
            )));
        }
        Ok(())
    }

    pub fn check_input_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} input is not divisible by {m} ({} stages)",
                self.stages()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        NetConfig::default().validate().unwrap();
        NetConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn odd_embedding_is_rejected() {
        let cfg = NetConfig {
            emb_dim: 63,
            ..NetConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn indivisible_groups_are_rejected() {
        let cfg = NetConfig {
            base_channels: 6,
            multipliers: vec![8],
            groups: 32,
            ..NetConfig::default()
        };
        // 48 channels with min(32, 48) = 32 groups
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn input_size_must_divide() {
        let cfg = NetConfig::default();
        assert!(cfg.check_input_size(16, 32).is_ok());
        assert!(cfg.check_input_size(18, 16).is_err());
    }
}
