use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockOptions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub blocks: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub block_types: Vec<BlockKind>,
    /// Codebook size of every prompt block.
    pub prompt_entries: usize,
    /// Training patch size; fixes the stored spatial prompt resolution.
    pub patch_size: usize,
    #[serde(default)]
    pub latent_prompt: bool,
    #[serde(default)]
    pub global_residual: bool,
    #[serde(default)]
    pub block: BlockOptions,
}

pub const IMAGE_CHANNELS: usize = 3;
/// Spatial factor of every downsample.
pub const SCALE: usize = 2;

impl NetworkConfig {
    /// Four levels, the published block, channel and head counts, N = 5.
    pub fn paper() -> Self {
        NetworkConfig {
            levels: 4,
            blocks: vec![4, 6, 6, 8],
            channels: vec![48, 96, 192, 384],
            heads: vec![1, 2, 4, 8],
            block_types: vec![BlockKind::Hybrid, BlockKind::Hybrid, BlockKind::Transformer, BlockKind::Transformer],
            prompt_entries: 5,
            patch_size: 128,
            latent_prompt: false,
            global_residual: false,
            block: BlockOptions::default(),
        }
    }

    /// Two hybrid levels at 8 and 16 channels, one block each.
    pub fn tiny() -> Self {
        NetworkConfig {
            levels: 2,
            blocks: vec![1, 1],
            channels: vec![8, 16],
            heads: vec![1, 2],
            block_types: vec![BlockKind::Hybrid, BlockKind::Hybrid],
            prompt_entries: 5,
            patch_size: 64,
            latent_prompt: false,
            global_residual: false,
            block: BlockOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("at least one level is required".into());
        }
        for (what, len) in [
            ("blocks", self.blocks.len()),
            ("channels", self.channels.len()),
            ("heads", self.heads.len()),
            ("block_types", self.block_types.len()),
        ] {
            if len != self.levels {
                return bad(format!("{what} lists {len} levels, expected {}", self.levels));
            }
        }
        for i in 0..self.levels {
            let (c, h) = (self.channels[i], self.heads[i]);
            if c == 0 || h == 0 || c % h != 0 {
                return bad(format!("level {}: {c} channels not divisible into {h} heads", i + 1));
            }
            if self.block.reduction == 0 || c % self.block.reduction != 0 {
                return bad(format!(
                    "level {}: reduction {} does not divide {c} channels",
                    i + 1,
                    self.block.reduction
                ));
            }
            if i + 1 < self.levels && self.channels[i + 1] != 2 * c {
                return bad(format!(
                    "channels must double between levels, got {c} then {}",
                    self.channels[i + 1]
                ));
            }
        }
        if self.prompt_entries == 0 {
            return bad("prompt_entries must be positive".into());
        }
        if self.block.d_state == 0 || !(self.block.ffn_expansion > 0.0) {
            return bad("d_state and ffn_expansion must be positive".into());
        }
        if self.patch_size == 0 || self.patch_size % self.multiple() != 0 {
            return bad(format!(
                "patch size {} is not a multiple of {}",
                self.patch_size,
                self.multiple()
            ));
        }
        Ok(())
    }

    /// Input extents must be multiples of this (inputs are padded otherwise).
    pub fn multiple(&self) -> usize {
        SCALE.pow(self.levels.saturating_sub(1) as u32)
    }

    /// Stored spatial prompt resolution at 1-based `level`.
    pub fn prompt_size(&self, level: usize) -> usize {
        (self.patch_size / SCALE.pow(level as u32 - 1)).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        NetworkConfig::paper().validate().unwrap();
        NetworkConfig::tiny().validate().unwrap();
    }

    #[test]
    fn paper_prompt_sizes() {
        let c = NetworkConfig::paper();
        assert_eq!((1..=4).map(|l| c.prompt_size(l)).collect::<Vec<_>>(), vec![128, 64, 32, 16]);
        assert_eq!(c.multiple(), 8);
    }

    #[test]
    fn invariants_are_enforced() {
        let mut c = NetworkConfig::tiny();
        c.channels = vec![8, 24];
        c.heads = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.heads = vec![3, 2];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.blocks.push(1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = NetworkConfig::paper();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"mt_dhb\"") && s.contains("\"tb\""));
        assert_eq!(serde_json::from_str::<NetworkConfig>(&s).unwrap(), c);
    }
}
