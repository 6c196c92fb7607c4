//! Ready-made gradient checks of the main modules, on weights drawn with
//! [`Spread::GRADIENT`] and inputs from U(-1, 1).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fd_check, FdConfig, FdReport, Tape, Var};
use crate::attention::ChannelAttnWeights;
use crate::blocks::{BlockOptions, MtDhb, TransformerBlock};
use crate::error::{Error, Result};
use crate::params::{randomize, Init, Initializer, ParamReader, ParamSource, Spread};
use crate::prompt::{PromptCodebook, PromptDims};
use crate::ssm::Ssm2d;
use crate::tensor::Tensor;
use crate::weights::{DType, WeightStore};

pub const HEADS: usize = 2;
pub const PROMPT_ENTRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradBlock {
    ChannelAttention,
    /// Four-route scan with its input-dependent step and state projections.
    SelectiveScan,
    MtDhb,
    ScPromptBlock,
    TransformerBlock,
}

impl GradBlock {
    pub const ALL: [GradBlock; 5] = [
        GradBlock::ChannelAttention,
        GradBlock::SelectiveScan,
        GradBlock::MtDhb,
        GradBlock::ScPromptBlock,
        GradBlock::TransformerBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradBlock::ChannelAttention => "channel_attention",
            GradBlock::SelectiveScan => "selective_scan",
            GradBlock::MtDhb => "mt_dhb",
            GradBlock::ScPromptBlock => "sc_prompt_block",
            GradBlock::TransformerBlock => "transformer_block",
        }
    }
}

impl fmt::Display for GradBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradBlock::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown block {s:?}")))
    }
}

fn check_module<W>(
    input: [usize; 4],
    seed: u64,
    cfg: FdConfig,
    declare: impl Fn(&mut Initializer<'_>) -> Result<W>,
    apply: impl Fn(&Tape<f64>, &mut ParamReader<'_>, &Var<f64>) -> Result<Var<f64>> + Sync,
) -> Result<FdReport> {
    let mut store = WeightStore::new();
    declare(&mut Initializer::new(&mut store, seed, DType::F64))?;
    randomize(&mut store, seed ^ 0x9e37, Spread::GRADIENT);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e9);
    let x = Tensor::<f64>::from_fn(input, |_| rng.gen_range(-1.0..1.0));
    store.insert_tensor("input", input.to_vec(), &x, DType::F64)?;
    fd_check(
        |t, s| {
            let mut r = ParamReader::new(s);
            let p = ParamSource::<f64>::take(&mut r, "input", &input, Init::Zeros)?;
            apply(t, &mut r, &t.param(&p))
        },
        &store,
        cfg,
    )
}

/// Gradient check of `block` on a `1×side×side×channels` input.
pub fn gradcheck(block: GradBlock, side: usize, channels: usize, seed: u64, cfg: FdConfig) -> Result<FdReport> {
    let shape = [1, side, side, channels];
    let opt = BlockOptions::default();
    match block {
        GradBlock::ChannelAttention => check_module(
            shape,
            seed,
            cfg,
            |s| ChannelAttnWeights::<f64>::new(s, "attn", channels, HEADS, opt.normalize_qk),
            |t, r, x| ChannelAttnWeights::new(r, "attn", channels, HEADS, opt.normalize_qk)?.forward(t, x),
        ),
        GradBlock::SelectiveScan => check_module(
            shape,
            seed,
            cfg,
            |s| Ssm2d::<f64>::new(s, "ssm", channels, opt.d_state),
            |t, r, x| Ssm2d::new(r, "ssm", channels, opt.d_state)?.forward(t, x),
        ),
        GradBlock::MtDhb => check_module(
            shape,
            seed,
            cfg,
            |s| MtDhb::<f64>::new(s, "block", channels, HEADS, &opt),
            |t, r, x| MtDhb::new(r, "block", channels, HEADS, &opt)?.forward(t, x),
        ),
        GradBlock::ScPromptBlock => {
            let dims = PromptDims {
                channels,
                entries: PROMPT_ENTRIES,
                height: side,
                width: side,
                heads: HEADS,
                reduction: opt.reduction,
            };
            check_module(
                shape,
                seed,
                cfg,
                |s| PromptCodebook::<f64>::new(s, "prompt", dims, opt.normalize_qk),
                |t, r, x| PromptCodebook::new(r, "prompt", dims, opt.normalize_qk)?.forward(t, x),
            )
        }
        GradBlock::TransformerBlock => check_module(
            shape,
            seed,
            cfg,
            |s| TransformerBlock::<f64>::new(s, "block", channels, HEADS, &opt),
            |t, r, x| TransformerBlock::new(r, "block", channels, HEADS, &opt)?.forward(t, x),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for b in GradBlock::ALL {
            assert_eq!(b.name().parse::<GradBlock>().unwrap(), b);
        }
        assert!("mamba".parse::<GradBlock>().is_err());
    }

    #[test]
    fn attention_case_covers_input_and_weights() {
        let r = gradcheck(GradBlock::ChannelAttention, 2, 4, 1, FdConfig::default()).unwrap();
        assert!(r.params.iter().any(|p| p.name == "input"));
        assert!(r.params.iter().any(|p| p.name == "attn.temperature"));
        assert!(r.directional_rel_err() < 1e-6, "{}", r.to_table());
    }
}
