//! Spatial-channel prompt block for skip connections.
//!
//! A small attention head turns the input into convex weights over `N`
//! learnable channel prompts (N, 1, 1, C) and spatial prompts (N, Hp, Wp, 1).
//! The mixed prompts modulate the input, are cross-gated and fused, and the
//! result serves as keys and values of a channel attention whose queries come
//! from the input.

use crate::attention::ChannelAttnWeights;
use crate::blocks::{DimWeights, Pointwise};
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::params::{Init, Param, ParamSource};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct PromptCodebook<T> {
    pub channel: Param<T>,
    pub spatial: Param<T>,
    pub weight_down: Pointwise<T>,
    pub weight_out: Pointwise<T>,
    pub dim: DimWeights<T>,
    pub attn: ChannelAttnWeights<T>,
}

/// Mixed prompts and the weights that produced them.
#[derive(Debug, Clone)]
pub struct PromptMix<V> {
    /// (N_b, 1, 1, C)
    pub channel: V,
    /// (N_b, H, W, 1), already resized to the input.
    pub spatial: V,
    /// (N_b, 1, 1, N)
    pub weights: V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptDims {
    pub channels: usize,
    pub entries: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub reduction: usize,
}

impl<T: Scalar> PromptCodebook<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, d: PromptDims, normalize_qk: bool) -> Result<Self> {
        if d.entries == 0 || d.height == 0 || d.width == 0 {
            return Err(Error::Config(format!("{prefix}: empty prompt codebook {d:?}")));
        }
        if d.reduction == 0 || d.channels % d.reduction != 0 {
            return Err(Error::Config(format!(
                "{prefix}: reduction {} does not divide {} channels",
                d.reduction, d.channels
            )));
        }
        let p = |s: &str| format!("{prefix}.{s}");
        let hidden = d.channels / d.reduction;
        Ok(PromptCodebook {
            channel: src.take(&p("channel"), &[d.entries, 1, 1, d.channels], Init::Uniform(0.0, 1.0))?,
            spatial: src.take(&p("spatial"), &[d.entries, d.height, d.width, 1], Init::Uniform(0.0, 1.0))?,
            weight_down: Pointwise::new(src, &p("weight_down"), d.channels, hidden)?,
            weight_out: Pointwise::new(src, &p("weight_out"), hidden, d.entries)?,
            dim: DimWeights::new(src, &p("dim"), d.channels, d.reduction)?,
            attn: ChannelAttnWeights::new(src, &p("attn"), d.channels, d.heads, normalize_qk)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel.value.shape().c()
    }

    /// Prompt weights and the two mixed prompts for input `x`.
    pub fn pam(&self, tape: &Tape<T>, x: &Var<T>) -> Result<PromptMix<Var<T>>> {
        let s = x.shape();
        if s.c() != self.channels() {
            return Err(Error::shape(format!(
                "prompt codebook has {} channels, input has {}",
                self.channels(),
                s.c()
            )));
        }
        let pooled = tape.global_avg_pool(x)?;
        let h = tape.gelu(&self.weight_down.forward(tape, &pooled)?)?;
        let logits = tape.sigmoid(&self.weight_out.forward(tape, &h)?)?;
        let weights = tape.softmax(&logits, 3)?;
        let channel = tape.codebook_mix(&weights, &tape.param(&self.channel))?;
        let spatial = tape.codebook_mix(&weights, &tape.param(&self.spatial))?;
        let spatial = tape.resize_bilinear(&spatial, s.h(), s.w())?;
        Ok(PromptMix { channel, spatial, weights })
    }

    /// Prompt interaction followed by cross attention from `x` to the fused prompt.
    pub fn sc_pim(&self, tape: &Tape<T>, x: &Var<T>, channel: &Var<T>, spatial: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        let ss = spatial.shape();
        if ss.h() != s.h() || ss.w() != s.w() {
            return Err(Error::shape(format!(
                "spatial prompt {ss:?} does not cover input {s:?}"
            )));
        }
        let pc = tape.mul(x, channel)?;
        let ps = tape.mul(x, spatial)?;
        let fused = self.dim.interact(tape, &pc, &ps)?;
        self.attn.forward_cross(tape, x, &fused)
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let mix = self.pam(tape, x)?;
        self.sc_pim(tape, x, &mix.channel, &mix.spatial)
    }
}

pub fn pam<T: Scalar>(x: &Tensor<T>, cb: &PromptCodebook<T>) -> Result<PromptMix<Tensor<T>>> {
    let tape = Tape::inference();
    let m = cb.pam(&tape, &tape.constant(x.clone()))?;
    Ok(PromptMix {
        channel: m.channel.into_tensor(),
        spatial: m.spatial.into_tensor(),
        weights: m.weights.into_tensor(),
    })
}

pub fn sc_pim<T: Scalar>(x: &Tensor<T>, channel: &Tensor<T>, spatial: &Tensor<T>, cb: &PromptCodebook<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let c = |t: &Tensor<T>| tape.constant(t.clone());
    Ok(cb.sc_pim(&tape, &c(x), &c(channel), &c(spatial))?.into_tensor())
}

pub fn sc_prompt_block<T: Scalar>(x: &Tensor<T>, cb: &PromptCodebook<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(cb.forward(&tape, &tape.constant(x.clone()))?.into_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Initializer;
    use crate::weights::{DType, WeightStore};

    fn dims() -> PromptDims {
        PromptDims {
            channels: 8,
            entries: 5,
            height: 4,
            width: 4,
            heads: 2,
            reduction: 4,
        }
    }

    fn input() -> Tensor<f64> {
        Tensor::from_fn([1, 6, 6, 8], |[_, y, x, c]| ((y * 5 + x * 3 + c) % 7) as f64 / 3.0 - 1.0)
    }

    #[test]
    fn pam_weights_are_convex() {
        let mut store = WeightStore::new();
        let mut init = Initializer::new(&mut store, 4, DType::F64);
        let cb = PromptCodebook::new(&mut init, "p", dims(), false).unwrap();
        let m = pam(&input(), &cb).unwrap();
        assert_eq!(m.weights.shape().0, [1, 1, 1, 5]);
        assert!((m.weights.sum() - 1.0).abs() < 1e-12);
        assert!(m.weights.data().iter().all(|&w| w > 0.0 && w < 1.0));
        assert_eq!(m.channel.shape().0, [1, 1, 1, 8]);
        assert_eq!(m.spatial.shape().0, [1, 6, 6, 1]);
    }

    #[test]
    fn block_preserves_shape_and_is_pure() {
        let mut store = WeightStore::new();
        let mut init = Initializer::new(&mut store, 4, DType::F64);
        let cb = PromptCodebook::new(&mut init, "p", dims(), false).unwrap();
        let a = sc_prompt_block(&input(), &cb).unwrap();
        let b = sc_prompt_block(&input(), &cb).unwrap();
        assert_eq!(a.shape(), input().shape());
        assert_eq!(a, b);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut store = WeightStore::new();
        let mut init = Initializer::new(&mut store, 4, DType::F64);
        let cb = PromptCodebook::new(&mut init, "p", dims(), false).unwrap();
        assert!(pam(&Tensor::<f64>::zeros([1, 4, 4, 6]), &cb).is_err());
    }
}
