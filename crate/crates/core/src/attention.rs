//! Transposed (channel-by-channel) multi-head attention.
//!
//! Per head, queries and keys of shape (HW, d) produce a d×d map
//! `softmax(q^T k / beta)` whose row `j` is the mixture output channel `j`
//! takes over value channels. Cost is linear in the pixel count.

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::ops::ConvSpec;
use crate::params::{Init, Param, ParamSource};
use crate::tensor::{Scalar, Tensor};

const QK_NORM_EPS: f64 = 1e-12;

/// 1×1 projection followed by a 3×3 depthwise convolution.
#[derive(Debug, Clone)]
pub struct DwProjection<T> {
    pub pw: Param<T>,
    pub pw_bias: Param<T>,
    pub dw: Param<T>,
    pub dw_bias: Param<T>,
}

impl<T: Scalar> DwProjection<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(DwProjection {
            pw: src.take(&p("pw"), &[c_out, 1, 1, c_in], Init::TruncNormal(0.02))?,
            pw_bias: src.take(&p("pw_bias"), &[c_out], Init::Zeros)?,
            dw: src.take(&p("dw"), &[c_out, 3, 3, 1], Init::TruncNormal(0.02))?,
            dw_bias: src.take(&p("dw_bias"), &[c_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let c = self.pw.value.shape().n();
        let y = tape.conv2d(x, &tape.param(&self.pw), Some(&tape.param(&self.pw_bias)), ConvSpec::POINTWISE)?;
        tape.conv2d(&y, &tape.param(&self.dw), Some(&tape.param(&self.dw_bias)), ConvSpec::depthwise3(c))
    }
}

#[derive(Debug, Clone)]
pub struct ChannelAttnWeights<T> {
    pub heads: usize,
    pub normalize_qk: bool,
    pub q: DwProjection<T>,
    pub k: DwProjection<T>,
    pub v: DwProjection<T>,
    pub proj: Param<T>,
    pub proj_bias: Param<T>,
    /// One positive temperature per head; logits are divided by it.
    pub temperature: Param<T>,
}

impl<T: Scalar> ChannelAttnWeights<T> {
    pub fn new(
        src: &mut impl ParamSource<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        normalize_qk: bool,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: {channels} channels not divisible into {heads} heads"
            )));
        }
        let p = |s: &str| format!("{prefix}.{s}");
        let head_dim = (channels / heads) as f64;
        Ok(ChannelAttnWeights {
            heads,
            normalize_qk,
            q: DwProjection::new(src, &p("q"), channels, channels)?,
            k: DwProjection::new(src, &p("k"), channels, channels)?,
            v: DwProjection::new(src, &p("v"), channels, channels)?,
            proj: src.take(&p("proj"), &[channels, 1, 1, channels], Init::TruncNormal(0.02))?,
            proj_bias: src.take(&p("proj_bias"), &[channels], Init::Zeros)?,
            temperature: src.take(&p("temperature"), &[heads], Init::Const(head_dim.sqrt()))?,
        })
    }

    /// Attention maps (N, heads, d, d) for queries from `xq` and keys from `xkv`.
    pub fn attention_map(&self, tape: &Tape<T>, xq: &Var<T>, xkv: &Var<T>) -> Result<Var<T>> {
        let (q, k) = (self.q.forward(tape, xq)?, self.k.forward(tape, xkv)?);
        self.map_from(tape, &q, &k)
    }

    fn map_from(&self, tape: &Tape<T>, q: &Var<T>, k: &Var<T>) -> Result<Var<T>> {
        let (q, k) = if self.normalize_qk {
            let eps = T::from_f64(QK_NORM_EPS);
            (tape.normalize_spatial(q, eps)?, tape.normalize_spatial(k, eps)?)
        } else {
            (q.clone(), k.clone())
        };
        let gram = tape.channel_gram(&q, &k, self.heads)?;
        let beta = tape.reshape(&tape.param(&self.temperature), [1, self.heads, 1, 1])?;
        tape.softmax(&tape.div(&gram, &beta)?, 3)
    }

    /// Queries from `xq`; keys and values from `xkv`.
    pub fn forward_cross(&self, tape: &Tape<T>, xq: &Var<T>, xkv: &Var<T>) -> Result<Var<T>> {
        if xq.shape() != xkv.shape() {
            return Err(Error::shape(format!(
                "cross attention: query input {:?} vs key/value input {:?}",
                xq.shape(),
                xkv.shape()
            )));
        }
        let q = self.q.forward(tape, xq)?;
        let k = self.k.forward(tape, xkv)?;
        let v = self.v.forward(tape, xkv)?;
        let attn = self.map_from(tape, &q, &k)?;
        let mixed = tape.head_mix(&attn, &v, self.heads)?;
        tape.conv2d(&mixed, &tape.param(&self.proj), Some(&tape.param(&self.proj_bias)), ConvSpec::POINTWISE)
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        self.forward_cross(tape, x, x)
    }
}

pub fn channel_attention<T: Scalar>(x: &Tensor<T>, w: &ChannelAttnWeights<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(w.forward(&tape, &tape.constant(x.clone()))?.into_tensor())
}

pub fn cross_prompt_attention<T: Scalar>(x: &Tensor<T>, p: &Tensor<T>, w: &ChannelAttnWeights<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(w.forward_cross(&tape, &tape.constant(x.clone()), &tape.constant(p.clone()))?.into_tensor())
}

/// Per-head attention maps of self-attention on `x`, shaped (N, heads, d, d).
pub fn attention_maps<T: Scalar>(x: &Tensor<T>, w: &ChannelAttnWeights<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let x = tape.constant(x.clone());
    Ok(w.attention_map(&tape, &x, &x)?.into_tensor())
}
