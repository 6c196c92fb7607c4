//! Hybrid blocks: the dual-branch block (channel attention beside a VSS
//! branch, fused by cross-gating), the gated depthwise feed-forward network
//! and the plain transformer block used at deep levels.

use serde::{Deserialize, Serialize};

use crate::attention::ChannelAttnWeights;
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::ops::{ConvSpec, LAYER_NORM_EPS};
use crate::params::{Init, Param, ParamSource};
use crate::ssm::VssWeights;
use crate::tensor::{Scalar, Tensor};

/// Which tensor the fusion step adds back after cross-gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DimResidual {
    /// The normalized block input, as the fusion formula is written.
    #[default]
    Normalized,
    /// The block input before normalization.
    PreNorm,
}

/// Hyperparameters shared by every block of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockOptions {
    pub d_state: usize,
    pub reduction: usize,
    pub ffn_expansion: f64,
    pub normalize_qk: bool,
    pub dim_residual: DimResidual,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            d_state: 8,
            reduction: 4,
            ffn_expansion: 2.66,
            normalize_qk: false,
            dim_residual: DimResidual::Normalized,
        }
    }
}

impl BlockOptions {
    pub fn ffn_hidden(&self, channels: usize) -> usize {
        ((self.ffn_expansion * channels as f64).floor() as usize).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Norm {
            gamma: src.take(&format!("{prefix}.gamma"), &[channels], Init::Ones)?,
            beta: src.take(&format!("{prefix}.beta"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.layer_norm(x, &tape.param(&self.gamma), &tape.param(&self.beta), T::from_f64(LAYER_NORM_EPS))
    }
}

/// A 1×1 convolution with bias.
#[derive(Debug, Clone)]
pub struct Pointwise<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Pointwise<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Pointwise {
            weight: src.take(&format!("{prefix}.weight"), &[c_out, 1, 1, c_in], Init::TruncNormal(0.02))?,
            bias: src.take(&format!("{prefix}.bias"), &[c_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.conv2d(x, &tape.param(&self.weight), Some(&tape.param(&self.bias)), ConvSpec::POINTWISE)
    }
}

/// Cross-gating weights: a channel gate, a spatial gate and the fusion
/// projection applied to the gated sum.
#[derive(Debug, Clone)]
pub struct DimWeights<T> {
    pub c_down: Pointwise<T>,
    pub c_up: Pointwise<T>,
    pub s_down: Pointwise<T>,
    pub s_out: Pointwise<T>,
    pub fuse: Pointwise<T>,
}

impl<T: Scalar> DimWeights<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = reduced(prefix, channels, reduction)?;
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(DimWeights {
            c_down: Pointwise::new(src, &p("c_down"), channels, hidden)?,
            c_up: Pointwise::new(src, &p("c_up"), hidden, channels)?,
            s_down: Pointwise::new(src, &p("s_down"), channels, hidden)?,
            s_out: Pointwise::new(src, &p("s_out"), hidden, 1)?,
            fuse: Pointwise::new(src, &p("fuse"), channels, channels)?,
        })
    }

    /// Channel gate of shape (N, 1, 1, C), strictly inside (0, 1).
    pub fn atten_c(&self, tape: &Tape<T>, xc: &Var<T>) -> Result<Var<T>> {
        let pooled = tape.global_avg_pool(xc)?;
        let h = tape.relu(&self.c_down.forward(tape, &pooled)?)?;
        tape.sigmoid(&self.c_up.forward(tape, &h)?)
    }

    /// Spatial gate of shape (N, H, W, 1), strictly inside (0, 1).
    pub fn atten_s(&self, tape: &Tape<T>, xs: &Var<T>) -> Result<Var<T>> {
        let h = tape.relu(&self.s_down.forward(tape, xs)?)?;
        tape.sigmoid(&self.s_out.forward(tape, &h)?)
    }

    /// `fuse(xc * atten_s(xs) + xs * atten_c(xc))`, each branch gated by a
    /// map computed from the other branch.
    pub fn interact(&self, tape: &Tape<T>, xc: &Var<T>, xs: &Var<T>) -> Result<Var<T>> {
        if xc.shape() != xs.shape() {
            return Err(Error::shape(format!(
                "interaction branches differ: {:?} vs {:?}",
                xc.shape(),
                xs.shape()
            )));
        }
        let gated_c = tape.mul(xc, &self.atten_s(tape, xs)?)?;
        let gated_s = tape.mul(xs, &self.atten_c(tape, xc)?)?;
        self.fuse.forward(tape, &tape.add(&gated_c, &gated_s)?)
    }

    /// Interaction plus the residual `x0`.
    pub fn mt_dim(&self, tape: &Tape<T>, xc: &Var<T>, xs: &Var<T>, x0: &Var<T>) -> Result<Var<T>> {
        if x0.shape() != xc.shape() {
            return Err(Error::shape(format!(
                "residual {:?} does not match branches {:?}",
                x0.shape(),
                xc.shape()
            )));
        }
        tape.add(&self.interact(tape, xc, xs)?, x0)
    }
}

fn reduced(prefix: &str, channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::Config(format!(
            "{prefix}: reduction {reduction} does not divide {channels} channels"
        )));
    }
    Ok(channels / reduction)
}

/// Gated depthwise feed-forward network with its own pre-norm and residual.
#[derive(Debug, Clone)]
pub struct Gdfn<T> {
    pub norm: Norm<T>,
    pub expand: Pointwise<T>,
    pub dw: Param<T>,
    pub dw_bias: Param<T>,
    pub project: Pointwise<T>,
}

impl<T: Scalar> Gdfn<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, channels: usize, hidden: usize) -> Result<Self> {
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(Gdfn {
            norm: Norm::new(src, &p("norm"), channels)?,
            expand: Pointwise::new(src, &p("expand"), channels, 2 * hidden)?,
            dw: src.take(&p("dw"), &[2 * hidden, 3, 3, 1], Init::TruncNormal(0.02))?,
            dw_bias: src.take(&p("dw_bias"), &[2 * hidden], Init::Zeros)?,
            project: Pointwise::new(src, &p("project"), hidden, channels)?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let two_h = self.dw.value.shape().n();
        let hidden = two_h / 2;
        let e = self.expand.forward(tape, &self.norm.forward(tape, x)?)?;
        let e = tape.conv2d(&e, &tape.param(&self.dw), Some(&tape.param(&self.dw_bias)), ConvSpec::depthwise3(two_h))?;
        let gate = tape.gelu(&tape.narrow_channels(&e, 0, hidden)?)?;
        let value = tape.narrow_channels(&e, hidden, hidden)?;
        let y = self.project.forward(tape, &tape.mul(&gate, &value)?)?;
        tape.add(x, &y)
    }
}

/// Dual-branch hybrid block.
#[derive(Debug, Clone)]
pub struct MtDhb<T> {
    pub residual: DimResidual,
    pub norm: Norm<T>,
    pub attn: ChannelAttnWeights<T>,
    pub vss: VssWeights<T>,
    pub dim: DimWeights<T>,
    pub ffn: Gdfn<T>,
}

impl<T: Scalar> MtDhb<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, channels: usize, heads: usize, opt: &BlockOptions) -> Result<Self> {
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(MtDhb {
            residual: opt.dim_residual,
            norm: Norm::new(src, &p("norm"), channels)?,
            attn: ChannelAttnWeights::new(src, &p("attn"), channels, heads, opt.normalize_qk)?,
            vss: VssWeights::new(src, &p("vss"), channels, opt.d_state)?,
            dim: DimWeights::new(src, &p("dim"), channels, opt.reduction)?,
            ffn: Gdfn::new(src, &p("ffn"), channels, opt.ffn_hidden(channels))?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let x0 = self.norm.forward(tape, x)?;
        let xc = self.attn.forward(tape, &x0)?;
        let xs = self.vss.forward(tape, &x0)?;
        let skip = match self.residual {
            DimResidual::Normalized => &x0,
            DimResidual::PreNorm => x,
        };
        let y = self.dim.mt_dim(tape, &xc, &xs, skip)?;
        self.ffn.forward(tape, &y)
    }
}

/// Pre-norm channel attention with residual, then the feed-forward network.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T> {
    pub norm: Norm<T>,
    pub attn: ChannelAttnWeights<T>,
    pub ffn: Gdfn<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, channels: usize, heads: usize, opt: &BlockOptions) -> Result<Self> {
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(TransformerBlock {
            norm: Norm::new(src, &p("norm"), channels)?,
            attn: ChannelAttnWeights::new(src, &p("attn"), channels, heads, opt.normalize_qk)?,
            ffn: Gdfn::new(src, &p("ffn"), channels, opt.ffn_hidden(channels))?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let a = self.attn.forward(tape, &self.norm.forward(tape, x)?)?;
        let y = tape.add(x, &a)?;
        self.ffn.forward(tape, &y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "mt_dhb")]
    Hybrid,
    #[serde(rename = "tb")]
    Transformer,
}

#[derive(Debug, Clone)]
pub enum Block<T> {
    Hybrid(MtDhb<T>),
    Transformer(TransformerBlock<T>),
}

impl<T: Scalar> Block<T> {
    pub fn new(
        src: &mut impl ParamSource<T>,
        kind: BlockKind,
        prefix: &str,
        channels: usize,
        heads: usize,
        opt: &BlockOptions,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::Hybrid => Block::Hybrid(MtDhb::new(src, prefix, channels, heads, opt)?),
            BlockKind::Transformer => Block::Transformer(TransformerBlock::new(src, prefix, channels, heads, opt)?),
        })
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Block::Hybrid(b) => b.forward(tape, x),
            Block::Transformer(b) => b.forward(tape, x),
        }
    }
}

fn run<T: Scalar>(f: impl FnOnce(&Tape<T>) -> Result<Var<T>>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(f(&tape)?.into_tensor())
}

pub fn atten_c<T: Scalar>(xc: &Tensor<T>, w: &DimWeights<T>) -> Result<Tensor<T>> {
    run(|t| w.atten_c(t, &t.constant(xc.clone())))
}

pub fn atten_s<T: Scalar>(xs: &Tensor<T>, w: &DimWeights<T>) -> Result<Tensor<T>> {
    run(|t| w.atten_s(t, &t.constant(xs.clone())))
}

pub fn mt_dim<T: Scalar>(xc: &Tensor<T>, xs: &Tensor<T>, x0: &Tensor<T>, w: &DimWeights<T>) -> Result<Tensor<T>> {
    run(|t| w.mt_dim(t, &t.constant(xc.clone()), &t.constant(xs.clone()), &t.constant(x0.clone())))
}

pub fn gdfn<T: Scalar>(x: &Tensor<T>, w: &Gdfn<T>) -> Result<Tensor<T>> {
    run(|t| w.forward(t, &t.constant(x.clone())))
}

pub fn mt_dhb<T: Scalar>(x: &Tensor<T>, w: &MtDhb<T>) -> Result<Tensor<T>> {
    run(|t| w.forward(t, &t.constant(x.clone())))
}

pub fn restormer_tb<T: Scalar>(x: &Tensor<T>, w: &TransformerBlock<T>) -> Result<Tensor<T>> {
    run(|t| w.forward(t, &t.constant(x.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Initializer;
    use crate::weights::{DType, WeightStore};

    fn ramp(shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |[n, y, x, c]| ((n * 31 + y * 13 + x * 7 + c * 3) % 11) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn ffn_hidden_width() {
        assert_eq!(BlockOptions::default().ffn_hidden(48), 127);
        assert_eq!(BlockOptions::default().ffn_hidden(8), 21);
    }

    #[test]
    fn gates_have_expected_extents() {
        let mut store = WeightStore::new();
        let mut init = Initializer::new(&mut store, 2, DType::F64);
        let w = DimWeights::new(&mut init, "dim", 8, 4).unwrap();
        let x = ramp([1, 3, 5, 8]);
        let c = atten_c(&x, &w).unwrap();
        let s = atten_s(&x, &w).unwrap();
        assert_eq!(c.shape().0, [1, 1, 1, 8]);
        assert_eq!(s.shape().0, [1, 3, 5, 1]);
        assert!(c.data().iter().chain(s.data()).all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn reduction_must_divide() {
        let mut store = WeightStore::new();
        let mut init = Initializer::new(&mut store, 2, DType::F64);
        assert!(matches!(DimWeights::<f64>::new(&mut init, "dim", 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn zero_branches_leave_residual_plus_bias() {
        let mut store = WeightStore::new();
        let mut init = Initializer::new(&mut store, 2, DType::F64);
        let w = DimWeights::new(&mut init, "dim", 4, 2).unwrap();
        let zero = Tensor::zeros([1, 2, 2, 4]);
        let x0 = ramp([1, 2, 2, 4]);
        assert_eq!(mt_dim(&zero, &zero, &x0, &w).unwrap(), x0);
    }

    #[test]
    fn blocks_preserve_shape() {
        let mut store = WeightStore::new();
        let mut init = Initializer::new(&mut store, 5, DType::F64);
        let opt = BlockOptions::default();
        let h = MtDhb::new(&mut init, "h", 8, 2, &opt).unwrap();
        let t = TransformerBlock::new(&mut init, "t", 16, 2, &opt).unwrap();
        assert_eq!(mt_dhb(&ramp([1, 4, 6, 8]), &h).unwrap().shape().0, [1, 4, 6, 8]);
        assert_eq!(restormer_tb(&ramp([2, 3, 3, 16]), &t).unwrap().shape().0, [2, 3, 3, 16]);
    }
}
