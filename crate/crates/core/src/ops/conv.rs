use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Scalar, Shape, Tensor};

use super::for_each_row;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        padding: 0,
        groups: 1,
    };

    /// Same-size 3x3 convolution.
    pub const fn same3() -> Self {
        ConvSpec {
            stride: 1,
            padding: 1,
            groups: 1,
        }
    }

    pub const fn depthwise3(channels: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: 1,
            groups: channels,
        }
    }
}

/// Kernel laid out as (out_ch, k_h, k_w, in_ch / groups); bias as (1, 1, 1, out_ch).
#[derive(Debug, Clone)]
pub struct ConvWeights<T> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: ConvSpec,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(kernel: Tensor<T>, bias: Option<Tensor<T>>, spec: ConvSpec) -> Self {
        ConvWeights { kernel, bias, spec }
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    conv2d_raw(x, &w.kernel, w.bias.as_ref(), w.spec)
}

/// Channel-axis affine map: a 1x1 convolution.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    conv2d_raw(x, weight, bias, ConvSpec::POINTWISE)
}

struct Geometry {
    x: Shape,
    out: Shape,
    kh: usize,
    kw: usize,
    in_g: usize,
    out_g: usize,
    groups: usize,
    stride: usize,
    pad: usize,
}

fn geometry(x: Shape, k: Shape, bias: Option<Shape>, spec: ConvSpec) -> Result<Geometry> {
    let [out_ch, kh, kw, in_g] = k.0;
    let groups = spec.groups;
    if groups == 0 || spec.stride == 0 {
        return Err(Error::InvalidArgument("conv2d: groups and stride must be positive".into()));
    }
    if out_ch % groups != 0 {
        return Err(Error::shape(format!(
            "conv2d: out channels {out_ch} not divisible by groups {groups}"
        )));
    }
    if in_g * groups != x.c() {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels but kernel {k:?} with {groups} groups expects {}",
            x.c(),
            in_g * groups
        )));
    }
    if let Some(b) = bias {
        if b.numel() != out_ch {
            return Err(Error::shape(format!(
                "conv2d: bias {b:?} does not match {out_ch} output channels"
            )));
        }
    }
    let (hp, wp) = (x.h() + 2 * spec.padding, x.w() + 2 * spec.padding);
    if hp < kh || wp < kw {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )));
    }
    let out = Shape::new(
        x.n(),
        (hp - kh) / spec.stride + 1,
        (wp - kw) / spec.stride + 1,
        out_ch,
    );
    Ok(Geometry {
        x,
        out,
        kh,
        kw,
        in_g,
        out_g: out_ch / groups,
        groups,
        stride: spec.stride,
        pad: spec.padding,
    })
}

impl Geometry {
    fn depthwise(&self) -> bool {
        self.in_g == 1 && self.out_g == 1
    }

    /// Input coordinate for an output coordinate and kernel tap, if in bounds.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

/// Direct convolution. Depthwise kernels take a channel-vectorized path.
pub fn conv2d_raw<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x.shape(), kernel.shape(), bias.map(|b| b.shape()), spec)?;
    let mut out = Tensor::zeros(g.out);
    let row_len = g.out.w() * g.out.c();
    let oc = g.out.c();
    let k = kernel.data();
    // depthwise taps regrouped as (k_h, k_w, channel)
    let taps: Vec<T> = if g.depthwise() {
        let mut t = vec![T::ZERO; g.kh * g.kw * oc];
        for c in 0..oc {
            for j in 0..g.kh * g.kw {
                t[j * oc + c] = k[c * g.kh * g.kw + j];
            }
        }
        t
    } else {
        Vec::new()
    };

    for_each_row(out.data_mut(), row_len, |row, dst| {
        let (n, oy) = (row / g.out.h(), row % g.out.h());
        for ox in 0..g.out.w() {
            let px = &mut dst[ox * oc..(ox + 1) * oc];
            if let Some(b) = bias {
                px.copy_from_slice(b.data());
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.x.h()) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.x.w()) else { continue };
                    let inp = x.pixel(n, iy, ix);
                    if g.depthwise() {
                        let t = &taps[(ky * g.kw + kx) * oc..(ky * g.kw + kx + 1) * oc];
                        for c in 0..oc {
                            px[c] += t[c] * inp[c];
                        }
                        continue;
                    }
                    for grp in 0..g.groups {
                        let xin = &inp[grp * g.in_g..(grp + 1) * g.in_g];
                        for o in grp * g.out_g..(grp + 1) * g.out_g {
                            let ko = ((o * g.kh + ky) * g.kw + kx) * g.in_g;
                            px[o] += dot(&k[ko..ko + g.in_g], xin);
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: ConvSpec,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = geometry(x.shape(), kernel.shape(), None, spec)?;
    if gy.shape() != g.out {
        return Err(Error::shape(format!(
            "conv2d backward: upstream gradient {:?} does not match output {:?}",
            gy.shape(),
            g.out
        )));
    }
    let mut gx = Tensor::zeros(g.x);
    let mut gk = Tensor::zeros(kernel.shape());
    let mut gb = Tensor::zeros(Shape::new(1, 1, 1, g.out.c()));
    let k = kernel.data();
    let oc = g.out.c();
    let xc = g.x.c();
    for n in 0..g.out.n() {
        for oy in 0..g.out.h() {
            for ox in 0..g.out.w() {
                let go = gy.pixel(n, oy, ox);
                for (b, &v) in gb.data_mut().iter_mut().zip(go) {
                    *b += v;
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.x.h()) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.x.w()) else { continue };
                        let xo = x.offset(n, iy, ix, 0);
                        let inp = &x.data()[xo..xo + xc];
                        for grp in 0..g.groups {
                            let lo = grp * g.in_g;
                            for o in grp * g.out_g..(grp + 1) * g.out_g {
                                let gv = go[o];
                                if gv == T::ZERO {
                                    continue;
                                }
                                let ko = ((o * g.kh + ky) * g.kw + kx) * g.in_g;
                                axpy(gv, &k[ko..ko + g.in_g], &mut gx.data_mut()[xo + lo..xo + lo + g.in_g]);
                                axpy(gv, &inp[lo..lo + g.in_g], &mut gk.data_mut()[ko..ko + g.in_g]);
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(oc, gb.numel());
    Ok((gx, gk, gb))
}
