//! Vision state-space branch: four raster routes over the image grid, a
//! per-route selective scan, and the gated VSS block around it.
//!
//! Each route turns an (N, H, W, C) map into an (N, 1, H*W, C) sequence. The
//! scan is the diagonal selective recurrence
//!
//! ```text
//! h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
//! y_t = C_t . h_t + D * x_t,        A = -exp(A_log),  h_0 = 0
//! ```
//!
//! with `delta_t = softplus(W_delta x_t + b_delta)`, `B_t = W_B x_t + b_B` and
//! `C_t = W_C x_t + b_C`. Outputs of the four routes are mapped back to grid
//! positions and summed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::ops::{ConvSpec, LAYER_NORM_EPS};
use crate::params::{Init, Param, ParamSource};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanDirection {
    /// Row by row from the top-left corner to the bottom-right corner.
    TopLeft,
    /// Exact reverse of `TopLeft`.
    BottomRight,
    /// Column by column, top to bottom, starting from the right-most column.
    TopRight,
    /// Exact reverse of `TopRight`: bottom-left corner to top-right corner.
    BottomLeft,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::TopLeft,
        ScanDirection::BottomRight,
        ScanDirection::TopRight,
        ScanDirection::BottomLeft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScanDirection::TopLeft => "top_left",
            ScanDirection::BottomRight => "bottom_right",
            ScanDirection::TopRight => "top_right",
            ScanDirection::BottomLeft => "bottom_left",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&d| d == self).unwrap()
    }

    /// Grid cell `(y, x)` visited at sequence position `t`.
    #[inline]
    pub fn cell(self, t: usize, h: usize, w: usize) -> (usize, usize) {
        let l = h * w;
        match self {
            ScanDirection::TopLeft => (t / w, t % w),
            ScanDirection::BottomRight => ((l - 1 - t) / w, (l - 1 - t) % w),
            ScanDirection::TopRight => (t % h, w - 1 - t / h),
            ScanDirection::BottomLeft => {
                let s = l - 1 - t;
                (s % h, w - 1 - s / h)
            }
        }
    }

    /// Flat pixel index (`y * w + x`) for each sequence position.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        (0..h * w)
            .map(|t| {
                let (y, x) = self.cell(t, h, w);
                y * w + x
            })
            .collect()
    }
}

/// Reorders every image of the batch into a sequence of shape (N, 1, H*W, C).
pub fn route_flatten<T: Scalar>(x: &Tensor<T>, dir: ScanDirection) -> Tensor<T> {
    let s = x.shape();
    let c = s.c();
    let order = dir.order(s.h(), s.w());
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n() {
        let base = n * s.area() * c;
        for &p in &order {
            data.extend_from_slice(&x.data()[base + p * c..base + (p + 1) * c]);
        }
    }
    Tensor::from_vec(Shape::new(s.n(), 1, s.area(), c), data).expect("permutation keeps length")
}

/// Inverse of [`route_flatten`].
pub fn route_unflatten<T: Scalar>(seq: &Tensor<T>, dir: ScanDirection, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = seq.shape();
    if s.h() != 1 || s.w() != h * w {
        return Err(Error::shape(format!(
            "route_unflatten: sequence {s:?} does not cover a {h}x{w} grid"
        )));
    }
    let c = s.c();
    let order = dir.order(h, w);
    let mut out = Tensor::zeros(Shape::new(s.n(), h, w, c));
    for n in 0..s.n() {
        let base = n * h * w * c;
        for (t, &p) in order.iter().enumerate() {
            out.data_mut()[base + p * c..base + (p + 1) * c]
                .copy_from_slice(&seq.data()[base + t * c..base + (t + 1) * c]);
        }
    }
    Ok(out)
}

/// The six operands of a selective scan. Sequences are (N, 1, L, ·);
/// `a_log` is (1, 1, C, S) and `d` is (1, 1, 1, C).
#[derive(Clone, Debug)]
pub struct ScanInputs<V> {
    pub u: V,
    pub delta: V,
    pub b: V,
    pub c: V,
    pub a_log: V,
    pub d: V,
}

impl<V> ScanInputs<V> {
    pub fn map_ref<'a, W>(&'a self, f: impl Fn(&'a V) -> W) -> ScanInputs<W> {
        ScanInputs {
            u: f(&self.u),
            delta: f(&self.delta),
            b: f(&self.b),
            c: f(&self.c),
            a_log: f(&self.a_log),
            d: f(&self.d),
        }
    }

    pub fn all(&self) -> [&V; 6] {
        [&self.u, &self.delta, &self.b, &self.c, &self.a_log, &self.d]
    }

    pub fn into_list(self) -> [V; 6] {
        [self.u, self.delta, self.b, self.c, self.a_log, self.d]
    }
}

struct Dims {
    n: usize,
    len: usize,
    ch: usize,
    state: usize,
}

fn scan_dims<T: Scalar>(v: &ScanInputs<&Tensor<T>>) -> Result<Dims> {
    let us = v.u.shape();
    let (n, len, ch) = (us.n(), us.w(), us.c());
    let state = v.b.shape().c();
    let bad = |what: &str, got: Shape| {
        Err(Error::shape(format!(
            "selective scan: {what} has shape {got:?} (sequence {us:?}, state {state})"
        )))
    };
    if us.h() != 1 {
        return bad("u", us);
    }
    if len == 0 {
        return Err(Error::shape("selective scan over an empty sequence"));
    }
    if v.delta.shape() != us {
        return bad("delta", v.delta.shape());
    }
    if v.b.shape() != Shape::new(n, 1, len, state) {
        return bad("B", v.b.shape());
    }
    if v.c.shape() != v.b.shape() {
        return bad("C", v.c.shape());
    }
    if v.a_log.numel() != ch * state {
        return bad("A_log", v.a_log.shape());
    }
    if v.d.numel() != ch {
        return bad("D", v.d.shape());
    }
    Ok(Dims { n, len, ch, state })
}

/// Sequential scan. Returns the outputs and, when `keep_states` is set, every
/// hidden state laid out as [n][t][channel][state] for the backward pass.
pub fn scan_forward<T: Scalar>(v: &ScanInputs<&Tensor<T>>, keep_states: bool) -> Result<(Tensor<T>, Vec<T>)> {
    let Dims { n, len, ch, state } = scan_dims(v)?;
    let a: Vec<T> = v.a_log.data().iter().map(|&l| -l.exp()).collect();
    let (u, dt, bm, cm, d) = (v.u.data(), v.delta.data(), v.b.data(), v.c.data(), v.d.data());
    let mut y = Tensor::zeros(v.u.shape());
    let mut states = Vec::with_capacity(if keep_states { n * len * ch * state } else { 0 });
    let mut h = vec![T::ZERO; ch * state];
    for b in 0..n {
        h.iter_mut().for_each(|v| *v = T::ZERO);
        for t in 0..len {
            let row = (b * len + t) * ch;
            let srow = (b * len + t) * state;
            let (bt, ct) = (&bm[srow..srow + state], &cm[srow..srow + state]);
            for i in 0..ch {
                let (x, step) = (u[row + i], dt[row + i]);
                let hi = &mut h[i * state..(i + 1) * state];
                let ai = &a[i * state..(i + 1) * state];
                let mut acc = T::ZERO;
                let sx = step * x;
                for s in 0..state {
                    hi[s] = (step * ai[s]).exp() * hi[s] + sx * bt[s];
                    acc += ct[s] * hi[s];
                }
                if !hi.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFiniteState { step: t, channel: i });
                }
                y.data_mut()[row + i] = acc + d[i] * x;
            }
            if keep_states {
                states.extend_from_slice(&h);
            }
        }
    }
    Ok((y, states))
}

/// Reverse recurrence over saved states; returns gradients in
/// [`ScanInputs`] order.
pub fn scan_backward<T: Scalar>(v: &ScanInputs<&Tensor<T>>, states: &[T], gy: &Tensor<T>) -> Result<ScanInputs<Tensor<T>>> {
    let Dims { n, len, ch, state } = scan_dims(v)?;
    if states.len() != n * len * ch * state {
        return Err(Error::InvalidArgument(
            "selective scan backward needs the states saved by a recording forward".into(),
        ));
    }
    let a: Vec<T> = v.a_log.data().iter().map(|&l| -l.exp()).collect();
    let (u, dt, bm, cm, d) = (v.u.data(), v.delta.data(), v.b.data(), v.c.data(), v.d.data());
    let g = gy.data();
    let mut gu = Tensor::zeros(v.u.shape());
    let mut gdt = Tensor::zeros(v.delta.shape());
    let mut gb = Tensor::zeros(v.b.shape());
    let mut gc = Tensor::zeros(v.c.shape());
    let mut ga = vec![T::ZERO; ch * state];
    let mut gd = Tensor::zeros(v.d.shape());
    // gradient w.r.t. h_t flowing back from step t + 1
    let mut carry = vec![T::ZERO; ch * state];
    for b in 0..n {
        carry.iter_mut().for_each(|v| *v = T::ZERO);
        for t in (0..len).rev() {
            let row = (b * len + t) * ch;
            let srow = (b * len + t) * state;
            let hrow = (b * len + t) * ch * state;
            for i in 0..ch {
                let (x, step, gyv) = (u[row + i], dt[row + i], g[row + i]);
                gd.data_mut()[i] += gyv * x;
                let mut gx = gyv * d[i];
                let mut gstep = T::ZERO;
                for s in 0..state {
                    let k = i * state + s;
                    let h_t = states[hrow + k];
                    let h_prev = if t > 0 { states[hrow - ch * state + k] } else { T::ZERO };
                    gc.data_mut()[srow + s] += gyv * h_t;
                    let gh = carry[k] + gyv * cm[srow + s];
                    let decay = (step * a[k]).exp();
                    let g_decay = gh * h_prev * decay;
                    gstep += g_decay * a[k] + gh * bm[srow + s] * x;
                    ga[k] += g_decay * step;
                    gb.data_mut()[srow + s] += gh * step * x;
                    gx += gh * step * bm[srow + s];
                    carry[k] = gh * decay;
                }
                gdt.data_mut()[row + i] = gstep;
                gu.data_mut()[row + i] = gx;
            }
        }
    }
    // A = -exp(A_log), so dA/dA_log = A
    let ga_log: Vec<T> = ga.iter().zip(&a).map(|(&g, &a)| g * a).collect();
    Ok(ScanInputs {
        u: gu,
        delta: gdt,
        b: gb,
        c: gc,
        a_log: Tensor::from_vec(v.a_log.shape(), ga_log)?,
        d: gd,
    })
}

/// Selective-scan parameters for one route.
#[derive(Debug, Clone)]
pub struct SsmParams<T> {
    pub delta_proj: Param<T>,
    pub delta_bias: Param<T>,
    pub b_proj: Param<T>,
    pub b_bias: Param<T>,
    pub c_proj: Param<T>,
    pub c_bias: Param<T>,
    pub a_log: Param<T>,
    pub d: Param<T>,
}

impl<T: Scalar> SsmParams<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, channels: usize, d_state: usize) -> Result<Self> {
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(SsmParams {
            delta_proj: src.take(&p("delta_proj"), &[channels, 1, 1, channels], Init::TruncNormal(0.02))?,
            delta_bias: src.take(&p("delta_bias"), &[channels], Init::StepBias(0.001, 0.1))?,
            b_proj: src.take(&p("b_proj"), &[d_state, 1, 1, channels], Init::TruncNormal(0.02))?,
            b_bias: src.take(&p("b_bias"), &[d_state], Init::Zeros)?,
            c_proj: src.take(&p("c_proj"), &[d_state, 1, 1, channels], Init::TruncNormal(0.02))?,
            c_bias: src.take(&p("c_bias"), &[d_state], Init::Zeros)?,
            a_log: src.take(&p("a_log"), &[channels, d_state], Init::S4dReal)?,
            d: src.take(&p("d"), &[channels], Init::Ones)?,
        })
    }

    /// Scans a (N, 1, L, C) sequence.
    pub fn scan(&self, tape: &Tape<T>, seq: &Var<T>) -> Result<Var<T>> {
        let pw = ConvSpec::POINTWISE;
        let delta = tape.conv2d(seq, &tape.param(&self.delta_proj), Some(&tape.param(&self.delta_bias)), pw)?;
        let delta = tape.softplus(&delta)?;
        let b = tape.conv2d(seq, &tape.param(&self.b_proj), Some(&tape.param(&self.b_bias)), pw)?;
        let c = tape.conv2d(seq, &tape.param(&self.c_proj), Some(&tape.param(&self.c_bias)), pw)?;
        tape.selective_scan(ScanInputs {
            u: seq.clone(),
            delta,
            b,
            c,
            a_log: tape.param(&self.a_log),
            d: tape.param(&self.d),
        })
    }
}

/// One 1-D selective scan over a (N, 1, L, C) sequence.
pub fn selective_scan_1d<T: Scalar>(seq: &Tensor<T>, params: &SsmParams<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(params.scan(&tape, &tape.constant(seq.clone()))?.into_tensor())
}

/// Four independently parameterized route scans merged by summation.
#[derive(Debug, Clone)]
pub struct Ssm2d<T> {
    pub routes: [SsmParams<T>; 4],
}

impl<T: Scalar> Ssm2d<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, channels: usize, d_state: usize) -> Result<Self> {
        let mk = |src: &mut _, d: ScanDirection| SsmParams::new(src, &format!("{prefix}.{}", d.name()), channels, d_state);
        Ok(Ssm2d {
            routes: [
                mk(src, ScanDirection::TopLeft)?,
                mk(src, ScanDirection::BottomRight)?,
                mk(src, ScanDirection::TopRight)?,
                mk(src, ScanDirection::BottomLeft)?,
            ],
        })
    }

    /// Output of one route, already mapped back to grid positions.
    pub fn route(&self, tape: &Tape<T>, x: &Var<T>, dir: ScanDirection) -> Result<Var<T>> {
        self.route_aligned(tape, x, dir, dir)
    }

    fn route_aligned(&self, tape: &Tape<T>, x: &Var<T>, dir: ScanDirection, align: ScanDirection) -> Result<Var<T>> {
        let s = x.shape();
        let seq = tape.route_flatten(x, dir)?;
        let y = self.routes[dir.index()].scan(tape, &seq)?;
        tape.route_unflatten(&y, align, s.h(), s.w())
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        self.forward_aligned(tape, x, ScanDirection::ALL)
    }

    /// Merge where route `i` is mapped back with the order of `align[i]`.
    /// Anything but [`ScanDirection::ALL`] is a deliberately broken merge,
    /// used to show that the invariant checks catch misalignment.
    pub fn forward_aligned(&self, tape: &Tape<T>, x: &Var<T>, align: [ScanDirection; 4]) -> Result<Var<T>> {
        let mut acc = self.route_aligned(tape, x, ScanDirection::ALL[0], align[0])?;
        for &dir in &ScanDirection::ALL[1..] {
            let y = self.route_aligned(tape, x, dir, align[dir.index()])?;
            acc = tape.add(&acc, &y)?;
        }
        Ok(acc)
    }
}

pub fn ssm_2d<T: Scalar>(x: &Tensor<T>, params: &Ssm2d<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(params.forward(&tape, &tape.constant(x.clone()))?.into_tensor())
}

/// Gated state-space block:
/// `linear(Norm(SSM2D(SiLU(x_a))) * SiLU(x_b))` with `[x_a, x_b] = linear(x)`.
#[derive(Debug, Clone)]
pub struct VssWeights<T> {
    pub channels: usize,
    pub in_proj: Param<T>,
    pub in_bias: Param<T>,
    pub ssm: Ssm2d<T>,
    pub norm_gamma: Param<T>,
    pub norm_beta: Param<T>,
    pub out_proj: Param<T>,
    pub out_bias: Param<T>,
}

impl<T: Scalar> VssWeights<T> {
    pub fn new(src: &mut impl ParamSource<T>, prefix: &str, channels: usize, d_state: usize) -> Result<Self> {
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(VssWeights {
            channels,
            in_proj: src.take(&p("in_proj"), &[2 * channels, 1, 1, channels], Init::TruncNormal(0.02))?,
            in_bias: src.take(&p("in_bias"), &[2 * channels], Init::Zeros)?,
            ssm: Ssm2d::new(src, &p("ssm"), channels, d_state)?,
            norm_gamma: src.take(&p("norm.gamma"), &[channels], Init::Ones)?,
            norm_beta: src.take(&p("norm.beta"), &[channels], Init::Zeros)?,
            out_proj: src.take(&p("out_proj"), &[channels, 1, 1, channels], Init::TruncNormal(0.02))?,
            out_bias: src.take(&p("out_bias"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &Tape<T>, x0: &Var<T>) -> Result<Var<T>> {
        let pw = ConvSpec::POINTWISE;
        let expanded = tape.conv2d(x0, &tape.param(&self.in_proj), Some(&tape.param(&self.in_bias)), pw)?;
        let e = expanded.shape().c();
        if e % 2 != 0 {
            return Err(Error::shape(format!("vss: expanded channel count {e} is odd")));
        }
        let half = e / 2;
        let a = tape.silu(&tape.narrow_channels(&expanded, 0, half)?)?;
        let gate = tape.silu(&tape.narrow_channels(&expanded, half, half)?)?;
        let scanned = self.ssm.forward(tape, &a)?;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let x1 = tape.layer_norm(&scanned, &tape.param(&self.norm_gamma), &tape.param(&self.norm_beta), eps)?;
        let mixed = tape.mul(&x1, &gate)?;
        tape.conv2d(&mixed, &tape.param(&self.out_proj), Some(&tape.param(&self.out_bias)), pw)
    }
}

/// The gated state-space branch applied to an already normalized input.
pub fn vss_module<T: Scalar>(x0: &Tensor<T>, w: &VssWeights<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    Ok(w.forward(&tape, &tape.constant(x0.clone()))?.into_tensor())
}
