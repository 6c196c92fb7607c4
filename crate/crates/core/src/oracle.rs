//! Brute-force 64-bit reference implementations.
//!
//! Everything here is written directly from the defining formulas with
//! explicit loops and dense matrices. Nothing calls into `ops`, the tape or
//! the scan kernels, so agreement with the fast path is meaningful. Weights
//! are read from the same parameter structs and widened to `f64`.

use crate::attention::{ChannelAttnWeights, DwProjection};
use crate::blocks::{DimResidual, DimWeights, Gdfn, MtDhb, Norm, Pointwise, TransformerBlock};
use crate::params::Param;
use crate::prompt::{PromptCodebook, PromptMix};
use crate::ssm::{SsmParams, Ssm2d, VssWeights};
use crate::tensor::{Scalar, Shape, Tensor};

type Img = Tensor<f64>;

fn wide<T: Scalar>(p: &Param<T>) -> Vec<f64> {
    p.value.data().iter().map(|v| v.to_f64()).collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn map(x: &Img, f: impl Fn(f64) -> f64) -> Img {
    Tensor::from_fn(x.shape(), |[n, y, xx, c]| f(x.at(n, y, xx, c)))
}

fn zip(a: &Img, b: &Img, f: impl Fn(f64, f64) -> f64) -> Img {
    // broadcasting over unit extents
    let (sa, sb) = (a.shape(), b.shape());
    let out: [usize; 4] = std::array::from_fn(|i| sa.0[i].max(sb.0[i]));
    let pick = |s: Shape, i: [usize; 4]| -> [usize; 4] { std::array::from_fn(|k| if s.0[k] == 1 { 0 } else { i[k] }) };
    Tensor::from_fn(out, |i| {
        let ia = pick(sa, i);
        let ib = pick(sb, i);
        f(a.at(ia[0], ia[1], ia[2], ia[3]), b.at(ib[0], ib[1], ib[2], ib[3]))
    })
}

/// Direct convolution: weights (out, kh, kw, in/groups), stride 1, zero padding.
pub fn conv(x: &Img, w: &[f64], b: Option<&[f64]>, out_c: usize, k: usize, groups: usize, pad: usize) -> Img {
    let s = x.shape();
    let in_g = s.c() / groups;
    let out_g = out_c / groups;
    let (oh, ow) = (s.h() + 2 * pad + 1 - k, s.w() + 2 * pad + 1 - k);
    let mut y = Tensor::zeros([s.n(), oh, ow, out_c]);
    for n in 0..s.n() {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..out_c {
                    let g = o / out_g;
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for ky in 0..k {
                        for kx in 0..k {
                            for i in 0..in_g {
                                let (iy, ix) = ((oy + ky) as isize - pad as isize, (ox + kx) as isize - pad as isize);
                                if iy < 0 || ix < 0 || iy >= s.h() as isize || ix >= s.w() as isize {
                                    continue;
                                }
                                acc += w[((o * k + ky) * k + kx) * in_g + i] * x.at(n, iy as usize, ix as usize, g * in_g + i);
                            }
                        }
                    }
                    y.set(n, oy, ox, o, acc);
                }
            }
        }
    }
    y
}

fn pointwise<T: Scalar>(x: &Img, p: &Pointwise<T>) -> Img {
    let out = p.weight.value.shape().n();
    conv(x, &wide(&p.weight), Some(&wide(&p.bias)), out, 1, 1, 0)
}

fn dw_projection<T: Scalar>(x: &Img, p: &DwProjection<T>) -> Img {
    let c = p.pw.value.shape().n();
    let y = conv(x, &wide(&p.pw), Some(&wide(&p.pw_bias)), c, 1, 1, 0);
    conv(&y, &wide(&p.dw), Some(&wide(&p.dw_bias)), c, 3, c, 1)
}

pub fn layer_norm(x: &Img, gamma: &[f64], beta: &[f64], eps: f64) -> Img {
    let s = x.shape();
    let mut y = x.clone();
    for n in 0..s.n() {
        for yy in 0..s.h() {
            for xx in 0..s.w() {
                let v: Vec<f64> = (0..s.c()).map(|c| x.at(n, yy, xx, c)).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
                for c in 0..s.c() {
                    y.set(n, yy, xx, c, (v[c] - mean) / (var + eps).sqrt() * gamma[c] + beta[c]);
                }
            }
        }
    }
    y
}

fn norm<T: Scalar>(x: &Img, p: &Norm<T>) -> Img {
    layer_norm(x, &wide(&p.gamma), &wide(&p.beta), crate::ops::LAYER_NORM_EPS)
}

pub fn global_mean(x: &Img) -> Img {
    let s = x.shape();
    Tensor::from_fn([s.n(), 1, 1, s.c()], |[n, _, _, c]| {
        let mut acc = 0.0;
        for y in 0..s.h() {
            for xx in 0..s.w() {
                acc += x.at(n, y, xx, c);
            }
        }
        acc / s.area() as f64
    })
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|a| (a - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|a| a / s).collect()
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize(x: &Img, h: usize, w: usize) -> Img {
    let s = x.shape();
    let src = |o: usize, out: usize, inp: usize| {
        let f = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = f.floor() as usize;
        (lo, (lo + 1).min(inp - 1), f - lo as f64)
    };
    Tensor::from_fn([s.n(), h, w, s.c()], |[n, y, xx, c]| {
        let (y0, y1, fy) = src(y, h, s.h());
        let (x0, x1, fx) = src(xx, w, s.w());
        let v00 = x.at(n, y0, x0, c);
        let v01 = x.at(n, y0, x1, c);
        let v10 = x.at(n, y1, x0, c);
        let v11 = x.at(n, y1, x1, c);
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
    })
}

/// Grid cells in visiting order for route index 0..4, enumerated with plain
/// nested loops.
pub fn route_cells(route: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut row_major = Vec::new();
    for y in 0..h {
        for x in 0..w {
            row_major.push((y, x));
        }
    }
    let mut right_columns = Vec::new();
    for x in (0..w).rev() {
        for y in 0..h {
            right_columns.push((y, x));
        }
    }
    match route {
        0 => row_major,
        1 => row_major.into_iter().rev().collect(),
        2 => right_columns,
        3 => right_columns.into_iter().rev().collect(),
        _ => panic!("route index {route} out of range"),
    }
}

/// Sequential scan of one sequence of channel vectors.
pub fn scan_sequence<T: Scalar>(seq: &[Vec<f64>], p: &SsmParams<T>) -> Vec<Vec<f64>> {
    let ci = p.d.value.numel();
    let ds = p.a_log.value.numel() / ci;
    let (wd, bd) = (wide(&p.delta_proj), wide(&p.delta_bias));
    let (wb, bb) = (wide(&p.b_proj), wide(&p.b_bias));
    let (wc, bc) = (wide(&p.c_proj), wide(&p.c_bias));
    let (a_log, d) = (wide(&p.a_log), wide(&p.d));
    let lin = |w: &[f64], b: &[f64], x: &[f64], out: usize| -> Vec<f64> {
        (0..out).map(|o| b[o] + (0..ci).map(|i| w[o * ci + i] * x[i]).sum::<f64>()).collect()
    };
    let mut h = vec![vec![0.0; ds]; ci];
    let mut ys = Vec::with_capacity(seq.len());
    for x in seq {
        let delta: Vec<f64> = lin(&wd, &bd, x, ci).into_iter().map(softplus).collect();
        let bm = lin(&wb, &bb, x, ds);
        let cm = lin(&wc, &bc, x, ds);
        let mut y = vec![0.0; ci];
        for i in 0..ci {
            for s in 0..ds {
                let a = -a_log[i * ds + s].exp();
                h[i][s] = (delta[i] * a).exp() * h[i][s] + delta[i] * bm[s] * x[i];
                y[i] += cm[s] * h[i][s];
            }
            y[i] += d[i] * x[i];
        }
        ys.push(y);
    }
    ys
}

/// One route: gather along the route, scan, scatter back to grid positions.
pub fn ssm_route<T: Scalar>(x: &Img, p: &SsmParams<T>, route: usize) -> Img {
    let s = x.shape();
    let cells = route_cells(route, s.h(), s.w());
    let mut out = Tensor::zeros(s);
    for n in 0..s.n() {
        let seq: Vec<Vec<f64>> = cells.iter().map(|&(y, xx)| (0..s.c()).map(|c| x.at(n, y, xx, c)).collect()).collect();
        for (&(y, xx), v) in cells.iter().zip(scan_sequence(&seq, p)) {
            for (c, val) in v.into_iter().enumerate() {
                out.set(n, y, xx, c, val);
            }
        }
    }
    out
}

pub fn ssm_2d<T: Scalar>(x: &Img, p: &Ssm2d<T>) -> Img {
    let mut acc = Tensor::zeros(x.shape());
    for (r, params) in p.routes.iter().enumerate() {
        acc = zip(&acc, &ssm_route(x, params, r), |a, b| a + b);
    }
    acc
}

pub fn vss<T: Scalar>(x0: &Img, w: &VssWeights<T>) -> Img {
    let c = w.channels;
    let e = conv(x0, &wide(&w.in_proj), Some(&wide(&w.in_bias)), 2 * c, 1, 1, 0);
    let s = e.shape();
    let a = Tensor::from_fn(s.with_c(c), |[n, y, x, k]| silu(e.at(n, y, x, k)));
    let g = Tensor::from_fn(s.with_c(c), |[n, y, x, k]| silu(e.at(n, y, x, c + k)));
    let scanned = ssm_2d(&a, &w.ssm);
    let normed = layer_norm(&scanned, &wide(&w.norm_gamma), &wide(&w.norm_beta), crate::ops::LAYER_NORM_EPS);
    let prod = zip(&normed, &g, |p, q| p * q);
    conv(&prod, &wide(&w.out_proj), Some(&wide(&w.out_bias)), c, 1, 1, 0)
}

/// Per-head maps `[n][head][j][i]` built from explicit (pixels × d) matrices.
pub fn attention_maps<T: Scalar>(xq: &Img, xkv: &Img, w: &ChannelAttnWeights<T>) -> Vec<Vec<Vec<Vec<f64>>>> {
    let q = dw_projection(xq, &w.q);
    let k = dw_projection(xkv, &w.k);
    maps_from(&q, &k, w)
}

fn head_matrix(t: &Img, n: usize, head: usize, d: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let mut m = Vec::new();
    for y in 0..s.h() {
        for x in 0..s.w() {
            m.push((0..d).map(|j| t.at(n, y, x, head * d + j)).collect::<Vec<_>>());
        }
    }
    m
}

fn unit_columns(m: &mut [Vec<f64>]) {
    let d = m.first().map_or(0, Vec::len);
    for j in 0..d {
        let norm = m.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt().max(1e-12);
        for r in m.iter_mut() {
            r[j] /= norm;
        }
    }
}

fn maps_from<T: Scalar>(q: &Img, k: &Img, w: &ChannelAttnWeights<T>) -> Vec<Vec<Vec<Vec<f64>>>> {
    let s = q.shape();
    let d = s.c() / w.heads;
    let beta = wide(&w.temperature);
    (0..s.n())
        .map(|n| {
            (0..w.heads)
                .map(|h| {
                    let mut qm = head_matrix(q, n, h, d);
                    let mut km = head_matrix(k, n, h, d);
                    if w.normalize_qk {
                        unit_columns(&mut qm);
                        unit_columns(&mut km);
                    }
                    // logits = Q^T K / beta, a d×d matrix
                    (0..d)
                        .map(|j| {
                            let row: Vec<f64> = (0..d)
                                .map(|i| qm.iter().zip(&km).map(|(qr, kr)| qr[j] * kr[i]).sum::<f64>() / beta[h])
                                .collect();
                            softmax(&row)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn cross_attention<T: Scalar>(xq: &Img, xkv: &Img, w: &ChannelAttnWeights<T>) -> Img {
    let q = dw_projection(xq, &w.q);
    let k = dw_projection(xkv, &w.k);
    let v = dw_projection(xkv, &w.v);
    let maps = maps_from(&q, &k, w);
    let s = v.shape();
    let d = s.c() / w.heads;
    let mut mixed = Tensor::zeros(s);
    for n in 0..s.n() {
        for h in 0..w.heads {
            let vm = head_matrix(&v, n, h, d);
            // out = V A^T : (pixels × d)
            for (p, vr) in vm.iter().enumerate() {
                for j in 0..d {
                    let val: f64 = (0..d).map(|i| maps[n][h][j][i] * vr[i]).sum();
                    mixed.set(n, p / s.w(), p % s.w(), h * d + j, val);
                }
            }
        }
    }
    conv(&mixed, &wide(&w.proj), Some(&wide(&w.proj_bias)), s.c(), 1, 1, 0)
}

pub fn channel_attention<T: Scalar>(x: &Img, w: &ChannelAttnWeights<T>) -> Img {
    cross_attention(x, x, w)
}

pub fn atten_c<T: Scalar>(xc: &Img, w: &DimWeights<T>) -> Img {
    let h = map(&pointwise(&global_mean(xc), &w.c_down), |v| v.max(0.0));
    map(&pointwise(&h, &w.c_up), sigmoid)
}

pub fn atten_s<T: Scalar>(xs: &Img, w: &DimWeights<T>) -> Img {
    let h = map(&pointwise(xs, &w.s_down), |v| v.max(0.0));
    map(&pointwise(&h, &w.s_out), sigmoid)
}

fn interact<T: Scalar>(xc: &Img, xs: &Img, w: &DimWeights<T>) -> Img {
    let gc = zip(xc, &atten_s(xs, w), |a, b| a * b);
    let gs = zip(xs, &atten_c(xc, w), |a, b| a * b);
    pointwise(&zip(&gc, &gs, |a, b| a + b), &w.fuse)
}

pub fn mt_dim<T: Scalar>(xc: &Img, xs: &Img, x0: &Img, w: &DimWeights<T>) -> Img {
    zip(&interact(xc, xs, w), x0, |a, b| a + b)
}

pub fn gdfn<T: Scalar>(x: &Img, w: &Gdfn<T>) -> Img {
    let two_h = w.dw.value.shape().n();
    let hidden = two_h / 2;
    let e = pointwise(&norm(x, &w.norm), &w.expand);
    let e = conv(&e, &wide(&w.dw), Some(&wide(&w.dw_bias)), two_h, 3, two_h, 1);
    let s = e.shape();
    let gated = Tensor::from_fn(s.with_c(hidden), |[n, y, xx, k]| gelu(e.at(n, y, xx, k)) * e.at(n, y, xx, hidden + k));
    zip(x, &pointwise(&gated, &w.project), |a, b| a + b)
}

pub fn mt_dhb<T: Scalar>(x: &Img, w: &MtDhb<T>) -> Img {
    let x0 = norm(x, &w.norm);
    let xc = channel_attention(&x0, &w.attn);
    let xs = vss(&x0, &w.vss);
    let skip = match w.residual {
        DimResidual::Normalized => &x0,
        DimResidual::PreNorm => x,
    };
    gdfn(&mt_dim(&xc, &xs, skip, &w.dim), &w.ffn)
}

pub fn transformer_block<T: Scalar>(x: &Img, w: &TransformerBlock<T>) -> Img {
    let a = channel_attention(&norm(x, &w.norm), &w.attn);
    gdfn(&zip(x, &a, |p, q| p + q), &w.ffn)
}

pub fn pam<T: Scalar>(x: &Img, cb: &PromptCodebook<T>) -> PromptMix<Img> {
    let s = x.shape();
    let h = map(&pointwise(&global_mean(x), &cb.weight_down), gelu);
    let logits = map(&pointwise(&h, &cb.weight_out), sigmoid);
    let entries = logits.shape().c();
    let pc = wide(&cb.channel);
    let ps = wide(&cb.spatial);
    let ss = cb.spatial.value.shape();
    let mut weights = Tensor::zeros([s.n(), 1, 1, entries]);
    let mut channel = Tensor::zeros([s.n(), 1, 1, s.c()]);
    let mut spatial_small = Tensor::zeros([s.n(), ss.h(), ss.w(), 1]);
    for n in 0..s.n() {
        let row: Vec<f64> = (0..entries).map(|k| logits.at(n, 0, 0, k)).collect();
        let wv = softmax(&row);
        for (k, &wk) in wv.iter().enumerate() {
            weights.set(n, 0, 0, k, wk);
            for c in 0..s.c() {
                let v = channel.at(n, 0, 0, c) + wk * pc[k * s.c() + c];
                channel.set(n, 0, 0, c, v);
            }
            for y in 0..ss.h() {
                for xx in 0..ss.w() {
                    let v = spatial_small.at(n, y, xx, 0) + wk * ps[(k * ss.h() + y) * ss.w() + xx];
                    spatial_small.set(n, y, xx, 0, v);
                }
            }
        }
    }
    let spatial = if (ss.h(), ss.w()) == (s.h(), s.w()) {
        spatial_small
    } else {
        resize(&spatial_small, s.h(), s.w())
    };
    PromptMix { channel, spatial, weights }
}

pub fn sc_pim<T: Scalar>(x: &Img, channel: &Img, spatial: &Img, cb: &PromptCodebook<T>) -> Img {
    let pc = zip(x, channel, |a, b| a * b);
    let ps = zip(x, spatial, |a, b| a * b);
    let fused = interact(&pc, &ps, &cb.dim);
    cross_attention(x, &fused, &cb.attn)
}

pub fn sc_prompt_block<T: Scalar>(x: &Img, cb: &PromptCodebook<T>) -> Img {
    let m = pam(x, cb);
    sc_pim(x, &m.channel, &m.spatial, cb)
}

/// Worst `|a - b| / max(|b|, floor)` over all elements.
pub fn max_rel_diff<T: Scalar>(a: &Tensor<T>, b: &Img, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "compared tensors differ in shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}
