//! Channel-by-channel products used by transposed attention and by the
//! prompt codebook mixture. The per-head map is stored as a tensor of shape
//! (N, heads, C/heads, C/heads): row `j` of head `h` holds the weights output
//! channel `j` places on every value channel.

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Scalar, Shape, Tensor};

fn head_dim(c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!(
            "{c} channels not divisible into {heads} heads"
        )));
    }
    Ok(c / heads)
}

/// `out[n, h, j, i] = sum_p q[n, p, h*d + j] * k[n, p, h*d + i]`
pub fn channel_gram<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = q.shape();
    if k.shape() != s {
        return Err(Error::shape(format!("channel_gram: {s:?} vs {:?}", k.shape())));
    }
    let d = head_dim(s.c(), heads)?;
    let mut out = Tensor::zeros(Shape::new(s.n(), heads, d, d));
    let per = s.area() * s.c();
    let map = heads * d * d;
    for n in 0..s.n() {
        let dst = &mut out.data_mut()[n * map..(n + 1) * map];
        let qs = &q.data()[n * per..(n + 1) * per];
        let ks = &k.data()[n * per..(n + 1) * per];
        for (qp, kp) in qs.chunks(s.c()).zip(ks.chunks(s.c())) {
            for h in 0..heads {
                let kv = &kp[h * d..(h + 1) * d];
                for j in 0..d {
                    let row = (h * d + j) * d;
                    axpy(qp[h * d + j], kv, &mut dst[row..row + d]);
                }
            }
        }
    }
    Ok(out)
}

pub fn channel_gram_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    heads: usize,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = q.shape();
    let d = head_dim(s.c(), heads)?;
    let mut gq = Tensor::zeros(s);
    let mut gk = Tensor::zeros(s);
    let c = s.c();
    let map = heads * d * d;
    for n in 0..s.n() {
        let gm = &g.data()[n * map..(n + 1) * map];
        for p in 0..s.area() {
            let o = (n * s.area() + p) * c;
            for h in 0..heads {
                for j in 0..d {
                    let row = &gm[(h * d + j) * d..(h * d + j + 1) * d];
                    gq.data_mut()[o + h * d + j] = dot(row, &k.data()[o + h * d..o + (h + 1) * d]);
                    let qj = q.data()[o + h * d + j];
                    axpy(qj, row, &mut gk.data_mut()[o + h * d..o + (h + 1) * d]);
                }
            }
        }
    }
    Ok((gq, gk))
}

/// `out[n, p, h*d + j] = sum_i attn[n, h, j, i] * v[n, p, h*d + i]`
pub fn head_mix<T: Scalar>(attn: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = v.shape();
    let d = head_dim(s.c(), heads)?;
    if attn.shape() != Shape::new(s.n(), heads, d, d) {
        return Err(Error::shape(format!(
            "head_mix: attention map {:?} does not fit values {s:?} with {heads} heads",
            attn.shape()
        )));
    }
    let mut out = Tensor::zeros(s);
    let c = s.c();
    let map = heads * d * d;
    let area = s.area();
    super::for_each_row(out.data_mut(), c, |row, dst| {
        let n = row / area;
        let a = &attn.data()[n * map..(n + 1) * map];
        let vp = &v.data()[row * c..(row + 1) * c];
        for h in 0..heads {
            let vh = &vp[h * d..(h + 1) * d];
            for j in 0..d {
                dst[h * d + j] = dot(&a[(h * d + j) * d..(h * d + j + 1) * d], vh);
            }
        }
    });
    Ok(out)
}

pub fn head_mix_backward<T: Scalar>(
    attn: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = v.shape();
    let d = head_dim(s.c(), heads)?;
    let mut ga = Tensor::zeros(attn.shape());
    let mut gv = Tensor::zeros(s);
    let c = s.c();
    let map = heads * d * d;
    for n in 0..s.n() {
        let a = &attn.data()[n * map..(n + 1) * map];
        for p in 0..s.area() {
            let o = (n * s.area() + p) * c;
            for h in 0..heads {
                for j in 0..d {
                    let gj = gy.data()[o + h * d + j];
                    let r = (h * d + j) * d;
                    axpy(gj, &a[r..r + d], &mut gv.data_mut()[o + h * d..o + (h + 1) * d]);
                    let vh = &v.data()[o + h * d..o + (h + 1) * d];
                    axpy(gj, vh, &mut ga.data_mut()[n * map + r..n * map + r + d]);
                }
            }
        }
    }
    Ok((ga, gv))
}

/// Convex mixture of codebook entries: `out[b] = sum_k w[b, k] * cb[k]`,
/// with `w` of shape (N, 1, 1, K) and `cb` of shape (K, h, w, c).
pub fn codebook_mix<T: Scalar>(w: &Tensor<T>, cb: &Tensor<T>) -> Result<Tensor<T>> {
    let (ws, cs) = (w.shape(), cb.shape());
    if ws.h() != 1 || ws.w() != 1 || ws.c() != cs.n() {
        return Err(Error::shape(format!(
            "codebook_mix: weights {ws:?} do not index {} entries",
            cs.n()
        )));
    }
    let entry = cs.h() * cs.w() * cs.c();
    let mut out = Tensor::zeros(Shape::new(ws.n(), cs.h(), cs.w(), cs.c()));
    for b in 0..ws.n() {
        let dst = &mut out.data_mut()[b * entry..(b + 1) * entry];
        for k in 0..cs.n() {
            axpy(w.data()[b * cs.n() + k], &cb.data()[k * entry..(k + 1) * entry], dst);
        }
    }
    Ok(out)
}

pub fn codebook_mix_backward<T: Scalar>(
    w: &Tensor<T>,
    cb: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (ws, cs) = (w.shape(), cb.shape());
    let entry = cs.h() * cs.w() * cs.c();
    let mut gw = Tensor::zeros(ws);
    let mut gcb = Tensor::zeros(cs);
    for b in 0..ws.n() {
        let g = &gy.data()[b * entry..(b + 1) * entry];
        for k in 0..cs.n() {
            gw.data_mut()[b * cs.n() + k] = dot(g, &cb.data()[k * entry..(k + 1) * entry]);
            axpy(w.data()[b * cs.n() + k], g, &mut gcb.data_mut()[k * entry..(k + 1) * entry]);
        }
    }
    (gw, gcb)
}

fn spatial_norms<T: Scalar>(x: &Tensor<T>, eps: T) -> Vec<T> {
    let s = x.shape();
    let mut norms = vec![T::ZERO; s.n() * s.c()];
    for n in 0..s.n() {
        for p in 0..s.area() {
            let px = &x.data()[(n * s.area() + p) * s.c()..(n * s.area() + p + 1) * s.c()];
            for (acc, &v) in norms[n * s.c()..(n + 1) * s.c()].iter_mut().zip(px) {
                *acc += v * v;
            }
        }
    }
    norms.iter().map(|&v| v.sqrt().max(eps)).collect()
}

/// Scales each (batch, channel) spatial map to unit L2 norm.
pub fn normalize_spatial<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let norms = spatial_norms(x, eps);
    let c = x.shape().c();
    let area = x.shape().area();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let n = i / (area * c);
        *v = *v / norms[n * c + i % c];
    }
    out
}

pub fn normalize_spatial_backward<T: Scalar>(x: &Tensor<T>, eps: T, gy: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let norms = spatial_norms(x, eps);
    let c = s.c();
    let area = s.area();
    // projection coefficient sum_p y * g per (batch, channel)
    let mut proj = vec![T::ZERO; s.n() * c];
    for (i, (&v, &g)) in x.data().iter().zip(gy.data()).enumerate() {
        let k = (i / (area * c)) * c + i % c;
        proj[k] += v / norms[k] * g;
    }
    let mut gx = gy.clone();
    for (i, g) in gx.data_mut().iter_mut().enumerate() {
        let k = (i / (area * c)) * c + i % c;
        let norm = norms[k];
        let raw = x.data()[i];
        // below eps the norm is the constant eps
        *g = if norm <= eps {
            *g / norm
        } else {
            (*g - raw / norm * proj[k]) / norm
        };
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_of_single_pixel_is_outer_product() {
        let q = Tensor::from_vec([1, 1, 1, 2], vec![1.0f64, 2.0]).unwrap();
        let k = Tensor::from_vec([1, 1, 1, 2], vec![3.0f64, 5.0]).unwrap();
        let g = channel_gram(&q, &k, 1).unwrap();
        assert_eq!(g.data(), &[3.0, 5.0, 6.0, 10.0]);
    }

    #[test]
    fn identity_map_passes_values_through() {
        let v = Tensor::<f64>::from_fn([1, 2, 3, 4], |[_, y, x, c]| (y * 12 + x * 4 + c) as f64);
        let eye = Tensor::from_fn([1, 2, 2, 2], |[_, _, j, i]| if i == j { 1.0 } else { 0.0 });
        assert_eq!(head_mix(&eye, &v, 2).unwrap(), v);
    }

    #[test]
    fn heads_must_divide_channels() {
        let q = Tensor::<f32>::zeros([1, 2, 2, 6]);
        assert!(channel_gram(&q, &q, 4).is_err());
    }

    #[test]
    fn codebook_mix_of_equal_entries() {
        let cb = Tensor::<f64>::from_fn([3, 1, 1, 4], |[_, _, _, c]| c as f64 - 1.5);
        let w = Tensor::from_vec([1, 1, 1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        let m = codebook_mix(&w, &cb).unwrap();
        for c in 0..4 {
            assert!((m.at(0, 0, 0, c) - (c as f64 - 1.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_maps_have_unit_norm() {
        let x = Tensor::<f64>::from_fn([2, 3, 3, 2], |[n, y, x, c]| (n + y * 2 + x + c) as f64 - 2.0);
        let y = normalize_spatial(&x, 1e-12);
        for n in 0..2 {
            for c in 0..2 {
                let mut s = 0.0;
                for yy in 0..3 {
                    for xx in 0..3 {
                        s += y.at(n, yy, xx, c).powi(2);
                    }
                }
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
