use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Direction of a lossless pixel rearrangement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rearrange {
    /// (H, W, C) -> (H/r, W/r, C*r*r); used for downsampling.
    ToChannel,
    /// (H, W, C) -> (H*r, W*r, C/(r*r)); used for upsampling.
    ToSpace,
}

impl Rearrange {
    pub fn inverse(self) -> Self {
        match self {
            Rearrange::ToChannel => Rearrange::ToSpace,
            Rearrange::ToSpace => Rearrange::ToChannel,
        }
    }
}

/// Output channel `c * r^2 + dy * r + dx` of the coarse grid holds fine pixel
/// `(y * r + dy, x * r + dx)`, channel `c`.
pub fn pixel_rearrange<T: Scalar>(x: &Tensor<T>, r: usize, dir: Rearrange) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 {
        return Err(Error::InvalidArgument("pixel_rearrange factor must be positive".into()));
    }
    match dir {
        Rearrange::ToChannel => {
            if s.h() % r != 0 || s.w() % r != 0 {
                return Err(Error::shape(format!(
                    "to_channel: spatial extents {}x{} not divisible by {r}",
                    s.h(),
                    s.w()
                )));
            }
            let out = Shape::new(s.n(), s.h() / r, s.w() / r, s.c() * r * r);
            Ok(Tensor::from_fn(out, |[n, y, xx, oc]| {
                let (c, rem) = (oc / (r * r), oc % (r * r));
                x.at(n, y * r + rem / r, xx * r + rem % r, c)
            }))
        }
        Rearrange::ToSpace => {
            if s.c() % (r * r) != 0 {
                return Err(Error::shape(format!(
                    "to_space: {} channels not divisible by {}",
                    s.c(),
                    r * r
                )));
            }
            let out = Shape::new(s.n(), s.h() * r, s.w() * r, s.c() / (r * r));
            Ok(Tensor::from_fn(out, |[n, y, xx, c]| {
                x.at(n, y / r, xx / r, c * r * r + (y % r) * r + xx % r)
            }))
        }
    }
}

#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Reflect-pads the bottom and right edges.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if pad_h >= s.h().max(1) || pad_w >= s.w().max(1) {
        return Err(Error::shape(format!(
            "reflect_pad: padding ({pad_h}, {pad_w}) must be smaller than extents {}x{}",
            s.h(),
            s.w()
        )));
    }
    let out = Shape::new(s.n(), s.h() + pad_h, s.w() + pad_w, s.c());
    Ok(Tensor::from_fn(out, |[n, y, xx, c]| {
        x.at(n, reflect(y, s.h()), reflect(xx, s.w()), c)
    }))
}

pub fn reflect_pad_backward<T: Scalar>(input: Shape, gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input);
    let o = gy.shape();
    for n in 0..o.n() {
        for y in 0..o.h() {
            for xx in 0..o.w() {
                let (sy, sx) = (reflect(y, input.h()), reflect(xx, input.w()));
                for c in 0..o.c() {
                    let i = gx.offset(n, sy, sx, c);
                    gx.data_mut()[i] += gy.at(n, y, xx, c);
                }
            }
        }
    }
    gx
}

/// Top-left `h x w` window.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h > s.h() || w > s.w() {
        return Err(Error::shape(format!("crop {h}x{w} exceeds {s:?}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n(), h, w, s.c()), |[n, y, xx, c]| x.at(n, y, xx, c)))
}

pub fn crop_backward<T: Scalar>(input: Shape, gy: &Tensor<T>) -> Tensor<T> {
    let o = gy.shape();
    Tensor::from_fn(input, |[n, y, x, c]| {
        if y < o.h() && x < o.w() {
            gy.at(n, y, x, c)
        } else {
            T::ZERO
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn to_channel_enumeration() {
        let x = Tensor::from_vec([1, 2, 2, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_rearrange(&x, 2, Rearrange::ToChannel).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 4));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn divisibility_errors() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 2]);
        assert!(pixel_rearrange(&x, 2, Rearrange::ToChannel).is_err());
        assert!(pixel_rearrange(&x, 2, Rearrange::ToSpace).is_err());
    }

    #[test]
    fn pad_then_crop_round_trip() {
        let x = Tensor::<f64>::from_fn([1, 5, 3, 2], |[_, y, x, c]| (y * 10 + x * 3 + c) as f64);
        let p = reflect_pad(&x, 3, 1).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 8, 4, 2));
        assert_eq!(p.at(0, 5, 0, 0), x.at(0, 3, 0, 0));
        assert_eq!(p.at(0, 0, 3, 1), x.at(0, 0, 1, 1));
        assert_eq!(crop(&p, 5, 3).unwrap(), x);
    }
}
