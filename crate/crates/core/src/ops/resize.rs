use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Source taps for one output coordinate (half-pixel centres, edge clamped).
fn taps(o: usize, out: usize, inp: usize) -> (usize, usize, f64) {
    let scale = inp as f64 / out as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(inp - 1);
    let i1 = (i0 + 1).min(inp - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize of the spatial extents.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.area() == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("resize_bilinear {s:?} -> {h}x{w}")));
    }
    if (h, w) == (s.h(), s.w()) {
        return Ok(x.clone());
    }
    let ty: Vec<_> = (0..h).map(|o| taps(o, h, s.h())).collect();
    let tx: Vec<_> = (0..w).map(|o| taps(o, w, s.w())).collect();
    Ok(Tensor::from_fn(Shape::new(s.n(), h, w, s.c()), |[n, y, xx, c]| {
        let (y0, y1, ly) = ty[y];
        let (x0, x1, lx) = tx[xx];
        let (ly, lx) = (T::from_f64(ly), T::from_f64(lx));
        let top = x.at(n, y0, x0, c) * (T::ONE - lx) + x.at(n, y0, x1, c) * lx;
        let bot = x.at(n, y1, x0, c) * (T::ONE - lx) + x.at(n, y1, x1, c) * lx;
        top * (T::ONE - ly) + bot * ly
    }))
}

pub fn resize_bilinear_backward<T: Scalar>(input: Shape, gy: &Tensor<T>) -> Tensor<T> {
    let o = gy.shape();
    if (o.h(), o.w()) == (input.h(), input.w()) {
        return gy.clone();
    }
    let mut gx = Tensor::zeros(input);
    for n in 0..o.n() {
        for y in 0..o.h() {
            let (y0, y1, ly) = taps(y, o.h(), input.h());
            for xx in 0..o.w() {
                let (x0, x1, lx) = taps(xx, o.w(), input.w());
                let (ly, lx) = (T::from_f64(ly), T::from_f64(lx));
                for c in 0..o.c() {
                    let g = gy.at(n, y, xx, c);
                    for (yy, wy) in [(y0, T::ONE - ly), (y1, ly)] {
                        for (xs, wx) in [(x0, T::ONE - lx), (x1, lx)] {
                            let i = gx.offset(n, yy, xs, c);
                            gx.data_mut()[i] += g * wy * wx;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::<f64>::full([1, 4, 4, 2], 0.75);
        let y = resize_bilinear(&x, 7, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn upsample_by_two_interpolates() {
        let x = Tensor::from_vec([1, 1, 2, 1], vec![0.0f64, 1.0]).unwrap();
        let y = resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f32>::from_fn([1, 3, 3, 1], |[_, y, x, _]| (y * 3 + x) as f32);
        assert_eq!(resize_bilinear(&x, 3, 3).unwrap(), x);
    }
}
