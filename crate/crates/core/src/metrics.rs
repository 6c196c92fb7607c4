//! Full-reference image quality: PSNR and single-scale SSIM.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB. Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    if a.numel() == 0 {
        return Err(Error::shape("psnr of empty tensors"));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).powi(2))
        .sum();
    let mse = sse / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a row-major `h` x `w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels (and batch items) with an 11×11 Gaussian window,
/// sigma 1.5, evaluated only where the window fits. Images smaller than the
/// window use a window as large as their smaller side.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    let size = SSIM_WINDOW.min(s.h()).min(s.w());
    if size == 0 || s.numel() == 0 {
        return Err(Error::shape("ssim of empty images"));
    }
    let k = gaussian(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let (h, w) = (s.h(), s.w());
    let mut total = 0.0;
    for n in 0..s.n() {
        for c in 0..s.c() {
            let plane = |t: &Tensor<T>| -> Vec<f64> {
                let mut v = Vec::with_capacity(h * w);
                for y in 0..h {
                    for x in 0..w {
                        v.push(t.at(n, y, x, c).to_f64());
                    }
                }
                v
            };
            let (pa, pb) = (plane(a), plane(b));
            let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
            let mu_a = filter_valid(&pa, h, w, &k);
            let mu_b = filter_valid(&pb, h, w, &k);
            let e_aa = filter_valid(&prod(&pa, &pa), h, w, &k);
            let e_bb = filter_valid(&prod(&pb, &pb), h, w, &k);
            let e_ab = filter_valid(&prod(&pa, &pb), h, w, &k);
            let mut acc = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            total += acc / mu_a.len() as f64;
        }
    }
    Ok(total / (s.n() * s.c()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Tensor<f64> {
        Tensor::from_fn([1, 16, 16, 3], |[_, y, x, c]| ((y * 3 + x * 5 + c * 7) % 17) as f64 / 16.0)
    }

    #[test]
    fn identical_images() {
        assert_eq!(psnr(&img(), &img(), 1.0).unwrap(), f64::INFINITY);
        assert!((ssim(&img(), &img(), 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_error_gives_twenty_db() {
        let a = Tensor::<f64>::full([1, 4, 4, 3], 0.5);
        let b = Tensor::<f64>::full([1, 4, 4, 3], 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn window_weights_sum_to_one() {
        assert!((gaussian(11, 1.5).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_images_shrink_the_window() {
        let a = Tensor::<f64>::from_fn([1, 5, 7, 1], |[_, y, x, _]| (y + x) as f64 / 12.0);
        let b = a.map(|v| v * 0.9);
        let s = ssim(&a, &b, 1.0).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f32>::zeros([1, 4, 4, 3]);
        let b = Tensor::<f32>::zeros([1, 4, 5, 3]);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(ssim(&a, &b, 1.0).is_err());
    }
}
