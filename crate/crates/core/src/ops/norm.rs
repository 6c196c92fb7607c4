use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = x.shape().c();
    if c == 0 {
        return Err(Error::shape("layer_norm over a zero-length channel axis"));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(format!(
            "layer_norm: gamma/beta lengths {}/{} do not match {c} channels",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok(c)
}

#[inline]
fn stats<T: Scalar>(px: &[T], eps: T) -> (T, T) {
    let c = T::from_f64(px.len() as f64);
    let mean = px.iter().copied().sum::<T>() / c;
    let var = px.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
    (mean, T::ONE / (var + eps).sqrt())
}

/// Normalizes each pixel's channel vector to zero mean and unit (biased)
/// variance, then applies the per-channel affine `gamma * x + beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let c = check(x, gamma, beta)?;
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.numel());
    for px in x.data().chunks(c) {
        let (mean, inv) = stats(px, eps);
        for i in 0..c {
            out.push((px[i] - mean) * inv * g[i] + b[i]);
        }
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = check(x, gamma, beta)?;
    let cf = T::from_f64(c as f64);
    let g = gamma.data();
    let mut gx = Vec::with_capacity(x.numel());
    let mut gg = Tensor::zeros(gamma.shape());
    let mut gb = Tensor::zeros(beta.shape());
    let mut xhat = vec![T::ZERO; c];
    let mut gxhat = vec![T::ZERO; c];
    for (px, go) in x.data().chunks(c).zip(gy.data().chunks(c)) {
        let (mean, inv) = stats(px, eps);
        let (mut m1, mut m2) = (T::ZERO, T::ZERO);
        for i in 0..c {
            xhat[i] = (px[i] - mean) * inv;
            gxhat[i] = go[i] * g[i];
            m1 += gxhat[i];
            m2 += gxhat[i] * xhat[i];
            gg.data_mut()[i] += go[i] * xhat[i];
            gb.data_mut()[i] += go[i];
        }
        m1 = m1 / cf;
        m2 = m2 / cf;
        for i in 0..c {
            gx.push(inv * (gxhat[i] - m1 - xhat[i] * m2));
        }
    }
    Ok((Tensor::from_vec(x.shape(), gx)?, gg, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::ones([1, 1, 1, c]), Tensor::zeros([1, 1, 1, c]))
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let (g, b) = affine(6);
        let x = Tensor::full([1, 2, 2, 6], 3.25);
        let y = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_standardization() {
        let (g, b) = affine(2);
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn zero_channels_rejected() {
        let (g, b) = affine(0);
        let x = Tensor::<f64>::zeros([1, 2, 2, 0]);
        assert!(layer_norm(&x, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn mismatched_affine_rejected() {
        let (g, b) = affine(3);
        let x = Tensor::<f64>::zeros([1, 2, 2, 4]);
        assert!(layer_norm(&x, &g, &b, 1e-5).is_err());
    }
}
