use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// (outer, axis length, inner stride) for iterating slices along `axis`.
fn layout<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<(usize, usize, usize)> {
    if axis > 3 {
        return Err(Error::InvalidArgument(format!("softmax axis {axis} out of range 0..4")));
    }
    let s = x.shape().0;
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    Ok((outer, s[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = layout(x, axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = d[base];
            for k in 1..len {
                m = m.max(d[base + k * inner]);
            }
            let mut z = T::ZERO;
            for k in 0..len {
                let e = (d[base + k * inner] - m).exp();
                d[base + k * inner] = e;
                z += e;
            }
            for k in 0..len {
                d[base + k * inner] = d[base + k * inner] / z;
            }
        }
    }
    Ok(out)
}

/// Gradient given the softmax output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, axis: usize, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, len, inner) = layout(y, axis)?;
    let mut gx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), gy.data());
    let out = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut s = T::ZERO;
            for k in 0..len {
                s += yd[base + k * inner] * gd[base + k * inner];
            }
            for k in 0..len {
                let j = base + k * inner;
                out[j] = yd[j] * (gd[j] - s);
            }
        }
    }
    Ok(gx)
}
