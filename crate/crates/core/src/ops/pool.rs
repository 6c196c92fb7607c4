use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Spatial mean per (batch, channel); output is (N, 1, 1, C).
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.area() == 0 {
        return Err(Error::shape("global_avg_pool on an empty spatial extent"));
    }
    let c = s.c();
    let mut out = Tensor::zeros(Shape::new(s.n(), 1, 1, c));
    let area = T::from_f64(s.area() as f64);
    let per = s.area() * c;
    for n in 0..s.n() {
        let dst = &mut out.data_mut()[n * c..(n + 1) * c];
        for px in x.data()[n * per..(n + 1) * per].chunks(c) {
            for (d, &v) in dst.iter_mut().zip(px) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d = *d / area;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(input: Shape, gy: &Tensor<T>) -> Tensor<T> {
    let scale = T::from_f64(1.0 / input.area() as f64);
    Tensor::from_fn(input, |[n, _, _, c]| gy.at(n, 0, 0, c) * scale)
}
