use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

fn strides(s: Shape, out: Shape) -> [usize; 4] {
    let full = [s.h() * s.w() * s.c(), s.w() * s.c(), s.c(), 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if s.0[i] == out.0[i] { full[i] } else { 0 };
    }
    st
}

/// Element-wise binary op with broadcasting over extents of 1.
pub fn ew<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let out = Shape::broadcast(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Tensor::from_vec(out, data);
    }
    let (sa, sb) = (strides(a.shape(), out), strides(b.shape(), out));
    let (da, db) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..out.n() {
        for y in 0..out.h() {
            for x in 0..out.w() {
                let oa = n * sa[0] + y * sa[1] + x * sa[2];
                let ob = n * sb[0] + y * sb[1] + x * sb[2];
                for c in 0..out.c() {
                    data.push(op.apply(da[oa + c * sa[3]], db[ob + c * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Sums `g` over the axes where `target` has extent 1 but `g` does not.
pub fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, target: Shape) -> Result<Tensor<T>> {
    let gs = g.shape();
    if gs == target {
        return Ok(g.clone());
    }
    for i in 0..4 {
        if target.0[i] != gs.0[i] && target.0[i] != 1 {
            return Err(Error::shape(format!("cannot reduce {gs:?} to {target:?}")));
        }
    }
    let st = strides(target, gs);
    let mut out = Tensor::zeros(target);
    let o = out.data_mut();
    let mut i = 0;
    let d = g.data();
    for n in 0..gs.n() {
        for y in 0..gs.h() {
            for x in 0..gs.w() {
                let base = n * st[0] + y * st[1] + x * st[2];
                for c in 0..gs.c() {
                    o[base + c * st[3]] += d[i];
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `ew(a, b, op)` given the upstream gradient.
pub fn ew_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: BinaryOp,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ga, gb) = match op {
        BinaryOp::Add => (gy.clone(), gy.clone()),
        BinaryOp::Sub => (gy.clone(), gy.map(|v| -v)),
        BinaryOp::Mul => (ew(gy, b, BinaryOp::Mul)?, ew(gy, a, BinaryOp::Mul)?),
        BinaryOp::Div => {
            let ga = ew(gy, b, BinaryOp::Div)?;
            // d(a/b)/db = -a / b^2
            let b2 = ew(b, b, BinaryOp::Mul)?;
            let q = ew(a, &b2, BinaryOp::Div)?;
            let gb = ew(gy, &q, BinaryOp::Mul)?.map(|v| -v);
            (ga, gb)
        }
    };
    Ok((reduce_to_shape(&ga, a.shape())?, reduce_to_shape(&gb, b.shape())?))
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.with_c(0) != sb.with_c(0) {
        return Err(Error::shape(format!("concat_channels: {sa:?} vs {sb:?}")));
    }
    let out = sa.with_c(sa.c() + sb.c());
    let mut data = Vec::with_capacity(out.numel());
    for (pa, pb) in a.data().chunks(sa.c().max(1)).zip(b.data().chunks(sb.c().max(1))) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Tensor::from_vec(out, data)
}

/// Channels `start..start + len` of every pixel.
pub fn narrow_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c() {
        return Err(Error::shape(format!(
            "narrow_channels: range {start}..{} exceeds {} channels",
            start + len,
            s.c()
        )));
    }
    let mut data = Vec::with_capacity(s.n() * s.area() * len);
    for px in x.data().chunks(s.c()) {
        data.extend_from_slice(&px[start..start + len]);
    }
    Tensor::from_vec(s.with_c(len), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_| {
            i += 1.0;
            i * 0.5 - 3.0
        })
    }

    #[test]
    fn identities() {
        let x = ramp([1, 3, 3, 4]);
        assert_eq!(ew(&x, &Tensor::ones([1, 3, 3, 4]), BinaryOp::Mul).unwrap(), x);
        assert_eq!(ew(&x, &Tensor::zeros([1, 1, 1, 1]), BinaryOp::Add).unwrap(), x);
    }

    #[test]
    fn broadcast_singleton_channel() {
        let x = ramp([1, 4, 4, 8]);
        let m = ramp([1, 4, 4, 1]);
        let y = ew(&x, &m, BinaryOp::Mul).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.at(0, 2, 3, 5), x.at(0, 2, 3, 5) * m.at(0, 2, 3, 0));
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = ramp([1, 4, 4, 8]);
        let b = ramp([1, 4, 4, 3]);
        assert!(ew(&a, &b, BinaryOp::Add).is_err());
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g = Tensor::<f64>::ones([2, 3, 4, 5]);
        let r = reduce_to_shape(&g, Shape::new(1, 1, 1, 5)).unwrap();
        assert!(r.data().iter().all(|&v| v == 24.0));
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = ramp([1, 2, 2, 3]);
        let b = ramp([1, 2, 2, 2]).map(|v| v * 10.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 2, 2, 5));
        assert_eq!(narrow_channels(&c, 0, 3).unwrap(), a);
        assert_eq!(narrow_channels(&c, 3, 2).unwrap(), b);
    }
}
