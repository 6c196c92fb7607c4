//! Wall-time scaling of the two linear-cost mixers against a naive
//! pixel-by-pixel attention baseline.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{channel_attention, ChannelAttnWeights};
use crate::error::{Error, Result};
use crate::params::Initializer;
use crate::ssm::{ssm_2d, Ssm2d};
use crate::tensor::{dot, Scalar, Tensor};
use crate::weights::{DType, WeightStore};

pub const DEFAULT_SIDES: [usize; 3] = [32, 64, 128];
pub const DEFAULT_CHANNELS: usize = 48;
pub const MIN_REPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Ssm2d,
    ChannelAttention,
    SpatialAttention,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Ssm2d, Kernel::ChannelAttention, Kernel::SpatialAttention];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Ssm2d => "ssm_2d",
            Kernel::ChannelAttention => "channel_attention",
            Kernel::SpatialAttention => "spatial_attention_naive",
        }
    }
}

/// Softmax attention between all pixel pairs with `x` as queries, keys and
/// values. Scores are produced one query row at a time, so memory stays
/// linear while time is quadratic in the pixel count.
pub fn spatial_attention_naive<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (p, c) = (s.area(), s.c());
    let scale = T::from_f64(1.0 / (c.max(1) as f64).sqrt());
    let mut out = Tensor::zeros(s);
    for n in 0..s.n() {
        let xs = &x.data()[n * p * c..(n + 1) * p * c];
        let dst = &mut out.data_mut()[n * p * c..(n + 1) * p * c];
        crate::ops::for_each_row(dst, c, |row, o| {
            let q = &xs[row * c..(row + 1) * c];
            let mut scores: Vec<T> = xs.chunks_exact(c).map(|k| dot(q, k) * scale).collect();
            let m = scores.iter().copied().fold(scores[0], T::max);
            let mut total = T::ZERO;
            for v in scores.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for (wgt, v) in scores.iter().zip(xs.chunks_exact(c)) {
                crate::tensor::axpy(*wgt / total, v, o);
            }
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub side: usize,
    pub pixels: usize,
    pub reps: usize,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub channels: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log(time) against log(pixels), per kernel.
    pub exponents: BTreeMap<Kernel, f64>,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<26} {:>6} {:>8} {:>5} {:>12}\n", "kernel", "side", "pixels", "reps", "median (s)");
        for r in &self.rows {
            s += &format!(
                "{:<26} {:>6} {:>8} {:>5} {:>12.6}\n",
                r.kernel.name(),
                r.side,
                r.pixels,
                r.reps,
                r.median_seconds
            );
        }
        for (k, e) in &self.exponents {
            s += &format!("exponent {:<26} {e:.3}\n", k.name());
        }
        s
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn fit_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?; // warm-up
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64());
    }
    Ok(median(t))
}

/// Times every kernel at every side length (square images, batch 1).
pub fn run_bench(sides: &[usize], channels: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if sides.len() < 2 || reps == 0 {
        return Err(Error::InvalidArgument("bench needs at least two sizes and one repetition".into()));
    }
    let mut store = WeightStore::new();
    let mut init = Initializer::new(&mut store, seed, DType::F32);
    let ssm = Ssm2d::<f32>::new(&mut init, "bench.ssm", channels, crate::blocks::BlockOptions::default().d_state)?;
    let attn = ChannelAttnWeights::<f32>::new(&mut init, "bench.attn", channels, 1, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(-1.0f32, 1.0);
    let mut rows = Vec::new();
    for &side in sides {
        let x = Tensor::from_fn([1, side, side, channels], |_| dist.sample(&mut rng));
        for kernel in Kernel::ALL {
            let median_seconds = match kernel {
                Kernel::Ssm2d => time_reps(reps, || ssm_2d(&x, &ssm).map(drop))?,
                Kernel::ChannelAttention => time_reps(reps, || channel_attention(&x, &attn).map(drop))?,
                Kernel::SpatialAttention => time_reps(reps, || {
                    std::hint::black_box(spatial_attention_naive(&x));
                    Ok(())
                })?,
            };
            rows.push(BenchRow {
                kernel,
                side,
                pixels: side * side,
                reps,
                median_seconds,
            });
        }
    }
    let exponents = Kernel::ALL
        .iter()
        .map(|&k| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.kernel == k)
                .map(|r| (r.pixels as f64, r.median_seconds.max(1e-9)))
                .collect();
            (k, fit_exponent(&pts))
        })
        .collect();
    Ok(BenchReport { channels, rows, exponents })
}
