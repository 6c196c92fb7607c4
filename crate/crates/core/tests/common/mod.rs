#![allow(dead_code)]

use mtair::params::{self, Initializer, ParamReader};
use mtair::weights::{DType, WeightStore};
use mtair::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Declares parameters through `declare`, then overwrites them with values
/// large enough that every path matters.
pub fn random_weights<W>(
    seed: u64,
    dtype: DType,
    declare: impl Fn(&mut Initializer<'_>) -> Result<W>,
) -> WeightStore {
    let mut store = WeightStore::new();
    {
        let mut init = Initializer::new(&mut store, seed, dtype);
        declare(&mut init).unwrap();
    }
    randomize(&mut store, seed ^ 0x9e37);
    store
}

/// Like [`random_weights`] but with generic entries drawn from
/// `±scale` and temperatures from `1..2`.
pub fn scaled_weights<W>(
    seed: u64,
    scale: f64,
    declare: impl Fn(&mut Initializer<'_>) -> Result<W>,
) -> WeightStore {
    let mut store = WeightStore::new();
    {
        let mut init = Initializer::new(&mut store, seed, DType::F64);
        declare(&mut init).unwrap();
    }
    randomize_with(&mut store, seed ^ 0x9e37, scale, (1.0, 2.0));
    store
}

pub fn randomize(store: &mut WeightStore, seed: u64) {
    randomize_with(store, seed, 0.5, (0.5, 2.0));
}

fn randomize_with(store: &mut WeightStore, seed: u64, spread: f64, temperature: (f64, f64)) {
    params::randomize(store, seed, params::Spread { spread, temperature });
}

pub fn load<W>(store: &WeightStore, declare: impl Fn(&mut ParamReader<'_>) -> Result<W>) -> W {
    let mut r = ParamReader::new(store);
    declare(&mut r).unwrap()
}

pub fn random_tensor(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Largest elementwise difference relative to the largest oracle magnitude.
pub fn normwise<T: mtair::Scalar>(got: &Tensor<T>, want: &Tensor<f64>) -> f64 {
    assert_eq!(got.shape(), want.shape());
    let scale = want.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    got.data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a.to_f64() - b).abs())
        .fold(0.0, f64::max)
        / scale
}
