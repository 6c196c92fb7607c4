//! Parameter declaration. Every weight struct declares its parameters once
//! through a [`ParamSource`]; the same declaration both initializes a fresh
//! [`WeightStore`] and loads one back with shape checking and use counting.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::weights::{dims_to_shape, DType, Data, StoredTensor, WeightStore};

#[derive(Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

impl<T> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.value.shape())
    }
}

/// Initial value rule for a freshly declared parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal(0, std) redrawn outside two standard deviations.
    TruncNormal(f64),
    Uniform(f64, f64),
    /// `ln(1..=d_state)` along the last axis.
    S4dReal,
    /// Inverse softplus of a step drawn log-uniformly from `[lo, hi]`.
    StepBias(f64, f64),
}

pub trait ParamSource<T: Scalar> {
    fn take(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Param<T>>;
}

/// Draws initial values and inserts them into a store.
pub struct Initializer<'a> {
    store: &'a mut WeightStore,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl<'a> Initializer<'a> {
    pub fn new(store: &'a mut WeightStore, seed: u64, dtype: DType) -> Self {
        Initializer {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    fn draw(&mut self, dims: &[usize], init: Init) -> Vec<f64> {
        let n: usize = dims.iter().product();
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Uniform(lo, hi) => (0..n).map(|_| self.rng.gen_range(lo..hi)).collect(),
            Init::S4dReal => {
                let last = dims.last().copied().unwrap_or(1);
                (0..n).map(|i| ((i % last) as f64 + 1.0).ln()).collect()
            }
            Init::StepBias(lo, hi) => (0..n)
                .map(|_| {
                    let u: f64 = self.rng.gen_range(0.0..1.0);
                    let step = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
                    // softplus^-1(step) = ln(exp(step) - 1)
                    step.exp_m1().ln()
                })
                .collect(),
        }
    }
}

impl<T: Scalar> ParamSource<T> for Initializer<'_> {
    fn take(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Param<T>> {
        if self.store.contains(name) {
            return Err(Error::Config(format!("parameter `{name}` declared twice")));
        }
        let values = self.draw(dims, init);
        let stored = StoredTensor::new(dims.to_vec(), Data::from_f64(self.dtype, values))?;
        let value = Arc::new(stored.to_tensor());
        self.store.insert(name, stored);
        Ok(Param {
            name: name.to_owned(),
            value,
        })
    }
}

/// Reads parameters from a store, checking extents and counting uses.
pub struct ParamReader<'a> {
    store: &'a WeightStore,
    uses: BTreeMap<String, usize>,
}

impl<'a> ParamReader<'a> {
    pub fn new(store: &'a WeightStore) -> Self {
        ParamReader {
            store,
            uses: BTreeMap::new(),
        }
    }

    /// Per-name read counts so far.
    pub fn uses(&self) -> &BTreeMap<String, usize> {
        &self.uses
    }

    /// Names in the store that were never read, and names read more than once.
    pub fn audit(&self) -> AccessAudit {
        let orphans = self
            .store
            .names()
            .filter(|n| !self.uses.contains_key(*n))
            .map(str::to_owned)
            .collect();
        let repeated = self
            .uses
            .iter()
            .filter(|(_, &c)| c > 1)
            .map(|(n, &c)| (n.clone(), c))
            .collect();
        AccessAudit {
            total: self.store.len(),
            orphans,
            repeated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessAudit {
    pub total: usize,
    pub orphans: Vec<String>,
    pub repeated: Vec<(String, usize)>,
}

impl AccessAudit {
    pub fn is_clean(&self) -> bool {
        self.orphans.is_empty() && self.repeated.is_empty()
    }
}

impl<T: Scalar> ParamSource<T> for ParamReader<'_> {
    fn take(&mut self, name: &str, dims: &[usize], _init: Init) -> Result<Param<T>> {
        let stored = self
            .store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))?;
        if stored.dims != dims && stored.shape4() != dims_to_shape(dims) {
            return Err(Error::ParamShape {
                name: name.to_owned(),
                expected: dims.to_vec(),
                found: stored.dims.clone(),
            });
        }
        *self.uses.entry(name.to_owned()).or_insert(0) += 1;
        Ok(Param {
            name: name.to_owned(),
            value: Arc::new(stored.to_tensor()),
        })
    }
}

/// Ranges for [`randomize`]: generic entries from `±spread`, temperatures
/// from `temperature`, and fixed role-specific ranges that keep the scan
/// decay, the step size and the norm scales in a responsive regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub spread: f64,
    pub temperature: (f64, f64),
}

impl Spread {
    /// The protocol of the gradient checks.
    pub const GRADIENT: Spread = Spread { spread: 0.35, temperature: (1.0, 2.0) };
    /// Wide draws for oracle and invariant checks, where every path should matter.
    pub const WIDE: Spread = Spread { spread: 0.5, temperature: (0.5, 2.0) };

    fn range(&self, name: &str) -> (f64, f64) {
        if name.ends_with("temperature") {
            self.temperature
        } else if name.ends_with("a_log") {
            (-1.0, 1.0)
        } else if name.ends_with("delta_bias") {
            (-2.0, 0.5)
        } else if name.ends_with("gamma") {
            (0.5, 1.5)
        } else {
            (-self.spread, self.spread)
        }
    }
}

/// Overwrites every entry of `store` with seeded uniform draws.
pub fn randomize(store: &mut WeightStore, seed: u64, spread: Spread) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, e) in store.iter_mut() {
        let (lo, hi) = spread.range(name);
        for i in 0..e.numel() {
            e.data.set(i, rng.gen_range(lo..hi));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initializer_is_seeded() {
        let build = |seed| {
            let mut store = WeightStore::new();
            let mut init = Initializer::new(&mut store, seed, DType::F32);
            let _: Param<f32> = init.take("w", &[4, 3], Init::TruncNormal(0.02)).unwrap();
            store
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn truncated_normal_stays_within_two_std() {
        let mut store = WeightStore::new();
        let mut init = Initializer::new(&mut store, 1, DType::F64);
        let p: Param<f64> = init.take("w", &[1000], Init::TruncNormal(0.02)).unwrap();
        assert!(p.value.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn step_bias_maps_into_range() {
        let mut store = WeightStore::new();
        let mut init = Initializer::new(&mut store, 3, DType::F64);
        let p: Param<f64> = init.take("b", &[256], Init::StepBias(0.001, 0.1)).unwrap();
        for &b in p.value.data() {
            let step = crate::ops::Activation::Softplus.apply(b);
            assert!((0.001 - 1e-12..=0.1 + 1e-12).contains(&step), "{step}");
        }
    }

    #[test]
    fn reader_checks_shape_and_counts() {
        let mut store = WeightStore::new();
        {
            let mut init = Initializer::new(&mut store, 0, DType::F32);
            let _: Param<f32> = init.take("a", &[2, 2], Init::Zeros).unwrap();
            let _: Param<f32> = init.take("b", &[3], Init::Ones).unwrap();
        }
        let mut r = ParamReader::new(&store);
        let a: Param<f64> = r.take("a", &[2, 2], Init::Zeros).unwrap();
        assert_eq!(a.value.shape().0, [1, 1, 2, 2]);
        assert!(matches!(
            ParamSource::<f64>::take(&mut r, "b", &[4], Init::Zeros),
            Err(Error::ParamShape { .. })
        ));
        assert!(matches!(
            ParamSource::<f64>::take(&mut r, "zzz", &[1], Init::Zeros),
            Err(Error::MissingParam(_))
        ));
        let audit = r.audit();
        assert_eq!(audit.orphans, vec!["b".to_owned()]);
        assert!(!audit.is_clean());
    }
}
