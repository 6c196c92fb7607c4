//! Central finite-difference verification of tape gradients.
//!
//! The function under test reads every parameter (and its input, stored as
//! just another entry) from a [`WeightStore`]. Its output is reduced to the
//! scalar `sum(out * R)` with a fixed random `R`, so every output element
//! contributes to the checked gradient.
//!
//! Pass/fail uses the plain central difference at `step`. A Richardson
//! estimate from `step` and `step / 2` (error O(h^4)) is reported next to
//! it: when only the plain column fails, the miss is truncation error of the
//! difference quotient rather than a wrong analytic gradient.
//!
//! A directional check is reported as well: each parameter tensor is moved
//! along one random unit direction `v` and the extrapolated quotient is
//! compared with `<grad, v>`. That value is of the order of the whole gradient norm, so it
//! stays well conditioned where single entries sit at the rounding floor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::weights::{DType, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
    pub extrapolate: bool,
    /// Step of the extrapolated directional check. Larger than `step` since
    /// extrapolation leaves only O(h^4) truncation and rounding shrinks as 1/h.
    pub directional_step: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-4,
            tol: 1e-6,
            seed: 0x5eed,
            extrapolate: true,
            directional_step: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// Worst relative error over elements whose probes stayed on one side of
    /// every kink.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements whose `+h` or `-h` probe flipped a ReLU/abs branch.
    pub kinked: usize,
    pub kinked_max_rel_err: f64,
    /// Worst relative error against the extrapolated difference, over the
    /// same elements. `None` when extrapolation is off.
    pub extrapolated_max_rel_err: Option<f64>,
    /// Relative error of the extrapolated directional derivative along a
    /// random unit direction (kinks not excluded).
    pub directional_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub step: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn extrapolated_max_rel_err(&self) -> Option<f64> {
        self.params
            .iter()
            .map(|p| p.extrapolated_max_rel_err)
            .try_fold(0.0, |m, e| e.map(|e| f64::max(m, e)))
    }

    pub fn directional_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.directional_rel_err).fold(0.0, f64::max)
    }

    pub fn kinked(&self) -> usize {
        self.params.iter().map(|p| p.kinked).sum()
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !(p.max_rel_err <= self.tol)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn to_table(&self) -> String {
        let fmt_x = |e: Option<f64>| e.map_or_else(|| "-".to_owned(), |e| format!("{e:.3e}"));
        let mut s = format!(
            "{:<48} {:>7} {:>12} {:>12} {:>12} {:>7}  {}\n",
            "parameter", "numel", "max rel err", "extrapolated", "directional", "kinked", "status"
        );
        for p in &self.params {
            let status = if p.max_rel_err <= self.tol { "ok" } else { "FAIL" };
            s += &format!(
                "{:<48} {:>7} {:>12.3e} {:>12} {:>12.3e} {:>7}  {status}\n",
                p.name,
                p.numel,
                p.max_rel_err,
                fmt_x(p.extrapolated_max_rel_err),
                p.directional_rel_err,
                p.kinked
            );
        }
        s += &format!(
            "max rel err {:.3e} (tol {:.0e}, step {:.0e}), extrapolated {}, directional {:.3e}, {} kinked element(s) excluded\n",
            self.max_rel_err(),
            self.tol,
            self.step,
            fmt_x(self.extrapolated_max_rel_err()),
            self.directional_rel_err(),
            self.kinked()
        );
        s
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of `store`.
pub fn fd_check<F>(f: F, store: &WeightStore, cfg: FdConfig) -> Result<FdReport>
where
    F: Fn(&Tape<f64>, &WeightStore) -> Result<Var<f64>> + Sync,
{
    let store = store.converted(DType::F64);
    let tape = Tape::recording();
    let out = f(&tape, &store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe = Tensor::<f64>::from_fn(out.shape(), |_| StandardNormal.sample(&mut rng));
    let probe_var = tape.constant(probe.clone());
    let loss = tape.sum(&tape.mul(&out, &probe_var)?)?;
    let base_kinks = tape.kink_signature();
    let grads = tape.backward(&loss)?;
    drop(tape);

    let run = |s: &WeightStore| -> Result<(f64, u64)> {
        let t = Tape::inference();
        let y = f(&t, s)?;
        let v = y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        Ok((v, t.kink_signature()))
    };
    let eval = |name: &str, i: usize, delta: f64| -> Result<(f64, u64)> {
        let mut s = store.clone();
        let entry = s.get_mut(name).expect("name comes from the store");
        entry.data.set(i, entry.data.get(i) + delta);
        run(&s)
    };
    let eval_along = |name: &str, dir: &[f64], h: f64| -> Result<f64> {
        let mut s = store.clone();
        let entry = s.get_mut(name).expect("name comes from the store");
        for (i, d) in dir.iter().enumerate() {
            entry.data.set(i, entry.data.get(i) + h * d);
        }
        Ok(run(&s)?.0)
    };
    let mut params = Vec::new();
    for (name, entry) in store.iter() {
        let numel = entry.numel();
        let analytic = grads.named(name).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        let mut dir: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|d| *d /= norm);
        let along: f64 = analytic.iter().zip(&dir).map(|(a, d)| a * d).sum();
        let quotient = |h: f64| -> Result<f64> { Ok((eval_along(name, &dir, h)? - eval_along(name, &dir, -h)?) / (2.0 * h)) };
        let h = cfg.directional_step;
        let along_numeric = (4.0 * quotient(h / 2.0)? - quotient(h)?) / 3.0;
        let central = |i: usize, h: f64| -> Result<(f64, bool)> {
            let (fp, kp) = eval(name, i, h)?;
            let (fm, km) = eval(name, i, -h)?;
            Ok(((fp - fm) / (2.0 * h), kp != base_kinks || km != base_kinks))
        };
        let probe_one = |i: usize| -> Result<(f64, Option<f64>, bool)> {
            let (d, kinked) = central(i, cfg.step)?;
            if !cfg.extrapolate {
                return Ok((d, None, kinked));
            }
            let (d2, k2) = central(i, cfg.step / 2.0)?;
            Ok((d, Some((4.0 * d2 - d) / 3.0), kinked || k2))
        };
        #[cfg(feature = "parallel")]
        let numeric: Vec<(f64, Option<f64>, bool)> = {
            use rayon::prelude::*;
            (0..numel).into_par_iter().map(probe_one).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let numeric: Vec<(f64, Option<f64>, bool)> = (0..numel).map(probe_one).collect::<Result<_>>()?;

        let mut check = ParamCheck {
            name: name.to_owned(),
            numel,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            kinked: 0,
            kinked_max_rel_err: 0.0,
            extrapolated_max_rel_err: cfg.extrapolate.then_some(0.0),
            directional_rel_err: rel_err(along, along_numeric),
        };
        for (i, (&a, &(n, x, kinked))) in analytic.iter().zip(&numeric).enumerate() {
            let e = rel_err(a, n);
            if !kinked {
                if let (Some(m), Some(x)) = (check.extrapolated_max_rel_err.as_mut(), x) {
                    *m = m.max(rel_err(a, x));
                }
            }
            if kinked {
                check.kinked += 1;
                check.kinked_max_rel_err = check.kinked_max_rel_err.max(e);
            } else if !(e <= check.max_rel_err) {
                check.max_rel_err = e;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = n;
            }
        }
        params.push(check);
    }
    Ok(FdReport {
        step: cfg.step,
        tol: cfg.tol,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamReader, ParamSource};
    use crate::weights::{Data, StoredTensor};

    fn store_with(entries: &[(&str, Vec<f64>)]) -> WeightStore {
        let mut s = WeightStore::new();
        for (name, v) in entries {
            s.insert(*name, StoredTensor::new(vec![v.len()], Data::F64(v.clone())).unwrap());
        }
        s
    }

    #[test]
    fn linear_function_is_exact() {
        let store = store_with(&[("a", vec![0.3, -1.2, 2.0]), ("b", vec![0.5, 0.25, -4.0])]);
        let report = fd_check(
            |t, s| {
                let mut r = ParamReader::new(s);
                let a = t.param(&r.take("a", &[3], Init::Zeros)?);
                let b = t.param(&r.take("b", &[3], Init::Zeros)?);
                t.add(&t.scale(&a, 3.0)?, &b)
            },
            &store,
            FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-10, "{}", report.to_table());
    }

    #[test]
    fn quadratic_product() {
        let store = store_with(&[("a", vec![0.3, -1.2]), ("b", vec![0.7, 2.5])]);
        let report = fd_check(
            |t, s| {
                let mut r = ParamReader::new(s);
                let a = t.param(&r.take("a", &[2], Init::Zeros)?);
                let b = t.param(&r.take("b", &[2], Init::Zeros)?);
                t.mul(&a, &b)
            },
            &store,
            FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-10);
    }

    #[test]
    fn kink_crossings_are_set_aside() {
        // 5e-5 sits within one step of the ReLU kink
        let store = store_with(&[("a", vec![5e-5, 1.0, -1.0])]);
        let report = fd_check(
            |t, s| {
                let mut r = ParamReader::new(s);
                t.relu(&t.param(&r.take("a", &[3], Init::Zeros)?))
            },
            &store,
            FdConfig::default(),
        )
        .unwrap();
        assert_eq!(report.kinked(), 1);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let store = store_with(&[("a", vec![0.4, 0.9])]);
        // an opaque square whose value is right but gradient path is a copy
        let report = fd_check(
            |t, s| {
                let mut r = ParamReader::new(s);
                let a = t.param(&r.take("a", &[2], Init::Zeros)?);
                let sq = a.value().map(|v| v * v);
                let wrong = t.add(&a, &t.constant(sq.clone()))?;
                t.sub(&wrong, &t.constant(a.value().clone()))
            },
            &store,
            FdConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.extrapolated_max_rel_err().unwrap() > 0.1);
    }

    #[test]
    fn extrapolation_removes_cubic_truncation() {
        // d/da a^4 = 4a^3; the plain quotient is off by 4a h^2
        let store = store_with(&[("a", vec![0.01])]);
        let report = fd_check(
            |t, s| {
                let mut r = ParamReader::new(s);
                let a = t.param(&r.take("a", &[1], Init::Zeros)?);
                let sq = t.mul(&a, &a)?;
                t.mul(&sq, &sq)
            },
            &store,
            FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() > 1e-5, "{}", report.to_table());
        assert!(report.extrapolated_max_rel_err().unwrap() < 1e-9);
        assert!(!report.passed());
    }
}
