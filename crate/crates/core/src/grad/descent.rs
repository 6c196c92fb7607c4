use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::weights::WeightStore;

/// Plain gradient descent on every entry of `store`. Returns the loss seen at
/// each step, before that step's update.
pub fn gradient_descent<F>(store: &mut WeightStore, steps: usize, lr: f64, loss_fn: F) -> Result<Vec<f64>>
where
    F: Fn(&Tape<f32>, &WeightStore) -> Result<Var<f32>>,
{
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let tape = Tape::recording();
        let loss = match loss_fn(&tape, store) {
            Ok(l) => l,
            Err(e) if matches!(e.root(), Error::NonFinite { .. } | Error::NonFiniteState { .. }) => {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
            Err(e) => return Err(e),
        };
        let value = f64::from(loss.value().data()[0]);
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        trace.push(value);
        if lr == 0.0 {
            continue;
        }
        let grads = tape.backward(&loss)?.into_named();
        for (name, g) in grads {
            let Some(entry) = store.get_mut(&name) else { continue };
            for (i, &gv) in g.data().iter().enumerate() {
                entry.data.set(i, entry.data.get(i) - lr * f64::from(gv));
            }
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamReader, ParamSource};
    use crate::weights::{Data, StoredTensor};

    fn quadratic(store: &WeightStore, tape: &Tape<f32>) -> Result<Var<f32>> {
        let mut r = ParamReader::new(store);
        let x = tape.param(&r.take("x", &[2], Init::Zeros)?);
        tape.sum(&tape.mul(&x, &x)?)
    }

    fn start() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("x", StoredTensor::new(vec![2], Data::F32(vec![1.0, -2.0])).unwrap());
        s
    }

    #[test]
    fn descends_a_bowl() {
        let mut s = start();
        let trace = gradient_descent(&mut s, 20, 0.1, |t, s| quadratic(s, t)).unwrap();
        assert!(trace.windows(2).all(|w| w[1] < w[0]));
        assert!(trace[19] < 0.1 * trace[0]);
    }

    #[test]
    fn zero_rate_is_constant() {
        let mut s = start();
        let trace = gradient_descent(&mut s, 5, 0.0, |t, s| quadratic(s, t)).unwrap();
        assert!(trace.iter().all(|&l| l == trace[0]));
    }

    #[test]
    fn blow_up_is_reported() {
        let mut s = start();
        let err = gradient_descent(&mut s, 200, 10.0, |t, s| quadratic(s, t)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
