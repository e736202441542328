//! Central finite-difference check of tape gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::tape::{Bindings, Tape, Var};

fn evaluate<F>(params: &ParamSet, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = tape.bind(params);
    let loss = f(&mut tape, &bindings)?;
    tape.value(loss).item().ok_or_else(|| {
        Error::Tensor(crate::tensor::TensorError::NonScalarLoss(tape.value(loss).shape().to_vec()))
    })
}

/// Compares tape gradients with `(f(θ+ε) − f(θ−ε)) / 2ε` on `samples`
/// randomly drawn trainable scalars and returns the largest relative error
/// `|g_tape − g_fd| / max(|g_tape|, |g_fd|, 1e-12)`.
///
/// `params` is restored to its original values before returning.
pub fn grad_check<F>(params: &mut ParamSet, mut f: F, epsilon: f64, samples: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&mut Tape, &Bindings) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }

    let mut tape = Tape::new();
    let bindings = tape.bind(params);
    let loss = f(&mut tape, &bindings)?;
    let grads = tape.backward(loss)?;

    let entries: Vec<(usize, usize)> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.tensor.numel()).map(move |i| (id.index(), i)))
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidArgument("no trainable parameters".into()));
    }

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (pi, ei) = entries[rng.gen_range(0..entries.len())];
        let id = ids[pi];
        let tape_grad = grads.wrt(bindings.var(id)).map_or(0.0, |g| g[ei]);

        let original = params.get(id).tensor.data()[ei];
        params.get_mut(id).tensor.data_mut()[ei] = original + epsilon;
        let plus = evaluate(params, &mut f);
        params.get_mut(id).tensor.data_mut()[ei] = original - epsilon;
        let minus = evaluate(params, &mut f);
        params.get_mut(id).tensor.data_mut()[ei] = original;

        let fd = (plus? - minus?) / (2.0 * epsilon);
        let denom = tape_grad.abs().max(fd.abs()).max(1e-12);
        worst = worst.max((tape_grad - fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_nearly_exact() {
        let mut params = ParamSet::new();
        let theta = params.insert("theta", Tensor::scalar(3.0), true).unwrap();
        let err = grad_check(
            &mut params,
            |tape, b| {
                let v = b.var(theta);
                Ok(tape.mul(v, v)?)
            },
            1e-5,
            4,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
        assert_eq!(params.get(theta).tensor.data(), &[3.0]);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut params = ParamSet::new();
        params.insert("theta", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let err = grad_check(
            &mut params,
            |tape, _| Ok(tape.constant(Tensor::scalar(7.0))),
            1e-5,
            5,
            3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut params = ParamSet::new();
        params.insert("theta", Tensor::scalar(1.0), true).unwrap();
        let f = |tape: &mut Tape, _: &Bindings| Ok(tape.constant(Tensor::scalar(0.0)));
        assert!(grad_check(&mut params, f, 0.1, 1, 0).is_err());
        assert!(grad_check(&mut params, f, 1e-5, 0, 0).is_err());
    }
}
