//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Max relative error between analytic and central-difference gradients of a
/// scalar function. `f` receives the parameters as tape leaves and must
/// return a scalar.
///
/// Relative error per coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, params, step, usize::MAX, 0)
}

/// Like [`grad_check`] but perturbs at most `max_coords` randomly chosen
/// coordinates per parameter tensor.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be > 0, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out)?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("function value at perturbed point".into()));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut max_err = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn square_at_three() {
        let err = grad_check(|t, p| t.mul(p[0], p[0]), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.2))),
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::uniform(&[4, 6], -2.0, 2.0, &mut rng);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
        let err = grad_check(|t, p| t.cross_entropy(p[0], &targets), &[logits], 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(grad_check(|t, p| t.sum(p[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }

    #[test]
    fn non_finite_perturbation_is_an_error() {
        // exp overflows once x + step crosses ~709.78.
        let r = grad_check(|t, p| t.exp(p[0]), &[Tensor::scalar(709.78)], 1.0);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
