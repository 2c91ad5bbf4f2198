use super::{Real, Tape, Tensor, Var};
use crate::error::{ensure, Result};

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error
/// `|analytic − numeric| / (|numeric| + 1e-8)` over coordinates.
///
/// `f` receives a fresh tape and the bound input on every call. The step
/// actually taken is measured after rounding to `T`.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    ensure!(
        eps > 0.0 && eps <= 1e-2,
        "finite-difference step must be in (0, 1e-2], got {eps}"
    );

    let input = x.clone().with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&input);
    let out = f(&mut tape, v)?;
    ensure!(
        tape.value(out).is_scalar(),
        "finite-difference check needs a scalar function, got shape {:?}",
        tape.shape(out)
    );
    let analytic: Vec<f64> = if tape.is_tracked(out) {
        tape.backward(out)?;
        match tape.grad(v) {
            Some(g) => g.iter().map(|g| g.as_f64()).collect(),
            None => vec![0.0; x.numel()],
        }
    } else {
        vec![0.0; x.numel()]
    };

    let eval = |values: Vec<T>| -> Result<f64> {
        let probe = Tensor::new(x.shape().to_vec(), values)?;
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        tape.value(out).item().map(|s| s.as_f64())
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let base = x.values()[i];
        let plus = T::from_f64(base.as_f64() + eps);
        let minus = T::from_f64(base.as_f64() - eps);
        let step = plus.as_f64() - minus.as_f64();
        let mut xp = x.values().to_vec();
        xp[i] = plus;
        let mut xm = x.values().to_vec();
        xm[i] = minus;
        let numeric = (eval(xp)? - eval(xm)?) / step;
        let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![8], 1.0, &mut rng);
        let err = finite_difference_check(
            |tape, v| {
                let zero = tape.constant(Tensor::zeros(vec![8]));
                let m = tape.mean_squared_error(v, zero)?;
                tape.scale(m, 8.0)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn untracked_function_is_zero_gradient() {
        let x = Tensor::<f64>::full(vec![3], 1.0);
        let err = finite_difference_check(|tape, _| Ok(tape.constant(Tensor::scalar(2.0))), &x, 1e-3).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Tensor::<f64>::full(vec![3], 1.0);
        assert!(finite_difference_check(|_, v| Ok(v), &x, 1e-3).is_err());
        assert!(finite_difference_check(|t, v| t.sum(v), &x, 0.1).is_err());
        assert!(finite_difference_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }
}
