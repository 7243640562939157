use super::{Tape, Tensor, TensorError, Var};

fn eval<F, E>(f: &F, x: Tensor) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(TensorError::NotScalar(value.shape().to_vec()).into());
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(TensorError::NonFinite(format!("f evaluated to {y}")).into());
    }
    Ok(y)
}

/// Central-difference gradient of the scalar graph built by `f` at `x`.
pub fn numeric_gradient<F, E>(f: F, x: &Tensor, eps: f64) -> Result<Vec<f64>, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        // divide by the step that was actually representable
        let step = plus.data()[i] - minus.data()[i];
        grad.push((eval(&f, plus)? - eval(&f, minus)?) / step);
    }
    Ok(grad)
}

/// Largest relative disagreement between the tape gradient and central
/// differences: `max_i |ad_i - fd_i| / max(1e-12, |fd_i|)`.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = numeric_gradient(f, x, eps)?;
    Ok(analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs() / n.abs().max(1e-12)).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gradient_of_sum() {
        let x = Tensor::vector(&[0.3, -0.2, 0.15, 0.05]);
        let err = finite_diff_check::<_, TensorError>(|t, v| Ok(t.sum(v)), &x, 1e-6).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        let err = finite_diff_check::<_, TensorError>(
            |t, v| {
                let s = t.square(v);
                Ok(t.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::vector(&[0.0]);
        let res = finite_diff_check::<_, TensorError>(
            |t, v| {
                let l = t.log(v);
                Ok(t.sum(l))
            },
            &x,
            1e-6,
        );
        assert!(matches!(res, Err(TensorError::NonFinite(_))));
    }
}
