use super::{Tape, Tensor, TensorError, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over every leaf
/// coordinate.
///
/// `f` is re-run on a fresh tape for every perturbation, so it must be a pure
/// function of the leaf values.
pub fn grad_check<E, F>(f: F, leaves: &[Tensor], eps: f64) -> Result<f64, E>
where
    E: From<TensorError>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")).into());
    }
    let eval = |values: &[Tensor]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out.item()?)
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.shape().iter().product::<usize>() != 1 {
        return Err(TensorError::NotScalar { shape: out.shape() }.into());
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let mut work = leaves.to_vec();
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        for k in 0..leaf.len() {
            let orig = leaf.data()[k];
            work[li].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[li].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[li].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[li].data()[k];
            let denom = 1f64.max(exact.abs()).max(numeric.abs());
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let err = grad_check::<TensorError, _>(|_, v| Ok(v[0].square().sum()), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_eps_and_vector_output() {
        let r = grad_check::<TensorError, _>(|_, v| Ok(v[0]), &[Tensor::scalar(1.0)], 1.0);
        assert!(r.is_err());
        let r = grad_check::<TensorError, _>(|_, v| Ok(v[0]), &[Tensor::zeros(&[2])], 1e-5);
        assert!(matches!(r, Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn matmul_random_against_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let err = grad_check::<TensorError, _>(
            |t, v| {
                let w = t.constant(w.clone());
                Ok(v[0].matmul(v[1])?.mul(w)?.sum())
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn tanh_at_point_seven() {
        let err = grad_check::<TensorError, _>(|_, v| Ok(v[0].tanh().sum()), &[Tensor::scalar(0.7)], 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
