use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest `|AD - FD| / (|FD| + 1e-8)` over the coordinates of `point`,
/// with central differences of step `h`.
///
/// `f` receives the input as a tape variable and must return a scalar.
/// A kink or jump inside `[x - h, x + h]` shows up as a large error; it is
/// reported, not hidden.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let ad = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let y = f(x)?;
        tape.backward(y)?.wrt(x)
    };
    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let y = f(tape.constant(p))?;
        tape.check()?;
        let v = y.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check perturbed evaluation".into()))
        }
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (ad.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form() {
        let a = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let x0 = Tensor::matrix(2, 1, vec![0.3, -1.2]).unwrap();
        let err = grad_check(
            |x| {
                let ac = x.tape().constant(a.clone());
                let xt = x.reshape(vec![1, 2]);
                Ok(xt.matmul(ac).matmul(x).sum())
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn tanh_of_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::randn(&[8, 8], &mut rng);
        let x0 = Tensor::randn(&[8, 1], &mut rng).map(|v| 0.3 * v);
        let err = grad_check(
            |x| Ok(x.tape().constant(w.clone()).matmul(x).tanh().sum()),
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn kink_inside_stencil_is_reported() {
        // |x| evaluated 1e-6 from its kink with h = 1e-5: AD says 1, FD says 0.5.
        let err = grad_check(|x| Ok(x.abs().sum()), &Tensor::scalar(1e-6), 1e-5).unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn non_finite_perturbation_is_an_error() {
        let r = grad_check(|x| Ok(x.ln().sum()), &Tensor::scalar(1e-7), 1e-5);
        assert!(r.is_err());
    }
}
