use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|a − n| / (|a| + |n| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences at every coordinate of `x`. Returns the max relative error.
///
/// `f` receives a fresh graph and the input var, and must return a scalar var.
pub fn grad_check<'a, F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'a>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_coords<'a, F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<'a>, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Argument(format!("step {h} outside (0, 1e-2]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(t.clone());
        let out = f(&mut g, xv)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("non-finite objective {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    let f0 = g.value(out).data()[0];
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("non-finite objective {f0}")));
    }
    let analytic = g
        .backward(out)?
        .get(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn two_logit_cross_entropy() {
        // central-difference oracle on a 2-logit head over several draws
        for seed in 0..5 {
            let mut rng = Rng::new(seed, 0);
            let x = rng.normal_tensor(&[1, 3], 1.0);
            let w = rng.normal_tensor(&[2, 3], 1.0);
            let err = grad_check(
                |g, x| {
                    let wv = g.constant(w.clone());
                    let logits = g.linear(x, wv, None)?;
                    g.cross_entropy(logits, &[0], &[1])
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn constant_function_has_zero_grads() {
        let x = Tensor::vector(vec![0.5, -2.0]).unwrap();
        let c = Tensor::scalar(3.0);
        let err = grad_check(
            |g, x| {
                let z = g.scale(x, 0.0);
                let s = g.sum(z);
                let cv = g.constant(c.clone());
                g.add(s, cv)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.5).is_err());
    }

    #[test]
    fn reports_non_finite_objective() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(|g, x| Ok(g.scale(x, f64::INFINITY)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
