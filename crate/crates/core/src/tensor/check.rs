//! Finite-difference gradient oracle.
//!
//! Derivatives are estimated with the fourth-order central stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, which keeps truncation
//! error small at steps large enough that rounding noise stays far below the
//! gradients being checked.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Maximum relative error between the recorded gradient of a scalar function
/// `f` at `x` and its central-difference estimate with step `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_params(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Same check over every coordinate of several trainable inputs at once.
pub fn finite_diff_check_params<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = g.grad_values(*var).expect("trainable leaf has grad").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = inputs[t].values()[j];
            let mut at = |delta: f64| -> Result<f64> {
                probe[t].values_mut()[j] = x0 + delta;
                let v = eval(&probe);
                probe[t].values_mut()[j] = x0;
                v
            };
            // differences first: `-f + 8f - 8f + f` does not round to zero
            let near = at(eps)? - at(-eps)?;
            let far = at(2.0 * eps)? - at(-2.0 * eps)?;
            let numeric = (8.0 * near - far) / (12.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::invalid("finite_diff_check: function must be scalar-valued"));
    }
    Ok(t.values()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        let err = finite_diff_check(|g, x| Ok(g.sum(x)), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn every_op_passes_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = Tensor::uniform(&[3, 4], 1.5, &mut rng);
            let b = Tensor::uniform(&[4, 2], 1.5, &mut rng);
            let bias = Tensor::uniform(&[1, 2], 1.0, &mut rng);
            let err = finite_diff_check_params(
                |g, v| {
                    let p = g.matmul(v[0], v[1])?;
                    let p = g.add_row(p, v[2])?;
                    let t = g.tanh(p);
                    let tt = g.transpose(t);
                    let s0 = g.softmax(tt, 0)?;
                    let s1 = g.softmax(s0, 1)?;
                    let k = g.topk_softmax_rows(t, 2)?;
                    let kt = g.transpose(k);
                    let both = g.concat_cols(&[s1, kt])?;
                    let rows = g.concat_rows(&[both, both])?;
                    let sl = g.slice_rows(rows, 1, 2)?;
                    let ga = g.gather_rows(sl, &[1, 0, 1])?;
                    let m = g.mean_rows(ga);
                    let sc = g.scale(m, 3.0);
                    let ce = g.cross_entropy(sc, &[1])?;
                    let sum = g.sum(ga);
                    let z = g.scale(sum, 0.1);
                    g.add(ce, z)
                },
                &[a, b, bias],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn kl_div_gradient_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z = Tensor::uniform(&[3, 5], 2.0, &mut rng);
            let raw = Tensor::uniform(&[3, 5], 1.0, &mut rng);
            let mut g = Graph::new();
            let r = g.constant(raw);
            let target_var = g.softmax(r, 1).unwrap();
            let target = g.value(target_var).clone();
            let err = finite_diff_check(|g, z| g.kl_div(&target, z), &z, 1e-4).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
