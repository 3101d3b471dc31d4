//! Central-difference validation of analytic gradients.
//!
//! `finite_diff_check` takes a closure that builds a scalar loss from one
//! input tensor. It computes the analytic gradient once via backward, then
//! perturbs every coordinate of the input by ±step and compares. The builder
//! must be deterministic: any randomness has to be fixed before the call so
//! that repeated builds evaluate the same mathematical function.

use crate::error::{Error, Result};
use crate::graph::{Graph, ValueId};
use crate::tensor::Tensor;

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|).
///
/// The normalization keeps the measure relative for large gradients without
/// exploding for near-zero ones.
pub fn finite_diff_check<F>(build: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, ValueId) -> Result<ValueId>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::contract(format!("finite_diff_check step must be positive, got {step}")));
    }

    let eval = |data: &[f64], want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let t = Tensor::new(data.to_vec(), x.shape())?.with_requires_grad();
        let id = g.leaf(&t);
        let loss = build(&mut g, id)?;
        if g.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "finite_diff_check requires a scalar-valued function, got shape {:?}",
                g.shape(loss)
            )));
        }
        let value = g.value(loss)[0];
        if !want_grad {
            return Ok((value, None));
        }
        g.backward(loss)?;
        let grad = match g.grad(id) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; data.len()],
        };
        Ok((value, Some(grad)))
    };

    let (_, analytic) = eval(x.data(), true)?;
    let analytic = analytic.expect("grad requested");

    let mut worst = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let (fp, _) = eval(&probe, false)?;
        probe[i] = orig - step;
        let (fm, _) = eval(&probe, false)?;
        probe[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_to_machine_precision() {
        // Constant gradient: any step size is exact, so use a large one to
        // keep the subtraction well-conditioned.
        let x = Tensor::new(vec![0.3, -0.8, 0.55, 0.11], &[4]).unwrap();
        let err = finite_diff_check(|g, id| Ok(g.sum_all(id)), &x, 0.5).unwrap();
        assert!(err <= 1e-12, "err = {err}");
    }

    #[test]
    fn quadratic_function_checks_tightly() {
        let x = Tensor::new(vec![0.9, -0.4, 0.2, 0.7, -1.0], &[5]).unwrap();
        let err = finite_diff_check(
            |g, id| {
                let sq = g.square(id);
                Ok(g.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn conv_kernel_gradient_checks() {
        // Random 5x5 input, loss = sum(conv2d(x, k)); check d/dk.
        let input: Vec<f64> = (0..25).map(|i| ((i * 37 + 11) % 19) as f64 / 9.5 - 1.0).collect();
        let k = Tensor::new(
            (0..9).map(|i| ((i * 7 + 3) % 13) as f64 / 6.5 - 1.0).collect(),
            &[1, 1, 3, 3],
        )
        .unwrap();
        let err = finite_diff_check(
            move |g, kid| {
                let x = Tensor::new(input.clone(), &[1, 1, 5, 5]).unwrap();
                let xid = g.constant(&x);
                let y = g.conv2d(xid, kid, 1, 1)?;
                Ok(g.sum_all(y))
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn every_differentiable_op_passes_at_1e4() {
        // One composite touching each op with inputs kept away from kinks
        // and singularities (abs at 0, div/sqrt near 0).
        let x = Tensor::new(vec![0.83, 0.41, 0.67, 0.29, 0.91, 0.55, 0.73, 0.62], &[2, 1, 2, 2])
            .unwrap();
        let err = finite_diff_check(
            |g, id| {
                let b = Tensor::new(vec![1.7, 1.3, 1.9, 1.1, 1.5, 1.2, 1.8, 1.6], &[2, 1, 2, 2])
                    .unwrap()
                    .with_requires_grad();
                let bid = g.leaf(&b);
                let sum = g.add(id, bid)?;
                let diff = g.sub(sum, bid)?;
                let prod = g.mul(diff, bid)?;
                let quot = g.div(prod, bid)?;
                let scaled = g.mul_scalar(quot, 0.7);
                let shifted = g.add_scalar(scaled, 0.2);
                let e = g.exp(shifted);
                let a = g.abs(e);
                let sq = g.square(a);
                let rt = g.sqrt(sq);
                let act = g.silu(rt);
                let kern = Tensor::new(vec![0.4, -0.2, 0.1, 0.3], &[1, 1, 2, 2])
                    .unwrap()
                    .with_requires_grad();
                let kid = g.leaf(&kern);
                let c = g.conv2d(act, kid, 1, 0)?;
                let up_kern = Tensor::new(vec![0.5, 0.25, -0.3, 0.6], &[1, 1, 2, 2])
                    .unwrap()
                    .with_requires_grad();
                let ukid = g.leaf(&up_kern);
                let up = g.conv_transpose2d(c, ukid, 2)?;
                let bias = Tensor::new(vec![0.05], &[1]).unwrap().with_requires_grad();
                let biasid = g.leaf(&bias);
                let biased = g.bias_add(up, biasid)?;
                let cat = g.concat_channels(biased, biased)?;
                let m = g.mean(cat, &[1, 2])?;
                let s = g.sum(m, &[0])?;
                Ok(g.sum_all(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn non_scalar_function_is_a_contract_error() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let res = finite_diff_check(|g, id| g.add(id, id), &x, 1e-5);
        assert!(matches!(res, Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn bad_step_is_a_contract_error() {
        let x = Tensor::new(vec![1.0], &[1]).unwrap();
        assert!(matches!(
            finite_diff_check(|g, id| Ok(g.sum_all(id)), &x, 0.0),
            Err(crate::error::Error::Contract(_))
        ));
    }
}
