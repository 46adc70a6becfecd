//! Central finite-difference verification of the reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, Value};
use crate::autodiff::params::ParameterSet;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-3;

/// Relative errors above this trigger the higher-order re-probe.
const REFINE_THRESHOLD: f64 = 5e-4;
/// Step for the 4th-order stencil; the O(eps^4) truncation lets it run at a
/// larger step where f64 roundoff is negligible.
const REFINE_EPS: f64 = 1e-3;

fn eval_scalar<F>(g: &mut Graph, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Value>,
{
    g.clear();
    let out = build(g)?;
    if g.shape(out) != (1, 1) {
        return Err(Error::invalid("grad_check requires a scalar-valued builder"));
    }
    let v = g.scalar_value(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

fn check_coords<F>(
    params: &ParameterSet,
    build: &F,
    eps: f64,
    mut coords: impl FnMut(usize) -> Vec<usize>,
) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Value>,
{
    // Reverse-mode gradients on the unperturbed point.
    let mut g = Graph::new();
    let out = build(&mut g)?;
    if g.shape(out) != (1, 1) {
        return Err(Error::invalid("grad_check requires a scalar-valued builder"));
    }
    if !g.scalar_value(out).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(out)?;
    let ad_grads: Vec<Tensor> = params
        .iter()
        .map(|p| {
            g.param_grad(p).unwrap_or_else(|| {
                let (r, c) = p.shape();
                Tensor::zeros(r, c)
            })
        })
        .collect();
    drop(g);

    let mut scratch_graph = Graph::new();
    let mut max_rel = 0.0f64;
    for (p, ad) in params.iter().zip(&ad_grads) {
        let n = p.value().numel();
        for i in coords(n) {
            let graph_cell = &mut scratch_graph;
            let mut at = |x: f64| -> Result<f64> {
                let orig = p.value().data()[i];
                p.value_mut().data_mut()[i] = x;
                let f = eval_scalar(graph_cell, build);
                p.value_mut().data_mut()[i] = orig;
                f
            };
            let orig = p.value().data()[i];
            let fd = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
            let ad_v = ad.data()[i];
            let rel_err = |fd: f64| (ad_v - fd).abs() / ad_v.abs().max(fd.abs()).max(1e-8);
            let mut rel = rel_err(fd);
            if rel > REFINE_THRESHOLD {
                // On coordinates whose gradient sits near the denominator
                // floor, the O(eps^2) truncation of the 2-point stencil
                // dominates; re-probe with the 4th-order central stencil
                // before declaring a mismatch.
                let e = REFINE_EPS;
                let fd4 = (8.0 * (at(orig + e)? - at(orig - e)?)
                    - (at(orig + 2.0 * e)? - at(orig - 2.0 * e)?))
                    / (12.0 * e);
                rel = rel_err(fd4);
            }
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Compare reverse-mode gradients against central differences over every
/// coordinate of every parameter. Returns the maximum relative error, with
/// the denominator floored at 1e-8.
///
/// The builder must be deterministic: it is re-invoked for each probe.
pub fn grad_check<F>(params: &ParameterSet, build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Value>,
{
    check_coords(params, &build, eps, |n| (0..n).collect())
}

/// Like [`grad_check`] but probing at most `max_coords` randomly chosen
/// coordinates per parameter. Useful on configurations too large for the
/// exhaustive sweep.
pub fn grad_check_sampled<F>(
    params: &ParameterSet,
    build: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Value>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    check_coords(params, &build, eps, move |n| {
        if n <= max_coords {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(max_coords);
            all
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_near_exact() {
        let mut ps = ParameterSet::new();
        let w = ps
            .create("w", Tensor::row(vec![0.4, -1.1, 2.0, 0.3]))
            .unwrap();
        let err = grad_check(
            &ps,
            |g| {
                let wv = g.param(&w);
                let sq = g.mul(wv, wv)?;
                Ok(g.sum_all(sq))
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let mut ps = ParameterSet::new();
        let w = ps.create("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let _ = g.param(&w);
        let c = g.leaf(Tensor::scalar(5.0));
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        let grad = g.param_grad(&w).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let ps = ParameterSet::new();
        let res = grad_check(
            &ps,
            |g| Ok(g.leaf(Tensor::scalar(f64::INFINITY))),
            DEFAULT_EPS,
        );
        assert!(res.is_err());
    }

    #[test]
    fn product_gradient_matches_other_factor() {
        // d/da sum(a*b) = b
        let mut ps = ParameterSet::new();
        let a = ps.create("a", Tensor::row(vec![0.7, -0.3, 1.2])).unwrap();
        let b_data = vec![2.0, -1.5, 0.25];
        let b = Tensor::row(b_data.clone());
        let err = grad_check(
            &ps,
            move |g| {
                let av = g.param(&a);
                let bv = g.leaf(b.clone());
                let prod = g.mul(av, bv)?;
                Ok(g.sum_all(prod))
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6);
    }
}
