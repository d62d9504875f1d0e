//! Finite-difference validation of the backward pass.
//!
//! Every analytic gradient in this crate is cross-checked against central
//! differences at `f64`. The harness compares reverse-mode gradients with
//! `(f(x+ε) - f(x-ε)) / 2ε` coordinate by coordinate and reports the worst
//! relative error, using `max(|analytic|, |numeric|, 0.1)` as denominator so
//! near-zero gradients are judged on absolute error.

use super::graph::{Graph, NodeId};
use super::store::VarStore;
use super::tensor::Tensor;
use crate::rng::StreamRng;

/// Step size for central differences.
pub const FD_EPS: f64 = 1e-3;
/// Relative-error tolerance for accepting a gradient.
pub const FD_TOL: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(0.1)
}

/// Random probe weights with magnitudes bounded away from zero so every
/// output component contributes to the scalarised loss.
fn probe_weights(n: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.uniform_in(0.25, 1.0);
            if rng.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

/// Checks gradients of `build` (an arbitrary-output graph function) with
/// respect to every coordinate of every input. The output is scalarised by
/// a fixed random weighting. Returns the maximum relative error, or a
/// message describing the first coordinate that exceeded [`FD_TOL`].
pub fn fd_check_inputs(
    name: &str,
    inputs: &[Tensor<f64>],
    rng: &mut StreamRng,
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> Result<f64, String> {
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
    let out = build(&mut g, &ids);
    let w = probe_weights(g.value(out).numel(), rng);
    let wn = g.input(Tensor::new(g.value(out).dims().to_vec(), w.clone()));
    let prod = g.mul(out, wn);
    let loss = g.sum(prod);
    let grads = g.backward(loss);

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids);
        g.value(out)
            .data()
            .iter()
            .zip(&w)
            .map(|(&o, &wv)| o * wv)
            .sum()
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for k in 0..inputs.len() {
        let analytic = grads
            .wrt(ids[k])
            .unwrap_or_else(|| panic!("{name}: no gradient reached input {k}"))
            .clone();
        for j in 0..work[k].numel() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + FD_EPS;
            let up = eval(&work);
            work[k].data_mut()[j] = orig - FD_EPS;
            let down = eval(&work);
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic.data()[j];
            let e = rel_err(a, numeric);
            if e > FD_TOL {
                return Err(format!(
                    "{name}: input {k} coord {j}: analytic {a:.8e} vs numeric {numeric:.8e} (rel err {e:.3e})"
                ));
            }
            max_err = max_err.max(e);
        }
    }
    Ok(max_err)
}

/// Checks gradients of a scalar loss with respect to every stored
/// parameter. `build` must be deterministic across calls (derive any
/// randomness from a fresh fixed-seed stream inside the closure).
pub fn fd_check_params(
    name: &str,
    store: &mut VarStore<f64>,
    build: impl Fn(&mut Graph<f64>, &VarStore<f64>) -> NodeId,
) -> Result<f64, String> {
    fd_check_params_with(name, store, FD_EPS, FD_TOL, build)
}

/// [`fd_check_params`] with a caller-chosen step size and tolerance. Deeply
/// composed losses have large higher derivatives, so the default step's
/// truncation error can exceed the tolerance even when the analytic gradient
/// is exact; such callers pass a smaller `eps`.
pub fn fd_check_params_with(
    name: &str,
    store: &mut VarStore<f64>,
    eps: f64,
    tol: f64,
    build: impl Fn(&mut Graph<f64>, &VarStore<f64>) -> NodeId,
) -> Result<f64, String> {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    assert_eq!(
        g.value(loss).numel(),
        1,
        "{name}: parameter check needs a scalar loss"
    );
    let grads = g.backward(loss);
    let param_grads = g.param_grads(&grads, store);

    let eval = |store: &VarStore<f64>| -> f64 {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        g.value(loss).item()
    };

    let n_vars = store.len();
    let mut max_err = 0.0f64;
    for i in 0..n_vars {
        let id = super::store::VarId(i);
        let pname = store.name(id).to_string();
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(store);
            store.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = param_grads[i].data()[j];
            let e = rel_err(a, numeric);
            if e > tol {
                return Err(format!(
                    "{name}: param `{pname}` coord {j}: analytic {a:.8e} vs numeric {numeric:.8e} (rel err {e:.3e})"
                ));
            }
            max_err = max_err.max(e);
        }
    }
    Ok(max_err)
}
