//! Central finite-difference verification of backward passes.
//!
//! All checks run at `f64`; h = 1e-4. The relative error uses a floored
//! denominator so near-zero gradients are compared absolutely.

use super::{no_grad, Tensor};

fn fd_eval(inputs: &[(Vec<usize>, Vec<f64>)], f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>) -> f64 {
    no_grad(|| {
        let ts: Vec<Tensor<f64>> = inputs
            .iter()
            .map(|(s, d)| Tensor::from_vec(s, d.clone()))
            .collect();
        f(&ts).item()
    })
}

/// Checks every coordinate of every input.
pub fn grad_check(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    tol: f64,
    f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
) {
    grad_check_subset(name, inputs, tol, usize::MAX, f);
}

/// Checks at most `max_coords` evenly spread coordinates per input; the
/// choice is deterministic.
pub fn grad_check_subset(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    tol: f64,
    max_coords: usize,
    f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
) {
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect();
    let y = f(&params);
    assert_eq!(y.len(), 1, "{name}: grad_check target must be scalar");
    let grads = y.backward();
    let h = 1e-4;

    for (pi, (_, data)) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(&params[pi])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; data.len()]);
        let n = data.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|i| i * n / max_coords).collect()
        };
        for j in coords {
            let mut work = inputs.to_vec();
            work[pi].1[j] = data[j] + h;
            let fp = fd_eval(&work, f);
            work[pi].1[j] = data[j] - h;
            let fm = fd_eval(&work, f);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < tol,
                "{name}: input {pi} coord {j}: analytic {a:.9e} vs numeric {numeric:.9e} (rel {rel:.3e}, tol {tol:.1e})"
            );
        }
    }
}
