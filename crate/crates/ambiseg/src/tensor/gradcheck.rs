//! Central finite-difference oracle for verifying analytic gradients.
//!
//! This module is test support: it never feeds the training path, it only
//! checks it. The oracle rebuilds the computation from perturbed leaf values,
//! so it stays independent of the recorded backward graph.

use super::{elem, Element, Tensor};

/// Step used by the finite-difference probes.
pub const FD_STEP: f64 = 1e-3;

/// Central-difference gradient of `build` with respect to every element of
/// every tensor in `params`.
///
/// Uses the five-point stencil so the truncation error is O(h^4); the plain
/// two-point rule at h = 1e-3 leaves ~1e-5 of truncation noise wherever a
/// gradient element passes near zero, which would mask real mismatches.
pub fn numeric_gradients<T, F>(params: &[Tensor<T>], build: &F) -> Vec<Vec<f64>>
where
    T: Element,
    F: Fn(&[Tensor<T>]) -> Tensor<T>,
{
    let eval = |tensors: &[Tensor<T>]| -> f64 {
        build(tensors).item().to_f64().expect("finite loss")
    };
    let mut grads = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut grad = vec![0.0f64; p.numel()];
        for i in 0..p.numel() {
            let perturbed = |delta: f64| -> Vec<Tensor<T>> {
                params
                    .iter()
                    .enumerate()
                    .map(|(qi, q)| {
                        if qi == pi {
                            let mut data = q.data().to_vec();
                            data[i] = data[i] + elem::<T>(delta);
                            Tensor::param(q.shape(), data).expect("same shape")
                        } else {
                            q.clone()
                        }
                    })
                    .collect()
            };
            let h = FD_STEP;
            let f_p2 = eval(&perturbed(2.0 * h));
            let f_p1 = eval(&perturbed(h));
            let f_m1 = eval(&perturbed(-h));
            let f_m2 = eval(&perturbed(-2.0 * h));
            grad[i] = (-f_p2 + 8.0 * f_p1 - 8.0 * f_m1 + f_m2) / (12.0 * h);
        }
        grads.push(grad);
    }
    grads
}

/// Largest mismatch between analytic and finite-difference gradients,
/// measured as |a - n| / max(|a|, |n|, 1e-6).
pub fn max_relative_error<T, F>(params: &[Tensor<T>], build: F) -> f64
where
    T: Element,
    F: Fn(&[Tensor<T>]) -> Tensor<T>,
{
    let loss = build(params);
    loss.backward().expect("scalar loss");
    let numeric = numeric_gradients(params, &build);
    let mut worst = 0.0f64;
    for (p, num) in params.iter().zip(&numeric) {
        let analytic = p
            .grad()
            .expect("parameter reachable from the checked loss");
        for (a, n) in analytic.iter().zip(num) {
            let a = a.to_f64().unwrap();
            let denom = a.abs().max(n.abs()).max(1e-6);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}

/// Assert the analytic gradient of `build` matches finite differences.
pub fn check_gradients<T, F>(params: &[Tensor<T>], build: F, rel_tol: f64)
where
    T: Element,
    F: Fn(&[Tensor<T>]) -> Tensor<T>,
{
    let worst = max_relative_error(params, build);
    assert!(
        worst < rel_tol,
        "gradient mismatch: max relative error {worst:.3e} exceeds {rel_tol:.1e}"
    );
}
