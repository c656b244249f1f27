//! Shared test harness: central finite-difference gradient checking.
//!
//! The oracle re-runs the caller's forward builder with perturbed leaf data
//! and differences the scalar output; it never touches the reverse pass it
//! is checking.

use pdisco_core::autodiff::{Graph, NodeId};
use pdisco_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Largest relative mismatch between the analytic gradient and central
/// finite differences over every element of every input.
///
/// `build` must construct the same scalar loss from the given leaves each
/// time it is called.
pub fn max_grad_mismatch(
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
    inputs: &[Tensor],
    h: f64,
) -> f64 {
    let forward = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item().expect("scalar loss")
    };

    // Analytic gradients.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.len() {
            let orig = tensor.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = forward(&work);
            work[ti].data_mut()[ei] = orig - h;
            let minus = forward(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Convenience: asserts the mismatch is below `tol`.
pub fn assert_grads_close(
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    what: &str,
) {
    let worst = max_grad_mismatch(build, inputs, h);
    assert!(worst < tol, "{what}: max relative gradient error {worst:.3e} >= {tol:.1e}");
}

/// Uniform random tensor in [lo, hi) from a seeded generator.
pub fn rand_tensor(
    rng: &mut rand_chacha::ChaCha8Rng,
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("tensor shape")
        .with_grad()
}
