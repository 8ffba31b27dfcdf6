//! Finite-difference gradient verification for `f64` graphs.

use ndarray::ArrayD;

use super::{Tape, Tensor};

/// Compares analytic gradients of `f` against central finite differences.
///
/// `f` must build a scalar loss from the given leaf tensors on the provided
/// tape. Returns the worst relative error over all inputs, where the error of
/// one input is `||g_an - g_fd||_2 / max(||g_an||_2, ||g_fd||_2, 1e-12)`.
pub fn max_rel_grad_err<F>(f: F, inputs: &[ArrayD<f64>], h: f64) -> f64
where
    F: Fn(&Tape<f64>, &[Tensor]) -> Tensor,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::<f64>::no_grad();
        let leaves: Vec<Tensor> = arrays.iter().map(|a| tape.leaf(a.clone(), false)).collect();
        let loss = f(&tape, &leaves);
        tape.item(loss)
    };

    let tape = Tape::<f64>::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let loss = f(&tape, &leaves);
    assert_eq!(tape.value(loss).len(), 1, "gradcheck needs a scalar loss");
    let grads = tape.backward(loss);

    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(leaves[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.shape()));
        let mut numeric = ArrayD::<f64>::zeros(input.shape());
        for idx in 0..input.len() {
            let orig = work[i].as_slice().unwrap()[idx];
            work[i].as_slice_mut().unwrap()[idx] = orig + h;
            let up = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig - h;
            let down = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig;
            numeric.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
        }
        let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let na = analytic.mapv(|v| v * v).sum().sqrt();
        let nn = numeric.mapv(|v| v * v).sum().sqrt();
        let rel = diff / na.max(nn).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}
