use super::{Graph, Var};
use crate::tensor::Tensor;

/// Largest relative disagreement between reverse-mode gradients of a scalar
/// function and central differences with the given step.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)` with `floor = 1e-3`,
/// so gradients that are both near zero compare absolutely.
pub fn gradient_error<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars);
    assert_eq!(out.value().numel(), 1, "gradient_error needs a scalar function");
    let grads = g.backward(out);
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + step;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x0 - step;
            let down = eval(&xs);
            xs[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}
