//! Finite-difference checks for every differentiable op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Checks d(sum(f(inputs) * r))/d(inputs) against central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).shape()
    };
    let r = Tensor::<f64>::uniform(&probe_shape, -1.0, 1.0, &mut rng);
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).value();
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars);
    let rv = g.constant(r.clone());
    let loss = out.mul(rv).sum();
    let grads = g.backward(loss);
    let h = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
            assert!(err < 1e-5, "input {k} elem {i}: analytic {a} numeric {numeric}");
        }
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

#[test]
fn elementwise_ops() {
    check(vec![rand_t(&[2, 3], 1), rand_t(&[2, 3], 2)], |_, v| v[0].mul(v[1]).add(v[0]).sub(v[1].square()));
    check(vec![rand_t(&[5], 3)], |_, v| v[0].tanh().add(v[0].sigmoid()).add(v[0].exp().scale(0.5)));
    check(vec![rand_t(&[5], 4).map(|x| x.abs() + 0.5)], |_, v| v[0].ln().add_scalar(1.0));
    check(vec![rand_t(&[7], 5).map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |_, v| {
        v[0].relu().add(v[0].leaky_relu(0.2)).add(v[0].abs())
    });
    check(vec![rand_t(&[6], 6).map(|x| x * 0.8)], |_, v| v[0].clamp(-0.5, 0.5));
}

#[test]
fn reductions_and_shapes() {
    check(vec![rand_t(&[3, 2, 2], 7)], |_, v| v[0].mean_rows());
    check(vec![rand_t(&[3, 4], 8)], |_, v| v[0].mean().reshape(&[1]));
    check(vec![rand_t(&[4, 3], 9)], |_, v| v[0].gather_rows(&[3, 0, 3]).reshape(&[9]));
    check(vec![rand_t(&[2, 3], 10), rand_t(&[1, 3], 11)], |_, v| concat_rows(&[v[0], v[1]]));
    check(vec![rand_t(&[2, 3, 2, 2], 12), rand_t(&[2, 1, 2, 2], 13)], |_, v| concat_features(&[v[0], v[1]]));
}

#[test]
fn convolution() {
    for spec in [ConvSpec::new(3, 1, 1), ConvSpec::new(3, 2, 1), ConvSpec::new(4, 2, 1), ConvSpec::new(1, 1, 0)] {
        check(vec![rand_t(&[2, 3, 6, 5], 14), rand_t(&[4, 3, spec.kernel, spec.kernel], 15), rand_t(&[4], 16)], move |_, v| {
            v[0].conv2d(v[1], Some(v[2]), spec)
        });
    }
}

#[test]
fn pooling_and_upsampling() {
    check(vec![rand_t(&[2, 2, 3, 2], 17)], |_, v| v[0].upsample2x());
    check(vec![rand_t(&[2, 3, 4, 2], 18)], |_, v| v[0].global_avg_pool());
    check(vec![rand_t(&[1, 2, 5, 4], 19)], |_, v| v[0].max_pool2d(ConvSpec::new(3, 2, 1)));
}

#[test]
fn dense_and_normalization() {
    check(vec![rand_t(&[4, 3], 20), rand_t(&[2, 3], 21), rand_t(&[2], 22)], |_, v| v[0].linear(v[1], Some(v[2])));
    check(vec![rand_t(&[3, 2, 2, 2], 23), rand_t(&[2], 24), rand_t(&[2], 25)], |_, v| v[0].batch_norm(v[1], v[2], 1e-5).0);
    check(vec![rand_t(&[5, 3], 26), rand_t(&[3], 27), rand_t(&[3], 28)], |_, v| v[0].batch_norm(v[1], v[2], 1e-5).0);
    check(vec![rand_t(&[2, 3, 2, 1], 29), rand_t(&[3], 30), rand_t(&[3], 31)], |_, v| v[0].channel_affine(v[1], v[2]));
    check(vec![rand_t(&[3, 4], 32)], |_, v| v[0].cross_entropy(&[1, 3, 0]).reshape(&[1]));
}

#[test]
fn f32_conv_matches_f64() {
    let x = rand_t(&[2, 3, 5, 4], 40);
    let w = rand_t(&[2, 3, 3, 3], 41);
    let g64 = Graph::new();
    let y64 = g64.constant(x.clone()).conv2d(g64.constant(w.clone()), None, ConvSpec::new(3, 2, 1)).value();
    let g32 = Graph::<f32>::new();
    let y32 = g32.constant(x.cast()).conv2d(g32.constant(w.cast()), None, ConvSpec::new(3, 2, 1)).value();
    assert!(y64.cast::<f32>().max_abs_diff(&y32) < 1e-5);
}
