//! Dense layers, normalization and classification ops.

use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel statistics of one batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance, as accumulated into running statistics.
    pub var_unbiased: Vec<S>,
}

/// Splits a shape into (batch, channels, inner) for channel-wise ops on
/// `(N, C)` or `(N, C, H, W)` tensors.
fn ncl(shape: &[usize]) -> (usize, usize, usize) {
    let inner = shape[2..].iter().product::<usize>();
    (shape[0], shape[1], inner)
}

impl<'g, S: Scalar> Var<'g, S> {
    /// `x W^T + b` with `x: (N, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(self, weight: Var<'g, S>, bias: Option<Var<'g, S>>) -> Var<'g, S> {
        let x = self.value();
        let w = weight.value();
        let (n, din) = (x.dim(0), x.dim(1));
        let dout = w.dim(0);
        assert_eq!(w.dim(1), din, "linear: input width mismatch");
        let mut y = vec![S::zero(); n * dout];
        S::gemm(n, din, dout, S::one(), x.data(), (din as isize, 1), w.data(), (1, din as isize), S::zero(), &mut y, (dout as isize, 1));
        if let Some(b) = &bias {
            let bv = b.value();
            for row in y.chunks_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.graph.record(
            Tensor::from_vec(&[n, dout], y).unwrap(),
            &parents,
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); n * din];
                    S::gemm(n, dout, din, S::one(), gd, (dout as isize, 1), w.data(), (din as isize, 1), S::zero(), &mut dx, (din as isize, 1));
                    Tensor::from_vec(&[n, din], dx).unwrap()
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![S::zero(); dout * din];
                    S::gemm(dout, n, din, S::one(), gd, (1, dout as isize), x.data(), (din as isize, 1), S::zero(), &mut dw, (din as isize, 1));
                    Tensor::from_vec(&[dout, din], dw).unwrap()
                });
                let mut out = vec![dx, dw];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| {
                        let mut db = vec![S::zero(); dout];
                        for row in gd.chunks(dout) {
                            for (a, &b) in db.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        Tensor::from_vec(&[dout], db).unwrap()
                    }));
                }
                out
            }),
        )
    }

    /// Batch normalization using the statistics of this batch.
    ///
    /// Normalizes over every axis except axis 1. Returns the output together
    /// with the batch statistics so the owning layer can track running values.
    pub fn batch_norm(self, gamma: Var<'g, S>, beta: Var<'g, S>, eps: S) -> (Var<'g, S>, BatchStats<S>) {
        let x = self.value();
        let (n, c, l) = ncl(x.shape());
        let m = n * l;
        assert!(m > 1, "batch_norm needs more than one value per channel");
        let mf = S::from_usize(m).unwrap();
        let gv = gamma.value();
        let bv = beta.value();
        let xd = x.data();
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                mean[ch] += xd[(b * c + ch) * l..(b * c + ch + 1) * l].iter().copied().sum::<S>();
            }
        }
        for v in &mut mean {
            *v /= mf;
        }
        for b in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                var[ch] += xd[(b * c + ch) * l..(b * c + ch + 1) * l].iter().map(|&v| (v - mu) * (v - mu)).sum::<S>();
            }
        }
        let var_unbiased: Vec<S> = var.iter().map(|&v| v / S::from_usize(m - 1).unwrap()).collect();
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v / mf + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); x.numel()];
        let mut y = vec![S::zero(); x.numel()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * l..(b * c + ch + 1) * l;
                for i in r {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = h * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let out = self.graph.record(
            Tensor::from_vec(&shape, y).unwrap(),
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut sum_dy = vec![S::zero(); c];
                let mut sum_dy_xhat = vec![S::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                            sum_dy[ch] += gd[i];
                            sum_dy_xhat[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); n * c * l];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gv.data()[ch] * inv_std[ch] / mf;
                            for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                                dx[i] = k * (mf * gd[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                    Tensor::from_vec(&shape, dx).unwrap()
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(&[c], sum_dy_xhat.clone()).unwrap()),
                    needs[2].then(|| Tensor::from_vec(&[c], sum_dy.clone()).unwrap()),
                ]
            }),
        );
        (out, BatchStats { mean, var_unbiased })
    }

    /// `y[n, c, ...] = x[n, c, ...] * scale[c] + shift[c]`.
    pub fn channel_affine(self, scale: Var<'g, S>, shift: Var<'g, S>) -> Var<'g, S> {
        let x = self.value();
        let (n, c, l) = ncl(x.shape());
        let sv = scale.value();
        let tv = shift.value();
        assert_eq!(sv.numel(), c);
        assert_eq!(tv.numel(), c);
        let mut y = vec![S::zero(); x.numel()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                    y[i] = x.data()[i] * sv.data()[ch] + tv.data()[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        self.graph.record(
            Tensor::from_vec(&shape, y).unwrap(),
            &[self, scale, shift],
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![S::zero(); n * c * l];
                    for b in 0..n {
                        for ch in 0..c {
                            for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                                dx[i] = gd[i] * sv.data()[ch];
                            }
                        }
                    }
                    Tensor::from_vec(&shape, dx).unwrap()
                });
                let mut ds = vec![S::zero(); c];
                let mut dt = vec![S::zero(); c];
                if needs[1] || needs[2] {
                    for b in 0..n {
                        for ch in 0..c {
                            for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                                ds[ch] += gd[i] * x.data()[i];
                                dt[ch] += gd[i];
                            }
                        }
                    }
                }
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(&[c], ds).unwrap()),
                    needs[2].then(|| Tensor::from_vec(&[c], dt).unwrap()),
                ]
            }),
        )
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class indices.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g, S> {
        let x = self.value();
        let (n, k) = (x.dim(0), x.dim(1));
        assert_eq!(labels.len(), n);
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        for (i, row) in x.data().chunks(k).enumerate() {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[i]];
        }
        let nf = S::from_usize(n).unwrap();
        let labels = labels.to_vec();
        self.graph.record(
            Tensor::scalar(loss / nf),
            &[self],
            Box::new(move |g, _| {
                let s = g.item() / nf;
                let mut d = probs.clone();
                for (i, &lab) in labels.iter().enumerate() {
                    d[i * k + lab] -= S::one();
                }
                for v in &mut d {
                    *v *= s;
                }
                vec![Some(Tensor::from_vec(&[n, k], d).unwrap())]
            }),
        )
    }
}
