//! Spatial operations on NCHW batches.

use std::sync::Arc;

use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Upper bound on im2col buffer elements; larger batches are processed in chunks.
const COL_BUDGET: usize = 1 << 21;

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn ckk(&self) -> usize {
        self.c * self.spec.kernel * self.spec.kernel
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn chunk(&self, n: usize) -> usize {
        (COL_BUDGET / (self.ckk() * self.hw_out()).max(1)).clamp(1, n.max(1))
    }
}

/// cols[(c,ki,kj), (b,oy,ox)] for images `b0..b0+nb`.
fn im2col<S: Scalar>(x: &[S], b0: usize, nb: usize, g: &Geometry, cols: &mut Vec<S>) {
    let k = g.spec.kernel;
    let hwo = g.hw_out();
    let width = nb * hwo;
    cols.clear();
    cols.resize(g.ckk() * width, S::zero());
    let img = g.c * g.h * g.w;
    for c in 0..g.c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * width..(row + 1) * width];
                for b in 0..nb {
                    let src = &x[(b0 + b) * img + c * g.h * g.w..];
                    for oy in 0..g.ho {
                        let iy = (oy * g.spec.stride + ki) as isize - g.spec.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..];
                        let drow = &mut dst[b * hwo + oy * g.wo..b * hwo + (oy + 1) * g.wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.spec.stride + kj) as isize - g.spec.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], b0: usize, nb: usize, g: &Geometry, dx: &mut [S]) {
    let k = g.spec.kernel;
    let hwo = g.hw_out();
    let width = nb * hwo;
    let img = g.c * g.h * g.w;
    for c in 0..g.c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * width..(row + 1) * width];
                for b in 0..nb {
                    let dst = &mut dx[(b0 + b) * img + c * g.h * g.w..];
                    for oy in 0..g.ho {
                        let iy = (oy * g.spec.stride + ki) as isize - g.spec.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[b * hwo + oy * g.wo..b * hwo + (oy + 1) * g.wo];
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * g.spec.stride + kj) as isize - g.spec.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    /// 2-D convolution. `weight` is `(O, C, k, k)`, `bias` is `(O)`.
    pub fn conv2d(self, weight: Var<'g, S>, bias: Option<Var<'g, S>>, spec: ConvSpec) -> Var<'g, S> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], spec.kernel);
        let (n, o) = (xs[0], ws[0]);
        let (ho, wo) = spec.output_size(xs[2], xs[3]);
        let geo = Geometry { c: xs[1], h: xs[2], w: xs[3], ho, wo, spec };
        let hwo = geo.hw_out();
        let ckk = geo.ckk();
        let chunk = geo.chunk(n);

        let mut out = vec![S::zero(); n * o * hwo];
        let mut cols = Vec::new();
        let mut mat = Vec::new();
        let mut b0 = 0;
        while b0 < n {
            let nb = chunk.min(n - b0);
            im2col(x.data(), b0, nb, &geo, &mut cols);
            let width = nb * hwo;
            mat.clear();
            mat.resize(o * width, S::zero());
            S::gemm(o, ckk, width, S::one(), w.data(), (ckk as isize, 1), &cols, (width as isize, 1), S::zero(), &mut mat, (width as isize, 1));
            for b in 0..nb {
                for oc in 0..o {
                    let dst = &mut out[((b0 + b) * o + oc) * hwo..((b0 + b) * o + oc + 1) * hwo];
                    dst.copy_from_slice(&mat[oc * width + b * hwo..oc * width + (b + 1) * hwo]);
                }
            }
            b0 += nb;
        }
        if let Some(bias) = &bias {
            let bv = bias.value();
            for (i, chunk) in out.chunks_mut(hwo).enumerate() {
                let bo = bv.data()[i % o];
                for v in chunk {
                    *v += bo;
                }
            }
        }
        let out = Tensor::from_vec(&[n, o, ho, wo], out).unwrap();
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let x_shape = xs.to_vec();
        let w_shape = ws.to_vec();
        self.graph.record(
            out,
            &parents,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dx = needs[0].then(|| vec![S::zero(); x.numel()]);
                let mut dw = needs[1].then(|| vec![S::zero(); w.numel()]);
                let mut cols = Vec::new();
                let mut dmat = Vec::new();
                let mut dcols = Vec::new();
                let mut b0 = 0;
                while b0 < n {
                    let nb = chunk.min(n - b0);
                    let width = nb * hwo;
                    dmat.clear();
                    dmat.resize(o * width, S::zero());
                    for b in 0..nb {
                        for oc in 0..o {
                            dmat[oc * width + b * hwo..oc * width + (b + 1) * hwo]
                                .copy_from_slice(&gd[((b0 + b) * o + oc) * hwo..((b0 + b) * o + oc + 1) * hwo]);
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        im2col(x.data(), b0, nb, &geo, &mut cols);
                        // dW (O x Ckk) += dM (O x width) * cols^T (width x Ckk)
                        S::gemm(o, width, ckk, S::one(), &dmat, (width as isize, 1), &cols, (1, width as isize), S::one(), dw, (ckk as isize, 1));
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.clear();
                        dcols.resize(ckk * width, S::zero());
                        // dcols (Ckk x width) = W^T (Ckk x O) * dM (O x width)
                        S::gemm(ckk, o, width, S::one(), w.data(), (1, ckk as isize), &dmat, (width as isize, 1), S::zero(), &mut dcols, (width as isize, 1));
                        col2im(&dcols, b0, nb, &geo, dx);
                    }
                    b0 += nb;
                }
                let mut res = vec![
                    dx.map(|d| Tensor::from_vec(&x_shape, d).unwrap()),
                    dw.map(|d| Tensor::from_vec(&w_shape, d).unwrap()),
                ];
                if needs.len() > 2 {
                    res.push(needs[2].then(|| {
                        let mut db = vec![S::zero(); o];
                        for (i, chunk) in gd.chunks(hwo).enumerate() {
                            db[i % o] += chunk.iter().copied().sum::<S>();
                        }
                        Tensor::from_vec(&[o], db).unwrap()
                    }));
                }
                res
            }),
        )
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2x(self) -> Var<'g, S> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![S::zero(); nc * 4 * h * w];
        for p in 0..nc {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out).unwrap();
        self.graph.record(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![S::zero(); nc * h * w];
                for p in 0..nc {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&s, dx).unwrap())]
            }),
        )
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(self) -> Var<'g, S> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = S::one() / S::from_usize(hw).unwrap();
        let data = x.data().chunks(hw).map(|ch| ch.iter().copied().sum::<S>() * inv).collect();
        self.graph.record(
            Tensor::from_vec(&[n, c], data).unwrap(),
            &[self],
            Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for &gi in g.data() {
                    dx.extend(std::iter::repeat(gi * inv).take(hw));
                }
                vec![Some(Tensor::from_vec(&s, dx).unwrap())]
            }),
        )
    }

    /// Max pooling with padding treated as `-inf`.
    pub fn max_pool2d(self, spec: ConvSpec) -> Var<'g, S> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = spec.output_size(h, w);
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut arg = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = S::neg_infinity();
                    let mut best_i = 0;
                    for ki in 0..spec.kernel {
                        let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..spec.kernel {
                            let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(p * h * w + best_i);
                }
            }
        }
        let arg = Arc::new(arg);
        self.graph.record(
            Tensor::from_vec(&[s[0], s[1], ho, wo], out).unwrap(),
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![S::zero(); nc * h * w];
                for (&i, &gi) in arg.iter().zip(g.data()) {
                    dx[i] += gi;
                }
                vec![Some(Tensor::from_vec(&s, dx).unwrap())]
            }),
        )
    }
}
