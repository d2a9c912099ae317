//! Differentiable operations on [`Var`].
//!
//! Image tensors are NCHW. Every backward closure below returns one entry per
//! parent, in the order the parents were passed to `Graph::op`.

use std::rc::Rc;

use crate::graph::Var;
use crate::tensor::{gemm, Tensor};

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = (self.w + self.pad - kx).div_ceil(self.stride).min(self.wo);
        lo.min(hi)..hi
    }

    fn valid_rows(&self, ky: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(ky).div_ceil(self.stride);
        let hi = (self.h + self.pad - ky).div_ceil(self.stride).min(self.ho);
        lo.min(hi)..hi
    }
}

/// Column matrix `[Ci*k*k, Ho*Wo]` of one sample. Padding positions of
/// `cols` are never written, so a zeroed buffer can be reused across samples.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.plane_out();
    for ci in 0..g.ci {
        let src = &x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            let ys = g.valid_rows(ky);
            for kx in 0..g.k {
                let xs = g.valid_cols(kx);
                let r = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * p..][..p];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &src[iy * g.w..][..g.w];
                    let dst_row = &mut dst[oy * g.wo..][..g.wo];
                    if g.stride == 1 {
                        let x0 = xs.start + kx - g.pad;
                        dst_row[xs.clone()].copy_from_slice(&src_row[x0..x0 + xs.len()]);
                    } else {
                        for ox in xs.clone() {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into one sample's `dx`.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.plane_out();
    for ci in 0..g.ci {
        let dst = &mut dx[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            let ys = g.valid_rows(ky);
            for kx in 0..g.k {
                let xs = g.valid_cols(kx);
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &cols[r * p..][..p];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut dst[iy * g.w..][..g.w];
                    let src_row = &src[oy * g.wo..][..g.wo];
                    if g.stride == 1 {
                        let x0 = xs.start + kx - g.pad;
                        for (d, s) in dst_row[x0..x0 + xs.len()].iter_mut().zip(&src_row[xs.clone()]) {
                            *d += s;
                        }
                    } else {
                        for ox in xs.clone() {
                            dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Strided index set `start, start+stride, ...` of `count` elements.
#[derive(Clone, Copy)]
struct IndexSet {
    start: usize,
    stride: usize,
    count: usize,
}

impl IndexSet {
    fn iter(self) -> impl Iterator<Item = usize> {
        (0..self.count).map(move |i| self.start + i * self.stride)
    }
}

/// Normalizes `x` over each index set, returning `(xhat, inv_std)` with
/// biased variance.
fn normalize_groups(x: &[f64], sets: &[IndexSet], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(sets.len());
    for &set in sets {
        let n = set.count as f64;
        if set.stride == 1 {
            let xs = &x[set.start..][..set.count];
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (h, v) in xhat[set.start..][..set.count].iter_mut().zip(xs) {
                *h = (v - mean) * is;
            }
            inv.push(is);
            continue;
        }
        let mean = set.iter().map(|i| x[i]).sum::<f64>() / n;
        let var = set.iter().map(|i| (x[i] - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        for i in set.iter() {
            xhat[i] = (x[i] - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

fn normalize_backward(dxhat: &[f64], xhat: &[f64], sets: &[IndexSet], inv: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    for (&set, &is) in sets.iter().zip(inv) {
        let n = set.count as f64;
        if set.stride == 1 {
            let r = set.start..set.start + set.count;
            let (dh, xh) = (&dxhat[r.clone()], &xhat[r.clone()]);
            let m1 = dh.iter().sum::<f64>() / n;
            let m2 = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
            for ((d, &a), &b) in dx[r].iter_mut().zip(dh).zip(xh) {
                *d = is * (a - m1 - b * m2);
            }
            continue;
        }
        let m1 = set.iter().map(|i| dxhat[i]).sum::<f64>() / n;
        let m2 = set.iter().map(|i| dxhat[i] * xhat[i]).sum::<f64>() / n;
        for i in set.iter() {
            dx[i] = is * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    dx
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let mut out = (*a).clone();
        out.add_assign(&b);
        self.graph.op(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape(), data).expect("mul shape");
        self.graph.op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let times = |t: &Tensor| {
                    let d = g.data().iter().zip(t.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.shape(), d).expect("mul grad")
                };
                vec![needs[0].then(|| times(&b)), needs[1].then(|| times(&a))]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape).expect("reshape element count");
        self.graph.op(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old).expect("reshape back"))]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.add(other.scale(-1.0))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().scale(s);
        self.graph
            .op(out, &[self], Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|v| v.max(0.0));
        let mask = out.clone();
        self.graph.op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut d = g.clone();
                for (dv, &m) in d.data_mut().iter_mut().zip(mask.data()) {
                    if m <= 0.0 {
                        *dv = 0.0;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.op(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// 2-D convolution; `weight` is `[Co, Ci, k, k]`, `bias` is `[Co]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (b, ci, h, wd) = x.dims4();
        let (co, wci, k, k2) = w.dims4();
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
        assert_eq!(k, k2);
        let geom = Rc::new(ConvGeom {
            ci,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: conv_out(h, k, stride, pad),
            wo: conv_out(wd, k, stride, pad),
        });
        let (rows, p) = (geom.rows(), geom.plane_out());
        let in_len = ci * h * wd;
        let bias_v = bias.value();
        let mut out = vec![0.0; b * co * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * p] };
        for (bi, out_b) in out.chunks_mut(co * p).enumerate() {
            let xb = &x.data()[bi * in_len..][..in_len];
            let colm: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            for (row, &bv) in out_b.chunks_mut(p).zip(bias_v.data()) {
                row.fill(bv);
            }
            gemm(
                co, rows, p, 1.0, w.data(), rows as isize, 1, colm, p as isize, 1, 1.0, out_b,
                p as isize, 1,
            );
        }
        drop(cols);
        let out = Tensor::new(&[b, co, geom.ho, geom.wo], out).expect("conv output shape");
        self.graph.op(
            out,
            &[self, weight, bias],
            Box::new(move |g, needs| {
                let gd = g.data();
                let buf_len = if geom.is_pointwise() { 0 } else { rows * p };
                let mut cols = vec![0.0; if needs[1] { buf_len } else { 0 }];
                let mut dcols = vec![0.0; if needs[0] { buf_len } else { 0 }];
                let mut dx = needs[0].then(|| vec![0.0; b * in_len]);
                let mut dw = needs[1].then(|| vec![0.0; co * rows]);
                for bi in 0..b {
                    let gb = &gd[bi * co * p..][..co * p];
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[bi * in_len..][..in_len];
                        if geom.is_pointwise() {
                            gemm(
                                rows, co, p, 1.0, w.data(), 1, rows as isize, gb, p as isize, 1,
                                0.0, dxb, p as isize, 1,
                            );
                        } else {
                            gemm(
                                rows, co, p, 1.0, w.data(), 1, rows as isize, gb, p as isize, 1,
                                0.0, &mut dcols, p as isize, 1,
                            );
                            col2im(&dcols, &geom, dxb);
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xb = &x.data()[bi * in_len..][..in_len];
                        let colm: &[f64] = if geom.is_pointwise() {
                            xb
                        } else {
                            im2col(xb, &geom, &mut cols);
                            &cols
                        };
                        gemm(
                            co, p, rows, 1.0, gb, p as isize, 1, colm, 1, p as isize, 1.0, dw,
                            rows as isize, 1,
                        );
                    }
                }
                let db = needs[2].then(|| {
                    let mut sums = vec![0.0; co];
                    for (i, row) in gd.chunks(p).enumerate() {
                        sums[i % co] += row.iter().sum::<f64>();
                    }
                    Tensor::new(&[co], sums).expect("conv db shape")
                });
                vec![
                    dx.map(|d| Tensor::new(&[b, geom.ci, geom.h, geom.w], d).expect("conv dx shape")),
                    dw.map(|d| Tensor::new(&[co, geom.ci, geom.k, geom.k], d).expect("conv dw shape")),
                    db,
                ]
            }),
        )
    }

    /// Group normalization over `(C/groups, H, W)` per sample, with per-channel affine.
    pub fn group_norm(self, gamma: Var<'g>, beta: Var<'g>, groups: usize, eps: f64) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert!(c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        let per = c / groups;
        let plane = h * w;
        let sets: Vec<IndexSet> = (0..b * groups)
            .map(|i| IndexSet {
                start: i * per * plane,
                stride: 1,
                count: per * plane,
            })
            .collect();
        let (xhat, inv) = normalize_groups(x.data(), &sets, eps);
        let (gv, bv) = (gamma.value(), beta.value());
        let mut out = xhat.clone();
        for (i, row) in out.chunks_mut(plane).enumerate() {
            let (ga, be) = (gv.data()[i % c], bv.data()[i % c]);
            row.iter_mut().for_each(|v| *v = *v * ga + be);
        }
        let out = Tensor::new(&[b, c, h, w], out).expect("group_norm shape");
        self.graph.op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; gd.len()];
                for (i, ((g_row, x_row), d_row)) in gd
                    .chunks(plane)
                    .zip(xhat.chunks(plane))
                    .zip(dxhat.chunks_mut(plane))
                    .enumerate()
                {
                    let ch = i % c;
                    let ga = gv.data()[ch];
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for ((&gi, &xi), d) in g_row.iter().zip(x_row).zip(d_row.iter_mut()) {
                        sgx += gi * xi;
                        sg += gi;
                        *d = gi * ga;
                    }
                    dgamma[ch] += sgx;
                    dbeta[ch] += sg;
                }
                let dx = needs[0].then(|| {
                    Tensor::new(&[b, c, h, w], normalize_backward(&dxhat, &xhat, &sets, &inv))
                        .expect("group_norm dx")
                });
                vec![
                    dx,
                    Some(Tensor::new(&[c], dgamma).expect("dgamma")),
                    Some(Tensor::new(&[c], dbeta).expect("dbeta")),
                ]
            }),
        )
    }

    /// Batch normalization of `[B, F]` features using the batch's own statistics.
    pub fn batch_norm_train(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let (b, f) = x.dims2();
        let sets: Vec<IndexSet> = (0..f)
            .map(|j| IndexSet {
                start: j,
                stride: f,
                count: b,
            })
            .collect();
        let (xhat, inv) = normalize_groups(x.data(), &sets, eps);
        self.affine_features(xhat, Some((sets, inv)), gamma, beta)
    }

    /// Batch normalization of `[B, F]` features with fixed statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var<'g> {
        let x = self.value();
        let (_, f) = x.dims2();
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % f]) * inv[i % f])
            .collect();
        self.affine_features_fixed(xhat, inv, gamma, beta)
    }

    fn affine_features(
        self,
        xhat: Vec<f64>,
        norm: Option<(Vec<IndexSet>, Vec<f64>)>,
        gamma: Var<'g>,
        beta: Var<'g>,
    ) -> Var<'g> {
        let shape = self.shape();
        let f = shape[1];
        let (gv, bv) = (gamma.value(), beta.value());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv.data()[i % f] + bv.data()[i % f])
            .collect();
        let out = Tensor::new(&shape, out).expect("bn shape");
        self.graph.op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut dxhat = vec![0.0; gd.len()];
                for (i, &gi) in gd.iter().enumerate() {
                    dgamma[i % f] += gi * xhat[i];
                    dbeta[i % f] += gi;
                    dxhat[i] = gi * gv.data()[i % f];
                }
                let dx = needs[0].then(|| {
                    let (sets, inv) = norm.as_ref().expect("train-mode statistics");
                    Tensor::new(&shape, normalize_backward(&dxhat, &xhat, sets, inv))
                        .expect("bn dx")
                });
                vec![
                    dx,
                    Some(Tensor::new(&[f], dgamma).expect("dgamma")),
                    Some(Tensor::new(&[f], dbeta).expect("dbeta")),
                ]
            }),
        )
    }

    fn affine_features_fixed(
        self,
        xhat: Vec<f64>,
        inv: Vec<f64>,
        gamma: Var<'g>,
        beta: Var<'g>,
    ) -> Var<'g> {
        let shape = self.shape();
        let f = shape[1];
        let (gv, bv) = (gamma.value(), beta.value());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv.data()[i % f] + bv.data()[i % f])
            .collect();
        let out = Tensor::new(&shape, out).expect("bn shape");
        self.graph.op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut dx = vec![0.0; gd.len()];
                for (i, &gi) in gd.iter().enumerate() {
                    dgamma[i % f] += gi * xhat[i];
                    dbeta[i % f] += gi;
                    dx[i] = gi * gv.data()[i % f] * inv[i % f];
                }
                vec![
                    Some(Tensor::new(&shape, dx).expect("bn dx")),
                    Some(Tensor::new(&[f], dgamma).expect("dgamma")),
                    Some(Tensor::new(&[f], dbeta).expect("dbeta")),
                ]
            }),
        )
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(self) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        let xd = x.data();
        for bc in 0..b * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = bc * h * w;
                    let cands = [
                        base + 2 * oy * w + 2 * ox,
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    let o = bc * ho * wo + oy * wo + ox;
                    out[o] = xd[best];
                    arg[o] = best;
                }
            }
        }
        let n_in = x.numel();
        let shape_in = [b, c, h, w];
        self.graph.op(
            Tensor::new(&[b, c, ho, wo], out).expect("pool shape"),
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n_in];
                for (o, &gv) in g.data().iter().enumerate() {
                    dx[arg[o]] += gv;
                }
                vec![Some(Tensor::new(&shape_in, dx).expect("pool dx"))]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(self) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![0.0; b * c * ho * wo];
        for bc in 0..b * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[bc * ho * wo + oy * wo + ox] = xd[bc * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        self.graph.op(
            Tensor::new(&[b, c, ho, wo], out).expect("upsample shape"),
            &[self],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; b * c * h * w];
                for bc in 0..b * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dx[bc * h * w + (oy / 2) * w + ox / 2] += gd[bc * ho * wo + oy * wo + ox];
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], dx).expect("upsample dx"))]
            }),
        )
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(self, other: Var<'g>) -> Var<'g> {
        let (a, o) = (self.value(), other.value());
        let (b, ca, h, w) = a.dims4();
        let (b2, cb, h2, w2) = o.dims4();
        assert_eq!((b, h, w), (b2, h2, w2), "concat_channels shape mismatch");
        let plane = h * w;
        let mut out = Vec::with_capacity(b * (ca + cb) * plane);
        for bi in 0..b {
            out.extend_from_slice(&a.data()[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&o.data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        self.graph.op(
            Tensor::new(&[b, ca + cb, h, w], out).expect("concat shape"),
            &[self, other],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut da = Vec::with_capacity(b * ca * plane);
                let mut db = Vec::with_capacity(b * cb * plane);
                for bi in 0..b {
                    let base = bi * (ca + cb) * plane;
                    da.extend_from_slice(&gd[base..base + ca * plane]);
                    db.extend_from_slice(&gd[base + ca * plane..base + (ca + cb) * plane]);
                }
                vec![
                    Some(Tensor::new(&[b, ca, h, w], da).expect("concat da")),
                    Some(Tensor::new(&[b, cb, h, w], db).expect("concat db")),
                ]
            }),
        )
    }

    /// Mean over spatial dims: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(self) -> Var<'g> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let plane = h * w;
        let out: Vec<f64> = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        self.graph.op(
            Tensor::new(&[b, c], out).expect("gap shape"),
            &[self],
            Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(b * c * plane);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                vec![Some(Tensor::new(&[b, c, h, w], dx).expect("gap dx"))]
            }),
        )
    }

    /// Affine map `x·Wᵀ + b` for `x: [B, F]`, `W: [O, F]`, `b: [O]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let (b, f) = x.dims2();
        let (o, wf) = w.dims2();
        assert_eq!(f, wf, "linear: input has {f} features, weight expects {wf}");
        let mut out = vec![0.0; b * o];
        gemm(
            b, f, o, 1.0, x.data(), f as isize, 1, w.data(), 1, f as isize, 0.0, &mut out,
            o as isize, 1,
        );
        let bv = bias.value();
        for row in out.chunks_mut(o) {
            for (v, bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        self.graph.op(
            Tensor::new(&[b, o], out).expect("linear shape"),
            &[self, weight, bias],
            Box::new(move |g, needs| {
                let gd = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; b * f];
                    gemm(
                        b, o, f, 1.0, gd, o as isize, 1, w.data(), f as isize, 1, 0.0, &mut dx,
                        f as isize, 1,
                    );
                    Tensor::new(&[b, f], dx).expect("linear dx")
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; o * f];
                    gemm(
                        o, b, f, 1.0, gd, 1, o as isize, x.data(), f as isize, 1, 0.0, &mut dw,
                        f as isize, 1,
                    );
                    Tensor::new(&[o, f], dw).expect("linear dw")
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; o];
                    for row in gd.chunks(o) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Tensor::new(&[o], db).expect("linear db")
                });
                vec![dx, dw, db]
            }),
        )
    }
}
