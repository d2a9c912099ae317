//! Fused loss operations with closed-form gradients.

use crate::graph::Var;
use crate::tensor::Tensor;

/// Row-wise log-softmax of `[B, K]` logits.
pub fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Softmax over the channel axis of `[B, L, H, W]`.
pub fn softmax_channels(t: &Tensor) -> Tensor {
    let (b, l, h, w) = t.dims4();
    let plane = h * w;
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for bi in 0..b {
        let base = bi * l * plane;
        for p in 0..plane {
            let m = (0..l)
                .map(|c| d[base + c * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..l {
                let e = (d[base + c * plane + p] - m).exp();
                out[base + c * plane + p] = e;
                z += e;
            }
            for c in 0..l {
                out[base + c * plane + p] /= z;
            }
        }
    }
    Tensor::new(&[b, l, h, w], out).expect("softmax shape")
}

impl<'g> Var<'g> {
    /// Mean cross-entropy of `[B, K]` logits against integer labels (natural log).
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g> {
        let z = self.value();
        let (b, k) = z.dims2();
        assert_eq!(labels.len(), b, "cross_entropy: {} labels for batch {b}", labels.len());
        let lp = log_softmax_rows(z.data(), k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                assert!(y < k, "label {y} out of range for {k} classes");
                -lp[i * k + y]
            })
            .sum::<f64>()
            / b as f64;
        let labels = labels.to_vec();
        self.graph.op(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |g, _| {
                let s = g.item() / b as f64;
                let mut d: Vec<f64> = lp.iter().map(|v| v.exp() * s).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= s;
                }
                vec![Some(Tensor::new(&[b, k], d).expect("ce grad"))]
            }),
        )
    }

    /// Batch mean of the Shannon entropy (natural log) of `softmax(logits)`.
    pub fn softmax_entropy(self) -> Var<'g> {
        let z = self.value();
        let (b, k) = z.dims2();
        let lp = log_softmax_rows(z.data(), k);
        let ent: Vec<f64> = lp
            .chunks(k)
            .map(|row| -row.iter().map(|l| l.exp() * l).sum::<f64>())
            .collect();
        let mean = ent.iter().sum::<f64>() / b as f64;
        self.graph.op(
            Tensor::scalar(mean),
            &[self],
            Box::new(move |g, _| {
                let s = g.item() / b as f64;
                let mut d = vec![0.0; b * k];
                for i in 0..b {
                    for j in 0..k {
                        let l = lp[i * k + j];
                        // dH/dz_j = -p_j (log p_j + H)
                        d[i * k + j] = -s * l.exp() * (l + ent[i]);
                    }
                }
                vec![Some(Tensor::new(&[b, k], d).expect("entropy grad"))]
            }),
        )
    }

    /// Mean per-pixel cross-entropy of `[B, L, H, W]` logits against a class
    /// mask of `B*H*W` ids.
    pub fn pixel_cross_entropy(self, mask: &[usize]) -> Var<'g> {
        let z = self.value();
        let (b, l, h, w) = z.dims4();
        let plane = h * w;
        assert_eq!(mask.len(), b * plane, "pixel_cross_entropy: mask size");
        let p = softmax_channels(&z);
        let n = (b * plane) as f64;
        let zd = z.data();
        let mut exact = 0.0;
        for bi in 0..b {
            for q in 0..plane {
                let base = bi * l * plane + q;
                let m = (0..l).map(|c| zd[base + c * plane]).fold(f64::NEG_INFINITY, f64::max);
                let y = mask[bi * plane + q];
                assert!(y < l, "mask class {y} out of range for {l} classes");
                let lse = m + (0..l).map(|c| (zd[base + c * plane] - m).exp()).sum::<f64>().ln();
                exact += lse - zd[base + y * plane];
            }
        }
        let mask = mask.to_vec();
        self.graph.op(
            Tensor::scalar(exact / n),
            &[self],
            Box::new(move |g, _| {
                let s = g.item() / n;
                let mut d = p.scale(s);
                let dd = d.data_mut();
                for bi in 0..b {
                    for q in 0..plane {
                        dd[(bi * l + mask[bi * plane + q]) * plane + q] -= s;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// `1 − mean_{b,c} (2Σpy + s) / (Σp + Σy + s)` on channel-softmax
    /// probabilities, per sample and class (background included).
    pub fn soft_dice_loss(self, mask: &[usize], smooth: f64) -> Var<'g> {
        let z = self.value();
        let (b, l, h, w) = z.dims4();
        let plane = h * w;
        assert_eq!(mask.len(), b * plane, "soft_dice_loss: mask size");
        let p = softmax_channels(&z);
        let pd = p.data();
        // (intersection, denominator) per (b, c)
        let mut stats = vec![(0.0, 0.0); b * l];
        for bi in 0..b {
            for c in 0..l {
                let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
                for q in 0..plane {
                    let pv = pd[(bi * l + c) * plane + q];
                    let y = if mask[bi * plane + q] == c { 1.0 } else { 0.0 };
                    inter += pv * y;
                    psum += pv;
                    ysum += y;
                }
                stats[bi * l + c] = (inter, psum + ysum);
            }
        }
        let count = (b * l) as f64;
        let dice_mean = stats
            .iter()
            .map(|&(i, s)| (2.0 * i + smooth) / (s + smooth))
            .sum::<f64>()
            / count;
        let mask = mask.to_vec();
        self.graph.op(
            Tensor::scalar(1.0 - dice_mean),
            &[self],
            Box::new(move |g, _| {
                let s = g.item();
                let pd = p.data();
                let mut dz = vec![0.0; pd.len()];
                let mut gp = vec![0.0; l];
                for bi in 0..b {
                    for q in 0..plane {
                        // gradient w.r.t. probabilities, then through softmax
                        for (c, slot) in gp.iter_mut().enumerate() {
                            let (inter, den) = stats[bi * l + c];
                            let y = if mask[bi * plane + q] == c { 1.0 } else { 0.0 };
                            let dd = (2.0 * y * (den + smooth) - (2.0 * inter + smooth))
                                / (den + smooth).powi(2);
                            *slot = -s * dd / count;
                        }
                        let dot: f64 = (0..l).map(|c| pd[(bi * l + c) * plane + q] * gp[c]).sum();
                        for c in 0..l {
                            let idx = (bi * l + c) * plane + q;
                            dz[idx] = pd[idx] * (gp[c] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, l, h, w], dz).expect("dice grad"))]
            }),
        )
    }
}
