//! Parameterized layers. Each layer owns [`ParamId`]s into a [`ParamSet`]
//! and runs against a [`Bound`] view of that set.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::graph::Var;
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("init shape")
}

/// Square-kernel 2-D convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias, "same" padding for odd kernels.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = uniform_tensor(&[cout, cin, kernel, kernel], (6.0 / fan_in).sqrt(), rng);
        Self::with_weights(ps, name, w, Tensor::zeros(&[cout]), stride)
    }

    /// Convolution whose weights and bias start at exactly zero.
    pub fn zeros(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::with_weights(
            ps,
            name,
            Tensor::zeros(&[cout, cin, kernel, kernel]),
            Tensor::zeros(&[cout]),
            1,
        )
    }

    fn with_weights(ps: &mut ParamSet, name: &str, w: Tensor, b: Tensor, stride: usize) -> Self {
        let (cout, cin, kernel, _) = w.dims4();
        Self {
            weight: ps.add(format!("{name}.weight"), w),
            bias: ps.add(format!("{name}.bias"), b),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(p[self.weight], p[self.bias], self.stride, self.pad)
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0);
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.group_norm(p[self.gamma], p[self.beta], self.groups, NORM_EPS)
    }
}

/// Largest divisor of `channels` not exceeding 8.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// conv → group norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, 3, stride, rng),
            norm: GroupNorm::new(ps, &format!("{name}.norm"), cout, default_groups(cout)),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        self.norm.forward(p, self.conv.forward(p, x)).relu()
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        Self {
            weight: ps.add(format!("{name}.weight"), uniform_tensor(&[fout, fin], bound, rng)),
            bias: ps.add(format!("{name}.bias"), uniform_tensor(&[fout], bound, rng)),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.linear(p[self.weight], p[self.bias])
    }
}

/// Batch normalization over `[B, F]` features.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

/// Batch statistics to fold into the running estimates after a train step.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    momentum: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl RunningUpdate {
    pub fn apply(&self, ps: &mut ParamSet) -> crate::Result<()> {
        let m = self.momentum;
        for (r, b) in ps.get_mut(self.mean_id)?.data_mut().iter_mut().zip(&self.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in ps.get_mut(self.var_id)?.data_mut().iter_mut().zip(&self.var) {
            *r = (1.0 - m) * *r + m * b;
        }
        Ok(())
    }
}

impl BatchNorm1d {
    pub fn new(ps: &mut ParamSet, name: &str, features: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[features], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[features])),
            running_mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[features])),
            running_var: ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[features], 1.0)),
            momentum: 0.1,
        }
    }

    /// Normalize with batch statistics; returns the running-stat update
    /// (unbiased variance) for the caller to apply.
    pub fn forward_train<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> (Var<'g>, RunningUpdate) {
        let xv = x.value();
        let (b, f) = xv.dims2();
        let mut mean = vec![0.0; f];
        for row in xv.data().chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / b as f64;
            }
        }
        let mut var = vec![0.0; f];
        for row in xv.data().chunks(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let denom = (b.max(2) - 1) as f64;
        var.iter_mut().for_each(|v| *v /= denom);
        let out = x.batch_norm_train(p[self.gamma], p[self.beta], NORM_EPS);
        (
            out,
            RunningUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                momentum: self.momentum,
                mean,
                var,
            },
        )
    }

    pub fn forward_eval<'g>(&self, ps: &ParamSet, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.batch_norm_eval(
            p[self.gamma],
            p[self.beta],
            ps.get(self.running_mean).data(),
            ps.get(self.running_var).data(),
            NORM_EPS,
        )
    }
}
