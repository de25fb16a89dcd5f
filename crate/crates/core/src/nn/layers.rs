use rand::RngCore;

use super::params::{Ctx, GroupId, Mode, ParamId, ParamKind, ParamStore};
use crate::autograd::{NormStats, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Fill, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the running statistic kept at every update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const LEAKY_SLOPE: f64 = 0.2;

/// A 3³-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            stride,
            dilation,
        }
    }
}

fn normal_init<T: Element>(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::new(
        shape,
        Fill::Normal {
            mean: 0.0,
            std,
            seed: rng.next_u64(),
        },
    )
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv3d {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Self::with_kernel(store, name, spec, 3, group, rng)
    }

    /// 1-tap strided convolution used for residual projections.
    pub fn projection<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        Self::with_kernel(store, name, ConvSpec::new(in_channels, out_channels, stride, 1), 1, group, rng)
    }

    fn with_kernel<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        kernel: usize,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let k = kernel;
        let w = normal_init(&[spec.out_channels, spec.in_channels, k, k, k], spec.in_channels * k * k * k, rng)?;
        let weight = store.register(&format!("{name}.weight"), w, ParamKind::Trainable, group)?;
        let bias = store.register(
            &format!("{name}.bias"),
            Tensor::zeros(&[spec.out_channels])?,
            ParamKind::Trainable,
            group,
        )?;
        Ok(Conv3d {
            weight,
            bias,
            kernel,
            spec,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.conv3d(x, w, Some(b), self.spec.stride, self.spec.dilation)
    }
}

/// Stride-`s` transposed convolution producing exactly `s`× the input
/// extent; the kernel is stored `[in, out, 3, 3, 3]`.
#[derive(Clone, Debug)]
pub struct Deconv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl Deconv3d {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let stride = 2;
        let fan_in = (in_channels * 27).div_ceil(stride * stride * stride);
        let w = normal_init(&[in_channels, out_channels, 3, 3, 3], fan_in, rng)?;
        let weight = store.register(&format!("{name}.weight"), w, ParamKind::Trainable, group)?;
        let bias = store.register(
            &format!("{name}.bias"),
            Tensor::zeros(&[out_channels])?,
            ParamKind::Trainable,
            group,
        )?;
        Ok(Deconv3d {
            weight,
            bias,
            in_channels,
            out_channels,
            stride,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.deconv3d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub group: GroupId,
}

impl BatchNorm3d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, group: GroupId) -> Result<Self> {
        let c = [channels];
        Ok(BatchNorm3d {
            gamma: store.register(&format!("{name}.gamma"), Tensor::new(&c, Fill::Constant(1.0))?, ParamKind::Trainable, group)?,
            beta: store.register(&format!("{name}.beta"), Tensor::zeros(&c)?, ParamKind::Trainable, group)?,
            running_mean: store.register(&format!("{name}.running_mean"), Tensor::zeros(&c)?, ParamKind::Buffer, group)?,
            running_var: store.register(
                &format!("{name}.running_var"),
                Tensor::new(&c, Fill::Constant(1.0))?,
                ParamKind::Buffer,
                group,
            )?,
            group,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Infer => {
                let mean = ctx.params.get(self.running_mean).value.data();
                let var = ctx.params.get(self.running_var).value.data();
                let (y, _) = ctx.tape.batch_norm(x, gamma, beta, NormStats::Fixed { mean, var }, BN_EPS)?;
                Ok(y)
            }
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, NormStats::Batch, BN_EPS)?;
                if ctx.track_stats && ctx.is_active(self.group) {
                    let stats = stats.expect("batch statistics in train mode");
                    let keep = T::of(BN_MOMENTUM);
                    let take = T::one() - keep;
                    let rm = ctx.params.get_mut(self.running_mean).value.data_mut();
                    rm.iter_mut().zip(&stats.mean).for_each(|(r, m)| *r = keep * *r + take * *m);
                    let rv = ctx.params.get_mut(self.running_var).value.data_mut();
                    rv.iter_mut().zip(&stats.var).for_each(|(r, v)| *r = keep * *r + take * *v);
                    if rv.iter().any(|v| !v.is_finite()) {
                        return Err(Error::State("running variance became non-finite".into()));
                    }
                }
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Element>(self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        match self {
            Activation::LeakyRelu(slope) => ctx.tape.leaky_relu(x, slope),
            Activation::Relu => ctx.tape.relu(x),
            Activation::Sigmoid => ctx.tape.sigmoid(x),
        }
    }
}
