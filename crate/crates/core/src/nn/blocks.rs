use rand::RngCore;

use super::layers::{Activation, BatchNorm3d, Conv3d, ConvSpec, Deconv3d, LEAKY_SLOPE};
use super::params::{Ctx, GroupId, ParamStore};
use crate::autograd::Var;
use crate::error::Result;
use crate::tensor::Element;

const LEAKY: Activation = Activation::LeakyRelu(LEAKY_SLOPE);

/// Residual unit `conv(s,d) → BN → leaky → conv(1,d) → BN` plus a skip
/// that is the identity, or a 1-tap projection when stride or width change.
#[derive(Clone, Debug)]
pub struct Res3d {
    conv1: Conv3d,
    bn1: BatchNorm3d,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    proj: Option<Conv3d>,
}

impl Res3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dilation: usize,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let conv1 = Conv3d::new(store, &format!("{name}.conv1"), ConvSpec::new(in_channels, out_channels, stride, dilation), group, rng)?;
        let bn1 = BatchNorm3d::new(store, &format!("{name}.bn1"), out_channels, group)?;
        let conv2 = Conv3d::new(store, &format!("{name}.conv2"), ConvSpec::new(out_channels, out_channels, 1, dilation), group, rng)?;
        let bn2 = BatchNorm3d::new(store, &format!("{name}.bn2"), out_channels, group)?;
        let proj = if stride != 1 || in_channels != out_channels {
            Some(Conv3d::projection(store, &format!("{name}.proj"), in_channels, out_channels, stride, group, rng)?)
        } else {
            None
        };
        Ok(Res3d {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = LEAKY.apply(ctx, h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(h, skip)
    }
}

/// First encoder stage: `conv(1,1) → BN → leaky → Res3d(1,1) ×2 → pool`.
#[derive(Clone, Debug)]
pub struct DenoiseDown {
    conv: Conv3d,
    bn: BatchNorm3d,
    res: Vec<Res3d>,
}

impl DenoiseDown {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        width: usize,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let conv = Conv3d::new(store, &format!("{name}.conv"), ConvSpec::new(in_channels, width, 1, 1), group, rng)?;
        let bn = BatchNorm3d::new(store, &format!("{name}.bn"), width, group)?;
        let res = (0..2)
            .map(|i| Res3d::new(store, &format!("{name}.res{i}"), width, width, 1, 1, group, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DenoiseDown { conv, bn, res })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        let mut h = LEAKY.apply(ctx, h);
        for r in &self.res {
            h = r.forward(ctx, h)?;
        }
        ctx.tape.max_pool(h)
    }
}

/// Four chained residual units (dilations 1, 2, 2, 2) whose outputs are
/// concatenated and halved by a stride-2 convolution.
#[derive(Clone, Debug)]
pub struct MultiscaleDown {
    blocks: Vec<Res3d>,
    down: Conv3d,
    bn: BatchNorm3d,
}

impl MultiscaleDown {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        out_channels: usize,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let blocks = [1, 2, 2, 2]
            .iter()
            .enumerate()
            .map(|(i, &d)| Res3d::new(store, &format!("{name}.res{i}"), channels, channels, 1, d, group, rng))
            .collect::<Result<Vec<_>>>()?;
        let down = Conv3d::new(store, &format!("{name}.down"), ConvSpec::new(4 * channels, out_channels, 2, 1), group, rng)?;
        let bn = BatchNorm3d::new(store, &format!("{name}.bn"), out_channels, group)?;
        Ok(MultiscaleDown { blocks, down, bn })
    }

    /// Concatenated block outputs, before the downsampling convolution.
    pub fn features<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
            outs.push(h);
        }
        ctx.tape.concat(&outs, channel_axis(ctx, x))
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let cat = self.features(ctx, x)?;
        let h = self.down.forward(ctx, cat)?;
        let h = self.bn.forward(ctx, h)?;
        Ok(LEAKY.apply(ctx, h))
    }
}

/// Two chained residual units (dilations 1, 2), concatenated, then a
/// stride-2 transposed convolution to `out_channels` with no normalization
/// or activation.
#[derive(Clone, Debug)]
pub struct MultiscaleUp {
    blocks: Vec<Res3d>,
    up: Deconv3d,
}

impl MultiscaleUp {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        out_channels: usize,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let blocks = [1, 2]
            .iter()
            .enumerate()
            .map(|(i, &d)| Res3d::new(store, &format!("{name}.res{i}"), channels, channels, 1, d, group, rng))
            .collect::<Result<Vec<_>>>()?;
        let up = Deconv3d::new(store, &format!("{name}.up"), 2 * channels, out_channels, group, rng)?;
        Ok(MultiscaleUp { blocks, up })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
            outs.push(h);
        }
        let cat = ctx.tape.concat(&outs, channel_axis(ctx, x))?;
        self.up.forward(ctx, cat)
    }

    pub fn output(&self) -> &Deconv3d {
        &self.up
    }
}

fn channel_axis<T: Element>(ctx: &Ctx<'_, T>, x: Var) -> usize {
    if ctx.tape.shape(x).len() == 5 {
        1
    } else {
        0
    }
}
