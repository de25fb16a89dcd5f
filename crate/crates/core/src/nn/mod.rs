//! Volumetric layers and the composite down/up-sampling blocks.

mod blocks;
mod layers;
mod params;

pub use blocks::{DenoiseDown, MultiscaleDown, MultiscaleUp, Res3d};
pub use layers::{Activation, BatchNorm3d, Conv3d, ConvSpec, Deconv3d, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE};
pub use params::{Ctx, GroupId, Mode, Param, ParamId, ParamKind, ParamStore};

use crate::autograd::Var;
use crate::error::Result;
use crate::tensor::Element;

/// 2×2×2 max pooling.
pub fn pool3d<T: Element>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    ctx.tape.max_pool(x)
}
