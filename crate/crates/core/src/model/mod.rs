//! The full network: a variational encoder, three generator branches that
//! share the latent code, and two patch discriminators.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CKPT_MAGIC, CKPT_VERSION};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{
    Activation, BatchNorm3d, Conv3d, ConvSpec, Ctx, Deconv3d, DenoiseDown, GroupId, MultiscaleDown, MultiscaleUp,
    ParamId, ParamKind, ParamStore, LEAKY_SLOPE,
};
use crate::tensor::{Element, Fill, Tensor};

pub const ENCODER: GroupId = GroupId(0);
pub const GEN_SDF: GroupId = GroupId(1);
pub const GEN_GEOMETRY: GroupId = GroupId(2);
pub const GEN_SEMANTIC: GroupId = GroupId(3);
pub const DIS_SDF: GroupId = GroupId(4);
pub const DIS_SEMANTIC: GroupId = GroupId(5);
/// Everything optimized in the generator phase.
pub const GENERATOR_GROUPS: [GroupId; 4] = [ENCODER, GEN_SDF, GEN_GEOMETRY, GEN_SEMANTIC];
pub const DISCRIMINATOR_GROUPS: [GroupId; 2] = [DIS_SDF, DIS_SEMANTIC];

/// Spatial reduction from the input grid to the latent and patch grids.
pub const DOWNSAMPLE: usize = 16;

/// Branch whose intermediate features are concatenated into the semantic
/// generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipSource {
    Geometry,
    Sdf,
    /// Zero features of the same shape.
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForkNetConfig {
    pub grid: [usize; 3],
    /// Non-empty semantic classes `N`; the semantic head has `N + 1`
    /// channels.
    pub classes: usize,
    /// Widths of the denoising, multi-scale and two strided encoder stages.
    pub encoder_widths: [usize; 4],
    pub latent_channels: usize,
    /// Widths of the three generator deconvolutions.
    pub generator_widths: [usize; 3],
    /// Widths of the first three discriminator convolutions; the fourth
    /// emits one channel.
    pub discriminator_widths: [usize; 3],
    pub skip_source: SkipSource,
    pub lambda_geo: f64,
    pub lambda_sem_initial: f64,
    pub lambda_sem_final: f64,
    /// First 0-indexed epoch using `lambda_sem_final`.
    pub lambda_switch_epoch: usize,
    pub kl_weight: f64,
}

impl Default for ForkNetConfig {
    fn default() -> Self {
        ForkNetConfig {
            grid: [32, 16, 32],
            classes: 4,
            encoder_widths: [8, 16, 16, 16],
            latent_channels: 16,
            generator_widths: [32, 16, 8],
            discriminator_widths: [8, 16, 32],
            skip_source: SkipSource::Geometry,
            lambda_geo: 0.5,
            lambda_sem_initial: 0.9,
            lambda_sem_final: 0.6,
            lambda_switch_epoch: 5,
            kl_weight: 1e-3,
        }
    }
}

impl ForkNetConfig {
    /// The 80×48×80 grid with eleven object classes.
    pub fn full_scale() -> Self {
        ForkNetConfig {
            grid: [80, 48, 80],
            classes: 11,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.grid.iter().find(|&&d| d == 0 || d % DOWNSAMPLE != 0) {
            return Err(Error::Config(format!(
                "grid {:?}: extent {d} is not a positive multiple of {DOWNSAMPLE}",
                self.grid
            )));
        }
        if self.classes == 0 {
            return Err(Error::Config("at least one non-empty class required".into()));
        }
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.generator_widths)
            .chain(&self.discriminator_widths)
            .chain(std::iter::once(&self.latent_channels));
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        for (name, l) in [
            ("lambda_geo", self.lambda_geo),
            ("lambda_sem_initial", self.lambda_sem_initial),
            ("lambda_sem_final", self.lambda_sem_final),
        ] {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("{name} = {l} outside [0, 1]")));
            }
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        self.grid.map(|d| d / DOWNSAMPLE)
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let [a, b, c] = self.latent_dims();
        [self.latent_channels, a, b, c]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// Latent statistics of one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T: Element = f32> {
    pub mean: Tensor<T>,
    pub logvar: Tensor<T>,
    pub z: Tensor<T>,
}

/// Tape handles of an encoded batch.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub mean: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Draws a code centered on the average mean of `batch`, with isotropic
/// standard deviation `std`.
pub fn sample_latent<T: Element>(batch: &[LatentCode<T>], std: f64, seed: u64) -> Result<LatentCode<T>> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Contract("latent sampling needs a non-empty batch".into()))?;
    let shape = first.mean.shape().to_vec();
    let mut mean = vec![0.0f64; first.mean.len()];
    for code in batch {
        if code.mean.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("latent {:?} vs {:?}", code.mean.shape(), shape)));
        }
        mean.iter_mut().zip(code.mean.data()).for_each(|(m, v)| *m += v.as_f64());
    }
    let n = batch.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let noise = Tensor::<f64>::new(&shape, Fill::Normal { mean: 0.0, std: 1.0, seed })?;
    let z: Vec<T> = mean.iter().zip(noise.data()).map(|(m, e)| T::of(m + std * e)).collect();
    let logvar = T::of(2.0 * std.max(f64::MIN_POSITIVE).ln());
    Ok(LatentCode {
        mean: Tensor::from_vec(&shape, mean.iter().map(|&m| T::of(m)).collect())?,
        logvar: Tensor::from_vec(&shape, vec![logvar; z.len()])?,
        z: Tensor::from_vec(&shape, z)?,
    })
}

/// Stacks same-shaped tensors along a new leading batch axis.
pub fn stack<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::Contract("stack of no tensors".into()))?;
    let mut shape = vec![1];
    shape.extend_from_slice(first.shape());
    let reshaped: Vec<Tensor<T>> = parts
        .iter()
        .map(|t| (*t).clone().reshape(&shape))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = reshaped.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Splits a batched tensor back into per-item tensors.
pub fn unstack<T: Element>(t: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let b = t.shape()[0];
    let item = t.shape()[1..].to_vec();
    t.split(0, &vec![1; b])?
        .into_iter()
        .map(|p| p.reshape(&item))
        .collect()
}

#[derive(Clone, Debug)]
struct Encoder {
    denoise: DenoiseDown,
    multiscale: MultiscaleDown,
    down: [(Conv3d, BatchNorm3d); 2],
    mean_head: Conv3d,
    logvar_head: Conv3d,
}

#[derive(Clone, Debug)]
struct Generator {
    deconvs: [(Deconv3d, BatchNorm3d); 3],
    head: MultiscaleUp,
}

#[derive(Clone, Debug)]
struct Discriminator {
    convs: Vec<Conv3d>,
    norms: Vec<BatchNorm3d>,
    in_channels: usize,
}

/// Which generator to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Sdf,
    Geometry,
    Semantic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Critic {
    Sdf,
    Semantic,
}

/// Output of one generator and its features after deconvolutions 2 and 3.
#[derive(Clone, Copy, Debug)]
pub struct Generated {
    pub output: Var,
    pub taps: [Var; 2],
}

/// All three reconstructions of one latent batch.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub sdf: Var,
    pub geometry: Var,
    pub semantic: Var,
}

/// Layer structure of the network; parameter values live in a
/// [`ParamStore`] so one architecture can drive stores of either precision.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ForkNetConfig,
    encoder: Encoder,
    gen_sdf: Generator,
    gen_geometry: Generator,
    gen_semantic: Generator,
    dis_sdf: Discriminator,
    dis_semantic: Discriminator,
    /// Average latent mean over the most recent training epoch.
    pub latent_mean: ParamId,
}

#[derive(Clone, Debug)]
pub struct ForkNet<T: Element = f32> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Element> ForkNet<T> {
    pub fn new(config: ForkNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = Architecture::build(config, seed, &mut params)?;
        Ok(ForkNet { arch, params })
    }

    pub fn config(&self) -> &ForkNetConfig {
        &self.arch.config
    }

    pub fn cast<U: Element>(&self) -> ForkNet<U> {
        ForkNet {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }
}

const LEAKY: Activation = Activation::LeakyRelu(LEAKY_SLOPE);

impl Architecture {
    /// Registers every parameter of `config` into `s` and returns the
    /// structure addressing them.
    pub fn build<T: Element>(config: ForkNetConfig, seed: u64, s: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng: &mut dyn RngCore = &mut rng;
        let [e0, e1, e2, e3] = config.encoder_widths;
        let lc = config.latent_channels;

        let encoder = Encoder {
            denoise: DenoiseDown::new(s, "enc.denoise", 1, e0, ENCODER, rng)?,
            multiscale: MultiscaleDown::new(s, "enc.multiscale", e0, e1, ENCODER, rng)?,
            down: [
                (
                    Conv3d::new(s, "enc.down0", ConvSpec::new(e1, e2, 2, 1), ENCODER, rng)?,
                    BatchNorm3d::new(s, "enc.down0.bn", e2, ENCODER)?,
                ),
                (
                    Conv3d::new(s, "enc.down1", ConvSpec::new(e2, e3, 2, 1), ENCODER, rng)?,
                    BatchNorm3d::new(s, "enc.down1.bn", e3, ENCODER)?,
                ),
            ],
            mean_head: Conv3d::new(s, "enc.mean", ConvSpec::new(e3, lc, 1, 1), ENCODER, rng)?,
            logvar_head: Conv3d::new(s, "enc.logvar", ConvSpec::new(e3, lc, 1, 1), ENCODER, rng)?,
        };

        let gen_sdf = Self::generator(s, "gen_x", &config, 1, false, GEN_SDF, rng)?;
        let gen_geometry = Self::generator(s, "gen_g", &config, 2, false, GEN_GEOMETRY, rng)?;
        let gen_semantic = Self::generator(s, "gen_s", &config, config.classes + 1, true, GEN_SEMANTIC, rng)?;
        let dis_sdf = Self::discriminator(s, "dis_x", &config, 1, DIS_SDF, rng)?;
        let dis_semantic = Self::discriminator(s, "dis_s", &config, config.classes + 1, DIS_SEMANTIC, rng)?;
        let latent_mean = s.register(
            "latent.mean",
            Tensor::zeros(&config.latent_shape())?,
            ParamKind::Buffer,
            ENCODER,
        )?;

        Ok(Architecture {
            config,
            encoder,
            gen_sdf,
            gen_geometry,
            gen_semantic,
            dis_sdf,
            dis_semantic,
            latent_mean,
        })
    }

    fn generator<T: Element>(
        s: &mut ParamStore<T>,
        name: &str,
        config: &ForkNetConfig,
        out_channels: usize,
        linked: bool,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Generator> {
        let [w0, w1, w2] = config.generator_widths;
        let extra = |w: usize| if linked { w } else { 0 };
        let mk = |s: &mut ParamStore<T>, i: usize, cin: usize, cout: usize, rng: &mut dyn RngCore| -> Result<(Deconv3d, BatchNorm3d)> {
            Ok((
                Deconv3d::new(s, &format!("{name}.deconv{i}"), cin, cout, group, rng)?,
                BatchNorm3d::new(s, &format!("{name}.deconv{i}.bn"), cout, group)?,
            ))
        };
        let d0 = mk(s, 0, config.latent_channels, w0, rng)?;
        let d1 = mk(s, 1, w0, w1, rng)?;
        let d2 = mk(s, 2, w1 + extra(w1), w2, rng)?;
        let head = MultiscaleUp::new(s, &format!("{name}.head"), w2 + extra(w2), out_channels, group, rng)?;
        Ok(Generator {
            deconvs: [d0, d1, d2],
            head,
        })
    }

    fn discriminator<T: Element>(
        s: &mut ParamStore<T>,
        name: &str,
        config: &ForkNetConfig,
        in_channels: usize,
        group: GroupId,
        rng: &mut dyn RngCore,
    ) -> Result<Discriminator> {
        let [a, b, c] = config.discriminator_widths;
        let widths = [in_channels, a, b, c, 1];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..4 {
            convs.push(Conv3d::new(s, &format!("{name}.conv{i}"), ConvSpec::new(widths[i], widths[i + 1], 2, 1), group, rng)?);
            if i < 3 {
                norms.push(BatchNorm3d::new(s, &format!("{name}.conv{i}.bn"), widths[i + 1], group)?);
            }
        }
        Ok(Discriminator {
            convs,
            norms,
            in_channels,
        })
    }

    fn check_volume<T: Element>(&self, ctx: &Ctx<'_, T>, x: Var, channels: usize, what: &str) -> Result<()> {
        let s = ctx.tape.shape(x);
        if s.len() != 5 || s[1] != channels || s[2..] != self.config.grid {
            return Err(Error::Shape(format!(
                "{what} expects [B, {channels}, {:?}], got {s:?}",
                self.config.grid
            )));
        }
        Ok(())
    }

    /// Encodes a `[B, 1, D, H, W]` normalized SDF batch. With a noise seed
    /// the code is reparameterized, otherwise `z` is the mean.
    pub fn encode<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var, noise_seed: Option<u64>) -> Result<EncodedVars> {
        self.check_volume(ctx, x, 1, "encoder")?;
        let e = &self.encoder;
        let h = e.denoise.forward(ctx, x)?;
        let mut h = e.multiscale.forward(ctx, h)?;
        for (conv, bn) in &e.down {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = LEAKY.apply(ctx, h);
        }
        let mean = e.mean_head.forward(ctx, h)?;
        let logvar = e.logvar_head.forward(ctx, h)?;
        let z = match noise_seed {
            None => mean,
            Some(seed) => {
                let eps = Tensor::new(ctx.tape.shape(mean), Fill::Normal { mean: 0.0, std: 1.0, seed })?;
                let eps = ctx.tape.constant(eps);
                let half = ctx.tape.scale(logvar, 0.5);
                let std = ctx.tape.exp(half);
                let noise = ctx.tape.mul(std, eps)?;
                ctx.tape.add(mean, noise)?
            }
        };
        Ok(EncodedVars { mean, logvar, z })
    }

    fn latent_check<T: Element>(&self, ctx: &Ctx<'_, T>, z: Var) -> Result<()> {
        let s = ctx.tape.shape(z);
        if s.len() != 5 || s[1..] != self.config.latent_shape() {
            return Err(Error::Shape(format!(
                "latent batch {s:?} does not match {:?}",
                self.config.latent_shape()
            )));
        }
        Ok(())
    }

    /// Runs one generator. The semantic branch requires the taps of its
    /// skip source.
    pub fn generate<T: Element>(&self, ctx: &mut Ctx<'_, T>, branch: Branch, z: Var, taps: Option<[Var; 2]>) -> Result<Generated> {
        self.latent_check(ctx, z)?;
        let g = match branch {
            Branch::Sdf => &self.gen_sdf,
            Branch::Geometry => &self.gen_geometry,
            Branch::Semantic => &self.gen_semantic,
        };
        let links = match (branch, taps) {
            (Branch::Semantic, Some(t)) => Some(t),
            (Branch::Semantic, None) => {
                return Err(Error::Contract("semantic generator needs cross-branch features".into()))
            }
            _ => None,
        };
        let mut h = z;
        let mut own = Vec::with_capacity(2);
        for (i, (deconv, bn)) in g.deconvs.iter().enumerate() {
            h = deconv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.tape.relu(h);
            if i >= 1 {
                own.push(h);
                if let Some(t) = links {
                    let tap = t[i - 1];
                    if ctx.tape.shape(tap) != ctx.tape.shape(h) {
                        return Err(Error::Shape(format!(
                            "cross-branch feature {:?} vs own {:?}",
                            ctx.tape.shape(tap),
                            ctx.tape.shape(h)
                        )));
                    }
                    h = ctx.tape.concat(&[h, tap], 1)?;
                }
            }
        }
        let raw = g.head.forward(ctx, h)?;
        let output = match branch {
            Branch::Sdf => ctx.tape.clamp(raw, -1.0, 1.0),
            _ => ctx.tape.sigmoid(raw),
        };
        Ok(Generated {
            output,
            taps: [own[0], own[1]],
        })
    }

    /// All three generators on one latent batch with the configured
    /// cross-branch link.
    pub fn decode<T: Element>(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<Decoded> {
        let sdf = self.generate(ctx, Branch::Sdf, z, None)?;
        let geometry = self.generate(ctx, Branch::Geometry, z, None)?;
        let taps = self.skip_taps(ctx, &sdf, &geometry)?;
        let semantic = self.generate(ctx, Branch::Semantic, z, Some(taps))?;
        Ok(Decoded {
            sdf: sdf.output,
            geometry: geometry.output,
            semantic: semantic.output,
        })
    }

    /// Semantic branch on `z`, running only the generator its link needs.
    pub fn semantics<T: Element>(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
        let source = match self.config.skip_source {
            SkipSource::Geometry => Some(self.generate(ctx, Branch::Geometry, z, None)?),
            SkipSource::Sdf => Some(self.generate(ctx, Branch::Sdf, z, None)?),
            SkipSource::Disabled => None,
        };
        let taps = match source {
            Some(g) => g.taps,
            None => self.zero_taps(ctx, z)?,
        };
        Ok(self.generate(ctx, Branch::Semantic, z, Some(taps))?.output)
    }

    fn skip_taps<T: Element>(&self, ctx: &mut Ctx<'_, T>, sdf: &Generated, geometry: &Generated) -> Result<[Var; 2]> {
        match self.config.skip_source {
            SkipSource::Geometry => Ok(geometry.taps),
            SkipSource::Sdf => Ok(sdf.taps),
            SkipSource::Disabled => self.zero_taps(ctx, geometry.output),
        }
    }

    fn zero_taps<T: Element>(&self, ctx: &mut Ctx<'_, T>, like: Var) -> Result<[Var; 2]> {
        let b = ctx.tape.shape(like)[0];
        let [_, w1, w2] = self.config.generator_widths;
        let [d, h, w] = self.config.latent_dims();
        let t2 = Tensor::zeros(&[b, w1, d * 4, h * 4, w * 4])?;
        let t3 = Tensor::zeros(&[b, w2, d * 8, h * 8, w * 8])?;
        Ok([ctx.tape.constant(t2), ctx.tape.constant(t3)])
    }

    /// Patch probabilities `[B, 1, D/16, H/16, W/16]`.
    pub fn discriminate<T: Element>(&self, ctx: &mut Ctx<'_, T>, critic: Critic, v: Var) -> Result<Var> {
        let d = match critic {
            Critic::Sdf => &self.dis_sdf,
            Critic::Semantic => &self.dis_semantic,
        };
        self.check_volume(ctx, v, d.in_channels, "discriminator")?;
        let mut h = v;
        for (i, conv) in d.convs.iter().enumerate() {
            h = conv.forward(ctx, h)?;
            if let Some(bn) = d.norms.get(i) {
                h = bn.forward(ctx, h)?;
                h = LEAKY.apply(ctx, h);
            }
        }
        Ok(ctx.tape.sigmoid(h))
    }
}
