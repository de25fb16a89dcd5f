//! Alternating adversarial training with Adam.
//!
//! Batches alternate between a generator phase (encoder and the three
//! generators, discriminators frozen) and a discriminator phase (both
//! discriminators, everything else frozen), starting with the generator.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::losses::{
    binarized_target, loss_auto, loss_consistency_against, loss_discriminators, loss_generators, loss_kl,
    loss_pred, loss_recon, LossReport,
};
use crate::model::{
    sample_latent, save_checkpoint, stack, unstack, Critic, ForkNet, ForkNetConfig, LatentCode, DISCRIMINATOR_GROUPS,
    DIS_SDF, DIS_SEMANTIC, GENERATOR_GROUPS,
};
use crate::nn::{Ctx, GroupId, Mode, ParamKind, ParamStore};
use crate::scene::{load_sample, Manifest, Sample, Split};
use crate::tensor::Tensor;

/// Multipliers of the generator-phase objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub auto: f64,
    pub recon: f64,
    pub pred: f64,
    pub gen_x: f64,
    pub gen_s: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            auto: 1.0,
            recon: 1.0,
            pred: 1.0,
            gen_x: 1.0,
            gen_s: 1.0,
            consistency: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling per optimizer; `None` disables
    /// clipping.
    pub clip_norm: Option<f64>,
    /// Latent codes drawn per batch for the adversarial and consistency
    /// terms.
    pub fake_samples: usize,
    /// Standard deviation of sampled latent codes around the batch mean.
    pub latent_std: f64,
    /// Sample `z = μ + σ·ε` in the generator phase; `false` uses `μ`.
    pub reparameterize: bool,
    pub weights: LossWeights,
    pub seed: u64,
    /// Fixed batch order and reduction order. Only deterministic execution
    /// is implemented; the flag is kept for configuration files.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 30,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(10.0),
            fake_samples: 4,
            latent_std: 1.0,
            reparameterize: true,
            weights: LossWeights::default(),
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch statistics".into()));
        }
        if self.fake_samples < 2 {
            return Err(Error::Config("fake_samples must be at least 2 for batch statistics".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Model and training settings as stored in one TOML file with `[model]`
/// and `[train]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ForkNetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Generator,
    Discriminator,
}

impl Phase {
    /// Phase of the `step`-th batch (0-indexed) of a run.
    pub fn of_step(step: u64) -> Self {
        if step % 2 == 0 {
            Phase::Generator
        } else {
            Phase::Discriminator
        }
    }
}

/// `(λ_geo, λ_sem)` for a 0-indexed epoch.
pub fn lambda_schedule(epoch: usize, config: &ForkNetConfig) -> (f64, f64) {
    let sem = if epoch < config.lambda_switch_epoch {
        config.lambda_sem_initial
    } else {
        config.lambda_sem_final
    };
    (config.lambda_geo, sem)
}

/// Moment estimates for the parameters of a set of groups.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub groups: Vec<GroupId>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>, groups: &[GroupId], config: &TrainConfig) -> Self {
        AdamState {
            groups: groups.to_vec(),
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    fn in_scope(&self, kind: ParamKind, group: GroupId) -> bool {
        kind == ParamKind::Trainable && self.groups.contains(&group)
    }

    pub fn first_moment(&self, index: usize) -> &[f32] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f32] {
        &self.v[index]
    }
}

/// L2 norm of the gradients in scope of `state`.
pub fn grad_norm(params: &ParamStore<f32>, state: &AdamState) -> f64 {
    params
        .iter()
        .filter(|p| state.in_scope(p.kind, p.group))
        .flat_map(|p| p.grad.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scales the in-scope gradients so their global norm is at most `max`.
pub fn clip_gradients(params: &mut ParamStore<f32>, state: &AdamState, max: f64) -> f64 {
    let norm = grad_norm(params, state);
    if norm > max {
        let k = (max / norm) as f32;
        for p in params.iter_mut().filter(|p| state.in_scope(p.kind, p.group)) {
            p.grad.iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

/// One bias-corrected Adam update of every in-scope parameter.
pub fn adam_step(params: &mut ParamStore<f32>, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match the parameter store".into()));
    }
    for p in params.iter() {
        if state.in_scope(p.kind, p.group) && p.grad.len() != p.value.len() {
            return Err(Error::Contract(format!("missing gradient for parameter block `{}`", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1 as f32, state.beta2 as f32);
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let step = (state.lr / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    let eps = state.eps as f32;
    for (i, p) in params.iter_mut().enumerate() {
        if !state.in_scope(p.kind, p.group) {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= step * *m / ((*v).sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// Optimizer states: encoder with generators, and one per discriminator.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub generator: AdamState,
    pub dis_sdf: AdamState,
    pub dis_semantic: AdamState,
}

impl Optimizers {
    pub fn new(params: &ParamStore<f32>, config: &TrainConfig) -> Self {
        Optimizers {
            generator: AdamState::new(params, &GENERATOR_GROUPS, config),
            dis_sdf: AdamState::new(params, &[DIS_SDF], config),
            dis_semantic: AdamState::new(params, &[DIS_SEMANTIC], config),
        }
    }
}

/// Network-ready tensors of a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 1, D, H, W]`, SDF divided by τ.
    pub x: Tensor<f32>,
    pub s_gt: Tensor<f32>,
    pub g_gt: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
        let [d, h, w] = first.x.grid().dims;
        let b = samples.len();
        let c = first.s_gt.0.channels;
        let mut x = Vec::with_capacity(b * d * h * w);
        let mut s = Vec::with_capacity(b * c * d * h * w);
        let mut g = Vec::with_capacity(b * 2 * d * h * w);
        for smp in samples {
            if smp.x.grid().dims != [d, h, w] || smp.s_gt.0.channels != c {
                return Err(Error::Shape(format!("sample `{}` does not match the batch layout", smp.id)));
            }
            x.extend(smp.x.normalized());
            s.extend_from_slice(&smp.s_gt.0.data);
            g.extend_from_slice(&smp.g_gt.0.data);
        }
        Ok(Batch {
            x: Tensor::from_vec(&[b, 1, d, h, w], x)?,
            s_gt: Tensor::from_vec(&[b, c, d, h, w], s)?,
            g_gt: Tensor::from_vec(&[b, 2, d, h, w], g)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-step randomness, derived from the run seed and the global step.
fn step_seed(seed: u64, step: u64, salt: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Codes drawn around the batch mean of `means` (a `[B, C, d, h, w]`
/// tensor).
fn sampled_codes(means: &Tensor<f32>, count: usize, std: f64, seed: u64) -> Result<Tensor<f32>> {
    let codes: Vec<LatentCode<f32>> = unstack(means)?
        .into_iter()
        .map(|m| LatentCode {
            logvar: Tensor::zeros(m.shape()).expect("latent shape"),
            z: m.clone(),
            mean: m,
        })
        .collect();
    let draws: Vec<Tensor<f32>> = (0..count)
        .map(|k| sample_latent(&codes, std, step_seed(seed, k as u64, 7)).map(|c| c.z))
        .collect::<Result<_>>()?;
    stack(&draws.iter().collect::<Vec<_>>())
}

/// Result of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Latent means of the real batch.
    pub latent_means: Tensor<f32>,
}

fn scalar(ctx: &Ctx<'_, f32>, v: crate::autograd::Var) -> f64 {
    ctx.tape.value(v).data()[0] as f64
}

fn finite(ctx: &Ctx<'_, f32>, term: &str, v: crate::autograd::Var) -> Result<f64> {
    let x = scalar(ctx, v);
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}

/// Runs one phase on `batch` and applies the update. Parameters are left
/// untouched when any loss term is non-finite.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &mut ForkNet<f32>,
    batch: &Batch,
    opt: &mut Optimizers,
    config: &TrainConfig,
    phase: Phase,
    lambdas: (f64, f64),
    seed: u64,
) -> Result<StepOutcome> {
    let (lambda_geo, lambda_sem) = lambdas;
    let arch = net.arch.clone();
    let beta = arch.config.kl_weight;
    let w = &config.weights;
    let mut report = LossReport {
        lambda_geo,
        lambda_sem,
        ..LossReport::default()
    };
    // gradients are staged on a copy, so a failed step leaves `net` as is
    let mut params = net.params.clone();
    params.zero_grads();
    let mut tape = Tape::new();
    let active: &[GroupId] = match phase {
        Phase::Generator => &GENERATOR_GROUPS,
        Phase::Discriminator => &DISCRIMINATOR_GROUPS,
    };
    let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train, active);
    let x = ctx.tape.constant(batch.x.clone());
    let latent_means;

    match phase {
        Phase::Generator => {
            let noise = config.reparameterize.then(|| step_seed(seed, 0, 1));
            let code = arch.encode(&mut ctx, x, noise)?;
            latent_means = ctx.tape.value(code.mean).clone();
            let real = arch.decode(&mut ctx, code.z)?;
            let g_gt = ctx.tape.constant(batch.g_gt.clone());
            let s_gt = ctx.tape.constant(batch.s_gt.clone());
            let l_auto = loss_auto(ctx.tape, real.sdf, x)?;
            let l_recon = loss_recon(ctx.tape, real.geometry, g_gt, lambda_geo)?;
            let l_pred = loss_pred(ctx.tape, real.semantic, s_gt, lambda_sem)?;
            let l_kl = loss_kl(ctx.tape, code.mean, code.logvar)?;
            report.l_auto = finite(&ctx, "l_auto", l_auto)?;
            report.l_recon = finite(&ctx, "l_recon", l_recon)?;
            report.l_pred = finite(&ctx, "l_pred", l_pred)?;
            report.l_kl = finite(&ctx, "l_kl", l_kl)?;

            let mut terms = vec![(l_auto, w.auto), (l_recon, w.recon), (l_pred, w.pred), (l_kl, beta)];
            let needs_fakes = w.gen_x != 0.0 || w.gen_s != 0.0 || w.consistency != 0.0;
            let (mut l_gen_x, mut l_gen_s, mut l_cons) = (None, None, None);
            if needs_fakes {
                // running statistics describe real inputs only
                ctx.track_stats = false;
                let z = sampled_codes(&latent_means, config.fake_samples, config.latent_std, step_seed(seed, 0, 2))?;
                let z = ctx.tape.constant(z);
                let fake = arch.decode(&mut ctx, z)?;
                if w.gen_x != 0.0 || w.gen_s != 0.0 {
                    let dx = arch.discriminate(&mut ctx, Critic::Sdf, fake.sdf)?;
                    let ds = arch.discriminate(&mut ctx, Critic::Semantic, fake.semantic)?;
                    let (gx, gs) = loss_generators(ctx.tape, dx, ds);
                    terms.push((gx, w.gen_x));
                    terms.push((gs, w.gen_s));
                    (l_gen_x, l_gen_s) = (Some(gx), Some(gs));
                }
                if w.consistency != 0.0 {
                    let target = binarized_target(ctx.tape.value(fake.semantic))?;
                    let c = loss_consistency_against(&arch, &mut ctx, fake.sdf, &target, lambda_sem)?;
                    terms.push((c, w.consistency));
                    l_cons = Some(c);
                }
            }
            report.l_gen_x = l_gen_x.map_or(0.0, |v| scalar(&ctx, v));
            report.l_gen_s = l_gen_s.map_or(0.0, |v| scalar(&ctx, v));
            report.l_consistency = l_cons.map_or(0.0, |v| scalar(&ctx, v));
            report.check_finite()?;

            let mut total = None;
            for (term, weight) in terms {
                let t = ctx.tape.scale(term, weight);
                total = Some(match total {
                    None => t,
                    Some(acc) => ctx.tape.add(acc, t)?,
                });
            }
            ctx.backward(total.expect("at least one term"))?;
            drop(ctx);
            if let Some(c) = config.clip_norm {
                clip_gradients(&mut params, &opt.generator, c);
            }
            adam_step(&mut params, &mut opt.generator)?;
        }
        Phase::Discriminator => {
            let code = arch.encode(&mut ctx, x, None)?;
            latent_means = ctx.tape.value(code.mean).clone();
            let z = sampled_codes(&latent_means, config.fake_samples, config.latent_std, step_seed(seed, 0, 2))?;
            let z = ctx.tape.constant(z);
            let fake = arch.decode(&mut ctx, z)?;
            // fakes are inputs here, not functions of trainable parameters
            let fake_sdf = ctx.tape.constant(ctx.tape.value(fake.sdf).clone());
            let fake_sem = ctx.tape.constant(ctx.tape.value(fake.semantic).clone());
            let s_gt = ctx.tape.constant(batch.s_gt.clone());
            let dx_real = arch.discriminate(&mut ctx, Critic::Sdf, x)?;
            let ds_real = arch.discriminate(&mut ctx, Critic::Semantic, s_gt)?;
            ctx.track_stats = false;
            let dx_fake = arch.discriminate(&mut ctx, Critic::Sdf, fake_sdf)?;
            let ds_fake = arch.discriminate(&mut ctx, Critic::Semantic, fake_sem)?;
            let (lx, ls) = loss_discriminators(ctx.tape, dx_real, dx_fake, ds_real, ds_fake)?;
            report.l_dis_x = scalar(&ctx, lx);
            report.l_dis_s = scalar(&ctx, ls);
            report.check_finite()?;
            let total = ctx.tape.add(lx, ls)?;
            ctx.backward(total)?;
            drop(ctx);
            for state in [&mut opt.dis_sdf, &mut opt.dis_semantic] {
                if let Some(c) = config.clip_norm {
                    clip_gradients(&mut params, state, c);
                }
                adam_step(&mut params, state)?;
            }
        }
    }
    net.params = params;
    Ok(StepOutcome { report, latent_means })
}

/// Running epoch means, each term over the steps that computed it.
#[derive(Clone, Debug, Default)]
struct EpochMeans {
    generator: Vec<LossReport>,
    discriminator: Vec<LossReport>,
}

impl EpochMeans {
    fn push(&mut self, phase: Phase, r: LossReport) {
        match phase {
            Phase::Generator => self.generator.push(r),
            Phase::Discriminator => self.discriminator.push(r),
        }
    }

    fn mean(&self, lambdas: (f64, f64)) -> LossReport {
        fn avg(rs: &[LossReport], f: impl Fn(&LossReport) -> f64) -> f64 {
            if rs.is_empty() {
                0.0
            } else {
                rs.iter().map(f).sum::<f64>() / rs.len() as f64
            }
        }
        let g = &self.generator;
        let d = &self.discriminator;
        LossReport {
            l_auto: avg(g, |r| r.l_auto),
            l_recon: avg(g, |r| r.l_recon),
            l_pred: avg(g, |r| r.l_pred),
            l_gen_x: avg(g, |r| r.l_gen_x),
            l_gen_s: avg(g, |r| r.l_gen_s),
            l_dis_x: avg(d, |r| r.l_dis_x),
            l_dis_s: avg(d, |r| r.l_dis_s),
            l_kl: avg(g, |r| r.l_kl),
            l_consistency: avg(g, |r| r.l_consistency),
            lambda_geo: lambdas.0,
            lambda_sem: lambdas.1,
        }
    }
}

pub const METRICS_HEADER: &str =
    "epoch l_auto l_recon l_pred l_gen_x l_gen_s l_dis_x l_dis_s l_kl l_consistency lambda_sem";
pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.fnck";

/// One metrics line; `epoch` is 1-based.
pub fn format_metrics(epoch: usize, r: &LossReport) -> String {
    let mut line = epoch.to_string();
    for (_, v) in r.terms() {
        let _ = write!(line, " {v:.9e}");
    }
    let _ = write!(line, " {}", r.lambda_sem);
    line
}

/// Parses a metrics log back into `(epoch, report)` rows.
pub fn parse_metrics(text: &str) -> Result<Vec<(usize, LossReport)>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Data("metrics log header missing".into()));
    }
    lines
        .map(|line| {
            let f: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Data(format!("metrics value {t:?}"))))
                .collect::<Result<_>>()?;
            if f.len() != 11 {
                return Err(Error::Data(format!("metrics line has {} fields", f.len())));
            }
            Ok((
                f[0] as usize,
                LossReport {
                    l_auto: f[1],
                    l_recon: f[2],
                    l_pred: f[3],
                    l_gen_x: f[4],
                    l_gen_s: f[5],
                    l_dis_x: f[6],
                    l_dis_s: f[7],
                    l_kl: f[8],
                    l_consistency: f[9],
                    lambda_geo: f64::NAN,
                    lambda_sem: f[10],
                },
            ))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub epochs: Vec<LossReport>,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
}

/// Loads every training-split sample of a dataset.
pub fn load_split(data_dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = Manifest::read(data_dir)?;
    manifest
        .ids(split)
        .par_iter()
        .map(|id| load_sample(data_dir, id))
        .collect()
}

/// Trains on the training split of `data_dir`, writing the metrics log
/// and a checkpoint after every epoch into `out_dir`.
pub fn train(data_dir: &Path, config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.model.validate()?;
    config.train.validate()?;
    let tc = &config.train;
    let samples = load_split(data_dir, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    for s in &samples {
        if s.x.grid().dims != config.model.grid || s.s_gt.classes() != config.model.classes {
            return Err(Error::Config(format!(
                "sample `{}` has grid {:?} with {} classes; the model expects {:?} with {}",
                s.id,
                s.x.grid().dims,
                s.s_gt.classes(),
                config.model.grid,
                config.model.classes
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut log = format!("{METRICS_HEADER}\n");
    fs::write(&metrics_path, &log).map_err(|e| Error::io(&metrics_path, e))?;

    let mut net = ForkNet::<f32>::new(config.model.clone(), tc.seed)?;
    let mut opt = Optimizers::new(&net.params, tc);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(step_seed(tc.seed, 0, 3));
    let mut step = 0u64;
    let (mut gen_steps, mut dis_steps) = (0u64, 0u64);
    let mut epochs = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let lambdas = lambda_schedule(epoch, &config.model);
        order.shuffle(&mut shuffle_rng);
        let mut means = EpochMeans::default();
        let mut latent_sum = vec![0.0f64; config.model.latent_shape().iter().product()];
        let mut latent_count = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch_samples: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = Batch::from_samples(&batch_samples)?;
            let phase = Phase::of_step(step);
            let outcome = train_step(&mut net, &batch, &mut opt, tc, phase, lambdas, step_seed(tc.seed, step, 4))?;
            for m in unstack(&outcome.latent_means)? {
                latent_sum.iter_mut().zip(m.data()).for_each(|(s, &v)| *s += v as f64);
                latent_count += 1;
            }
            means.push(phase, outcome.report);
            match phase {
                Phase::Generator => gen_steps += 1,
                Phase::Discriminator => dis_steps += 1,
            }
            step += 1;
        }
        if latent_count > 0 {
            let id = net.arch.latent_mean;
            let buf = net.params.get_mut(id).value.data_mut();
            buf.iter_mut()
                .zip(&latent_sum)
                .for_each(|(b, s)| *b = (*s / latent_count as f64) as f32);
        }
        let report = means.mean(lambdas);
        report.check_finite()?;
        log.push_str(&format_metrics(epoch + 1, &report));
        log.push('\n');
        fs::write(&metrics_path, &log).map_err(|e| Error::io(&metrics_path, e))?;
        save_checkpoint(&ckpt_path, &net)?;
        log::info!("epoch {} l_pred {:.4} l_recon {:.4}", epoch + 1, report.l_pred, report.l_recon);
        epochs.push(report);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        epochs,
        generator_steps: gen_steps,
        discriminator_steps: dis_steps,
    })
}
