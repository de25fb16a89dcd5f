//! Finite-difference verification of every differentiable operation.
//!
//! Each probe builds a small `f64` instance of an operation, reduces its
//! output to a scalar through a fixed random weighting, and compares the
//! reverse-mode gradient against central differences for every input
//! element and a sample of parameter coordinates.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{check_gradients, finite_difference_grad, max_relative_error, Tape, Var};
use crate::error::Result;
use crate::nn::{Ctx, GroupId, Mode, ParamKind, ParamStore};
use crate::tensor::{Fill, Tensor};

/// Worst-case relative error any probe may report.
pub const TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Parameter coordinates sampled per parameter tensor.
const COORDS_PER_PARAM: usize = 24;

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub name: String,
    pub worst: f64,
}

impl ProbeResult {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

pub(crate) fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::new(shape, Fill::Uniform { lo, hi, seed }).expect("valid probe shape")
}

/// Weighted sum `Σ out ⊙ w`, so that normalization layers have a
/// non-trivial gradient.
pub(crate) fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(out), -1.0, 1.0, seed);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Checks a parameterized module: gradients with respect to every input
/// element and to sampled coordinates of every trainable parameter.
///
/// `forward` maps the input variables to a scalar loss.
pub fn check_module<M>(
    store: &ParamStore<f64>,
    module: &M,
    inputs: &[Tensor<f64>],
    mode: Mode,
    groups: &[GroupId],
    seed: u64,
    forward: impl Fn(&M, &mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |params: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let mut params = params.clone();
        let mut ctx = Ctx::new(&mut tape, &mut params, mode, &[]);
        let vars: Vec<Var> = xs.iter().map(|x| ctx.tape.constant(x.clone())).collect();
        let loss = forward(module, &mut ctx, &vars)?;
        Ok(ctx.tape.value(loss).data()[0])
    };

    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let mut tape = Tape::new();
    let (input_grads, loss_ok) = {
        let mut ctx = Ctx::new(&mut tape, &mut analytic_store, mode, groups);
        let vars: Vec<Var> = inputs.iter().map(|x| ctx.tape.leaf(x.clone(), true)).collect();
        let loss = forward(module, &mut ctx, &vars)?;
        ctx.backward(loss)?;
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, x)| ctx.tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
            .collect();
        (grads, ctx.tape.value(loss).data()[0].is_finite())
    };
    assert!(loss_ok, "probe loss is not finite");

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let numeric = finite_difference_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[k] = probe.clone();
                eval(store, &xs).expect("probe forward")
            },
            x,
            STEP,
        );
        worst = worst.max(max_relative_error(&input_grads[k], numeric.data()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for (pi, p) in store.iter().enumerate() {
        if p.kind != ParamKind::Trainable || !groups.contains(&p.group) {
            continue;
        }
        let analytic = &analytic_store.iter().nth(pi).expect("same layout").grad;
        let coords: Vec<usize> = if p.value.len() <= COORDS_PER_PARAM {
            (0..p.value.len()).collect()
        } else {
            (0..COORDS_PER_PARAM).map(|_| rng.random_range(0..p.value.len())).collect()
        };
        for c in coords {
            let mut plus = store.clone();
            let mut minus = store.clone();
            plus.iter_mut().nth(pi).expect("param").value.data_mut()[c] += STEP;
            minus.iter_mut().nth(pi).expect("param").value.data_mut()[c] -= STEP;
            let numeric = (eval(&plus, inputs)? - eval(&minus, inputs)?) / (2.0 * STEP);
            worst = worst.max(max_relative_error(&[analytic[c]], &[numeric]));
        }
    }
    Ok(worst)
}

/// Perturbs batch-norm affine parameters and biases away from their
/// initial values so probes do not sit on a symmetric configuration.
pub(crate) fn jitter_store(store: &mut ParamStore<f64>, rng: &mut dyn RngCore) {
    for p in store.iter_mut() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let is_affine = p.name.ends_with(".gamma") || p.name.ends_with(".beta") || p.name.ends_with(".bias");
        if is_affine {
            let seed = rng.next_u64();
            let noise = random(p.value.shape(), -0.3, 0.3, seed);
            p.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
        }
    }
}

/// Elementary tape operations.
pub fn elementwise_probes() -> Result<Vec<ProbeResult>> {
    type Case = (&'static str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, Vec<Tensor<f64>>);
    let cases: Vec<Case> = vec![
        (
            "zip_map(add,sub,mul)",
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[1])?;
                let c = t.mul(b, v[1])?;
                weighted_sum(t, c, 1)
            }),
            vec![random(&[4, 5], -1.0, 1.0, 11), random(&[4, 5], -1.0, 1.0, 12)],
        ),
        (
            "map(scale,square,log_clamped)",
            Box::new(|t, v| {
                let a = t.scale(v[0], 0.7);
                let b = t.square(a);
                let c = t.log_clamped(v[0]);
                let d = t.add(b, c)?;
                weighted_sum(t, d, 2)
            }),
            vec![random(&[3, 7], 0.05, 0.95, 13)],
        ),
        (
            "exp",
            Box::new(|t, v| {
                let e = t.exp(v[0]);
                weighted_sum(t, e, 3)
            }),
            vec![random(&[16], -1.0, 1.0, 14)],
        ),
        (
            "activation(leaky_relu,relu,sigmoid)",
            Box::new(|t, v| {
                let a = t.leaky_relu(v[0], 0.2);
                let b = t.relu(v[0]);
                let c = t.sigmoid(v[0]);
                let d = t.add(a, b)?;
                let e = t.add(d, c)?;
                weighted_sum(t, e, 4)
            }),
            vec![random(&[2, 4, 4, 4], -1.0, 1.0, 15)],
        ),
        (
            "clamp",
            Box::new(|t, v| {
                let c = t.clamp(v[0], -0.5, 0.5);
                weighted_sum(t, c, 5)
            }),
            vec![random(&[32], -1.0, 1.0, 16)],
        ),
        (
            "concat+reduce",
            Box::new(|t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.square(c);
                let m = t.mean(s);
                let w = weighted_sum(t, c, 6)?;
                t.add(m, w)
            }),
            vec![random(&[2, 3, 2, 2, 2], -1.0, 1.0, 17), random(&[2, 1, 2, 2, 2], -1.0, 1.0, 18)],
        ),
        (
            "pool3d",
            Box::new(|t, v| {
                let p = t.max_pool(v[0])?;
                weighted_sum(t, p, 7)
            }),
            vec![random(&[2, 4, 4, 4], -1.0, 1.0, 19)],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, f, inputs)| {
            Ok(ProbeResult {
                name: name.to_string(),
                worst: check_gradients(&*f, &inputs, STEP)?,
            })
        })
        .collect()
}

/// Convolution, transposed convolution and batch normalization, including
/// every (stride, dilation) pair the architecture uses.
pub fn layer_probes() -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    for &(stride, dilation) in &[(1usize, 1usize), (1, 2), (2, 1)] {
        let f = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), stride, dilation)?;
            weighted_sum(t, y, 21)
        };
        let inputs = vec![
            random(&[2, 2, 4, 4, 4], -1.0, 1.0, 31),
            random(&[3, 2, 3, 3, 3], -0.5, 0.5, 32),
            random(&[3], -0.5, 0.5, 33),
        ];
        out.push(ProbeResult {
            name: format!("conv3d(s={stride},d={dilation})"),
            worst: check_gradients(&f, &inputs, STEP)?,
        });
    }
    let proj = |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.conv3d(v[0], v[1], Some(v[2]), 2, 1)?;
        weighted_sum(t, y, 22)
    };
    out.push(ProbeResult {
        name: "conv3d(1-tap projection)".into(),
        worst: check_gradients(
            &proj,
            &[random(&[1, 2, 4, 4, 4], -1.0, 1.0, 34), random(&[3, 2, 1, 1, 1], -1.0, 1.0, 35), random(&[3], -1.0, 1.0, 36)],
            STEP,
        )?,
    });
    let deconv = |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.deconv3d(v[0], v[1], Some(v[2]), 2)?;
        weighted_sum(t, y, 23)
    };
    out.push(ProbeResult {
        name: "deconv3d(s=2)".into(),
        worst: check_gradients(
            &deconv,
            &[random(&[2, 2, 2, 2, 2], -1.0, 1.0, 37), random(&[2, 3, 3, 3, 3], -0.5, 0.5, 38), random(&[3], -0.5, 0.5, 39)],
            STEP,
        )?,
    });
    for (name, train) in [("batchnorm3d(train)", true), ("batchnorm3d(infer)", false)] {
        let mean = [0.1, -0.2, 0.05];
        let var = [0.8, 1.3, 0.5];
        let f = move |t: &mut Tape<f64>, v: &[Var]| {
            let stats = if train {
                crate::autograd::NormStats::Batch
            } else {
                crate::autograd::NormStats::Fixed { mean: &mean, var: &var }
            };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], stats, crate::nn::BN_EPS)?;
            weighted_sum(t, y, 24)
        };
        out.push(ProbeResult {
            name: name.into(),
            worst: check_gradients(
                &f,
                &[random(&[2, 3, 2, 2, 2], -1.0, 1.0, 40), random(&[3], 0.5, 1.5, 41), random(&[3], -0.5, 0.5, 42)],
                STEP,
            )?,
        });
    }
    Ok(out)
}

/// Composite blocks with their parameters.
pub fn block_probes() -> Result<Vec<ProbeResult>> {
    use crate::nn::{DenoiseDown, MultiscaleDown, MultiscaleUp, Res3d};
    let g = [GroupId(0)];
    let mut out = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut store = ParamStore::new();
    let res = Res3d::new(&mut store, "res", 2, 2, 1, 1, g[0], &mut rng)?;
    jitter_store(&mut store, &mut rng);
    out.push(ProbeResult {
        name: "res3d_block(1,1)".into(),
        worst: check_module(&store, &res, &[random(&[1, 2, 4, 4, 4], -1.0, 1.0, 52)], Mode::Train, &g, 53, |m, ctx, v| {
            let y = m.forward(ctx, v[0])?;
            weighted_sum(ctx.tape, y, 54)
        })?,
    });

    let mut store = ParamStore::new();
    let res = Res3d::new(&mut store, "res", 2, 3, 2, 1, g[0], &mut rng)?;
    jitter_store(&mut store, &mut rng);
    out.push(ProbeResult {
        name: "res3d_block(2,1)+projection".into(),
        worst: check_module(&store, &res, &[random(&[2, 2, 4, 4, 4], -1.0, 1.0, 55)], Mode::Train, &g, 56, |m, ctx, v| {
            let y = m.forward(ctx, v[0])?;
            weighted_sum(ctx.tape, y, 57)
        })?,
    });

    let mut store = ParamStore::new();
    let msd = MultiscaleDown::new(&mut store, "msd", 2, 3, g[0], &mut rng)?;
    jitter_store(&mut store, &mut rng);
    out.push(ProbeResult {
        name: "multiscale_down".into(),
        worst: check_module(&store, &msd, &[random(&[1, 2, 4, 4, 4], -1.0, 1.0, 58)], Mode::Train, &g, 59, |m, ctx, v| {
            let y = m.forward(ctx, v[0])?;
            weighted_sum(ctx.tape, y, 60)
        })?,
    });

    let mut store = ParamStore::new();
    let msu = MultiscaleUp::new(&mut store, "msu", 2, 2, g[0], &mut rng)?;
    jitter_store(&mut store, &mut rng);
    out.push(ProbeResult {
        name: "multiscale_up".into(),
        worst: check_module(&store, &msu, &[random(&[1, 2, 2, 2, 2], -1.0, 1.0, 61)], Mode::Train, &g, 62, |m, ctx, v| {
            let y = m.forward(ctx, v[0])?;
            weighted_sum(ctx.tape, y, 63)
        })?,
    });

    let mut store = ParamStore::new();
    let dd = DenoiseDown::new(&mut store, "dd", 1, 2, g[0], &mut rng)?;
    jitter_store(&mut store, &mut rng);
    out.push(ProbeResult {
        name: "denoise_down".into(),
        worst: check_module(&store, &dd, &[random(&[1, 1, 8, 8, 8], -1.0, 1.0, 64)], Mode::Train, &g, 65, |m, ctx, v| {
            let y = m.forward(ctx, v[0])?;
            weighted_sum(ctx.tape, y, 66)
        })?,
    });
    Ok(out)
}

/// Every loss term on clamped-range inputs.
pub fn loss_probes() -> Result<Vec<ProbeResult>> {
    use crate::losses::{loss_auto, loss_discriminators, loss_generators, loss_kl, loss_pred, loss_recon, per_category_error};
    type Case = (&'static str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, Vec<Tensor<f64>>);
    let prob = |shape: &[usize], seed| random(shape, 0.05, 0.95, seed);
    let cases: Vec<Case> = vec![
        (
            "per_category_error",
            Box::new(|t, v| per_category_error(t, v[0], v[1], 0.7)),
            vec![prob(&[2, 3, 3], 71), prob(&[2, 3, 3], 72)],
        ),
        ("loss_auto", Box::new(|t, v| loss_auto(t, v[0], v[1])), vec![random(&[1, 1, 3, 3, 3], -0.9, 0.9, 73), random(&[1, 1, 3, 3, 3], -1.0, 1.0, 74)]),
        (
            "loss_recon",
            Box::new(|t, v| loss_recon(t, v[0], v[1], 0.5)),
            vec![prob(&[1, 2, 2, 2, 2], 75), prob(&[1, 2, 2, 2, 2], 76)],
        ),
        (
            "loss_pred",
            Box::new(|t, v| loss_pred(t, v[0], v[1], 0.9)),
            vec![prob(&[2, 4, 2, 2, 2], 77), prob(&[2, 4, 2, 2, 2], 78)],
        ),
        (
            "loss_generators",
            Box::new(|t, v| {
                let (a, b) = loss_generators(t, v[0], v[1]);
                let b = t.scale(b, 0.6);
                t.add(a, b)
            }),
            vec![prob(&[2, 1, 2, 2, 2], 79), prob(&[2, 1, 2, 2, 2], 80)],
        ),
        (
            "loss_discriminators",
            Box::new(|t, v| {
                let (a, b) = loss_discriminators(t, v[0], v[1], v[2], v[3])?;
                let b = t.scale(b, 0.6);
                t.add(a, b)
            }),
            vec![prob(&[2, 1, 2, 2, 2], 81), prob(&[2, 1, 2, 2, 2], 82), prob(&[2, 1, 2, 2, 2], 83), prob(&[2, 1, 2, 2, 2], 84)],
        ),
        (
            "loss_kl",
            Box::new(|t, v| loss_kl(t, v[0], v[1])),
            vec![random(&[2, 3, 2, 2], -1.0, 1.0, 85), random(&[2, 3, 2, 2], -1.0, 1.0, 86)],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, f, inputs)| {
            Ok(ProbeResult {
                name: name.to_string(),
                worst: check_gradients(&*f, &inputs, STEP)?,
            })
        })
        .collect()
}

/// Compares reverse-mode gradients of `loss` against central differences
/// at `coords` parameter coordinates drawn uniformly from the trainable
/// parameters of `groups`.
pub fn check_sampled_parameters(
    store: &ParamStore<f64>,
    groups: &[GroupId],
    coords: usize,
    seed: u64,
    loss: impl Fn(&mut Ctx<'_, f64>) -> Result<Var>,
) -> Result<f64> {
    let eval = |params: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut params = params.clone();
        let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train, &[]);
        let l = loss(&mut ctx)?;
        Ok(ctx.tape.value(l).data()[0])
    };
    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut analytic, Mode::Train, groups);
        let l = loss(&mut ctx)?;
        ctx.backward(l)?;
    }
    let pool: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind == ParamKind::Trainable && groups.contains(&p.group))
        .flat_map(|(i, p)| (0..p.value.len()).map(move |c| (i, c)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..coords.min(pool.len()) {
        let (pi, c) = pool[rng.random_range(0..pool.len())];
        let mut plus = store.clone();
        let mut minus = store.clone();
        plus.iter_mut().nth(pi).expect("param").value.data_mut()[c] += STEP;
        minus.iter_mut().nth(pi).expect("param").value.data_mut()[c] -= STEP;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
        let a = analytic.iter().nth(pi).expect("same layout").grad[c];
        worst = worst.max(max_relative_error(&[a], &[numeric]));
    }
    Ok(worst)
}

/// The smallest network configuration: a 16³ grid and width 2 everywhere.
pub fn tiny_config() -> crate::model::ForkNetConfig {
    crate::model::ForkNetConfig {
        grid: [16, 16, 16],
        classes: 2,
        encoder_widths: [2; 4],
        latent_channels: 2,
        generator_widths: [2; 3],
        discriminator_widths: [2; 3],
        ..Default::default()
    }
}

/// End-to-end paths through the tiny network: the semantic prediction
/// from a re-encoded generated SDF, and the pair-consistency loss with its
/// binarized target held at the base parameters.
pub fn network_probes() -> Result<Vec<ProbeResult>> {
    use crate::losses::{binarized_target, loss_consistency_against};
    use crate::model::{Architecture, Branch, GENERATOR_GROUPS};

    let config = tiny_config();
    let mut store = ParamStore::<f64>::new();
    let arch = Architecture::build(config.clone(), 91, &mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    jitter_store(&mut store, &mut rng);
    let mut latent = vec![2];
    latent.extend(config.latent_shape());
    let z = random(&latent, -1.0, 1.0, 93);
    let mut out = Vec::new();

    let composite = check_sampled_parameters(&store, &GENERATOR_GROUPS, 20, 94, |ctx| {
        let zv = ctx.tape.constant(z.clone());
        let x_tilde = arch.generate(ctx, Branch::Sdf, zv, None)?.output;
        let code = arch.encode(ctx, x_tilde, None)?;
        let s_hat = arch.semantics(ctx, code.mean)?;
        weighted_sum(ctx.tape, s_hat, 95)
    })?;
    out.push(ProbeResult {
        name: "semantic(encode(generate_sdf(z)))".into(),
        worst: composite,
    });

    let target = {
        let mut tape = Tape::new();
        let mut params = store.clone();
        let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Train, &[]);
        let zv = ctx.tape.constant(z.clone());
        let decoded = arch.decode(&mut ctx, zv)?;
        binarized_target(ctx.tape.value(decoded.semantic))?
    };
    let consistency = check_sampled_parameters(&store, &GENERATOR_GROUPS, 20, 96, |ctx| {
        let zv = ctx.tape.constant(z.clone());
        let x_tilde = arch.generate(ctx, Branch::Sdf, zv, None)?.output;
        loss_consistency_against(&arch, ctx, x_tilde, &target, 0.6)
    })?;
    out.push(ProbeResult {
        name: "loss_consistency".into(),
        worst: consistency,
    });
    Ok(out)
}

/// Runs every probe family.
pub fn run_all() -> Result<Vec<ProbeResult>> {
    let mut all = elementwise_probes()?;
    all.extend(layer_probes()?);
    all.extend(block_probes()?);
    all.extend(loss_probes()?);
    all.extend(network_probes()?);
    Ok(all)
}
