use forknet::autograd::Tape;
use forknet::model::{
    load_checkpoint, sample_latent, save_checkpoint, Branch, Critic, ForkNet, ForkNetConfig, LatentCode, SkipSource,
};
use forknet::nn::{Ctx, Mode, ParamKind};
use forknet::tensor::{Fill, Tensor};

fn volume(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::new(shape, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
}

fn batch_shape(c: usize, grid: [usize; 3]) -> Vec<usize> {
    vec![1, c, grid[0], grid[1], grid[2]]
}

struct Shapes {
    mean: Vec<usize>,
    sdf: Vec<usize>,
    geometry: Vec<usize>,
    semantic: Vec<usize>,
    taps: [Vec<usize>; 2],
    critic: Vec<usize>,
}

fn shapes(config: ForkNetConfig) -> Shapes {
    let grid = config.grid;
    let classes = config.classes;
    let mut net = ForkNet::<f32>::new(config, 1).unwrap();
    let arch = net.arch.clone();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut net.params, Mode::Infer, &[]);
    let x = ctx.tape.constant(volume(&batch_shape(1, grid), 2));
    let code = arch.encode(&mut ctx, x, None).unwrap();
    let sdf = arch.generate(&mut ctx, Branch::Sdf, code.z, None).unwrap();
    let geo = arch.generate(&mut ctx, Branch::Geometry, code.z, None).unwrap();
    let sem = arch.generate(&mut ctx, Branch::Semantic, code.z, Some(geo.taps)).unwrap();
    let s_in = ctx.tape.constant(volume(&batch_shape(classes + 1, grid), 3));
    let dx = arch.discriminate(&mut ctx, Critic::Sdf, x).unwrap();
    let ds = arch.discriminate(&mut ctx, Critic::Semantic, s_in).unwrap();
    assert_eq!(ctx.tape.shape(dx), ctx.tape.shape(ds));
    let sh = |v| ctx.tape.shape(v).to_vec();
    Shapes {
        mean: sh(code.mean),
        sdf: sh(sdf.output),
        geometry: sh(geo.output),
        semantic: sh(sem.output),
        taps: [sh(geo.taps[0]), sh(geo.taps[1])],
        critic: sh(dx),
    }
}

#[test]
fn full_scale_shape_contract() {
    let s = shapes(ForkNetConfig::full_scale());
    assert_eq!(s.mean, [1, 16, 5, 3, 5]);
    assert_eq!(s.critic, [1, 1, 5, 3, 5]);
    assert_eq!(s.semantic, [1, 12, 80, 48, 80]);
    assert_eq!(s.sdf, [1, 1, 80, 48, 80]);
    assert_eq!(s.geometry, [1, 2, 80, 48, 80]);
    assert_eq!(s.taps[0][2..], [20, 12, 20]);
    assert_eq!(s.taps[1][2..], [40, 24, 40]);
}

#[test]
fn desk_grid_shape_contract() {
    let s = shapes(ForkNetConfig::default());
    assert_eq!(s.mean, [1, 16, 2, 1, 2]);
    assert_eq!(s.critic, [1, 1, 2, 1, 2]);
    assert_eq!(s.sdf, [1, 1, 32, 16, 32]);
    assert_eq!(s.geometry, [1, 2, 32, 16, 32]);
    assert_eq!(s.semantic, [1, 5, 32, 16, 32]);
}

#[test]
fn any_divisible_grid_round_trips_resolution() {
    for grid in [[16, 16, 16], [48, 32, 16]] {
        let s = shapes(ForkNetConfig {
            grid,
            ..ForkNetConfig::default()
        });
        assert_eq!(s.sdf[2..], grid);
        assert_eq!(s.geometry[2..], grid);
        assert_eq!(s.semantic[2..], grid);
    }
}

fn tiny() -> ForkNetConfig {
    ForkNetConfig {
        grid: [16, 16, 16],
        classes: 3,
        encoder_widths: [2; 4],
        latent_channels: 4,
        generator_widths: [3; 3],
        discriminator_widths: [2; 3],
        ..ForkNetConfig::default()
    }
}

#[test]
fn output_ranges_and_finiteness() {
    let config = tiny();
    let grid = config.grid;
    let mut net = ForkNet::<f32>::new(config, 4).unwrap();
    let arch = net.arch.clone();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut net.params, Mode::Infer, &[]);
    let zero = ctx.tape.constant(Tensor::zeros(&batch_shape(1, grid)).unwrap());
    let code = arch.encode(&mut ctx, zero, None).unwrap();
    assert!(ctx.tape.value(code.mean).is_finite());
    assert!(ctx.tape.value(code.logvar).is_finite());

    let z = ctx.tape.constant(volume(&[2, 4, 1, 1, 1], 5).map(forknet::tensor::UnaryOp::Scale(3.0)));
    let d = arch.decode(&mut ctx, z).unwrap();
    assert!(ctx.tape.value(d.sdf).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    for v in [d.geometry, d.semantic] {
        assert!(ctx.tape.value(v).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let dx = arch.discriminate(&mut ctx, Critic::Sdf, d.sdf).unwrap();
    assert!(ctx.tape.value(dx).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn zero_parameters_give_half_occupancy() {
    let config = tiny();
    let mut net = ForkNet::<f32>::new(config, 6).unwrap();
    for p in net.params.iter_mut().filter(|p| p.kind == ParamKind::Trainable) {
        p.value.data_mut().fill(0.0);
    }
    let arch = net.arch.clone();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut net.params, Mode::Infer, &[]);
    let z = ctx.tape.constant(volume(&[1, 4, 1, 1, 1], 7));
    let g = arch.generate(&mut ctx, Branch::Geometry, z, None).unwrap();
    assert!(ctx.tape.value(g.output).data().iter().all(|&v| v == 0.5));
}

#[test]
fn disabled_skip_source_is_well_formed() {
    let config = ForkNetConfig {
        skip_source: SkipSource::Disabled,
        ..tiny()
    };
    let mut net = ForkNet::<f32>::new(config, 8).unwrap();
    let arch = net.arch.clone();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut net.params, Mode::Infer, &[]);
    let z = ctx.tape.constant(volume(&[1, 4, 1, 1, 1], 9));
    let d = arch.decode(&mut ctx, z).unwrap();
    assert_eq!(ctx.tape.shape(d.semantic), [1, 4, 16, 16, 16]);
    assert!(ctx.tape.value(d.semantic).is_finite());
}

#[test]
fn infer_mode_is_deterministic() {
    let config = tiny();
    let x = volume(&batch_shape(1, config.grid), 10);
    let run = || {
        let mut net = ForkNet::<f32>::new(config.clone(), 11).unwrap();
        let arch = net.arch.clone();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut net.params, Mode::Infer, &[]);
        let xv = ctx.tape.constant(x.clone());
        let code = arch.encode(&mut ctx, xv, None).unwrap();
        let d = arch.decode(&mut ctx, code.z).unwrap();
        ctx.tape.value(d.semantic).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn sample_latent_statistics() {
    let mu = |seed| volume(&[4, 1, 1, 2], seed);
    let batch: Vec<LatentCode<f64>> = (0..3)
        .map(|s| {
            let m = mu(20 + s).cast::<f64>();
            LatentCode {
                logvar: Tensor::zeros(m.shape()).unwrap(),
                z: m.clone(),
                mean: m,
            }
        })
        .collect();
    let center: Vec<f64> = (0..8)
        .map(|i| batch.iter().map(|c| c.mean.data()[i]).sum::<f64>() / 3.0)
        .collect();
    let n = 10_000;
    let mut sum = vec![0.0; 8];
    for seed in 0..n {
        let z = sample_latent(&batch, 1.0, seed).unwrap().z;
        sum.iter_mut().zip(z.data()).for_each(|(s, v)| *s += v);
    }
    for (s, c) in sum.iter().zip(&center) {
        assert!((s / n as f64 - c).abs() <= 0.03);
    }
}

#[test]
fn parameter_count_depends_only_on_config() {
    let a = ForkNet::<f32>::new(tiny(), 1).unwrap();
    let b = ForkNet::<f32>::new(tiny(), 2).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.fnck");
    save_checkpoint(&path, &a).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.parameter_count(), a.parameter_count());
    assert_eq!(back.config(), a.config());
}
