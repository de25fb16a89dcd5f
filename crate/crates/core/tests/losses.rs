use forknet::autograd::{Tape, Var};
use forknet::losses::{
    loss_auto, loss_consistency, loss_discriminators, loss_generators, loss_kl, loss_pred, loss_recon,
    per_category_error,
};
use forknet::model::{ForkNet, ForkNetConfig};
use forknet::nn::{Ctx, Mode};
use forknet::tensor::{Fill, Tensor};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::new(shape, Fill::Uniform { lo, hi, seed }).unwrap()
}

fn one_hot(shape: &[usize], seed: u64) -> Tensor<f64> {
    let (b, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let pick = uniform(&[b * v], 0.0, c as f64, seed);
    let mut data = vec![0.0; b * c * v];
    for bi in 0..b {
        for vi in 0..v {
            let k = (pick.data()[bi * v + vi] as usize).min(c - 1);
            data[(bi * c + k) * v + vi] = 1.0;
        }
    }
    t(shape, data)
}

fn eval2(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = f(&mut tape, x, y);
    tape.value(l).data()[0]
}

#[test]
fn per_category_error_identities() {
    let ones = t(&[4], vec![1.0; 4]);
    for lambda in [0.0, 0.3, 0.5, 1.0] {
        assert!(eval2(&ones, &ones, |tp, q, r| per_category_error(tp, q, r, lambda).unwrap()).abs() <= 1e-5);
    }
    let q = uniform(&[64], 0.0, 1.0, 1);
    let zeros = t(&[64], vec![0.0; 64]);
    assert_eq!(eval2(&q, &zeros, |tp, q, r| per_category_error(tp, q, r, 1.0).unwrap()), 0.0);
    let half = t(&[1], vec![0.5]);
    let one = t(&[1], vec![1.0]);
    let v = eval2(&half, &one, |tp, q, r| per_category_error(tp, q, r, 0.5).unwrap());
    assert!((v - 0.34657).abs() < 1e-5);
}

#[test]
fn lambda_masks_gradients_elementwise() {
    let q = uniform(&[2, 3, 2, 2, 2], 0.05, 0.95, 2);
    let r = one_hot(&[2, 3, 2, 2, 2], 3);
    for (lambda, masked) in [(1.0, 0.0), (0.0, 1.0)] {
        let mut tape = Tape::new();
        let qv = tape.leaf(q.clone(), true);
        let rv = tape.constant(r.clone());
        let l = per_category_error(&mut tape, qv, rv, lambda).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(qv).unwrap();
        for (gi, ri) in g.iter().zip(r.data()) {
            if *ri == masked {
                assert_eq!(*gi, 0.0);
            } else {
                assert!(*gi != 0.0);
            }
        }
    }
}

#[test]
fn pred_reduces_to_recon_for_one_class() {
    let q = uniform(&[2, 2, 2, 4, 2], 0.01, 0.99, 4);
    let r = one_hot(&[2, 2, 2, 4, 2], 5);
    for lambda in [0.5, 0.9] {
        let a = eval2(&q, &r, |tp, q, r| loss_pred(tp, q, r, lambda).unwrap());
        let b = eval2(&q, &r, |tp, q, r| loss_recon(tp, q, r, lambda).unwrap());
        assert_eq!(a, b);
    }
}

#[test]
fn perfect_prediction_is_near_zero() {
    let r = one_hot(&[1, 4, 3, 3, 3], 6);
    assert!(eval2(&r, &r, |tp, q, r| loss_pred(tp, q, r, 0.6).unwrap()) <= 1e-5);
    let g = one_hot(&[1, 2, 3, 3, 3], 7);
    assert!(eval2(&g, &g, |tp, q, r| loss_recon(tp, q, r, 0.5).unwrap()) <= 1e-5);
}

#[test]
fn half_occupancy_gives_ln2() {
    let g = t(&[1, 2, 2, 2, 2], vec![0.5; 16]);
    let gt = one_hot(&[1, 2, 2, 2, 2], 8);
    let v = eval2(&g, &gt, |tp, q, r| loss_recon(tp, q, r, 0.5).unwrap());
    assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn uniform_semantics_hand_value() {
    let n = 3;
    let shape = [2, n + 1, 3, 2, 3];
    let s = Tensor::new(&shape, Fill::Constant(1.0 / (n + 1) as f64)).unwrap();
    let gt = one_hot(&shape, 9);
    let lambda = 0.5;
    let p = 1.0 / (n + 1) as f64;
    // per voxel: the true channel contributes −λ ln p, each other −(1−λ) ln(1−p)
    let hand = -lambda * p.ln() - n as f64 * (1.0 - lambda) * (1.0 - p).ln();
    let v = eval2(&s, &gt, |tp, q, r| loss_pred(tp, q, r, lambda).unwrap());
    assert!((v - hand).abs() <= 1e-5, "{v} vs {hand}");
}

#[test]
fn loss_auto_matches_elementwise_oracle() {
    let a = uniform(&[1, 1, 4, 3, 5], -1.0, 1.0, 10);
    let b = uniform(&[1, 1, 4, 3, 5], -1.0, 1.0, 11);
    let oracle = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    assert!((eval2(&a, &b, |tp, x, y| loss_auto(tp, x, y).unwrap()) - oracle).abs() <= 1e-6);
    assert_eq!(eval2(&a, &a, |tp, x, y| loss_auto(tp, x, y).unwrap()), 0.0);
    let shifted = Tensor::from_vec(a.shape(), a.data().iter().map(|v| v + 1.0).collect()).unwrap();
    assert!((eval2(&shifted, &a, |tp, x, y| loss_auto(tp, x, y).unwrap()) - 1.0).abs() < 1e-12);
}

#[test]
fn generator_loss_is_monotone() {
    let mut last = -1.0;
    for p in [0.99, 0.8, 0.5, 0.2, 0.01] {
        let d = t(&[1, 1, 2, 1, 2], vec![p; 4]);
        let (gx, _) = {
            let mut tape = Tape::new();
            let v = tape.constant(d.clone());
            let (a, b) = loss_generators(&mut tape, v, v);
            (tape.value(a).data()[0], tape.value(b).data()[0])
        };
        assert!(gx > last);
        last = gx;
    }
}

#[test]
fn discriminator_loss_swap_symmetry() {
    let real = uniform(&[2, 1, 2, 1, 2], 0.05, 0.95, 12);
    let fake = uniform(&[2, 1, 2, 1, 2], 0.05, 0.95, 13);
    let flip = |x: &Tensor<f64>| Tensor::from_vec(x.shape(), x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
    let run = |r: &Tensor<f64>, f: &Tensor<f64>| {
        let mut tape = Tape::new();
        let (rv, fv) = (tape.constant(r.clone()), tape.constant(f.clone()));
        let (a, b) = loss_discriminators(&mut tape, rv, fv, rv, fv).unwrap();
        (tape.value(a).data()[0], tape.value(b).data()[0])
    };
    let (a, b) = run(&real, &fake);
    let (c, d) = run(&flip(&fake), &flip(&real));
    assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
    let half = t(&[1, 1, 1, 1, 1], vec![0.5]);
    let (h, _) = run(&half, &half);
    assert!((h - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn kl_closed_form() {
    let one = t(&[1], vec![1.0]);
    let zero = t(&[1], vec![0.0]);
    assert!((eval2(&one, &zero, |tp, m, l| loss_kl(tp, m, l).unwrap()) - 0.5).abs() < 1e-12);
    assert_eq!(eval2(&zero, &zero, |tp, m, l| loss_kl(tp, m, l).unwrap()), 0.0);
    for seed in 0..20 {
        let m = uniform(&[8], -2.0, 2.0, 100 + seed);
        let l = uniform(&[8], -3.0, 3.0, 200 + seed);
        assert!(eval2(&m, &l, |tp, m, l| loss_kl(tp, m, l).unwrap()) >= 0.0);
    }
}

/// `loss_pred(G_s(E(G_x̂(z))), onehot(argmax G_s(z)), λ)` assembled from
/// separate forward passes, with the argmax done by hand.
fn consistency_oracle(net: &mut ForkNet<f64>, z: &Tensor<f64>, lambda: f64) -> f64 {
    let arch = net.arch.clone();
    let (x_tilde, s_tilde) = {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut net.params, Mode::Infer, &[]);
        let zv = ctx.tape.constant(z.clone());
        let d = arch.decode(&mut ctx, zv).unwrap();
        (ctx.tape.value(d.sdf).clone(), ctx.tape.value(d.semantic).clone())
    };
    let shape = s_tilde.shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let mut target = vec![0.0; s_tilde.len()];
    for bi in 0..b {
        for vi in 0..v {
            let mut best = 0;
            for k in 1..c {
                if s_tilde.data()[(bi * c + k) * v + vi] > s_tilde.data()[(bi * c + best) * v + vi] {
                    best = k;
                }
            }
            target[(bi * c + best) * v + vi] = 1.0;
        }
    }
    let s_hat = {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut net.params, Mode::Infer, &[]);
        let xv = ctx.tape.constant(x_tilde);
        let code = arch.encode(&mut ctx, xv, None).unwrap();
        let s = arch.semantics(&mut ctx, code.mean).unwrap();
        ctx.tape.value(s).clone()
    };
    eval2(&s_hat, &t(&shape, target), |tp, q, r| loss_pred(tp, q, r, lambda).unwrap())
}

#[test]
fn consistency_matches_compositional_oracle() {
    let config = ForkNetConfig {
        grid: [16, 16, 16],
        classes: 3,
        encoder_widths: [4; 4],
        latent_channels: 4,
        generator_widths: [4; 3],
        discriminator_widths: [2; 3],
        ..ForkNetConfig::default()
    };
    let mut net = ForkNet::<f32>::new(config, 14).unwrap().cast::<f64>();
    let z = uniform(&[2, 4, 1, 1, 1], -2.0, 2.0, 15);
    let oracle = consistency_oracle(&mut net, &z, 0.6);
    let arch = net.arch.clone();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut net.params, Mode::Infer, &[]);
    let zv = ctx.tape.constant(z);
    let l = loss_consistency(&arch, &mut ctx, zv, 0.6).unwrap();
    let v = ctx.tape.value(l).data()[0];
    assert!((v - oracle).abs() <= 1e-6, "{v} vs {oracle}");
}
