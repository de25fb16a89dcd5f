//! Training objectives. Every function records onto the tape and returns a
//! scalar variable.
//!
//! Cross-entropies are averaged over voxels and summed over channels;
//! probabilities pass through a log clamped at [`LOG_EPS`](crate::tensor::LOG_EPS).

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::binarize;
use crate::model::Architecture;
use crate::nn::Ctx;
use crate::tensor::{Element, Tensor};

/// Batch means of every objective, plus the λ values in effect.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_auto: f64,
    pub l_recon: f64,
    pub l_pred: f64,
    pub l_gen_x: f64,
    pub l_gen_s: f64,
    pub l_dis_x: f64,
    pub l_dis_s: f64,
    pub l_kl: f64,
    pub l_consistency: f64,
    pub lambda_geo: f64,
    pub lambda_sem: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("l_auto", self.l_auto),
            ("l_recon", self.l_recon),
            ("l_pred", self.l_pred),
            ("l_gen_x", self.l_gen_x),
            ("l_gen_s", self.l_gen_s),
            ("l_dis_x", self.l_dis_x),
            ("l_dis_s", self.l_dis_s),
            ("l_kl", self.l_kl),
            ("l_consistency", self.l_consistency),
        ]
    }

    /// Fails on the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        match self.terms().iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFinite { term: term.to_string() }),
            None => Ok(()),
        }
    }
}

fn same_shape<T: Element>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Elementwise `−λ·r·log q − (1−λ)·(1−r)·log(1−q)`, summed.
fn weighted_bce_sum<T: Element>(tape: &mut Tape<T>, q: Var, r: Var, lambda: f64) -> Result<Var> {
    same_shape(tape, q, r, "cross-entropy")?;
    let log_q = tape.log_clamped(q);
    let not_q = tape.affine(q, -1.0, 1.0);
    let log_not_q = tape.log_clamped(not_q);
    let not_r = tape.affine(r, -1.0, 1.0);
    let pos = tape.mul(r, log_q)?;
    let neg = tape.mul(not_r, log_not_q)?;
    let pos = tape.scale(pos, -lambda);
    let neg = tape.scale(neg, -(1.0 - lambda));
    let e = tape.add(pos, neg)?;
    Ok(tape.sum(e))
}

/// Mean over all elements of the λ-weighted cross-entropy.
pub fn per_category_error<T: Element>(tape: &mut Tape<T>, q: Var, r: Var, lambda: f64) -> Result<Var> {
    let n = tape.value(q).len();
    let s = weighted_bce_sum(tape, q, r, lambda)?;
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// `Σ_c per_category_error(q_c, r_c, λ)` over the channel axis (axis 1 of
/// a `[B, C, …]` batch, axis 0 otherwise); each channel is averaged over
/// batch and space.
pub fn channel_error<T: Element>(tape: &mut Tape<T>, q: Var, r: Var, lambda: f64) -> Result<Var> {
    let shape = tape.shape(q);
    let channels = match shape.len() {
        5 => shape[1],
        4 => shape[0],
        _ => return Err(Error::Shape(format!("channel error on {shape:?}"))),
    };
    let voxels = tape.value(q).len() / channels;
    let s = weighted_bce_sum(tape, q, r, lambda)?;
    Ok(tape.scale(s, 1.0 / voxels as f64))
}

/// Mean squared difference.
pub fn loss_auto<T: Element>(tape: &mut Tape<T>, x_hat: Var, x: Var) -> Result<Var> {
    same_shape(tape, x_hat, x, "loss_auto")?;
    let d = tape.sub(x_hat, x)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Geometric completion cross-entropy over the 2 occupancy channels.
pub fn loss_recon<T: Element>(tape: &mut Tape<T>, g: Var, g_gt: Var, lambda: f64) -> Result<Var> {
    channel_error(tape, g, g_gt, lambda)
}

/// Semantic completion cross-entropy over the `N + 1` class channels.
pub fn loss_pred<T: Element>(tape: &mut Tape<T>, s: Var, s_gt: Var, lambda: f64) -> Result<Var> {
    channel_error(tape, s, s_gt, lambda)
}

fn mean_neg_log<T: Element>(tape: &mut Tape<T>, p: Var) -> Var {
    let l = tape.log_clamped(p);
    let m = tape.mean(l);
    tape.scale(m, -1.0)
}

fn mean_neg_log_complement<T: Element>(tape: &mut Tape<T>, p: Var) -> Var {
    let c = tape.affine(p, -1.0, 1.0);
    mean_neg_log(tape, c)
}

/// `(mean −log D_x(fake), mean −log D_s(fake))`.
pub fn loss_generators<T: Element>(tape: &mut Tape<T>, dx_fake: Var, ds_fake: Var) -> (Var, Var) {
    (mean_neg_log(tape, dx_fake), mean_neg_log(tape, ds_fake))
}

/// `mean −log D(real) + mean −log(1 − D(fake))` for each discriminator.
pub fn loss_discriminators<T: Element>(
    tape: &mut Tape<T>,
    dx_real: Var,
    dx_fake: Var,
    ds_real: Var,
    ds_fake: Var,
) -> Result<(Var, Var)> {
    let a = mean_neg_log(tape, dx_real);
    let b = mean_neg_log_complement(tape, dx_fake);
    let c = mean_neg_log(tape, ds_real);
    let d = mean_neg_log_complement(tape, ds_fake);
    Ok((tape.add(a, b)?, tape.add(c, d)?))
}

/// Mean of `½(μ² + exp(logvar) − 1 − logvar)`.
pub fn loss_kl<T: Element>(tape: &mut Tape<T>, mean: Var, logvar: Var) -> Result<Var> {
    same_shape(tape, mean, logvar, "loss_kl")?;
    let m2 = tape.square(mean);
    let ev = tape.exp(logvar);
    let a = tape.add(m2, ev)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.affine(b, 0.5, -0.5);
    Ok(tape.mean(c))
}

/// One-hot per-voxel argmax of a `[B, C, …]` probability batch.
pub fn binarized_target<T: Element>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = s.shape();
    if shape.len() != 5 {
        return Err(Error::Shape(format!("binarized target of {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let labels = binarize(s)?;
    let mut data = vec![T::zero(); s.len()];
    for bi in 0..b {
        for vi in 0..v {
            let l = labels[bi * v + vi] as usize;
            data[(bi * c + l) * v + vi] = T::one();
        }
    }
    Tensor::from_vec(shape, data)
}

/// Re-encodes generated SDFs and scores the semantic prediction of that
/// encoding against a fixed target: `loss_pred(G_s(E(x̃)), target, λ)`.
/// The encoding uses the latent mean.
pub fn loss_consistency_against<T: Element>(
    arch: &Architecture,
    ctx: &mut Ctx<'_, T>,
    x_tilde: Var,
    target: &Tensor<T>,
    lambda: f64,
) -> Result<Var> {
    let code = arch.encode(ctx, x_tilde, None)?;
    let s_hat = arch.semantics(ctx, code.mean)?;
    let target = ctx.tape.constant(target.clone());
    loss_pred(ctx.tape, s_hat, target, lambda)
}

/// The full pair-consistency objective for a batch of sampled codes `z`:
/// generates `x̃ = G_x̂(z)` and `s̃ = G_s(z)`, binarizes `s̃` into a
/// detached target, and scores `G_s(E(x̃))` against it.
pub fn loss_consistency<T: Element>(arch: &Architecture, ctx: &mut Ctx<'_, T>, z: Var, lambda: f64) -> Result<Var> {
    let decoded = arch.decode(ctx, z)?;
    let target = binarized_target(ctx.tape.value(decoded.semantic))?;
    loss_consistency_against(arch, ctx, decoded.sdf, &target, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn hand_evaluated_examples() {
        let mut t = Tape::<f64>::new();
        let q = t.constant(Tensor::from_vec(&[1], vec![0.5]).unwrap());
        let r = t.constant(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let e = per_category_error(&mut t, q, r, 0.5).unwrap();
        assert!((value(&t, e) - 0.5 * 2f64.ln()).abs() < 1e-12);

        let x = t.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.constant(Tensor::from_vec(&[3], vec![2.0, 3.0, 4.0]).unwrap());
        let l = loss_auto(&mut t, y, x).unwrap();
        assert_eq!(value(&t, l), 1.0);

        let mu = t.constant(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let lv = t.constant(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let kl = loss_kl(&mut t, mu, lv).unwrap();
        assert!((value(&t, kl) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adversarial_terms_at_half() {
        let mut t = Tape::<f64>::new();
        let half = t.constant(Tensor::new(&[1, 1, 2, 1, 2], Fill::Constant(0.5)).unwrap());
        let (gx, gs) = loss_generators(&mut t, half, half);
        assert!((value(&t, gx) - 2f64.ln()).abs() < 1e-12);
        assert!((value(&t, gs) - 2f64.ln()).abs() < 1e-12);
        let (dx, _) = loss_discriminators(&mut t, half, half, half, half).unwrap();
        assert!((value(&t, dx) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 2]).unwrap());
        let b = t.constant(Tensor::zeros(&[4]).unwrap());
        assert!(matches!(loss_auto(&mut t, a, b), Err(Error::Shape(_))));
        assert!(per_category_error(&mut t, a, b, 0.5).is_err());
    }
}
