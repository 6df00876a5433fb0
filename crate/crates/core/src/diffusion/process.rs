use super::schedule::NoiseSchedule;
use crate::arch::StoicModel;
use crate::error::{Result, StoicError};
use crate::numerics::{Element, Tensor};

/// Anything that predicts the noise `ε̂(x_t, t[, c])` for a batch.
pub trait EpsModel<E: Element> {
    fn predict(
        &self,
        x_t: &Tensor<E>,
        t: &[usize],
        context: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>>;
}

impl<E: Element, F> EpsModel<E> for F
where
    F: Fn(&Tensor<E>, &[usize], Option<&Tensor<E>>) -> Result<Tensor<E>>,
{
    fn predict(
        &self,
        x_t: &Tensor<E>,
        t: &[usize],
        context: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        self(x_t, t, context)
    }
}

impl<E: Element> EpsModel<E> for StoicModel<E> {
    fn predict(
        &self,
        x_t: &Tensor<E>,
        t: &[usize],
        context: Option<&Tensor<E>>,
    ) -> Result<Tensor<E>> {
        self.forward(x_t, t, context)
    }
}

fn same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(StoicError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn map2<E: Element>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor<E>> {
    same_shape(op, a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| E::from_f64(f(x.as_f64(), y.as_f64())))
        .collect();
    Tensor::from_vec(data, a.shape())
}

fn map3<E: Element>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    c: &Tensor<E>,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Tensor<E>> {
    same_shape(op, a, b)?;
    same_shape(op, a, c)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| E::from_f64(f(x.as_f64(), y.as_f64(), z.as_f64())))
        .collect();
    Tensor::from_vec(data, a.shape())
}

/// Per-sample factor lookup: element `i` of a `[B, ...]` tensor belongs to sample `i / per`.
fn per_sample<E: Element>(op: &'static str, x: &Tensor<E>, t: &[usize]) -> Result<usize> {
    if x.rank() == 0 || x.shape()[0] != t.len() {
        return Err(StoicError::shape(
            op,
            format!("{} timesteps for shape {:?}", t.len(), x.shape()),
        ));
    }
    Ok(x.numel() / t.len().max(1))
}

/// `x_t = √ᾱₜ·x₀ + √(1 − ᾱₜ)·ε` for a single timestep.
pub fn forward_sample<E: Element>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    sched.check_t("forward_sample", t)?;
    let (a, s) = (sched.signal(t), sched.sigma(t));
    map2("forward_sample", x0, eps, |x, e| a * x + s * e)
}

/// [`forward_sample`] with one timestep per leading-axis sample.
pub fn forward_sample_batch<E: Element>(
    x0: &Tensor<E>,
    t: &[usize],
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    same_shape("forward_sample", x0, eps)?;
    let per = per_sample("forward_sample", x0, t)?;
    let mut data = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        sched.check_t("forward_sample", ti)?;
        let (a, s) = (sched.signal(ti), sched.sigma(ti));
        let range = i * per..(i + 1) * per;
        data.extend(
            x0.data()[range.clone()]
                .iter()
                .zip(&eps.data()[range])
                .map(|(&x, &e)| E::from_f64(a * x.as_f64() + s * e.as_f64())),
        );
    }
    Tensor::from_vec(data, x0.shape())
}

/// `mean ‖ε − ε̂(x_t, t[, c])‖²` over batch and elements.
pub fn ddpm_loss<E: Element, M: EpsModel<E> + ?Sized>(
    net: &M,
    x0: &Tensor<E>,
    t: &[usize],
    eps: &Tensor<E>,
    context: Option<&Tensor<E>>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let x_t = forward_sample_batch(x0, t, eps, sched)?;
    let eps_hat = net.predict(&x_t, t, context)?;
    eps_hat.mse(eps)
}

/// Score-matching loss weighted by σₜ²: `mean ‖σₜ·s − σₜ·∇log p(x_t | x₀)‖²` with
/// `∇log p(x_t | x₀) = −(x_t − √ᾱₜ x₀)/σₜ²`.
pub fn ncsn_score_loss<E: Element>(
    score: &Tensor<E>,
    x_t: &Tensor<E>,
    x0: &Tensor<E>,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    same_shape("ncsn_score_loss", score, x_t)?;
    same_shape("ncsn_score_loss", score, x0)?;
    let per = per_sample("ncsn_score_loss", score, t)?;
    let mut sigma = Vec::with_capacity(score.numel());
    let mut target = Vec::with_capacity(score.numel());
    for (i, &ti) in t.iter().enumerate() {
        sched.check_t("ncsn_score_loss", ti)?;
        let (a, s) = (sched.signal(ti), sched.sigma(ti));
        for j in i * per..(i + 1) * per {
            sigma.push(E::from_f64(s));
            target.push(E::from_f64(
                -(x_t.data()[j].as_f64() - a * x0.data()[j].as_f64()) / s,
            ));
        }
    }
    let weighted = score.mul(&Tensor::from_vec(sigma, score.shape())?)?;
    weighted.mse(&Tensor::from_vec(target, score.shape())?)
}

/// `s = −ε̂/σₜ`.
pub fn score_from_eps<E: Element>(
    eps_hat: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let sigma = sched.sigma(t);
    if t > sched.steps || sigma == 0.0 {
        return Err(StoicError::invalid(
            "score_from_eps",
            format!("σ_t is zero or undefined at t = {t}"),
        ));
    }
    let data = eps_hat
        .data()
        .iter()
        .map(|&e| E::from_f64(-e.as_f64() / sigma))
        .collect();
    Tensor::from_vec(data, eps_hat.shape())
}

/// `x̂₀ = x_t/√ᾱₜ − σₜ·ε̂/√ᾱₜ`.
pub fn reconstruct_x0<E: Element>(
    x_t: &Tensor<E>,
    eps_hat: &Tensor<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    sched.check_t("reconstruct_x0", t)?;
    let (a, s) = (sched.signal(t), sched.sigma(t));
    if a == 0.0 {
        return Err(StoicError::invalid(
            "reconstruct_x0",
            format!("ᾱ_t underflows to zero at t = {t}"),
        ));
    }
    map2("reconstruct_x0", x_t, eps_hat, |x, e| x / a - s * e / a)
}

/// Classifier-free guidance `ε̃ = ε_u + g(ε_c − ε_u)`; `g = 1` returns `ε_c` bit for bit.
pub fn cfg_eps<E: Element>(
    eps_cond: &Tensor<E>,
    eps_uncond: &Tensor<E>,
    g: f64,
) -> Result<Tensor<E>> {
    same_shape("cfg_eps", eps_cond, eps_uncond)?;
    if g == 1.0 {
        return Ok(eps_cond.detach());
    }
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| u + E::from_f64(g) * (c - u))
        .collect();
    Tensor::from_vec(data, eps_cond.shape())
}

/// One reverse DDPM step `t → t − 1` with posterior variance β̃ₜ; no noise at `t = 1`.
pub fn ancestral_step<E: Element>(
    x_t: &Tensor<E>,
    t: usize,
    eps_hat: &Tensor<E>,
    sched: &NoiseSchedule,
    noise: &Tensor<E>,
) -> Result<Tensor<E>> {
    sched.check_t("ancestral_step", t)?;
    let beta = sched.beta_at(t);
    let coef = beta / sched.sigma(t);
    let scale = 1.0 / (1.0 - beta).sqrt();
    let std = if t == 1 {
        0.0
    } else {
        sched.posterior_variance(t).sqrt()
    };
    map3("ancestral_step", x_t, eps_hat, noise, |x, e, z| {
        (x - coef * e) * scale + std * z
    })
}

/// Reverse step between two timesteps of a strided subsequence, using the respaced
/// `β' = 1 − ᾱ_t/ᾱ_{t_prev}`. Adjacent steps defer to [`ancestral_step`]; `t_prev = 0`
/// is the noise-free final step.
pub fn ancestral_step_between<E: Element>(
    x_t: &Tensor<E>,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor<E>,
    sched: &NoiseSchedule,
    noise: &Tensor<E>,
) -> Result<Tensor<E>> {
    sched.check_t("ancestral_step", t)?;
    if t_prev >= t {
        return Err(StoicError::invalid(
            "ancestral_step",
            format!("t_prev {t_prev} must precede t {t}"),
        ));
    }
    if t_prev + 1 == t {
        return ancestral_step(x_t, t, eps_hat, sched, noise);
    }
    let (ab, ab_prev) = (sched.alpha_bar_at(t), sched.alpha_bar_at(t_prev));
    let beta = 1.0 - ab / ab_prev;
    let coef = beta / (1.0 - ab).sqrt();
    let scale = 1.0 / (1.0 - beta).sqrt();
    let std = if t_prev == 0 {
        0.0
    } else {
        (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
    };
    map3("ancestral_step", x_t, eps_hat, noise, |x, e, z| {
        (x - coef * e) * scale + std * z
    })
}

/// Reverse VP-SDE Euler–Maruyama step:
/// `x' = x + [−½β(t)x − β(t)·score]·dt + √(β(t)|dt|)·noise` with `dt < 0`.
pub fn euler_maruyama_step<E: Element>(
    x: &Tensor<E>,
    t: f64,
    dt: f64,
    score: &Tensor<E>,
    sched: &NoiseSchedule,
    noise: &Tensor<E>,
) -> Result<Tensor<E>> {
    if !(t > 0.0 && t <= 1.0) || dt >= 0.0 {
        return Err(StoicError::invalid(
            "euler_maruyama_step",
            format!("need 0 < t <= 1 and dt < 0, got t = {t}, dt = {dt}"),
        ));
    }
    let beta = sched.sde_beta(t);
    let diffusion = (beta * dt.abs()).sqrt();
    map3("euler_maruyama_step", x, score, noise, |x, s, z| {
        x + (-0.5 * beta * x - beta * s) * dt + diffusion * z
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), &[v.len()]).unwrap()
    }

    fn quarter() -> NoiseSchedule {
        // ᾱ₁ = 0.25
        make_schedule(1, 0.75, 0.75).unwrap()
    }

    #[test]
    fn forward_and_reconstruct_closed_forms() {
        let s = quarter();
        let xt = forward_sample(&t1(&[2.0]), 1, &t1(&[1.0]), &s).unwrap();
        assert!((xt.data()[0] - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((xt.data()[0] - 1.8660).abs() < 1e-4);
        let x0 = reconstruct_x0(&xt, &t1(&[1.0]), 1, &s).unwrap();
        assert!((x0.data()[0] - 2.0).abs() < 1e-12);
        let z = forward_sample(&t1(&[2.0]), 1, &t1(&[0.0]), &s).unwrap();
        assert_eq!(z.data(), &[1.0]);
        assert!(forward_sample(&t1(&[2.0]), 2, &t1(&[0.0]), &s).is_err());
    }

    #[test]
    fn score_conversion() {
        let s = quarter();
        let sigma = s.sigma(1);
        let e = t1(&[0.2, -1.0, 0.0]);
        let score = score_from_eps(&e, 1, &s).unwrap();
        for (sc, ev) in score.data().iter().zip(e.data()) {
            assert!((sigma * sc + ev).abs() < 1e-15);
        }
        assert!(score_from_eps(&e, 0, &s).is_err());
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let c = t1(&[0.3, -1.7, 2.5]);
        let u = t1(&[1.1, 0.4, -0.9]);
        assert_eq!(cfg_eps(&c, &u, 0.0).unwrap().data(), u.data());
        assert_eq!(cfg_eps(&c, &u, 1.0).unwrap().data(), c.data());
        assert_eq!(cfg_eps(&c, &c, 3.7).unwrap().data(), c.data());
    }

    #[test]
    fn ancestral_step_collapses() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let x = t1(&[1.5, -0.5]);
        let zero = t1(&[0.0, 0.0]);
        let y = ancestral_step(&x, 4, &zero, &s, &zero).unwrap();
        let k = 1.0 / (1.0 - s.beta_at(4)).sqrt();
        assert_eq!(y.data(), &[1.5 * k, -0.5 * k]);
        let noisy = ancestral_step(&x, 1, &zero, &s, &t1(&[9.0, 9.0])).unwrap();
        let quiet = ancestral_step(&x, 1, &zero, &s, &zero).unwrap();
        assert_eq!(noisy.data(), quiet.data());
    }

    #[test]
    fn strided_step_to_zero_is_reconstruction() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let x = t1(&[0.7, -1.2]);
        let e = t1(&[0.1, 0.4]);
        let y = ancestral_step_between(&x, 10, 0, &e, &s, &t1(&[5.0, 5.0])).unwrap();
        let r = reconstruct_x0(&x, &e, 10, &s).unwrap();
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn em_step_collapses() {
        let s = make_schedule(10, 0.01, 0.2)
            .unwrap()
            .with_sde(0.0, 0.0)
            .unwrap();
        let x = t1(&[1.0, 2.0]);
        let y =
            euler_maruyama_step(&x, 0.5, -0.01, &t1(&[3.0, 3.0]), &s, &t1(&[1.0, 1.0])).unwrap();
        assert_eq!(y.data(), x.data());
        let s = s.with_sde(0.1, 20.0).unwrap();
        let zero = t1(&[0.0, 0.0]);
        let y = euler_maruyama_step(&x, 0.5, -0.01, &zero, &s, &zero).unwrap();
        let b = s.sde_beta(0.5);
        assert!((y.data()[1] - 2.0 * (1.0 - 0.5 * b * -0.01)).abs() < 1e-12);
        assert!(euler_maruyama_step(&x, 0.5, 0.01, &zero, &s, &zero).is_err());
    }

    #[test]
    fn perfect_and_zero_predictors() {
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let x0 = Tensor::from_vec((0..8).map(|i| i as f64 * 0.1).collect(), &[2, 4]).unwrap();
        let eps = Tensor::from_vec((0..8).map(|i| (i as f64).sin()).collect(), &[2, 4]).unwrap();
        let t = [3, 40];
        let oracle =
            |xt: &Tensor<f64>, tt: &[usize], _: Option<&Tensor<f64>>| -> Result<Tensor<f64>> {
                let mut out = Vec::new();
                for (i, &ti) in tt.iter().enumerate() {
                    for j in 0..4 {
                        out.push(
                            (xt.data()[i * 4 + j] - s.signal(ti) * x0.data()[i * 4 + j])
                                / s.sigma(ti),
                        );
                    }
                }
                Tensor::from_vec(out, xt.shape())
            };
        let loss = ddpm_loss(&oracle, &x0, &t, &eps, None, &s).unwrap();
        assert!(loss.item().unwrap() < 1e-24);
        let zero = |xt: &Tensor<f64>,
                    _: &[usize],
                    _: Option<&Tensor<f64>>|
         -> Result<Tensor<f64>> { Ok(Tensor::zeros(xt.shape())) };
        let l0 = ddpm_loss(&zero, &x0, &t, &eps, None, &s)
            .unwrap()
            .item()
            .unwrap();
        let want = eps.data().iter().map(|e| e * e).sum::<f64>() / 8.0;
        assert!((l0 - want).abs() < 1e-15);
    }
}
