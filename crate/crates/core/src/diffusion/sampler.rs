use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::process::{ancestral_step_between, cfg_eps, euler_maruyama_step, EpsModel};
use super::schedule::{NoiseSchedule, SDE_EPS};
use crate::arch::ImageDims;
use crate::error::{Result, StoicError};
use crate::numerics::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Ancestral,
    EulerMaruyama,
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampler::Ancestral => "ancestral",
            Sampler::EulerMaruyama => "em",
        })
    }
}

impl FromStr for Sampler {
    type Err = StoicError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ancestral" => Ok(Sampler::Ancestral),
            "em" | "euler_maruyama" => Ok(Sampler::EulerMaruyama),
            other => Err(StoicError::Config(format!(
                "unknown sampler `{other}` (expected ancestral or em)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub sampler: Sampler,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Chains evaluated per network call.
    pub chunk: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            sampler: Sampler::Ancestral,
            steps: 1000,
            guidance: 1.0,
            seed: 0,
            chunk: 64,
        }
    }
}

/// Independent stream for chain `index` under `seed`.
pub fn chain_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal<E: Element>(rng: &mut impl Rng, n: usize) -> Vec<E> {
    (0..n)
        .map(|_| E::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Evenly strided descending timesteps from T down to 1 (just `[T]` for one step).
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(StoicError::invalid(
            "sample",
            format!("steps must be in 1..={total}, got {steps}"),
        ));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| 1 + ((total - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

fn noise_batch<E: Element>(
    rngs: &mut [ChaCha8Rng],
    per: usize,
    shape: &[usize],
) -> Result<Tensor<E>> {
    let data: Vec<E> = rngs
        .iter_mut()
        .flat_map(|r| standard_normal::<E>(r, per))
        .collect();
    Tensor::from_vec(data, shape)
}

fn guided<E: Element, M: EpsModel<E> + ?Sized>(
    net: &M,
    x: &Tensor<E>,
    t: &[usize],
    context: Option<&Tensor<E>>,
    guidance: f64,
) -> Result<Tensor<E>> {
    match context {
        None => net.predict(x, t, None),
        Some(ctx) if guidance == 1.0 => net.predict(x, t, Some(ctx)),
        Some(ctx) => {
            let cond = net.predict(x, t, Some(ctx))?;
            let uncond = net.predict(x, t, Some(&Tensor::zeros(ctx.shape())))?;
            cfg_eps(&cond, &uncond, guidance)
        }
    }
}

fn slice_rows<E: Element>(t: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::from_vec(t.data()[start * per..(start + len) * per].to_vec(), &shape)
}

/// Draws `count` samples of shape `[C, H, W]` by running the reverse process from standard
/// normal noise. Chain `i` consumes only its own RNG stream, so results do not depend on
/// the chunk size. With a context, `guidance ≠ 1` mixes in an all-zero-context pass.
pub fn sample<E: Element, M: EpsModel<E> + ?Sized>(
    net: &M,
    sched: &NoiseSchedule,
    image: ImageDims,
    count: usize,
    context: Option<&Tensor<E>>,
    opts: SampleOptions,
) -> Result<Tensor<E>> {
    let per = image.numel();
    let out_shape = [count, image.channels, image.height, image.width];
    if let Some(ctx) = context {
        if ctx.rank() != 3 || ctx.shape()[0] != count {
            return Err(StoicError::shape(
                "sample",
                format!("context {:?} for {count} samples", ctx.shape()),
            ));
        }
    }
    if opts.steps == 0 {
        return Err(StoicError::invalid("sample", "steps must be at least 1"));
    }
    let schedule = match opts.sampler {
        Sampler::Ancestral => strided_timesteps(sched.steps, opts.steps)?,
        Sampler::EulerMaruyama => Vec::new(),
    };
    let chunk = opts.chunk.max(1);
    let mut out = Vec::with_capacity(count * per);
    let mut start = 0;
    while start < count {
        let len = chunk.min(count - start);
        let shape = [len, image.channels, image.height, image.width];
        let mut rngs: Vec<ChaCha8Rng> = (start..start + len)
            .map(|i| chain_rng(opts.seed, i as u64))
            .collect();
        let ctx = context.map(|c| slice_rows(c, start, len)).transpose()?;
        let mut x = noise_batch::<E>(&mut rngs, per, &shape)?;
        match opts.sampler {
            Sampler::Ancestral => {
                for (k, &t) in schedule.iter().enumerate() {
                    let t_prev = schedule.get(k + 1).copied().unwrap_or(0);
                    let eps = guided(net, &x, &vec![t; len], ctx.as_ref(), opts.guidance)?;
                    let noise = if t_prev == 0 {
                        Tensor::zeros(&shape)
                    } else {
                        noise_batch(&mut rngs, per, &shape)?
                    };
                    x = ancestral_step_between(&x, t, t_prev, &eps, sched, &noise)?;
                }
            }
            Sampler::EulerMaruyama => {
                let dt = -(1.0 - SDE_EPS) / opts.steps as f64;
                for k in 0..opts.steps {
                    let t = 1.0 + k as f64 * dt;
                    let idx = sched.discrete_index(t);
                    let eps = guided(net, &x, &vec![idx; len], ctx.as_ref(), opts.guidance)?;
                    let inv_sigma = -1.0 / sched.sde_sigma(t);
                    let score = Tensor::from_vec(
                        eps.data()
                            .iter()
                            .map(|&e| e * E::from_f64(inv_sigma))
                            .collect(),
                        &shape,
                    )?;
                    let last = k + 1 == opts.steps;
                    let noise = if last {
                        Tensor::zeros(&shape)
                    } else {
                        noise_batch(&mut rngs, per, &shape)?
                    };
                    x = euler_maruyama_step(&x, t, dt, &score, sched, &noise)?;
                }
            }
        }
        x.check_finite("sample")?;
        out.extend_from_slice(x.data());
        start += len;
    }
    Tensor::from_vec(out, &out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    fn zero_net(x: &Tensor<f32>, _: &[usize], _: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        Ok(Tensor::zeros(x.shape()))
    }

    #[test]
    fn strided_subsequences() {
        assert_eq!(
            strided_timesteps(10, 10).unwrap(),
            (1..=10).rev().collect::<Vec<_>>()
        );
        assert_eq!(strided_timesteps(10, 4).unwrap(), vec![10, 7, 4, 1]);
        assert_eq!(strided_timesteps(10, 1).unwrap(), vec![10]);
        assert!(strided_timesteps(10, 11).is_err());
    }

    #[test]
    fn deterministic_and_chunk_independent() {
        let s = make_schedule(20, 1e-3, 0.2).unwrap();
        let dims = ImageDims::new(1, 2, 2);
        let net = zero_net;
        let opts = SampleOptions {
            steps: 20,
            seed: 9,
            chunk: 3,
            ..Default::default()
        };
        let a = sample(&net, &s, dims, 7, None, opts).unwrap();
        let b = sample(&net, &s, dims, 7, None, opts).unwrap();
        let c = sample(&net, &s, dims, 7, None, SampleOptions { chunk: 64, ..opts }).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
        let d = sample(&net, &s, dims, 7, None, SampleOptions { seed: 10, ..opts }).unwrap();
        assert_ne!(a.data(), d.data());
        let em = SampleOptions {
            sampler: Sampler::EulerMaruyama,
            steps: 15,
            ..opts
        };
        assert_eq!(
            sample(&net, &s, dims, 5, None, em).unwrap().data(),
            sample(&net, &s, dims, 5, None, em).unwrap().data()
        );
    }

    #[test]
    fn single_step_zero_net_rescales_initial_noise() {
        let s = make_schedule(20, 1e-3, 0.2).unwrap();
        let dims = ImageDims::new(1, 1, 3);
        let out = sample(
            &zero_net,
            &s,
            dims,
            2,
            None,
            SampleOptions {
                steps: 1,
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let mut x_t = Vec::new();
        for i in 0..2 {
            x_t.extend(standard_normal::<f32>(&mut chain_rng(4, i), 3));
        }
        let k = 1.0 / s.alpha_bar_at(20).sqrt();
        for (o, x) in out.data().iter().zip(&x_t) {
            assert!((o - (x.as_f64() * k) as f32).abs() < 1e-5);
        }
    }
}
