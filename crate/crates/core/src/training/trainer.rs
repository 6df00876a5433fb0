use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::optim::{adamw_step, AdamState};
use crate::arch::{build_params, stoic_forward, ParamStore, StoicConfig};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::diffusion::{ddpm_loss, standard_normal, NoiseSchedule};
use crate::error::{Result, StoicError};
use crate::numerics::Tensor;

pub const LOG_HEADER: &str = "step,loss";

/// Everything one optimizer step consumes.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x0: Tensor<f32>,
    pub t: Vec<usize>,
    pub eps: Tensor<f32>,
    pub context: Option<Tensor<f32>>,
}

/// Random stream for training step `step` (0-based). Stream 0 is left to initialization.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

pub struct Trainer<'a> {
    run: RunConfig,
    config_text: String,
    sched: NoiseSchedule,
    dataset: &'a Dataset,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(run: &RunConfig, dataset: &'a Dataset) -> Result<Self> {
        let params = build_params::<f32>(&run.model, run.train.seed)?;
        Self::assemble(run.clone(), dataset, params, None, 0)
    }

    /// Continues from a saved state; the run configuration comes from the checkpoint.
    pub fn resume(ckpt: &Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        let mut run = ckpt.run_config()?;
        run.train.seed = ckpt.seed;
        Self::assemble(
            run,
            dataset,
            ckpt.params.clone(),
            Some(ckpt.adam.clone()),
            ckpt.step,
        )
    }

    fn assemble(
        run: RunConfig,
        dataset: &'a Dataset,
        params: ParamStore<f32>,
        adam: Option<AdamState<f32>>,
        step: u64,
    ) -> Result<Self> {
        run.train.validate()?;
        params.check_against(&run.model)?;
        check_dataset(&run.model, dataset)?;
        if run.train.guidance_training && dataset.contexts.is_none() {
            return Err(StoicError::Config(
                "guidance_training needs a dataset with contexts".into(),
            ));
        }
        let adam = adam.unwrap_or_else(|| AdamState::new(&params));
        Ok(Trainer {
            config_text: run.to_text(),
            sched: run.schedule()?,
            run,
            dataset,
            params,
            adam,
            step,
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config_text.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            seed: self.run.train.seed,
            step: self.step,
        }
    }

    /// The batch step `step` trains on: uniform indices, uniform `t ∈ [1, T]`, standard
    /// normal ε, and per-element condition dropout to the all-zero context.
    pub fn draw_batch(&self, step: u64) -> Result<Batch> {
        let hyper = &self.run.train;
        let b = hyper.batch_size;
        let mut rng = step_rng(hyper.seed, step);
        let indices: Vec<usize> = (0..b)
            .map(|_| rng.random_range(0..self.dataset.len()))
            .collect();
        let t: Vec<usize> = (0..b)
            .map(|_| rng.random_range(1..=self.sched.steps))
            .collect();
        let (x0, ctx) = self.dataset.batch::<f32>(&indices)?;
        let eps = Tensor::from_vec(standard_normal::<f32>(&mut rng, x0.numel()), x0.shape())?;
        let p = if hyper.guidance_training {
            hyper.cond_dropout
        } else {
            0.0
        };
        let dropped: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < p).collect();
        let context = match self.run.model.context {
            None => None,
            Some(cc) => {
                let per = cc.tokens * cc.token_dim;
                let mut data = vec![0.0f32; b * per];
                if let Some(ctx) = &ctx {
                    for (i, &drop) in dropped.iter().enumerate() {
                        if !drop {
                            data[i * per..(i + 1) * per]
                                .copy_from_slice(&ctx.data()[i * per..(i + 1) * per]);
                        }
                    }
                }
                Some(Tensor::from_vec(data, &[b, cc.tokens, cc.token_dim])?)
            }
        };
        Ok(Batch {
            x0,
            t,
            eps,
            context,
        })
    }

    /// Loss of the current parameters on `batch`, without updating.
    pub fn loss_on(&self, batch: &Batch) -> Result<f64> {
        let (params, cfg) = (&self.params, &self.run.model);
        let net = |x: &Tensor<f32>, t: &[usize], c: Option<&Tensor<f32>>| {
            stoic_forward(x, t, c, params, cfg)
        };
        Ok(ddpm_loss(
            &net,
            &batch.x0,
            &batch.t,
            &batch.eps,
            batch.context.as_ref(),
            &self.sched,
        )?
        .item()?
        .into())
    }

    /// One AdamW update on `batch`; returns the pre-update loss.
    pub fn step_on(&mut self, batch: &Batch) -> Result<f64> {
        let live = self.params.trainable();
        let cfg = &self.run.model;
        let net = |x: &Tensor<f32>, t: &[usize], c: Option<&Tensor<f32>>| {
            stoic_forward(x, t, c, &live, cfg)
        };
        let loss = ddpm_loss(
            &net,
            &batch.x0,
            &batch.t,
            &batch.eps,
            batch.context.as_ref(),
            &self.sched,
        )?;
        let value = f64::from(loss.item()?);
        if !value.is_finite() {
            return Err(StoicError::Diverged {
                step: self.step + 1,
                loss: value,
            });
        }
        loss.backward()?;
        let grads: BTreeMap<String, Vec<f32>> = live
            .iter()
            .map(|(k, t)| {
                (
                    k.to_string(),
                    t.grad().unwrap_or_else(|| vec![0.0; t.numel()]),
                )
            })
            .collect();
        self.params = adamw_step(
            &self.params,
            &grads,
            &mut self.adam,
            &self.run.train,
            self.step + 1,
        )?;
        self.step += 1;
        Ok(value)
    }

    pub fn step(&mut self) -> Result<f64> {
        let batch = self.draw_batch(self.step)?;
        self.step_on(&batch)
    }

    /// Trains until `total_steps` updates have been applied, appending `step,loss` rows to
    /// the log and writing periodic plus final checkpoints into `checkpoint_dir`.
    pub fn run_until(
        &mut self,
        total_steps: u64,
        checkpoint_dir: Option<&Path>,
        log_path: Option<&Path>,
    ) -> Result<Checkpoint> {
        if let Some(dir) = checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| StoicError::io(dir, e))?;
        }
        let mut log = log_path.map(open_log).transpose()?;
        let every = self.run.train.checkpoint_every as u64;
        while self.step < total_steps {
            let loss = self.step()?;
            if let Some((w, path)) = &mut log {
                writeln!(w, "{},{}", self.step, loss as f32)
                    .map_err(|e| StoicError::io(path.as_path(), e))?;
            }
            if let (Some(dir), true) =
                (checkpoint_dir, every > 0 && self.step.is_multiple_of(every))
            {
                self.checkpoint().save(&checkpoint_path(dir, self.step))?;
            }
        }
        if let Some((w, path)) = &mut log {
            w.flush().map_err(|e| StoicError::io(path.as_path(), e))?;
        }
        let ckpt = self.checkpoint();
        if let Some(dir) = checkpoint_dir {
            ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(ckpt)
    }
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.ckpt"))
}

fn open_log(path: &Path) -> Result<(BufWriter<File>, PathBuf)> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| StoicError::io(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{LOG_HEADER}").map_err(|e| StoicError::io(path, e))?;
    }
    Ok((w, path.to_path_buf()))
}

fn check_dataset(model: &StoicConfig, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(StoicError::Dataset("dataset is empty".into()));
    }
    if dataset.dims() != model.image {
        return Err(StoicError::Config(format!(
            "dataset images are {:?} but the model expects {:?}",
            dataset.dims(),
            model.image
        )));
    }
    match (model.context, dataset.context_dim()) {
        (None, Some(_)) => Err(StoicError::Config(
            "dataset has contexts but the model is unconditional".into(),
        )),
        (Some(cc), Some(d))
            if cc.token_dim != d
                || dataset
                    .contexts
                    .as_ref()
                    .is_some_and(|c| c.shape()[1] != cc.tokens) =>
        {
            Err(StoicError::Config(format!(
                "dataset context width {d} does not match the model's {}",
                cc.token_dim
            )))
        }
        _ => Ok(()),
    }
}

/// Full run from fresh initialization for `run.train.steps` steps.
pub fn train(
    run: &RunConfig,
    dataset: &Dataset,
    checkpoint_dir: Option<&Path>,
    log_path: Option<&Path>,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(run, dataset)?;
    trainer.run_until(run.train.steps as u64, checkpoint_dir, log_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_toy_dataset, gen_toy_dataset_with, ToyKind, ToyOptions};

    const TINY: &str = "[model]\nembed_dim = 16\nnum_blocks = 1\nheight = 4\nwidth = 4\n[diffusion]\nsteps = 50\n[train]\nbatch_size = 4\nsteps = 3\nlr = 1e-3\n";

    #[test]
    fn zero_steps_returns_initial_parameters() {
        let run = RunConfig::parse(&TINY.replace("steps = 3", "steps = 0")).unwrap();
        let ds = gen_toy_dataset(ToyKind::TwoBlobs, 8, run.model.image, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.csv");
        let ck = train(&run, &ds, Some(dir.path()), Some(&log)).unwrap();
        assert!(ck
            .params
            .bit_eq(&build_params(&run.model, run.train.seed).unwrap()));
        assert_eq!(fs::read_to_string(&log).unwrap(), "step,loss\n");
        assert!(dir.path().join(FINAL_CHECKPOINT).exists());
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let run = RunConfig::parse(TINY).unwrap();
        let ds = gen_toy_dataset(ToyKind::TwoBlobs, 8, run.model.image, 0).unwrap();
        let a = train(&run, &ds, None, None).unwrap();
        let b = train(&run, &ds, None, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());

        let mut first = Trainer::new(&run, &ds).unwrap();
        first.run_until(1, None, None).unwrap();
        let mid = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let mut resumed = Trainer::resume(&mid, &ds).unwrap();
        let c = resumed.run_until(3, None, None).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn dataset_mismatches_are_rejected() {
        let run = RunConfig::parse(TINY).unwrap();
        let wrong = gen_toy_dataset(
            ToyKind::TwoBlobs,
            4,
            crate::arch::ImageDims::new(1, 8, 8),
            0,
        )
        .unwrap();
        assert!(Trainer::new(&run, &wrong).is_err());
        let opts = ToyOptions {
            context_dim: Some(3),
            ..Default::default()
        };
        let with_ctx =
            gen_toy_dataset_with(ToyKind::TwoBlobs, 4, run.model.image, 0, opts).unwrap();
        assert!(Trainer::new(&run, &with_ctx).is_err());
    }
}
