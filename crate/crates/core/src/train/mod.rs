//! Optimization of the full model through the rollout, the single-rule
//! baseline, and the defacement used by the repair task.

mod adam;
mod single;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{DefaceSpec, Task, TrainConfig};
use crate::data::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use crate::error::{Error, Result};
use crate::nca::{rollout_on, seed_canvas, CellGrid, Perception, RGBA};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};
use crate::vae::{
    decode_on, encode_on, perception_for, sample_on, LatentCode, ModelConfig, VaeNca,
};

pub use adam::{Adam, AdamConfig};
pub use single::{train_single, SingleConfig, SingleReport};

/// Added to each gradient norm before dividing.
pub const NORM_EPS: f64 = 1e-8;

pub const LOSS_LOG: &str = "loss.csv";
pub const LATEST_CHECKPOINT: &str = "latest.vnca";
pub const BEST_CHECKPOINT: &str = "best.vnca";

/// Divides each tensor's gradient by its L2 norm plus [`NORM_EPS`].
pub fn normalize_grads<T: Scalar>(grads: &mut [Vec<T>]) {
    for g in grads {
        let norm = g.iter().map(|&x| x * x).sum::<T>().sqrt();
        let scale = T::one() / (norm + T::from_f64_lossy(NORM_EPS));
        g.iter_mut().for_each(|x| *x *= scale);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

/// Records `mse(grid[..4], target) + beta·KL` and returns `[total, mse, kl]`.
pub fn loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    grid: Var,
    target: Var,
    mu: Var,
    logvar: Var,
    beta_kl: f64,
) -> Result<[Var; 3]> {
    let rgba = tape.slice_channels(grid, 0, RGBA)?;
    let mse = tape.mse_loss(rgba, target)?;
    let kl = tape.kl_divergence(mu, logvar)?;
    let weighted = tape.scale(kl, T::from_f64_lossy(beta_kl));
    let total = tape.add(mse, weighted)?;
    Ok([total, mse, kl])
}

fn read_parts<T: Scalar>(tape: &Tape<T>, vars: [Var; 3]) -> LossParts {
    let get = |v: Var| tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
    LossParts {
        total: get(vars[0]),
        mse: get(vars[1]),
        kl: get(vars[2]),
    }
}

/// Reconstruction error of the unclamped RGBA channels plus the weighted KL
/// term of the latent code.
pub fn loss_total<T: Scalar>(
    final_grid: &CellGrid<T>,
    target: &Tensor<T>,
    latent: &LatentCode<T>,
    beta_kl: f64,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let g = tape.constant(final_grid.state().clone());
    let t = tape.constant(target.clone());
    let mu = tape.constant(latent.mu.clone());
    let lv = tape.constant(latent.logvar.clone());
    let vars = loss_on(&mut tape, g, t, mu, lv, beta_kl)?;
    Ok(read_parts(&tape, vars))
}

/// Blanks `spec.count` random axis-aligned rectangles: RGB set to 0, alpha
/// set to 1. Returns the damaged copy and the `H×W` mask of covered pixels.
pub fn deface(
    image: &Tensor<f32>,
    rng: &mut Rng,
    spec: &DefaceSpec,
) -> Result<(Tensor<f32>, Vec<bool>)> {
    let (h, w) = match image.shape() {
        &[h, w, RGBA] => (h, w),
        other => return Err(Error::dim("deface", other, &[0, 0, RGBA])),
    };
    if !(0.0..=1.0).contains(&spec.min_frac) || !(spec.min_frac..=1.0).contains(&spec.max_frac) {
        return Err(Error::Config(format!(
            "deface fractions [{}, {}] outside [0, 1]",
            spec.min_frac, spec.max_frac
        )));
    }
    let mut out = image.clone();
    let mut mask = vec![false; h * w];
    for _ in 0..spec.count {
        let side = |rng: &mut Rng, n: usize| {
            let frac = rng.uniform_range(spec.min_frac, spec.max_frac);
            ((frac * n as f64).round() as usize).min(n)
        };
        let (rh, rw) = (side(rng, h), side(rng, w));
        let y0 = rng.below(h - rh + 1);
        let x0 = rng.below(w - rw + 1);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                mask[y * w + x] = true;
                let px = &mut out.data_mut()[(y * w + x) * RGBA..][..RGBA];
                px.copy_from_slice(&[0.0, 0.0, 0.0, 1.0]);
            }
        }
    }
    Ok((out, mask))
}

/// Mean squared error over the pixels selected by an `H×W` mask; `None` when
/// the mask is empty.
pub fn masked_mse(a: &Tensor<f32>, b: &Tensor<f32>, mask: &[bool]) -> Option<f64> {
    let c = a.last_dim();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in 0..c {
            let d = (a.data()[i * c + k] - b.data()[i * c + k]) as f64;
            sum += d * d;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// One training example: what the encoder sees, what the growth is compared
/// with, and the latent noise draw.
#[derive(Clone, Debug)]
pub struct Sample<T: Scalar = f32> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    pub noise: Option<Tensor<T>>,
}

/// Forward and backward pass for one example. Gradients follow
/// [`VaeNca::params`] order.
pub fn sample_loss_grads<T: Scalar>(
    model: &VaeNca<T>,
    perception: &Perception<T>,
    sample: &Sample<T>,
    beta_kl: f64,
) -> Result<(LossParts, Vec<Vec<T>>)> {
    let c = &model.config;
    let mut tape = Tape::new();
    let (vars, flat) = model.bind(&mut tape, true);
    let input = tape.constant(sample.input.clone());
    let (mu, logvar) = encode_on(&mut tape, input, &vars.encoder, c)?;
    let noise = sample.noise.as_ref().map(|n| tape.constant(n.clone()));
    let z = sample_on(&mut tape, mu, logvar, noise)?;
    let rule = decode_on(&mut tape, z, &vars.decoder, c)?;
    let seed =
        tape.constant(seed_canvas::<T>(c.image_size, c.image_size, c.channels)?.into_state());
    let grid = rollout_on(&mut tape, seed, &rule, perception, c.steps)?;
    let target = tape.constant(sample.target.clone());
    let loss = loss_on(&mut tape, grid, target, mu, logvar, beta_kl)?;
    let parts = read_parts(&tape, loss);
    tape.backward(loss[0])?;
    Ok((parts, flat.iter().map(|&v| tape.grad_or_zeros(v)).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Optimizer steps completed, including this one.
    pub step: u64,
    /// Batch means, measured before the update.
    pub loss: f64,
    pub mse: f64,
    pub kl: f64,
    pub zero_grad: bool,
}

/// Trains a [`VaeNca`] with Adam. All randomness (initialization, batch
/// sampling, defacement, latent noise) comes from one seeded generator that
/// is drawn from sequentially, so results do not depend on the thread count.
pub struct VaeTrainer {
    model: VaeNca<f32>,
    config: TrainConfig,
    adam: Adam<f32>,
    rng: Rng,
    step: u64,
    best_loss: Option<f64>,
    perception: Perception<f32>,
}

impl VaeTrainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seeded(config.seed);
        let model = VaeNca::init(model_config, &mut rng)?;
        Self::assemble(model, config, rng)
    }

    fn assemble(model: VaeNca<f32>, config: TrainConfig, rng: Rng) -> Result<Self> {
        let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
        let adam = Adam::new(adam_config(&config), &sizes);
        Ok(Self {
            perception: perception_for(&model.config)?,
            model,
            config,
            adam,
            rng,
            step: 0,
            best_loss: None,
        })
    }

    pub fn model(&self) -> &VaeNca<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best_loss
    }

    /// Changes the total step budget, e.g. to extend a resumed run.
    pub fn set_train_steps(&mut self, steps: u64) {
        self.config.train_steps = steps;
    }

    fn draw_batch(&mut self, data: &[Tensor<f32>]) -> Result<Vec<(usize, Sample)>> {
        let e = self.model.config.latent;
        (0..self.config.batch)
            .map(|_| {
                let idx = self.rng.below(data.len());
                let target = data[idx].clone();
                let input = match self.config.task {
                    Task::Reconstruct => target.clone(),
                    Task::Repair => deface(&target, &mut self.rng, &self.config.deface)?.0,
                };
                let noise = Tensor::from_fn([e], |_| self.rng.normal() as f32);
                Ok((
                    idx,
                    Sample {
                        input,
                        target,
                        noise: Some(noise),
                    },
                ))
            })
            .collect()
    }

    /// One optimizer step on a minibatch drawn with replacement from `data`.
    pub fn train_step(&mut self, data: &[Tensor<f32>]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Usage("training dataset is empty".into()));
        }
        let batch = self.draw_batch(data)?;
        let (model, perception, beta) = (&self.model, &self.perception, self.config.beta_kl);
        let results: Vec<Result<(LossParts, Vec<Vec<f32>>)>> = batch
            .par_iter()
            .map(|(_, s)| sample_loss_grads(model, perception, s, beta))
            .collect();

        let n = batch.len() as f64;
        let mut sum = LossParts::default();
        let mut grads: Vec<Vec<f32>> = self
            .model
            .params()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        for (b, r) in results.into_iter().enumerate() {
            let (parts, g) = r?;
            if !parts.total.is_finite() {
                log::error!(
                    "non-finite loss at step {}: batch index {b} (dataset image {})",
                    self.step,
                    batch[b].0
                );
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    batch_index: b,
                });
            }
            sum.total += parts.total;
            sum.mse += parts.mse;
            sum.kl += parts.kl;
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, x)| *a += x);
            }
        }
        let inv = 1.0 / batch.len() as f32;
        grads.iter_mut().flatten().for_each(|x| *x *= inv);

        let zero_grad = grads.iter().flatten().all(|&x| x == 0.0);
        if zero_grad {
            log::warn!("step {}: every gradient is zero", self.step);
        }
        if self.config.normalize_grads {
            normalize_grads(&mut grads);
        }
        let names = self.model.param_names();
        self.adam
            .update(&mut self.model.params_mut(), &grads, &names)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: sum.total / n,
            mse: sum.mse / n,
            kl: sum.kl / n,
            zero_grad,
        })
    }

    /// Full training state: parameters, Adam moments, RNG and counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let (m, v) = self.adam.moments();
        for (prefix, moments) in [("adam.m.", m), ("adam.v.", v)] {
            for ((name, t), mom) in self.model.named_params().into_iter().zip(moments) {
                let data = mom.clone();
                tensors.push((
                    format!("{prefix}{name}"),
                    Tensor::new(t.shape().to_vec(), data).expect("moment mirrors param"),
                ));
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::VaeNca,
                model: self.model.config.clone(),
                train: Some(self.config.clone()),
                step: self.step,
                rng_state: Some(self.rng.state()),
                best_loss: self.best_loss,
                adam_step: Some(self.adam.step_count()),
            },
            tensors,
        }
    }

    /// Restores a trainer from [`VaeTrainer::checkpoint`] output.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        let (Some(config), Some(rng_state)) = (meta.train.clone(), meta.rng_state) else {
            return Err(Error::Config(
                "checkpoint lacks training state and cannot be resumed".into(),
            ));
        };
        let model = model_from_checkpoint(ck)?;
        let mut t = Self::assemble(model, config, Rng::from_state(rng_state))?;
        let names = t.model.param_names();
        let moments = |prefix: &str| -> Result<Vec<Vec<f32>>> {
            names
                .iter()
                .map(|n| {
                    ck.tensor(&format!("{prefix}{n}"))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| {
                            Error::Config(format!("checkpoint lacks optimizer tensor {prefix}{n}"))
                        })
                })
                .collect()
        };
        t.adam.restore(
            meta.adam_step.unwrap_or(meta.step),
            moments("adam.m.")?,
            moments("adam.v.")?,
        )?;
        t.step = meta.step;
        t.best_loss = meta.best_loss;
        Ok(t)
    }

    /// Trains until `config.train_steps`. With an output directory, appends
    /// to `loss.csv` and writes `latest.vnca` every `checkpoint_every` steps
    /// and at the end, plus `best.vnca` whenever the mean loss since the
    /// previous checkpoint is the lowest so far.
    pub fn fit(
        &mut self,
        data: &[Tensor<f32>],
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<()> {
        let mut log = out
            .map(|d| LossLog::open(&d.join(LOSS_LOG), self.step))
            .transpose()?;
        let start = Instant::now();
        let (mut window_sum, mut window_len) = (0.0, 0u64);
        while self.step < self.config.train_steps {
            let stats = self.train_step(data)?;
            if let Some(log) = &mut log {
                log.append(&stats, start.elapsed().as_secs_f64())?;
            }
            on_step(&stats);
            window_sum += stats.loss;
            window_len += 1;
            let every = self.config.checkpoint_every;
            let due = (every > 0 && self.step.is_multiple_of(every))
                || self.step == self.config.train_steps;
            if due {
                let mean = window_sum / window_len as f64;
                let improved = self.best_loss.is_none_or(|b| mean < b);
                if improved {
                    self.best_loss = Some(mean);
                }
                if let Some(dir) = out {
                    let ck = self.checkpoint();
                    if improved {
                        ck.save(&dir.join(BEST_CHECKPOINT))?;
                    }
                    ck.save(&dir.join(LATEST_CHECKPOINT))?;
                }
                (window_sum, window_len) = (0.0, 0);
            }
        }
        if let Some(dir) = out.filter(|d| !d.join(LATEST_CHECKPOINT).exists()) {
            self.checkpoint().save(&dir.join(LATEST_CHECKPOINT))?;
        }
        Ok(())
    }
}

fn adam_config(config: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    }
}

/// Rebuilds the model stored in a full-model checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<VaeNca<f32>> {
    if ck.meta.kind != CheckpointKind::VaeNca {
        return Err(Error::Config(
            "checkpoint holds a single rule, not a VAE-NCA model".into(),
        ));
    }
    ck.meta.model.validate()?;
    let mut model = VaeNca::init(ck.meta.model.clone(), &mut Rng::seeded(0))?;
    let tensors = model
        .param_names()
        .into_iter()
        .map(|n| {
            ck.tensor(&n)
                .cloned()
                .map(|t| (n.clone(), t))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    model.load_params(tensors)?;
    Ok(model)
}

/// Append-only `step,loss,mse,kl,seconds` log. Reopening at step `k` drops
/// rows past `k`, which a crash between logging and checkpointing can leave.
struct LossLog {
    file: File,
    path: PathBuf,
}

impl LossLog {
    const HEADER: &'static str = "step,loss,mse,kl,seconds";

    fn open(path: &Path, resume_step: u64) -> Result<Self> {
        let io = |e| Error::io(path, e);
        if resume_step > 0 && path.exists() {
            let kept: Vec<String> = BufReader::new(File::open(path).map_err(io)?)
                .lines()
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?
                .into_iter()
                .filter(|l| {
                    l.split(',')
                        .next()
                        .and_then(|s| s.parse::<u64>().ok())
                        .map_or(l == Self::HEADER, |s| s <= resume_step)
                })
                .collect();
            let mut text = kept.join("\n");
            text.push('\n');
            std::fs::write(path, text).map_err(io)?;
        } else {
            std::fs::write(path, format!("{}\n", Self::HEADER)).map_err(io)?;
        }
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, s: &StepStats, seconds: f64) -> Result<()> {
        writeln!(
            self.file,
            "{},{},{},{},{:.3}",
            s.step, s.loss, s.mse, s.kl, seconds
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}
