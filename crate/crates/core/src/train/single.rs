use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nca::{rollout_on, seed_canvas, Perception, PerceptionConfig, RuleParams, RGBA};
use crate::tensor::{Rng, Tape, Tensor};
use crate::vae::ModelConfig;

use super::{normalize_grads, Adam, AdamConfig};

/// Settings for fitting one rule directly to one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleConfig {
    pub channels: usize,
    pub hidden: usize,
    pub steps: usize,
    pub perception: PerceptionConfig,
    pub train_steps: u64,
    pub adam: AdamConfig,
    pub normalize_grads: bool,
    pub seed: u64,
    /// Stop as soon as a step's loss falls below this value.
    pub stop_below: Option<f64>,
}

impl SingleConfig {
    pub fn from_configs(model: &ModelConfig, train: &TrainConfig) -> Self {
        Self {
            channels: model.channels,
            hidden: model.hidden,
            steps: model.steps,
            perception: model.perception.clone(),
            train_steps: train.train_steps,
            adam: AdamConfig {
                lr: train.lr,
                ..AdamConfig::default()
            },
            normalize_grads: train.normalize_grads,
            seed: train.seed,
            stop_below: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SingleReport {
    /// Parameters that produced the lowest loss seen.
    pub params: RuleParams<f32>,
    pub best_loss: f64,
    /// Loss at each step, measured before that step's update.
    pub losses: Vec<f64>,
    /// Steps on which every gradient was exactly zero.
    pub zero_grad_steps: u64,
}

/// Optimizes a rule so that the rollout from the seed matches `target`
/// (`H×W×4`) after `cfg.steps` steps. Second layer starts at zero.
pub fn train_single(
    target: &Tensor<f32>,
    cfg: &SingleConfig,
    mut on_step: impl FnMut(u64, f64),
) -> Result<SingleReport> {
    let (h, w) = match target.shape() {
        &[h, w, RGBA] => (h, w),
        other => return Err(Error::dim("train_single", other, &[0, 0, RGBA])),
    };
    cfg.perception.validate()?;
    let perception = Perception::new(&cfg.perception)?;
    let seed = seed_canvas::<f32>(h, w, cfg.channels)?.into_state();
    let mut rng = Rng::seeded(cfg.seed);
    let mut params = RuleParams::init(&mut rng, &cfg.perception, cfg.channels, cfg.hidden, 0.0);
    let names: Vec<String> = ["w1", "b1", "w2", "b2"].map(String::from).to_vec();
    let sizes: Vec<usize> = params.blocks().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(cfg.adam, &sizes);

    let mut best: Option<(f64, RuleParams<f32>)> = None;
    let mut losses = Vec::new();
    let mut zero_grad_steps = 0;
    for step in 0..cfg.train_steps {
        let mut tape = Tape::new();
        let rule = params.bind(&mut tape, true);
        let grid = tape.constant(seed.clone());
        let out = rollout_on(&mut tape, grid, &rule, &perception, cfg.steps)?;
        let rgba = tape.slice_channels(out, 0, RGBA)?;
        let t = tape.constant(target.clone());
        let loss_var = tape.mse_loss(rgba, t)?;
        let loss = tape.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch_index: 0,
            });
        }
        losses.push(loss);
        on_step(step, loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, params.clone()));
        }
        if cfg.stop_below.is_some_and(|s| loss < s) {
            break;
        }

        tape.backward(loss_var)?;
        let mut grads: Vec<Vec<f32>> = rule.all().iter().map(|&v| tape.grad_or_zeros(v)).collect();
        if grads.iter().flatten().all(|&g| g == 0.0) {
            if zero_grad_steps == 0 {
                log::warn!(
                    "all gradients are zero at step {step}; the loss does not depend on the rule"
                );
            }
            zero_grad_steps += 1;
        }
        if cfg.normalize_grads {
            normalize_grads(&mut grads);
        }
        adam.update(&mut params.blocks_mut(), &grads, &names)?;
    }
    let (best_loss, params) =
        best.ok_or_else(|| Error::Config("train_steps must be positive".into()))?;
    Ok(SingleReport {
        params,
        best_loss,
        losses,
        zero_grad_steps,
    })
}
