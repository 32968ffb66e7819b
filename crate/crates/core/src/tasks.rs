//! Inference-side tasks built on a trained model: reconstruction, growth
//! snapshots, rule fusion and dataset evaluation. All run in deterministic
//! mode (`z = mu`).

use std::path::PathBuf;

use serde::Serialize;

use crate::data::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use crate::error::{Error, Result};
use crate::nca::{self, extract_rgba, seed_canvas, RuleParams, RGBA, RULE_BLOCKS};
use crate::tensor::Tensor;
use crate::vae::{rule_for_image, ModelConfig, VaeNca};

/// Settings of an inference run, echoed next to its outputs.
#[derive(Clone, Debug, Serialize)]
pub struct InferenceEcho {
    pub command: String,
    pub checkpoint: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub model: ModelConfig,
    pub deterministic: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
}

/// Anything that maps an image to a reconstruction of the same shape.
pub trait Reconstructor {
    fn reconstruct(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Reconstructor for VaeNca<f32> {
    fn reconstruct(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        reconstruct(self, image)
    }
}

fn check_input(model: &VaeNca<f32>, image: &Tensor<f32>) -> Result<()> {
    let s = model.config.image_size;
    if image.shape() != [s, s, RGBA] {
        return Err(Error::dim("model input", image.shape(), &[s, s, RGBA]));
    }
    Ok(())
}

fn decode(model: &VaeNca<f32>, image: &Tensor<f32>) -> Result<RuleParams<f32>> {
    check_input(model, image)?;
    Ok(rule_for_image(image, model, None)?.0)
}

/// Encode, decode and grow for `T` steps; returns the clamped RGBA image.
pub fn reconstruct(model: &VaeNca<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let rule = decode(model, image)?;
    Ok(grow(&model.config, &rule, None)?
        .pop()
        .expect("final frame"))
}

/// Grows from the seed with `rule` for `config.steps` steps. Returns the
/// clamped frames at the `snapshot_every` cadence, or just the final image
/// when no cadence is given.
pub fn grow(
    config: &ModelConfig,
    rule: &RuleParams<f32>,
    snapshot_every: Option<usize>,
) -> Result<Vec<Tensor<f32>>> {
    let s = config.image_size;
    let seed = seed_canvas(s, s, config.channels)?;
    let out = nca::rollout(
        &seed,
        rule,
        &config.perception,
        config.steps,
        snapshot_every,
    )?;
    Ok(match snapshot_every {
        Some(_) => out.frames,
        None => vec![extract_rgba(&out.grid)],
    })
}

pub fn grow_image(
    model: &VaeNca<f32>,
    image: &Tensor<f32>,
    snapshot_every: Option<usize>,
) -> Result<Vec<Tensor<f32>>> {
    let rule = decode(model, image)?;
    grow(&model.config, &rule, snapshot_every)
}

/// Alternates the rules decoded from `a` and `b`, `period` steps each,
/// starting with `a`.
pub fn fuse(
    model: &VaeNca<f32>,
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    period: usize,
) -> Result<Tensor<f32>> {
    let (ra, rb) = (decode(model, a)?, decode(model, b)?);
    let c = &model.config;
    let seed = seed_canvas(c.image_size, c.image_size, c.channels)?;
    let grid = nca::fuse_rollout(&seed, &ra, &rb, &c.perception, c.steps, period)?;
    Ok(extract_rgba(&grid))
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mse", a.shape(), b.shape()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum();
    Ok(sum / a.numel() as f64)
}

/// Mean over `images` of the per-image reconstruction MSE.
pub fn mean_reconstruction_mse(model: &dyn Reconstructor, images: &[Tensor<f32>]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty split".into()));
    }
    let mut total = 0.0;
    for img in images {
        total += mse(&model.reconstruct(img)?, img)?;
    }
    Ok(total / images.len() as f64)
}

/// Packs a directly trained rule with the architecture it belongs to.
pub fn rule_checkpoint(
    config: &ModelConfig,
    rule: &RuleParams<f32>,
    best_loss: Option<f64>,
) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            kind: CheckpointKind::Rule,
            model: config.clone(),
            train: None,
            step: 0,
            rng_state: None,
            best_loss,
            adam_step: None,
        },
        tensors: RULE_BLOCKS
            .iter()
            .zip(rule.blocks())
            .map(|(n, t)| (format!("rule.{n}"), t.clone()))
            .collect(),
    }
}

pub fn rule_from_checkpoint(ck: &Checkpoint) -> Result<RuleParams<f32>> {
    if ck.meta.kind != CheckpointKind::Rule {
        return Err(Error::Config(
            "checkpoint holds a full model, not a single rule".into(),
        ));
    }
    let mut blocks = Vec::with_capacity(4);
    for n in RULE_BLOCKS {
        let t = ck
            .tensor(&format!("rule.{n}"))
            .ok_or_else(|| Error::Config(format!("checkpoint lacks rule.{n}")))?;
        blocks.push(t.clone());
    }
    let blocks: [Tensor<f32>; 4] = blocks.try_into().expect("four blocks");
    let rule = RuleParams::from_blocks(blocks);
    rule.validate(&ck.meta.model.perception, ck.meta.model.channels)?;
    Ok(rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nca::PerceptionConfig;
    use crate::tensor::Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 4,
            latent: 3,
            hidden: 4,
            steps: 6,
            perception: PerceptionConfig {
                sobel_sizes: vec![3],
                localmax_window: 3,
                include_identity: true,
            },
            encoder_widths: vec![2],
            decoder_hidden: None,
        }
    }

    fn image(phase: f32) -> Tensor<f32> {
        Tensor::from_fn([8, 8, 4], |i| {
            if i % 4 == 3 {
                1.0
            } else {
                0.5 + 0.5 * (i as f32 * 0.3 + phase).sin()
            }
        })
    }

    fn trained_like(rng: &mut Rng) -> VaeNca<f32> {
        let mut model = VaeNca::init(config(), rng).unwrap();
        for t in model.params_mut() {
            for v in t.data_mut() {
                *v = 0.3 * rng.normal() as f32;
            }
        }
        model
    }

    struct Oracle;

    impl Reconstructor for Oracle {
        fn reconstruct(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(image.clone())
        }
    }

    struct Constant(f32);

    impl Reconstructor for Constant {
        fn reconstruct(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
            Ok(Tensor::full(image.shape().to_vec(), self.0))
        }
    }

    #[test]
    fn eval_oracle_and_hand_computed_mean() {
        let imgs = [
            Tensor::full([2, 2, 4], 0.0f32),
            Tensor::full([2, 2, 4], 1.0),
        ];
        assert_eq!(mean_reconstruction_mse(&Oracle, &imgs).unwrap(), 0.0);
        let got = mean_reconstruction_mse(&Constant(0.25), &imgs).unwrap();
        assert!((got - (0.0625 + 0.5625) / 2.0).abs() < 1e-12);
        assert!(mean_reconstruction_mse(&Oracle, &[]).is_err());
    }

    #[test]
    fn untrained_model_stays_near_seed() {
        let model = VaeNca::init(config(), &mut Rng::seeded(1)).unwrap();
        let out = reconstruct(&model, &image(0.0)).unwrap();
        assert_eq!(out.shape(), &[8, 8, 4]);
        let seed = extract_rgba(&seed_canvas::<f32>(8, 8, 4).unwrap());
        assert!(mse(&out, &seed).unwrap() < 1e-8);
        assert!(reconstruct(&model, &Tensor::zeros([6, 6, 4])).is_err());
    }

    #[test]
    fn fuse_degenerate_cases_are_bit_exact() {
        let mut rng = Rng::seeded(2);
        let model = trained_like(&mut rng);
        let (a, b) = (image(0.0), image(1.5));
        let rec_a = reconstruct(&model, &a).unwrap();
        assert_eq!(fuse(&model, &a, &a, 1).unwrap(), rec_a);
        assert_eq!(fuse(&model, &a, &b, 6).unwrap(), rec_a);
        assert_eq!(fuse(&model, &a, &b, 100).unwrap(), rec_a);
        assert!(fuse(&model, &a, &b, 0).is_err());
    }

    #[test]
    fn grow_frame_counts() {
        let model = trained_like(&mut Rng::seeded(3));
        let img = image(0.2);
        assert_eq!(grow_image(&model, &img, Some(6)).unwrap().len(), 1);
        assert_eq!(grow_image(&model, &img, Some(4)).unwrap().len(), 1);
        assert_eq!(grow_image(&model, &img, Some(1)).unwrap().len(), 6);
        let last = grow_image(&model, &img, Some(3)).unwrap().pop().unwrap();
        assert_eq!(last, reconstruct(&model, &img).unwrap());
    }

    #[test]
    fn rule_checkpoint_round_trip() {
        let cfg = config();
        let rule = RuleParams::init(
            &mut Rng::seeded(4),
            &cfg.perception,
            cfg.channels,
            cfg.hidden,
            0.5,
        );
        let ck = rule_checkpoint(&cfg, &rule, Some(0.1));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("r")).unwrap();
        assert_eq!(rule_from_checkpoint(&back).unwrap(), rule);
        assert!(crate::train::model_from_checkpoint(&back).is_err());
    }
}
