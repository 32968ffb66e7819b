//! Model presets, training settings and the JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nca::PerceptionConfig;
use crate::vae::ModelConfig;

pub const DEFAULT_ENCODER_WIDTHS: [usize; 3] = [32, 64, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Mnist,
    Cifar,
    Face,
    Custom,
}

impl Preset {
    /// Architecture of a named preset. `Custom` has none.
    pub fn model_config(self) -> Option<ModelConfig> {
        let (image_size, channels, latent, hidden, steps, sobel) = match self {
            Preset::Mnist => (28, 8, 32, 64, 64, vec![3, 7]),
            Preset::Cifar => (32, 16, 1024, 160, 128, vec![3, 5]),
            Preset::Face => (32, 24, 1024, 256, 160, vec![3, 5, 9]),
            Preset::Custom => return None,
        };
        Some(ModelConfig {
            image_size,
            channels,
            latent,
            hidden,
            steps,
            perception: PerceptionConfig {
                sobel_sizes: sobel,
                localmax_window: 3,
                include_identity: true,
            },
            encoder_widths: DEFAULT_ENCODER_WIDTHS.to_vec(),
            decoder_hidden: None,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Encode the image, grow it back, compare with the same image.
    #[default]
    Reconstruct,
    /// Encode a defaced copy, compare the growth with the clean image.
    Repair,
}

/// Random rectangular occlusions for the repair task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaceSpec {
    pub count: usize,
    pub min_frac: f64,
    pub max_frac: f64,
}

impl Default for DefaceSpec {
    fn default() -> Self {
        Self {
            count: 2,
            min_frac: 0.15,
            max_frac: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub train_steps: u64,
    pub lr: f64,
    pub beta_kl: f64,
    pub normalize_grads: bool,
    pub task: Task,
    pub seed: u64,
    /// Checkpoint cadence in optimizer steps.
    pub checkpoint_every: u64,
    pub deface: DefaceSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            train_steps: 1000,
            lr: 1e-3,
            beta_kl: 0.0,
            normalize_grads: true,
            task: Task::Reconstruct,
            seed: 0,
            checkpoint_every: 100,
            deface: DefaceSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.beta_kl < 0.0 {
            return Err(Error::Config("beta_kl must be non-negative".into()));
        }
        let d = &self.deface;
        if !(0.0..=1.0).contains(&d.min_frac)
            || !(0.0..=1.0).contains(&d.max_frac)
            || d.min_frac > d.max_frac
        {
            return Err(Error::Config(format!(
                "deface fractions must satisfy 0 <= min_frac <= max_frac <= 1, got [{}, {}]",
                d.min_frac, d.max_frac
            )));
        }
        Ok(())
    }
}

/// The user-facing JSON document. Named presets fill every architecture key;
/// any key present here overrides the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub image_size: Option<usize>,
    pub channels: Option<usize>,
    pub latent: Option<usize>,
    pub hidden: Option<usize>,
    pub steps: Option<usize>,
    pub sobel_sizes: Option<Vec<usize>>,
    pub localmax_window: Option<usize>,
    pub include_identity: Option<bool>,
    pub encoder_widths: Option<Vec<usize>>,
    pub decoder_hidden: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub train_steps: Option<u64>,
    pub beta_kl: Option<f64>,
    pub normalize_grads: Option<bool>,
    pub seed: Option<u64>,
    pub task: Option<Task>,
    pub deface: Option<DefaceSpec>,
    pub checkpoint_every: Option<u64>,
    pub snapshot_every: Option<usize>,
    pub dataset_limit: Option<usize>,
}

/// Preset plus overrides, fully expanded. Written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub snapshot_every: Option<usize>,
    pub dataset_limit: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let preset = self.preset.unwrap_or(Preset::Mnist);
        let model = match preset.model_config() {
            Some(mut m) => {
                override_with(&mut m.image_size, self.image_size);
                override_with(&mut m.channels, self.channels);
                override_with(&mut m.latent, self.latent);
                override_with(&mut m.hidden, self.hidden);
                override_with(&mut m.steps, self.steps);
                override_with(&mut m.perception.sobel_sizes, self.sobel_sizes.clone());
                override_with(&mut m.perception.localmax_window, self.localmax_window);
                override_with(&mut m.perception.include_identity, self.include_identity);
                override_with(&mut m.encoder_widths, self.encoder_widths.clone());
                if self.decoder_hidden.is_some() {
                    m.decoder_hidden = self.decoder_hidden;
                }
                m
            }
            None => ModelConfig {
                image_size: required(self.image_size, "image_size")?,
                channels: required(self.channels, "channels")?,
                latent: required(self.latent, "latent")?,
                hidden: required(self.hidden, "hidden")?,
                steps: required(self.steps, "steps")?,
                perception: PerceptionConfig {
                    sobel_sizes: required(self.sobel_sizes.clone(), "sobel_sizes")?,
                    localmax_window: required(self.localmax_window, "localmax_window")?,
                    include_identity: self.include_identity.unwrap_or(true),
                },
                encoder_widths: self
                    .encoder_widths
                    .clone()
                    .unwrap_or_else(|| DEFAULT_ENCODER_WIDTHS.to_vec()),
                decoder_hidden: self.decoder_hidden,
            },
        };
        model.validate()?;

        let mut train = TrainConfig::default();
        override_with(&mut train.lr, self.lr);
        override_with(&mut train.batch, self.batch);
        override_with(&mut train.train_steps, self.train_steps);
        override_with(&mut train.beta_kl, self.beta_kl);
        override_with(&mut train.normalize_grads, self.normalize_grads);
        override_with(&mut train.seed, self.seed);
        override_with(&mut train.task, self.task);
        override_with(&mut train.deface, self.deface);
        override_with(&mut train.checkpoint_every, self.checkpoint_every);
        train.validate()?;
        if self.snapshot_every == Some(0) {
            return Err(Error::Config("snapshot_every must be positive".into()));
        }

        Ok(ResolvedConfig {
            preset,
            model,
            train,
            snapshot_every: self.snapshot_every,
            dataset_limit: self.dataset_limit,
        })
    }
}

/// Writes `value` as pretty JSON, the record of what a run actually used.
pub fn write_echo<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("config serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn override_with<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("custom preset requires key `{key}`")))
}
