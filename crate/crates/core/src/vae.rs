//! Convolutional encoder, reparameterized latent sampling and the
//! hypernetwork decoder that turns a latent code into [`RuleParams`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nca::{
    self, rule_shapes, seed_canvas, CellGrid, Perception, PerceptionConfig, RuleParams, RuleVars,
    RGBA, RULE_BLOCKS,
};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

/// Initial scale of the decoder head that emits the second rule layer. With
/// it, the first step of a fresh model changes no cell by more than 1e-6.
pub const W2_HEAD_INIT_SCALE: f64 = 1e-9;

/// Initial bias of the encoder outputs that produce `logvar`. A fresh model
/// samples `z` with standard deviation `exp(-3) ≈ 0.05` around `mu`.
pub const LOGVAR_BIAS_INIT: f64 = -6.0;

/// Architecture of a VAE-NCA model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input image and of the cell grid.
    pub image_size: usize,
    pub channels: usize,
    /// Latent dimension `E`.
    pub latent: usize,
    /// Hidden width `d` of the update rule.
    pub hidden: usize,
    /// Rollout length `T`.
    pub steps: usize,
    #[serde(flatten)]
    pub perception: PerceptionConfig,
    /// Output widths of the stride-2 3×3 encoder convolutions.
    pub encoder_widths: Vec<usize>,
    /// Optional hidden layer (ReLU) in each decoder head.
    pub decoder_hidden: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.perception.validate()?;
        if self.channels < RGBA {
            return Err(Error::Config(format!(
                "channels must be >= 4, got {}",
                self.channels
            )));
        }
        for (name, v) in [
            ("image_size", self.image_size),
            ("latent", self.latent),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.encoder_widths.contains(&0) || self.decoder_hidden == Some(0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn perception_dim(&self) -> usize {
        self.perception.perception_dim(self.channels)
    }

    pub fn rule_shapes(&self) -> [Vec<usize>; 4] {
        rule_shapes(self.perception_dim(), self.hidden, self.channels)
    }

    /// Spatial size after each encoder convolution.
    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut s = self.image_size;
        self.encoder_widths
            .iter()
            .map(|_| {
                s = (s + 2 - 3) / 2 + 1;
                s
            })
            .collect()
    }

    fn encoder_flat_dim(&self) -> usize {
        match (self.encoder_sizes().last(), self.encoder_widths.last()) {
            (Some(s), Some(w)) => s * s * w,
            _ => self.image_size * self.image_size * RGBA,
        }
    }
}

/// `x·weight + bias` with `weight: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    fn init(rng: &mut Rng, fan_in: usize, out: usize, scale: f64) -> Self {
        let std = scale * (1.0 / fan_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn([fan_in, out], |_| T::from_f64_lossy(std * rng.normal())),
            bias: Tensor::zeros([out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T: Scalar = f32> {
    /// 3×3 stride-2 convolutions; weights are `(9·C_in)×C_out` over im2col rows.
    pub convs: Vec<Affine<T>>,
    /// Flattened features to `2E` outputs (means then log-variances).
    pub head: Affine<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHead<T: Scalar = f32> {
    pub hidden: Option<Affine<T>>,
    pub out: Affine<T>,
}

/// One head per rule block, in `w1, b1, w2, b2` order.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperDecoderParams<T: Scalar = f32> {
    pub heads: [DecoderHead<T>; 4],
}

/// Encoder plus hypernetwork decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeNca<T: Scalar = f32> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub decoder: HyperDecoderParams<T>,
}

impl<T: Scalar> VaeNca<T> {
    /// Weights `N(0, 1/fan_in)`, biases zero except the `logvar` half of the
    /// encoder head, which starts at [`LOGVAR_BIAS_INIT`]. The `w2` head is
    /// scaled by [`W2_HEAD_INIT_SCALE`] and the `b2` head starts at zero, so
    /// a fresh model decodes to a near-identity rule.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut cin = RGBA;
        let mut convs = Vec::new();
        for &w in &config.encoder_widths {
            convs.push(Affine::init(rng, 9 * cin, w, 1.0));
            cin = w;
        }
        let mut head = Affine::init(rng, config.encoder_flat_dim(), 2 * config.latent, 1.0);
        let logvar_bias = T::from_f64_lossy(LOGVAR_BIAS_INIT);
        head.bias.data_mut()[config.latent..].fill(logvar_bias);
        let shapes = config.rule_shapes();
        let scales = [1.0, 1.0, W2_HEAD_INIT_SCALE, 0.0];
        let heads = std::array::from_fn(|i| {
            let n: usize = shapes[i].iter().product();
            let (hidden, fan_in) = match config.decoder_hidden {
                Some(h) => (Some(Affine::init(rng, config.latent, h, 1.0)), h),
                None => (None, config.latent),
            };
            DecoderHead {
                hidden,
                out: Affine::init(rng, fan_in, n, scales[i]),
            }
        });
        Ok(Self {
            config,
            encoder: EncoderParams { convs, head },
            decoder: HyperDecoderParams { heads },
        })
    }

    fn layers(&self) -> Vec<(String, &Affine<T>)> {
        let mut out: Vec<(String, &Affine<T>)> = self
            .encoder
            .convs
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("encoder.conv{i}"), l))
            .collect();
        out.push(("encoder.head".into(), &self.encoder.head));
        for (name, head) in RULE_BLOCKS.iter().zip(&self.decoder.heads) {
            if let Some(h) = &head.hidden {
                out.push((format!("decoder.{name}.hidden"), h));
            }
            out.push((format!("decoder.{name}.out"), &head.out));
        }
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Affine<T>> {
        let mut out: Vec<&mut Affine<T>> = self.encoder.convs.iter_mut().collect();
        out.push(&mut self.encoder.head);
        for head in &mut self.decoder.heads {
            if let Some(h) = &mut head.hidden {
                out.push(h);
            }
            out.push(&mut head.out);
        }
        out
    }

    /// Every learned tensor with its name, in a fixed order shared by
    /// [`VaeNca::params`], [`VaeNca::params_mut`] and [`bind_from_vars`].
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), &l.weight),
                    (format!("{name}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Replaces every parameter from `tensors` (same order and shapes as
    /// [`VaeNca::named_params`]).
    pub fn load_params(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let names = self.param_names();
        if names.len() != tensors.len() {
            return Err(Error::Config(format!(
                "model has {} parameter tensors, got {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((slot, expected), (name, t)) in self.params_mut().into_iter().zip(&names).zip(tensors)
        {
            if &name != expected || slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match {expected} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> VaeNca<U> {
        let aff = |a: &Affine<T>| Affine {
            weight: a.weight.cast(),
            bias: a.bias.cast(),
        };
        let head = |h: &DecoderHead<T>| DecoderHead {
            hidden: h.hidden.as_ref().map(aff),
            out: aff(&h.out),
        };
        VaeNca {
            config: self.config.clone(),
            encoder: EncoderParams {
                convs: self.encoder.convs.iter().map(aff).collect(),
                head: aff(&self.encoder.head),
            },
            decoder: HyperDecoderParams {
                heads: [
                    head(&self.decoder.heads[0]),
                    head(&self.decoder.heads[1]),
                    head(&self.decoder.heads[2]),
                    head(&self.decoder.heads[3]),
                ],
            },
        }
    }

    /// Records every parameter on `tape` (trainable or constant) and returns
    /// the structured handles plus the flat list in [`VaeNca::params`] order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (ModelVars, Vec<Var>) {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        (bind_from_vars(&self.config, &vars), vars)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub convs: Vec<AffineVars>,
    pub head: AffineVars,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub hidden: Option<AffineVars>,
    pub out: AffineVars,
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub heads: [HeadVars; 4],
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

/// Structures a flat handle list laid out in [`VaeNca::params`] order.
pub fn bind_from_vars(config: &ModelConfig, vars: &[Var]) -> ModelVars {
    let mut it = vars.chunks_exact(2).map(|p| AffineVars {
        weight: p[0],
        bias: p[1],
    });
    let mut next = || it.next().expect("parameter list matches config");
    let convs = config.encoder_widths.iter().map(|_| next()).collect();
    let head = next();
    let mut head_vars = || HeadVars {
        hidden: config.decoder_hidden.map(|_| next()),
        out: next(),
    };
    let heads = [head_vars(), head_vars(), head_vars(), head_vars()];
    ModelVars {
        encoder: EncoderVars { convs, head },
        decoder: DecoderVars { heads },
    }
}

/// Encodes an `S×S×4` image into `(mu, logvar)`, each of length `E`.
pub fn encode_on<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    enc: &EncoderVars,
    config: &ModelConfig,
) -> Result<(Var, Var)> {
    let s = config.image_size;
    if tape.value(image).shape() != [s, s, RGBA] {
        return Err(Error::dim(
            "encode",
            tape.value(image).shape(),
            &[s, s, RGBA],
        ));
    }
    let mut x = image;
    for layer in &enc.convs {
        let cols = tape.im2col(x, 3, 2, 1)?;
        let y = tape.affine(cols, layer.weight, Some(layer.bias))?;
        x = tape.relu(y);
    }
    let n = tape.value(x).numel();
    let flat = tape.reshape(x, [1, n])?;
    let out = tape.affine(flat, enc.head.weight, Some(enc.head.bias))?;
    let e = config.latent;
    let mu = tape.slice_channels(out, 0, e)?;
    let logvar = tape.slice_channels(out, e, 2 * e)?;
    Ok((tape.reshape(mu, [e])?, tape.reshape(logvar, [e])?))
}

/// `z = mu + exp(½·logvar)·ε`; with no noise, `z = mu`. The noise is a
/// constant, so gradients reach only `mu` and `logvar`.
pub fn sample_on<T: Scalar>(
    tape: &mut Tape<T>,
    mu: Var,
    logvar: Var,
    noise: Option<Var>,
) -> Result<Var> {
    match noise {
        None => Ok(mu),
        Some(eps) => {
            let half = tape.scale(logvar, T::from_f64_lossy(0.5));
            let std = tape.exp(half);
            let spread = tape.mul(std, eps)?;
            tape.add(mu, spread)
        }
    }
}

/// Decodes a latent code into rule parameters, one head per block.
pub fn decode_on<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    dec: &DecoderVars,
    config: &ModelConfig,
) -> Result<RuleVars> {
    let e = config.latent;
    if tape.value(z).numel() != e {
        return Err(Error::Config(format!(
            "latent code has {} values, decoder expects {e}",
            tape.value(z).numel()
        )));
    }
    let row = tape.reshape(z, [1, e])?;
    let shapes = config.rule_shapes();
    let mut blocks = Vec::with_capacity(4);
    for (head, shape) in dec.heads.iter().zip(shapes) {
        let mut h = row;
        if let Some(hidden) = head.hidden {
            let a = tape.affine(h, hidden.weight, Some(hidden.bias))?;
            h = tape.relu(a);
        }
        let flat = tape.affine(h, head.out.weight, Some(head.out.bias))?;
        blocks.push(tape.reshape(flat, shape)?);
    }
    Ok(RuleVars {
        w1: blocks[0],
        b1: blocks[1],
        w2: blocks[2],
        b2: blocks[3],
    })
}

/// Encoder outputs and the sampled code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T: Scalar = f32> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub z: Tensor<T>,
    /// The standard-normal draw used; `None` in deterministic mode.
    pub noise: Option<Tensor<T>>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn with_noise(mu: Tensor<T>, logvar: Tensor<T>, noise: Option<Tensor<T>>) -> Result<Self> {
        if mu.shape() != logvar.shape() {
            return Err(Error::dim("sample_latent", mu.shape(), logvar.shape()));
        }
        let z = match &noise {
            None => mu.clone(),
            Some(eps) => {
                if eps.shape() != mu.shape() {
                    return Err(Error::dim("sample_latent", mu.shape(), eps.shape()));
                }
                let half = T::from_f64_lossy(0.5);
                let data = mu
                    .data()
                    .iter()
                    .zip(logvar.data())
                    .zip(eps.data())
                    .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
                    .collect();
                Tensor::new(mu.shape().to_vec(), data)?
            }
        };
        Ok(Self {
            mu,
            logvar,
            z,
            noise,
        })
    }
}

/// Draws `z` from `N(mu, exp(logvar))`; `rng = None` selects deterministic
/// mode (`ε = 0`, `z = mu`).
pub fn sample_latent<T: Scalar>(
    mu: Tensor<T>,
    logvar: Tensor<T>,
    rng: Option<&mut Rng>,
) -> Result<LatentCode<T>> {
    let noise =
        rng.map(|r| Tensor::from_fn(mu.shape().to_vec(), |_| T::from_f64_lossy(r.normal())));
    LatentCode::with_noise(mu, logvar, noise)
}

pub fn encode<T: Scalar>(image: &Tensor<T>, model: &VaeNca<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let (vars, _) = model.bind(&mut tape, false);
    let img = tape.constant(image.clone());
    let (mu, logvar) = encode_on(&mut tape, img, &vars.encoder, &model.config)?;
    Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
}

pub fn decode_params<T: Scalar>(z: &Tensor<T>, model: &VaeNca<T>) -> Result<RuleParams<T>> {
    let mut tape = Tape::new();
    let (vars, _) = model.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let rule = decode_on(&mut tape, zv, &vars.decoder, &model.config)?;
    Ok(RuleParams::from_blocks(
        rule.all().map(|v| tape.value(v).clone()),
    ))
}

/// Decodes the rule an image encodes to. `rng = None` is deterministic mode.
pub fn rule_for_image<T: Scalar>(
    image: &Tensor<T>,
    model: &VaeNca<T>,
    rng: Option<&mut Rng>,
) -> Result<(RuleParams<T>, LatentCode<T>)> {
    let (mu, logvar) = encode(image, model)?;
    let latent = sample_latent(mu, logvar, rng)?;
    Ok((decode_params(&latent.z, model)?, latent))
}

/// encode → sample → decode → seed → rollout(T). Returns the final grid and
/// the latent code used.
pub fn forward<T: Scalar>(
    image: &Tensor<T>,
    model: &VaeNca<T>,
    rng: Option<&mut Rng>,
) -> Result<(CellGrid<T>, LatentCode<T>)> {
    let (rule, latent) = rule_for_image(image, model, rng)?;
    let c = &model.config;
    let seed = seed_canvas(c.image_size, c.image_size, c.channels)?;
    let out = nca::rollout(&seed, &rule, &c.perception, c.steps, None)?;
    Ok((out.grid, latent))
}

/// Perception filters for a model config, shared across rollouts.
pub fn perception_for<T: Scalar>(config: &ModelConfig) -> Result<Perception<T>> {
    Perception::new(&config.perception)
}
