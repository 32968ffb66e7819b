//! Central finite-difference checks of the tape's analytic gradients, run in
//! `f64`.

use crate::error::Result;
use crate::nca::{seed_canvas, Perception, PerceptionConfig, RuleParams};
use crate::tensor::{Rng, Tape, Tensor, Var};
use crate::vae::{self, ModelConfig, VaeNca};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Relative error between two gradient vectors, measured in L2 norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Compares analytic and central-difference gradients of a scalar function of
/// `inputs`. `build` records the function on a fresh tape given the input
/// handles and returns the scalar output. Returns the worst relative error
/// over all inputs.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .map(|v| tape.grad_or_zeros(*v))
            .collect::<Vec<_>>()
    };
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    Ok(worst)
}

/// Reduces a tensor-valued output to a scalar through a fixed random
/// projection so every output element contributes to the checked gradient.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::seeded(seed);
    let weights = Tensor::from_fn(tape.value(out).shape().to_vec(), |_| rng.normal());
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Random values kept at least `margin` away from zero, for ops with a kink there.
fn randn_away_from_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.normal();
        if v.abs() > margin {
            break v;
        }
    })
}

/// One line of a gradient-check report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }
}

/// Toy end-to-end configuration: a 4×4 canvas, four channels, hidden width 2.
pub fn pipeline_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        channels: 4,
        latent: 3,
        hidden: 2,
        steps: 3,
        perception: PerceptionConfig {
            sobel_sizes: vec![3],
            localmax_window: 3,
            include_identity: true,
        },
        encoder_widths: vec![2, 3],
        decoder_hidden: None,
    }
}

/// Runs the full suite: every differentiable op, one NCA step, and the toy
/// encoder→sample→decoder→rollout pipeline. `inject_fault` perturbs the
/// analytic side of the first check so callers can confirm failures surface.
pub fn run_suite(seed: u64, inject_fault: bool) -> Result<Report> {
    let mut rng = Rng::seeded(seed);
    let mut results = Vec::new();
    let mut push = |name: &str, err: f64| {
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
        })
    };

    let a = randn(&mut rng, &[4, 3]);
    let b = randn(&mut rng, &[3, 2]);
    let mut err = check(&[a, b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(t.sum(y))
    })?;
    if inject_fault {
        err += 1.0;
    }
    push("matmul", err);

    let x = randn(&mut rng, &[2, 3, 4]);
    let w = randn(&mut rng, &[4, 5]);
    let bias = randn(&mut rng, &[5]);
    push(
        "affine",
        check(&[x, w, bias], |t, v| {
            let y = t.affine(v[0], v[1], Some(v[2]))?;
            project(t, y, 11)
        })?,
    );

    let (x, y) = (randn(&mut rng, &[3, 4]), randn(&mut rng, &[3, 4]));
    push(
        "add",
        check(&[x.clone(), y.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            project(t, s, 12)
        })?,
    );
    push(
        "mul",
        check(&[x.clone(), y], |t, v| {
            let s = t.mul(v[0], v[1])?;
            project(t, s, 13)
        })?,
    );
    push(
        "scale",
        check(std::slice::from_ref(&x), |t, v| {
            let s = t.scale(v[0], -1.7);
            project(t, s, 14)
        })?,
    );
    push(
        "exp",
        check(std::slice::from_ref(&x), |t, v| {
            let s = t.exp(v[0]);
            project(t, s, 15)
        })?,
    );
    push(
        "relu",
        check(&[randn_away_from_zero(&mut rng, &[5, 4], 1e-3)], |t, v| {
            let s = t.relu(v[0]);
            project(t, s, 16)
        })?,
    );

    let (p, q) = (randn(&mut rng, &[2, 2, 3]), randn(&mut rng, &[2, 2, 2]));
    push(
        "concat_slice",
        check(&[p, q], |t, v| {
            let c = t.concat_channels(&[v[0], v[1]])?;
            let s = t.slice_channels(c, 1, 4)?;
            let r = t.reshape(s, [12])?;
            project(t, r, 17)
        })?,
    );

    let field = randn(&mut rng, &[5, 5, 2]);
    let kernel = randn(&mut rng, &[3, 3]);
    push(
        "conv2d_depthwise",
        check(std::slice::from_ref(&field), |t, v| {
            let s = t.conv2d_depthwise(v[0], &kernel)?;
            project(t, s, 18)
        })?,
    );
    push(
        "local_max",
        check(
            &[randn_away_from_zero(&mut rng, &[5, 5, 2], 1e-3)],
            |t, v| {
                let s = t.local_max(v[0], 3)?;
                project(t, s, 19)
            },
        )?,
    );
    push(
        "im2col",
        check(&[field], |t, v| {
            let s = t.im2col(v[0], 3, 2, 1)?;
            project(t, s, 20)
        })?,
    );

    let target = Tensor::from_fn([6], |_| rng.normal());
    push(
        "mse_loss",
        check(&[randn(&mut rng, &[6])], |t, v| {
            let tg = t.constant(target.clone());
            t.mse_loss(v[0], tg)
        })?,
    );
    push(
        "kl_divergence",
        check(&[randn(&mut rng, &[4]), randn(&mut rng, &[4])], |t, v| {
            t.kl_divergence(v[0], v[1])
        })?,
    );

    let cfg = PerceptionConfig {
        sobel_sizes: vec![3, 5],
        localmax_window: 3,
        include_identity: true,
    };
    let perception = Perception::new(&cfg)?;
    let (c, d) = (4, 3);
    let p_dim = cfg.perception_dim(c);
    let grid = randn(&mut rng, &[4, 4, c]);
    let rule = RuleParams::<f64> {
        w1: randn(&mut rng, &[p_dim, d]),
        b1: randn(&mut rng, &[d]),
        w2: randn(&mut rng, &[d, c]),
        b2: randn(&mut rng, &[c]),
    };
    push(
        "nca_step",
        check(&[grid, rule.w1, rule.b1, rule.w2, rule.b2], |t, v| {
            let vars = crate::nca::RuleVars {
                w1: v[1],
                b1: v[2],
                w2: v[3],
                b2: v[4],
            };
            let next = crate::nca::nca_step_on(t, v[0], &vars, &perception)?;
            project(t, next, 21)
        })?,
    );

    push("pipeline", pipeline_check(&mut rng)?);

    Ok(Report { results })
}

/// Gradient check of mse(rollout(decode(sample(encode(image))))) over every
/// model parameter on the toy configuration.
fn pipeline_check(rng: &mut Rng) -> Result<f64> {
    let config = pipeline_config();
    let mut model = VaeNca::<f64>::init(config.clone(), rng)?;
    // Fresh decoders emit a near-zero W2; randomize every tensor so each
    // parameter has a generic, non-vanishing gradient.
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = 0.5 * rng.normal();
        }
    }
    let n = config.image_size;
    let image = Tensor::from_fn([n, n, 4], |_| rng.uniform());
    let eps = Tensor::from_fn([config.latent], |_| rng.normal());
    let seed = seed_canvas::<f64>(n, n, config.channels)?;
    let perception = Perception::new(&config.perception)?;
    let params: Vec<Tensor<f64>> = model.params().into_iter().cloned().collect();
    check(&params, |t, v| {
        let bound = vae::bind_from_vars(&config, v);
        let img = t.constant(image.clone());
        let (mu, logvar) = vae::encode_on(t, img, &bound.encoder, &config)?;
        let noise = t.constant(eps.clone());
        let z = vae::sample_on(t, mu, logvar, Some(noise))?;
        let rule = vae::decode_on(t, z, &bound.decoder, &config)?;
        let grid = t.constant(seed.state().clone());
        let last = crate::nca::rollout_on(t, grid, &rule, &perception, config.steps)?;
        let rgba = t.slice_channels(last, 0, 4)?;
        let target = t.constant(image.clone());
        t.mse_loss(rgba, target)
    })
}
