//! Argument definitions and command runners for the `vnca` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use vnca::config::{write_echo, ResolvedConfig, RunConfig};
use vnca::data::{self, Checkpoint, CheckpointKind};
use vnca::tasks::{self, InferenceEcho};
use vnca::train::{self, SingleConfig, VaeTrainer};
use vnca::{gradcheck, VaeNca};

#[derive(Debug, Parser)]
#[command(name = "vnca", version, about = "Variational neural cellular automata")]
pub struct Cli {
    /// Worker threads for batch evaluation (1 runs everything on the caller).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the encoder and hypernetwork decoder on a dataset.
    Train(TrainArgs),
    /// Fit one rule directly to one image.
    TrainSingle(TrainSingleArgs),
    /// Save the growth of an image (or a single-rule checkpoint) as frames.
    Grow(GrowArgs),
    /// Encode an image and grow it back.
    Reconstruct(ImageArgs),
    /// Grow one canvas by alternating the rules of two images.
    Fuse(FuseArgs),
    /// Grow from a damaged image with a repair-trained model.
    Repair(ImageArgs),
    /// Compare every analytic gradient with central differences.
    Gradcheck(GradcheckArgs),
    /// Mean reconstruction error over a dataset split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; defaults to the mnist preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset_dir: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Directory for checkpoints, loss.csv and config.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainSingleArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for rule.vnca, grown.png, loss.csv and config.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GrowArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Required for full-model checkpoints.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub frames_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub snapshot_every: usize,
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image_a: PathBuf,
    #[arg(long)]
    pub image_b: PathBuf,
    /// Steps per turn; rule A runs first.
    #[arg(long, default_value_t = 1)]
    pub period: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt one backward rule to show that the check catches it.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset_dir: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

/// Whether a command that completed also met its own success criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure,
}

pub fn resolve_config(path: Option<&Path>) -> Result<ResolvedConfig> {
    let raw = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    Ok(raw.resolve()?)
}

fn load_model(path: &Path) -> Result<VaeNca<f32>> {
    let ck = Checkpoint::load(path)?;
    train::model_from_checkpoint(&ck)
        .with_context(|| format!("loading model from {}", path.display()))
}

fn echo_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}

fn echo(command: &str, ckpt: &Path, inputs: &[&Path], model: &VaeNca<f32>) -> InferenceEcho {
    InferenceEcho {
        command: command.into(),
        checkpoint: ckpt.to_path_buf(),
        inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        model: model.config.clone(),
        deterministic: true,
        period: None,
        snapshot_every: None,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<Outcome> {
    match cli.command {
        Command::Train(a) => train_cmd(a, out),
        Command::TrainSingle(a) => train_single_cmd(a, out),
        Command::Grow(a) => grow_cmd(a, out),
        Command::Reconstruct(a) => image_cmd("reconstruct", a, out),
        Command::Repair(a) => image_cmd("repair", a, out),
        Command::Fuse(a) => fuse_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
    }
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = resolve_config(a.config.as_deref())?;
    let mut ds = data::load_dataset_dir(&a.dataset_dir, &a.split, Some(cfg.model.image_size))?;
    if let Some(n) = cfg.dataset_limit {
        ds.truncate(n);
    }
    ensure!(
        !ds.is_empty(),
        "no images in split `{}` of {}",
        a.split,
        a.dataset_dir.display()
    );
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_echo(&a.out.join("config.json"), &cfg)?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = VaeTrainer::from_checkpoint(&Checkpoint::load(p)?)?;
            ensure!(
                t.model().config == cfg.model,
                "checkpoint architecture differs from the configuration"
            );
            t.set_train_steps(cfg.train.train_steps);
            t
        }
        None => VaeTrainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    writeln!(
        out,
        "training on {} images from {}",
        ds.len(),
        a.dataset_dir.display()
    )?;
    let mut io_err = None;
    trainer.fit(&ds.images, Some(&a.out), |s| {
        if let Err(e) = writeln!(
            out,
            "step {} loss {:.6} mse {:.6} kl {:.6}",
            s.step, s.loss, s.mse, s.kl
        ) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    writeln!(
        out,
        "wrote {}",
        a.out.join(train::LATEST_CHECKPOINT).display()
    )?;
    Ok(Outcome::Success)
}

fn train_single_cmd(a: TrainSingleArgs, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = resolve_config(a.config.as_deref())?;
    let target = data::fit_square(&data::load_png(&a.image)?, cfg.model.image_size)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_echo(&a.out.join("config.json"), &cfg)?;

    let single = SingleConfig::from_configs(&cfg.model, &cfg.train);
    let mut log = String::from("step,loss\n");
    let report = train::train_single(&target, &single, |step, loss| {
        log.push_str(&format!("{step},{loss}\n"));
    })?;
    std::fs::write(a.out.join(train::LOSS_LOG), log).context("writing loss log")?;
    if report.zero_grad_steps > 0 {
        log::warn!(
            "gradients were zero on {} of {} steps; the rule never affected the output",
            report.zero_grad_steps,
            report.losses.len()
        );
    }
    tasks::rule_checkpoint(&cfg.model, &report.params, Some(report.best_loss))
        .save(&a.out.join("rule.vnca"))?;
    let grown = tasks::grow(&cfg.model, &report.params, None)?
        .pop()
        .expect("final image");
    data::save_png(&grown, &a.out.join("grown.png"))?;
    writeln!(out, "best_loss={}", report.best_loss)?;
    Ok(Outcome::Success)
}

fn grow_cmd(a: GrowArgs, out: &mut dyn Write) -> Result<Outcome> {
    ensure!(a.snapshot_every > 0, "--snapshot-every must be at least 1");
    let ck = Checkpoint::load(&a.ckpt)?;
    let model_cfg = ck.meta.model.clone();
    let frames = match ck.meta.kind {
        CheckpointKind::Rule => {
            let rule = tasks::rule_from_checkpoint(&ck)?;
            tasks::grow(&model_cfg, &rule, Some(a.snapshot_every))?
        }
        CheckpointKind::VaeNca => {
            let Some(image_path) = &a.image else {
                bail!("--image is required with a full-model checkpoint");
            };
            let model = train::model_from_checkpoint(&ck)?;
            let image = data::load_png(image_path)?;
            tasks::grow_image(&model, &image, Some(a.snapshot_every))?
        }
    };
    let written = data::save_frames(&frames, &a.frames_dir)?;
    let echo = InferenceEcho {
        command: "grow".into(),
        checkpoint: a.ckpt.clone(),
        inputs: a.image.iter().cloned().collect(),
        model: model_cfg,
        deterministic: true,
        period: None,
        snapshot_every: Some(a.snapshot_every),
    };
    std::fs::create_dir_all(&a.frames_dir)?;
    write_echo(&a.frames_dir.join("config.json"), &echo)?;
    writeln!(
        out,
        "wrote {} frames to {}",
        written.len(),
        a.frames_dir.display()
    )?;
    Ok(Outcome::Success)
}

fn image_cmd(command: &str, a: ImageArgs, out: &mut dyn Write) -> Result<Outcome> {
    let model = load_model(&a.ckpt)?;
    let image = data::load_png(&a.image)?;
    let result = tasks::reconstruct(&model, &image)?;
    data::save_png(&result, &a.out)?;
    write_echo(
        &echo_path(&a.out),
        &echo(command, &a.ckpt, &[&a.image], &model),
    )?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(Outcome::Success)
}

fn fuse_cmd(a: FuseArgs, out: &mut dyn Write) -> Result<Outcome> {
    let model = load_model(&a.ckpt)?;
    let (img_a, img_b) = (data::load_png(&a.image_a)?, data::load_png(&a.image_b)?);
    let result = tasks::fuse(&model, &img_a, &img_b, a.period)?;
    data::save_png(&result, &a.out)?;
    let mut e = echo("fuse", &a.ckpt, &[&a.image_a, &a.image_b], &model);
    e.period = Some(a.period);
    write_echo(&echo_path(&a.out), &e)?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(Outcome::Success)
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> Result<Outcome> {
    let report = gradcheck::run_suite(a.seed, a.inject_fault)?;
    for r in &report.results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<18} max_rel_error={:.3e} {status}",
            r.name, r.max_rel_error
        )?;
    }
    Ok(if report.passed() {
        writeln!(
            out,
            "gradcheck passed (tolerance {:.0e})",
            gradcheck::TOLERANCE
        )?;
        Outcome::Success
    } else {
        writeln!(out, "gradcheck FAILED")?;
        Outcome::Failure
    })
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<Outcome> {
    let model = load_model(&a.ckpt)?;
    let ds = data::load_dataset_dir(&a.dataset_dir, &a.split, Some(model.config.image_size))?;
    let mean = tasks::mean_reconstruction_mse(&model, &ds.images).with_context(|| {
        format!(
            "evaluating split `{}` of {}",
            a.split,
            a.dataset_dir.display()
        )
    })?;
    writeln!(out, "images={}", ds.len())?;
    writeln!(out, "mean_mse={mean}")?;
    Ok(Outcome::Success)
}
